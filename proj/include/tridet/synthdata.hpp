#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tridet/boxes.hpp"
#include "tridet/tensor.hpp"

namespace tridet {

enum class ShapeKind { Square, Circle, Triangle, Cross, Ring, Bar };

std::string shape_name(ShapeKind s);
ShapeKind parse_shape(const std::string& name);

struct ClassDef {
  int class_id = 1;
  ShapeKind shape = ShapeKind::Square;
  std::array<double, 3> color{1.0, 1.0, 1.0};
};

/// A 3x64x64 image in [0,1] with its annotations.
struct Scene {
  Tensor image;
  std::vector<LabeledBox> objects;
};

/// Six classes, one per shape, each in a distinct colour; ids 1..6.
std::vector<ClassDef> default_classes();

/// Throws std::invalid_argument on duplicate ids or duplicate (shape, colour) pairs.
void validate_classes(std::span<const ClassDef> classes);

struct SceneLimits {
  std::size_t image_size = 64;
  std::size_t min_objects = 1;
  std::size_t max_objects = 4;
  int min_side = 10;
  int max_side = 28;
  double max_pair_iou = 0.2;
  double noise_sigma = 0.02;
  int placement_attempts = 100;
};

/// Scenes with 1-4 objects whose classes are drawn uniformly from `classes`.
/// Scene i is generated from its own stream derived from (seed, i).
std::vector<Scene> generate_dataset(std::span<const ClassDef> classes, std::size_t n,
                                    std::uint64_t seed, const SceneLimits& limits = {});

/// Scenes holding 1-2 new-class objects; with probability `cooccur` they also
/// hold 1-2 old-class objects. Old-class annotations are stripped.
std::vector<Scene> generate_incremental_dataset(std::span<const ClassDef> old_classes,
                                                std::span<const ClassDef> new_classes,
                                                std::size_t n, std::uint64_t seed,
                                                double cooccur = 0.5,
                                                const SceneLimits& limits = {});

/// Keeps scenes with at least one object of `new_ids` and drops every other
/// annotation from them.
std::vector<Scene> incremental_subset(std::span<const Scene> scenes, std::span<const int> new_ids);

/// Keeps only annotations whose class is in `ids`; images untouched.
std::vector<Scene> restrict_annotations(std::span<const Scene> scenes, std::span<const int> ids);

/// Writes img_NNNNN.ppm (binary P6, 8-bit) plus annotations.json.
void save_dataset(std::span<const Scene> scenes, const std::filesystem::path& dir);
std::vector<Scene> load_dataset(const std::filesystem::path& dir);

void write_ppm(const Tensor& image, const std::filesystem::path& path);
Tensor read_ppm(const std::filesystem::path& path);

}  // namespace tridet
