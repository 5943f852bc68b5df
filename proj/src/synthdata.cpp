#include "tridet/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace tridet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using SceneRng = std::mt19937_64;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

SceneRng scene_rng(std::uint64_t seed, std::size_t index) {
  return SceneRng(splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(index) + 1)));
}

bool inside_shape(ShapeKind s, double u, double v) {
  switch (s) {
    case ShapeKind::Square: return true;
    case ShapeKind::Circle: {
      const double du = u - 0.5, dv = v - 0.5;
      return du * du + dv * dv <= 0.25;
    }
    case ShapeKind::Triangle: return std::fabs(u - 0.5) <= 0.5 * v;
    case ShapeKind::Cross: return std::fabs(u - 0.5) <= 1.0 / 6.0 || std::fabs(v - 0.5) <= 1.0 / 6.0;
    case ShapeKind::Ring: {
      const double du = u - 0.5, dv = v - 0.5, r2 = du * du + dv * dv;
      return r2 <= 0.25 && r2 >= 0.25 * 0.55 * 0.55;
    }
    case ShapeKind::Bar: return std::fabs(u - v) <= 0.25;
  }
  return false;
}

void paint(Tensor& image, const BBox& box, const ClassDef& cls) {
  const std::size_t S = image.dim(1);
  for (auto y = static_cast<std::size_t>(box.y1); y < static_cast<std::size_t>(box.y2) && y < S; ++y)
    for (auto x = static_cast<std::size_t>(box.x1); x < static_cast<std::size_t>(box.x2) && x < S;
         ++x) {
      const double u = (static_cast<double>(x) + 0.5 - box.x1) / box.width();
      const double v = (static_cast<double>(y) + 0.5 - box.y1) / box.height();
      if (!inside_shape(cls.shape, u, v)) continue;
      for (std::size_t c = 0; c < 3; ++c) image.at(c, y, x) = cls.color[c];
    }
}

/// Places `picks` (class indices into `pool`) without exceeding the pairwise
/// IoU limit. Drops trailing objects when placement keeps failing.
Scene render_scene(std::span<const ClassDef* const> picks, SceneRng& rng,
                   const SceneLimits& limits) {
  const auto S = static_cast<int>(limits.image_size);
  std::uniform_int_distribution<int> side(limits.min_side, limits.max_side);
  std::size_t count = picks.size();
  std::vector<BBox> boxes;
  for (;;) {
    boxes.clear();
    bool ok = true;
    for (std::size_t k = 0; k < count && ok; ++k) {
      bool placed = false;
      for (int attempt = 0; attempt < limits.placement_attempts && !placed; ++attempt) {
        const int w = side(rng), h = side(rng);
        const int x = std::uniform_int_distribution<int>(0, S - w)(rng);
        const int y = std::uniform_int_distribution<int>(0, S - h)(rng);
        const BBox b{double(x), double(y), double(x + w), double(y + h)};
        bool clear = true;
        for (const auto& o : boxes)
          if (iou(o, b) > limits.max_pair_iou) {
            clear = false;
            break;
          }
        if (clear) {
          boxes.push_back(b);
          placed = true;
        }
      }
      ok = placed;
    }
    if (ok) break;
    if (count == 1) throw std::runtime_error("cannot place a single object in the image");
    --count;
  }

  Scene scene;
  scene.image = Tensor(Shape{3, limits.image_size, limits.image_size});
  std::uniform_real_distribution<double> bg(0.0, 0.25);
  const double bgc[3] = {bg(rng), bg(rng), bg(rng)};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < limits.image_size * limits.image_size; ++i)
      scene.image[c * limits.image_size * limits.image_size + i] = bgc[c];
  for (std::size_t k = 0; k < count; ++k) {
    paint(scene.image, boxes[k], *picks[k]);
    scene.objects.push_back({boxes[k], picks[k]->class_id});
  }
  std::normal_distribution<double> noise(0.0, limits.noise_sigma);
  for (double& v : scene.image.data()) v = std::clamp(v + noise(rng), 0.0, 1.0);
  return scene;
}

std::vector<Scene> filter_annotations(std::span<const Scene> scenes, std::span<const int> ids) {
  std::vector<Scene> out;
  for (const auto& s : scenes) {
    Scene copy{s.image, {}};
    for (const auto& o : s.objects)
      if (std::find(ids.begin(), ids.end(), o.class_id) != ids.end()) copy.objects.push_back(o);
    out.push_back(std::move(copy));
  }
  return out;
}

}  // namespace

std::string shape_name(ShapeKind s) {
  switch (s) {
    case ShapeKind::Square: return "square";
    case ShapeKind::Circle: return "circle";
    case ShapeKind::Triangle: return "triangle";
    case ShapeKind::Cross: return "cross";
    case ShapeKind::Ring: return "ring";
    case ShapeKind::Bar: return "bar";
  }
  return "?";
}

ShapeKind parse_shape(const std::string& name) {
  for (auto s : {ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle, ShapeKind::Cross,
                 ShapeKind::Ring, ShapeKind::Bar})
    if (shape_name(s) == name) return s;
  throw std::invalid_argument("unknown shape '" + name + "'");
}

std::vector<ClassDef> default_classes() {
  return {
      {1, ShapeKind::Square, {0.90, 0.15, 0.10}},
      {2, ShapeKind::Circle, {0.15, 0.85, 0.20}},
      {3, ShapeKind::Triangle, {0.20, 0.35, 0.95}},
      {4, ShapeKind::Cross, {0.95, 0.90, 0.15}},
      {5, ShapeKind::Ring, {0.90, 0.20, 0.85}},
      {6, ShapeKind::Bar, {0.20, 0.90, 0.90}},
  };
}

void validate_classes(std::span<const ClassDef> classes) {
  std::set<int> ids;
  std::set<std::pair<int, std::array<double, 3>>> looks;
  for (const auto& c : classes) {
    if (c.class_id < 1) throw std::invalid_argument("class ids must be >= 1");
    if (!ids.insert(c.class_id).second)
      throw std::invalid_argument("duplicate class id " + std::to_string(c.class_id));
    if (!looks.insert({static_cast<int>(c.shape), c.color}).second)
      throw std::invalid_argument("duplicate (shape, colour) for class " +
                                  std::to_string(c.class_id));
  }
}

std::vector<Scene> generate_dataset(std::span<const ClassDef> classes, std::size_t n,
                                    std::uint64_t seed, const SceneLimits& limits) {
  if (n == 0) throw std::invalid_argument("generate_dataset: n must be >= 1");
  if (classes.empty()) throw std::invalid_argument("generate_dataset: no classes");
  validate_classes(classes);
  std::vector<Scene> scenes;
  scenes.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    SceneRng rng = scene_rng(seed, i);
    const auto count = std::uniform_int_distribution<std::size_t>(limits.min_objects,
                                                                  limits.max_objects)(rng);
    std::uniform_int_distribution<std::size_t> pick(0, classes.size() - 1);
    std::vector<const ClassDef*> picks;
    for (std::size_t k = 0; k < count; ++k) picks.push_back(&classes[pick(rng)]);
    scenes.push_back(render_scene(picks, rng, limits));
  }
  return scenes;
}

std::vector<Scene> generate_incremental_dataset(std::span<const ClassDef> old_classes,
                                                std::span<const ClassDef> new_classes,
                                                std::size_t n, std::uint64_t seed,
                                                double cooccur, const SceneLimits& limits) {
  if (n == 0) throw std::invalid_argument("generate_incremental_dataset: n must be >= 1");
  if (new_classes.empty()) throw std::invalid_argument("generate_incremental_dataset: no new classes");
  std::vector<ClassDef> all(old_classes.begin(), old_classes.end());
  all.insert(all.end(), new_classes.begin(), new_classes.end());
  validate_classes(all);
  std::vector<int> new_ids;
  for (const auto& c : new_classes) new_ids.push_back(c.class_id);

  std::vector<Scene> scenes;
  for (std::size_t i = 0; i < n; ++i) {
    SceneRng rng = scene_rng(seed ^ 0x5eedf00dull, i);
    std::uniform_int_distribution<std::size_t> one_two(1, 2);
    std::vector<const ClassDef*> picks;
    const std::size_t n_new = one_two(rng);
    std::uniform_int_distribution<std::size_t> pick_new(0, new_classes.size() - 1);
    for (std::size_t k = 0; k < n_new; ++k) picks.push_back(&new_classes[pick_new(rng)]);
    if (!old_classes.empty() && std::bernoulli_distribution(cooccur)(rng)) {
      const std::size_t n_old = one_two(rng);
      std::uniform_int_distribution<std::size_t> pick_old(0, old_classes.size() - 1);
      for (std::size_t k = 0; k < n_old; ++k) picks.push_back(&old_classes[pick_old(rng)]);
    }
    scenes.push_back(render_scene(picks, rng, limits));
  }
  return incremental_subset(scenes, new_ids);
}

std::vector<Scene> incremental_subset(std::span<const Scene> scenes, std::span<const int> new_ids) {
  std::vector<Scene> out;
  for (auto& s : filter_annotations(scenes, new_ids))
    if (!s.objects.empty()) out.push_back(std::move(s));
  return out;
}

std::vector<Scene> restrict_annotations(std::span<const Scene> scenes, std::span<const int> ids) {
  return filter_annotations(scenes, ids);
}

// ---------------------------------------------------------------------------
// I/O

void write_ppm(const Tensor& image, const fs::path& path) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw ShapeError("write_ppm: expected [3,h,w], got " + shape_str(image.shape()));
  const std::size_t H = image.dim(1), W = image.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  out << "P6\n" << W << ' ' << H << "\n255\n";
  std::string row(W * 3, '\0');
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(image.at(c, y, x), 0.0, 1.0);
        row[x * 3 + c] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
      }
    out.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw std::runtime_error(path.string() + ": write failed");
}

Tensor read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path.string() + ": cannot open");
  auto token = [&]() {
    std::string t;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(ch);
    }
    return t;
  };
  if (token() != "P6") throw std::runtime_error(path.string() + ": not a binary PPM (P6)");
  std::size_t W = 0, H = 0, maxval = 0;
  try {
    W = std::stoul(token());
    H = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw std::runtime_error(path.string() + ": malformed PPM header");
  }
  if (W == 0 || H == 0 || maxval != 255)
    throw std::runtime_error(path.string() + ": unsupported PPM geometry or depth");
  std::string bytes(W * H * 3, '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
    throw std::runtime_error(path.string() + ": truncated pixel data");
  Tensor image(Shape{3, H, W});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        image.at(c, y, x) = static_cast<unsigned char>(bytes[(y * W + x) * 3 + c]) / 255.0;
  return image;
}

void save_dataset(std::span<const Scene> scenes, const fs::path& dir) {
  fs::create_directories(dir);
  json images = json::array();
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%05zu.ppm", i);
    write_ppm(scenes[i].image, dir / name);
    json objects = json::array();
    for (const auto& o : scenes[i].objects)
      objects.push_back({{"x1", o.bbox.x1},
                         {"y1", o.bbox.y1},
                         {"x2", o.bbox.x2},
                         {"y2", o.bbox.y2},
                         {"class_id", o.class_id}});
    images.push_back({{"file", name},
                      {"width", scenes[i].image.dim(2)},
                      {"height", scenes[i].image.dim(1)},
                      {"objects", objects}});
  }
  std::ofstream out(dir / "annotations.json");
  out << json{{"images", images}}.dump(2) << "\n";
  if (!out) throw std::runtime_error((dir / "annotations.json").string() + ": write failed");
}

std::vector<Scene> load_dataset(const fs::path& dir) {
  const fs::path manifest = dir / "annotations.json";
  std::ifstream in(manifest);
  if (!in) throw std::runtime_error(manifest.string() + ": cannot open");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error(manifest.string() + ": malformed manifest: " + e.what());
  }
  std::vector<Scene> scenes;
  try {
    for (const auto& entry : j.at("images")) {
      const auto file = entry.at("file").get<std::string>();
      const fs::path img_path = dir / file;
      if (!fs::exists(img_path)) throw std::runtime_error(img_path.string() + ": missing image file");
      Scene s{read_ppm(img_path), {}};
      if (s.image.dim(2) != entry.at("width").get<std::size_t>() ||
          s.image.dim(1) != entry.at("height").get<std::size_t>())
        throw std::runtime_error(img_path.string() + ": size disagrees with manifest");
      for (const auto& o : entry.at("objects")) {
        LabeledBox b{{o.at("x1").get<double>(), o.at("y1").get<double>(), o.at("x2").get<double>(),
                      o.at("y2").get<double>()},
                     o.at("class_id").get<int>()};
        if (!b.bbox.valid())
          throw std::runtime_error(manifest.string() + ": invalid box in entry " + file);
        s.objects.push_back(b);
      }
      scenes.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw std::runtime_error(manifest.string() + ": malformed manifest: " + e.what());
  }
  return scenes;
}

}  // namespace tridet
