#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "tridet/detector.hpp"

namespace tridet {

struct GradSuiteOptions {
  std::size_t instances = 10;
  std::uint64_t seed = 0;
  double step = 1e-5;
  double tolerance = 1e-4;
};

struct GradSuiteEntry {
  std::string name;
  std::size_t instances = 0;
  std::size_t coords = 0;
  std::size_t resampled = 0;  // instances redrawn for lying too close to a kink
  double max_error = 0.0;
  double seconds = 0.0;
  bool passed = false;
  std::string failure;
};

/// Architecture used for end-to-end checks: 16x16 input, two channels per
/// layer, 8-wide hidden layers.
DetectorConfig micro_config();

/// Every differentiable primitive plus attn_pair, d_fea, d_res (base and
/// pooled halves), d_cls, frcnn_loss and the full objective on micro models.
std::vector<std::string> gradient_suite_names();

std::vector<GradSuiteEntry> run_gradient_suite(const GradSuiteOptions& options = {});

/// Runs only the named entry; throws std::invalid_argument for an unknown name.
GradSuiteEntry run_gradient_case(const std::string& name, const GradSuiteOptions& options = {});

}  // namespace tridet
