#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include "tridet/run_config.hpp"

namespace tridet::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kFailure = 2 };

struct Invocation {
  std::string command;
  RunConfig config;
  std::optional<std::filesystem::path> checkpoint;
};

/// Thrown for unknown flags, bad flag values and unusable config files.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Config file first, then command-line flags on top of it. `--help`
/// yields an Invocation with an empty command.
Invocation parse(int argc, const char* const* argv, std::ostream& out);

/// gen-data | train-base | finetune | incremental | eval | ablate | gradcheck.
/// Progress and the resolved config go to `err`; results go to files.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace tridet::cli
