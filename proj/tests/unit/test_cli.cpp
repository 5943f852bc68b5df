#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "tridet/checkpoint.hpp"
#include "tridet/cli.hpp"

using namespace tridet;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "tridet");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("tridet_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

fs::path write_config(const fs::path& dir, const nlohmann::json& j) {
  fs::path p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

nlohmann::json tiny() {
  return {{"data", {{"base_train", 6}, {"base_test", 3}, {"incremental_train", 4}, {"test", 3}}},
          {"base", {{"epochs", 1}}},
          {"incremental", {{"epochs", 1}}},
          {"ablation_seeds", {0}}};
}

std::set<fs::path> listing(const fs::path& root) {
  std::set<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) out.insert(fs::relative(e.path(), root));
  return out;
}

}  // namespace

TEST_CASE("usage errors exit with 1") {
  CHECK(run({}).code == cli::kUsage);
  CHECK(run({"bogus"}).code == cli::kUsage);
  CHECK(run({"gen-data", "--no-such-flag"}).code == cli::kUsage);
  CHECK(run({"gen-data", "--d-fea", "maybe"}).code == cli::kUsage);
  CHECK(run({"gen-data", "--config", "/nonexistent/c.json"}).code == cli::kUsage);
  CHECK(run({"incremental", "--theta-low", "0.95"}).code == cli::kUsage);
  auto help = run({"--help"});
  CHECK(help.code == cli::kOk);
  CHECK(help.out.find("gen-data") != std::string::npos);
}

TEST_CASE("unknown config keys are usage errors") {
  auto dir = fresh("badkey");
  auto cfg = write_config(dir, {{"lamda", 1.0}});
  auto r = run({"gen-data", "--config", cfg.string()});
  CHECK(r.code == cli::kUsage);
  CHECK(r.err.find("lamda") != std::string::npos);
}

TEST_CASE("flags override the config file") {
  auto dir = fresh("precedence");
  auto j = tiny();
  j["seed"] = 3;
  j["thresholds"] = {{"theta_low", 0.2}, {"theta_high", 0.8}};
  j["switches"] = {{"d_fea", false}, {"d_cls", false}};
  j["out_dir"] = (dir / "from_config").string();
  auto cfg = write_config(dir, j);

  std::ostringstream sink;
  const std::string path = cfg.string(), out = (dir / "from_flag").string();
  const char* argv[] = {"tridet", "incremental", "--config", path.c_str(), "--seed", "7",
                        "--theta-low", "0.15", "--d-fea", "on", "--out", out.c_str()};
  auto inv = cli::parse(12, argv, sink);
  CHECK(inv.command == "incremental");
  CHECK(inv.config.seed == 7);
  CHECK(inv.config.incremental.thresholds.theta_low == 0.15);
  CHECK(inv.config.incremental.thresholds.theta_high == 0.8);
  CHECK(inv.config.incremental.switches.d_fea);
  CHECK_FALSE(inv.config.incremental.switches.d_cls);
  CHECK(inv.config.out_dir == fs::path(out));
  CHECK(inv.config.data.base_train == 6);
}

TEST_CASE("missing inputs are runtime failures") {
  auto dir = fresh("missing");
  auto r = run({"train-base", "--out", (dir / "out").string()});
  CHECK(r.code == cli::kFailure);
  CHECK(r.err.find("gen-data") != std::string::npos);
}

TEST_CASE("pipeline end to end") {
  auto root = fresh("pipeline");
  auto cfg = write_config(root, tiny()).string();
  const std::string out = (root / "out").string();
  auto before = listing(root);

  auto gen = run({"gen-data", "--config", cfg, "--out", out});
  REQUIRE(gen.code == cli::kOk);
  CHECK(gen.err.find("seed: 0") != std::string::npos);
  CHECK(gen.err.find("\"lambda\"") != std::string::npos);
  CHECK(gen.out.empty());
  REQUIRE(run({"train-base", "--config", cfg, "--out", out}).code == cli::kOk);
  CHECK(fs::exists(root / "out/checkpoints/om/params.bin"));
  CHECK(fs::exists(root / "out/base_log.csv"));

  REQUIRE(run({"incremental", "--config", cfg, "--out", out, "--seed", "7"}).code == cli::kOk);
  const auto im1 = checkpoint_hash(root / "out/checkpoints/incremental/im");
  const auto rm1 = checkpoint_hash(root / "out/checkpoints/incremental/rm");
  REQUIRE(run({"incremental", "--config", cfg, "--out", out, "--seed", "7"}).code == cli::kOk);
  CHECK(checkpoint_hash(root / "out/checkpoints/incremental/im") == im1);
  CHECK(checkpoint_hash(root / "out/checkpoints/incremental/rm") == rm1);

  std::ifstream ev(root / "out/incremental_eval.json");
  auto report = nlohmann::json::parse(ev);
  CHECK(report["om_sha256_before"] == report["om_sha256_after"]);

  REQUIRE(run({"finetune", "--config", cfg, "--out", out}).code == cli::kOk);
  CHECK(fs::exists(root / "out/checkpoints/finetune/im/manifest.json"));
  REQUIRE(run({"eval", "--config", cfg, "--out", out}).code == cli::kOk);
  CHECK(fs::exists(root / "out/eval.json"));

  REQUIRE(run({"ablate", "--config", cfg, "--out", out}).code == cli::kOk);
  std::ifstream csv(root / "out/ablation.csv");
  std::vector<std::string> lines;
  for (std::string line; std::getline(csv, line);) lines.push_back(line);
  REQUIRE(lines.size() == 1 + 10 * 2);
  std::vector<std::string> variants;
  for (std::size_t i = 1; i < lines.size(); i += 2) variants.push_back(lines[i].substr(0, lines[i].find(',')));
  CHECK(variants == std::vector<std::string>{"old-model", "finetune", "baseline", "fea", "res", "cls",
                                             "2th", "fea+res", "fea+res+cls", "full"});

  // nothing appeared next to the output directory
  auto after = listing(root);
  for (const auto& p : after)
    if (!before.count(p)) CHECK(p.begin()->string() == "out");
}

TEST_CASE("gradcheck reports every case below tolerance") {
  auto root = fresh("gradcheck");
  auto r = run({"gradcheck", "--out", root.string()});
  CHECK(r.code == cli::kOk);
  std::ifstream in(root / "gradcheck.json");
  auto j = nlohmann::json::parse(in);
  REQUIRE(j["entries"].size() >= 30);
  for (const auto& e : j["entries"]) {
    CAPTURE(e["name"].get<std::string>());
    CHECK(e["max_rel_error"].get<double>() < 1e-4);
    CHECK(e["instances"].get<int>() >= 10);
  }
}
