#include "tridet/cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "tridet/checkpoint.hpp"
#include "tridet/experiment.hpp"
#include "tridet/gradsuite.hpp"
#include "tridet/synthdata.hpp"

namespace tridet::cli {

namespace fs = std::filesystem;

namespace {

const char* const kCommands[] = {"gen-data", "train-base", "finetune", "incremental",
                                 "eval",     "ablate",     "gradcheck"};

bool on_off(const std::string& v) { return v == "on"; }

std::vector<ClassDef> class_defs(std::span<const int> ids) {
  const auto all = default_classes();
  std::vector<ClassDef> out;
  for (int id : ids) {
    const auto it = std::find_if(all.begin(), all.end(),
                                 [id](const ClassDef& c) { return c.class_id == id; });
    if (it == all.end())
      throw std::invalid_argument("class id " + std::to_string(id) + " is not one of the " +
                                  std::to_string(all.size()) + " synthetic classes");
    out.push_back(*it);
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  out << text;
  if (!out) throw std::runtime_error(path.string() + ": write failed");
}

std::vector<Scene> load_split(const RunConfig& c, const char* name) {
  const fs::path dir = c.resolved_data_dir() / name;
  if (!fs::exists(dir / "annotations.json"))
    throw std::runtime_error(dir.string() + ": dataset missing (run gen-data first)");
  return load_dataset(dir);
}

DetectorModel load_model(const fs::path& dir, const char* role) {
  if (!fs::exists(dir / "manifest.json"))
    throw std::runtime_error(dir.string() + ": no " + role + " checkpoint here");
  return load_checkpoint(dir);
}

std::string map_summary(const APReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << "mAP old " << r.map_old << "  new " << r.map_new
     << "  all " << r.map_all;
  return os.str();
}

int gen_data(const RunConfig& c, std::ostream& err) {
  const auto old_defs = class_defs(c.split.old_ids);
  const auto new_defs = class_defs(c.split.new_ids);
  std::vector<ClassDef> all_defs = old_defs;
  all_defs.insert(all_defs.end(), new_defs.begin(), new_defs.end());
  const fs::path dir = c.resolved_data_dir();
  save_dataset(generate_dataset(old_defs, c.data.base_train, c.seed), dir / "base_train");
  save_dataset(generate_dataset(old_defs, c.data.base_test, c.seed + 1000003), dir / "base_test");
  const auto inc = generate_incremental_dataset(old_defs, new_defs, c.data.incremental_train,
                                                c.seed + 2000003, c.data.cooccur);
  save_dataset(inc, dir / "incremental");
  save_dataset(generate_dataset(all_defs, c.data.test, c.seed + 3000003), dir / "test");
  err << "wrote datasets under " << dir.string() << " (" << c.data.base_train << " base, "
      << inc.size() << " incremental, " << c.data.test << " test scenes)\n";
  return kOk;
}

int train_base_cmd(const RunConfig& c, std::ostream& err) {
  const auto train = load_split(c, "base_train");
  const auto test = load_split(c, "base_test");
  BaseTrainConfig cfg{c.base_schedule, c.seed};
  err << "training old model on " << train.size() << " scenes\n";
  const BaseResult r = train_base(DetectorConfig{}, c.split.old_ids, train, cfg, test);
  const fs::path ckpt = c.resolved_checkpoint_dir() / "om";
  save_checkpoint(r.model, ckpt);
  fs::create_directories(c.out_dir);
  write_epoch_csv(r.log, c.out_dir / "base_log.csv");
  const APReport rep =
      evaluate_model(r.model, test, c.split.om_labels(), c.split.old_ids, {});
  nlohmann::json j = report_to_json(rep);
  j["checkpoint"] = ckpt.string();
  j["checkpoint_sha256"] = checkpoint_hash(ckpt);
  write_text(c.out_dir / "base_eval.json", j.dump(2) + "\n");
  err << "old model: " << map_summary(rep) << "\n";
  return kOk;
}

int incremental_cmd(const RunConfig& c, bool finetune, std::ostream& err) {
  const fs::path om_dir = c.resolved_checkpoint_dir() / "om";
  const DetectorModel om = load_model(om_dir, "old-model");
  const std::string om_hash_before = checkpoint_hash(om_dir);
  const auto train = load_split(c, "incremental");
  const auto test = load_split(c, "test");
  TrainConfig cfg = c.incremental;
  cfg.seed = c.seed;
  if (finetune) cfg.switches = LossSwitches{false, false, false, false, false};
  const char* name = finetune ? "finetune" : "incremental";
  err << name << ": " << train.size() << " scenes, " << cfg.schedule.epochs << " epochs\n";
  const IncrementalResult r = train_incremental(om, c.split, train, cfg, test);
  const fs::path dir = c.resolved_checkpoint_dir() / name;
  save_checkpoint(r.triple.im, dir / "im");
  save_checkpoint(r.triple.rm, dir / "rm");
  fs::create_directories(c.out_dir);
  write_epoch_csv(r.log, c.out_dir / (std::string(name) + "_log.csv"));
  const APReport rep = evaluate_model(r.triple.im, test, c.split.im_labels(), c.split.old_ids,
                                      c.split.new_ids);
  const std::string om_hash_after = checkpoint_hash(om_dir);
  nlohmann::json j = report_to_json(rep);
  j["im_checkpoint"] = (dir / "im").string();
  j["im_sha256"] = checkpoint_hash(dir / "im");
  j["om_sha256_before"] = om_hash_before;
  j["om_sha256_after"] = om_hash_after;
  write_text(c.out_dir / (std::string(name) + "_eval.json"), j.dump(2) + "\n");
  err << "incremental model: " << map_summary(rep) << "\n";
  if (om_hash_before != om_hash_after) {
    err << "old-model checkpoint changed during training\n";
    return kFailure;
  }
  return kOk;
}

int eval_cmd(const RunConfig& c, const std::optional<fs::path>& checkpoint, std::ostream& err) {
  const fs::path dir = checkpoint ? *checkpoint : c.resolved_checkpoint_dir() / "incremental" / "im";
  const DetectorModel model = load_model(dir, "model");
  const auto test = load_split(c, "test");
  const auto n = static_cast<std::size_t>(model.num_classes);
  LabelMap labels;
  std::vector<int> old_ids, new_ids;
  if (n == c.split.num_old() + c.split.num_new()) {
    labels = c.split.im_labels();
    old_ids = c.split.old_ids;
    new_ids = c.split.new_ids;
  } else if (n == c.split.num_old()) {
    labels = c.split.om_labels();
    old_ids = c.split.old_ids;
  } else if (n == c.split.num_new()) {
    labels = c.split.rm_labels();
    new_ids = c.split.new_ids;
  } else {
    throw std::runtime_error(dir.string() + ": model has " + std::to_string(n) +
                             " classes, which matches no part of the class split");
  }
  const APReport rep = evaluate_model(model, test, labels, old_ids, new_ids);
  nlohmann::json j = report_to_json(rep);
  j["checkpoint"] = dir.string();
  write_text(c.out_dir / "eval.json", j.dump(2) + "\n");
  err << dir.string() << ": " << map_summary(rep) << "\n";
  return kOk;
}

int ablate_cmd(const RunConfig& c, std::ostream& err) {
  const DetectorModel om = load_model(c.resolved_checkpoint_dir() / "om", "old-model");
  ExperimentProtocol p;
  p.variants = ablation_variants(c.incremental);
  for (auto& v : threshold_variants(c.incremental, c.threshold_sweep)) p.variants.push_back(v);
  p.seeds = c.ablation_seeds;
  p.split = c.split;
  p.train = load_split(c, "incremental");
  p.test = load_split(c, "test");
  p.old_model = [&om](std::uint64_t) { return om; };
  const auto result = run_experiment(p, [&err](const ExperimentRow& r) {
    err << std::left << std::setw(14) << r.variant << ' '
        << (r.seed ? "seed " + std::to_string(*r.seed) : std::string("mean")) << "  ";
    if (r.failed)
      err << "FAILED: " << r.error;
    else
      err << std::fixed << std::setprecision(4) << "old " << r.map_old << " new " << r.map_new
          << " all " << r.map_all;
    err << "  (" << std::setprecision(1) << r.secs << " s)\n";
  });
  write_text(c.out_dir / "ablation.csv", result.to_csv());
  err << "wrote " << (c.out_dir / "ablation.csv").string() << "\n";
  return kOk;
}

int gradcheck_cmd(const RunConfig& c, std::ostream& err) {
  GradSuiteOptions opts;
  opts.seed = c.seed;
  nlohmann::json entries = nlohmann::json::array();
  bool ok = true;
  for (const auto& name : gradient_suite_names()) {
    const GradSuiteEntry e = run_gradient_case(name, opts);
    ok = ok && e.passed;
    err << std::left << std::setw(22) << e.name << (e.passed ? " pass" : " FAIL") << "  max error "
        << std::scientific << std::setprecision(2) << e.max_error << std::defaultfloat << "  ("
        << e.instances << " instances, " << e.coords << " coordinates)";
    if (!e.failure.empty()) err << "  " << e.failure;
    err << "\n";
    entries.push_back({{"name", e.name},
                       {"instances", e.instances},
                       {"coordinates", e.coords},
                       {"max_rel_error", e.max_error},
                       {"passed", e.passed},
                       {"seconds", e.seconds}});
  }
  write_text(c.out_dir / "gradcheck.json",
             nlohmann::json{{"tolerance", opts.tolerance}, {"step", opts.step}, {"entries", entries}}
                     .dump(2) +
                 "\n");
  return ok ? kOk : kFailure;
}

}  // namespace

Invocation parse(int argc, const char* const* argv, std::ostream& out) {
  CLI::App app{"Triple-network incremental detector on synthetic scenes", "tridet"};
  app.require_subcommand(0, 1);
  app.fallthrough();

  std::string config_path, out_dir, data_dir, checkpoint;
  std::uint64_t seed = 0;
  std::string d_fea, d_res, d_cls, two_threshold;
  double theta_low = 0.0, theta_high = 0.0;
  const auto onoff = CLI::IsMember({"on", "off"});
  app.add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "Random seed");
  auto* fea_opt = app.add_option("--d-fea", d_fea, "Feature distillation on|off")->check(onoff);
  auto* res_opt = app.add_option("--d-res", d_res, "Residual distillation on|off")->check(onoff);
  auto* cls_opt = app.add_option("--d-cls", d_cls, "Classification distillation on|off")->check(onoff);
  auto* two_opt =
      app.add_option("--two-threshold", two_threshold, "2-threshold pseudo targets on|off")
          ->check(onoff);
  auto* low_opt = app.add_option("--theta-low", theta_low, "Lower pseudo-label threshold");
  auto* high_opt = app.add_option("--theta-high", theta_high, "Upper pseudo-label threshold");
  auto* out_opt = app.add_option("--out", out_dir, "Output directory");
  auto* data_opt = app.add_option("--data", data_dir, "Dataset directory");
  auto* ckpt_opt = app.add_option("--checkpoint", checkpoint, "Checkpoint directory (eval)");

  std::string command;
  for (const char* name : kCommands)
    app.add_subcommand(name)->callback([&command, name] { command = name; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return {};
  } catch (const CLI::ParseError& e) {
    throw UsageError(e.what() + std::string("\n") + app.help());
  }
  if (command.empty()) throw UsageError("no subcommand given\n" + app.help());

  Invocation inv;
  inv.command = command;
  try {
    if (!config_path.empty()) inv.config = load_run_config(config_path);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  RunConfig& c = inv.config;
  if (*seed_opt) c.seed = seed;
  if (*fea_opt) c.incremental.switches.d_fea = on_off(d_fea);
  if (*res_opt) c.incremental.switches.d_res = on_off(d_res);
  if (*cls_opt) c.incremental.switches.d_cls = on_off(d_cls);
  if (*two_opt) c.incremental.switches.two_threshold = on_off(two_threshold);
  if (*low_opt) c.incremental.thresholds.theta_low = theta_low;
  if (*high_opt) c.incremental.thresholds.theta_high = theta_high;
  if (*out_opt) c.out_dir = out_dir;
  if (*data_opt) c.data_dir = data_dir;
  if (*ckpt_opt) inv.checkpoint = fs::path(checkpoint);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("invalid configuration: ") + e.what());
  }
  return inv;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Invocation inv;
  try {
    inv = parse(argc, argv, out);
  } catch (const UsageError& e) {
    err << e.what() << "\n";
    return kUsage;
  }
  if (inv.command.empty()) return kOk;
  const RunConfig& c = inv.config;
  err << "command: " << inv.command << "\nseed: " << c.seed << "\nconfig: "
      << config_to_json(c).dump() << "\n";
  try {
    if (inv.command == "gen-data") return gen_data(c, err);
    if (inv.command == "train-base") return train_base_cmd(c, err);
    if (inv.command == "incremental") return incremental_cmd(c, false, err);
    if (inv.command == "finetune") return incremental_cmd(c, true, err);
    if (inv.command == "eval") return eval_cmd(c, inv.checkpoint, err);
    if (inv.command == "ablate") return ablate_cmd(c, err);
    if (inv.command == "gradcheck") return gradcheck_cmd(c, err);
  } catch (const std::exception& e) {
    err << inv.command << " failed: " << e.what() << "\n";
    return kFailure;
  }
  err << "unhandled command " << inv.command << "\n";
  return kUsage;
}

}  // namespace tridet::cli
