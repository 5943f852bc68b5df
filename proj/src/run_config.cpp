#include "tridet/run_config.hpp"

#include <fstream>
#include <set>

namespace tridet {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::string& where, std::set<std::string> allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key))
      throw ConfigError("unknown key '" + (where.empty() ? key : where + "." + key) + "'");
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("bad value for '" + (where.empty() ? std::string(key) : where + "." + key) +
                      "': " + e.what());
  }
}

void read_schedule(const json& j, Schedule& s, const std::string& where) {
  reject_unknown(j, where, {"epochs", "batch_size", "lr", "lr_decay", "decay_epoch", "momentum"});
  read(j, "epochs", s.epochs, where);
  read(j, "batch_size", s.batch_size, where);
  read(j, "lr", s.lr, where);
  read(j, "lr_decay", s.lr_decay, where);
  read(j, "decay_epoch", s.decay_epoch, where);
  read(j, "momentum", s.momentum, where);
}

json schedule_json(const Schedule& s) {
  return {{"epochs", s.epochs},     {"batch_size", s.batch_size},   {"lr", s.lr},
          {"lr_decay", s.lr_decay}, {"decay_epoch", s.decay_epoch}, {"momentum", s.momentum}};
}

}  // namespace

RunConfig::RunConfig() { incremental.schedule = Schedule{10, 2, 1e-3, 0.1, 0, 0.9}; }

void RunConfig::validate() const {
  split.validate();
  base_schedule.validate();
  incremental.validate();
  if (data.base_train == 0 || data.base_test == 0 || data.incremental_train == 0 || data.test == 0)
    throw ConfigError("every data size must be >= 1");
  if (!(data.cooccur >= 0.0 && data.cooccur <= 1.0))
    throw ConfigError("data.cooccur must lie in [0,1]");
  if (ablation_seeds.empty()) throw ConfigError("ablation_seeds must not be empty");
  for (const auto& [lo, hi] : threshold_sweep) Thresholds{lo, hi, incremental.thresholds.theta_iou}.validate();
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
}

std::filesystem::path RunConfig::resolved_data_dir() const {
  return data_dir.empty() ? out_dir / "data" : data_dir;
}

std::filesystem::path RunConfig::resolved_checkpoint_dir() const {
  return checkpoint_dir.empty() ? out_dir / "checkpoints" : checkpoint_dir;
}

RunConfig config_from_json(const json& j, RunConfig c) {
  reject_unknown(j, "",
                 {"out_dir", "data_dir", "checkpoint_dir", "old_classes", "new_classes", "seed",
                  "data", "base", "incremental", "lambda", "thresholds", "single_threshold",
                  "switches", "cls_scope", "rm_stop_gradient", "rm_random_backbone",
                  "ablation_seeds", "threshold_sweep"});
  std::string path;
  read(j, "out_dir", path, "");
  if (!path.empty()) c.out_dir = path;
  path.clear();
  read(j, "data_dir", path, "");
  if (!path.empty()) c.data_dir = path;
  path.clear();
  read(j, "checkpoint_dir", path, "");
  if (!path.empty()) c.checkpoint_dir = path;
  read(j, "old_classes", c.split.old_ids, "");
  read(j, "new_classes", c.split.new_ids, "");
  read(j, "seed", c.seed, "");
  if (j.contains("data")) {
    const json& d = j["data"];
    reject_unknown(d, "data", {"base_train", "base_test", "incremental_train", "test", "cooccur"});
    read(d, "base_train", c.data.base_train, "data");
    read(d, "base_test", c.data.base_test, "data");
    read(d, "incremental_train", c.data.incremental_train, "data");
    read(d, "test", c.data.test, "data");
    read(d, "cooccur", c.data.cooccur, "data");
  }
  if (j.contains("base")) read_schedule(j["base"], c.base_schedule, "base");
  if (j.contains("incremental"))
    read_schedule(j["incremental"], c.incremental.schedule, "incremental");
  read(j, "lambda", c.incremental.lambda, "");
  if (j.contains("thresholds")) {
    const json& t = j["thresholds"];
    reject_unknown(t, "thresholds", {"theta_low", "theta_high", "theta_iou"});
    read(t, "theta_low", c.incremental.thresholds.theta_low, "thresholds");
    read(t, "theta_high", c.incremental.thresholds.theta_high, "thresholds");
    read(t, "theta_iou", c.incremental.thresholds.theta_iou, "thresholds");
  }
  read(j, "single_threshold", c.incremental.single_threshold, "");
  if (j.contains("switches")) {
    const json& s = j["switches"];
    reject_unknown(s, "switches", {"d_fea", "d_res", "d_cls", "two_threshold", "pseudo_gt"});
    auto& sw = c.incremental.switches;
    read(s, "d_fea", sw.d_fea, "switches");
    read(s, "d_res", sw.d_res, "switches");
    read(s, "d_cls", sw.d_cls, "switches");
    read(s, "two_threshold", sw.two_threshold, "switches");
    read(s, "pseudo_gt", sw.pseudo_gt, "switches");
  }
  if (j.contains("cls_scope")) {
    std::string scope;
    read(j, "cls_scope", scope, "");
    if (scope == "all") c.incremental.cls_scope = ClsScope::AllRois;
    else if (scope == "matched") c.incremental.cls_scope = ClsScope::MatchedRois;
    else throw ConfigError("cls_scope must be \"all\" or \"matched\", got \"" + scope + "\"");
  }
  read(j, "rm_stop_gradient", c.incremental.rm_stop_gradient, "");
  read(j, "rm_random_backbone", c.incremental.rm_random_backbone, "");
  read(j, "ablation_seeds", c.ablation_seeds, "");
  read(j, "threshold_sweep", c.threshold_sweep, "");
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open config");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": malformed JSON: " + e.what());
  }
  return config_from_json(j);
}

json config_to_json(const RunConfig& c) {
  const auto& inc = c.incremental;
  return {
      {"out_dir", c.out_dir.string()},
      {"data_dir", c.resolved_data_dir().string()},
      {"checkpoint_dir", c.resolved_checkpoint_dir().string()},
      {"old_classes", c.split.old_ids},
      {"new_classes", c.split.new_ids},
      {"seed", c.seed},
      {"data",
       {{"base_train", c.data.base_train},
        {"base_test", c.data.base_test},
        {"incremental_train", c.data.incremental_train},
        {"test", c.data.test},
        {"cooccur", c.data.cooccur}}},
      {"base", schedule_json(c.base_schedule)},
      {"incremental", schedule_json(inc.schedule)},
      {"lambda", inc.lambda},
      {"thresholds",
       {{"theta_low", inc.thresholds.theta_low},
        {"theta_high", inc.thresholds.theta_high},
        {"theta_iou", inc.thresholds.theta_iou}}},
      {"single_threshold", inc.single_threshold},
      {"switches",
       {{"d_fea", inc.switches.d_fea},
        {"d_res", inc.switches.d_res},
        {"d_cls", inc.switches.d_cls},
        {"two_threshold", inc.switches.two_threshold},
        {"pseudo_gt", inc.switches.pseudo_gt}}},
      {"cls_scope", inc.cls_scope == ClsScope::AllRois ? "all" : "matched"},
      {"rm_stop_gradient", inc.rm_stop_gradient},
      {"rm_random_backbone", inc.rm_random_backbone},
      {"ablation_seeds", c.ablation_seeds},
      {"threshold_sweep", c.threshold_sweep},
  };
}

}  // namespace tridet
