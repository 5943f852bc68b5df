#include "tridet/experiment.hpp"

#include <chrono>
#include <cmath>
#include <map>
#include <sstream>

namespace tridet {

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << v;
  return os.str();
}

std::string threshold_label(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace

const ExperimentRow& ExperimentResult::mean_row(const std::string& variant) const {
  for (const auto& r : rows)
    if (r.variant == variant && !r.seed) return r;
  throw std::out_of_range("no mean row for variant " + variant);
}

std::string ExperimentResult::to_csv() const {
  std::ostringstream os;
  os << "variant,seed,map_old,map_new,map_all,secs\n";
  for (const auto& r : rows) {
    os << r.variant << ',' << (r.seed ? std::to_string(*r.seed) : std::string("mean")) << ',';
    if (r.failed)
      os << "failed,failed,failed,";
    else
      os << fmt(r.map_old) << ',' << fmt(r.map_new) << ',' << fmt(r.map_all) << ',';
    os << fmt(r.secs) << '\n';
  }
  return os.str();
}

ExperimentResult run_experiment(const ExperimentProtocol& p, const ProgressFn& progress) {
  if (p.variants.empty()) throw std::invalid_argument("experiment has no variants");
  if (p.seeds.empty()) throw std::invalid_argument("experiment has no seeds");
  if (!p.old_model) throw std::invalid_argument("experiment has no old-model provider");
  p.split.validate();

  std::map<std::uint64_t, DetectorModel> oms;
  for (auto s : p.seeds) oms.emplace(s, p.old_model(s));

  ExperimentResult result;
  for (const auto& v : p.variants) {
    std::vector<ExperimentRow> seed_rows;
    for (auto seed : p.seeds) {
      ExperimentRow row;
      row.variant = v.name;
      row.seed = seed;
      const auto t0 = std::chrono::steady_clock::now();
      try {
        const DetectorModel& om = oms.at(seed);
        APReport rep;
        if (v.kind == VariantKind::OldModel) {
          rep = evaluate_model(om, p.test, p.split.om_labels(), p.split.old_ids, p.split.new_ids,
                               p.eval);
        } else {
          TrainConfig cfg = v.config;
          cfg.seed = seed;
          const auto trained = train_incremental(om, p.split, p.train, cfg);
          rep = evaluate_model(trained.triple.im, p.test, p.split.im_labels(), p.split.old_ids,
                               p.split.new_ids, p.eval);
        }
        row.map_old = rep.map_old;
        row.map_new = rep.map_new;
        row.map_all = rep.map_all;
      } catch (const std::exception& e) {
        row.failed = true;
        row.error = e.what();
      }
      row.secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (progress) progress(row);
      seed_rows.push_back(row);
    }
    ExperimentRow mean;
    mean.variant = v.name;
    std::size_t ok = 0;
    for (const auto& r : seed_rows) {
      mean.secs += r.secs;
      if (r.failed) continue;
      mean.map_old += r.map_old;
      mean.map_new += r.map_new;
      mean.map_all += r.map_all;
      ++ok;
    }
    if (ok == 0) {
      mean.failed = true;
      mean.error = "every seed failed";
      mean.map_old = mean.map_new = mean.map_all = 0.0;
    } else {
      mean.map_old /= static_cast<double>(ok);
      mean.map_new /= static_cast<double>(ok);
      mean.map_all /= static_cast<double>(ok);
    }
    if (progress) progress(mean);
    result.rows.insert(result.rows.end(), seed_rows.begin(), seed_rows.end());
    result.rows.push_back(mean);
  }
  return result;
}

std::vector<Variant> ablation_variants(const TrainConfig& base) {
  auto make = [&](std::string name, bool fea, bool res, bool cls, bool two, bool pseudo) {
    Variant v{std::move(name), VariantKind::Incremental, base};
    v.config.switches = LossSwitches{fea, res, cls, two, pseudo};
    return v;
  };
  std::vector<Variant> out;
  out.push_back({"old-model", VariantKind::OldModel, base});
  out.push_back(make("finetune", false, false, false, false, false));
  out.push_back(make("baseline", false, false, false, false, true));
  out.push_back(make("fea", true, false, false, false, true));
  out.push_back(make("res", false, true, false, false, true));
  out.push_back(make("cls", false, false, true, false, true));
  out.push_back(make("2th", false, false, false, true, true));
  out.push_back(make("fea+res", true, true, false, false, true));
  out.push_back(make("fea+res+cls", true, true, true, false, true));
  out.push_back(make("full", true, true, true, true, true));
  return out;
}

std::vector<Variant> threshold_variants(const TrainConfig& base,
                                        const std::vector<std::pair<double, double>>& pairs) {
  std::vector<Variant> out;
  for (const auto& [lo, hi] : pairs) {
    Variant v{"th-" + threshold_label(lo) + "-" + threshold_label(hi), VariantKind::Incremental,
              base};
    v.config.switches = LossSwitches{};
    v.config.thresholds.theta_low = lo;
    v.config.thresholds.theta_high = hi;
    v.config.thresholds.validate();
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace tridet
