#include "tridet/eval.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <stdexcept>

namespace tridet {

ApResult voc_ap(std::span<const ScoredBox> dets, std::span<const GtBox> gts, double iou_thresh,
                bool eleven_point) {
  ApResult r;
  r.num_dets = dets.size();
  r.num_gt = gts.size();
  if (gts.empty()) {
    r.vacuous = true;
    return r;
  }
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

  std::vector<bool> taken(gts.size(), false);
  std::vector<double> precision, recall;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i : order) {
    double best = -1.0;
    std::size_t best_g = 0;
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
      if (taken[gi] || gts[gi].image != dets[i].image) continue;
      const double v = iou(dets[i].bbox, gts[gi].bbox);
      if (v > best) {
        best = v;
        best_g = gi;
      }
    }
    if (best >= iou_thresh) {
      taken[best_g] = true;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
  }

  if (eleven_point) {
    double ap = 0.0;
    for (int t = 0; t <= 10; ++t) {
      const double thr = t / 10.0;
      double p = 0.0;
      for (std::size_t k = 0; k < recall.size(); ++k)
        if (recall[k] >= thr) p = std::max(p, precision[k]);
      ap += p / 11.0;
    }
    r.ap = ap;
    return r;
  }

  std::vector<double> mrec{0.0}, mpre{0.0};
  mrec.insert(mrec.end(), recall.begin(), recall.end());
  mpre.insert(mpre.end(), precision.begin(), precision.end());
  mrec.push_back(1.0);
  mpre.push_back(0.0);
  for (std::size_t k = mpre.size() - 1; k > 0; --k) mpre[k - 1] = std::max(mpre[k - 1], mpre[k]);
  double ap = 0.0;
  for (std::size_t k = 1; k < mrec.size(); ++k)
    if (mrec[k] != mrec[k - 1]) ap += (mrec[k] - mrec[k - 1]) * mpre[k];
  r.ap = ap;
  return r;
}

std::vector<std::vector<Detection>> detect_scenes(const DetectorModel& model,
                                                  std::span<const Scene> scenes,
                                                  const LabelMap& labels, const EvalOptions& opts) {
  if (labels.size() != static_cast<std::size_t>(model.num_classes))
    throw std::invalid_argument("label map has " + std::to_string(labels.size()) +
                                " entries for a model with " +
                                std::to_string(model.num_classes) + " classes");
  std::vector<std::vector<Detection>> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) {
    auto dets = detect(model, s.image, opts.score_thresh, opts.nms_thresh);
    for (auto& d : dets) d.class_id = labels[static_cast<std::size_t>(d.class_id) - 1];
    out.push_back(std::move(dets));
  }
  return out;
}

APReport report_from_detections(std::span<const std::vector<Detection>> dets,
                                std::span<const Scene> scenes, std::span<const int> old_classes,
                                std::span<const int> new_classes, const EvalOptions& opts) {
  if (dets.size() != scenes.size())
    throw std::invalid_argument("detections and scenes differ in count");
  APReport rep;
  auto class_ap = [&](int cls) {
    std::vector<ScoredBox> sb;
    std::vector<GtBox> gb;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      for (const auto& d : dets[i])
        if (d.class_id == cls) sb.push_back({i, d.bbox, d.score});
      for (const auto& o : scenes[i].objects)
        if (o.class_id == cls) gb.push_back({i, o.bbox});
    }
    const ApResult r = voc_ap(sb, gb, opts.iou_thresh, opts.eleven_point);
    rep.per_class_ap[cls] = r.ap;
    rep.num_dets[cls] = r.num_dets;
    rep.num_gt[cls] = r.num_gt;
    if (r.vacuous) rep.vacuous.push_back(cls);
    return r;
  };
  auto mean_over = [&](std::span<const int> classes) {
    double total = 0.0;
    std::size_t n = 0;
    for (int c : classes) {
      const ApResult r = class_ap(c);
      if (r.vacuous) continue;
      total += r.ap;
      ++n;
    }
    return n ? total / static_cast<double>(n) : 0.0;
  };
  rep.map_old = mean_over(old_classes);
  rep.map_new = mean_over(new_classes);
  rep.vacuous.clear();
  std::vector<int> all(old_classes.begin(), old_classes.end());
  all.insert(all.end(), new_classes.begin(), new_classes.end());
  if (std::set<int>(all.begin(), all.end()).size() != all.size())
    throw std::invalid_argument("old and new class lists overlap");
  rep.map_all = mean_over(all);
  return rep;
}

APReport evaluate_model(const DetectorModel& model, std::span<const Scene> scenes,
                        const LabelMap& labels, std::span<const int> old_classes,
                        std::span<const int> new_classes, const EvalOptions& opts) {
  const auto dets = detect_scenes(model, scenes, labels, opts);
  return report_from_detections(dets, scenes, old_classes, new_classes, opts);
}

nlohmann::json report_to_json(const APReport& report) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& [cls, ap] : report.per_class_ap)
    classes.push_back({{"class_id", cls},
                       {"ap", ap},
                       {"detections", report.num_dets.at(cls)},
                       {"ground_truth", report.num_gt.at(cls)},
                       {"vacuous", std::find(report.vacuous.begin(), report.vacuous.end(), cls) !=
                                       report.vacuous.end()}});
  return {{"per_class", classes},
          {"map_all", report.map_all},
          {"map_old", report.map_old},
          {"map_new", report.map_new}};
}

}  // namespace tridet
