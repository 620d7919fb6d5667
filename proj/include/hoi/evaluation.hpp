#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hoi/core.hpp"

namespace hoi::evaluation {

enum class EvalSetting { kDefault, kKnownObject };

struct ClassAP {
  int verb = -1;
  int object = -1;
  double ap = 0;
  int n_gt = 0;
  int n_pred = 0;
  bool counted = false;
};

struct EvalReport {
  EvalSetting setting = EvalSetting::kDefault;
  double map_full = 0;
  double map_rare = 0;
  double map_non_rare = 0;
  double map_unseen = 0;
  double map_seen = 0;
  std::vector<ClassAP> per_class;
};

namespace detail {

struct Pred {
  int image_id;
  std::size_t gt_image_slot;  // index into per-image gt bookkeeping
  const core::HOITriplet* t;
};

}  // namespace detail

// Greedy matching in descending score order. A prediction is a true positive
// when some unmatched ground truth of the same (verb, object) class in the
// same image overlaps with min(IoU_h, IoU_o) >= threshold; among candidates
// the one with the largest min-IoU is consumed.
inline std::vector<char> match_predictions(
    const std::vector<std::pair<int, core::HOITriplet>>& preds_sorted,
    const std::map<int, std::vector<core::HOITriplet>>& gts_by_image, double iou_threshold = 0.5) {
  std::map<int, std::vector<char>> used;
  for (const auto& [img, gts] : gts_by_image) used[img].assign(gts.size(), 0);

  std::vector<char> tp(preds_sorted.size(), 0);
  for (std::size_t i = 0; i < preds_sorted.size(); ++i) {
    const auto& [img, p] = preds_sorted[i];
    auto it = gts_by_image.find(img);
    if (it == gts_by_image.end()) continue;
    const auto& gts = it->second;
    auto& flags = used[img];
    double best = -1;
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (flags[j]) continue;
      const auto& g = gts[j];
      if (g.verb != p.verb || g.object_category != p.object_category) continue;
      double overlap = std::min(core::iou(g.human_box, p.human_box),
                                core::iou(g.object_box, p.object_box));
      if (overlap >= iou_threshold && overlap > best) {
        best = overlap;
        best_j = j;
      }
    }
    if (best >= 0) {
      flags[best_j] = 1;
      tp[i] = 1;
    }
  }
  return tp;
}

// All-point interpolated AP: area under the precision envelope.
inline double average_precision(const std::vector<char>& tp_in_score_order, int n_gt) {
  if (n_gt <= 0) return 0.0;
  const std::size_t n = tp_in_score_order.size();
  if (n == 0) return 0.0;
  std::vector<double> prec(n), rec(n);
  int tp_cum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp_cum += tp_in_score_order[i];
    prec[i] = static_cast<double>(tp_cum) / static_cast<double>(i + 1);
    rec[i] = static_cast<double>(tp_cum) / static_cast<double>(n_gt);
  }
  for (std::size_t i = n; i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double ap = 0, prev_r = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ap += (rec[i] - prev_r) * prec[i];
    prev_r = rec[i];
  }
  return ap;
}

// Ground truths and predictions keyed by image id. Predictions carry scores
// inside the triplet.
struct EvalInputs {
  std::map<int, std::vector<core::HOITriplet>> gts;
  std::map<int, std::vector<core::HOITriplet>> preds;
};

inline EvalReport evaluate(const EvalInputs& inputs, EvalSetting setting,
                           const std::map<std::pair<int, int>, int>& train_counts,
                           const std::vector<std::pair<int, int>>& held_out,
                           int rare_threshold = 10, int per_image_cap = 100,
                           double iou_threshold = 0.5) {
  EvalReport report;
  report.setting = setting;

  // Per-image cap applied across classes, by score.
  std::map<int, std::vector<core::HOITriplet>> capped;
  for (const auto& [img, ps] : inputs.preds) {
    std::vector<core::HOITriplet> v = ps;
    std::stable_sort(v.begin(), v.end(),
                     [](const core::HOITriplet& a, const core::HOITriplet& b) {
                       return a.score > b.score;
                     });
    if (static_cast<int>(v.size()) > per_image_cap) v.resize(per_image_cap);
    capped[img] = std::move(v);
  }

  std::set<std::pair<int, int>> classes;
  for (const auto& [img, gts] : inputs.gts)
    for (const auto& g : gts) classes.insert({g.verb, g.object_category});
  for (const auto& [img, ps] : capped)
    for (const auto& p : ps) classes.insert({p.verb, p.object_category});

  // Images whose ground truth mentions each object category, for the
  // known-object setting.
  std::map<int, std::set<int>> images_with_object;
  for (const auto& [img, gts] : inputs.gts)
    for (const auto& g : gts) images_with_object[g.object_category].insert(img);

  for (const auto& [verb, object] : classes) {
    ClassAP entry;
    entry.verb = verb;
    entry.object = object;

    auto image_allowed = [&](int img) {
      if (setting == EvalSetting::kDefault) return true;
      auto it = images_with_object.find(object);
      return it != images_with_object.end() && it->second.count(img) > 0;
    };

    std::map<int, std::vector<core::HOITriplet>> class_gts;
    for (const auto& [img, gts] : inputs.gts) {
      if (!image_allowed(img)) continue;
      for (const auto& g : gts)
        if (g.verb == verb && g.object_category == object) class_gts[img].push_back(g);
    }
    std::vector<std::pair<int, core::HOITriplet>> class_preds;
    for (const auto& [img, ps] : capped) {
      if (!image_allowed(img)) continue;
      for (const auto& p : ps)
        if (p.verb == verb && p.object_category == object) class_preds.emplace_back(img, p);
    }
    std::stable_sort(class_preds.begin(), class_preds.end(),
                     [](const auto& a, const auto& b) { return a.second.score > b.second.score; });

    for (const auto& [img, gts] : class_gts) entry.n_gt += static_cast<int>(gts.size());
    entry.n_pred = static_cast<int>(class_preds.size());

    if (entry.n_gt == 0 && entry.n_pred == 0) {
      entry.counted = false;
    } else if (entry.n_gt == 0) {
      entry.ap = 0.0;  // every prediction of a class absent from this split is false
      entry.counted = true;
    } else {
      auto tp = match_predictions(class_preds, class_gts, iou_threshold);
      entry.ap = average_precision(tp, entry.n_gt);
      entry.counted = true;
    }
    report.per_class.push_back(entry);
  }

  auto mean_over = [&](auto&& keep) {
    double sum = 0;
    int n = 0;
    for (const auto& e : report.per_class) {
      if (!e.counted || !keep(e)) continue;
      sum += e.ap;
      ++n;
    }
    return n > 0 ? sum / n : 0.0;
  };
  auto is_held = [&](const ClassAP& e) {
    return std::find(held_out.begin(), held_out.end(), std::make_pair(e.verb, e.object)) !=
           held_out.end();
  };
  auto is_rare = [&](const ClassAP& e) {
    auto it = train_counts.find({e.verb, e.object});
    int n = it == train_counts.end() ? 0 : it->second;
    return n < rare_threshold;
  };

  report.map_full = mean_over([](const ClassAP&) { return true; });
  report.map_rare = mean_over([&](const ClassAP& e) { return is_rare(e); });
  report.map_non_rare = mean_over([&](const ClassAP& e) { return !is_rare(e); });
  report.map_unseen = mean_over([&](const ClassAP& e) { return is_held(e); });
  report.map_seen = mean_over([&](const ClassAP& e) { return !is_held(e); });
  return report;
}

}  // namespace hoi::evaluation
