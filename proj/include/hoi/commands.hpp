#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hoi/evaluation.hpp"
#include "hoi/model.hpp"

namespace hoi::commands {

// ---- dataset assembly ----

struct TrainData {
  std::vector<data::HOISample> pool;  // before split filtering
  data::Splits splits;
};

inline data::SynthConfig synth_config_for(const model::RunConfig& cfg, unsigned seed,
                                          int n_images) {
  data::SynthConfig sc;
  sc.n_images = n_images;
  sc.seed = seed;
  sc.image_size = cfg.data.image_size;
  sc.min_entities = cfg.data.min_entities;
  sc.max_entities = cfg.data.max_entities;
  sc.two_person_prob = cfg.data.two_person_prob;
  return sc;
}

inline TrainData build_train_data(const model::RunConfig& cfg) {
  const auto rb = data::Rulebook::standard();
  TrainData td;
  if (!cfg.data.train_jsonl.empty())
    td.pool = data::load_samples(cfg.data.train_jsonl, rb);
  else
    td.pool = data::synth_generate(synth_config_for(cfg, cfg.data.seed, cfg.data.n_images));
  td.splits = data::build_splits(td.pool, cfg.split, rb);
  return td;
}

inline std::vector<data::HOISample> build_eval_samples(const model::RunConfig& cfg) {
  const auto rb = data::Rulebook::standard();
  if (!cfg.data.eval_jsonl.empty()) return data::load_samples(cfg.data.eval_jsonl, rb);
  return data::synth_generate(synth_config_for(cfg, cfg.data.eval_seed, cfg.data.eval_n_images));
}

// ---- train ----

struct TrainResult {
  std::string checkpoint_path;
  std::string metrics_path;
  long steps = 0;
  double first_total = 0;
  double last_total = 0;
};

inline TrainResult cmd_train(const model::RunConfig& cfg) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  cfg.save(cfg.out_dir + "/config.json");

  TrainData td = build_train_data(cfg);
  model::Model m(cfg);

  TrainResult res;
  res.metrics_path = cfg.out_dir + "/metrics.csv";
  std::ofstream metrics(res.metrics_path);
  if (!metrics) throw std::runtime_error("train: cannot write " + res.metrics_path);
  metrics << "step,lr,total,salience,generative,contrastive,logic,grad_norm\n";
  metrics.precision(17);
  m.train(td.splits.train, [&](const model::StepMetrics& s) {
    metrics << s.step << "," << s.lr << "," << s.total << "," << s.salience << ","
            << s.generative << "," << s.contrastive << "," << s.logic << "," << s.grad_norm
            << "\n";
    if (s.step == 0) res.first_total = s.total;
    res.last_total = s.total;
    ++res.steps;
  });

  res.checkpoint_path = cfg.out_dir + "/checkpoint.json";
  model::save_checkpoint(m, res.checkpoint_path);
  return res;
}

// ---- eval ----

struct EvalPair {
  evaluation::EvalReport default_setting;
  evaluation::EvalReport known_object;
};

inline EvalPair evaluate_model(const model::Model& m,
                               const std::vector<data::HOISample>& eval_samples,
                               const data::Splits& splits, bool oracle = false) {
  evaluation::EvalInputs inputs;
  for (const auto& s : eval_samples) {
    inputs.gts[s.id] = s.gts;
    if (oracle) {
      auto preds = s.gts;
      for (auto& t : preds) t.score = 1.0;
      inputs.preds[s.id] = std::move(preds);
    } else {
      inputs.preds[s.id] = m.infer_image(s);
    }
  }
  EvalPair out;
  out.default_setting = evaluation::evaluate(inputs, evaluation::EvalSetting::kDefault,
                                             splits.train_counts, splits.held_out);
  out.known_object = evaluation::evaluate(inputs, evaluation::EvalSetting::kKnownObject,
                                          splits.train_counts, splits.held_out);
  return out;
}

inline nlohmann::json report_json(const evaluation::EvalReport& r) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : r.per_class)
    classes.push_back({{"verb", c.verb},
                       {"object", c.object},
                       {"ap", c.ap},
                       {"n_gt", c.n_gt},
                       {"n_pred", c.n_pred},
                       {"counted", c.counted}});
  return {{"setting", r.setting == evaluation::EvalSetting::kDefault ? "default" : "known_object"},
          {"map_full", r.map_full},
          {"map_rare", r.map_rare},
          {"map_non_rare", r.map_non_rare},
          {"map_unseen", r.map_unseen},
          {"map_seen", r.map_seen},
          {"classes", classes}};
}

inline EvalPair cmd_eval(const model::RunConfig& cfg, const std::string& checkpoint_path) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  model::Model m(cfg);
  model::load_checkpoint(m, checkpoint_path);
  TrainData td = build_train_data(cfg);
  auto eval_samples = build_eval_samples(cfg);
  EvalPair pair = evaluate_model(m, eval_samples, td.splits, cfg.options.oracle_eval);
  nlohmann::json j = {{"default", report_json(pair.default_setting)},
                      {"known_object", report_json(pair.known_object)}};
  std::ofstream out(cfg.out_dir + "/report.json");
  if (!out) throw std::runtime_error("eval: cannot write report.json");
  out << j.dump(2) << "\n";
  return pair;
}

// ---- infer ----

inline std::vector<core::HOITriplet> cmd_infer(const model::RunConfig& cfg,
                                               const std::string& checkpoint_path,
                                               int image_id) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  model::Model m(cfg);
  model::load_checkpoint(m, checkpoint_path);
  auto eval_samples = build_eval_samples(cfg);
  const data::HOISample* found = nullptr;
  for (const auto& s : eval_samples)
    if (s.id == image_id) {
      found = &s;
      break;
    }
  if (!found) throw std::runtime_error("infer: image id not in the evaluation set");
  auto dets = data::detect_entities(*found, m.bank, m.cfg.data.detector_seed);
  auto triplets = m.infer_detections(dets, found->raster);
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& t : triplets)
    arr.push_back({{"human_box", {t.human_box.x1, t.human_box.y1, t.human_box.x2, t.human_box.y2}},
                   {"object_box", {t.object_box.x1, t.object_box.y1, t.object_box.x2, t.object_box.y2}},
                   {"object", m.rulebook.categories[static_cast<std::size_t>(t.object_category)]},
                   {"verb", m.rulebook.verbs[static_cast<std::size_t>(t.verb)]},
                   {"score", t.score}});
  auto fwd = m.forward(dets, found->raster);
  nlohmann::json cands = nlohmann::json::array();
  for (std::size_t k : fwd.selected) {
    const auto& p = fwd.pairs[k];
    auto res = m.describe_candidate(fwd, k);
    std::string verb_name =
        res.verb >= 0 ? m.rulebook.verbs[static_cast<std::size_t>(res.verb)] : "none";
    cands.push_back(
        {{"human_box",
          {dets[p.human_index].box.x1, dets[p.human_index].box.y1, dets[p.human_index].box.x2,
           dets[p.human_index].box.y2}},
         {"object_box",
          {dets[p.object_index].box.x1, dets[p.object_index].box.y1, dets[p.object_index].box.x2,
           dets[p.object_index].box.y2}},
         {"object", m.rulebook.categories[static_cast<std::size_t>(dets[p.object_index].category)]},
         {"phrase", res.phrase},
         {"verb", verb_name},
         {"gate", p.r_k}});
  }
  nlohmann::json doc = {{"image", image_id}, {"predictions", arr}, {"candidates", cands}};
  std::ofstream out(cfg.out_dir + "/infer_" + std::to_string(image_id) + ".json");
  if (!out) throw std::runtime_error("infer: cannot write output file");
  out << doc.dump(2) << "\n";
  return triplets;
}

// ---- sweep ----

struct SweepRow {
  std::string axis;
  std::string point;
  EvalPair reports;
};

inline model::RunConfig apply_toggle(model::RunConfig cfg, const std::string& toggle) {
  if (toggle == "full") return cfg;
  if (toggle == "no_nce") {
    cfg.loss.lambda_nce = 0.0;
    return cfg;
  }
  if (toggle == "no_gen") {
    cfg.loss.lambda_gen = 0.0;
    return cfg;
  }
  if (toggle == "no_logic") {
    cfg.loss.lambda_logic = 0.0;
    return cfg;
  }
  if (toggle == "no_csc") {
    cfg.steering.mode = steering::KernelMode::kDirect;
    return cfg;
  }
  if (toggle == "no_fglobal") {
    cfg.steering.zero_fglobal = true;
    return cfg;
  }
  if (toggle == "no_vk") {
    cfg.steering.zero_vk = true;
    return cfg;
  }
  if (toggle == "mlp_vkf") {
    cfg.steering.mode = steering::KernelMode::kMlp;
    return cfg;
  }
  if (toggle == "classifier") {
    cfg.options.classifier_baseline = true;
    return cfg;
  }
  throw std::invalid_argument("sweep: unknown toggle '" + toggle + "'");
}

inline std::string sanitize_point(const std::string& p) {
  std::string out;
  for (char c : p) out.push_back((std::isalnum(static_cast<unsigned char>(c)) != 0) ? c : '_');
  return out;
}

inline std::vector<SweepRow> cmd_sweep(const model::RunConfig& cfg, const std::string& axis,
                                       const std::optional<std::vector<std::string>>& points =
                                           std::nullopt) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);

  std::vector<std::string> pts;
  if (axis == "kernel_length") {
    pts = points.value_or(std::vector<std::string>{"1", "4", "8", "16"});
  } else if (axis == "alpha") {
    pts = points.value_or(std::vector<std::string>{"0", "0.3", "0.6", "1"});
  } else if (axis == "component_toggle") {
    pts.push_back("full");
    auto toggles = points.value_or(std::vector<std::string>{
        "no_nce", "no_gen", "no_logic", "no_csc", "no_fglobal", "no_vk", "mlp_vkf",
        "classifier"});
    pts.insert(pts.end(), toggles.begin(), toggles.end());
  } else {
    throw std::invalid_argument("sweep: unknown axis '" + axis + "'");
  }

  std::ofstream table(cfg.out_dir + "/sweep.csv");
  if (!table) throw std::runtime_error("sweep: cannot write sweep.csv");
  table << "axis,point,map_default_full,map_default_rare,map_default_non_rare,"
           "map_default_unseen,map_default_seen,map_ko_full\n";
  table.precision(17);

  std::vector<SweepRow> rows;
  for (const auto& p : pts) {
    model::RunConfig sub = cfg;
    if (axis == "kernel_length")
      sub.steering.kernel_length = std::stol(p);
    else if (axis == "alpha")
      sub.perception.alpha = std::stod(p);
    else
      sub = apply_toggle(cfg, p);
    sub.out_dir = cfg.out_dir + "/" + axis + "_" + sanitize_point(p);
    sub.validate();
    TrainResult tr = cmd_train(sub);
    EvalPair ev = cmd_eval(sub, tr.checkpoint_path);
    const auto& d = ev.default_setting;
    table << axis << "," << p << "," << d.map_full << "," << d.map_rare << ","
          << d.map_non_rare << "," << d.map_unseen << "," << d.map_seen << ","
          << ev.known_object.map_full << "\n";
    rows.push_back({axis, p, std::move(ev)});
  }
  return rows;
}

// ---- attention maps ----

// Patch attention of the frozen scene encoder: softmax over patches of the
// scene token's scaled dot products. One weight per patch, sums to 1.
inline Eigen::VectorXd encoder_attention(const Eigen::MatrixXd& patches) {
  Eigen::RowVectorXd f = steering::scene_token(patches);
  Eigen::VectorXd scores =
      patches * f.transpose() / std::sqrt(static_cast<double>(patches.cols()));
  Eigen::VectorXd e = (scores.array() - scores.maxCoeff()).exp();
  return e / e.sum();
}

inline double channel_median(const Eigen::MatrixXd& ch) {
  std::vector<double> v(ch.data(), ch.data() + ch.size());
  auto mid = v.begin() + static_cast<long>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  return *mid;
}

// Kernel-conditioned attention via patch occlusion. Patch p's weight for
// candidate k is the Frobenius distance between the kernel computed on the
// original raster and on a copy with patch p painted over with the raster's
// median color; rows are normalized to sum to 1. This reads out where the
// conditioned pipeline is actually sensitive to image content, through the
// detection tokens and the scene token alike, and works in every kernel mode.
// Returns an n_pairs x n_patches matrix, one map per candidate pair.
inline Eigen::MatrixXd kernel_response_maps(const model::Model& m,
                                            const data::HOISample& sample,
                                            const model::ImageForward& fwd) {
  const long grid = m.gen.scene_patch_grid();
  const long n_patches = grid * grid;
  const std::size_t n_pairs = fwd.pairs.size();
  Eigen::MatrixXd resp = Eigen::MatrixXd::Zero(static_cast<long>(n_pairs), n_patches);
  if (n_pairs == 0) return resp;
  std::vector<Eigen::MatrixXd> base;
  base.reserve(n_pairs);
  for (std::size_t k = 0; k < n_pairs; ++k) base.push_back(m.candidate_kernel(fwd, k).val());
  const double fr = channel_median(sample.raster.channel[0]);
  const double fg = channel_median(sample.raster.channel[1]);
  const double fb = channel_median(sample.raster.channel[2]);
  const double cw = static_cast<double>(sample.raster.width) / static_cast<double>(grid);
  const double ch = static_cast<double>(sample.raster.height) / static_cast<double>(grid);
  for (long p = 0; p < n_patches; ++p) {
    data::HOISample probe = sample;
    const long gy = p / grid, gx = p % grid;
    core::BoundingBox cell{gx * cw, gy * ch, (gx + 1) * cw, (gy + 1) * ch};
    probe.raster.fill_rect(cell, fr, fg, fb);
    auto dets = data::detect_entities(probe, m.bank, m.cfg.data.detector_seed);
    auto occluded = m.forward(dets, probe.raster);
    if (occluded.pairs.size() != n_pairs)
      throw std::runtime_error("response map: pair enumeration changed under occlusion");
    for (std::size_t k = 0; k < n_pairs; ++k)
      resp(static_cast<long>(k), p) = (m.candidate_kernel(occluded, k).val() - base[k]).norm();
  }
  for (long k = 0; k < resp.rows(); ++k) {
    const double s = resp.row(k).sum();
    if (s > 1e-12)
      resp.row(k) /= s;
    else
      resp.row(k).setConstant(1.0 / static_cast<double>(n_patches));
  }
  return resp;
}

// Fraction of a patch-weight map whose patch centers fall inside the union of
// the two boxes.
inline double mass_in_union(const Eigen::VectorXd& weights, long grid, int image_w, int image_h,
                            const core::BoundingBox& hb, const core::BoundingBox& ob) {
  const double cw = static_cast<double>(image_w) / static_cast<double>(grid);
  const double ch = static_cast<double>(image_h) / static_cast<double>(grid);
  auto inside = [](double x, double y, const core::BoundingBox& b) {
    return x >= b.x1 && x <= b.x2 && y >= b.y1 && y <= b.y2;
  };
  double mass = 0;
  for (long gy = 0; gy < grid; ++gy)
    for (long gx = 0; gx < grid; ++gx) {
      const double cx = (gx + 0.5) * cw, cy = (gy + 0.5) * ch;
      if (inside(cx, cy, hb) || inside(cx, cy, ob)) mass += weights(gy * grid + gx);
    }
  return mass;
}

struct AttentionMass {
  double conditioned = 0;
  double encoder = 0;
};

// Mean in-union attention masses over every selected candidate in up to
// max_scenes samples. The conditioned/encoder comparison quantifies how much
// kernel conditioning concentrates on the candidate's own region relative to
// the frozen encoder's generic scene map.
inline AttentionMass mean_attention_masses(const model::Model& m,
                                           const std::vector<data::HOISample>& samples,
                                           int max_scenes) {
  AttentionMass acc;
  int n = 0, scenes = 0;
  for (const auto& s : samples) {
    if (scenes >= max_scenes) break;
    auto dets = data::detect_entities(s, m.bank, m.cfg.data.detector_seed);
    auto fwd = m.forward(dets, s.raster);
    if (fwd.selected.empty()) continue;
    ++scenes;
    Eigen::MatrixXd maps = kernel_response_maps(m, s, fwd);
    Eigen::VectorXd enc = encoder_attention(fwd.patches);
    const long grid = m.gen.scene_patch_grid();
    for (std::size_t k : fwd.selected) {
      const auto& pair = fwd.pairs[k];
      const core::BoundingBox& hb = dets[static_cast<std::size_t>(pair.human_index)].box;
      const core::BoundingBox& ob = dets[static_cast<std::size_t>(pair.object_index)].box;
      Eigen::VectorXd row = maps.row(static_cast<long>(k)).transpose();
      acc.conditioned += mass_in_union(row, grid, s.width, s.height, hb, ob);
      acc.encoder += mass_in_union(enc, grid, s.width, s.height, hb, ob);
      ++n;
    }
  }
  if (n == 0) throw std::runtime_error("attention mass: no selected candidates in the sample set");
  acc.conditioned /= n;
  acc.encoder /= n;
  return acc;
}

// ---- heatmap rendering ----

inline void write_ppm(const core::Raster& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = std::clamp(img.channel[static_cast<std::size_t>(c)](y, x), 0.0, 1.0);
        out.put(static_cast<char>(std::lround(v * 255.0)));
      }
}

// Patch weights upscaled to pixel resolution and normalized to [0,1].
inline Eigen::MatrixXd heat_to_pixels(const Eigen::VectorXd& weights, long grid, int w, int h) {
  Eigen::MatrixXd heat(h, w);
  const double peak = weights.maxCoeff();
  const int cw = w / static_cast<int>(grid), ch = h / static_cast<int>(grid);
  for (long gy = 0; gy < grid; ++gy)
    for (long gx = 0; gx < grid; ++gx) {
      double v = peak > 0 ? weights(gy * grid + gx) / peak : 0.0;
      heat.block(gy * ch, gx * cw, ch, cw).setConstant(v);
    }
  return heat;
}

inline core::Raster heat_raster(const Eigen::MatrixXd& heat) {
  core::Raster img = core::Raster::filled(static_cast<int>(heat.cols()),
                                          static_cast<int>(heat.rows()), 0, 0, 0);
  img.channel[0] = heat;
  img.channel[1] = 0.2 * heat;
  img.channel[2] = 1.0 - heat.array();
  return img;
}

inline core::Raster heat_overlay(const core::Raster& base, const Eigen::MatrixXd& heat) {
  core::Raster img = base;
  core::Raster color = heat_raster(heat);
  for (int c = 0; c < 3; ++c)
    img.channel[static_cast<std::size_t>(c)] =
        0.45 * base.channel[static_cast<std::size_t>(c)] +
        0.55 * color.channel[static_cast<std::size_t>(c)];
  return img;
}

struct PlotResult {
  std::vector<std::string> files;
  std::string message;
};

inline PlotResult cmd_plot_attention(const model::RunConfig& cfg,
                                     const std::string& checkpoint_path, int image_id) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  model::Model m(cfg);
  model::load_checkpoint(m, checkpoint_path);
  auto eval_samples = build_eval_samples(cfg);
  const data::HOISample* found = nullptr;
  for (const auto& s : eval_samples)
    if (s.id == image_id) {
      found = &s;
      break;
    }
  if (!found) throw std::runtime_error("plot-attention: image id not in the evaluation set");

  auto dets = data::detect_entities(*found, m.bank, m.cfg.data.detector_seed);
  auto fwd = m.forward(dets, found->raster);
  PlotResult res;
  if (fwd.selected.empty()) {
    res.message = "no candidates selected for image " + std::to_string(image_id);
    return res;
  }
  const long grid = m.gen.scene_patch_grid();
  Eigen::VectorXd enc = encoder_attention(fwd.patches);
  Eigen::MatrixXd enc_heat = heat_to_pixels(enc, grid, found->width, found->height);
  std::string enc_path =
      cfg.out_dir + "/attention_" + std::to_string(image_id) + "_encoder.ppm";
  write_ppm(heat_raster(enc_heat), enc_path);
  res.files.push_back(enc_path);
  Eigen::MatrixXd maps = kernel_response_maps(m, *found, fwd);
  for (std::size_t k : fwd.selected) {
    Eigen::VectorXd w = maps.row(static_cast<long>(k)).transpose();
    Eigen::MatrixXd heat = heat_to_pixels(w, grid, found->width, found->height);
    std::string path = cfg.out_dir + "/attention_" + std::to_string(image_id) + "_cand" +
                       std::to_string(k) + "_steered.ppm";
    write_ppm(heat_overlay(found->raster, heat), path);
    res.files.push_back(path);
  }
  res.message = "wrote " + std::to_string(res.files.size()) + " heatmaps";
  return res;
}

}  // namespace hoi::commands
