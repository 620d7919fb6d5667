#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hoi/core.hpp"
#include "hoi/data.hpp"
#include "hoi/generator.hpp"
#include "hoi/nn/optim.hpp"
#include "hoi/objectives.hpp"
#include "hoi/perception.hpp"
#include "hoi/steering.hpp"

namespace hoi::model {

// ---- run configuration ----

struct DataConfig {
  int n_images = 200;
  unsigned seed = 123;
  int image_size = 128;
  int min_entities = 2;
  int max_entities = 5;
  double two_person_prob = 0.2;
  unsigned detector_seed = 7;
  int eval_n_images = 120;
  unsigned eval_seed = 501;
  std::string train_jsonl;  // when set, load instead of generating
  std::string eval_jsonl;
};

struct SteeringSettings {
  long kernel_length = 8;
  long heads = 4;
  bool vkf_residual = true;
  steering::KernelMode mode = steering::KernelMode::kFull;
  bool zero_vk = false;
  bool zero_fglobal = false;
};

struct GeneratorSettings {
  unsigned seed = 7;
  long d = 32;
  long layers = 2;
  long heads = 4;
  double embed_scale = 0.35;
  double anchor_strength = 2.0;
  double anchor_noise = 0.25;
  bool use_anchors = true;
};

struct OptimConfig {
  double lr = 3e-3;
  double min_lr = 1e-4;
  long warmup_steps = 20;
  long steps = 300;
  long batch_size = 8;
  double weight_decay = 1e-4;
  double clip_norm = 5.0;
  unsigned seed = 1;
};

struct ModelOptions {
  bool classifier_baseline = false;
  int max_decode_len = 6;
  bool oracle_eval = false;
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const char* who,
                       std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw std::invalid_argument(std::string(who) + ": expected an object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (item.key() == a) {
        ok = true;
        break;
      }
    if (!ok)
      throw std::invalid_argument(std::string(who) + ": unknown key '" + item.key() + "'");
  }
}

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline const char* mode_name(steering::KernelMode m) {
  switch (m) {
    case steering::KernelMode::kFull: return "full";
    case steering::KernelMode::kDirect: return "direct";
    case steering::KernelMode::kMlp: return "mlp";
  }
  throw std::logic_error("unreachable kernel mode");
}

inline steering::KernelMode mode_from_name(const std::string& s) {
  if (s == "full") return steering::KernelMode::kFull;
  if (s == "direct") return steering::KernelMode::kDirect;
  if (s == "mlp") return steering::KernelMode::kMlp;
  throw std::invalid_argument("config: unknown kernel mode '" + s + "'");
}

inline const char* split_name(data::SplitMode m) {
  switch (m) {
    case data::SplitMode::kDefault: return "default";
    case data::SplitMode::kRfUc: return "rf_uc";
    case data::SplitMode::kNfUc: return "nf_uc";
    case data::SplitMode::kUo: return "uo";
    case data::SplitMode::kUv: return "uv";
  }
  throw std::logic_error("unreachable split mode");
}

inline data::SplitMode split_from_name(const std::string& s) {
  if (s == "default") return data::SplitMode::kDefault;
  if (s == "rf_uc") return data::SplitMode::kRfUc;
  if (s == "nf_uc") return data::SplitMode::kNfUc;
  if (s == "uo") return data::SplitMode::kUo;
  if (s == "uv") return data::SplitMode::kUv;
  throw std::invalid_argument("config: unknown split mode '" + s + "'");
}

}  // namespace detail

struct RunConfig {
  std::string out_dir = "runs/out";
  DataConfig data;
  perception::PerceptionConfig perception;
  SteeringSettings steering;
  GeneratorSettings generator;
  objectives::LossWeights loss;
  OptimConfig optim;
  data::SplitSpec split;
  ModelOptions options;

  steering::SteeringConfig steering_config() const {
    hoi::steering::SteeringConfig c;
    c.kernel_length = steering.kernel_length;
    c.d = generator.d;
    c.d_model = perception.d_model;
    c.d_g = perception.d_g;
    c.heads = steering.heads;
    c.vkf_residual = steering.vkf_residual;
    c.mode = steering.mode;
    c.zero_vk = steering.zero_vk;
    c.zero_fglobal = steering.zero_fglobal;
    return c;
  }

  generator::ToyGeneratorConfig generator_config() const {
    generator::ToyGeneratorConfig c;
    c.seed = generator.seed;
    c.d = generator.d;
    c.layers = generator.layers;
    c.heads = generator.heads;
    c.d_g = perception.d_g;
    c.patch_grid = 8;
    c.embed_scale = generator.embed_scale;
    c.anchor_strength = generator.anchor_strength;
    c.anchor_noise = generator.anchor_noise;
    return c;
  }

  void validate() const {
    perception.validate();
    steering_config().validate();
    if (generator.d <= 0 || generator.layers < 1 || generator.heads <= 0 ||
        generator.d % generator.heads != 0)
      throw std::invalid_argument("config: bad generator shape");
    if (!(generator.embed_scale > 0) || generator.anchor_strength < 0 ||
        generator.anchor_noise < 0)
      throw std::invalid_argument("config: bad generator scales");
    loss.validate();
    if (!(optim.lr > 0) || optim.min_lr < 0 || optim.warmup_steps < 0 || optim.steps < 0 ||
        optim.batch_size < 1 || optim.weight_decay < 0 || !(optim.clip_norm > 0))
      throw std::invalid_argument("config: bad optimizer settings");
    if (data.n_images < 1 || data.eval_n_images < 1)
      throw std::invalid_argument("config: need at least one image per split");
    if (data.image_size <= 0 || data.image_size % 8 != 0)
      throw std::invalid_argument("config: image size must be a positive multiple of 8");
    if (data.min_entities < 1 || data.max_entities < data.min_entities)
      throw std::invalid_argument("config: bad entity count range");
    if (data.two_person_prob < 0 || data.two_person_prob > 1)
      throw std::invalid_argument("config: two_person_prob in [0,1]");
    if (options.max_decode_len < 1)
      throw std::invalid_argument("config: max_decode_len must be >= 1");
    if ((split.mode == data::SplitMode::kRfUc || split.mode == data::SplitMode::kNfUc) &&
        split.n_holdout < 1)
      throw std::invalid_argument("config: n_holdout must be >= 1 for count-based splits");
    if (split.mode == data::SplitMode::kUv && split.held_verbs.empty())
      throw std::invalid_argument("config: unseen-verb split needs held_verbs");
    if (split.mode == data::SplitMode::kUo && split.held_objects.empty())
      throw std::invalid_argument("config: unseen-object split needs held_objects");
  }

  static RunConfig from_json(const nlohmann::json& j) {
    using detail::check_keys;
    using detail::read_field;
    RunConfig c;
    check_keys(j, "config", {"out_dir", "data", "perception", "steering", "generator", "loss",
                             "optim", "split", "options"});
    read_field(j, "out_dir", c.out_dir);
    if (j.contains("data")) {
      const auto& d = j.at("data");
      check_keys(d, "config.data",
                 {"n_images", "seed", "image_size", "min_entities", "max_entities",
                  "two_person_prob", "detector_seed", "eval_n_images", "eval_seed", "train_jsonl",
                  "eval_jsonl"});
      read_field(d, "n_images", c.data.n_images);
      read_field(d, "seed", c.data.seed);
      read_field(d, "image_size", c.data.image_size);
      read_field(d, "min_entities", c.data.min_entities);
      read_field(d, "max_entities", c.data.max_entities);
      read_field(d, "two_person_prob", c.data.two_person_prob);
      read_field(d, "detector_seed", c.data.detector_seed);
      read_field(d, "eval_n_images", c.data.eval_n_images);
      read_field(d, "eval_seed", c.data.eval_seed);
      read_field(d, "train_jsonl", c.data.train_jsonl);
      read_field(d, "eval_jsonl", c.data.eval_jsonl);
    }
    if (j.contains("perception")) {
      const auto& p = j.at("perception");
      check_keys(p, "config.perception",
                 {"d_z", "d_a", "d_e", "d_g", "d_model", "sat_layers", "sat_heads", "alpha",
                  "quota", "max_candidates"});
      read_field(p, "d_z", c.perception.d_z);
      read_field(p, "d_a", c.perception.d_a);
      read_field(p, "d_e", c.perception.d_e);
      read_field(p, "d_g", c.perception.d_g);
      read_field(p, "d_model", c.perception.d_model);
      read_field(p, "sat_layers", c.perception.sat_layers);
      read_field(p, "sat_heads", c.perception.sat_heads);
      read_field(p, "alpha", c.perception.alpha);
      read_field(p, "quota", c.perception.quota);
      read_field(p, "max_candidates", c.perception.max_candidates);
    }
    if (j.contains("steering")) {
      const auto& s = j.at("steering");
      check_keys(s, "config.steering",
                 {"kernel_length", "heads", "vkf_residual", "mode", "zero_vk", "zero_fglobal"});
      read_field(s, "kernel_length", c.steering.kernel_length);
      read_field(s, "heads", c.steering.heads);
      read_field(s, "vkf_residual", c.steering.vkf_residual);
      if (s.contains("mode")) c.steering.mode = detail::mode_from_name(s.at("mode").get<std::string>());
      read_field(s, "zero_vk", c.steering.zero_vk);
      read_field(s, "zero_fglobal", c.steering.zero_fglobal);
    }
    if (j.contains("generator")) {
      const auto& g = j.at("generator");
      check_keys(g, "config.generator",
                 {"seed", "d", "layers", "heads", "embed_scale", "anchor_strength",
                  "anchor_noise", "use_anchors"});
      read_field(g, "seed", c.generator.seed);
      read_field(g, "d", c.generator.d);
      read_field(g, "layers", c.generator.layers);
      read_field(g, "heads", c.generator.heads);
      read_field(g, "embed_scale", c.generator.embed_scale);
      read_field(g, "anchor_strength", c.generator.anchor_strength);
      read_field(g, "anchor_noise", c.generator.anchor_noise);
      read_field(g, "use_anchors", c.generator.use_anchors);
    }
    if (j.contains("loss")) {
      const auto& l = j.at("loss");
      check_keys(l, "config.loss",
                 {"lambda_det", "lambda_sal", "lambda_gen", "lambda_nce", "lambda_logic", "tau"});
      read_field(l, "lambda_det", c.loss.lambda_det);
      read_field(l, "lambda_sal", c.loss.lambda_sal);
      read_field(l, "lambda_gen", c.loss.lambda_gen);
      read_field(l, "lambda_nce", c.loss.lambda_nce);
      read_field(l, "lambda_logic", c.loss.lambda_logic);
      read_field(l, "tau", c.loss.tau);
    }
    if (j.contains("optim")) {
      const auto& o = j.at("optim");
      check_keys(o, "config.optim",
                 {"lr", "min_lr", "warmup_steps", "steps", "batch_size", "weight_decay",
                  "clip_norm", "seed"});
      read_field(o, "lr", c.optim.lr);
      read_field(o, "min_lr", c.optim.min_lr);
      read_field(o, "warmup_steps", c.optim.warmup_steps);
      read_field(o, "steps", c.optim.steps);
      read_field(o, "batch_size", c.optim.batch_size);
      read_field(o, "weight_decay", c.optim.weight_decay);
      read_field(o, "clip_norm", c.optim.clip_norm);
      read_field(o, "seed", c.optim.seed);
    }
    if (j.contains("split")) {
      const auto& s = j.at("split");
      check_keys(s, "config.split",
                 {"mode", "n_holdout", "held_verbs", "held_objects", "held_triplets"});
      if (s.contains("mode")) c.split.mode = detail::split_from_name(s.at("mode").get<std::string>());
      read_field(s, "n_holdout", c.split.n_holdout);
      read_field(s, "held_verbs", c.split.held_verbs);
      read_field(s, "held_objects", c.split.held_objects);
      if (s.contains("held_triplets"))
        for (const auto& t : s.at("held_triplets")) {
          if (!t.is_array() || t.size() != 2)
            throw std::invalid_argument("config.split: held_triplets entries are [verb, object]");
          c.split.held_triplets.emplace_back(t.at(0).get<int>(), t.at(1).get<int>());
        }
    }
    if (j.contains("options")) {
      const auto& o = j.at("options");
      check_keys(o, "config.options", {"classifier_baseline", "max_decode_len", "oracle_eval"});
      read_field(o, "classifier_baseline", c.options.classifier_baseline);
      read_field(o, "max_decode_len", c.options.max_decode_len);
      read_field(o, "oracle_eval", c.options.oracle_eval);
    }
    c.validate();
    return c;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["out_dir"] = out_dir;
    j["data"] = {{"n_images", data.n_images},
                 {"seed", data.seed},
                 {"image_size", data.image_size},
                 {"min_entities", data.min_entities},
                 {"max_entities", data.max_entities},
                 {"two_person_prob", data.two_person_prob},
                 {"detector_seed", data.detector_seed},
                 {"eval_n_images", data.eval_n_images},
                 {"eval_seed", data.eval_seed},
                 {"train_jsonl", data.train_jsonl},
                 {"eval_jsonl", data.eval_jsonl}};
    j["perception"] = {{"d_z", perception.d_z},
                       {"d_a", perception.d_a},
                       {"d_e", perception.d_e},
                       {"d_g", perception.d_g},
                       {"d_model", perception.d_model},
                       {"sat_layers", perception.sat_layers},
                       {"sat_heads", perception.sat_heads},
                       {"alpha", perception.alpha},
                       {"quota", perception.quota},
                       {"max_candidates", perception.max_candidates}};
    j["steering"] = {{"kernel_length", steering.kernel_length},
                     {"heads", steering.heads},
                     {"vkf_residual", steering.vkf_residual},
                     {"mode", detail::mode_name(steering.mode)},
                     {"zero_vk", steering.zero_vk},
                     {"zero_fglobal", steering.zero_fglobal}};
    j["generator"] = {{"seed", generator.seed},
                      {"d", generator.d},
                      {"layers", generator.layers},
                      {"heads", generator.heads},
                      {"embed_scale", generator.embed_scale},
                      {"anchor_strength", generator.anchor_strength},
                      {"anchor_noise", generator.anchor_noise},
                      {"use_anchors", generator.use_anchors}};
    j["loss"] = {{"lambda_det", loss.lambda_det},   {"lambda_sal", loss.lambda_sal},
                 {"lambda_gen", loss.lambda_gen},   {"lambda_nce", loss.lambda_nce},
                 {"lambda_logic", loss.lambda_logic}, {"tau", loss.tau}};
    j["optim"] = {{"lr", optim.lr},
                  {"min_lr", optim.min_lr},
                  {"warmup_steps", optim.warmup_steps},
                  {"steps", optim.steps},
                  {"batch_size", optim.batch_size},
                  {"weight_decay", optim.weight_decay},
                  {"clip_norm", optim.clip_norm},
                  {"seed", optim.seed}};
    nlohmann::json held = nlohmann::json::array();
    for (const auto& [v, o] : split.held_triplets) held.push_back({v, o});
    j["split"] = {{"mode", detail::split_name(split.mode)},
                  {"n_holdout", split.n_holdout},
                  {"held_verbs", split.held_verbs},
                  {"held_objects", split.held_objects},
                  {"held_triplets", held}};
    j["options"] = {{"classifier_baseline", options.classifier_baseline},
                    {"max_decode_len", options.max_decode_len},
                    {"oracle_eval", options.oracle_eval}};
    return j;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    nlohmann::json j;
    in >> j;
    return from_json(j);
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("config: cannot write " + path);
    out << to_json().dump(2) << "\n";
  }
};

// ---- assembled pipeline ----

struct ImageForward {
  std::vector<perception::CandidatePair> pairs;
  std::vector<std::size_t> selected;
  nn::Var u_tilde;   // n_pairs x d_model
  nn::Var salience;  // n_pairs x 1
  Eigen::MatrixXd patches;
  nn::Var f_global;  // 1 x d_g, constant
};

struct StepMetrics {
  long step = 0;
  double lr = 0;
  double total = 0;
  double salience = 0;
  double generative = 0;
  double contrastive = 0;
  double logic = 0;
  double grad_norm = 0;
};

class Model {
 public:
  RunConfig cfg;
  data::Rulebook rulebook;
  data::FeatureBank bank;
  generator::ToyGenerator gen;
  generator::VerbVocabulary vocab;
  std::vector<int> inquiry_ids;
  nn::ParamStore store;
  perception::PerceptionModel perc;
  steering::SteeringModel steer;
  nn::Linear cls_head;  // classifier baseline only
  objectives::NegativeBank nbank;

  explicit Model(const RunConfig& c)
      : cfg(c),
        rulebook(data::Rulebook::standard()),
        bank(c.generator.seed * 2654435761u + 17u, c.perception.d_z, c.perception.d_a, 8),
        gen(rulebook.word_list(), c.generator_config(), make_anchors(c, rulebook)),
        vocab(generator::VerbVocabulary::build(rulebook.verbs, gen.tokenizer(),
                                               generator::default_auxiliaries(rulebook.verbs),
                                               rulebook.synonyms)),
        inquiry_ids(gen.tokenizer().encode(steering::kInquiryText)),
        train_rng_(c.optim.seed) {
    cfg.validate();
    nn::Rng init(static_cast<std::uint64_t>(c.optim.seed) ^ 0x7f4a7c15ull);
    perc = perception::PerceptionModel(store, init, c.perception);
    steer = steering::SteeringModel(store, init, c.steering_config());
    if (c.options.classifier_baseline)
      cls_head = nn::Linear(store, init, "cls.head", c.perception.d_model, rulebook.n_verbs());
  }

  static std::map<int, Eigen::VectorXd> make_anchors(const RunConfig& c,
                                                     const data::Rulebook& rb) {
    std::map<int, Eigen::VectorXd> m;
    if (!c.generator.use_anchors) return m;
    generator::Tokenizer tok(rb.word_list());
    for (int v = 0; v < rb.n_verbs(); ++v) {
      const auto words = generator::Tokenizer::split_words(rb.verbs[v]);
      m[tok.id(words.front())] = rb.verb_anchor(v);
    }
    return m;
  }

  ImageForward forward(const std::vector<core::EntityDetection>& dets,
                       const core::Raster& raster) const {
    ImageForward out;
    out.patches = gen.encode_scene(raster);
    out.f_global = nn::Var(Eigen::MatrixXd(steering::scene_token(out.patches)));
    const long n = static_cast<long>(dets.size());
    std::vector<long> hs, os;
    for (long h = 0; h < n; ++h) {
      if (dets[h].category != 0) continue;
      for (long j = 0; j < n; ++j) {
        if (j == h) continue;
        perception::CandidatePair p;
        p.human_index = static_cast<int>(h);
        p.object_index = static_cast<int>(j);
        p.geometry = core::geometric_encoding(dets[h].box, dets[j].box, raster.width,
                                              raster.height);
        p.conf_h = dets[h].confidence;
        p.conf_o = dets[j].confidence;
        out.pairs.push_back(std::move(p));
        hs.push_back(h);
        os.push_back(j);
      }
    }
    if (out.pairs.empty()) {
      out.salience = nn::Var(Eigen::MatrixXd(0, 1));
      return out;
    }
    Eigen::MatrixXd Z(n, cfg.perception.d_z), A(n, cfg.perception.d_a);
    for (long i = 0; i < n; ++i) {
      Z.row(i) = dets[i].instance_token.transpose();
      A.row(i) = dets[i].appearance_token.transpose();
    }
    nn::Var F = perc.fuse_entities(nn::Var(std::move(Z)), nn::Var(std::move(A)));
    Eigen::MatrixXd G(static_cast<long>(out.pairs.size()), 8);
    for (std::size_t i = 0; i < out.pairs.size(); ++i)
      G.row(static_cast<long>(i)) = out.pairs[i].geometry.values.transpose();
    nn::Var U = perc.build_candidate_tokens(F, hs, os, G);
    out.u_tilde = perc.sat_forward(U);
    out.salience = perc.salience_scores(out.u_tilde);
    const Eigen::MatrixXd& s = out.salience.val();
    for (std::size_t i = 0; i < out.pairs.size(); ++i) {
      auto& p = out.pairs[i];
      p.s_k = s(static_cast<long>(i), 0);
      p.r_k = perception::orchestration_gate(p.s_k, p.conf_h, p.conf_o, cfg.perception.alpha);
    }
    out.selected = perception::select_candidates(out.pairs, cfg.perception);
    for (std::size_t idx : out.selected) out.pairs[idx].selected = true;
    return out;
  }

  nn::Var candidate_kernel(const ImageForward& fwd, std::size_t k) const {
    nn::Var v_row = nn::slice_rows(fwd.u_tilde, static_cast<long>(k), 1);
    return steer.kernel(v_row, fwd.f_global);
  }

  // Ground-truth-to-candidate assignment under the same cost the salience
  // targets use; returns the matched candidate index per ground truth or -1.
  std::vector<long> match_assignments(const std::vector<core::HOITriplet>& gts,
                                      const std::vector<perception::CandidatePair>& pairs,
                                      const std::vector<core::EntityDetection>& dets) const {
    if (gts.empty() || pairs.empty()) return std::vector<long>(gts.size(), -1);
    Eigen::MatrixXd cost(static_cast<long>(gts.size()), static_cast<long>(pairs.size()));
    for (std::size_t g = 0; g < gts.size(); ++g)
      for (std::size_t k = 0; k < pairs.size(); ++k) {
        const auto& obj = dets[pairs[k].object_index];
        if (obj.category != gts[g].object_category) {
          cost(static_cast<long>(g), static_cast<long>(k)) = objectives::kInfeasible;
          continue;
        }
        double ih = core::iou(dets[pairs[k].human_index].box, gts[g].human_box);
        double io = core::iou(obj.box, gts[g].object_box);
        cost(static_cast<long>(g), static_cast<long>(k)) = 1.0 - std::min(ih, io);
      }
    return objectives::hungarian_match(cost);
  }

  StepMetrics train_step(const std::vector<const data::HOISample*>& batch, double lr,
                         nn::AdamW& opt) {
    store.zero_grads();
    std::vector<nn::Var> sal_t, gen_t, nce_t, logic_t;
    for (const auto* s : batch) {
      auto dets = data::detect_entities(*s, bank, cfg.data.detector_seed);
      auto fwd = forward(dets, s->raster);
      auto labels = objectives::match_salience_targets(s->gts, fwd.pairs, dets);
      sal_t.push_back(objectives::loss_salience(fwd.salience, labels));
      auto assign = match_assignments(s->gts, fwd.pairs, dets);
      for (std::size_t g = 0; g < s->gts.size(); ++g) {
        if (assign[g] < 0) continue;
        const std::size_t k = static_cast<std::size_t>(assign[g]);
        const int verb = s->gts[g].verb;
        if (cfg.options.classifier_baseline) {
          nn::Var v_row = nn::slice_rows(fwd.u_tilde, static_cast<long>(k), 1);
          nn::Var lp = nn::log_softmax_rows(cls_head(v_row));
          gen_t.push_back(nn::scale(nn::gather(lp, {{0, verb}}), -1.0));
          continue;
        }
        nn::Var Q = candidate_kernel(fwd, k);
        nn::Var prefix = steering::assemble_prefix(Q, inquiry_ids, gen);
        std::vector<int> targets = vocab.phrase_tokens[verb];
        targets.push_back(vocab.eos_id);
        gen_t.push_back(objectives::loss_generative(prefix, targets, gen, vocab));
        auto negs = nbank.negatives_for(verb, rulebook.n_verbs(), train_rng_);
        nce_t.push_back(objectives::loss_nce(Q, verb, negs, gen, vocab, cfg.loss.tau));
        logic_t.push_back(objectives::loss_logic(
            objectives::first_verb_token_probs(prefix, gen, vocab, true),
            rulebook.exclusions));
      }
    }
    objectives::LossParts parts;
    parts.sal = mean_of(sal_t);
    parts.gen = mean_of(gen_t);
    parts.nce = mean_of(nce_t);
    parts.logic = mean_of(logic_t);
    nn::Var total = objectives::total_loss(parts, cfg.loss);
    nn::backward(total);
    StepMetrics m;
    m.lr = lr;
    m.total = total.item();
    m.salience = parts.sal.defined() ? parts.sal.item() : 0.0;
    m.generative = parts.gen.defined() ? parts.gen.item() : 0.0;
    m.contrastive = parts.nce.defined() ? parts.nce.item() : 0.0;
    m.logic = parts.logic.defined() ? parts.logic.item() : 0.0;
    m.grad_norm = nn::clip_grad_norm(store, cfg.optim.clip_norm);
    opt.step(lr);
    return m;
  }

  void train(const std::vector<data::HOISample>& samples,
             const std::function<void(const StepMetrics&)>& on_step = nullptr) {
    if (cfg.optim.steps == 0) return;
    if (samples.empty()) throw std::invalid_argument("train: no samples");
    const std::uint64_t gen_before = gen.checksum();
    const std::uint64_t bank_before = bank.checksum();
    nn::AdamW opt(store);
    opt.weight_decay = cfg.optim.weight_decay;
    for (long step = 0; step < cfg.optim.steps; ++step) {
      double lr = nn::cosine_lr(step, cfg.optim.steps, cfg.optim.lr, cfg.optim.min_lr,
                                cfg.optim.warmup_steps);
      std::vector<const data::HOISample*> batch;
      std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);
      for (long b = 0; b < cfg.optim.batch_size; ++b) batch.push_back(&samples[pick(train_rng_)]);
      StepMetrics m = train_step(batch, lr, opt);
      m.step = step;
      if (on_step) on_step(m);
    }
    if (gen.checksum() != gen_before)
      throw std::runtime_error("train: generator parameters changed");
    if (bank.checksum() != bank_before)
      throw std::runtime_error("train: feature bank parameters changed");
  }

  // One scored prediction per legal verb of each selected pair's object
  // category, as in standard HOI scoring where the class space is the
  // annotated verb-object combinations. Verb confidences are the generator's
  // first-step posterior over the verb vocabulary (or the classifier head's
  // softmax in baseline mode); a pair whose object category admits no verb
  // emits nothing.
  std::vector<core::HOITriplet> infer_detections(const std::vector<core::EntityDetection>& dets,
                                                 const core::Raster& raster) const {
    std::vector<core::HOITriplet> out;
    auto fwd = forward(dets, raster);
    for (std::size_t k : fwd.selected) {
      const auto& p = fwd.pairs[k];
      const int category = dets[p.object_index].category;
      std::vector<int> legal = rulebook.legal_verbs(category);
      if (legal.empty()) continue;
      Eigen::VectorXd verb_conf;
      if (cfg.options.classifier_baseline) {
        nn::Var v_row = nn::slice_rows(fwd.u_tilde, static_cast<long>(k), 1);
        Eigen::RowVectorXd logits = cls_head(v_row).val().row(0);
        Eigen::RowVectorXd probs = (logits.array() - logits.maxCoeff()).exp();
        probs /= probs.sum();
        verb_conf = probs.transpose();
      } else {
        nn::Var prefix = steering::assemble_prefix(candidate_kernel(fwd, k), inquiry_ids, gen);
        verb_conf = objectives::first_verb_token_probs(prefix, gen, vocab, true).val().col(0);
      }
      for (int verb : legal) {
        core::HOITriplet t;
        t.human_box = dets[p.human_index].box;
        t.object_box = dets[p.object_index].box;
        t.object_category = category;
        t.verb = verb;
        t.score = p.r_k * verb_conf(verb);
        out.push_back(t);
      }
    }
    return out;
  }

  // Single best interaction readout for a candidate: greedy constrained
  // decoding with the open-vocabulary fallback. Used for the human-readable
  // inference report; returns kNoInteraction when nothing maps into V.
  generator::GenerationResult describe_candidate(const ImageForward& fwd, std::size_t k) const {
    nn::Var prefix = steering::assemble_prefix(candidate_kernel(fwd, k), inquiry_ids, gen);
    auto res = generator::constrained_decode(prefix.val(), vocab, gen, cfg.options.max_decode_len);
    if (res.verb == generator::VerbVocabulary::kNoInteraction && !res.phrase.empty())
      res.verb = generator::open_vocab_map(res.phrase, vocab, gen, true);
    return res;
  }

  std::vector<core::HOITriplet> infer_image(const data::HOISample& sample) const {
    auto dets = data::detect_entities(sample, bank, cfg.data.detector_seed);
    return infer_detections(dets, sample.raster);
  }

  nn::Rng& train_rng() { return train_rng_; }

 private:
  static nn::Var mean_of(const std::vector<nn::Var>& terms) {
    if (terms.empty()) return nn::Var();
    nn::Var acc = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) acc = nn::add(acc, terms[i]);
    return nn::scale(acc, 1.0 / static_cast<double>(terms.size()));
  }

  nn::Rng train_rng_;
};

// ---- checkpoint io ----

inline nlohmann::json checkpoint_json(const Model& m) {
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, v] : m.store.items()) {
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(v.rows() * v.cols()));
    for (long r = 0; r < v.rows(); ++r)
      for (long c = 0; c < v.cols(); ++c) flat.push_back(v.val()(r, c));
    params[name] = {{"rows", v.rows()}, {"cols", v.cols()}, {"data", std::move(flat)}};
  }
  nlohmann::json j;
  j["format"] = "hoisteer.checkpoint.v1";
  j["verb_phrases"] = m.vocab.phrases;
  j["generator_checksum"] = m.gen.checksum();
  j["bank_checksum"] = m.bank.checksum();
  j["params"] = std::move(params);
  return j;
}

inline void save_checkpoint(const Model& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  out << checkpoint_json(m).dump() << "\n";
}

inline void load_checkpoint(Model& m, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  nlohmann::json j;
  in >> j;
  if (!j.contains("format") || j.at("format") != "hoisteer.checkpoint.v1")
    throw std::runtime_error("checkpoint: unrecognized format");
  const auto phrases = j.at("verb_phrases").get<std::vector<std::string>>();
  if (phrases != m.vocab.phrases)
    throw std::runtime_error("checkpoint: vocabulary mismatch with the configured model");
  if (j.at("generator_checksum").get<std::uint64_t>() != m.gen.checksum())
    throw std::runtime_error("checkpoint: frozen generator differs from the configured model");
  if (j.at("bank_checksum").get<std::uint64_t>() != m.bank.checksum())
    throw std::runtime_error("checkpoint: frozen feature bank differs from the configured model");
  const auto& params = j.at("params");
  for (const auto& [name, v] : m.store.items()) {
    if (!params.contains(name))
      throw std::runtime_error("checkpoint: missing parameter " + name);
    const auto& entry = params.at(name);
    const long rows = entry.at("rows").get<long>(), cols = entry.at("cols").get<long>();
    if (rows != v.rows() || cols != v.cols())
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    const auto flat = entry.at("data").get<std::vector<double>>();
    if (static_cast<long>(flat.size()) != rows * cols)
      throw std::runtime_error("checkpoint: bad payload size for " + name);
    Eigen::MatrixXd mat(rows, cols);
    std::size_t i = 0;
    for (long r = 0; r < rows; ++r)
      for (long c = 0; c < cols; ++c) mat(r, c) = flat[i++];
    m.store.at(name).val_mut() = std::move(mat);
  }
  if (params.size() != m.store.size())
    throw std::runtime_error("checkpoint: parameter set differs from the configured model");
}

}  // namespace hoi::model
