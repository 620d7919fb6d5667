#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "hoi/core.hpp"
#include "hoi/generator.hpp"
#include "hoi/nn/autodiff.hpp"
#include "hoi/perception.hpp"
#include "hoi/steering.hpp"

namespace hoi::objectives {

struct LossWeights {
  double lambda_det = 0.0;
  double lambda_sal = 1.0;
  double lambda_gen = 1.0;
  double lambda_nce = 0.5;
  double lambda_logic = 0.1;
  double tau = 0.07;

  void validate() const {
    if (lambda_det < 0 || lambda_sal < 0 || lambda_gen < 0 || lambda_nce < 0 || lambda_logic < 0)
      throw std::invalid_argument("loss weights must be non-negative");
    if (!(tau > 0)) throw std::invalid_argument("tau must be positive");
  }
};

struct ExclusionSet {
  std::vector<std::pair<int, int>> pairs;

  void validate(int n_verbs) const {
    for (const auto& [a, b] : pairs) {
      if (a == b) throw std::invalid_argument("exclusion set: identical verb pair");
      if (a < 0 || b < 0 || a >= n_verbs || b >= n_verbs)
        throw std::invalid_argument("exclusion set: unknown verb id");
    }
  }
};

// Negative verbs for the alignment loss. Exhaustive below 64 verbs, otherwise
// 32 uniform draws without the positive.
struct NegativeBank {
  int sample_size = 32;

  std::vector<int> negatives_for(int positive, int n_verbs, nn::Rng& rng) const {
    if (n_verbs < 2) throw std::invalid_argument("negative bank: need at least two verbs");
    std::vector<int> all;
    for (int v = 0; v < n_verbs; ++v)
      if (v != positive) all.push_back(v);
    if (n_verbs <= 64 || static_cast<int>(all.size()) <= sample_size) return all;
    std::vector<int> out;
    for (int i = 0; i < sample_size; ++i) {
      std::uniform_int_distribution<std::size_t> pick(0, all.size() - 1);
      std::size_t j = pick(rng);
      out.push_back(all[j]);
      all.erase(all.begin() + static_cast<long>(j));
    }
    return out;
  }
};

constexpr double kInfeasible = 1e9;

// Minimum-cost square assignment (potential-based shortest augmenting paths).
inline std::vector<long> hungarian_square(const Eigen::MatrixXd& cost) {
  const long n = cost.rows();
  if (cost.cols() != n) throw std::invalid_argument("hungarian_square: matrix not square");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<long> p(n + 1, 0), way(n + 1, 0);
  for (long i = 1; i <= n; ++i) {
    p[0] = i;
    long j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      long i0 = p[j0], j1 = 0;
      double delta = inf;
      for (long j = 1; j <= n; ++j)
        if (!used[j]) {
          double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
          if (cur < minv[j]) {
            minv[j] = cur;
            way[j] = j0;
          }
          if (minv[j] < delta) {
            delta = minv[j];
            j1 = j;
          }
        }
      for (long j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      long j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<long> row_to_col(n, -1);
  for (long j = 1; j <= n; ++j)
    if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

// Rectangular wrapper: pads to square, then drops dummy and infeasible
// assignments. Returns per-row column or -1.
inline std::vector<long> hungarian_match(const Eigen::MatrixXd& cost) {
  const long r = cost.rows(), c = cost.cols();
  if (r == 0 || c == 0) return std::vector<long>(r, -1);
  const long n = std::max(r, c);
  const double pad = 1e3;  // worse than any feasible cost, better than infeasible
  Eigen::MatrixXd sq = Eigen::MatrixXd::Constant(n, n, pad);
  sq.topLeftCorner(r, c) = cost.cwiseMin(kInfeasible);
  auto assign = hungarian_square(sq);
  std::vector<long> out(r, -1);
  for (long i = 0; i < r; ++i)
    if (assign[i] < c && cost(i, assign[i]) < pad / 2) out[i] = assign[i];
  return out;
}

// One-to-one assignment of ground-truth interactions to candidates. Cost is
// 1 - min(human IoU, object IoU); object-class mismatch is infeasible.
// Returns per-candidate 0/1 labels.
inline std::vector<int> match_salience_targets(
    const std::vector<core::HOITriplet>& gts,
    const std::vector<perception::CandidatePair>& candidates,
    const std::vector<core::EntityDetection>& detections) {
  std::vector<int> labels(candidates.size(), 0);
  if (gts.empty() || candidates.empty()) return labels;
  Eigen::MatrixXd cost(static_cast<long>(gts.size()), static_cast<long>(candidates.size()));
  for (std::size_t g = 0; g < gts.size(); ++g)
    for (std::size_t k = 0; k < candidates.size(); ++k) {
      const auto& cand = candidates[k];
      const auto& obj = detections[cand.object_index];
      if (obj.category != gts[g].object_category) {
        cost(g, k) = kInfeasible;
        continue;
      }
      double ih = core::iou(detections[cand.human_index].box, gts[g].human_box);
      double io = core::iou(obj.box, gts[g].object_box);
      cost(g, k) = 1.0 - std::min(ih, io);
    }
  auto assign = hungarian_match(cost);
  for (long g = 0; g < static_cast<long>(gts.size()); ++g)
    if (assign[g] >= 0) labels[assign[g]] = 1;
  return labels;
}

// Mean binary cross-entropy of salience scores against matched labels.
inline nn::Var loss_salience(const nn::Var& scores, const std::vector<int>& labels) {
  if (scores.cols() != 1 || scores.rows() != static_cast<long>(labels.size()))
    throw std::invalid_argument("loss_salience: scores must be N x 1 matching labels");
  if (labels.empty()) return nn::Var::scalar(0.0);
  nn::Mat y(static_cast<long>(labels.size()), 1);
  for (std::size_t i = 0; i < labels.size(); ++i) y(static_cast<long>(i), 0) = labels[i];
  nn::Mat ones = nn::Mat::Ones(scores.rows(), 1);
  nn::Var pos = nn::cmul(nn::Var(y), nn::log_clamped(scores));
  nn::Var neg = nn::cmul(nn::Var(ones - y), nn::log_clamped(nn::sub(nn::Var(ones), scores)));
  return nn::scale(nn::mean_all(nn::add(pos, neg)), -1.0);
}

namespace detail {

inline nn::Mat mask_bias(long rows, const generator::VerbVocabulary& vocab, bool include_eos) {
  nn::Mat bias = nn::Mat::Constant(rows, static_cast<long>(vocab.verb_token_mask.size()), -1e30);
  for (std::size_t t = 0; t < vocab.verb_token_mask.size(); ++t)
    if (vocab.verb_token_mask[t]) bias.col(static_cast<long>(t)).setZero();
  if (include_eos) bias.col(vocab.eos_id).setZero();
  return bias;
}

}  // namespace detail

// Teacher-forced cross-entropy of the target token sequence under the frozen
// generator, with logits restricted to the verb-focused vocabulary before the
// softmax. The prefix is the assembled [kernel; inquiry] embedding block.
inline nn::Var loss_generative(const nn::Var& prefix, const std::vector<int>& targets,
                               const generator::ToyGenerator& gen,
                               const generator::VerbVocabulary& vocab,
                               bool include_eos_in_mask = true) {
  if (targets.empty()) throw std::invalid_argument("loss_generative: empty target");
  for (int t : targets) {
    bool ok = (t >= 0 && t < static_cast<int>(vocab.verb_token_mask.size())) &&
              (vocab.verb_token_mask[t] || (include_eos_in_mask && t == vocab.eos_id));
    if (!ok) throw std::invalid_argument("loss_generative: target token outside the verb mask");
  }
  nn::Var input = prefix;
  if (targets.size() > 1) {
    std::vector<int> fed(targets.begin(), targets.end() - 1);
    input = nn::concat_rows({prefix, nn::Var(gen.embed_text(fed))});
  }
  nn::Var logits = gen.forward_logits(input);
  nn::Var masked = nn::add_const(logits, detail::mask_bias(logits.rows(), vocab, include_eos_in_mask));
  nn::Var logp = nn::log_softmax_rows(masked);
  std::vector<std::pair<long, long>> picks;
  const long base = prefix.rows() - 1;
  for (std::size_t t = 0; t < targets.size(); ++t)
    picks.emplace_back(base + static_cast<long>(t), targets[t]);
  return nn::scale(nn::sum_all(nn::gather(logp, picks)), -1.0);
}

// InfoNCE between the mean kernel row and frozen verb phrase embeddings at
// temperature tau. Gradients reach the kernel only; the embeddings are frozen.
inline nn::Var loss_nce(const nn::Var& Q_k, int positive, const std::vector<int>& negatives,
                        const generator::ToyGenerator& gen,
                        const generator::VerbVocabulary& vocab, double tau) {
  if (!(tau > 0)) throw std::invalid_argument("loss_nce: tau must be positive");
  if (negatives.empty()) throw std::invalid_argument("loss_nce: need at least one negative");
  nn::Var qbar = nn::mean_rows(Q_k);
  std::vector<nn::Var> sims;
  auto sim_to = [&](int verb) {
    if (verb < 0 || verb >= vocab.size()) throw std::invalid_argument("loss_nce: unknown verb");
    nn::Var w(nn::Mat(gen.phrase_embedding(vocab.phrase_tokens[verb])));
    return nn::cos_sim(qbar, w);
  };
  sims.push_back(sim_to(positive));
  for (int v : negatives) sims.push_back(sim_to(v));
  nn::Var logits = nn::scale(nn::concat_cols(sims), 1.0 / tau);
  nn::Var logp = nn::log_softmax_rows(logits);
  return nn::scale(nn::gather(logp, {{0, 0}}), -1.0);
}

// Probability of each verb's first phrase token at the first generation step,
// i.e. the softmax at the last prefix position, by default restricted to the
// verb-focused vocabulary.
inline nn::Var first_verb_token_probs(const nn::Var& prefix, const generator::ToyGenerator& gen,
                                      const generator::VerbVocabulary& vocab, bool masked = true) {
  nn::Var logits = gen.forward_logits(prefix);
  nn::Var last = nn::slice_rows(logits, logits.rows() - 1, 1);
  if (masked) last = nn::add_const(last, detail::mask_bias(1, vocab, true));
  nn::Var probs = nn::softmax_rows(last);
  std::vector<std::pair<long, long>> picks;
  for (int v = 0; v < vocab.size(); ++v) picks.emplace_back(0, vocab.phrase_tokens[v].front());
  return nn::gather(probs, picks);  // |V| x 1
}

// Soft mutual exclusion: sum over declared pairs of min(p(v), p(v')).
inline nn::Var loss_logic(const nn::Var& verb_probs, const ExclusionSet& M) {
  if (verb_probs.cols() != 1) throw std::invalid_argument("loss_logic: probs must be |V| x 1");
  M.validate(static_cast<int>(verb_probs.rows()));
  if (M.pairs.empty()) return nn::Var::scalar(0.0);
  std::vector<std::pair<long, long>> a, b;
  for (const auto& [va, vb] : M.pairs) {
    a.emplace_back(va, 0);
    b.emplace_back(vb, 0);
  }
  return nn::sum_all(nn::emin(nn::gather(verb_probs, a), nn::gather(verb_probs, b)));
}

struct LossParts {
  nn::Var det, sal, gen, nce, logic;
};

// Weighted sum of the defined components. A component whose Var is default
// constructed counts as zero; a non-finite component is a hard error.
inline nn::Var total_loss(const LossParts& parts, const LossWeights& w) {
  w.validate();
  struct Item {
    const nn::Var* v;
    double weight;
    const char* name;
  };
  const Item items[] = {{&parts.det, w.lambda_det, "det"},
                        {&parts.sal, w.lambda_sal, "sal"},
                        {&parts.gen, w.lambda_gen, "gen"},
                        {&parts.nce, w.lambda_nce, "nce"},
                        {&parts.logic, w.lambda_logic, "logic"}};
  nn::Var total = nn::Var::scalar(0.0);
  for (const auto& it : items) {
    if (!it.v->defined()) continue;
    if (!std::isfinite(it.v->item()))
      throw std::runtime_error(std::string("total_loss: component ") + it.name + " is not finite");
    if (it.weight == 0.0) continue;
    total = nn::add(total, nn::scale(*it.v, it.weight));
  }
  return total;
}

}  // namespace hoi::objectives
