#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "hoi/core.hpp"
#include "hoi/nn/autodiff.hpp"
#include "hoi/nn/layers.hpp"
#include "hoi/nn/rng.hpp"

namespace hoi::generator {

// Word-level tokenizer. Vocabulary is a fixed ordered word list; encode splits
// on single spaces and decode joins with them, so decode(encode(s)) == s for
// any covered string.
class Tokenizer {
 public:
  Tokenizer() = default;
  explicit Tokenizer(std::vector<std::string> words) : words_(std::move(words)) {
    for (std::size_t i = 0; i < words_.size(); ++i) {
      if (!index_.emplace(words_[i], static_cast<int>(i)).second)
        throw std::invalid_argument("tokenizer: duplicate word " + words_[i]);
    }
  }

  int vocab_size() const { return static_cast<int>(words_.size()); }
  bool contains(const std::string& w) const { return index_.count(w) > 0; }
  int id(const std::string& w) const {
    auto it = index_.find(w);
    if (it == index_.end()) throw std::invalid_argument("tokenizer: unknown word " + w);
    return it->second;
  }
  const std::string& word(int token) const {
    if (token < 0 || token >= vocab_size())
      throw std::invalid_argument("tokenizer: token id out of range");
    return words_[token];
  }

  static std::vector<std::string> split_words(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream ss(s);
    std::string w;
    while (ss >> w) out.push_back(w);
    return out;
  }

  std::vector<int> encode(const std::string& s) const {
    std::vector<int> ids;
    for (const auto& w : split_words(s)) ids.push_back(id(w));
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += word(ids[i]);
    }
    return out;
  }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

inline const char* kEosWord = "<eos>";

// Canonical verb set plus everything constrained decoding needs: per-verb
// token sequences, the token mask, and the synonym map for open-vocabulary
// assignment.
struct VerbVocabulary {
  static constexpr int kNoInteraction = -1;

  std::vector<std::string> phrases;  // verb id = index
  std::vector<std::vector<int>> phrase_tokens;
  std::vector<bool> verb_token_mask;  // over generator vocab
  std::unordered_map<std::string, int> synonym_table;
  int eos_id = -1;

  int size() const { return static_cast<int>(phrases.size()); }

  static VerbVocabulary build(const std::vector<std::string>& phrases, const Tokenizer& tok,
                              const std::vector<std::string>& auxiliaries = {},
                              const std::unordered_map<std::string, int>& synonyms = {}) {
    VerbVocabulary v;
    v.phrases = phrases;
    v.verb_token_mask.assign(tok.vocab_size(), false);
    for (const auto& p : phrases) {
      auto ids = tok.encode(p);
      if (ids.empty()) throw std::invalid_argument("verb vocabulary: empty phrase");
      for (int t : ids) v.verb_token_mask[t] = true;
      v.phrase_tokens.push_back(std::move(ids));
    }
    for (const auto& a : auxiliaries) v.verb_token_mask[tok.id(a)] = true;
    for (const auto& [phrase, verb] : synonyms) {
      if (verb < 0 || verb >= v.size())
        throw std::invalid_argument("verb vocabulary: synonym targets unknown verb");
      v.synonym_table.emplace(phrase, verb);
    }
    v.eos_id = tok.id(kEosWord);
    return v;
  }
};

// Prepositions that appear inside the canonical phrases; these are the default
// auxiliary tokens admitted during constrained decoding.
inline std::vector<std::string> default_auxiliaries(const std::vector<std::string>& phrases) {
  static const std::vector<std::string> preps{"on",   "in", "at",   "with", "to",
                                              "of",   "up", "down", "under", "over"};
  std::vector<std::string> out;
  for (const auto& p : phrases)
    for (const auto& w : Tokenizer::split_words(p))
      if (std::find(preps.begin(), preps.end(), w) != preps.end() &&
          std::find(out.begin(), out.end(), w) == out.end())
        out.push_back(w);
  return out;
}

struct GenerationResult {
  int candidate_id = -1;
  std::string phrase;
  std::vector<int> tokens;  // without eos
  int verb = VerbVocabulary::kNoInteraction;
  double verb_score = 0.0;  // length-normalized sequence log-probability
};

// Behavioral contract every generator backend satisfies. Parameters are
// immutable for the lifetime of the run; decode paths must be deterministic.
class GeneratorInterface {
 public:
  virtual ~GeneratorInterface() = default;
  virtual long hidden_size() const = 0;
  virtual long vocab_size() const = 0;
  virtual const Tokenizer& tokenizer() const = 0;
  // T x d token embeddings, position-free (positions are added inside the
  // decoder so prefix assembly is a pure concatenation).
  virtual Eigen::MatrixXd embed_text(const std::vector<int>& ids) const = 0;
  // P x D_g patch features from the frozen vision tower stand-in.
  virtual Eigen::MatrixXd encode_scene(const core::Raster& image) const = 0;
  virtual long scene_feature_dim() const = 0;
  virtual long scene_patch_grid() const = 0;
  // Differentiable decoder pass: (N x d) prefix embeddings -> N x vocab
  // logits. Gradients flow into the prefix only; weights are frozen.
  virtual nn::Var forward_logits(const nn::Var& prefix) const = 0;
  virtual Eigen::RowVectorXd token_embedding(int id) const = 0;
  virtual std::uint64_t checksum() const = 0;
};

struct ToyGeneratorConfig {
  unsigned seed = 7;
  long d = 32;
  long layers = 2;
  long heads = 4;
  long d_g = 16;        // scene patch feature size
  long patch_grid = 8;  // patches per image side
  long max_positions = 64;
  double embed_scale = 0.35;
  // Anchored token rows: beta * unit(U * anchor) + noise * N(0, I). These
  // stand in for the semantic structure a pretrained model's embedding space
  // would carry, which is what lets alignment transfer to held-out verbs.
  double anchor_strength = 2.0;
  double anchor_noise = 0.25;
};

class ToyGenerator : public GeneratorInterface {
 public:
  ToyGenerator(std::vector<std::string> words, ToyGeneratorConfig cfg,
               const std::map<int, Eigen::VectorXd>& anchors = {})
      : tok_(std::move(words)), cfg_(cfg) {
    nn::Rng rng(cfg.seed);
    const long v = tok_.vocab_size();
    nn::Mat E = nn::randn(rng, v, cfg.d, cfg.embed_scale);
    if (!anchors.empty()) {
      const long adim = anchors.begin()->second.size();
      nn::Mat U = nn::randn(rng, cfg.d, adim, 1.0 / std::sqrt(static_cast<double>(adim)));
      for (const auto& [token, a] : anchors) {
        if (token < 0 || token >= v) throw std::invalid_argument("anchor token out of range");
        if (a.size() != adim) throw std::invalid_argument("anchor dims inconsistent");
        Eigen::VectorXd dir = U * a;
        double n = dir.norm();
        if (n < 1e-12) throw std::invalid_argument("anchor projects to zero");
        E.row(token) = cfg.anchor_strength * (dir / n).transpose() +
                       nn::randn(rng, 1, cfg.d, cfg.anchor_noise);
      }
    }
    E_ = store_.create("embed", std::move(E), false);
    for (long l = 0; l < cfg.layers; ++l)
      blocks_.emplace_back(store_, rng, "block" + std::to_string(l), cfg.d, cfg.heads, 4, false);
    final_ln_ = nn::LayerNorm(store_, rng, "final_ln", cfg.d, false);
    W_scene_ = store_.create("scene.W", nn::randn(rng, 5, cfg.d_g, 0.8), false);
    b_scene_ = store_.create("scene.b", nn::randn(rng, 1, cfg.d_g, 0.1), false);
    pos_ = sinusoidal(cfg.max_positions, cfg.d);
  }

  long hidden_size() const override { return cfg_.d; }
  long vocab_size() const override { return tok_.vocab_size(); }
  const Tokenizer& tokenizer() const override { return tok_; }
  long scene_feature_dim() const override { return cfg_.d_g; }
  long scene_patch_grid() const override { return cfg_.patch_grid; }

  Eigen::MatrixXd embed_text(const std::vector<int>& ids) const override {
    Eigen::MatrixXd out(static_cast<long>(ids.size()), cfg_.d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= tok_.vocab_size())
        throw std::invalid_argument("embed_text: unknown token id");
      out.row(static_cast<long>(i)) = E_.val().row(ids[i]);
    }
    return out;
  }

  Eigen::MatrixXd encode_scene(const core::Raster& image) const override {
    Eigen::MatrixXd cells = core::patch_summaries(image, static_cast<int>(cfg_.patch_grid));
    Eigen::MatrixXd z = cells * W_scene_.val();
    z.rowwise() += b_scene_.val().row(0);
    return z.array().tanh().matrix();
  }

  nn::Var forward_logits(const nn::Var& prefix) const override {
    if (prefix.cols() != cfg_.d) throw std::invalid_argument("forward_logits: bad hidden size");
    const long n = prefix.rows();
    if (n > cfg_.max_positions) throw std::invalid_argument("forward_logits: sequence too long");
    nn::Var x = nn::add_const(prefix, pos_.topRows(n));
    nn::Mat mask = nn::causal_mask(n);
    for (const auto& block : blocks_) x = block(x, &mask);
    x = final_ln_(x);
    return nn::matmul(x, nn::transpose(E_));
  }

  Eigen::RowVectorXd last_logits(const Eigen::MatrixXd& prefix) const {
    nn::Var out = forward_logits(nn::Var(prefix));
    return out.val().row(out.rows() - 1);
  }

  Eigen::RowVectorXd token_embedding(int id) const override {
    if (id < 0 || id >= tok_.vocab_size())
      throw std::invalid_argument("token_embedding: id out of range");
    return E_.val().row(id);
  }

  // Mean of the phrase's token rows in the frozen embedding table.
  Eigen::RowVectorXd phrase_embedding(const std::vector<int>& ids) const {
    if (ids.empty()) throw std::invalid_argument("phrase_embedding: empty phrase");
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(cfg_.d);
    for (int t : ids) acc += token_embedding(t);
    return acc / static_cast<double>(ids.size());
  }

  std::uint64_t checksum() const override { return store_.checksum_all(); }
  const nn::ParamStore& params() const { return store_; }
  const nn::Var& embedding_matrix() const { return E_; }

  static Eigen::MatrixXd sinusoidal(long n, long d) {
    Eigen::MatrixXd p(n, d);
    for (long t = 0; t < n; ++t)
      for (long i = 0; i < d; ++i) {
        double angle = static_cast<double>(t) /
                       std::pow(10000.0, 2.0 * static_cast<double>(i / 2) / static_cast<double>(d));
        p(t, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
      }
    return p;
  }

 private:
  nn::ParamStore store_;
  Tokenizer tok_;
  ToyGeneratorConfig cfg_;
  nn::Var E_;
  std::vector<nn::EncoderLayer> blocks_;
  nn::LayerNorm final_ln_;
  nn::Var W_scene_, b_scene_;
  Eigen::MatrixXd pos_;
};

namespace detail {

inline Eigen::RowVectorXd masked_log_softmax(const Eigen::RowVectorXd& logits,
                                             const std::vector<bool>& allowed) {
  double mx = -std::numeric_limits<double>::infinity();
  for (long i = 0; i < logits.size(); ++i)
    if (allowed[i]) mx = std::max(mx, logits(i));
  double z = 0.0;
  for (long i = 0; i < logits.size(); ++i)
    if (allowed[i]) z += std::exp(logits(i) - mx);
  double lz = std::log(z) + mx;
  Eigen::RowVectorXd out = Eigen::RowVectorXd::Constant(logits.size(), -1e30);
  for (long i = 0; i < logits.size(); ++i)
    if (allowed[i]) out(i) = logits(i) - lz;
  return out;
}

}  // namespace detail

// Longest canonical phrase occurring as a contiguous word span; ties go to the
// earliest start, then the lowest verb id. Matching is on words, so arbitrary
// input strings are fine.
inline int extract_main_verb(const std::string& phrase, const VerbVocabulary& vocab) {
  if (phrase.empty()) throw std::invalid_argument("extract_main_verb: empty phrase");
  const auto words = Tokenizer::split_words(phrase);
  int best_verb = VerbVocabulary::kNoInteraction;
  std::size_t best_len = 0, best_start = 0;
  for (int v = 0; v < vocab.size(); ++v) {
    const auto vw = Tokenizer::split_words(vocab.phrases[v]);
    if (vw.empty() || vw.size() > words.size()) continue;
    for (std::size_t s = 0; s + vw.size() <= words.size(); ++s) {
      if (!std::equal(vw.begin(), vw.end(), words.begin() + static_cast<long>(s))) continue;
      // Priority: longer span, then earlier start; equal (len, start) keeps
      // the lower verb id since v ascends.
      if (vw.size() > best_len || (vw.size() == best_len && s < best_start)) {
        best_verb = v;
        best_len = vw.size();
        best_start = s;
      }
      break;  // first occurrence is this verb's earliest start
    }
  }
  return best_verb;
}

// Greedy decoding from an assembled prefix. When constrained, logits outside
// verb_token_mask plus eos are removed before both the argmax and the
// log-probability normalization.
inline GenerationResult decode_greedy(const Eigen::MatrixXd& prefix, const VerbVocabulary& vocab,
                                      const ToyGenerator& gen, int max_len,
                                      bool constrained = true) {
  if (max_len <= 0) throw std::invalid_argument("decode: max_len must be positive");
  std::vector<bool> allowed(gen.vocab_size(), !constrained);
  if (constrained) {
    bool any = false;
    for (std::size_t i = 0; i < allowed.size(); ++i)
      if (vocab.verb_token_mask[i]) {
        allowed[i] = true;
        any = true;
      }
    if (!any) throw std::invalid_argument("decode: empty verb token mask");
    allowed[vocab.eos_id] = true;
  }

  GenerationResult res;
  Eigen::MatrixXd cur = prefix;
  double logprob_sum = 0.0;
  int steps = 0;
  for (; steps < max_len; ++steps) {
    Eigen::RowVectorXd lp = detail::masked_log_softmax(gen.last_logits(cur), allowed);
    long pick = 0;
    lp.maxCoeff(&pick);  // ties resolve to the lowest id
    logprob_sum += lp(pick);
    if (static_cast<int>(pick) == vocab.eos_id) {
      ++steps;
      break;
    }
    res.tokens.push_back(static_cast<int>(pick));
    Eigen::MatrixXd next(cur.rows() + 1, cur.cols());
    next.topRows(cur.rows()) = cur;
    next.row(cur.rows()) = gen.token_embedding(static_cast<int>(pick));
    cur = std::move(next);
  }
  res.phrase = gen.tokenizer().decode(res.tokens);
  res.verb_score = logprob_sum / std::max(steps, 1);
  res.verb = res.phrase.empty() ? VerbVocabulary::kNoInteraction
                                : extract_main_verb(res.phrase, vocab);
  return res;
}

inline GenerationResult constrained_decode(const Eigen::MatrixXd& prefix,
                                           const VerbVocabulary& vocab, const ToyGenerator& gen,
                                           int max_len) {
  return decode_greedy(prefix, vocab, gen, max_len, true);
}

// Cosine-similarity assignment of a free-form phrase to a canonical verb in
// the frozen embedding space. Unknown words are skipped; with the synonym
// filter on, candidates shrink to verbs any phrase word points at, falling
// back to the unfiltered argmax when that set is empty.
inline int open_vocab_map(const std::string& phrase, const VerbVocabulary& vocab,
                          const ToyGenerator& gen, bool synonym_filter = false) {
  if (phrase.empty()) throw std::invalid_argument("open_vocab_map: empty phrase");
  const auto words = Tokenizer::split_words(phrase);
  Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(gen.hidden_size());
  int known = 0;
  for (const auto& w : words)
    if (gen.tokenizer().contains(w)) {
      acc += gen.token_embedding(gen.tokenizer().id(w));
      ++known;
    }
  if (known == 0) return VerbVocabulary::kNoInteraction;
  acc /= known;
  double an = acc.norm();
  if (an < 1e-12) return VerbVocabulary::kNoInteraction;

  std::vector<bool> eligible(vocab.size(), true);
  if (synonym_filter) {
    std::vector<bool> hit(vocab.size(), false);
    bool any = false;
    for (const auto& w : words) {
      auto it = vocab.synonym_table.find(w);
      if (it != vocab.synonym_table.end()) {
        hit[it->second] = true;
        any = true;
      }
    }
    if (any) eligible = hit;
  }

  int best = VerbVocabulary::kNoInteraction;
  double best_cos = -2.0;
  for (int v = 0; v < vocab.size(); ++v) {
    if (!eligible[v]) continue;
    Eigen::RowVectorXd w = gen.phrase_embedding(vocab.phrase_tokens[v]);
    double wn = w.norm();
    if (wn < 1e-12) continue;
    double c = acc.dot(w) / (an * wn);
    if (c > best_cos) {
      best_cos = c;
      best = v;
    }
  }
  return best;
}

}  // namespace hoi::generator
