#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hoi/nn/autodiff.hpp"
#include "hoi/nn/rng.hpp"

namespace hoi::nn {

// Named registry for every parameter in a model. Trainable parameters get
// gradients and optimizer state; frozen ones are plain constants whose bits
// can be checksummed before and after training.
class ParamStore {
 public:
  Var create(const std::string& name, Mat init, bool trainable = true) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
    Var v(std::move(init), trainable);
    index_[name] = params_.size();
    params_.emplace_back(name, v);
    return v;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Var& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter: " + name);
    return params_[it->second].second;
  }
  const Var& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter: " + name);
    return params_[it->second].second;
  }

  const std::vector<std::pair<std::string, Var>>& items() const { return params_; }

  std::size_t size() const { return params_.size(); }

  void zero_grads() {
    for (auto& [name, v] : params_)
      if (v.requires_grad()) v.zero_grad();
  }

  std::uint64_t checksum_frozen() const {
    std::uint64_t h = 14695981039346656037ull;
    for (const auto& [name, v] : params_)
      if (!v.requires_grad()) h = fnv1a64(v.val(), h);
    return h;
  }

  std::uint64_t checksum_all() const {
    std::uint64_t h = 14695981039346656037ull;
    for (const auto& [name, v] : params_) h = fnv1a64(v.val(), h);
    return h;
  }

 private:
  std::vector<std::pair<std::string, Var>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Linear {
  Var W;  // in x out
  Var b;  // 1 x out

  Linear() = default;
  Linear(ParamStore& ps, Rng& rng, const std::string& name, long in, long out,
         bool trainable = true) {
    W = ps.create(name + ".W", init_weight(rng, in, out), trainable);
    b = ps.create(name + ".b", Mat::Zero(1, out), trainable);
  }

  Var operator()(const Var& x) const { return add_rowvec(matmul(x, W), b); }
};

enum class Activation { kGelu, kRelu };

inline Var apply_activation(const Var& x, Activation act) {
  return act == Activation::kGelu ? gelu(x) : relu(x);
}

// Two-layer perceptron, the workhorse for all fusion blocks.
struct Mlp {
  Linear fc1, fc2;
  Activation act = Activation::kGelu;

  Mlp() = default;
  Mlp(ParamStore& ps, Rng& rng, const std::string& name, long in, long hidden, long out,
      bool trainable = true, Activation a = Activation::kGelu)
      : fc1(ps, rng, name + ".fc1", in, hidden, trainable),
        fc2(ps, rng, name + ".fc2", hidden, out, trainable),
        act(a) {}

  Var operator()(const Var& x) const { return fc2(apply_activation(fc1(x), act)); }
};

struct LayerNorm {
  Var gain;  // 1 x d
  Var bias;  // 1 x d

  LayerNorm() = default;
  LayerNorm(ParamStore& ps, Rng& rng, const std::string& name, long d, bool trainable = true) {
    (void)rng;
    gain = ps.create(name + ".gain", Mat::Ones(1, d), trainable);
    bias = ps.create(name + ".bias", Mat::Zero(1, d), trainable);
  }

  Var operator()(const Var& x) const { return layer_norm_rows(x, gain, bias); }
};

inline Mat causal_mask(long n) {
  Mat m = Mat::Zero(n, n);
  for (long r = 0; r < n; ++r)
    for (long c = r + 1; c < n; ++c) m(r, c) = -1e30;
  return m;
}

// Multi-head attention. Self-attention when memory == query input; cross
// attention otherwise. Queries come from `q_in` (Nq x d), keys and values from
// `kv_in` (Nk x d).
struct MultiHeadAttention {
  Linear wq, wk, wv, wo;
  long heads = 1;
  long d_model = 0;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& ps, Rng& rng, const std::string& name, long d, long n_heads,
                     bool trainable = true)
      : wq(ps, rng, name + ".wq", d, d, trainable),
        wk(ps, rng, name + ".wk", d, d, trainable),
        wv(ps, rng, name + ".wv", d, d, trainable),
        wo(ps, rng, name + ".wo", d, d, trainable),
        heads(n_heads),
        d_model(d) {
    if (d % n_heads != 0) throw std::invalid_argument("d_model must divide by heads");
  }

  Var operator()(const Var& q_in, const Var& kv_in, const Mat* additive_mask = nullptr) const {
    const long dh = d_model / heads;
    const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
    Var q = wq(q_in), k = wk(kv_in), v = wv(kv_in);
    std::vector<Var> head_outs;
    head_outs.reserve(heads);
    for (long h = 0; h < heads; ++h) {
      Var qh = slice_cols(q, h * dh, dh);
      Var kh = slice_cols(k, h * dh, dh);
      Var vh = slice_cols(v, h * dh, dh);
      Var scores = scale(matmul(qh, transpose(kh)), scl);
      if (additive_mask) scores = add_const(scores, *additive_mask);
      head_outs.push_back(matmul(softmax_rows(scores), vh));
    }
    return wo(concat_cols(head_outs));
  }
};

// Pre-norm transformer encoder block: x += MHSA(LN(x)); x += FFN(LN(x)).
struct EncoderLayer {
  LayerNorm ln1, ln2;
  MultiHeadAttention attn;
  Linear ff1, ff2;

  EncoderLayer() = default;
  EncoderLayer(ParamStore& ps, Rng& rng, const std::string& name, long d, long heads,
               long ff_mult = 4, bool trainable = true)
      : ln1(ps, rng, name + ".ln1", d, trainable),
        ln2(ps, rng, name + ".ln2", d, trainable),
        attn(ps, rng, name + ".attn", d, heads, trainable),
        ff1(ps, rng, name + ".ff1", d, d * ff_mult, trainable),
        ff2(ps, rng, name + ".ff2", d * ff_mult, d, trainable) {}

  Var operator()(const Var& x, const Mat* additive_mask = nullptr) const {
    Var n1 = ln1(x);
    Var h = add(x, attn(n1, n1, additive_mask));
    return add(h, ff2(gelu(ff1(ln2(h)))));
  }
};

}  // namespace hoi::nn
