#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>
#include <vector>

#include "hoi/generator.hpp"
#include "hoi/nn/autodiff.hpp"
#include "hoi/nn/layers.hpp"

namespace hoi::steering {

// The fixed textual inquiry fed to the generator after the kernel rows.
inline const char* kInquiryText = "what is the person doing with the object";

enum class KernelMode {
  kFull,    // cross-attention unfolding over learned slots
  kDirect,  // linear map from the candidate token, no evidence fusion
  kMlp      // MLP unfolding of the fused evidence, no attention
};

struct SteeringConfig {
  long kernel_length = 8;  // L
  long d = 32;             // generator hidden size
  long d_model = 32;       // adjudicated candidate token size
  long d_g = 16;           // scene patch feature size
  long heads = 4;
  bool vkf_residual = true;
  KernelMode mode = KernelMode::kFull;
  bool zero_vk = false;       // ablation: drop local evidence
  bool zero_fglobal = false;  // ablation: drop global evidence

  void validate() const {
    if (kernel_length < 0 || d <= 0 || d_model <= 0 || d_g <= 0)
      throw std::invalid_argument("steering config: bad dimensions");
    if (heads <= 0 || d % heads != 0)
      throw std::invalid_argument("steering config: heads must divide d");
  }
};

// Mean over the patch axis of the frozen encoder's features.
inline Eigen::RowVectorXd scene_token(const Eigen::MatrixXd& patch_features) {
  if (patch_features.rows() == 0) throw std::invalid_argument("scene_token: no patches");
  return patch_features.colwise().mean();
}

// Evidence fusion and kernel formulation. The kernel unfolds one fused
// evidence vector into L rows the generator consumes as a prefix.
struct SteeringModel {
  SteeringConfig cfg;
  nn::Linear phi_c, phi_g;
  nn::Mlp fuse;
  // kFull blocks
  nn::Var slots;  // L x d learned queries
  nn::LayerNorm ln_q, ln_kv, ln_ff;
  nn::MultiHeadAttention mhca;
  nn::Linear ff1, ff2;
  // kDirect / kMlp blocks
  nn::Linear direct;
  nn::Mlp unfold_mlp;

  SteeringModel() = default;
  SteeringModel(nn::ParamStore& ps, nn::Rng& rng, const SteeringConfig& c) : cfg(c) {
    cfg.validate();
    const long L = c.kernel_length, d = c.d;
    if (c.mode != KernelMode::kDirect) {
      phi_c = nn::Linear(ps, rng, "steer.phi_c", c.d_model, d);
      phi_g = nn::Linear(ps, rng, "steer.phi_g", c.d_g, d);
      fuse = nn::Mlp(ps, rng, "steer.fuse", 2 * d, 2 * d, d);
    }
    switch (c.mode) {
      case KernelMode::kFull:
        slots = ps.create("steer.slots", nn::randn(rng, L, d), true);
        ln_q = nn::LayerNorm(ps, rng, "steer.ln_q", d);
        ln_kv = nn::LayerNorm(ps, rng, "steer.ln_kv", d);
        ln_ff = nn::LayerNorm(ps, rng, "steer.ln_ff", d);
        mhca = nn::MultiHeadAttention(ps, rng, "steer.mhca", d, c.heads);
        ff1 = nn::Linear(ps, rng, "steer.ff1", d, 4 * d);
        ff2 = nn::Linear(ps, rng, "steer.ff2", 4 * d, d);
        break;
      case KernelMode::kDirect:
        direct = nn::Linear(ps, rng, "steer.direct", c.d_model, L * d);
        break;
      case KernelMode::kMlp:
        unfold_mlp = nn::Mlp(ps, rng, "steer.unfold", d, 2 * d, L * d);
        break;
    }
  }

  // v_k rows (n x d_model) + f_global rows (n x d_g) -> evidence rows (n x d).
  nn::Var evidence(const nn::Var& v_k, const nn::Var& f_global) const {
    if (v_k.cols() != cfg.d_model || f_global.cols() != cfg.d_g ||
        v_k.rows() != f_global.rows())
      throw std::invalid_argument("evidence: dimension mismatch");
    nn::Var v = cfg.zero_vk ? nn::scale(v_k, 0.0) : v_k;
    nn::Var g = cfg.zero_fglobal ? nn::scale(f_global, 0.0) : f_global;
    return fuse(nn::concat_cols({phi_c(v), phi_g(g)}));
  }

  // One evidence row (1 x d) -> kernel (L x d) by cross-attention over the
  // learned slots with the evidence as the single key/value token.
  nn::Var kernel_from_evidence(const nn::Var& e_k) const {
    if (e_k.rows() != 1 || e_k.cols() != cfg.d)
      throw std::invalid_argument("kernel: evidence must be 1 x d");
    if (cfg.mode == KernelMode::kMlp) return unfold_row(unfold_mlp(e_k));
    nn::Var att = mhca(ln_q(slots), ln_kv(e_k));
    nn::Var h = cfg.vkf_residual ? nn::add(slots, att) : att;
    nn::Var f = ff2(nn::gelu(ff1(ln_ff(h))));
    return cfg.vkf_residual ? nn::add(h, f) : f;
  }

  // Full dispatch: candidate token row + scene token row -> L x d kernel.
  nn::Var kernel(const nn::Var& v_k_row, const nn::Var& f_global_row) const {
    if (cfg.mode == KernelMode::kDirect) {
      nn::Var v = cfg.zero_vk ? nn::scale(v_k_row, 0.0) : v_k_row;
      return unfold_row(direct(v));
    }
    return kernel_from_evidence(evidence(v_k_row, f_global_row));
  }

 private:
  nn::Var unfold_row(const nn::Var& row) const {
    std::vector<nn::Var> rows;
    rows.reserve(cfg.kernel_length);
    for (long l = 0; l < cfg.kernel_length; ++l)
      rows.push_back(nn::slice_cols(row, l * cfg.d, cfg.d));
    return nn::concat_rows(rows);
  }
};

// X = [Q_k; E(text)]. Pure concatenation: positions are added inside the
// generator, so both parts pass through bit-exactly.
inline nn::Var assemble_prefix(const nn::Var& Q_k, const std::vector<int>& text_ids,
                               const generator::GeneratorInterface& gen) {
  if (text_ids.empty()) throw std::invalid_argument("assemble_prefix: empty inquiry");
  nn::Var text(gen.embed_text(text_ids));
  if (Q_k.rows() == 0) return text;
  if (Q_k.cols() != gen.hidden_size())
    throw std::invalid_argument("assemble_prefix: kernel width != generator hidden size");
  return nn::concat_rows({Q_k, text});
}

}  // namespace hoi::steering
