#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <stdexcept>
#include <vector>

#include "hoi/core.hpp"
#include "hoi/nn/autodiff.hpp"
#include "hoi/nn/layers.hpp"
#include "hoi/nn/rng.hpp"

namespace hoi::perception {

struct PerceptionConfig {
  long d_z = 12;       // instance token size
  long d_a = 32;       // appearance token size
  long d_e = 24;       // fused entity size
  long d_g = 16;       // scene patch feature size (carried for downstream)
  long d_model = 32;   // candidate token size
  long sat_layers = 2;
  long sat_heads = 4;
  double alpha = 0.6;  // gate weight on learned salience
  long quota = 3;      // per-human candidate cap
  long max_candidates = 16;

  void validate() const {
    if (d_z <= 0 || d_a <= 0 || d_e <= 0 || d_g <= 0 || d_model <= 0)
      throw std::invalid_argument("perception config: dimensions must be positive");
    if (sat_layers < 0 || sat_heads <= 0 || d_model % sat_heads != 0)
      throw std::invalid_argument("perception config: bad transformer shape");
    if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("perception config: alpha in [0,1]");
    if (quota < 1 || max_candidates < 1)
      throw std::invalid_argument("perception config: quota and cap must be >= 1");
  }
};

// Candidate human-object pair. Indices refer to the detection list of one
// image; u/u_tilde/s live on the autodiff tape during training.
struct CandidatePair {
  int human_index = -1;
  int object_index = -1;
  core::GeometryVector geometry;
  double conf_h = 0.0, conf_o = 0.0;
  double s_k = 0.0;  // learned salience (forward value)
  double r_k = 0.0;  // gated score
  bool selected = false;
};

// Bilinear RoI pooling over a C-channel feature map. Sampling density adapts
// to the bin size so a box covering the whole map with a 1x1 output is the
// exact global mean. Output is channel-major flattened, length C*out_h*out_w.
inline Eigen::VectorXd roi_pool(const std::vector<Eigen::MatrixXd>& fmap, core::BoundingBox box,
                                int out_h, int out_w) {
  if (fmap.empty()) throw std::invalid_argument("roi_pool: empty feature map");
  if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("roi_pool: bad output size");
  const long H = fmap[0].rows(), W = fmap[0].cols();
  for (const auto& c : fmap)
    if (c.rows() != H || c.cols() != W) throw std::invalid_argument("roi_pool: ragged channels");
  box.x1 = std::clamp(box.x1, 0.0, static_cast<double>(W));
  box.x2 = std::clamp(box.x2, 0.0, static_cast<double>(W));
  box.y1 = std::clamp(box.y1, 0.0, static_cast<double>(H));
  box.y2 = std::clamp(box.y2, 0.0, static_cast<double>(H));
  if (!(box.x2 > box.x1) || !(box.y2 > box.y1))
    throw std::invalid_argument("roi_pool: box degenerate after clipping");

  auto bilinear = [&](const Eigen::MatrixXd& ch, double x, double y) {
    // Pixel i holds the value at center i+0.5; clamp outside the center grid.
    double fx = std::clamp(x - 0.5, 0.0, static_cast<double>(W - 1));
    double fy = std::clamp(y - 0.5, 0.0, static_cast<double>(H - 1));
    long x0 = static_cast<long>(std::floor(fx)), y0 = static_cast<long>(std::floor(fy));
    long x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
    double ax = fx - x0, ay = fy - y0;
    return (1 - ay) * ((1 - ax) * ch(y0, x0) + ax * ch(y0, x1)) +
           ay * ((1 - ax) * ch(y1, x0) + ax * ch(y1, x1));
  };

  const double bin_w = (box.x2 - box.x1) / out_w;
  const double bin_h = (box.y2 - box.y1) / out_h;
  Eigen::VectorXd out(static_cast<long>(fmap.size()) * out_h * out_w);
  long idx = 0;
  for (std::size_t c = 0; c < fmap.size(); ++c)
    for (int oy = 0; oy < out_h; ++oy)
      for (int ox = 0; ox < out_w; ++ox) {
        const int nx = std::max(1, static_cast<int>(std::ceil(bin_w)));
        const int ny = std::max(1, static_cast<int>(std::ceil(bin_h)));
        double acc = 0.0;
        for (int sy = 0; sy < ny; ++sy)
          for (int sx = 0; sx < nx; ++sx) {
            double x = box.x1 + bin_w * ox + bin_w * (sx + 0.5) / nx;
            double y = box.y1 + bin_h * oy + bin_h * (sy + 0.5) / ny;
            acc += bilinear(fmap[c], x, y);
          }
        out(idx++) = acc / (nx * ny);
      }
  return out;
}

// Entity fusion, candidate projection, scene-wide contextualization and the
// salience head. All methods are batched over rows and differentiable.
struct PerceptionModel {
  PerceptionConfig cfg;
  nn::Linear phi_inst, phi_app;  // entity projections
  nn::Mlp fuse;                  // joint MLP to d_e
  nn::Linear proj_u;             // [f_h || f_o || g] -> d_model
  std::vector<nn::EncoderLayer> sat;
  nn::Linear salience_head;      // d_model -> 1

  PerceptionModel() = default;
  PerceptionModel(nn::ParamStore& ps, nn::Rng& rng, const PerceptionConfig& c)
      : cfg(c),
        phi_inst(ps, rng, "perc.phi_inst", c.d_z, c.d_e),
        phi_app(ps, rng, "perc.phi_app", c.d_a, c.d_e),
        fuse(ps, rng, "perc.fuse", 2 * c.d_e, 2 * c.d_e, c.d_e),
        proj_u(ps, rng, "perc.proj_u", 2 * c.d_e + 8, c.d_model),
        salience_head(ps, rng, "perc.salience", c.d_model, 1) {
    cfg.validate();
    for (long l = 0; l < c.sat_layers; ++l)
      sat.emplace_back(ps, rng, "perc.sat" + std::to_string(l), c.d_model, c.sat_heads);
  }

  // Z: n x d_z instance tokens, A: n x d_a appearance tokens -> n x d_e.
  nn::Var fuse_entities(const nn::Var& Z, const nn::Var& A) const {
    if (Z.cols() != cfg.d_z || A.cols() != cfg.d_a || Z.rows() != A.rows())
      throw std::invalid_argument("fuse_entities: dimension mismatch");
    return fuse(nn::concat_cols({phi_inst(Z), phi_app(A)}));
  }

  // F: n_entities x d_e, pair indices into F, G: N x 8 -> N x d_model tokens.
  nn::Var build_candidate_tokens(const nn::Var& F, const std::vector<long>& humans,
                                 const std::vector<long>& objects, const Eigen::MatrixXd& G) const {
    if (humans.size() != objects.size() ||
        static_cast<long>(humans.size()) != G.rows() || G.cols() != 8)
      throw std::invalid_argument("build_candidate_tokens: dimension mismatch");
    nn::Var fh = nn::pick_rows(F, humans);
    nn::Var fo = nn::pick_rows(F, objects);
    return proj_u(nn::concat_cols({fh, fo, nn::Var(G)}));
  }

  // Scene-wide contextualization; permutation-equivariant, no positions.
  nn::Var sat_forward(const nn::Var& U) const {
    if (U.rows() == 0) return U;
    nn::Var x = U;
    for (const auto& layer : sat) x = layer(x);
    return x;
  }

  // N x d_model -> N x 1 salience scores in (0,1).
  nn::Var salience_scores(const nn::Var& U_tilde) const {
    return nn::sigmoid(salience_head(U_tilde));
  }
};

inline double orchestration_gate(double s_k, double conf_h, double conf_o, double alpha) {
  if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("orchestration_gate: alpha in [0,1]");
  return alpha * s_k + (1.0 - alpha) * std::min(conf_h, conf_o);
}

// Quota-and-coverage selection. Keeps at most `quota` pairs per human, then
// guarantees each human one slot before filling the rest by global r order,
// capped at max_candidates. Ties: higher r, then lower object index, then
// earlier construction order.
inline std::vector<std::size_t> select_candidates(const std::vector<CandidatePair>& pairs,
                                                  const PerceptionConfig& cfg) {
  auto before = [&](std::size_t a, std::size_t b) {
    if (pairs[a].r_k != pairs[b].r_k) return pairs[a].r_k > pairs[b].r_k;
    if (pairs[a].object_index != pairs[b].object_index)
      return pairs[a].object_index < pairs[b].object_index;
    return a < b;
  };

  // Per-human quota.
  std::vector<std::pair<int, std::size_t>> by_human;
  for (std::size_t i = 0; i < pairs.size(); ++i) by_human.emplace_back(pairs[i].human_index, i);
  std::sort(by_human.begin(), by_human.end(), [&](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return before(a.second, b.second);
  });
  std::vector<std::size_t> survivors, heads;  // heads: each human's best pair
  long run = 0;
  for (std::size_t i = 0; i < by_human.size(); ++i) {
    run = (i > 0 && by_human[i].first == by_human[i - 1].first) ? run + 1 : 0;
    if (run == 0) heads.push_back(by_human[i].second);
    if (run < cfg.quota) survivors.push_back(by_human[i].second);
  }

  std::sort(heads.begin(), heads.end(), before);
  std::sort(survivors.begin(), survivors.end(), before);

  std::vector<char> chosen(pairs.size(), 0);
  std::vector<std::size_t> out;
  for (std::size_t idx : heads) {
    if (static_cast<long>(out.size()) >= cfg.max_candidates) break;
    chosen[idx] = 1;
    out.push_back(idx);
  }
  for (std::size_t idx : survivors) {
    if (static_cast<long>(out.size()) >= cfg.max_candidates) break;
    if (!chosen[idx]) {
      chosen[idx] = 1;
      out.push_back(idx);
    }
  }
  std::sort(out.begin(), out.end(), before);
  return out;
}

// Detector stand-in: the clean box jittered by up to 5% of its size per
// coordinate, confidence = overlap with the clean box.
inline core::BoundingBox jitter_box(const core::BoundingBox& clean, double image_w, double image_h,
                                    nn::Rng& rng) {
  std::uniform_real_distribution<double> u(-0.05, 0.05);
  const double w = clean.width(), h = clean.height();
  core::BoundingBox b{clean.x1 + u(rng) * w, clean.y1 + u(rng) * h, clean.x2 + u(rng) * w,
                      clean.y2 + u(rng) * h};
  b.x1 = std::clamp(b.x1, 0.0, image_w - 1.0);
  b.y1 = std::clamp(b.y1, 0.0, image_h - 1.0);
  b.x2 = std::clamp(b.x2, b.x1 + 0.5, image_w);
  b.y2 = std::clamp(b.y2, b.y1 + 0.5, image_h);
  return b;
}

}  // namespace hoi::perception
