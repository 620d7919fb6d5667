#pragma once

#include <cmath>
#include <vector>

#include "hoi/nn/autodiff.hpp"
#include "hoi/nn/layers.hpp"

namespace hoi::nn {

// Cosine decay from base_lr to min_lr over total_steps, with optional linear
// warmup for the first warmup_steps.
inline double cosine_lr(long step, long total_steps, double base_lr, double min_lr = 0.0,
                        long warmup_steps = 0) {
  if (warmup_steps > 0 && step < warmup_steps)
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  long s = step - warmup_steps;
  long t = total_steps - warmup_steps;
  if (t <= 0) return min_lr;
  double frac = static_cast<double>(s) / static_cast<double>(t);
  if (frac > 1.0) frac = 1.0;
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(M_PI * frac));
}

// Rescales all trainable gradients so their global L2 norm is at most
// max_norm. Returns the pre-clip norm.
inline double clip_grad_norm(ParamStore& ps, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, v] : ps.items())
    if (v.requires_grad()) sq += v.grad().squaredNorm();
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    double s = max_norm / norm;
    for (const auto& [name, v] : ps.items())
      if (v.requires_grad()) v.node()->grad *= s;
  }
  return norm;
}

// AdamW with decoupled weight decay. Frozen parameters are skipped entirely.
class AdamW {
 public:
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;

  explicit AdamW(ParamStore& ps) : ps_(&ps) {
    for (const auto& [name, v] : ps.items()) {
      m_.push_back(Mat::Zero(v.rows(), v.cols()));
      v2_.push_back(Mat::Zero(v.rows(), v.cols()));
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, t_);
    const double bc2 = 1.0 - std::pow(beta2, t_);
    const auto& items = ps_->items();
    for (std::size_t i = 0; i < items.size(); ++i) {
      const Var& p = items[i].second;
      if (!p.requires_grad()) continue;
      const Mat& g = p.grad();
      m_[i] = beta1 * m_[i] + (1.0 - beta1) * g;
      v2_[i] = beta2 * v2_[i] + (1.0 - beta2) * g.cwiseProduct(g);
      Mat mhat = m_[i] / bc1;
      Mat vhat = v2_[i] / bc2;
      Mat update = mhat.array() / (vhat.array().sqrt() + eps);
      Node& node = *p.node();
      node.value -= lr * (update + weight_decay * node.value);
    }
  }

  long steps_taken() const { return t_; }

 private:
  ParamStore* ps_;
  std::vector<Mat> m_, v2_;
  long t_ = 0;
};

}  // namespace hoi::nn
