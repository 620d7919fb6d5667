#pragma once

// Reverse-mode autodiff over Eigen matrices. Every differentiable quantity in
// the pipeline is a Var holding an N x D matrix; ops build a tape that
// backward() walks in reverse topological order. Scalars are 1x1 matrices.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace hoi::nn {

using Mat = Eigen::MatrixXd;

struct Node {
  Mat value;
  Mat grad;                        // allocated lazily, same shape as value
  bool requires_grad = false;      // leaves: participate in training
  bool active = false;             // some grad-requiring leaf is reachable
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // pushes this->grad into parents
};

using NodePtr = std::shared_ptr<Node>;

class Var {
 public:
  Var() = default;
  explicit Var(Mat v, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(v);
    node_->requires_grad = requires_grad;
    node_->active = requires_grad;
  }
  static Var scalar(double v, bool requires_grad = false) {
    Mat m(1, 1);
    m(0, 0) = v;
    return Var(std::move(m), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Mat& val() const { return node_->value; }
  Mat& val_mut() { return node_->value; }
  long rows() const { return node_->value.rows(); }
  long cols() const { return node_->value.cols(); }
  double item() const {
    if (rows() != 1 || cols() != 1) throw std::invalid_argument("item: not a scalar");
    return node_->value(0, 0);
  }
  const Mat& grad() const {
    ensure_grad(node_);
    return node_->grad;
  }
  void zero_grad() {
    node_->grad = Mat::Zero(node_->value.rows(), node_->value.cols());
  }
  bool requires_grad() const { return node_->requires_grad; }
  const NodePtr& node() const { return node_; }

  static void ensure_grad(const NodePtr& n) {
    if (n->grad.rows() != n->value.rows() || n->grad.cols() != n->value.cols())
      n->grad = Mat::Zero(n->value.rows(), n->value.cols());
  }
  static void accum(const NodePtr& n, const Mat& g) {
    if (!n->active) return;
    ensure_grad(n);
    n->grad += g;
  }

 private:
  NodePtr node_;
};

namespace detail {

inline Var make_op(Mat value, std::vector<NodePtr> parents,
                   std::function<void(Node&)> backprop) {
  Var out(std::move(value));
  Node& n = *out.node();
  n.parents = std::move(parents);
  for (const auto& p : n.parents)
    if (p->active) n.active = true;
  if (n.active) n.backprop = std::move(backprop);
  return out;
}

inline void check(bool cond, const char* what) {
  if (!cond) throw std::invalid_argument(what);
}

}  // namespace detail

inline Var constant(Mat v) { return Var(std::move(v)); }

// ---- arithmetic ----

inline Var add(const Var& a, const Var& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  auto pa = a.node(), pb = b.node();
  return detail::make_op(a.val() + b.val(), {pa, pb}, [pa, pb](Node& n) {
    Var::accum(pa, n.grad);
    Var::accum(pb, n.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  auto pa = a.node(), pb = b.node();
  return detail::make_op(a.val() - b.val(), {pa, pb}, [pa, pb](Node& n) {
    Var::accum(pa, n.grad);
    Var::accum(pb, -n.grad);
  });
}

inline Var cmul(const Var& a, const Var& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "cmul: shape mismatch");
  auto pa = a.node(), pb = b.node();
  return detail::make_op(a.val().cwiseProduct(b.val()), {pa, pb}, [pa, pb](Node& n) {
    Var::accum(pa, n.grad.cwiseProduct(pb->value));
    Var::accum(pb, n.grad.cwiseProduct(pa->value));
  });
}

inline Var scale(const Var& a, double s) {
  auto pa = a.node();
  return detail::make_op(a.val() * s, {pa}, [pa, s](Node& n) { Var::accum(pa, n.grad * s); });
}

inline Var add_const(const Var& a, const Mat& m) {
  detail::check(a.rows() == m.rows() && a.cols() == m.cols(), "add_const: shape mismatch");
  auto pa = a.node();
  return detail::make_op(a.val() + m, {pa}, [pa](Node& n) { Var::accum(pa, n.grad); });
}

inline Var matmul(const Var& a, const Var& b) {
  detail::check(a.cols() == b.rows(), "matmul: inner dim mismatch");
  auto pa = a.node(), pb = b.node();
  return detail::make_op(a.val() * b.val(), {pa, pb}, [pa, pb](Node& n) {
    Var::accum(pa, n.grad * pb->value.transpose());
    Var::accum(pb, pa->value.transpose() * n.grad);
  });
}

inline Var transpose(const Var& a) {
  auto pa = a.node();
  return detail::make_op(a.val().transpose(), {pa},
                         [pa](Node& n) { Var::accum(pa, n.grad.transpose()); });
}

// Broadcasts a 1 x d row (bias) over every row of x.
inline Var add_rowvec(const Var& x, const Var& b) {
  detail::check(b.rows() == 1 && b.cols() == x.cols(), "add_rowvec: bias must be 1 x cols(x)");
  auto px = x.node(), pb = b.node();
  Mat v = x.val();
  v.rowwise() += b.val().row(0);
  return detail::make_op(std::move(v), {px, pb}, [px, pb](Node& n) {
    Var::accum(px, n.grad);
    Var::accum(pb, n.grad.colwise().sum());
  });
}

// ---- structure ----

inline Var concat_cols(const std::vector<Var>& parts) {
  detail::check(!parts.empty(), "concat_cols: empty");
  long rows = parts[0].rows(), cols = 0;
  for (const auto& p : parts) {
    detail::check(p.rows() == rows, "concat_cols: row mismatch");
    cols += p.cols();
  }
  Mat v(rows, cols);
  std::vector<NodePtr> ps;
  std::vector<long> offs;
  long off = 0;
  for (const auto& p : parts) {
    v.middleCols(off, p.cols()) = p.val();
    ps.push_back(p.node());
    offs.push_back(off);
    off += p.cols();
  }
  return detail::make_op(std::move(v), ps, [ps, offs](Node& n) {
    for (size_t i = 0; i < ps.size(); ++i)
      Var::accum(ps[i], n.grad.middleCols(offs[i], ps[i]->value.cols()));
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  detail::check(!parts.empty(), "concat_rows: empty");
  long cols = parts[0].cols(), rows = 0;
  for (const auto& p : parts) {
    detail::check(p.cols() == cols, "concat_rows: col mismatch");
    rows += p.rows();
  }
  Mat v(rows, cols);
  std::vector<NodePtr> ps;
  std::vector<long> offs;
  long off = 0;
  for (const auto& p : parts) {
    v.middleRows(off, p.rows()) = p.val();
    ps.push_back(p.node());
    offs.push_back(off);
    off += p.rows();
  }
  return detail::make_op(std::move(v), ps, [ps, offs](Node& n) {
    for (size_t i = 0; i < ps.size(); ++i)
      Var::accum(ps[i], n.grad.middleRows(offs[i], ps[i]->value.rows()));
  });
}

inline Var slice_cols(const Var& x, long c0, long len) {
  detail::check(c0 >= 0 && len >= 0 && c0 + len <= x.cols(), "slice_cols: out of range");
  auto px = x.node();
  return detail::make_op(x.val().middleCols(c0, len), {px}, [px, c0, len](Node& n) {
    if (!px->active) return;
    Var::ensure_grad(px);
    px->grad.middleCols(c0, len) += n.grad;
  });
}

inline Var slice_rows(const Var& x, long r0, long len) {
  detail::check(r0 >= 0 && len >= 0 && r0 + len <= x.rows(), "slice_rows: out of range");
  auto px = x.node();
  return detail::make_op(x.val().middleRows(r0, len), {px}, [px, r0, len](Node& n) {
    if (!px->active) return;
    Var::ensure_grad(px);
    px->grad.middleRows(r0, len) += n.grad;
  });
}

// Stacks the requested rows (repeats allowed) into a new matrix.
inline Var pick_rows(const Var& x, const std::vector<long>& rows) {
  Mat v(static_cast<long>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    detail::check(rows[i] >= 0 && rows[i] < x.rows(), "pick_rows: index out of range");
    v.row(static_cast<long>(i)) = x.val().row(rows[i]);
  }
  auto px = x.node();
  return detail::make_op(std::move(v), {px}, [px, rows](Node& n) {
    if (!px->active) return;
    Var::ensure_grad(px);
    for (std::size_t i = 0; i < rows.size(); ++i)
      px->grad.row(rows[i]) += n.grad.row(static_cast<long>(i));
  });
}

// Picks entries (r,c) into a k x 1 column.
inline Var gather(const Var& x, const std::vector<std::pair<long, long>>& idx) {
  Mat v(static_cast<long>(idx.size()), 1);
  for (size_t i = 0; i < idx.size(); ++i) {
    detail::check(idx[i].first >= 0 && idx[i].first < x.rows() && idx[i].second >= 0 &&
                      idx[i].second < x.cols(),
                  "gather: index out of range");
    v(static_cast<long>(i), 0) = x.val()(idx[i].first, idx[i].second);
  }
  auto px = x.node();
  return detail::make_op(std::move(v), {px}, [px, idx](Node& n) {
    if (!px->active) return;
    Var::ensure_grad(px);
    for (size_t i = 0; i < idx.size(); ++i)
      px->grad(idx[i].first, idx[i].second) += n.grad(static_cast<long>(i), 0);
  });
}

// ---- nonlinearities ----

inline Var sigmoid(const Var& x) {
  Mat y = x.val().unaryExpr([](double v) {
    return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  });
  auto px = x.node();
  return detail::make_op(std::move(y), {px}, [px](Node& n) {
    Var::accum(px, n.grad.cwiseProduct(n.value.cwiseProduct((1.0 - n.value.array()).matrix())));
  });
}

inline Var relu(const Var& x) {
  auto px = x.node();
  return detail::make_op(x.val().cwiseMax(0.0), {px}, [px](Node& n) {
    Mat mask = (px->value.array() > 0.0).cast<double>();
    Var::accum(px, n.grad.cwiseProduct(mask));
  });
}

inline Var gelu(const Var& x) {
  constexpr double inv_sqrt2 = 0.7071067811865476;
  Mat y = x.val().unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); });
  auto px = x.node();
  return detail::make_op(std::move(y), {px}, [px](Node& n) {
    constexpr double inv_sqrt2pi = 0.3989422804014327;
    Mat d = px->value.unaryExpr([](double v) {
      return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
    });
    Var::accum(px, n.grad.cwiseProduct(d));
  });
}

// log(max(x, eps)); gradient is zero in the clamped region.
inline Var log_clamped(const Var& x, double eps = 1e-12) {
  Mat y = x.val().unaryExpr([eps](double v) { return std::log(std::max(v, eps)); });
  auto px = x.node();
  return detail::make_op(std::move(y), {px}, [px, eps](Node& n) {
    Mat d = px->value.unaryExpr([eps](double v) { return v > eps ? 1.0 / v : 0.0; });
    Var::accum(px, n.grad.cwiseProduct(d));
  });
}

// ---- row-wise reductions and normalizations ----

inline Var softmax_rows(const Var& x) {
  Mat y(x.rows(), x.cols());
  for (long r = 0; r < x.rows(); ++r) {
    double mx = x.val().row(r).maxCoeff();
    Eigen::RowVectorXd e = (x.val().row(r).array() - mx).exp();
    y.row(r) = e / e.sum();
  }
  auto px = x.node();
  return detail::make_op(std::move(y), {px}, [px](Node& n) {
    Mat dx(n.value.rows(), n.value.cols());
    for (long r = 0; r < n.value.rows(); ++r) {
      double s = n.grad.row(r).dot(n.value.row(r));
      dx.row(r) = n.value.row(r).cwiseProduct((n.grad.row(r).array() - s).matrix());
    }
    Var::accum(px, dx);
  });
}

inline Var log_softmax_rows(const Var& x) {
  Mat y(x.rows(), x.cols());
  for (long r = 0; r < x.rows(); ++r) {
    double mx = x.val().row(r).maxCoeff();
    Eigen::RowVectorXd sh = (x.val().row(r).array() - mx).matrix();
    double lse = std::log(sh.array().exp().sum());
    y.row(r) = (sh.array() - lse).matrix();
  }
  auto px = x.node();
  return detail::make_op(std::move(y), {px}, [px](Node& n) {
    Mat dx(n.value.rows(), n.value.cols());
    for (long r = 0; r < n.value.rows(); ++r) {
      double gsum = n.grad.row(r).sum();
      dx.row(r) = n.grad.row(r) - gsum * n.value.row(r).array().exp().matrix();
    }
    Var::accum(px, dx);
  });
}

// Per-row layer norm with learnable gain/bias (1 x d each).
inline Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  detail::check(gain.rows() == 1 && gain.cols() == x.cols(), "layer_norm: bad gain shape");
  detail::check(bias.rows() == 1 && bias.cols() == x.cols(), "layer_norm: bad bias shape");
  const long d = x.cols();
  Mat xhat(x.rows(), d), y(x.rows(), d);
  Eigen::VectorXd inv_sigma(x.rows());
  for (long r = 0; r < x.rows(); ++r) {
    double mu = x.val().row(r).mean();
    Eigen::RowVectorXd c = (x.val().row(r).array() - mu).matrix();
    double var = c.squaredNorm() / static_cast<double>(d);
    double is = 1.0 / std::sqrt(var + eps);
    inv_sigma(r) = is;
    xhat.row(r) = c * is;
    y.row(r) = xhat.row(r).cwiseProduct(gain.val().row(0)) + bias.val().row(0);
  }
  auto px = x.node();
  auto pg = gain.node();
  auto pb = bias.node();
  return detail::make_op(std::move(y), {px, pg, pb},
                         [px, pg, pb, xhat, inv_sigma](Node& n) {
    const long d = n.value.cols();
    if (pg->active) Var::accum(pg, n.grad.cwiseProduct(xhat).colwise().sum());
    if (pb->active) Var::accum(pb, n.grad.colwise().sum());
    if (!px->active) return;
    Mat dx(n.value.rows(), d);
    for (long r = 0; r < n.value.rows(); ++r) {
      Eigen::RowVectorXd dxh = n.grad.row(r).cwiseProduct(pg->value.row(0));
      double m1 = dxh.mean();
      double m2 = dxh.cwiseProduct(xhat.row(r)).mean();
      dx.row(r) =
          inv_sigma(r) * ((dxh.array() - m1).matrix() - m2 * xhat.row(r));
    }
    Var::accum(px, dx);
  });
}

inline Var mean_rows(const Var& x) {
  detail::check(x.rows() >= 1, "mean_rows: empty");
  auto px = x.node();
  const double inv = 1.0 / static_cast<double>(x.rows());
  return detail::make_op(x.val().colwise().mean(), {px}, [px, inv](Node& n) {
    Var::accum(px, Mat::Ones(px->value.rows(), 1) * (n.grad * inv));
  });
}

inline Var sum_all(const Var& x) {
  auto px = x.node();
  return detail::make_op(Var::scalar(x.val().sum()).val(), {px}, [px](Node& n) {
    Var::accum(px, Mat::Constant(px->value.rows(), px->value.cols(), n.grad(0, 0)));
  });
}

inline Var mean_all(const Var& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.rows() * x.cols()));
}

// Elementwise min; exact ties split the subgradient equally.
inline Var emin(const Var& a, const Var& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "emin: shape mismatch");
  auto pa = a.node(), pb = b.node();
  return detail::make_op(a.val().cwiseMin(b.val()), {pa, pb}, [pa, pb](Node& n) {
    Mat da(n.value.rows(), n.value.cols()), db(n.value.rows(), n.value.cols());
    for (long r = 0; r < n.value.rows(); ++r)
      for (long c = 0; c < n.value.cols(); ++c) {
        double av = pa->value(r, c), bv = pb->value(r, c), g = n.grad(r, c);
        if (av < bv) { da(r, c) = g; db(r, c) = 0; }
        else if (bv < av) { da(r, c) = 0; db(r, c) = g; }
        else { da(r, c) = 0.5 * g; db(r, c) = 0.5 * g; }
      }
    Var::accum(pa, da);
    Var::accum(pb, db);
  });
}

// Cosine similarity of two 1 x d rows -> 1 x 1.
inline Var cos_sim(const Var& a, const Var& b) {
  detail::check(a.rows() == 1 && b.rows() == 1 && a.cols() == b.cols(), "cos_sim: want 1 x d rows");
  double na = a.val().row(0).norm(), nb = b.val().row(0).norm();
  detail::check(na > 1e-12 && nb > 1e-12, "cos_sim: zero-norm input");
  double c = a.val().row(0).dot(b.val().row(0)) / (na * nb);
  auto pa = a.node(), pb = b.node();
  return detail::make_op(Var::scalar(c).val(), {pa, pb}, [pa, pb, na, nb, c](Node& n) {
    double g = n.grad(0, 0);
    Var::accum(pa, g * (pb->value / (na * nb) - (c / (na * na)) * pa->value));
    Var::accum(pb, g * (pa->value / (na * nb) - (c / (nb * nb)) * pb->value));
  });
}

// ---- engine ----

inline std::vector<Node*> topo_order(const NodePtr& root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  if (!root->active) return order;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    bool descended = false;
    while (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->active && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
        descended = true;
        break;
      }
    }
    if (descended) continue;
    order.push_back(n);
    stack.pop_back();
  }
  return order;  // parents before children
}

inline void backward(const Var& root) {
  detail::check(root.rows() == 1 && root.cols() == 1, "backward: root must be scalar");
  auto order = topo_order(root.node());
  if (order.empty()) return;
  for (Node* n : order)
    if (n->grad.rows() != n->value.rows() || n->grad.cols() != n->value.cols())
      n->grad = Mat::Zero(n->value.rows(), n->value.cols());
  root.node()->grad(0, 0) = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop(**it);
}

}  // namespace hoi::nn
