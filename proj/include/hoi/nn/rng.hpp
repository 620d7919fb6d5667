#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <cstring>
#include <random>

namespace hoi::nn {

// All stochastic choices flow through seeded engines so runs are reproducible.
using Rng = std::mt19937_64;

inline Eigen::MatrixXd randn(Rng& rng, long rows, long cols, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  Eigen::MatrixXd m(rows, cols);
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) m(r, c) = dist(rng);
  return m;
}

inline Eigen::MatrixXd rand_uniform(Rng& rng, long rows, long cols, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Eigen::MatrixXd m(rows, cols);
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) m(r, c) = dist(rng);
  return m;
}

// Kaiming-flavored init used for every trainable linear map.
inline Eigen::MatrixXd init_weight(Rng& rng, long in_dim, long out_dim) {
  return randn(rng, in_dim, out_dim, std::sqrt(2.0 / static_cast<double>(in_dim)));
}

// FNV-1a over the raw bit patterns of a matrix, row-major. Used to prove that
// frozen parameter blocks never move during training.
inline std::uint64_t fnv1a64(const Eigen::MatrixXd& m, std::uint64_t h = 14695981039346656037ull) {
  constexpr std::uint64_t prime = 1099511628211ull;
  for (long r = 0; r < m.rows(); ++r)
    for (long c = 0; c < m.cols(); ++c) {
      std::uint64_t bits;
      double v = m(r, c);
      std::memcpy(&bits, &v, sizeof(bits));
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xffull;
        h *= prime;
      }
    }
  return h;
}

}  // namespace hoi::nn
