#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace atm {

using TokenId = std::int32_t;
using TokenIds = std::vector<TokenId>;

// Row-major so that a row is one sequence position.
template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic, Eigen::RowMajor>;

using Rng = std::mt19937_64;

template <typename T>
Mat<T> normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
  return m;
}

template <typename T>
bool all_finite(const Mat<T>& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    if (!std::isfinite(m.data()[i])) return false;
  }
  return true;
}

}  // namespace atm
