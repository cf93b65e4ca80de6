#pragma once

#include <cmath>
#include <vector>

#include "bilayer/rng.hpp"
#include "bilayer/tensor.hpp"

namespace testsup {

inline bilayer::Tensor random_tensor(int rows, int cols, bilayer::Rng& rng, double lo = -1.0,
                                     double hi = 1.0, bool requires_grad = false) {
  bilayer::Tensor t(rows, cols, requires_grad);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Values bounded away from zero so ReLU/abs kinks stay out of finite
// difference reach.
inline bilayer::Tensor random_off_kink(int rows, int cols, bilayer::Rng& rng, double margin = 1e-2,
                                       bool requires_grad = false) {
  bilayer::Tensor t(rows, cols, requires_grad);
  for (double& v : t.data()) {
    double x = rng.uniform(margin, 1.0);
    v = rng.bernoulli(0.5) ? x : -x;
  }
  return t;
}

inline double max_abs_diff(const bilayer::Tensor& a, const bilayer::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::fabs(a.data()[i] - b.data()[i]));
  }
  return m;
}

inline bool bit_equal(const bilayer::Tensor& a, const bilayer::Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.data()[i] != b.data()[i]) return false;
  }
  return true;
}

// Dense ridge regression via normal equations + Cholesky; oracle-grade
// solver for learnability checks, independent of the library under test.
inline std::vector<std::vector<double>> ridge_fit(const std::vector<std::vector<double>>& X,
                                                  const std::vector<std::vector<double>>& Y,
                                                  double lambda) {
  const std::size_t n = X.size();
  const std::size_t f = X[0].size();
  const std::size_t m = Y[0].size();
  std::vector<std::vector<double>> A(f, std::vector<double>(f, 0.0));
  std::vector<std::vector<double>> B(f, std::vector<double>(m, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < f; ++a) {
      const double xa = X[i][a];
      if (xa == 0.0) continue;
      for (std::size_t b = 0; b < f; ++b) A[a][b] += xa * X[i][b];
      for (std::size_t c = 0; c < m; ++c) B[a][c] += xa * Y[i][c];
    }
  }
  for (std::size_t a = 0; a < f; ++a) A[a][a] += lambda;
  // Cholesky A = L L^T
  std::vector<std::vector<double>> L(f, std::vector<double>(f, 0.0));
  for (std::size_t i = 0; i < f; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = A[i][j];
      for (std::size_t k = 0; k < j; ++k) s -= L[i][k] * L[j][k];
      if (i == j) {
        L[i][i] = std::sqrt(s);
      } else {
        L[i][j] = s / L[j][j];
      }
    }
  }
  // Solve L L^T W = B
  std::vector<std::vector<double>> W(f, std::vector<double>(m, 0.0));
  for (std::size_t c = 0; c < m; ++c) {
    std::vector<double> y(f, 0.0);
    for (std::size_t i = 0; i < f; ++i) {
      double s = B[i][c];
      for (std::size_t k = 0; k < i; ++k) s -= L[i][k] * y[k];
      y[i] = s / L[i][i];
    }
    for (std::size_t ii = f; ii-- > 0;) {
      double s = y[ii];
      for (std::size_t k = ii + 1; k < f; ++k) s -= L[k][ii] * W[k][c];
      W[ii][c] = s / L[ii][ii];
    }
  }
  return W;
}

}  // namespace testsup
