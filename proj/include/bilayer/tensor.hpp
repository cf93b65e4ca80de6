#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "bilayer/errors.hpp"
#include "bilayer/rng.hpp"

namespace bilayer {

// Dense row-major matrix of doubles with a gradient buffer of the same
// shape. Copying a Tensor copies the handle: both copies refer to the same
// storage, which is what lets tape closures and optimizer state see
// parameter updates.
class Tensor {
 public:
  Tensor() : s_(nullptr) {}

  Tensor(int rows, int cols, bool requires_grad = false)
      : s_(std::make_shared<Storage>()) {
    if (rows <= 0 || cols <= 0) {
      throw ShapeError("Tensor: non-positive shape " + shape_str(rows, cols));
    }
    s_->rows = rows;
    s_->cols = cols;
    s_->data.assign(static_cast<std::size_t>(rows) * cols, 0.0);
    s_->grad.assign(static_cast<std::size_t>(rows) * cols, 0.0);
    s_->requires_grad = requires_grad;
  }

  static Tensor zeros(int rows, int cols) { return Tensor(rows, cols); }

  static Tensor full(int rows, int cols, double value) {
    Tensor t(rows, cols);
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
  }

  static Tensor identity(int n) {
    Tensor t(n, n);
    for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
  }

  static Tensor from_rows(int rows, int cols, std::vector<double> values) {
    Tensor t(rows, cols);
    if (values.size() != t.size()) {
      throw ShapeError("Tensor::from_rows: got " + std::to_string(values.size()) +
                       " values for shape " + shape_str(rows, cols));
    }
    t.data() = std::move(values);
    return t;
  }

  static Tensor from(std::initializer_list<std::initializer_list<double>> rows) {
    int r = static_cast<int>(rows.size());
    int c = r > 0 ? static_cast<int>(rows.begin()->size()) : 0;
    Tensor t(r, c);
    int i = 0;
    for (const auto& row : rows) {
      if (static_cast<int>(row.size()) != c) {
        throw ShapeError("Tensor::from: ragged initializer");
      }
      int j = 0;
      for (double v : row) t.at(i, j++) = v;
      ++i;
    }
    return t;
  }

  static Tensor xavier(int rows, int cols, Rng& rng, bool requires_grad = true) {
    Tensor t(rows, cols, requires_grad);
    double a = std::sqrt(6.0 / (rows + cols));
    for (double& v : t.data()) v = rng.uniform(-a, a);
    return t;
  }

  bool valid() const { return s_ != nullptr; }
  int rows() const { return s_->rows; }
  int cols() const { return s_->cols; }
  std::size_t size() const { return s_->data.size(); }
  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool f) { s_->requires_grad = f; }

  double& at(int i, int j) { return s_->data[static_cast<std::size_t>(i) * s_->cols + j]; }
  double at(int i, int j) const { return s_->data[static_cast<std::size_t>(i) * s_->cols + j]; }
  double& grad_at(int i, int j) { return s_->grad[static_cast<std::size_t>(i) * s_->cols + j]; }
  double grad_at(int i, int j) const { return s_->grad[static_cast<std::size_t>(i) * s_->cols + j]; }

  std::vector<double>& data() { return s_->data; }
  const std::vector<double>& data() const { return s_->data; }
  std::vector<double>& grad() { return s_->grad; }
  const std::vector<double>& grad() const { return s_->grad; }

  double value() const {
    if (rows() != 1 || cols() != 1) {
      throw ShapeError("Tensor::value: not a scalar, shape " + shape_str());
    }
    return s_->data[0];
  }

  void zero_grad() { std::fill(s_->grad.begin(), s_->grad.end(), 0.0); }

  // Deep copy with fresh storage.
  Tensor clone() const {
    Tensor t(rows(), cols(), requires_grad());
    t.data() = data();
    t.grad() = grad();
    return t;
  }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }
  const void* storage_id() const { return s_.get(); }

  bool all_finite() const {
    for (double v : s_->data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  std::string shape_str() const { return shape_str(rows(), cols()); }

  static std::string shape_str(int r, int c) {
    return std::to_string(r) + "x" + std::to_string(c);
  }

 private:
  struct Storage {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
};

// Records one backward closure per forward op, replayed in exact reverse
// order. Single-threaded by contract.
class Tape {
 public:
  void record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
  }

  std::size_t size() const { return nodes_.size(); }

  void backward_from(Tensor& loss) {
    if (loss.rows() != 1 || loss.cols() != 1) {
      throw ShapeError("backward_from: loss must be 1x1, got " + loss.shape_str());
    }
    loss.grad()[0] += 1.0;
    backward();
  }

  void backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

namespace detail {

inline bool wants_grad(const Tensor& a) { return a.requires_grad(); }

template <typename... Ts>
inline bool wants_grad(const Tensor& a, const Ts&... rest) {
  return a.requires_grad() || wants_grad(rest...);
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() +
                     " vs " + b.shape_str());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable ops. Each returns a fresh tensor and, when any input
// requires grad, records a closure on the tape that accumulates input grads
// from the output grad.
// ---------------------------------------------------------------------------

inline Tensor matmul(Tape& tape, Tensor a, Tensor b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions disagree, " + a.shape_str() +
                     " * " + b.shape_str());
  }
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out(m, n, detail::wants_grad(a, b));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = out.data().data();
  for (int i = 0; i < m; ++i) {
    const double* arow = pa + static_cast<std::size_t>(i) * k;
    double* crow = pc + static_cast<std::size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = pb + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  if (out.requires_grad()) {
    tape.record([a, b, out]() mutable {
      const int m = a.rows(), k = a.cols(), n = b.cols();
      const double* g = out.grad().data();
      if (a.requires_grad()) {
        // dA = G * B^T
        double* ga = a.grad().data();
        const double* pb = b.data().data();
        for (int i = 0; i < m; ++i) {
          const double* grow = g + static_cast<std::size_t>(i) * n;
          double* garow = ga + static_cast<std::size_t>(i) * k;
          for (int kk = 0; kk < k; ++kk) {
            const double* brow = pb + static_cast<std::size_t>(kk) * n;
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            garow[kk] += acc;
          }
        }
      }
      if (b.requires_grad()) {
        // dB = A^T * G
        double* gb = b.grad().data();
        const double* pa = a.data().data();
        for (int kk = 0; kk < k; ++kk) {
          double* gbrow = gb + static_cast<std::size_t>(kk) * n;
          for (int i = 0; i < m; ++i) {
            const double av = pa[static_cast<std::size_t>(i) * k + kk];
            const double* grow = g + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
        }
      }
    });
  }
  return out;
}

inline Tensor add(Tape& tape, Tensor a, Tensor b) {
  detail::require_same_shape("add", a, b);
  Tensor out(a.rows(), a.cols(), detail::wants_grad(a, b));
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (out.requires_grad()) {
    tape.record([a, b, out]() mutable {
      if (a.requires_grad()) {
        for (std::size_t i = 0; i < a.size(); ++i) a.grad()[i] += out.grad()[i];
      }
      if (b.requires_grad()) {
        for (std::size_t i = 0; i < b.size(); ++i) b.grad()[i] += out.grad()[i];
      }
    });
  }
  return out;
}

inline Tensor sub(Tape& tape, Tensor a, Tensor b) {
  detail::require_same_shape("sub", a, b);
  Tensor out(a.rows(), a.cols(), detail::wants_grad(a, b));
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (out.requires_grad()) {
    tape.record([a, b, out]() mutable {
      if (a.requires_grad()) {
        for (std::size_t i = 0; i < a.size(); ++i) a.grad()[i] += out.grad()[i];
      }
      if (b.requires_grad()) {
        for (std::size_t i = 0; i < b.size(); ++i) b.grad()[i] -= out.grad()[i];
      }
    });
  }
  return out;
}

inline Tensor scale(Tape& tape, Tensor a, double c) {
  Tensor out(a.rows(), a.cols(), a.requires_grad());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * c;
  if (out.requires_grad()) {
    tape.record([a, out, c]() mutable {
      for (std::size_t i = 0; i < a.size(); ++i) a.grad()[i] += c * out.grad()[i];
    });
  }
  return out;
}

// x (n x d) + row vector b (1 x d), broadcast over rows.
inline Tensor add_rowvec(Tape& tape, Tensor x, Tensor b) {
  if (b.rows() != 1 || b.cols() != x.cols()) {
    throw ShapeError("add_rowvec: bias " + b.shape_str() + " does not broadcast over " +
                     x.shape_str());
  }
  const int n = x.rows(), d = x.cols();
  Tensor out(n, d, detail::wants_grad(x, b));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) out.at(i, j) = x.at(i, j) + b.at(0, j);
  }
  if (out.requires_grad()) {
    tape.record([x, b, out]() mutable {
      const int n = x.rows(), d = x.cols();
      if (x.requires_grad()) {
        for (std::size_t i = 0; i < x.size(); ++i) x.grad()[i] += out.grad()[i];
      }
      if (b.requires_grad()) {
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < d; ++j) b.grad_at(0, j) += out.grad_at(i, j);
        }
      }
    });
  }
  return out;
}

inline Tensor concat_cols(Tape& tape, Tensor a, Tensor b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("concat_cols: row counts differ, " + a.shape_str() + " vs " +
                     b.shape_str());
  }
  const int n = a.rows(), ca = a.cols(), cb = b.cols();
  Tensor out(n, ca + cb, detail::wants_grad(a, b));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < ca; ++j) out.at(i, j) = a.at(i, j);
    for (int j = 0; j < cb; ++j) out.at(i, ca + j) = b.at(i, j);
  }
  if (out.requires_grad()) {
    tape.record([a, b, out]() mutable {
      const int n = a.rows(), ca = a.cols(), cb = b.cols();
      if (a.requires_grad()) {
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < ca; ++j) a.grad_at(i, j) += out.grad_at(i, j);
      }
      if (b.requires_grad()) {
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < cb; ++j) b.grad_at(i, j) += out.grad_at(i, ca + j);
      }
    });
  }
  return out;
}

inline Tensor concat_rows(Tape& tape, Tensor a, Tensor b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("concat_rows: column counts differ, " + a.shape_str() + " vs " +
                     b.shape_str());
  }
  const int ra = a.rows(), rb = b.rows(), d = a.cols();
  Tensor out(ra + rb, d, detail::wants_grad(a, b));
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(), out.data().begin() + a.size());
  if (out.requires_grad()) {
    tape.record([a, b, out]() mutable {
      if (a.requires_grad()) {
        for (std::size_t i = 0; i < a.size(); ++i) a.grad()[i] += out.grad()[i];
      }
      if (b.requires_grad()) {
        for (std::size_t i = 0; i < b.size(); ++i) b.grad()[i] += out.grad()[a.size() + i];
      }
    });
  }
  (void)ra; (void)rb; (void)d;
  return out;
}

// Rows [r0, r1) and columns [c0, c1).
inline Tensor slice(Tape& tape, Tensor x, int r0, int r1, int c0, int c1) {
  if (r0 < 0 || r1 > x.rows() || c0 < 0 || c1 > x.cols() || r0 >= r1 || c0 >= c1) {
    throw ShapeError("slice: bad range [" + std::to_string(r0) + "," + std::to_string(r1) +
                     ")x[" + std::to_string(c0) + "," + std::to_string(c1) + ") of " +
                     x.shape_str());
  }
  Tensor out(r1 - r0, c1 - c0, x.requires_grad());
  for (int i = r0; i < r1; ++i) {
    for (int j = c0; j < c1; ++j) out.at(i - r0, j - c0) = x.at(i, j);
  }
  if (out.requires_grad()) {
    tape.record([x, out, r0, r1, c0, c1]() mutable {
      for (int i = r0; i < r1; ++i)
        for (int j = c0; j < c1; ++j) x.grad_at(i, j) += out.grad_at(i - r0, j - c0);
    });
  }
  return out;
}

inline Tensor relu(Tape& tape, Tensor x) {
  Tensor out(x.rows(), x.cols(), x.requires_grad());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out.data()[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
  }
  if (out.requires_grad()) {
    tape.record([x, out]() mutable {
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (x.data()[i] > 0.0) x.grad()[i] += out.grad()[i];
      }
    });
  }
  return out;
}

inline Tensor leaky_relu(Tape& tape, Tensor x, double slope = 0.01) {
  Tensor out(x.rows(), x.cols(), x.requires_grad());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = v > 0.0 ? v : slope * v;
  }
  if (out.requires_grad()) {
    tape.record([x, out, slope]() mutable {
      for (std::size_t i = 0; i < x.size(); ++i) {
        x.grad()[i] += (x.data()[i] > 0.0 ? 1.0 : slope) * out.grad()[i];
      }
    });
  }
  return out;
}

inline Tensor abs(Tape& tape, Tensor x) {
  Tensor out(x.rows(), x.cols(), x.requires_grad());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = std::fabs(x.data()[i]);
  if (out.requires_grad()) {
    tape.record([x, out]() mutable {
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x.data()[i];
        // subgradient 0 at the kink
        x.grad()[i] += (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0)) * out.grad()[i];
      }
    });
  }
  return out;
}

inline Tensor square(Tape& tape, Tensor x) {
  Tensor out(x.rows(), x.cols(), x.requires_grad());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] * x.data()[i];
  if (out.requires_grad()) {
    tape.record([x, out]() mutable {
      for (std::size_t i = 0; i < x.size(); ++i) {
        x.grad()[i] += 2.0 * x.data()[i] * out.grad()[i];
      }
    });
  }
  return out;
}

inline Tensor mean_all(Tape& tape, Tensor x) {
  Tensor out(1, 1, x.requires_grad());
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  out.data()[0] = acc / static_cast<double>(x.size());
  if (out.requires_grad()) {
    tape.record([x, out]() mutable {
      const double g = out.grad()[0] / static_cast<double>(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) x.grad()[i] += g;
    });
  }
  return out;
}

inline Tensor sum_all(Tape& tape, Tensor x) {
  Tensor out(1, 1, x.requires_grad());
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  out.data()[0] = acc;
  if (out.requires_grad()) {
    tape.record([x, out]() mutable {
      const double g = out.grad()[0];
      for (std::size_t i = 0; i < x.size(); ++i) x.grad()[i] += g;
    });
  }
  return out;
}

// Column means over rows: (n x d) -> (1 x d).
inline Tensor mean_rows(Tape& tape, Tensor x) {
  const int n = x.rows(), d = x.cols();
  Tensor out(1, d, x.requires_grad());
  for (int j = 0; j < d; ++j) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += x.at(i, j);
    out.at(0, j) = acc / n;
  }
  if (out.requires_grad()) {
    tape.record([x, out]() mutable {
      const int n = x.rows(), d = x.cols();
      for (int j = 0; j < d; ++j) {
        const double g = out.grad_at(0, j) / n;
        for (int i = 0; i < n; ++i) x.grad_at(i, j) += g;
      }
    });
  }
  return out;
}

// Column-wise max over rows: (n x d) -> (1 x d). Grad routes to the first
// argmax row per column.
inline Tensor max_rows(Tape& tape, Tensor x) {
  const int n = x.rows(), d = x.cols();
  Tensor out(1, d, x.requires_grad());
  std::vector<int> argmax(static_cast<std::size_t>(d), 0);
  for (int j = 0; j < d; ++j) {
    double best = x.at(0, j);
    int bi = 0;
    for (int i = 1; i < n; ++i) {
      if (x.at(i, j) > best) {
        best = x.at(i, j);
        bi = i;
      }
    }
    out.at(0, j) = best;
    argmax[static_cast<std::size_t>(j)] = bi;
  }
  if (out.requires_grad()) {
    tape.record([x, out, argmax]() mutable {
      for (int j = 0; j < x.cols(); ++j) {
        x.grad_at(argmax[static_cast<std::size_t>(j)], j) += out.grad_at(0, j);
      }
    });
  }
  return out;
}

// Broadcast a 1 x d row to n x d.
inline Tensor repeat_row(Tape& tape, Tensor row, int n) {
  if (row.rows() != 1) {
    throw ShapeError("repeat_row: expected a 1-row tensor, got " + row.shape_str());
  }
  const int d = row.cols();
  Tensor out(n, d, row.requires_grad());
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) out.at(i, j) = row.at(0, j);
  }
  if (out.requires_grad()) {
    tape.record([row, out, n]() mutable {
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < row.cols(); ++j) row.grad_at(0, j) += out.grad_at(i, j);
    });
  }
  return out;
}

// Same data, new shape (copy; identity backward).
inline Tensor reshape(Tape& tape, Tensor x, int rows, int cols) {
  if (static_cast<std::size_t>(rows) * cols != x.size()) {
    throw ShapeError("reshape: cannot view " + x.shape_str() + " as " +
                     Tensor::shape_str(rows, cols));
  }
  Tensor out(rows, cols, x.requires_grad());
  out.data() = x.data();
  if (out.requires_grad()) {
    tape.record([x, out]() mutable {
      for (std::size_t i = 0; i < x.size(); ++i) x.grad()[i] += out.grad()[i];
    });
  }
  return out;
}

// Per-row group normalization with affine parameters, exact backward.
// Columns are split into `groups` contiguous blocks.
inline Tensor group_norm(Tape& tape, Tensor x, int groups, double eps,
                         Tensor gamma, Tensor beta) {
  const int n = x.rows(), d = x.cols();
  if (groups <= 0 || d % groups != 0) {
    throw ConfigError("group_norm: " + std::to_string(d) + " columns not divisible by " +
                      std::to_string(groups) + " groups");
  }
  if (eps <= 0.0) throw ConfigError("group_norm: eps must be positive");
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d) {
    throw ShapeError("group_norm: affine params must be 1x" + std::to_string(d));
  }
  const int m = d / groups;
  Tensor out(n, d, detail::wants_grad(x, gamma, beta));
  // Saved statistics for the backward pass.
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * groups);
  for (int i = 0; i < n; ++i) {
    for (int g = 0; g < groups; ++g) {
      const int c0 = g * m;
      double mu = 0.0;
      for (int j = 0; j < m; ++j) mu += x.at(i, c0 + j);
      mu /= m;
      double var = 0.0;
      for (int j = 0; j < m; ++j) {
        const double dv = x.at(i, c0 + j) - mu;
        var += dv * dv;
      }
      var /= m;
      const double is = 1.0 / std::sqrt(var + eps);
      (*inv_std)[static_cast<std::size_t>(i) * groups + g] = is;
      for (int j = 0; j < m; ++j) {
        const double xh = (x.at(i, c0 + j) - mu) * is;
        (*xhat)[static_cast<std::size_t>(i) * d + c0 + j] = xh;
        out.at(i, c0 + j) = gamma.at(0, c0 + j) * xh + beta.at(0, c0 + j);
      }
    }
  }
  if (out.requires_grad()) {
    tape.record([x, gamma, beta, out, xhat, inv_std, groups, m]() mutable {
      const int n = x.rows(), d = x.cols();
      for (int i = 0; i < n; ++i) {
        for (int g = 0; g < groups; ++g) {
          const int c0 = g * m;
          const double is = (*inv_std)[static_cast<std::size_t>(i) * groups + g];
          double sum_dxh = 0.0, sum_dxh_xh = 0.0;
          for (int j = 0; j < m; ++j) {
            const std::size_t idx = static_cast<std::size_t>(i) * d + c0 + j;
            const double go = out.grad_at(i, c0 + j);
            const double dxh = go * gamma.at(0, c0 + j);
            sum_dxh += dxh;
            sum_dxh_xh += dxh * (*xhat)[idx];
            if (gamma.requires_grad()) gamma.grad_at(0, c0 + j) += go * (*xhat)[idx];
            if (beta.requires_grad()) beta.grad_at(0, c0 + j) += go;
          }
          if (x.requires_grad()) {
            for (int j = 0; j < m; ++j) {
              const std::size_t idx = static_cast<std::size_t>(i) * d + c0 + j;
              const double dxh = out.grad_at(i, c0 + j) * gamma.at(0, c0 + j);
              x.grad_at(i, c0 + j) +=
                  is * (dxh - sum_dxh / m - (*xhat)[idx] * sum_dxh_xh / m);
            }
          }
        }
      }
    });
  }
  return out;
}

// Running statistics buffer for batch normalization.
struct RunningStats {
  Tensor mean;
  Tensor var;

  explicit RunningStats(int d) : mean(Tensor::zeros(1, d)), var(Tensor::full(1, d, 1.0)) {}
};

// 1-D batch normalization over rows (rows act as the batch). Training mode
// normalizes with batch statistics and updates the running buffers in
// place; eval mode normalizes with the running buffers.
inline Tensor batch_norm_1d(Tape& tape, Tensor x, Tensor gamma,
                            Tensor beta, RunningStats& stats, bool training,
                            double momentum = 0.1, double eps = 1e-5) {
  const int n = x.rows(), d = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d) {
    throw ShapeError("batch_norm_1d: affine params must be 1x" + std::to_string(d));
  }
  if (stats.mean.cols() != d) {
    throw ShapeError("batch_norm_1d: running stats width " + stats.mean.shape_str() +
                     " does not match input " + x.shape_str());
  }
  Tensor out(n, d, detail::wants_grad(x, gamma, beta));
  if (training) {
    if (n < 2) {
      throw NumericalError("batch_norm_1d: degenerate batch of " + std::to_string(n) +
                           " rows in training mode");
    }
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) {
      double mu = 0.0;
      for (int i = 0; i < n; ++i) mu += x.at(i, j);
      mu /= n;
      double var = 0.0;
      for (int i = 0; i < n; ++i) {
        const double dv = x.at(i, j) - mu;
        var += dv * dv;
      }
      const double var_biased = var / n;
      const double var_unbiased = var / (n - 1);
      const double is = 1.0 / std::sqrt(var_biased + eps);
      (*inv_std)[static_cast<std::size_t>(j)] = is;
      for (int i = 0; i < n; ++i) {
        const double xh = (x.at(i, j) - mu) * is;
        (*xhat)[static_cast<std::size_t>(i) * d + j] = xh;
        out.at(i, j) = gamma.at(0, j) * xh + beta.at(0, j);
      }
      stats.mean.at(0, j) = (1.0 - momentum) * stats.mean.at(0, j) + momentum * mu;
      stats.var.at(0, j) = (1.0 - momentum) * stats.var.at(0, j) + momentum * var_unbiased;
    }
    if (out.requires_grad()) {
      tape.record([x, gamma, beta, out, xhat, inv_std]() mutable {
        const int n = x.rows(), d = x.cols();
        for (int j = 0; j < d; ++j) {
          const double is = (*inv_std)[static_cast<std::size_t>(j)];
          double sum_dxh = 0.0, sum_dxh_xh = 0.0;
          for (int i = 0; i < n; ++i) {
            const std::size_t idx = static_cast<std::size_t>(i) * d + j;
            const double go = out.grad_at(i, j);
            const double dxh = go * gamma.at(0, j);
            sum_dxh += dxh;
            sum_dxh_xh += dxh * (*xhat)[idx];
            if (gamma.requires_grad()) gamma.grad_at(0, j) += go * (*xhat)[idx];
            if (beta.requires_grad()) beta.grad_at(0, j) += go;
          }
          if (x.requires_grad()) {
            for (int i = 0; i < n; ++i) {
              const std::size_t idx = static_cast<std::size_t>(i) * d + j;
              const double dxh = out.grad_at(i, j) * gamma.at(0, j);
              x.grad_at(i, j) +=
                  is * (dxh - sum_dxh / n - (*xhat)[idx] * sum_dxh_xh / n);
            }
          }
        }
      });
    }
  } else {
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) {
      (*inv_std)[static_cast<std::size_t>(j)] = 1.0 / std::sqrt(stats.var.at(0, j) + eps);
    }
    for (int j = 0; j < d; ++j) {
      const double is = (*inv_std)[static_cast<std::size_t>(j)];
      const double mu = stats.mean.at(0, j);
      for (int i = 0; i < n; ++i) {
        out.at(i, j) = gamma.at(0, j) * (x.at(i, j) - mu) * is + beta.at(0, j);
      }
    }
    if (out.requires_grad()) {
      auto mean_copy = std::make_shared<std::vector<double>>(stats.mean.data());
      tape.record([x, gamma, beta, out, inv_std, mean_copy]() mutable {
        const int n = x.rows(), d = x.cols();
        for (int j = 0; j < d; ++j) {
          const double is = (*inv_std)[static_cast<std::size_t>(j)];
          for (int i = 0; i < n; ++i) {
            const double go = out.grad_at(i, j);
            if (gamma.requires_grad()) {
              gamma.grad_at(0, j) += go * (x.at(i, j) - (*mean_copy)[static_cast<std::size_t>(j)]) * is;
            }
            if (beta.requires_grad()) beta.grad_at(0, j) += go;
            if (x.requires_grad()) x.grad_at(i, j) += go * gamma.at(0, j) * is;
          }
        }
      });
    }
  }
  return out;
}

}  // namespace bilayer
