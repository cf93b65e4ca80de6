#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "bilayer/errors.hpp"
#include "bilayer/layers.hpp"
#include "bilayer/tensor.hpp"

namespace bilayer {

struct AdamConfig {
  double lr = 2.5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Standard Adam with bias correction. Moments mirror parameter shapes and
// follow the parameter list order.
struct AdamState {
  AdamConfig cfg;
  std::vector<NamedParam> params;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t step = 0;

  AdamState() = default;

  AdamState(std::vector<NamedParam> params_in, AdamConfig cfg_in) : cfg(cfg_in) {
    params = std::move(params_in);
    m.reserve(params.size());
    v.reserve(params.size());
    for (const auto& p : params) {
      m.push_back(Tensor::zeros(p.tensor.rows(), p.tensor.cols()));
      v.push_back(Tensor::zeros(p.tensor.rows(), p.tensor.cols()));
    }
  }

  void zero_grad() {
    for (auto& p : params) p.tensor.zero_grad();
  }

  void apply() {
    ++step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      Tensor& p = params[pi].tensor;
      Tensor& mi = m[pi];
      Tensor& vi = v[pi];
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double g = p.grad()[k];
        if (!std::isfinite(g)) {
          throw NumericalError("adam_step: non-finite gradient in parameter '" +
                               params[pi].name + "' entry " + std::to_string(k));
        }
        mi.data()[k] = cfg.beta1 * mi.data()[k] + (1.0 - cfg.beta1) * g;
        vi.data()[k] = cfg.beta2 * vi.data()[k] + (1.0 - cfg.beta2) * g * g;
        const double mhat = mi.data()[k] / bc1;
        const double vhat = vi.data()[k] / bc2;
        p.data()[k] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      }
    }
  }
};

}  // namespace bilayer
