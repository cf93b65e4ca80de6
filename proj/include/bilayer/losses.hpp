#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "bilayer/camera.hpp"
#include "bilayer/config.hpp"
#include "bilayer/errors.hpp"
#include "bilayer/model.hpp"
#include "bilayer/tensor.hpp"

namespace bilayer {

struct LossWeights {
  double w_m = 1.0;
  double w_mj3d = 1.0;
  double w_mj2d = 1.0;
  double w_s = 1.0;
  double w_sj2d = 1.0;
  double w_theta = 1.0;
  double lambda_beta = 0.1;
  double focal_coeff = 5.0;

  static LossWeights from_config(const Config& c) {
    return {c.w_m, c.w_mj3d, c.w_mj2d, c.w_s, c.w_sj2d, c.w_theta, c.lambda_beta,
            c.focal_coeff};
  }
};

struct FocalConfig {
  double alpha = 1.0;
  double gamma = 1.0;
  double tau = 0.99;
  // The printed formula truncates with max(tau, aL), which freezes the loss
  // for small values instead of guarding the log; the intended reading
  // truncates aL from above. Both are selectable; min is the default.
  bool truncate_from_above = true;

  static FocalConfig from_config(const Config& c) {
    return {c.focal_alpha, c.focal_gamma, c.focal_tau, c.focal_truncation == "min"};
  }
};

inline Tensor l1_mean(Tape& tape, Tensor pred, Tensor target) {
  return mean_all(tape, abs(tape, sub(tape, pred, target)));
}

inline Tensor mse_mean(Tape& tape, Tensor pred, Tensor target) {
  return mean_all(tape, square(tape, sub(tape, pred, target)));
}

// Focal loss for regression on a scalar L1 value:
//   u = min(alpha L, tau);  FL = -(u)^gamma log(1 - u)
// Monotone on (0, tau/alpha), flat beyond the truncation point.
inline Tensor focal_regression(Tape& tape, Tensor l1_value, const FocalConfig& cfg) {
  if (l1_value.rows() != 1 || l1_value.cols() != 1) {
    throw ShapeError("focal_regression: expects a 1x1 loss, got " + l1_value.shape_str());
  }
  const double L = l1_value.data()[0];
  if (L < 0.0) throw InputError("focal_regression: negative L1 value");
  const double u_raw = cfg.alpha * L;
  Tensor out(1, 1, l1_value.requires_grad());
  double value = 0.0;
  double dvalue_dL = 0.0;
  if (cfg.truncate_from_above) {
    const double u = std::min(u_raw, cfg.tau);
    value = u == 0.0 ? 0.0 : -std::pow(u, cfg.gamma) * std::log(1.0 - u);
    if (u_raw < cfg.tau && u > 0.0) {
      dvalue_dL = cfg.alpha * (-cfg.gamma * std::pow(u, cfg.gamma - 1.0) * std::log(1.0 - u) +
                               std::pow(u, cfg.gamma) / (1.0 - u));
    }
  } else {
    // As printed: log(1 - max(tau, aL)), argument clamped away from zero.
    const double m = std::max(cfg.tau, u_raw);
    const double arg = std::max(1.0 - m, 1e-12);
    value = u_raw == 0.0 ? 0.0 : -std::pow(u_raw, cfg.gamma) * std::log(arg);
    if (u_raw > 0.0) {
      dvalue_dL = -cfg.alpha * cfg.gamma * std::pow(u_raw, cfg.gamma - 1.0) * std::log(arg);
      if (u_raw > cfg.tau && 1.0 - u_raw > 1e-12) {
        dvalue_dL += cfg.alpha * std::pow(u_raw, cfg.gamma) / (1.0 - u_raw);
      }
    }
  }
  out.data()[0] = value;
  if (out.requires_grad()) {
    tape.record([l1_value, out, dvalue_dL]() mutable {
      l1_value.grad()[0] += dvalue_dL * out.grad()[0];
    });
  }
  return out;
}

inline double focal_regression_value(double l1, const FocalConfig& cfg) {
  Tape scratch;
  Tensor t(1, 1);
  t.data()[0] = l1;
  return focal_regression(scratch, t, cfg).value();
}

struct GroundTruth {
  Tensor v_m;        // N_m x 3
  Tensor v_s;        // N_s x 3
  Tensor joints2d;   // N_s x 2
  Tensor theta_flat; // 1 x 3 N_s
  Tensor beta;       // 1 x 10
  bool has_3d = true;
  bool has_2d = true;
};

inline GroundTruth ground_truth_of(const SyntheticExample& ex) {
  GroundTruth gt;
  gt.v_m = ex.v_m_gt;
  gt.v_s = ex.v_s_gt;
  gt.joints2d = ex.joints2d_gt;
  Tape scratch;
  gt.theta_flat = reshape(scratch, ex.theta, 1, ex.theta.rows() * 3);
  gt.beta = ex.beta;
  gt.has_3d = ex.has_3d;
  gt.has_2d = ex.has_2d;
  return gt;
}

struct LossTerm {
  std::string name;
  double raw = 0.0;     // unweighted term value
  double weight = 0.0;  // effective weight (includes the focal coefficient)
  bool active = false;
};

struct LossResult {
  Tensor total;  // 1x1, on the tape
  std::vector<LossTerm> terms;

  double term(const std::string& name) const {
    for (const auto& t : terms) {
      if (t.name == name) return t.raw;
    }
    throw InputError("LossResult: no term named '" + name + "'");
  }
};

struct FocalSwitches {
  bool use_focal = true;
  bool on_mesh_j3d = true;
  bool on_skeleton = true;

  static FocalSwitches from_config(const Config& c) {
    return {c.use_focal, c.focal_on_mesh_j3d, c.focal_on_skeleton};
  }
};

// Combined objective. 3D terms are masked when has_3d is false, 2D terms
// when has_2d is false; the parametric terms ride along with either signal.
// The focal loss replaces plain L1 on the 3D pose terms, with its
// coefficient folded into the effective weight.
inline LossResult total_loss(Tape& tape, const NetworkOutput& out, const GroundTruth& gt,
                             const LossWeights& w, const FocalConfig& focal,
                             const FocalSwitches& sw) {
  if (!gt.has_3d && !gt.has_2d) {
    throw InputError("total_loss: no supervision signal (both has_3d and has_2d false)");
  }
  LossResult result;
  Tensor total(1, 1, true);
  bool any = false;

  auto add_term = [&](const std::string& name, bool active, double weight, Tensor value) {
    LossTerm term;
    term.name = name;
    term.active = active;
    term.weight = weight;
    if (active) {
      term.raw = value.value();
      total = add(tape, total, scale(tape, value, weight));
      any = true;
    }
    result.terms.push_back(term);
  };

  // mesh vertices, L1
  if (gt.has_3d) {
    add_term("m", true, w.w_m, l1_mean(tape, out.v_m_hat, gt.v_m));
  } else {
    add_term("m", false, w.w_m, Tensor());
  }

  // 3d pose from the mesh, focal-or-L1
  if (gt.has_3d) {
    Tensor l1 = l1_mean(tape, out.v_m_j3d, gt.v_s);
    const bool use_fl = sw.use_focal && sw.on_mesh_j3d;
    add_term("mj3d", true, w.w_mj3d * (use_fl ? w.focal_coeff : 1.0),
             use_fl ? focal_regression(tape, l1, focal) : l1);
  } else {
    add_term("mj3d", false, w.w_mj3d, Tensor());
  }

  // 2d projection of the mesh-regressed pose
  if (gt.has_2d) {
    Tensor proj = project_weak(tape, out.v_m_j3d, out.cam);
    add_term("mj2d", true, w.w_mj2d, l1_mean(tape, proj, gt.joints2d));
  } else {
    add_term("mj2d", false, w.w_mj2d, Tensor());
  }

  // skeleton branch terms
  if (out.has_skeleton && gt.has_3d) {
    Tensor l1 = l1_mean(tape, out.v_s_hat, gt.v_s);
    const bool use_fl = sw.use_focal && sw.on_skeleton;
    add_term("s", true, w.w_s * (use_fl ? w.focal_coeff : 1.0),
             use_fl ? focal_regression(tape, l1, focal) : l1);
  } else {
    add_term("s", false, w.w_s, Tensor());
  }
  if (out.has_skeleton && gt.has_2d) {
    Tensor proj = project_weak(tape, out.v_s_hat, out.cam);
    add_term("sj2d", true, w.w_sj2d, l1_mean(tape, proj, gt.joints2d));
  } else {
    add_term("sj2d", false, w.w_sj2d, Tensor());
  }

  // parametric terms, MSE
  add_term("theta", true, w.w_theta, mse_mean(tape, out.theta_hat, gt.theta_flat));
  add_term("beta", true, w.lambda_beta, mse_mean(tape, out.beta_hat, gt.beta));

  (void)any;
  result.total = total;
  return result;
}

}  // namespace bilayer
