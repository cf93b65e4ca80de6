#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "bilayer/errors.hpp"
#include "bilayer/losses.hpp"
#include "bilayer/model.hpp"
#include "bilayer/synthdata.hpp"
#include "bilayer/tensor.hpp"

namespace bilayer {

namespace detail {

// Cyclic Jacobi eigendecomposition for small symmetric matrices.
template <int N>
void jacobi_eigen(std::array<double, N * N> a, std::array<double, N * N>& vecs,
                  std::array<double, N>& vals) {
  for (int i = 0; i < N; ++i) {
    for (int j = 0; j < N; ++j) vecs[i * N + j] = i == j ? 1.0 : 0.0;
  }
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < N; ++p) {
      for (int q = p + 1; q < N; ++q) off += a[p * N + q] * a[p * N + q];
    }
    if (off < 1e-30) break;
    for (int p = 0; p < N; ++p) {
      for (int q = p + 1; q < N; ++q) {
        const double apq = a[p * N + q];
        if (std::fabs(apq) < 1e-300) continue;
        const double theta = (a[q * N + q] - a[p * N + p]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < N; ++k) {
          const double akp = a[k * N + p], akq = a[k * N + q];
          a[k * N + p] = c * akp - s * akq;
          a[k * N + q] = s * akp + c * akq;
        }
        for (int k = 0; k < N; ++k) {
          const double apk = a[p * N + k], aqk = a[q * N + k];
          a[p * N + k] = c * apk - s * aqk;
          a[q * N + k] = s * apk + c * aqk;
        }
        for (int k = 0; k < N; ++k) {
          const double vkp = vecs[k * N + p], vkq = vecs[k * N + q];
          vecs[k * N + p] = c * vkp - s * vkq;
          vecs[k * N + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  for (int i = 0; i < N; ++i) vals[i] = a[i * N + i];
}

inline void require_points3(const Tensor& t, const char* what) {
  if (t.cols() != 3) {
    throw ShapeError(std::string(what) + ": expected k x 3 points, got " + t.shape_str());
  }
}

inline void check_nondegenerate(const Tensor& centered, const char* what) {
  std::array<double, 9> scatter{};
  for (int i = 0; i < centered.rows(); ++i) {
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) scatter[a * 3 + b] += centered.at(i, a) * centered.at(i, b);
    }
  }
  std::array<double, 9> vecs;
  std::array<double, 3> vals;
  jacobi_eigen<3>(scatter, vecs, vals);
  std::sort(vals.begin(), vals.end(), std::greater<>());
  if (!(vals[1] > 1e-12 * std::max(vals[0], 1e-30))) {
    throw NumericalError(std::string(what) + ": degenerate (rank < 2) point configuration");
  }
}

}  // namespace detail

// Mean per-joint position error after root-joint translation alignment, in
// millimeters (inputs in meters).
inline double mpjpe(const Tensor& pred, const Tensor& gt, int root_index = 0) {
  detail::require_points3(pred, "mpjpe");
  detail::require_points3(gt, "mpjpe");
  if (pred.rows() != gt.rows()) {
    throw ShapeError("mpjpe: joint counts differ, " + pred.shape_str() + " vs " +
                     gt.shape_str());
  }
  if (root_index < 0 || root_index >= gt.rows()) {
    throw InputError("mpjpe: root index " + std::to_string(root_index) + " out of range");
  }
  double acc = 0.0;
  for (int j = 0; j < gt.rows(); ++j) {
    double d = 0.0;
    for (int c = 0; c < 3; ++c) {
      const double u =
          (pred.at(j, c) - pred.at(root_index, c)) - (gt.at(j, c) - gt.at(root_index, c));
      d += u * u;
    }
    acc += std::sqrt(d);
  }
  return acc / gt.rows() * 1000.0;
}

// MPJPE after the optimal similarity (rotation + scale + translation)
// alignment of pred onto gt, solved in closed form via the quaternion
// formulation of absolute orientation.
inline double pa_mpjpe(const Tensor& pred, const Tensor& gt) {
  detail::require_points3(pred, "pa_mpjpe");
  detail::require_points3(gt, "pa_mpjpe");
  if (pred.rows() != gt.rows()) {
    throw ShapeError("pa_mpjpe: joint counts differ, " + pred.shape_str() + " vs " +
                     gt.shape_str());
  }
  const int n = gt.rows();
  if (n < 3) throw InputError("pa_mpjpe: need at least 3 joints");

  std::array<double, 3> pm{}, gm{};
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) {
      pm[static_cast<std::size_t>(c)] += pred.at(i, c) / n;
      gm[static_cast<std::size_t>(c)] += gt.at(i, c) / n;
    }
  }
  Tensor X(n, 3), Y(n, 3);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) {
      X.at(i, c) = pred.at(i, c) - pm[static_cast<std::size_t>(c)];
      Y.at(i, c) = gt.at(i, c) - gm[static_cast<std::size_t>(c)];
    }
  }
  detail::check_nondegenerate(X, "pa_mpjpe(pred)");
  detail::check_nondegenerate(Y, "pa_mpjpe(gt)");

  // Cross-covariance S_ab = sum_i X_ia Y_ib.
  std::array<double, 9> S{};
  for (int i = 0; i < n; ++i) {
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) S[a * 3 + b] += X.at(i, a) * Y.at(i, b);
    }
  }
  const double sxx = S[0], sxy = S[1], sxz = S[2];
  const double syx = S[3], syy = S[4], syz = S[5];
  const double szx = S[6], szy = S[7], szz = S[8];
  std::array<double, 16> N{};
  N[0] = sxx + syy + szz;
  N[1] = syz - szy;
  N[2] = szx - sxz;
  N[3] = sxy - syx;
  N[4] = N[1];
  N[5] = sxx - syy - szz;
  N[6] = sxy + syx;
  N[7] = szx + sxz;
  N[8] = N[2];
  N[9] = N[6];
  N[10] = -sxx + syy - szz;
  N[11] = syz + szy;
  N[12] = N[3];
  N[13] = N[7];
  N[14] = N[11];
  N[15] = -sxx - syy + szz;

  std::array<double, 16> vecs;
  std::array<double, 4> vals;
  detail::jacobi_eigen<4>(N, vecs, vals);
  int best = 0;
  for (int i = 1; i < 4; ++i) {
    if (vals[static_cast<std::size_t>(i)] > vals[static_cast<std::size_t>(best)]) best = i;
  }
  const double qw = vecs[0 * 4 + best], qx = vecs[1 * 4 + best], qy = vecs[2 * 4 + best],
               qz = vecs[3 * 4 + best];
  const double R[9] = {
      1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qw * qz),     2 * (qx * qz + qw * qy),
      2 * (qx * qy + qw * qz),     1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qw * qx),
      2 * (qx * qz - qw * qy),     2 * (qy * qz + qw * qx),     1 - 2 * (qx * qx + qy * qy)};

  double num = 0.0, den = 0.0;
  for (int i = 0; i < n; ++i) {
    double rx[3] = {0, 0, 0};
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) rx[a] += R[a * 3 + b] * X.at(i, b);
    }
    for (int a = 0; a < 3; ++a) {
      num += Y.at(i, a) * rx[a];
      den += X.at(i, a) * X.at(i, a);
    }
  }
  const double scale = num / den;

  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    double rx[3] = {0, 0, 0};
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) rx[a] += R[a * 3 + b] * X.at(i, b);
    }
    double d = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double u = Y.at(i, a) - scale * rx[a];
      d += u * u;
    }
    acc += std::sqrt(d);
  }
  return acc / n * 1000.0;
}

// Mean per-vertex error, in millimeters.
inline double mpve(const Tensor& pred_mesh, const Tensor& gt_mesh) {
  detail::require_points3(pred_mesh, "mpve");
  detail::require_points3(gt_mesh, "mpve");
  if (pred_mesh.rows() != gt_mesh.rows()) {
    throw ShapeError("mpve: vertex counts differ, " + pred_mesh.shape_str() + " vs " +
                     gt_mesh.shape_str());
  }
  double acc = 0.0;
  for (int v = 0; v < gt_mesh.rows(); ++v) {
    double d = 0.0;
    for (int c = 0; c < 3; ++c) {
      const double u = pred_mesh.at(v, c) - gt_mesh.at(v, c);
      d += u * u;
    }
    acc += std::sqrt(d);
  }
  return acc / gt_mesh.rows() * 1000.0;
}

struct ExampleMetrics {
  double mpjpe_np = 0.0;
  double pampjpe_np = 0.0;
  double mpve_np = 0.0;
  double mpjpe_p = 0.0;
  double pampjpe_p = 0.0;
  double mpve_p = 0.0;
};

struct EvalReport {
  std::vector<ExampleMetrics> per_example;
  ExampleMetrics aggregate;
  std::string config_hash;
  std::string checkpoint_id;

  void finalize() {
    aggregate = ExampleMetrics{};
    const double n = static_cast<double>(per_example.size());
    for (const auto& m : per_example) {
      aggregate.mpjpe_np += m.mpjpe_np / n;
      aggregate.pampjpe_np += m.pampjpe_np / n;
      aggregate.mpve_np += m.mpve_np / n;
      aggregate.mpjpe_p += m.mpjpe_p / n;
      aggregate.pampjpe_p += m.pampjpe_p / n;
      aggregate.mpve_p += m.mpve_p / n;
    }
  }
};

// Reconstruct the parametric prediction by running the regressed (theta,
// beta) through the same deformation model that generated the data.
inline Tensor parametric_mesh(const SkinnedTemplate& tmpl, const Tensor& theta_flat,
                              const Tensor& beta) {
  const int ns = tmpl.body.joint_count();
  Tensor theta(ns, 3);
  for (int j = 0; j < ns; ++j) {
    for (int c = 0; c < 3; ++c) {
      double v = theta_flat.at(0, j * 3 + c);
      // The deformation model only accepts angles up to pi.
      v = std::max(-3.14159265358979323846, std::min(3.14159265358979323846, v));
      theta.at(j, c) = v;
    }
  }
  auto [vm, vs] = pose_template(tmpl, theta, beta);
  return vm;
}

// Inference-mode evaluation over a pool: detector (noisy) 2D joints as
// input, non-parametric metrics from the network mesh, parametric metrics
// from the reconstructed (theta, beta) mesh.
inline EvalReport evaluate_pool(const BilayerNetwork& net, const SkinnedTemplate& tmpl,
                                const std::vector<SyntheticExample>& pool) {
  EvalReport report;
  report.config_hash = config_hash(net.config());
  for (const auto& ex : pool) {
    Tape tape;
    ModelInputs in;
    in.global_feat = ex.global_feat;
    in.local_feats = ex.local_feats;
    in.joints_2d = ex.joints2d_noisy;
    NetworkOutput out = net.forward(tape, in, /*training=*/false);

    ExampleMetrics m;
    m.mpjpe_np = mpjpe(out.v_m_j3d, ex.v_s_gt);
    m.pampjpe_np = pa_mpjpe(out.v_m_j3d, ex.v_s_gt);
    m.mpve_np = mpve(out.v_m_hat, ex.v_m_gt);

    Tensor vm_p = parametric_mesh(tmpl, out.theta_hat, out.beta_hat);
    Tape scratch;
    Tensor vs_p = matmul(scratch, tmpl.regressor, vm_p);
    m.mpjpe_p = mpjpe(vs_p, ex.v_s_gt);
    m.pampjpe_p = pa_mpjpe(vs_p, ex.v_s_gt);
    m.mpve_p = mpve(vm_p, ex.v_m_gt);

    report.per_example.push_back(m);
  }
  report.finalize();
  return report;
}

inline void write_eval_csv(const EvalReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("write_eval_csv: cannot open " + path + " for writing");
  out << "example,mpjpe_np,pampjpe_np,mpve_np,mpjpe_p,pampjpe_p,mpve_p\n";
  char buf[220];
  for (std::size_t i = 0; i < report.per_example.size(); ++i) {
    const auto& m = report.per_example[i];
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", i, m.mpjpe_np,
                  m.pampjpe_np, m.mpve_np, m.mpjpe_p, m.pampjpe_p, m.mpve_p);
    out << buf << '\n';
  }
  const auto& a = report.aggregate;
  std::snprintf(buf, sizeof(buf), "mean,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", a.mpjpe_np,
                a.pampjpe_np, a.mpve_np, a.mpjpe_p, a.pampjpe_p, a.mpve_p);
  out << buf << '\n';
}

}  // namespace bilayer
