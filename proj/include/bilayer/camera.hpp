#pragma once

#include <cmath>

#include "bilayer/errors.hpp"
#include "bilayer/tensor.hpp"

namespace bilayer {

// Weak perspective camera: p2d = s * (x, y) + t.
struct CameraParams {
  double s = 1.0;
  double tx = 0.0;
  double ty = 0.0;

  bool finite() const {
    return std::isfinite(s) && std::isfinite(tx) && std::isfinite(ty);
  }
};

inline Tensor project_weak_perspective(const Tensor& points3d, const CameraParams& cam) {
  if (points3d.cols() != 3) {
    throw ShapeError("project_weak_perspective: expected k x 3 points, got " +
                     points3d.shape_str());
  }
  Tensor out(points3d.rows(), 2);
  for (int i = 0; i < points3d.rows(); ++i) {
    out.at(i, 0) = cam.s * points3d.at(i, 0) + cam.tx;
    out.at(i, 1) = cam.s * points3d.at(i, 1) + cam.ty;
  }
  return out;
}

// Differentiable projection against a 1x3 (s, tx, ty) camera tensor.
inline Tensor project_weak(Tape& tape, Tensor points3d, Tensor cam) {
  if (points3d.cols() != 3) {
    throw ShapeError("project_weak: expected k x 3 points, got " + points3d.shape_str());
  }
  if (cam.rows() != 1 || cam.cols() != 3) {
    throw ShapeError("project_weak: camera must be 1x3, got " + cam.shape_str());
  }
  const int k = points3d.rows();
  Tensor out(k, 2, detail::wants_grad(points3d, cam));
  const double s = cam.at(0, 0), tx = cam.at(0, 1), ty = cam.at(0, 2);
  for (int i = 0; i < k; ++i) {
    out.at(i, 0) = s * points3d.at(i, 0) + tx;
    out.at(i, 1) = s * points3d.at(i, 1) + ty;
  }
  if (out.requires_grad()) {
    tape.record([points3d, cam, out]() mutable {
      const int k = points3d.rows();
      const double s = cam.at(0, 0);
      for (int i = 0; i < k; ++i) {
        const double gx = out.grad_at(i, 0);
        const double gy = out.grad_at(i, 1);
        if (points3d.requires_grad()) {
          points3d.grad_at(i, 0) += s * gx;
          points3d.grad_at(i, 1) += s * gy;
        }
        if (cam.requires_grad()) {
          cam.grad_at(0, 0) += gx * points3d.at(i, 0) + gy * points3d.at(i, 1);
          cam.grad_at(0, 1) += gx;
          cam.grad_at(0, 2) += gy;
        }
      }
    });
  }
  return out;
}

}  // namespace bilayer
