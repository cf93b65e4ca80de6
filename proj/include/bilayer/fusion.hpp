#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "bilayer/errors.hpp"
#include "bilayer/graph.hpp"
#include "bilayer/layers.hpp"
#include "bilayer/tensor.hpp"

namespace bilayer {

// Trainable fusion graph. The static part holds raw reciprocal joint-vertex
// distances with structurally-zero joint-joint and vertex-vertex blocks;
// W_f is the trainable mask, initialized to 1 at joint-vertex positions.
// The effective adjacency RowNorm(static ⊙ max(W_f, 0)) is recomputed per
// forward pass; gradient reaches W_f only at masked-in positions.
struct FusionAdjacency {
  GraphTopology static_part;
  Tensor w_f;
  Tensor structural_mask;
  int n_joints = 0;
  int n_vertices = 0;
  std::shared_ptr<std::int64_t> negative_clamps = std::make_shared<std::int64_t>(0);

  FusionAdjacency() = default;

  FusionAdjacency(const TemplateBody& body, Warnings* warnings = nullptr)
      : static_part(build_fusion_static(body, warnings)),
        n_joints(body.joint_count()),
        n_vertices(body.mesh_count()) {
    const int n = static_part.n;
    structural_mask = Tensor(n, n);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        structural_mask.at(i, j) = static_part.adjacency.at(i, j) > 0.0 ? 1.0 : 0.0;
      }
    }
    w_f = structural_mask.clone();
    w_f.set_requires_grad(true);
  }

  int size() const { return static_part.n; }

  // RowNorm(static ⊙ clamp(W_f)). Rows without support stay zero.
  Tensor effective(Tape& tape) const {
    const int n = size();
    if (w_f.rows() != n || w_f.cols() != n) {
      throw ShapeError("FusionAdjacency: W_f " + w_f.shape_str() +
                       " does not match static part of " + std::to_string(n) + " nodes");
    }
    Tensor out(n, n, w_f.requires_grad());
    auto row_sum = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n), 0.0);
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      for (int j = 0; j < n; ++j) {
        double w = w_f.at(i, j);
        if (w < 0.0) {
          if (static_part.adjacency.at(i, j) > 0.0) ++(*negative_clamps);
          w = 0.0;
        }
        const double m = static_part.adjacency.at(i, j) * w;
        out.at(i, j) = m;
        s += m;
      }
      (*row_sum)[static_cast<std::size_t>(i)] = s;
      if (s > 0.0) {
        for (int j = 0; j < n; ++j) out.at(i, j) /= s;
      }
    }
    if (out.requires_grad()) {
      Tensor w = w_f;
      Tensor stat = static_part.adjacency;
      tape.record([w, stat, out, row_sum]() mutable {
        const int n = out.rows();
        for (int i = 0; i < n; ++i) {
          const double s = (*row_sum)[static_cast<std::size_t>(i)];
          if (s <= 0.0) continue;
          double dot = 0.0;
          for (int j = 0; j < n; ++j) dot += out.grad_at(i, j) * out.at(i, j);
          for (int j = 0; j < n; ++j) {
            if (w.at(i, j) <= 0.0) continue;  // clamped or masked-out
            const double dm = (out.grad_at(i, j) - dot) / s;
            w.grad_at(i, j) += dm * stat.at(i, j);
          }
        }
      });
    }
    return out;
  }

  void params(std::vector<NamedParam>& out, const std::string& prefix) const {
    collect_param(out, prefix + ".W_f", w_f);
  }
};

enum class FusionPlacement { pre, post };
enum class FusionVariant { graph, avgpool, maxpool };

inline std::string fusion_variant_name(FusionVariant v) {
  switch (v) {
    case FusionVariant::graph: return "graph";
    case FusionVariant::avgpool: return "avgpool";
    case FusionVariant::maxpool: return "maxpool";
  }
  return "?";
}

// Pooling stand-in for the fusion graph: every receiver gets one identical
// pooled feature from the opposite branch.
inline std::pair<Tensor, Tensor> pool_fusion(Tape& tape, FusionVariant kind, Tensor x_s,
                                             Tensor x_m) {
  if (x_s.cols() != x_m.cols()) {
    throw ShapeError("pool_fusion: branch widths differ, " + x_s.shape_str() + " vs " +
                     x_m.shape_str());
  }
  Tensor pooled_m, pooled_s;
  if (kind == FusionVariant::avgpool) {
    pooled_m = mean_rows(tape, x_m);
    pooled_s = mean_rows(tape, x_s);
  } else if (kind == FusionVariant::maxpool) {
    pooled_m = max_rows(tape, x_m);
    pooled_s = max_rows(tape, x_s);
  } else {
    throw ConfigError("pool_fusion: not a pooling variant");
  }
  Tensor delta_s = repeat_row(tape, pooled_m, x_s.rows());
  Tensor delta_m = repeat_row(tape, pooled_s, x_m.rows());
  return {delta_s, delta_m};
}

// One direction of the fusion exchange, GRB-structured but without the
// input skip (the caller adds the delta back to its branch).
struct FusionTransform {
  GraphLinear lin_in;
  GraphConv conv;
  GraphLinear lin_out;
  GroupNormParams gn1;
  GroupNormParams gn2;

  FusionTransform() = default;

  FusionTransform(int d, std::uint64_t seed, const std::string& name) {
    if (d % 2 != 0) {
      throw ConfigError("FusionTransform: width " + std::to_string(d) + " must be even");
    }
    const int h = d / 2;
    lin_in = GraphLinear(d, h, seed, name + ".lin_in");
    conv = GraphConv(h, h, seed, name + ".conv");
    lin_out = GraphLinear(h, d, seed, name + ".lin_out");
    gn1 = GroupNormParams(h);
    gn2 = GroupNormParams(h);
  }

  // adjacency: receivers x senders block of the effective fusion graph.
  Tensor forward(Tape& tape, Tensor adjacency, Tensor x_src) const {
    Tensor h = lin_in.forward(tape, x_src);
    h = relu(tape, gn1.forward(tape, h));
    h = conv.forward(tape, adjacency, h);
    h = relu(tape, gn2.forward(tape, h));
    return lin_out.forward(tape, h);
  }

  void params(std::vector<NamedParam>& out, const std::string& prefix) const {
    lin_in.params(out, prefix + ".lin_in");
    gn1.params(out, prefix + ".gn1");
    conv.params(out, prefix + ".conv");
    gn2.params(out, prefix + ".gn2");
    lin_out.params(out, prefix + ".lin_out");
  }

  std::size_t param_count() const {
    return lin_in.param_count() + conv.param_count() + lin_out.param_count() +
           gn1.param_count() + gn2.param_count();
  }
};

// The bidirectional fusion exchange: two directional transforms sharing one
// fusion adjacency. delta_m is propagated from skeleton features, delta_s
// from mesh features; zero diagonal blocks make the flow strictly bipartite.
struct FusionBlock {
  FusionTransform to_mesh;      // s -> m
  FusionTransform to_skeleton;  // m -> s
  FusionVariant variant = FusionVariant::graph;
  FusionPlacement placement = FusionPlacement::pre;

  FusionBlock() = default;

  FusionBlock(int d, std::uint64_t seed, const std::string& name,
              FusionVariant v = FusionVariant::graph,
              FusionPlacement p = FusionPlacement::pre)
      : variant(v), placement(p) {
    if (variant == FusionVariant::graph) {
      to_mesh = FusionTransform(d, seed, name + ".to_mesh");
      to_skeleton = FusionTransform(d, seed, name + ".to_skeleton");
    }
  }

  // effective_adjacency: full (N_s+N_m)^2 normalized fusion matrix.
  std::pair<Tensor, Tensor> step(Tape& tape, Tensor effective_adjacency, int n_joints,
                                 Tensor x_s, Tensor x_m) const {
    if (x_s.cols() != x_m.cols()) {
      throw ShapeError("fusion_step: branch widths differ, " + x_s.shape_str() + " vs " +
                       x_m.shape_str());
    }
    if (variant != FusionVariant::graph) {
      return pool_fusion(tape, variant, x_s, x_m);
    }
    const int ns = n_joints;
    const int n = effective_adjacency.rows();
    Tensor a_to_mesh = slice(tape, effective_adjacency, ns, n, 0, ns);  // N_m x N_s
    Tensor a_to_skel = slice(tape, effective_adjacency, 0, ns, ns, n);  // N_s x N_m
    Tensor delta_m = to_mesh.forward(tape, a_to_mesh, x_s);
    Tensor delta_s = to_skeleton.forward(tape, a_to_skel, x_m);
    return {delta_s, delta_m};
  }

  void params(std::vector<NamedParam>& out, const std::string& prefix) const {
    if (variant == FusionVariant::graph) {
      to_mesh.params(out, prefix + ".to_mesh");
      to_skeleton.params(out, prefix + ".to_skeleton");
    }
  }

  std::size_t param_count() const {
    return variant == FusionVariant::graph
               ? to_mesh.param_count() + to_skeleton.param_count()
               : 0;
  }
};

}  // namespace bilayer
