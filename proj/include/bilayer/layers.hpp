#pragma once

#include <string>
#include <utility>
#include <vector>

#include "bilayer/errors.hpp"
#include "bilayer/graph.hpp"
#include "bilayer/rng.hpp"
#include "bilayer/tensor.hpp"

namespace bilayer {

// Named trainable tensor; networks expose their parameters as flat lists
// of these. Shared parameters appear once (dedup by storage identity).
struct NamedParam {
  std::string name;
  Tensor tensor;
};

inline void collect_param(std::vector<NamedParam>& out, const std::string& name,
                          const Tensor& t) {
  for (const auto& p : out) {
    if (p.tensor.same_storage(t)) return;
  }
  out.push_back({name, t});
}

// Deterministic per-parameter init: the stream is keyed by the parameter
// name, so identical names produce identical values across model variants.
inline Rng init_rng(std::uint64_t seed, const std::string& param_name) {
  return Rng(seed, fnv1a(param_name));
}

// Group count policy: 8 groups for widths >= 32 (when divisible), else 1.
inline int groups_for_width(int width) {
  return (width >= 32 && width % 8 == 0) ? 8 : 1;
}

// Per-node affine map: x W + b. Equivalent to a graph convolution with an
// identity adjacency.
struct GraphLinear {
  Tensor W;  // d_in x d_out
  Tensor b;  // 1 x d_out

  GraphLinear() = default;

  GraphLinear(int d_in, int d_out, std::uint64_t seed, const std::string& name) {
    Rng rng = init_rng(seed, name);
    W = Tensor::xavier(d_in, d_out, rng);
    b = Tensor(1, d_out, true);
  }

  int in_width() const { return W.rows(); }
  int out_width() const { return W.cols(); }

  Tensor forward(Tape& tape, Tensor x) const {
    if (x.cols() != W.rows()) {
      throw ShapeError("GraphLinear: input " + x.shape_str() + " incompatible with weight " +
                       W.shape_str());
    }
    return add_rowvec(tape, matmul(tape, x, W), b);
  }

  void params(std::vector<NamedParam>& out, const std::string& prefix) const {
    collect_param(out, prefix + ".W", W);
    collect_param(out, prefix + ".b", b);
  }

  std::size_t param_count() const { return W.size() + b.size(); }
};

// Neighborhood-propagating map: (A x) W + b. The weight acts on features,
// so the same layer serves any node count; the adjacency may be a constant
// topology or a gradient-carrying tensor (trainable fusion graph).
struct GraphConv {
  Tensor W;
  Tensor b;

  GraphConv() = default;

  GraphConv(int d_in, int d_out, std::uint64_t seed, const std::string& name) {
    Rng rng = init_rng(seed, name);
    W = Tensor::xavier(d_in, d_out, rng);
    b = Tensor(1, d_out, true);
  }

  Tensor forward(Tape& tape, Tensor adjacency, Tensor x) const {
    if (adjacency.cols() != x.rows()) {
      throw ShapeError("GraphConv: adjacency " + adjacency.shape_str() +
                       " incompatible with features " + x.shape_str());
    }
    if (x.cols() != W.rows()) {
      throw ShapeError("GraphConv: input " + x.shape_str() + " incompatible with weight " +
                       W.shape_str());
    }
    return add_rowvec(tape, matmul(tape, matmul(tape, adjacency, x), W), b);
  }

  Tensor forward(Tape& tape, const GraphTopology& g, Tensor x) const {
    if (g.n != x.rows()) {
      throw ShapeError("GraphConv: topology of " + std::to_string(g.n) +
                       " nodes incompatible with features " + x.shape_str());
    }
    return forward(tape, g.adjacency, x);
  }

  void params(std::vector<NamedParam>& out, const std::string& prefix) const {
    collect_param(out, prefix + ".W", W);
    collect_param(out, prefix + ".b", b);
  }

  std::size_t param_count() const { return W.size() + b.size(); }
};

struct GroupNormParams {
  Tensor gamma;
  Tensor beta;
  int groups = 1;
  double eps = 1e-5;

  GroupNormParams() = default;

  explicit GroupNormParams(int width, int groups_in = 0)
      : gamma(Tensor::full(1, width, 1.0)), beta(Tensor(1, width)),
        groups(groups_in > 0 ? groups_in : groups_for_width(width)) {
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
  }

  Tensor forward(Tape& tape, Tensor x) const {
    return group_norm(tape, x, groups, eps, gamma, beta);
  }

  void params(std::vector<NamedParam>& out, const std::string& prefix) const {
    collect_param(out, prefix + ".gamma", gamma);
    collect_param(out, prefix + ".beta", beta);
  }

  std::size_t param_count() const { return gamma.size() + beta.size(); }
};

// Bottleneck residual unit on a graph:
//   lin_in (d -> d/2) -> GN -> ReLU -> conv (d/2 -> d/2) -> GN -> ReLU
//   -> lin_out (d/2 -> d), plus the input skip.
struct GraphResidualBlock {
  GraphLinear lin_in;
  GraphConv conv;
  GraphLinear lin_out;
  GroupNormParams gn1;
  GroupNormParams gn2;
  int width = 0;

  GraphResidualBlock() = default;

  GraphResidualBlock(int d, std::uint64_t seed, const std::string& name) {
    if (d % 2 != 0) {
      throw ConfigError("GraphResidualBlock: width " + std::to_string(d) +
                        " must be even for the bottleneck");
    }
    width = d;
    const int h = d / 2;
    lin_in = GraphLinear(d, h, seed, name + ".lin_in");
    conv = GraphConv(h, h, seed, name + ".conv");
    lin_out = GraphLinear(h, d, seed, name + ".lin_out");
    gn1 = GroupNormParams(h);
    gn2 = GroupNormParams(h);
  }

  Tensor forward(Tape& tape, Tensor adjacency, Tensor x) const {
    Tensor y = lin_in.forward(tape, x);
    y = relu(tape, gn1.forward(tape, y));
    y = conv.forward(tape, adjacency, y);
    y = relu(tape, gn2.forward(tape, y));
    y = lin_out.forward(tape, y);
    return add(tape, y, x);
  }

  Tensor forward(Tape& tape, const GraphTopology& g, Tensor x) const {
    return forward(tape, g.adjacency, x);
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

// Closed form for the parameter count of a width-d GRB.
inline std::size_t grb_param_count(int d) {
  const std::size_t h = static_cast<std::size_t>(d) / 2;
  return (d * h + h) + (h * h + h) + (h * d + d) + 4 * h;
}

}  // namespace bilayer
