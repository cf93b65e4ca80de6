#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "bilayer/camera.hpp"
#include "bilayer/config.hpp"
#include "bilayer/errors.hpp"
#include "bilayer/fusion.hpp"
#include "bilayer/graph.hpp"
#include "bilayer/layers.hpp"
#include "bilayer/synthdata.hpp"
#include "bilayer/tensor.hpp"

namespace bilayer {

// Camera regression from intermediate mesh features: graph linear ->
// variant-specific normalization/activation -> node mean pool -> fully
// connected to (s, tx, ty). The plain-ReLU variant reproduces the dead-zone
// failure mode; BatchNorm (over nodes) or LeakyReLU keep gradients alive.
struct CameraHead {
  GraphLinear lin;
  GraphLinear fc;
  Tensor bn_gamma;
  Tensor bn_beta;
  std::shared_ptr<RunningStats> bn_stats;
  std::string variant = "relu_bn";
  int hidden = 0;

  CameraHead() = default;

  CameraHead(int d_in, std::uint64_t seed, const std::string& name,
             const std::string& variant_in)
      : variant(variant_in) {
    hidden = d_in / 2;
    lin = GraphLinear(d_in, hidden, seed, name + ".lin");
    fc = GraphLinear(hidden, 3, seed, name + ".fc");
    fc.b.at(0, 0) = 1.0;  // start at unit scale, centered
    bn_gamma = Tensor::full(1, hidden, 1.0);
    bn_gamma.set_requires_grad(true);
    bn_beta = Tensor(1, hidden, true);
    bn_stats = std::make_shared<RunningStats>(hidden);
  }

  Tensor forward(Tape& tape, Tensor mesh_feats, bool training) const {
    Tensor y = lin.forward(tape, mesh_feats);
    if (variant == "relu_bn") {
      y = batch_norm_1d(tape, y, bn_gamma, bn_beta, *bn_stats, training);
      y = relu(tape, y);
    } else if (variant == "leaky_relu") {
      y = leaky_relu(tape, y, 0.01);
    } else {
      y = relu(tape, y);
    }
    Tensor pooled = mean_rows(tape, y);
    return fc.forward(tape, pooled);  // 1x3
  }

  void params(std::vector<NamedParam>& out, const std::string& prefix) const {
    lin.params(out, prefix + ".lin");
    if (variant == "relu_bn") {
      collect_param(out, prefix + ".bn.gamma", bn_gamma);
      collect_param(out, prefix + ".bn.beta", bn_beta);
    }
    fc.params(out, prefix + ".fc");
  }

  void buffers(std::vector<NamedParam>& out, const std::string& prefix) const {
    if (variant == "relu_bn") {
      collect_param(out, prefix + ".bn.running_mean", bn_stats->mean);
      collect_param(out, prefix + ".bn.running_var", bn_stats->var);
    }
  }
};

// Two-layer perceptron over the flattened predicted mesh, regressing the
// parametric pose (axis-angle per joint) and shape vectors.
struct ParamHead {
  GraphLinear fc1;
  GraphLinear fc2;
  int n_joints = 0;

  ParamHead() = default;

  ParamHead(int n_mesh, int n_joints_in, int hidden, std::uint64_t seed,
            const std::string& name)
      : n_joints(n_joints_in) {
    fc1 = GraphLinear(3 * n_mesh, hidden, seed, name + ".fc1");
    fc2 = GraphLinear(hidden, 3 * n_joints + 10, seed, name + ".fc2");
  }

  std::pair<Tensor, Tensor> forward(Tape& tape, Tensor v_m_hat) const {
    Tensor flat = reshape(tape, v_m_hat, 1, v_m_hat.rows() * 3);
    Tensor h = relu(tape, fc1.forward(tape, flat));
    Tensor out = fc2.forward(tape, h);
    Tensor theta = slice(tape, out, 0, 1, 0, 3 * n_joints);
    Tensor beta = slice(tape, out, 0, 1, 3 * n_joints, 3 * n_joints + 10);
    return {theta, beta};
  }

  void params(std::vector<NamedParam>& out, const std::string& prefix) const {
    fc1.params(out, prefix + ".fc1");
    fc2.params(out, prefix + ".fc2");
  }
};

// Coordinate regression head: the first graph linear is followed by group
// normalization and ReLU, the second maps to xyz.
struct RegressionHead {
  GraphLinear lin1;
  GroupNormParams gn;
  GraphLinear lin2;

  RegressionHead() = default;

  RegressionHead(int d_in, int hidden, std::uint64_t seed, const std::string& name) {
    lin1 = GraphLinear(d_in, hidden, seed, name + ".lin1");
    gn = GroupNormParams(hidden);
    lin2 = GraphLinear(hidden, 3, seed, name + ".lin2");
  }

  Tensor forward(Tape& tape, Tensor x) const {
    Tensor y = relu(tape, gn.forward(tape, lin1.forward(tape, x)));
    return lin2.forward(tape, y);
  }

  void params(std::vector<NamedParam>& out, const std::string& prefix) const {
    lin1.params(out, prefix + ".lin1");
    gn.params(out, prefix + ".gn");
    lin2.params(out, prefix + ".lin2");
  }
};

struct ModelInputs {
  Tensor global_feat;  // 1 x D_g
  Tensor local_feats;  // N_s x D_l
  Tensor joints_2d;    // N_s x 2, normalized image coordinates
};

struct NetworkOutput {
  Tensor v_s_hat;   // N_s x 3 (invalid when the skeleton branch is off)
  Tensor v_m_hat;   // N_m x 3
  Tensor v_m_j3d;   // N_s x 3, regressed from the mesh
  Tensor cam;       // 1 x 3 (s, tx, ty)
  Tensor theta_hat; // 1 x 3 N_s
  Tensor beta_hat;  // 1 x 10
  bool has_skeleton = true;

  CameraParams camera() const {
    CameraParams c;
    c.s = cam.at(0, 0);
    c.tx = cam.at(0, 1);
    c.ty = cam.at(0, 2);
    return c;
  }
};

// The assembled network: input embeddings, stacked bilayer blocks
// (skeleton GRB + mesh GRB + fusion exchange), coordinate heads, camera
// head and parametric head. The trainable fusion adjacency is shared by
// all blocks.
class BilayerNetwork {
 public:
  BilayerNetwork(const SkinnedTemplate& tmpl, const Config& cfg)
      : cfg_(cfg), template_(tmpl) {
    validate_config(cfg);
    const int ns = tmpl.body.joint_count();
    const int nm = tmpl.body.mesh_count();
    if (ns != cfg.n_joints) {
      throw ConfigError("BilayerNetwork: template has " + std::to_string(ns) +
                        " joints but config expects " + std::to_string(cfg.n_joints));
    }
    a_s_ = build_skeleton_adjacency(tmpl.body, true);
    a_m_ = build_mesh_adjacency(tmpl.body, true);
    regressor_ = tmpl.regressor;
    template_coords_ = tmpl.body.mesh_vertices;

    const std::uint64_t seed = cfg.seed;
    const int d0 = cfg.d0;
    mesh_embed_ = GraphLinear(3 + cfg.dg, d0, seed, "mesh_embed");
    if (cfg.skeleton_branch) {
      const int skel_in = 2 + (cfg.use_local_feats ? cfg.dl : cfg.dg);
      skel_embed_ = GraphLinear(skel_in, d0, seed, "skel_embed");
    }

    fusion_active_.assign(static_cast<std::size_t>(cfg.blocks), false);
    const bool any_fusion = cfg.skeleton_branch && cfg.fusion_variant != "none";
    if (any_fusion) {
      for (int i = 0; i < cfg.blocks; ++i) {
        if (cfg.fusion_blocks == "all" || (cfg.fusion_blocks == "first" && i == 0) ||
            (cfg.fusion_blocks == "last" && i == cfg.blocks - 1)) {
          fusion_active_[static_cast<std::size_t>(i)] = true;
        }
      }
    }
    const FusionVariant fv = cfg.fusion_variant == "avgpool"  ? FusionVariant::avgpool
                             : cfg.fusion_variant == "maxpool" ? FusionVariant::maxpool
                                                               : FusionVariant::graph;
    const FusionPlacement fp =
        cfg.fusion_placement == "post" ? FusionPlacement::post : FusionPlacement::pre;

    bool needs_w_f = false;
    for (int i = 0; i < cfg.blocks; ++i) {
      Block blk;
      if (cfg.share_branch_weights && cfg.skeleton_branch) {
        GraphResidualBlock shared(d0, seed, "blocks." + std::to_string(i) + ".grb");
        blk.mesh_grb = shared;
        blk.skel_grb = shared;  // same parameter storage
      } else {
        blk.mesh_grb = GraphResidualBlock(d0, seed, "blocks." + std::to_string(i) + ".mesh_grb");
        if (cfg.skeleton_branch) {
          blk.skel_grb =
              GraphResidualBlock(d0, seed, "blocks." + std::to_string(i) + ".skeleton_grb");
        }
      }
      if (fusion_active_[static_cast<std::size_t>(i)]) {
        if (cfg.share_fusion_weights && shared_fusion_) {
          blk.fusion = *shared_fusion_;
        } else {
          const std::string fname = cfg.share_fusion_weights
                                        ? "fusion_shared"
                                        : "blocks." + std::to_string(i) + ".fusion";
          blk.fusion = FusionBlock(d0, seed, fname, fv, fp);
          if (cfg.share_fusion_weights) {
            shared_fusion_ = std::make_unique<FusionBlock>(blk.fusion);
          }
        }
        needs_w_f = needs_w_f || fv == FusionVariant::graph;
      }
      blocks_.push_back(std::move(blk));
    }
    if (needs_w_f) {
      fusion_adj_ = FusionAdjacency(tmpl.body);
    }

    const int head_hidden = cfg.head_hidden > 0 ? cfg.head_hidden : d0 / 2;
    head_m_ = RegressionHead(d0, head_hidden, seed, "head_m");
    if (cfg.skeleton_branch) head_s_ = RegressionHead(d0, head_hidden, seed, "head_s");
    camera_head_ = CameraHead(d0, seed, "camera_head", cfg.camera_variant);
    param_head_ = ParamHead(nm, ns, cfg.param_head_hidden, seed, "param_head");
  }

  const Config& config() const { return cfg_; }
  const SkinnedTemplate& body_template() const { return template_; }
  const GraphTopology& skeleton_graph() const { return a_s_; }
  const GraphTopology& mesh_graph() const { return a_m_; }
  bool has_fusion_adjacency() const { return fusion_adj_.size() > 0; }
  const FusionAdjacency& fusion_adjacency() const { return fusion_adj_; }
  FusionAdjacency& fusion_adjacency() { return fusion_adj_; }

  // Spec'd input embedding: mesh nodes embed [template xyz ; global
  // feature], joints embed [2d position ; local feature] (or the global
  // feature in the global-feature ablation).
  std::pair<Tensor, Tensor> embed_inputs(Tape& tape, const ModelInputs& in) const {
    const int nm = template_coords_.rows();
    const int ns = a_s_.n;
    if (in.global_feat.rows() != 1 || in.global_feat.cols() != cfg_.dg) {
      throw ShapeError("embed_inputs: global feature must be 1x" + std::to_string(cfg_.dg) +
                       ", got " + in.global_feat.shape_str());
    }
    Tensor mesh_in =
        concat_cols(tape, template_coords_, repeat_row(tape, in.global_feat, nm));
    Tensor x_m = mesh_embed_.forward(tape, mesh_in);
    Tensor x_s;
    if (cfg_.skeleton_branch) {
      if (in.joints_2d.rows() != ns || in.joints_2d.cols() != 2) {
        throw ShapeError("embed_inputs: joints_2d must be " + std::to_string(ns) +
                         "x2, got " + in.joints_2d.shape_str());
      }
      Tensor skel_feat;
      if (cfg_.use_local_feats) {
        if (in.local_feats.rows() != ns || in.local_feats.cols() != cfg_.dl) {
          throw ShapeError("embed_inputs: local features must be " + std::to_string(ns) +
                           "x" + std::to_string(cfg_.dl) + ", got " +
                           in.local_feats.shape_str());
        }
        skel_feat = in.local_feats;
      } else {
        skel_feat = repeat_row(tape, in.global_feat, ns);
      }
      x_s = skel_embed_.forward(tape, concat_cols(tape, in.joints_2d, skel_feat));
    }
    return {x_s, x_m};
  }

  NetworkOutput forward(Tape& tape, const ModelInputs& in, bool training = false) const {
    auto [x_s, x_m] = embed_inputs(tape, in);

    Tensor eff;
    if (has_fusion_adjacency()) eff = fusion_adj_.effective(tape);

    Tensor camera_feats = x_m;
    const int cam_block = cfg_.camera_source_block >= 0 ? cfg_.camera_source_block
                                                        : cfg_.blocks - 1;
    for (int i = 0; i < cfg_.blocks; ++i) {
      const Block& blk = blocks_[static_cast<std::size_t>(i)];
      const bool fuse = fusion_active_[static_cast<std::size_t>(i)];
      if (fuse && blk.fusion.placement == FusionPlacement::pre) {
        auto [ds, dm] = fusion_deltas(tape, blk, eff, x_s, x_m);
        Tensor ym = blk.mesh_grb.forward(tape, a_m_.adjacency, x_m);
        x_m = add(tape, ym, dm);
        Tensor ys = blk.skel_grb.forward(tape, a_s_.adjacency, x_s);
        x_s = add(tape, ys, ds);
      } else {
        Tensor ym = blk.mesh_grb.forward(tape, a_m_.adjacency, x_m);
        Tensor ys;
        if (cfg_.skeleton_branch) ys = blk.skel_grb.forward(tape, a_s_.adjacency, x_s);
        if (fuse) {
          auto [ds, dm] = fusion_deltas(tape, blk, eff, ys, ym);
          ym = add(tape, ym, dm);
          ys = add(tape, ys, ds);
        }
        x_m = ym;
        x_s = ys;
      }
      if (!x_m.all_finite() || (cfg_.skeleton_branch && !x_s.all_finite())) {
        throw NumericalError("forward: non-finite activation in block " + std::to_string(i));
      }
      if (i == cam_block) camera_feats = x_m;
    }

    NetworkOutput out;
    out.has_skeleton = cfg_.skeleton_branch;
    // The mesh branch deforms the neutral template: the head regresses a
    // per-vertex displacement added to the template coordinates.
    out.v_m_hat = add(tape, head_m_.forward(tape, x_m), template_coords_);
    if (cfg_.skeleton_branch) out.v_s_hat = head_s_.forward(tape, x_s);
    out.cam = camera_head_.forward(tape, camera_feats, training);
    out.v_m_j3d = joint_regressor(tape, out.v_m_hat);
    auto [theta, beta] = param_head_.forward(tape, out.v_m_hat);
    out.theta_hat = theta;
    out.beta_hat = beta;
    return out;
  }

  Tensor joint_regressor(Tape& tape, Tensor v_m) const {
    return bilayer::matmul(tape, regressor_, v_m);
  }

  std::vector<NamedParam> parameters() const {
    std::vector<NamedParam> out;
    collect_param(out, "mesh_embed.W", mesh_embed_.W);
    collect_param(out, "mesh_embed.b", mesh_embed_.b);
    if (cfg_.skeleton_branch) {
      collect_param(out, "skel_embed.W", skel_embed_.W);
      collect_param(out, "skel_embed.b", skel_embed_.b);
    }
    for (int i = 0; i < cfg_.blocks; ++i) {
      const Block& blk = blocks_[static_cast<std::size_t>(i)];
      const std::string base = "blocks." + std::to_string(i);
      if (cfg_.share_branch_weights && cfg_.skeleton_branch) {
        blk.mesh_grb.params(out, base + ".grb");
      } else {
        blk.mesh_grb.params(out, base + ".mesh_grb");
        if (cfg_.skeleton_branch) blk.skel_grb.params(out, base + ".skeleton_grb");
      }
      if (fusion_active_[static_cast<std::size_t>(i)]) {
        blk.fusion.params(out, cfg_.share_fusion_weights ? "fusion_shared" : base + ".fusion");
      }
    }
    if (has_fusion_adjacency()) fusion_adj_.params(out, "fusion");
    head_m_.params(out, "head_m");
    if (cfg_.skeleton_branch) head_s_.params(out, "head_s");
    camera_head_.params(out, "camera_head");
    param_head_.params(out, "param_head");
    return out;
  }

  // Non-trainable state that still belongs in checkpoints.
  std::vector<NamedParam> buffers() const {
    std::vector<NamedParam> out;
    camera_head_.buffers(out, "camera_head");
    return out;
  }

  std::size_t count_parameters() const {
    std::size_t total = 0;
    for (const auto& p : parameters()) total += p.tensor.size();
    return total;
  }

  void zero_grad() const {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }

  const CameraHead& camera_head() const { return camera_head_; }
  CameraHead& camera_head() { return camera_head_; }
  const ParamHead& param_head() const { return param_head_; }
  const Tensor& regressor() const { return regressor_; }

 private:
  struct Block {
    GraphResidualBlock skel_grb;
    GraphResidualBlock mesh_grb;
    FusionBlock fusion;
  };

  std::pair<Tensor, Tensor> fusion_deltas(Tape& tape, const Block& blk, Tensor eff,
                                          Tensor x_s, Tensor x_m) const {
    if (blk.fusion.variant == FusionVariant::graph) {
      return blk.fusion.step(tape, eff, a_s_.n, x_s, x_m);
    }
    return blk.fusion.step(tape, Tensor(), a_s_.n, x_s, x_m);
  }

  Config cfg_;
  SkinnedTemplate template_;
  GraphTopology a_s_;
  GraphTopology a_m_;
  Tensor regressor_;
  Tensor template_coords_;
  GraphLinear mesh_embed_;
  GraphLinear skel_embed_;
  std::vector<Block> blocks_;
  std::vector<bool> fusion_active_;
  FusionAdjacency fusion_adj_;
  std::unique_ptr<FusionBlock> shared_fusion_;
  RegressionHead head_m_;
  RegressionHead head_s_;
  CameraHead camera_head_;
  ParamHead param_head_;
};

// Standalone joint regressor with the row-sum precondition from the spec.
inline Tensor apply_joint_regressor(const Tensor& regressor, const Tensor& v_m) {
  if (regressor.cols() != v_m.rows()) {
    throw ShapeError("joint_regressor: R " + regressor.shape_str() +
                     " incompatible with mesh " + v_m.shape_str());
  }
  for (int i = 0; i < regressor.rows(); ++i) {
    double s = 0.0;
    for (int j = 0; j < regressor.cols(); ++j) s += regressor.at(i, j);
    if (std::fabs(s - 1.0) > 1e-6) {
      throw InputError("joint_regressor: row " + std::to_string(i) + " sums to " +
                       std::to_string(s) + ", expected 1");
    }
  }
  Tape scratch;
  return matmul(scratch, regressor, v_m);
}

}  // namespace bilayer
