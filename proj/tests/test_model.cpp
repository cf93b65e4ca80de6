#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "bilayer/grad_check.hpp"
#include "bilayer/losses.hpp"
#include "bilayer/model.hpp"
#include "bilayer/synthdata.hpp"
#include "test_support.hpp"

using namespace bilayer;
using testsup::bit_equal;
using testsup::random_tensor;

namespace {

SkinnedTemplate micro_template(int joints = 4) {
  return make_template_from(make_icosphere(0), stick_skeleton(joints), 0.2);
}

Config micro_config(int joints = 4) {
  Config cfg;
  cfg.n_joints = joints;
  cfg.d0 = 8;
  cfg.dg = 6;
  cfg.dl = 5;
  cfg.blocks = 2;
  cfg.param_head_hidden = 16;
  cfg.seed = 21;
  return cfg;
}

ModelInputs random_inputs(const Config& cfg, Rng& rng) {
  ModelInputs in;
  in.global_feat = testsup::random_tensor(1, cfg.dg, rng);
  in.local_feats = testsup::random_tensor(cfg.n_joints, cfg.dl, rng);
  in.joints_2d = testsup::random_tensor(cfg.n_joints, 2, rng, -0.8, 0.8);
  return in;
}

}  // namespace

TEST_CASE("embed_inputs") {
  SkinnedTemplate tmpl = micro_template();
  Config cfg = micro_config();
  BilayerNetwork net(tmpl, cfg);
  Rng rng(3);

  SECTION("widths land at d0 regardless of feature widths") {
    Tape t;
    ModelInputs in = random_inputs(cfg, rng);
    auto [x_s, x_m] = net.embed_inputs(t, in);
    CHECK(x_m.rows() == 12);
    CHECK(x_m.cols() == cfg.d0);
    CHECK(x_s.rows() == 4);
    CHECK(x_s.cols() == cfg.d0);
  }

  SECTION("identical vertices with identical global feature embed identically") {
    SkinnedTemplate dup = tmpl;
    for (int c = 0; c < 3; ++c) dup.body.mesh_vertices.at(1, c) = dup.body.mesh_vertices.at(0, c);
    BilayerNetwork net2(dup, cfg);
    Tape t;
    ModelInputs in = random_inputs(cfg, rng);
    auto [x_s, x_m] = net2.embed_inputs(t, in);
    for (int c = 0; c < cfg.d0; ++c) CHECK(x_m.at(0, c) == x_m.at(1, c));
  }

  SECTION("zero features with zero bias leave only the coordinate part") {
    BilayerNetwork net2(tmpl, cfg);
    Tape t;
    ModelInputs in;
    in.global_feat = Tensor(1, cfg.dg);
    in.local_feats = Tensor(4, cfg.dl);
    in.joints_2d = Tensor(4, 2);
    auto [x_s, x_m] = net2.embed_inputs(t, in);
    // Reconstruct from the coordinate block of the embedding weights.
    std::vector<NamedParam> params;
    for (const auto& p : net2.parameters()) {
      if (p.name == "mesh_embed.W") params.push_back(p);
    }
    REQUIRE(params.size() == 1);
    const Tensor& W = params[0].tensor;
    for (int v = 0; v < 12; ++v) {
      for (int o = 0; o < cfg.d0; ++o) {
        double acc = 0.0;
        for (int c = 0; c < 3; ++c) acc += tmpl.body.mesh_vertices.at(v, c) * W.at(c, o);
        CHECK(std::fabs(x_m.at(v, o) - acc) <= 1e-15);
      }
    }
  }

  SECTION("width mismatches are rejected") {
    Tape t;
    ModelInputs in = random_inputs(cfg, rng);
    in.global_feat = Tensor(1, cfg.dg + 1);
    REQUIRE_THROWS_AS(net.embed_inputs(t, in), ShapeError);
  }
}

TEST_CASE("forward pass basics") {
  SkinnedTemplate tmpl = micro_template();
  Config cfg = micro_config();
  BilayerNetwork net(tmpl, cfg);
  Rng rng(5);
  ModelInputs in = random_inputs(cfg, rng);

  SECTION("deterministic outputs") {
    Tape t1, t2;
    NetworkOutput o1 = net.forward(t1, in);
    NetworkOutput o2 = net.forward(t2, in);
    CHECK(bit_equal(o1.v_m_hat, o2.v_m_hat));
    CHECK(bit_equal(o1.v_s_hat, o2.v_s_hat));
    CHECK(bit_equal(o1.cam, o2.cam));
    CHECK(bit_equal(o1.theta_hat, o2.theta_hat));
  }

  SECTION("output shapes") {
    Tape t;
    NetworkOutput out = net.forward(t, in);
    CHECK(out.v_m_hat.rows() == 12);
    CHECK(out.v_m_hat.cols() == 3);
    CHECK(out.v_s_hat.rows() == 4);
    CHECK(out.v_m_j3d.rows() == 4);
    CHECK(out.cam.cols() == 3);
    CHECK(out.theta_hat.cols() == 12);  // 3 * 4 joints
    CHECK(out.beta_hat.cols() == 10);
  }

  SECTION("camera parameters do not affect 3D outputs") {
    Tape t1;
    NetworkOutput before = net.forward(t1, in);
    net.camera_head().fc.b.at(0, 1) += 3.5;
    Tape t2;
    NetworkOutput after = net.forward(t2, in);
    CHECK(bit_equal(before.v_m_hat, after.v_m_hat));
    CHECK(bit_equal(before.v_s_hat, after.v_s_hat));
    CHECK_FALSE(bit_equal(before.cam, after.cam));
  }
}

TEST_CASE("mesh permutation equivariance of the full network") {
  SkinnedTemplate tmpl = micro_template();
  Config cfg = micro_config();
  BilayerNetwork net(tmpl, cfg);
  Rng rng(7);
  ModelInputs in = random_inputs(cfg, rng);
  Tape t0;
  NetworkOutput base = net.forward(t0, in);

  const int nm = 12, ns = 4;
  std::vector<int> perm(nm);
  for (int i = 0; i < nm; ++i) perm[i] = (i * 7 + 4) % nm;

  SkinnedTemplate pt = tmpl;
  pt.body.mesh_vertices = Tensor(nm, 3);
  for (int v = 0; v < nm; ++v) {
    for (int c = 0; c < 3; ++c) pt.body.mesh_vertices.at(perm[v], c) = tmpl.body.mesh_vertices.at(v, c);
  }
  pt.body.mesh_edges.clear();
  for (auto [u, v] : tmpl.body.mesh_edges) pt.body.mesh_edges.emplace_back(perm[u], perm[v]);
  pt.skinning = Tensor(nm, ns);
  pt.regressor = Tensor(ns, nm);
  for (int v = 0; v < nm; ++v) {
    for (int j = 0; j < ns; ++j) {
      pt.skinning.at(perm[v], j) = tmpl.skinning.at(v, j);
      pt.regressor.at(j, perm[v]) = tmpl.regressor.at(j, v);
    }
  }

  BilayerNetwork pnet(pt, cfg);
  // Permute the fusion mask rows/cols for mesh nodes (joints keep index).
  for (int a = 0; a < ns + nm; ++a) {
    for (int b = 0; b < ns + nm; ++b) {
      int pa = a < ns ? a : ns + perm[a - ns];
      int pb = b < ns ? b : ns + perm[b - ns];
      pnet.fusion_adjacency().w_f.at(pa, pb) = net.fusion_adjacency().w_f.at(a, b);
    }
  }
  Tape t1;
  NetworkOutput pout = pnet.forward(t1, in);
  for (int v = 0; v < nm; ++v) {
    for (int c = 0; c < 3; ++c) {
      CHECK(std::fabs(pout.v_m_hat.at(perm[v], c) - base.v_m_hat.at(v, c)) <= 1e-10);
    }
  }
  for (int j = 0; j < ns; ++j) {
    for (int c = 0; c < 3; ++c) {
      CHECK(std::fabs(pout.v_s_hat.at(j, c) - base.v_s_hat.at(j, c)) <= 1e-10);
    }
  }
}

TEST_CASE("fusion-at-first equals full network with later fusion zeroed") {
  SkinnedTemplate tmpl = micro_template();
  Config cfg = micro_config();
  cfg.blocks = 3;

  BilayerNetwork full(tmpl, cfg);
  Config first_cfg = cfg;
  first_cfg.fusion_blocks = "first";
  BilayerNetwork at_first(tmpl, first_cfg);

  // Zero the fusion output layers of blocks 1..2 in the full network; its
  // deltas become exactly zero there.
  std::vector<NamedParam> params = full.parameters();
  for (auto& p : params) {
    const bool later_fusion =
        p.name.find("blocks.1.fusion") == 0 || p.name.find("blocks.2.fusion") == 0;
    if (later_fusion && (p.name.find("lin_out") != std::string::npos)) {
      std::fill(p.tensor.data().begin(), p.tensor.data().end(), 0.0);
    }
  }

  Rng rng(9);
  ModelInputs in = random_inputs(cfg, rng);
  Tape t1, t2;
  NetworkOutput a = full.forward(t1, in);
  NetworkOutput b = at_first.forward(t2, in);
  for (std::size_t i = 0; i < a.v_m_hat.size(); ++i) {
    CHECK(a.v_m_hat.data()[i] == b.v_m_hat.data()[i]);
  }
  for (std::size_t i = 0; i < a.v_s_hat.size(); ++i) {
    CHECK(a.v_s_hat.data()[i] == b.v_s_hat.data()[i]);
  }
}

TEST_CASE("mesh-only reduction is exact") {
  SkinnedTemplate tmpl = micro_template();
  Config cfg = micro_config();

  BilayerNetwork full(tmpl, cfg);
  Config mesh_cfg = cfg;
  mesh_cfg.skeleton_branch = false;
  mesh_cfg.fusion_variant = "none";
  BilayerNetwork mesh_only(tmpl, mesh_cfg);

  // Zero every fusion transform output in the full network.
  for (auto& p : full.parameters()) {
    if (p.name.find(".fusion.") != std::string::npos &&
        p.name.find("lin_out") != std::string::npos) {
      std::fill(p.tensor.data().begin(), p.tensor.data().end(), 0.0);
    }
  }

  Rng rng(11);
  ModelInputs in = random_inputs(cfg, rng);
  Tape t1, t2;
  NetworkOutput a = full.forward(t1, in);
  NetworkOutput b = mesh_only.forward(t2, in);
  REQUIRE_FALSE(b.has_skeleton);
  for (std::size_t i = 0; i < a.v_m_hat.size(); ++i) {
    CHECK(a.v_m_hat.data()[i] == b.v_m_hat.data()[i]);
  }
  for (std::size_t i = 0; i < a.cam.size(); ++i) {
    CHECK(a.cam.data()[i] == b.cam.data()[i]);
  }
  for (std::size_t i = 0; i < a.theta_hat.size(); ++i) {
    CHECK(a.theta_hat.data()[i] == b.theta_hat.data()[i]);
  }
}

TEST_CASE("pre and post fusion placements differ") {
  SkinnedTemplate tmpl = micro_template();
  Config cfg = micro_config();
  BilayerNetwork pre(tmpl, cfg);
  Config post_cfg = cfg;
  post_cfg.fusion_placement = "post";
  BilayerNetwork post(tmpl, post_cfg);
  Rng rng(13);
  ModelInputs in = random_inputs(cfg, rng);
  Tape t1, t2;
  NetworkOutput a = pre.forward(t1, in);
  NetworkOutput b = post.forward(t2, in);
  CHECK_FALSE(bit_equal(a.v_m_hat, b.v_m_hat));
}

TEST_CASE("joint regressor") {
  SECTION("one-hot rows select vertices") {
    Tensor R = Tensor::from({{0, 1, 0}, {0, 0, 1}});
    Tensor vm = Tensor::from({{1, 1, 1}, {2, 2, 2}, {3, 3, 3}});
    Tensor joints = apply_joint_regressor(R, vm);
    CHECK(joints.at(0, 0) == 2.0);
    CHECK(joints.at(1, 0) == 3.0);
  }
  SECTION("translation covariance") {
    SkinnedTemplate tmpl = micro_template();
    Rng rng(3);
    Tensor vm = random_tensor(12, 3, rng);
    Tensor vm_shifted = vm.clone();
    for (int v = 0; v < 12; ++v) {
      vm_shifted.at(v, 0) += 0.25;
      vm_shifted.at(v, 1) -= 0.5;
    }
    Tensor j0 = apply_joint_regressor(tmpl.regressor, vm);
    Tensor j1 = apply_joint_regressor(tmpl.regressor, vm_shifted);
    for (int j = 0; j < 4; ++j) {
      CHECK(j1.at(j, 0) - j0.at(j, 0) == Catch::Approx(0.25));
      CHECK(j1.at(j, 1) - j0.at(j, 1) == Catch::Approx(-0.5));
    }
  }
  SECTION("rows must sum to one") {
    Tensor R = Tensor::from({{0.5, 0.2, 0.0}});
    REQUIRE_THROWS_AS(apply_joint_regressor(R, Tensor(3, 3)), InputError);
  }
  SECTION("neutral-mesh joints stay inside the mesh bounding box") {
    SkinnedTemplate tmpl = make_template(MeshKind::icosphere_42);
    Tensor joints = apply_joint_regressor(tmpl.regressor, tmpl.body.mesh_vertices);
    for (int c = 0; c < 3; ++c) {
      double lo = 1e300, hi = -1e300;
      for (int v = 0; v < 42; ++v) {
        lo = std::min(lo, tmpl.body.mesh_vertices.at(v, c));
        hi = std::max(hi, tmpl.body.mesh_vertices.at(v, c));
      }
      for (int j = 0; j < 12; ++j) {
        CHECK(joints.at(j, c) >= lo);
        CHECK(joints.at(j, c) <= hi);
      }
    }
  }
}

TEST_CASE("weak perspective projection") {
  SECTION("identity camera drops z") {
    Tensor pts = Tensor::from({{1, 2, 9}, {-3, 4, -7}});
    Tensor p = project_weak_perspective(pts, CameraParams{1, 0, 0});
    CHECK(p.at(0, 0) == 1.0);
    CHECK(p.at(0, 1) == 2.0);
    CHECK(p.at(1, 0) == -3.0);
  }
  SECTION("scale and shift") {
    Tensor p = project_weak_perspective(Tensor::from({{1, 2, 9}}), CameraParams{2, 1, 1});
    CHECK(p.at(0, 0) == 3.0);
    CHECK(p.at(0, 1) == 5.0);
  }
  SECTION("projection is affine") {
    Rng rng(17);
    Tensor a = random_tensor(5, 3, rng);
    Tensor b = random_tensor(5, 3, rng);
    CameraParams cam{1.3, 0.1, -0.2};
    Tensor pa = project_weak_perspective(a, cam);
    Tensor pb = project_weak_perspective(b, cam);
    // project(a) - project(b) == s (a - b) in xy
    for (int i = 0; i < 5; ++i) {
      for (int c = 0; c < 2; ++c) {
        const double lhs = pa.at(i, c) - pb.at(i, c);
        const double rhs = cam.s * (a.at(i, c) - b.at(i, c));
        CHECK(std::fabs(lhs - rhs) <= 1e-12);
      }
    }
  }
  SECTION("differentiable projection agrees with the plain one") {
    Rng rng(19);
    Tensor pts = random_tensor(6, 3, rng);
    Tensor cam3 = Tensor::from({{1.1, 0.05, -0.1}});
    Tape t;
    Tensor p1 = project_weak(t, pts, cam3);
    Tensor p2 = project_weak_perspective(pts, CameraParams{1.1, 0.05, -0.1});
    CHECK(bit_equal(p1, p2));
    pts.set_requires_grad(true);
    cam3.set_requires_grad(true);
    double err = grad_check(
        [&](Tape& tt) { return mean_all(tt, square(tt, project_weak(tt, pts, cam3))); },
        {pts, cam3});
    CHECK(err < 1e-6);
  }
}

TEST_CASE("camera head variants") {
  const int d = 8, n = 6;

  SECTION("zero weights with bias leave the bias") {
    for (const char* variant : {"relu_bn", "leaky_relu", "relu_plain"}) {
      CameraHead head(d, 3, "cam", variant);
      std::fill(head.lin.W.data().begin(), head.lin.W.data().end(), 0.0);
      std::fill(head.lin.b.data().begin(), head.lin.b.data().end(), 0.0);
      std::fill(head.fc.W.data().begin(), head.fc.W.data().end(), 0.0);
      head.fc.b = Tensor::from({{1, 0, 0}});
      head.fc.b.set_requires_grad(true);
      Rng rng(23);
      Tensor feats = random_tensor(n, d, rng);
      Tape t;
      Tensor cam = head.forward(t, feats, true);
      CHECK(cam.at(0, 0) == Catch::Approx(1.0));
      CHECK(cam.at(0, 1) == 0.0);
      CHECK(cam.at(0, 2) == 0.0);
    }
  }

  SECTION("plain ReLU dead zone kills the final-layer gradient") {
    CameraHead head(d, 5, "cam", "relu_plain");
    // Strongly negative biases force all pre-activations negative.
    for (double& v : head.lin.b.data()) v = -100.0;
    Rng rng(29);
    Tensor feats = random_tensor(n, d, rng);
    head.fc.W.zero_grad();
    Tape t;
    Tensor cam = head.forward(t, feats, true);
    Tensor loss = mean_all(t, square(t, cam));
    t.backward_from(loss);
    for (double g : head.fc.W.grad()) CHECK(g == 0.0);

    // LeakyReLU under the same inputs keeps it alive.
    CameraHead head2(d, 5, "cam", "leaky_relu");
    for (double& v : head2.lin.b.data()) v = -100.0;
    head2.fc.W.zero_grad();
    Tape t2;
    Tensor cam2 = head2.forward(t2, feats, true);
    Tensor loss2 = mean_all(t2, square(t2, cam2));
    t2.backward_from(loss2);
    double total = 0.0;
    for (double g : head2.fc.W.grad()) total += std::fabs(g);
    CHECK(total > 0.0);

    // BatchNorm re-centers, so plain inputs stay trainable too.
    CameraHead head3(d, 5, "cam", "relu_bn");
    for (double& v : head3.lin.b.data()) v = -100.0;
    head3.fc.W.zero_grad();
    Tape t3;
    Tensor cam3 = head3.forward(t3, feats, true);
    Tensor loss3 = mean_all(t3, square(t3, cam3));
    t3.backward_from(loss3);
    double total3 = 0.0;
    for (double g : head3.fc.W.grad()) total3 += std::fabs(g);
    CHECK(total3 > 0.0);
  }

  SECTION("gradient check per variant") {
    Rng rng(31);
    for (const char* variant : {"relu_bn", "leaky_relu"}) {
      CameraHead head(d, 7, "cam", variant);
      Tensor feats = random_tensor(n, d, rng, -1, 1, true);
      std::vector<Tensor> params{feats, head.lin.W, head.lin.b, head.fc.W, head.fc.b};
      if (std::string(variant) == "relu_bn") {
        params.push_back(head.bn_gamma);
        params.push_back(head.bn_beta);
      }
      double err = grad_check(
          [&](Tape& t) {
            // Fresh running stats per evaluation keep f deterministic.
            RunningStats saved = *head.bn_stats;
            Tensor cam = head.forward(t, feats, true);
            *head.bn_stats = saved;
            return mean_all(t, square(t, cam));
          },
          params);
      CHECK(err < 1e-4);
    }
  }
}

TEST_CASE("parametric head") {
  SECTION("zero weights give zero parameters") {
    ParamHead head(12, 4, 16, 3, "ph");
    std::fill(head.fc1.W.data().begin(), head.fc1.W.data().end(), 0.0);
    std::fill(head.fc2.W.data().begin(), head.fc2.W.data().end(), 0.0);
    Rng rng(37);
    Tape t;
    auto [theta, beta] = head.forward(t, random_tensor(12, 3, rng));
    for (double v : theta.data()) CHECK(v == 0.0);
    for (double v : beta.data()) CHECK(v == 0.0);
  }
  SECTION("output dims for the 12-joint desk config") {
    ParamHead head(42, 12, 64, 3, "ph");
    Rng rng(41);
    Tape t;
    auto [theta, beta] = head.forward(t, random_tensor(42, 3, rng));
    CHECK(theta.cols() == 36);
    CHECK(beta.cols() == 10);
  }
  SECTION("gradient check") {
    ParamHead head(12, 4, 16, 5, "ph");
    Rng rng(43);
    Tensor vm = random_tensor(12, 3, rng, -1, 1, true);
    double err = grad_check(
        [&](Tape& t) {
          auto [theta, beta] = head.forward(t, vm);
          return add(t, mean_all(t, square(t, theta)), mean_all(t, square(t, beta)));
        },
        {vm, head.fc1.W, head.fc1.b, head.fc2.W, head.fc2.b});
    CHECK(err < 1e-4);
  }
}

TEST_CASE("parameter counting") {
  SkinnedTemplate tmpl = micro_template();
  Config cfg = micro_config();

  SECTION("shared vs unshared differ by blocks x per-GRB count") {
    BilayerNetwork unshared(tmpl, cfg);
    Config shared_cfg = cfg;
    shared_cfg.share_branch_weights = true;
    BilayerNetwork shared(tmpl, shared_cfg);
    CHECK(unshared.count_parameters() - shared.count_parameters() ==
          static_cast<std::size_t>(cfg.blocks) * grb_param_count(cfg.d0));
  }

  SECTION("count is invariant to forward passes") {
    BilayerNetwork net(tmpl, cfg);
    const std::size_t before = net.count_parameters();
    Rng rng(47);
    ModelInputs in = random_inputs(cfg, rng);
    Tape t;
    net.forward(t, in);
    CHECK(net.count_parameters() == before);
  }

  SECTION("count follows the closed form in d0") {
    auto closed_form = [&](const Config& c) {
      const int nm = 12, ns = c.n_joints, d0 = c.d0;
      const int head_hidden = d0 / 2;
      const int cam_hidden = d0 / 2;
      std::size_t total = 0;
      total += static_cast<std::size_t>(3 + c.dg) * d0 + d0;      // mesh embed
      total += static_cast<std::size_t>(2 + c.dl) * d0 + d0;      // skel embed
      total += 2 * c.blocks * grb_param_count(d0);                // branch GRBs
      // fusion transforms: two per block, GRB-shaped minus the skip
      total += 2 * c.blocks * grb_param_count(d0);
      total += static_cast<std::size_t>(ns + nm) * (ns + nm);     // W_f
      // heads: lin1 + GN + lin2, twice
      const std::size_t head = static_cast<std::size_t>(d0) * head_hidden + head_hidden +
                               2 * head_hidden +
                               static_cast<std::size_t>(head_hidden) * 3 + 3;
      total += 2 * head;
      // camera: lin + bn affine + fc
      total += static_cast<std::size_t>(d0) * cam_hidden + cam_hidden + 2 * cam_hidden +
               static_cast<std::size_t>(cam_hidden) * 3 + 3;
      // parametric head
      total += static_cast<std::size_t>(3 * nm) * c.param_head_hidden + c.param_head_hidden;
      total += static_cast<std::size_t>(c.param_head_hidden) * (3 * ns + 10) + (3 * ns + 10);
      return total;
    };
    BilayerNetwork net8(tmpl, cfg);
    CHECK(net8.count_parameters() == closed_form(cfg));
    Config cfg16 = cfg;
    cfg16.d0 = 16;
    BilayerNetwork net16(tmpl, cfg16);
    CHECK(net16.count_parameters() == closed_form(cfg16));
  }

  SECTION("mesh_only holds no skeleton or fusion parameters") {
    Config mesh_cfg = cfg;
    mesh_cfg.skeleton_branch = false;
    mesh_cfg.fusion_variant = "none";
    BilayerNetwork net(tmpl, mesh_cfg);
    for (const auto& p : net.parameters()) {
      CHECK(p.name.find("skel") == std::string::npos);
      CHECK(p.name.find("fusion") == std::string::npos);
      CHECK(p.name.find("head_s") == std::string::npos);
    }
  }

  SECTION("full vs no_fusion differ exactly by fusion parameter names") {
    BilayerNetwork full(tmpl, cfg);
    Config nf_cfg = cfg;
    nf_cfg.fusion_variant = "none";
    BilayerNetwork nf(tmpl, nf_cfg);
    std::vector<std::string> full_names, nf_names;
    for (const auto& p : full.parameters()) full_names.push_back(p.name);
    for (const auto& p : nf.parameters()) nf_names.push_back(p.name);
    for (const auto& n : nf_names) {
      CHECK(std::find(full_names.begin(), full_names.end(), n) != full_names.end());
    }
    for (const auto& n : full_names) {
      const bool in_nf = std::find(nf_names.begin(), nf_names.end(), n) != nf_names.end();
      const bool is_fusion = n.find("fusion") != std::string::npos;
      CHECK(in_nf == !is_fusion);
    }
  }
}

TEST_CASE("weight sharing keeps branch parameters identical storage") {
  SkinnedTemplate tmpl = micro_template();
  Config cfg = micro_config();
  cfg.share_branch_weights = true;
  BilayerNetwork net(tmpl, cfg);
  Rng rng(53);
  ModelInputs in = random_inputs(cfg, rng);
  // One gradient step over a simple loss.
  Tape t;
  NetworkOutput out = net.forward(t, in, true);
  Tensor loss =
      add(t, mean_all(t, square(t, out.v_m_hat)), mean_all(t, square(t, out.v_s_hat)));
  net.zero_grad();
  t.backward_from(loss);
  for (auto& p : net.parameters()) {
    for (auto& g : p.tensor.grad()) g *= 1.0;  // touch
    for (std::size_t k = 0; k < p.tensor.size(); ++k) {
      p.tensor.data()[k] -= 1e-3 * p.tensor.grad()[k];
    }
  }
  // The shared-GRB parameter set appears once; there are no separate
  // mesh_grb / skeleton_grb parameter names to diverge.
  for (const auto& p : net.parameters()) {
    CHECK(p.name.find("mesh_grb") == std::string::npos);
    CHECK(p.name.find("skeleton_grb") == std::string::npos);
  }
}

TEST_CASE("end-to-end micro network gradient check against the total loss") {
  SkinnedTemplate tmpl = micro_template();
  Config cfg = micro_config();
  cfg.seed = 2;
  BilayerNetwork net(tmpl, cfg);

  FeatureMaps maps = make_feature_maps(tmpl, cfg.dg, cfg.dl, Rng(99));
  DatasetOptions opt;
  auto pool = make_dataset(tmpl, maps, 1, opt, 71);
  const SyntheticExample& ex = pool[0];

  ModelInputs in;
  in.global_feat = ex.global_feat;
  in.local_feats = ex.local_feats;
  in.joints_2d = ex.joints2d_noisy;

  LossWeights w;
  FocalConfig focal;
  FocalSwitches sw;
  GroundTruth gt = ground_truth_of(ex);

  std::vector<Tensor> params;
  for (const auto& p : net.parameters()) params.push_back(p.tensor);

  RunningStats saved = *net.camera_head().bn_stats;
  double err = grad_check(
      [&](Tape& t) {
        *net.camera_head().bn_stats = saved;
        NetworkOutput out = net.forward(t, in, true);
        LossResult loss = total_loss(t, out, gt, w, focal, sw);
        return loss.total;
      },
      params, 1e-5);
  CHECK(err < 1e-3);
}
