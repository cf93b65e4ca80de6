#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "bilayer/camera.hpp"
#include "bilayer/errors.hpp"
#include "bilayer/graph.hpp"
#include "bilayer/rng.hpp"
#include "bilayer/tensor.hpp"

namespace bilayer {

// ---------------------------------------------------------------------------
// Geometry: icosphere meshes and a stick-figure skeleton.
// ---------------------------------------------------------------------------

// Icosahedron subdivided `subdivisions` times, scaled to `radius`.
// Counts: 12/30/20 at level 0, 42/120/80 at level 1, 162/480/320 at level 2.
inline MeshData make_icosphere(int subdivisions, double radius = 0.8) {
  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<std::array<double, 3>> verts = {
      {-1, phi, 0}, {1, phi, 0}, {-1, -phi, 0}, {1, -phi, 0},
      {0, -1, phi}, {0, 1, phi}, {0, -1, -phi}, {0, 1, -phi},
      {phi, 0, -1}, {phi, 0, 1}, {-phi, 0, -1}, {-phi, 0, 1}};
  std::vector<std::array<int, 3>> faces = {
      {0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
      {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
      {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
      {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  auto normalize = [](std::array<double, 3>& v) {
    double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    for (double& c : v) c /= n;
  };
  for (auto& v : verts) normalize(v);

  for (int level = 0; level < subdivisions; ++level) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      std::array<double, 3> m = {(verts[a][0] + verts[b][0]) / 2,
                                 (verts[a][1] + verts[b][1]) / 2,
                                 (verts[a][2] + verts[b][2]) / 2};
      normalize(m);
      verts.push_back(m);
      int idx = static_cast<int>(verts.size()) - 1;
      midpoint.emplace(key, idx);
      return idx;
    };
    std::vector<std::array<int, 3>> next;
    next.reserve(faces.size() * 4);
    for (const auto& f : faces) {
      int a = mid(f[0], f[1]), b = mid(f[1], f[2]), c = mid(f[2], f[0]);
      next.push_back({f[0], a, c});
      next.push_back({f[1], b, a});
      next.push_back({f[2], c, b});
      next.push_back({a, b, c});
    }
    faces = std::move(next);
  }

  MeshData mesh;
  std::vector<double> coords;
  coords.reserve(verts.size() * 3);
  for (const auto& v : verts) {
    coords.push_back(v[0] * radius);
    coords.push_back(v[1] * radius);
    coords.push_back(v[2] * radius);
  }
  mesh.vertices = Tensor::from_rows(static_cast<int>(verts.size()), 3, std::move(coords));
  std::set<std::pair<int, int>> edge_set;
  for (const auto& f : faces) {
    for (int e = 0; e < 3; ++e) {
      int u = f[e], v = f[(e + 1) % 3];
      edge_set.emplace(std::min(u, v), std::max(u, v));
    }
  }
  mesh.edges.assign(edge_set.begin(), edge_set.end());
  return mesh;
}

// 12-joint stick figure: pelvis, chest, shoulders/elbows/wrists,
// knees/ankles, rooted at the pelvis. Other joint counts produce a chain
// along y (used by micro-scale tests).
inline SkeletonData stick_skeleton(int joint_count = 12) {
  SkeletonData sk;
  if (joint_count == 12) {
    sk.joints = Tensor::from({{0.00, 0.00, 0.00},    // 0 pelvis (root)
                              {0.00, 0.30, 0.00},    // 1 chest
                              {0.18, 0.28, 0.00},    // 2 left shoulder
                              {0.38, 0.26, 0.00},    // 3 left elbow
                              {0.58, 0.24, 0.00},    // 4 left wrist
                              {-0.18, 0.28, 0.00},   // 5 right shoulder
                              {-0.38, 0.26, 0.00},   // 6 right elbow
                              {-0.58, 0.24, 0.00},   // 7 right wrist
                              {0.12, -0.32, 0.00},   // 8 left knee
                              {-0.12, -0.32, 0.00},  // 9 right knee
                              {0.12, -0.62, 0.00},   // 10 left ankle
                              {-0.12, -0.62, 0.00}}); // 11 right ankle
    sk.bones = {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {1, 5}, {5, 6},
                {6, 7}, {0, 8}, {8, 10}, {0, 9}, {9, 11}};
  } else {
    if (joint_count < 2) throw InputError("stick_skeleton: need at least 2 joints");
    Tensor joints(joint_count, 3);
    const double span = 0.8;
    for (int i = 0; i < joint_count; ++i) {
      joints.at(i, 1) = -span / 2 + span * i / (joint_count - 1);
      joints.at(i, 0) = (i % 2 == 0) ? 0.05 : -0.05;
    }
    sk.joints = joints;
    for (int i = 0; i + 1 < joint_count; ++i) sk.bones.emplace_back(i, i + 1);
  }
  return sk;
}

enum class MeshKind { icosphere_42, icosphere_162, custom_file };

inline std::string mesh_kind_name(MeshKind k) {
  switch (k) {
    case MeshKind::icosphere_42: return "icosphere_42";
    case MeshKind::icosphere_162: return "icosphere_162";
    case MeshKind::custom_file: return "custom_file";
  }
  return "?";
}

inline MeshKind mesh_kind_from_name(const std::string& s) {
  if (s == "icosphere_42") return MeshKind::icosphere_42;
  if (s == "icosphere_162") return MeshKind::icosphere_162;
  if (s == "custom_file") return MeshKind::custom_file;
  throw ConfigError("unknown mesh kind '" + s + "'");
}

// Template plus everything the ground-truth generator needs: skinning
// weights (softmax over negative joint distances), the joint regressor R
// (column-normalized skinning transpose, rows sum to 1), and the kinematic
// tree parents.
struct SkinnedTemplate {
  TemplateBody body;
  Tensor skinning;   // N_m x N_s, rows sum to 1
  Tensor regressor;  // N_s x N_m, rows sum to 1
  std::vector<int> parent;  // -1 at the root
  std::vector<std::vector<int>> joint_neighbors;
};

inline SkinnedTemplate make_template_from(const MeshData& mesh, const SkeletonData& sk,
                                          double skin_temperature = 0.2) {
  SkinnedTemplate t;
  t.body.mesh_vertices = mesh.vertices;
  t.body.mesh_edges = mesh.edges;
  t.body.joint_positions = sk.joints;
  t.body.joint_edges = sk.bones;

  const int nm = t.body.mesh_count();
  const int ns = t.body.joint_count();

  // Kinematic tree rooted at joint 0.
  t.parent.assign(static_cast<std::size_t>(ns), -2);
  t.joint_neighbors.assign(static_cast<std::size_t>(ns), {});
  for (const auto& [a, b] : sk.bones) {
    t.joint_neighbors[static_cast<std::size_t>(a)].push_back(b);
    t.joint_neighbors[static_cast<std::size_t>(b)].push_back(a);
  }
  std::vector<int> order{0};
  t.parent[0] = -1;
  for (std::size_t head = 0; head < order.size(); ++head) {
    int u = order[head];
    for (int v : t.joint_neighbors[static_cast<std::size_t>(u)]) {
      if (t.parent[static_cast<std::size_t>(v)] == -2) {
        t.parent[static_cast<std::size_t>(v)] = u;
        order.push_back(v);
      }
    }
  }
  for (int j = 0; j < ns; ++j) {
    if (t.parent[static_cast<std::size_t>(j)] == -2) {
      throw InputError("make_template: skeleton is not connected at joint " +
                       std::to_string(j));
    }
  }

  // Softmax skinning over negative distances.
  t.skinning = Tensor(nm, ns);
  for (int v = 0; v < nm; ++v) {
    double mx = -1e300;
    std::vector<double> logits(static_cast<std::size_t>(ns));
    for (int j = 0; j < ns; ++j) {
      const double d = detail::cross_distance(t.body.mesh_vertices, v,
                                              t.body.joint_positions, j);
      logits[static_cast<std::size_t>(j)] = -d / skin_temperature;
      mx = std::max(mx, logits[static_cast<std::size_t>(j)]);
    }
    double denom = 0.0;
    for (double& l : logits) {
      l = std::exp(l - mx);
      denom += l;
    }
    for (int j = 0; j < ns; ++j) t.skinning.at(v, j) = logits[static_cast<std::size_t>(j)] / denom;
  }

  // R aggregates vertices per joint: transpose of skinning, row-normalized.
  t.regressor = Tensor(ns, nm);
  for (int j = 0; j < ns; ++j) {
    double s = 0.0;
    for (int v = 0; v < nm; ++v) s += t.skinning.at(v, j);
    for (int v = 0; v < nm; ++v) t.regressor.at(j, v) = t.skinning.at(v, j) / s;
  }
  return t;
}

inline SkinnedTemplate make_template(MeshKind kind, int joint_count = 12,
                                     double skin_temperature = 0.2,
                                     const std::string& mesh_file = "") {
  MeshData mesh;
  switch (kind) {
    case MeshKind::icosphere_42: mesh = make_icosphere(1); break;
    case MeshKind::icosphere_162: mesh = make_icosphere(2); break;
    case MeshKind::custom_file: {
      if (mesh_file.empty()) throw InputError("make_template: custom_file needs a path");
      if (mesh_file.size() > 4 && mesh_file.substr(mesh_file.size() - 4) == ".obj") {
        mesh = load_obj_mesh(mesh_file);
      } else {
        mesh = load_json_mesh(mesh_file);
      }
      break;
    }
  }
  return make_template_from(mesh, stick_skeleton(joint_count), skin_temperature);
}

// ---------------------------------------------------------------------------
// Posing: forward kinematics over the joint tree + linear blend skinning.
// ---------------------------------------------------------------------------

namespace detail {

struct RigidTransform {
  // x -> R x + t
  std::array<double, 9> R;
  std::array<double, 3> t;
};

inline std::array<double, 9> axis_angle_matrix(double x, double y, double z) {
  const double angle = std::sqrt(x * x + y * y + z * z);
  if (angle < 1e-12) return {1, 0, 0, 0, 1, 0, 0, 0, 1};
  const double ux = x / angle, uy = y / angle, uz = z / angle;
  const double c = std::cos(angle), s = std::sin(angle), ic = 1.0 - c;
  return {c + ux * ux * ic,      ux * uy * ic - uz * s, ux * uz * ic + uy * s,
          uy * ux * ic + uz * s, c + uy * uy * ic,      uy * uz * ic - ux * s,
          uz * ux * ic - uy * s, uz * uy * ic + ux * s, c + uz * uz * ic};
}

inline std::array<double, 9> matmul3(const std::array<double, 9>& a,
                                     const std::array<double, 9>& b) {
  std::array<double, 9> c{};
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k)
      for (int j = 0; j < 3; ++j) c[i * 3 + j] += a[i * 3 + k] * b[k * 3 + j];
  return c;
}

inline std::array<double, 3> apply3(const std::array<double, 9>& R,
                                    const std::array<double, 3>& v) {
  return {R[0] * v[0] + R[1] * v[1] + R[2] * v[2],
          R[3] * v[0] + R[4] * v[1] + R[5] * v[2],
          R[6] * v[0] + R[7] * v[1] + R[8] * v[2]};
}

}  // namespace detail

// Deform the template: beta drives smooth radial scaling modes of the
// neutral mesh, theta rotates joints along the kinematic chain, vertices
// blend the joint transforms with the skinning weights. With theta = 0 and
// beta = 0 the output is bit-identical to the template.
inline std::pair<Tensor, Tensor> pose_template(const SkinnedTemplate& t, const Tensor& theta,
                                               const Tensor& beta) {
  const int ns = t.body.joint_count();
  const int nm = t.body.mesh_count();
  if (theta.rows() != ns || theta.cols() != 3) {
    throw ShapeError("pose_template: theta must be " + std::to_string(ns) + "x3, got " +
                     theta.shape_str());
  }
  for (double v : theta.data()) {
    if (std::fabs(v) > 3.14159265358979323846 + 1e-12) {
      throw InputError("pose_template: |theta| entries must not exceed pi");
    }
  }

  // Shape modes: radial scale 1 + 0.1 * sum_k beta_k cos((k+1) pi y/ymax).
  double ymax = 1e-9;
  for (int v = 0; v < nm; ++v) ymax = std::max(ymax, std::fabs(t.body.mesh_vertices.at(v, 1)));
  Tensor shaped(nm, 3);
  for (int v = 0; v < nm; ++v) {
    double s = 1.0;
    if (beta.valid()) {
      const double yn = t.body.mesh_vertices.at(v, 1) / ymax;
      double acc = 0.0;
      for (int k = 0; k < beta.cols(); ++k) {
        acc += beta.at(0, k) * std::cos((k + 1) * 3.14159265358979323846 * yn);
      }
      s += 0.1 * acc;
    }
    for (int c = 0; c < 3; ++c) shaped.at(v, c) = t.body.mesh_vertices.at(v, c) * s;
  }

  // Forward kinematics: each joint rotates about its rest position,
  // composed with the parent transform.
  std::vector<detail::RigidTransform> global(static_cast<std::size_t>(ns));
  std::vector<int> order;
  order.reserve(static_cast<std::size_t>(ns));
  {
    std::vector<bool> placed(static_cast<std::size_t>(ns), false);
    order.push_back(0);
    placed[0] = true;
    for (std::size_t head = 0; head < order.size(); ++head) {
      int u = order[head];
      for (int v : t.joint_neighbors[static_cast<std::size_t>(u)]) {
        if (!placed[static_cast<std::size_t>(v)]) {
          placed[static_cast<std::size_t>(v)] = true;
          order.push_back(v);
        }
      }
    }
  }
  for (int j : order) {
    const auto Rj = detail::axis_angle_matrix(theta.at(j, 0), theta.at(j, 1), theta.at(j, 2));
    const std::array<double, 3> p = {t.body.joint_positions.at(j, 0),
                                     t.body.joint_positions.at(j, 1),
                                     t.body.joint_positions.at(j, 2)};
    const auto Rp = detail::apply3(Rj, p);
    detail::RigidTransform local;
    local.R = Rj;
    local.t = {p[0] - Rp[0], p[1] - Rp[1], p[2] - Rp[2]};
    const int par = t.parent[static_cast<std::size_t>(j)];
    if (par < 0) {
      global[static_cast<std::size_t>(j)] = local;
    } else {
      const auto& g = global[static_cast<std::size_t>(par)];
      detail::RigidTransform out;
      out.R = detail::matmul3(g.R, local.R);
      const auto gt = detail::apply3(g.R, local.t);
      out.t = {gt[0] + g.t[0], gt[1] + g.t[1], gt[2] + g.t[2]};
      global[static_cast<std::size_t>(j)] = out;
    }
  }

  // Blend in delta form so the identity pose is exact.
  Tensor posed(nm, 3);
  for (int v = 0; v < nm; ++v) {
    const std::array<double, 3> x = {shaped.at(v, 0), shaped.at(v, 1), shaped.at(v, 2)};
    std::array<double, 3> acc = {x[0], x[1], x[2]};
    for (int j = 0; j < ns; ++j) {
      const double w = t.skinning.at(v, j);
      if (w == 0.0) continue;
      const auto& g = global[static_cast<std::size_t>(j)];
      const auto Rx = detail::apply3(g.R, x);
      acc[0] += w * (Rx[0] + g.t[0] - x[0]);
      acc[1] += w * (Rx[1] + g.t[1] - x[1]);
      acc[2] += w * (Rx[2] + g.t[2] - x[2]);
    }
    posed.at(v, 0) = acc[0];
    posed.at(v, 1) = acc[1];
    posed.at(v, 2) = acc[2];
  }

  // Ground-truth joints are the regressed joints of the posed mesh, which
  // makes the regressor-consistency invariant hold by construction.
  Tensor joints(ns, 3);
  for (int j = 0; j < ns; ++j) {
    for (int c = 0; c < 3; ++c) {
      double acc = 0.0;
      for (int v = 0; v < nm; ++v) acc += t.regressor.at(j, v) * posed.at(v, c);
      joints.at(j, c) = acc;
    }
  }
  return {posed, joints};
}

// ---------------------------------------------------------------------------
// Fabricated perceptual features, correlated with pose.
// ---------------------------------------------------------------------------

// Fixed random linear maps shared by every example of a task; local maps
// only see the owning joint and its skeleton neighbors.
struct FeatureMaps {
  Tensor global_map;               // D_g x (3 N_s + 10)
  std::vector<Tensor> local_maps;  // joint i: D_l x 3(1+deg_i)
  std::vector<std::vector<int>> local_inputs;
  int dg = 0;
  int dl = 0;
};

inline FeatureMaps make_feature_maps(const SkinnedTemplate& t, int dg, int dl, Rng rng) {
  const int ns = t.body.joint_count();
  FeatureMaps maps;
  maps.dg = dg;
  maps.dl = dl;
  const int gin = 3 * ns + 10;
  maps.global_map = Tensor(dg, gin);
  for (double& v : maps.global_map.data()) v = rng.gaussian(0.0, 1.0 / std::sqrt(gin));
  maps.local_maps.reserve(static_cast<std::size_t>(ns));
  maps.local_inputs.reserve(static_cast<std::size_t>(ns));
  for (int j = 0; j < ns; ++j) {
    std::vector<int> in{j};
    for (int nb : t.joint_neighbors[static_cast<std::size_t>(j)]) in.push_back(nb);
    const int lin = 3 * static_cast<int>(in.size());
    Tensor m(dl, lin);
    for (double& v : m.data()) v = rng.gaussian(0.0, 1.0 / std::sqrt(3.0));
    maps.local_maps.push_back(m);
    maps.local_inputs.push_back(std::move(in));
  }
  return maps;
}

inline std::pair<Tensor, Tensor> synth_features(const FeatureMaps& maps, const Tensor& theta,
                                                const Tensor& beta, double noise_level,
                                                Rng& rng) {
  if (noise_level < 0.0) throw InputError("synth_features: negative noise level");
  const int ns = theta.rows();
  std::vector<double> gin;
  gin.reserve(static_cast<std::size_t>(3 * ns + 10));
  for (int j = 0; j < ns; ++j) {
    for (int c = 0; c < 3; ++c) gin.push_back(theta.at(j, c));
  }
  for (int k = 0; k < 10; ++k) gin.push_back(k < beta.cols() ? beta.at(0, k) : 0.0);

  Tensor global(1, maps.dg);
  for (int r = 0; r < maps.dg; ++r) {
    double acc = 0.0;
    for (int c = 0; c < maps.global_map.cols(); ++c) acc += maps.global_map.at(r, c) * gin[static_cast<std::size_t>(c)];
    global.at(0, r) = acc + (noise_level > 0.0 ? rng.gaussian(0.0, noise_level) : 0.0);
  }

  Tensor locals(ns, maps.dl);
  for (int j = 0; j < ns; ++j) {
    const auto& in = maps.local_inputs[static_cast<std::size_t>(j)];
    std::vector<double> lin;
    lin.reserve(in.size() * 3);
    for (int src : in) {
      for (int c = 0; c < 3; ++c) lin.push_back(theta.at(src, c));
    }
    const Tensor& m = maps.local_maps[static_cast<std::size_t>(j)];
    for (int r = 0; r < maps.dl; ++r) {
      double acc = 0.0;
      for (int c = 0; c < m.cols(); ++c) acc += m.at(r, c) * lin[static_cast<std::size_t>(c)];
      locals.at(j, r) = acc + (noise_level > 0.0 ? rng.gaussian(0.0, noise_level) : 0.0);
    }
  }
  return {global, locals};
}

// ---------------------------------------------------------------------------
// Example pools.
// ---------------------------------------------------------------------------

struct SyntheticExample {
  Tensor theta;          // N_s x 3 axis-angle
  Tensor beta;           // 1 x 10
  Tensor v_m_gt;         // N_m x 3
  Tensor v_s_gt;         // N_s x 3
  Tensor joints2d_gt;    // N_s x 2
  Tensor joints2d_noisy; // N_s x 2, simulated detector output
  Tensor global_feat;    // 1 x D_g
  Tensor local_feats;    // N_s x D_l
  bool has_3d = true;
  bool has_2d = true;
  std::string dataset_id;
  CameraParams camera;   // hidden ground-truth camera
};

struct DatasetOptions {
  double theta_max = 0.5;
  double beta_max = 0.5;
  double feature_noise = 0.01;
  double detector_noise = 0.02;
  double fraction_2d_only = 0.0;
  double cam_scale_lo = 0.8;
  double cam_scale_hi = 1.2;
  double cam_shift = 0.2;
  std::string dataset_id = "synth";
};

inline SyntheticExample make_example(const SkinnedTemplate& t, const FeatureMaps& maps,
                                     const DatasetOptions& opt, Rng rng) {
  const int ns = t.body.joint_count();
  SyntheticExample ex;
  ex.dataset_id = opt.dataset_id;
  ex.theta = Tensor(ns, 3);
  for (double& v : ex.theta.data()) v = rng.uniform(-opt.theta_max, opt.theta_max);
  ex.beta = Tensor(1, 10);
  for (double& v : ex.beta.data()) v = rng.uniform(-opt.beta_max, opt.beta_max);
  auto [vm, vs] = pose_template(t, ex.theta, ex.beta);
  ex.v_m_gt = vm;
  ex.v_s_gt = vs;
  ex.camera.s = rng.uniform(opt.cam_scale_lo, opt.cam_scale_hi);
  ex.camera.tx = rng.uniform(-opt.cam_shift, opt.cam_shift);
  ex.camera.ty = rng.uniform(-opt.cam_shift, opt.cam_shift);
  ex.joints2d_gt = project_weak_perspective(ex.v_s_gt, ex.camera);
  ex.joints2d_noisy = ex.joints2d_gt.clone();
  for (double& v : ex.joints2d_noisy.data()) v += rng.gaussian(0.0, opt.detector_noise);
  auto [g, l] = synth_features(maps, ex.theta, ex.beta, opt.feature_noise, rng);
  ex.global_feat = g;
  ex.local_feats = l;
  ex.has_3d = !(rng.next_double() < opt.fraction_2d_only);
  ex.has_2d = true;
  return ex;
}

inline std::vector<SyntheticExample> make_dataset(const SkinnedTemplate& t,
                                                  const FeatureMaps& maps, int n_examples,
                                                  const DatasetOptions& opt,
                                                  std::uint64_t seed) {
  if (n_examples < 1) throw InputError("make_dataset: need at least one example");
  std::vector<SyntheticExample> pool;
  pool.reserve(static_cast<std::size_t>(n_examples));
  for (int i = 0; i < n_examples; ++i) {
    pool.push_back(make_example(t, maps, opt, Rng(seed, static_cast<std::uint64_t>(i) + 1)));
  }
  return pool;
}

// ---------------------------------------------------------------------------
// JSON-lines dump/load. Floats use 17 significant digits so the round trip
// is exact.
// ---------------------------------------------------------------------------

namespace detail {

inline void append_num(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
}

inline void append_matrix(std::string& out, const Tensor& t) {
  out += '[';
  for (int i = 0; i < t.rows(); ++i) {
    if (i) out += ',';
    out += '[';
    for (int j = 0; j < t.cols(); ++j) {
      if (j) out += ',';
      append_num(out, t.at(i, j));
    }
    out += ']';
  }
  out += ']';
}

inline Tensor matrix_from_json(const nlohmann::json& j) {
  const int rows = static_cast<int>(j.size());
  const int cols = rows > 0 ? static_cast<int>(j[0].size()) : 0;
  Tensor t(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int c = 0; c < cols; ++c) t.at(i, c) = j[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)].get<double>();
  }
  return t;
}

}  // namespace detail

inline std::string example_to_jsonl(const SyntheticExample& ex) {
  std::string s;
  s.reserve(4096);
  s += "{\"dataset_id\":\"" + ex.dataset_id + "\"";
  s += ",\"has_3d\":";
  s += ex.has_3d ? "true" : "false";
  s += ",\"has_2d\":";
  s += ex.has_2d ? "true" : "false";
  s += ",\"cam\":[";
  detail::append_num(s, ex.camera.s);
  s += ',';
  detail::append_num(s, ex.camera.tx);
  s += ',';
  detail::append_num(s, ex.camera.ty);
  s += "],\"theta\":";
  detail::append_matrix(s, ex.theta);
  s += ",\"beta\":";
  detail::append_matrix(s, ex.beta);
  s += ",\"v_m\":";
  detail::append_matrix(s, ex.v_m_gt);
  s += ",\"v_s\":";
  detail::append_matrix(s, ex.v_s_gt);
  s += ",\"j2d\":";
  detail::append_matrix(s, ex.joints2d_gt);
  s += ",\"j2d_noisy\":";
  detail::append_matrix(s, ex.joints2d_noisy);
  s += ",\"global_feat\":";
  detail::append_matrix(s, ex.global_feat);
  s += ",\"local_feats\":";
  detail::append_matrix(s, ex.local_feats);
  s += '}';
  return s;
}

inline void dump_dataset(const std::vector<SyntheticExample>& pool, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("dump_dataset: cannot open " + path + " for writing");
  for (const auto& ex : pool) out << example_to_jsonl(ex) << '\n';
}

inline std::vector<SyntheticExample> load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("load_dataset: cannot open " + path);
  std::vector<SyntheticExample> pool;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw InputError("load_dataset: " + path + ":" + std::to_string(lineno) + ": " +
                       e.what());
    }
    SyntheticExample ex;
    ex.dataset_id = j.at("dataset_id").get<std::string>();
    ex.has_3d = j.at("has_3d").get<bool>();
    ex.has_2d = j.at("has_2d").get<bool>();
    ex.camera.s = j.at("cam")[0].get<double>();
    ex.camera.tx = j.at("cam")[1].get<double>();
    ex.camera.ty = j.at("cam")[2].get<double>();
    ex.theta = detail::matrix_from_json(j.at("theta"));
    ex.beta = detail::matrix_from_json(j.at("beta"));
    ex.v_m_gt = detail::matrix_from_json(j.at("v_m"));
    ex.v_s_gt = detail::matrix_from_json(j.at("v_s"));
    ex.joints2d_gt = detail::matrix_from_json(j.at("j2d"));
    ex.joints2d_noisy = detail::matrix_from_json(j.at("j2d_noisy"));
    ex.global_feat = detail::matrix_from_json(j.at("global_feat"));
    ex.local_feats = detail::matrix_from_json(j.at("local_feats"));
    pool.push_back(std::move(ex));
  }
  return pool;
}

}  // namespace bilayer
