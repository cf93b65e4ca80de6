#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "bilayer/errors.hpp"
#include "bilayer/tensor.hpp"

namespace bilayer {

enum class GraphKind { mesh, skeleton, fusion_static };

using Warnings = std::vector<std::string>;

// Immutable adjacency with provenance. Entries are non-negative; mesh and
// skeleton adjacencies are row-normalized at construction, the fusion
// static part keeps raw reciprocal distances (normalization happens per
// forward pass against the trainable mask).
struct GraphTopology {
  int n = 0;
  Tensor adjacency;
  GraphKind kind = GraphKind::mesh;
  bool row_normalized = false;
};

using EdgeList = std::vector<std::pair<int, int>>;

// Template geometry: a neutral-pose mesh plus the joint skeleton it
// encloses. Units are meters.
struct TemplateBody {
  Tensor mesh_vertices;   // N_m x 3
  EdgeList mesh_edges;
  Tensor joint_positions; // N_s x 3
  EdgeList joint_edges;

  int mesh_count() const { return mesh_vertices.rows(); }
  int joint_count() const { return joint_positions.rows(); }
};

namespace detail {

inline void validate_edges(const EdgeList& edges, int n, const char* what) {
  for (const auto& [a, b] : edges) {
    if (a < 0 || a >= n || b < 0 || b >= n) {
      throw InputError(std::string(what) + ": edge index (" + std::to_string(a) + "," +
                       std::to_string(b) + ") out of range for " + std::to_string(n) +
                       " nodes");
    }
    if (a == b) {
      throw InputError(std::string(what) + ": self-edge on node " + std::to_string(a));
    }
  }
}

inline double point_distance(const Tensor& pts, int i, int j) {
  double acc = 0.0;
  for (int k = 0; k < 3; ++k) {
    const double d = pts.at(i, k) - pts.at(j, k);
    acc += d * d;
  }
  return std::sqrt(acc);
}

inline double cross_distance(const Tensor& a, int i, const Tensor& b, int j) {
  double acc = 0.0;
  for (int k = 0; k < 3; ++k) {
    const double d = a.at(i, k) - b.at(j, k);
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace detail

// Normalize each row to sum 1; rows that are entirely zero stay zero.
inline void row_normalize(Tensor& a) {
  for (int i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (int j = 0; j < a.cols(); ++j) s += a.at(i, j);
    if (s > 0.0) {
      for (int j = 0; j < a.cols(); ++j) a.at(i, j) /= s;
    }
  }
}

// Binary symmetric connectivity from the mesh edge list, optional self
// loops, then row normalization.
inline GraphTopology build_mesh_adjacency(const TemplateBody& t, bool add_self_loops = true,
                                          Warnings* warnings = nullptr) {
  const int n = t.mesh_count();
  detail::validate_edges(t.mesh_edges, n, "build_mesh_adjacency");
  Tensor a(n, n);
  for (const auto& [u, v] : t.mesh_edges) {
    a.at(u, v) = 1.0;
    a.at(v, u) = 1.0;
  }
  if (add_self_loops) {
    for (int i = 0; i < n; ++i) a.at(i, i) = 1.0;
  } else if (warnings) {
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      for (int j = 0; j < n; ++j) s += a.at(i, j);
      if (s == 0.0) {
        warnings->push_back("build_mesh_adjacency: vertex " + std::to_string(i) +
                            " is isolated and has no self-loop");
      }
    }
  }
  row_normalize(a);
  return GraphTopology{n, a, GraphKind::mesh, true};
}

// Weighted skeleton connectivity: entry (i,j) is the reciprocal Euclidean
// distance between connected template joints, symmetric, row-normalized.
inline GraphTopology build_skeleton_adjacency(const TemplateBody& t, bool add_self_loops = true,
                                              Warnings* warnings = nullptr) {
  const int n = t.joint_count();
  detail::validate_edges(t.joint_edges, n, "build_skeleton_adjacency");
  Tensor a(n, n);
  for (const auto& [u, v] : t.joint_edges) {
    const double d = detail::point_distance(t.joint_positions, u, v);
    if (d < 1e-9) {
      throw InputError("build_skeleton_adjacency: joints " + std::to_string(u) + " and " +
                       std::to_string(v) + " coincide; reciprocal distance undefined");
    }
    a.at(u, v) = 1.0 / d;
    a.at(v, u) = 1.0 / d;
  }
  if (add_self_loops) {
    // Weight 1 mirrors the binary mesh convention; the row normalization
    // absorbs the scale.
    for (int i = 0; i < n; ++i) a.at(i, i) = 1.0;
  } else if (warnings) {
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      for (int j = 0; j < n; ++j) s += a.at(i, j);
      if (s == 0.0) {
        warnings->push_back("build_skeleton_adjacency: joint " + std::to_string(i) +
                            " is isolated and has no self-loop");
      }
    }
  }
  row_normalize(a);
  return GraphTopology{n, a, GraphKind::skeleton, true};
}

// (N_s+N_m)^2 matrix with zero diagonal blocks; off-diagonal blocks hold
// raw reciprocal joint-vertex distances. Joints occupy indices [0, N_s).
// Near-coincident pairs are clamped at 1e-6 m instead of erroring.
inline GraphTopology build_fusion_static(const TemplateBody& t, Warnings* warnings = nullptr) {
  const int ns = t.joint_count();
  const int nm = t.mesh_count();
  const int n = ns + nm;
  constexpr double kMinDistance = 1e-6;
  Tensor a(n, n);
  for (int j = 0; j < ns; ++j) {
    for (int v = 0; v < nm; ++v) {
      double d = detail::cross_distance(t.joint_positions, j, t.mesh_vertices, v);
      if (d < kMinDistance) {
        if (warnings) {
          warnings->push_back("build_fusion_static: joint " + std::to_string(j) +
                              " and vertex " + std::to_string(v) +
                              " nearly coincide; distance clamped to 1e-6");
        }
        d = kMinDistance;
      }
      a.at(j, ns + v) = 1.0 / d;
      a.at(ns + v, j) = 1.0 / d;
    }
  }
  return GraphTopology{n, a, GraphKind::fusion_static, false};
}

// BFS eccentricity maximum over the largest connected component. Entries
// strictly above `threshold` count as (undirected) edges.
inline int graph_diameter(const GraphTopology& g, double threshold = 0.0) {
  if (g.n <= 0) throw InputError("graph_diameter: empty graph");
  if (threshold < 0.0) throw InputError("graph_diameter: negative threshold");
  const int n = g.n;
  std::vector<std::vector<int>> adj(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      if (g.adjacency.at(i, j) > threshold || g.adjacency.at(j, i) > threshold) {
        adj[static_cast<std::size_t>(i)].push_back(j);
        adj[static_cast<std::size_t>(j)].push_back(i);
      }
    }
  }
  std::vector<int> component(static_cast<std::size_t>(n), -1);
  std::vector<int> comp_size;
  for (int s = 0; s < n; ++s) {
    if (component[static_cast<std::size_t>(s)] >= 0) continue;
    const int cid = static_cast<int>(comp_size.size());
    comp_size.push_back(0);
    std::deque<int> q{s};
    component[static_cast<std::size_t>(s)] = cid;
    while (!q.empty()) {
      int u = q.front();
      q.pop_front();
      ++comp_size[static_cast<std::size_t>(cid)];
      for (int v : adj[static_cast<std::size_t>(u)]) {
        if (component[static_cast<std::size_t>(v)] < 0) {
          component[static_cast<std::size_t>(v)] = cid;
          q.push_back(v);
        }
      }
    }
  }
  int largest = 0;
  for (std::size_t c = 1; c < comp_size.size(); ++c) {
    if (comp_size[c] > comp_size[static_cast<std::size_t>(largest)]) {
      largest = static_cast<int>(c);
    }
  }
  int diameter = 0;
  std::vector<int> dist(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s) {
    if (component[static_cast<std::size_t>(s)] != largest) continue;
    std::fill(dist.begin(), dist.end(), -1);
    dist[static_cast<std::size_t>(s)] = 0;
    std::deque<int> q{s};
    while (!q.empty()) {
      int u = q.front();
      q.pop_front();
      for (int v : adj[static_cast<std::size_t>(u)]) {
        if (dist[static_cast<std::size_t>(v)] < 0) {
          dist[static_cast<std::size_t>(v)] = dist[static_cast<std::size_t>(u)] + 1;
          diameter = std::max(diameter, dist[static_cast<std::size_t>(v)]);
          q.push_back(v);
        }
      }
    }
  }
  return diameter;
}

// ---------------------------------------------------------------------------
// Template file formats.
// ---------------------------------------------------------------------------

struct MeshData {
  Tensor vertices;
  EdgeList edges;
};

// OBJ subset: `v x y z` and `f i j k ...` lines (1-based indices, polygons
// fan-triangulated, `i/t/n` vertex references accepted). Edges derive from
// face boundaries.
inline MeshData load_obj_mesh(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("load_obj_mesh: cannot open " + path);
  std::vector<double> coords;
  std::set<std::pair<int, int>> edge_set;
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& why) {
    throw InputError("load_obj_mesh: " + path + ":" + std::to_string(lineno) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag)) continue;
    if (tag == "v") {
      double x, y, z;
      if (!(ss >> x >> y >> z)) fail("malformed vertex line");
      coords.push_back(x);
      coords.push_back(y);
      coords.push_back(z);
    } else if (tag == "f") {
      std::vector<int> face;
      std::string token;
      while (ss >> token) {
        std::size_t pos = 0;
        int idx = 0;
        try {
          idx = std::stoi(token, &pos);
        } catch (const std::exception&) {
          fail("malformed face index '" + token + "'");
        }
        if (pos != token.size() && token[pos] != '/') {
          fail("malformed face index '" + token + "'");
        }
        face.push_back(idx - 1);  // OBJ is 1-based
      }
      if (face.size() < 3) fail("face with fewer than 3 vertices");
      const int nverts = static_cast<int>(coords.size() / 3);
      for (int idx : face) {
        if (idx < 0 || idx >= nverts) fail("face index out of range");
      }
      for (std::size_t k = 1; k + 1 < face.size(); ++k) {
        int tri[3] = {face[0], face[k], face[k + 1]};
        for (int e = 0; e < 3; ++e) {
          int u = tri[e], v = tri[(e + 1) % 3];
          edge_set.emplace(std::min(u, v), std::max(u, v));
        }
      }
    }
  }
  if (coords.empty()) throw InputError("load_obj_mesh: " + path + ": no vertices");
  MeshData mesh;
  { const int nverts = static_cast<int>(coords.size() / 3);
    mesh.vertices = Tensor::from_rows(nverts, 3, std::move(coords)); }
  mesh.edges.assign(edge_set.begin(), edge_set.end());
  return mesh;
}

inline MeshData load_json_mesh(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("load_json_mesh: cannot open " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("load_json_mesh: " + path + ": " + e.what());
  }
  if (!doc.contains("vertices") || !doc.contains("edges")) {
    throw InputError("load_json_mesh: " + path + ": expected 'vertices' and 'edges'");
  }
  std::vector<double> coords;
  for (const auto& v : doc["vertices"]) {
    if (!v.is_array() || v.size() != 3) {
      throw InputError("load_json_mesh: " + path + ": vertex is not [x,y,z]");
    }
    for (int k = 0; k < 3; ++k) coords.push_back(v[static_cast<std::size_t>(k)].get<double>());
  }
  MeshData mesh;
  { const int nverts = static_cast<int>(coords.size() / 3);
    mesh.vertices = Tensor::from_rows(nverts, 3, std::move(coords)); }
  for (const auto& e : doc["edges"]) {
    if (!e.is_array() || e.size() != 2) {
      throw InputError("load_json_mesh: " + path + ": edge is not [i,j]");
    }
    mesh.edges.emplace_back(e[0].get<int>(), e[1].get<int>());
  }
  return mesh;
}

struct SkeletonData {
  Tensor joints;
  EdgeList bones;
};

inline SkeletonData load_json_skeleton(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("load_json_skeleton: cannot open " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("load_json_skeleton: " + path + ": " + e.what());
  }
  if (!doc.contains("joints") || !doc.contains("bones")) {
    throw InputError("load_json_skeleton: " + path + ": expected 'joints' and 'bones'");
  }
  std::vector<double> coords;
  for (const auto& v : doc["joints"]) {
    if (!v.is_array() || v.size() != 3) {
      throw InputError("load_json_skeleton: " + path + ": joint is not [x,y,z]");
    }
    for (int k = 0; k < 3; ++k) coords.push_back(v[static_cast<std::size_t>(k)].get<double>());
  }
  SkeletonData sk;
  { const int njoints = static_cast<int>(coords.size() / 3);
    sk.joints = Tensor::from_rows(njoints, 3, std::move(coords)); }
  for (const auto& e : doc["bones"]) {
    if (!e.is_array() || e.size() != 2) {
      throw InputError("load_json_skeleton: " + path + ": bone is not [i,j]");
    }
    sk.bones.emplace_back(e[0].get<int>(), e[1].get<int>());
  }
  return sk;
}

}  // namespace bilayer
