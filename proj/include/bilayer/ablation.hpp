#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "bilayer/config.hpp"
#include "bilayer/errors.hpp"
#include "bilayer/metrics.hpp"
#include "bilayer/model.hpp"
#include "bilayer/training.hpp"

namespace bilayer {

inline const std::vector<std::string>& ablation_variant_names() {
  static const std::vector<std::string> names = {
      "full",           "mesh_only",      "no_fusion",     "fusion_at_first",
      "fusion_at_last", "avgpool_fusion", "maxpool_fusion", "shared_weights",
      "no_focal",       "global_feat_only"};
  return names;
}

// Each named variant is a complete config delta over the base config.
inline Config variant_config(const Config& base, const std::string& variant) {
  Config c = base;
  if (variant == "full") {
    // base as-is
  } else if (variant == "mesh_only") {
    c.skeleton_branch = false;
    c.fusion_variant = "none";
  } else if (variant == "no_fusion") {
    c.fusion_variant = "none";
  } else if (variant == "fusion_at_first") {
    c.fusion_blocks = "first";
  } else if (variant == "fusion_at_last") {
    c.fusion_blocks = "last";
  } else if (variant == "avgpool_fusion") {
    c.fusion_variant = "avgpool";
  } else if (variant == "maxpool_fusion") {
    c.fusion_variant = "maxpool";
  } else if (variant == "shared_weights") {
    c.share_branch_weights = true;
  } else if (variant == "no_focal") {
    c.use_focal = false;
  } else if (variant == "global_feat_only") {
    c.use_local_feats = false;
  } else {
    throw ConfigError("unknown ablation variant '" + variant + "'");
  }
  validate_config(c);
  return c;
}

struct AblationOutcome {
  std::string variant;
  bool diverged = false;
  std::string divergence_reason;
  std::size_t param_count = 0;
  EvalReport report;
  TrainResult train_result;
};

// Trains every requested variant under the identical seed and data, then
// evaluates on a shared held-out pool. Divergence is reported per variant,
// not fatal.
inline std::vector<AblationOutcome> run_ablation(const std::vector<std::string>& variants,
                                                 const Config& base,
                                                 const std::string& out_dir = "") {
  SkinnedTemplate tmpl = template_from_config(base);
  FeatureMaps maps = feature_maps_from_config(tmpl, base);
  DataPools pools = build_train_pools(tmpl, maps, base);
  std::vector<SyntheticExample> eval_pool = build_eval_pool(tmpl, maps, base);

  std::vector<AblationOutcome> outcomes;
  for (const auto& variant : variants) {
    Config cfg = variant_config(base, variant);
    AblationOutcome outcome;
    outcome.variant = variant;
    BilayerNetwork net(tmpl, cfg);
    outcome.param_count = net.count_parameters();
    Trainer trainer(net, pools, cfg);
    const std::string variant_dir = out_dir.empty() ? "" : out_dir + "/" + variant;
    outcome.train_result = trainer.run(variant_dir);
    if (outcome.train_result.aborted) {
      outcome.diverged = true;
      outcome.divergence_reason = outcome.train_result.abort_reason;
    } else {
      outcome.report = evaluate_pool(net, tmpl, eval_pool);
      outcome.report.checkpoint_id = outcome.train_result.last_checkpoint;
    }
    outcomes.push_back(std::move(outcome));
  }
  return outcomes;
}

inline void write_ablation_csv(const std::vector<AblationOutcome>& outcomes,
                               const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("write_ablation_csv: cannot open " + path + " for writing");
  out << "variant,status,param_count,mpjpe_np,pampjpe_np,mpve_np,mpjpe_p,pampjpe_p,mpve_p\n";
  char buf[300];
  for (const auto& o : outcomes) {
    if (o.diverged) {
      out << o.variant << ",diverged," << o.param_count << ",,,,,,\n";
    } else {
      const auto& a = o.report.aggregate;
      std::snprintf(buf, sizeof(buf), "%s,ok,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g",
                    o.variant.c_str(), o.param_count, a.mpjpe_np, a.pampjpe_np, a.mpve_np,
                    a.mpjpe_p, a.pampjpe_p, a.mpve_p);
      out << buf << '\n';
    }
  }
}

struct PathDiagnosticRow {
  double threshold = 0.0;
  int mesh_only_diameter = 0;
  int bilayer_diameter = 0;
};

// Sweeps thresholds over the (normalized) effective fusion adjacency and
// reports BFS diameters of the mesh-only graph vs the combined graph
// (mesh + skeleton + surviving fusion edges).
inline std::vector<PathDiagnosticRow> diagnose_paths(const SkinnedTemplate& tmpl,
                                                     const std::vector<double>& thresholds,
                                                     const FusionAdjacency* trained = nullptr) {
  GraphTopology mesh_graph = build_mesh_adjacency(tmpl.body, false);
  const int mesh_diam = graph_diameter(mesh_graph);

  FusionAdjacency fresh;
  const FusionAdjacency* fa = trained;
  if (fa == nullptr) {
    fresh = FusionAdjacency(tmpl.body);
    fa = &fresh;
  }
  Tape scratch;
  Tensor eff = fa->effective(scratch);

  const int ns = tmpl.body.joint_count();
  const int nm = tmpl.body.mesh_count();
  std::vector<PathDiagnosticRow> rows;
  for (double thr : thresholds) {
    Tensor a(ns + nm, ns + nm);
    for (auto [u, v] : tmpl.body.joint_edges) {
      a.at(u, v) = 1.0;
      a.at(v, u) = 1.0;
    }
    for (auto [u, v] : tmpl.body.mesh_edges) {
      a.at(ns + u, ns + v) = 1.0;
      a.at(ns + v, ns + u) = 1.0;
    }
    for (int i = 0; i < ns + nm; ++i) {
      for (int j = 0; j < ns + nm; ++j) {
        if (eff.at(i, j) > thr) a.at(i, j) = 1.0;
      }
    }
    GraphTopology combined{ns + nm, a, GraphKind::fusion_static, false};
    rows.push_back({thr, mesh_diam, graph_diameter(combined)});
  }
  return rows;
}

inline void write_path_diagnostic_csv(const std::vector<PathDiagnosticRow>& rows,
                                      const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("write_path_diagnostic_csv: cannot open " + path);
  out << "threshold,mesh_only_diameter,bilayer_diameter\n";
  char buf[80];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.17g,%d,%d", r.threshold, r.mesh_only_diameter,
                  r.bilayer_diameter);
    out << buf << '\n';
  }
}

// Fusion adjacency dump for external visualization.
inline void write_fusion_csv(const Tensor& effective, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("write_fusion_csv: cannot open " + path);
  char buf[40];
  for (int i = 0; i < effective.rows(); ++i) {
    for (int j = 0; j < effective.cols(); ++j) {
      if (j) out << ',';
      std::snprintf(buf, sizeof(buf), "%.17g", effective.at(i, j));
      out << buf;
    }
    out << '\n';
  }
}

}  // namespace bilayer
