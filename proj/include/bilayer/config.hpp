#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "bilayer/errors.hpp"
#include "bilayer/rng.hpp"

namespace bilayer {

// Every knob of the artifact, flat. Serialized as a flat JSON object;
// unknown keys are rejected on load.
struct Config {
  // model
  int d0 = 64;
  int dg = 32;
  int dl = 16;
  int n_joints = 12;
  std::string mesh = "icosphere_42";
  std::string mesh_file;
  int blocks = 5;
  bool skeleton_branch = true;
  bool use_local_feats = true;
  std::string fusion_variant = "graph";    // graph | avgpool | maxpool | none
  std::string fusion_blocks = "all";       // all | first | last
  std::string fusion_placement = "pre";    // pre | post
  bool share_branch_weights = false;
  bool share_fusion_weights = false;
  std::string camera_variant = "relu_bn";  // relu_bn | leaky_relu | relu_plain
  int camera_source_block = -1;            // -1 selects the last block
  int head_hidden = 0;                     // 0 selects d0/2
  int param_head_hidden = 64;

  // losses
  double w_m = 1.0;
  double w_mj3d = 1.0;
  double w_mj2d = 1.0;
  double w_s = 1.0;
  double w_sj2d = 1.0;
  double w_theta = 1.0;
  double lambda_beta = 0.1;
  bool use_focal = true;
  bool focal_on_mesh_j3d = true;
  bool focal_on_skeleton = true;
  double focal_alpha = 1.0;
  double focal_gamma = 1.0;
  double focal_tau = 0.99;
  double focal_coeff = 5.0;
  std::string focal_truncation = "min";    // min | max_as_printed

  // training
  double lr = 2.5e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 16;
  int epochs = 20;
  int steps_per_epoch = 100;
  double schedule_k = 4.0;
  int log_interval = 50;
  int checkpoint_interval = 1000;
  std::uint64_t seed = 1;

  // data
  int n_train = 2000;
  int n_eval = 200;
  double theta_max = 0.5;
  double beta_max = 0.5;
  double feature_noise = 0.01;
  double detector_noise = 0.02;
  double fraction_2d_only = 0.0;
  double skin_temperature = 0.2;
  std::string mix = "synth:1.0";

  // Training scale from the original setting (the desk defaults above keep
  // runs CPU-sized).
  static Config paper_training() {
    Config c;
    c.batch_size = 64;
    c.epochs = 50;
    c.d0 = 512;
    c.lr = 2.5e-4;
    return c;
  }

  std::vector<std::pair<std::string, double>> parse_mix() const {
    std::vector<std::pair<std::string, double>> out;
    std::stringstream ss(mix);
    std::string item;
    double total = 0.0;
    while (std::getline(ss, item, ',')) {
      auto colon = item.find(':');
      if (colon == std::string::npos) {
        throw ConfigError("mix: expected 'id:fraction' entries, got '" + item + "'");
      }
      const std::string id = item.substr(0, colon);
      double frac = 0.0;
      try {
        frac = std::stod(item.substr(colon + 1));
      } catch (const std::exception&) {
        throw ConfigError("mix: bad fraction in '" + item + "'");
      }
      if (frac < 0.0) throw ConfigError("mix: negative fraction in '" + item + "'");
      total += frac;
      out.emplace_back(id, frac);
    }
    if (out.empty()) throw ConfigError("mix: empty specification");
    if (std::fabs(total - 1.0) > 1e-9) {
      throw ConfigError("mix: fractions sum to " + std::to_string(total) + ", expected 1");
    }
    return out;
  }
};

namespace detail {

template <typename T>
struct ConfigField {
  const char* key;
  T Config::*member;
};

inline constexpr ConfigField<int> kIntFields[] = {
    {"d0", &Config::d0},
    {"dg", &Config::dg},
    {"dl", &Config::dl},
    {"n_joints", &Config::n_joints},
    {"blocks", &Config::blocks},
    {"camera_source_block", &Config::camera_source_block},
    {"head_hidden", &Config::head_hidden},
    {"param_head_hidden", &Config::param_head_hidden},
    {"batch_size", &Config::batch_size},
    {"epochs", &Config::epochs},
    {"steps_per_epoch", &Config::steps_per_epoch},
    {"log_interval", &Config::log_interval},
    {"checkpoint_interval", &Config::checkpoint_interval},
    {"n_train", &Config::n_train},
    {"n_eval", &Config::n_eval},
};

inline constexpr ConfigField<double> kDoubleFields[] = {
    {"w_m", &Config::w_m},
    {"w_mj3d", &Config::w_mj3d},
    {"w_mj2d", &Config::w_mj2d},
    {"w_s", &Config::w_s},
    {"w_sj2d", &Config::w_sj2d},
    {"w_theta", &Config::w_theta},
    {"lambda_beta", &Config::lambda_beta},
    {"focal_alpha", &Config::focal_alpha},
    {"focal_gamma", &Config::focal_gamma},
    {"focal_tau", &Config::focal_tau},
    {"focal_coeff", &Config::focal_coeff},
    {"lr", &Config::lr},
    {"adam_beta1", &Config::adam_beta1},
    {"adam_beta2", &Config::adam_beta2},
    {"adam_eps", &Config::adam_eps},
    {"schedule_k", &Config::schedule_k},
    {"theta_max", &Config::theta_max},
    {"beta_max", &Config::beta_max},
    {"feature_noise", &Config::feature_noise},
    {"detector_noise", &Config::detector_noise},
    {"fraction_2d_only", &Config::fraction_2d_only},
    {"skin_temperature", &Config::skin_temperature},
};

inline constexpr ConfigField<bool> kBoolFields[] = {
    {"skeleton_branch", &Config::skeleton_branch},
    {"use_local_feats", &Config::use_local_feats},
    {"share_branch_weights", &Config::share_branch_weights},
    {"share_fusion_weights", &Config::share_fusion_weights},
    {"use_focal", &Config::use_focal},
    {"focal_on_mesh_j3d", &Config::focal_on_mesh_j3d},
    {"focal_on_skeleton", &Config::focal_on_skeleton},
};

inline constexpr ConfigField<std::string> kStringFields[] = {
    {"mesh", &Config::mesh},
    {"mesh_file", &Config::mesh_file},
    {"fusion_variant", &Config::fusion_variant},
    {"fusion_blocks", &Config::fusion_blocks},
    {"fusion_placement", &Config::fusion_placement},
    {"camera_variant", &Config::camera_variant},
    {"focal_truncation", &Config::focal_truncation},
    {"mix", &Config::mix},
};

inline void check_one_of(const std::string& key, const std::string& value,
                         std::initializer_list<const char*> allowed) {
  for (const char* a : allowed) {
    if (value == a) return;
  }
  std::string opts;
  for (const char* a : allowed) {
    if (!opts.empty()) opts += "|";
    opts += a;
  }
  throw ConfigError(key + ": '" + value + "' is not one of " + opts);
}

}  // namespace detail

inline void validate_config(const Config& c) {
  if (c.d0 <= 0 || c.d0 % 2 != 0) throw ConfigError("d0 must be positive and even");
  if (c.blocks < 1) throw ConfigError("blocks must be at least 1");
  if (c.n_joints < 2) throw ConfigError("n_joints must be at least 2");
  if (c.camera_source_block < -1 || c.camera_source_block >= c.blocks) {
    throw ConfigError("camera_source_block out of range");
  }
  if (c.batch_size < 1) throw ConfigError("batch_size must be positive");
  if (c.schedule_k <= 1.0) throw ConfigError("schedule_k must exceed 1");
  if (c.focal_tau <= 0.0 || c.focal_tau >= 1.0) throw ConfigError("focal_tau must lie in (0,1)");
  if (c.focal_alpha <= 0.0 || c.focal_gamma <= 0.0) {
    throw ConfigError("focal_alpha and focal_gamma must be positive");
  }
  for (double w : {c.w_m, c.w_mj3d, c.w_mj2d, c.w_s, c.w_sj2d, c.w_theta, c.lambda_beta,
                   c.focal_coeff}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and >= 0");
  }
  detail::check_one_of("mesh", c.mesh, {"icosphere_42", "icosphere_162", "custom_file"});
  detail::check_one_of("fusion_variant", c.fusion_variant, {"graph", "avgpool", "maxpool", "none"});
  detail::check_one_of("fusion_blocks", c.fusion_blocks, {"all", "first", "last"});
  detail::check_one_of("fusion_placement", c.fusion_placement, {"pre", "post"});
  detail::check_one_of("camera_variant", c.camera_variant,
                       {"relu_bn", "leaky_relu", "relu_plain"});
  detail::check_one_of("focal_truncation", c.focal_truncation, {"min", "max_as_printed"});
  c.parse_mix();
}

inline nlohmann::json config_to_json(const Config& c) {
  nlohmann::ordered_json j;
  for (const auto& f : detail::kIntFields) j[f.key] = c.*(f.member);
  for (const auto& f : detail::kDoubleFields) j[f.key] = c.*(f.member);
  for (const auto& f : detail::kBoolFields) j[f.key] = c.*(f.member);
  for (const auto& f : detail::kStringFields) j[f.key] = c.*(f.member);
  j["seed"] = c.seed;
  return j;
}

inline Config config_from_json(const nlohmann::json& j) {
  Config c;
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    if (key == "seed") {
      c.seed = value.get<std::uint64_t>();
      known = true;
    }
    for (const auto& f : detail::kIntFields) {
      if (key == f.key) {
        c.*(f.member) = value.get<int>();
        known = true;
      }
    }
    for (const auto& f : detail::kDoubleFields) {
      if (key == f.key) {
        c.*(f.member) = value.get<double>();
        known = true;
      }
    }
    for (const auto& f : detail::kBoolFields) {
      if (key == f.key) {
        c.*(f.member) = value.get<bool>();
        known = true;
      }
    }
    for (const auto& f : detail::kStringFields) {
      if (key == f.key) {
        c.*(f.member) = value.get<std::string>();
        known = true;
      }
    }
    if (!known) throw ConfigError("unknown config key '" + key + "'");
  }
  validate_config(c);
  return c;
}

inline Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("load_config: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("load_config: " + path + ": " + e.what());
  }
  return config_from_json(j);
}

inline void save_config(const Config& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("save_config: cannot open " + path + " for writing");
  out << config_to_json(c).dump(2) << '\n';
}

inline std::string config_hash(const Config& c) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a(config_to_json(c).dump())));
  return buf;
}

}  // namespace bilayer
