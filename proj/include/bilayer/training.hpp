#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "bilayer/checkpoint.hpp"
#include "bilayer/config.hpp"
#include "bilayer/errors.hpp"
#include "bilayer/losses.hpp"
#include "bilayer/model.hpp"
#include "bilayer/optim.hpp"
#include "bilayer/rng.hpp"
#include "bilayer/synthdata.hpp"

namespace bilayer {

// Ground-truth probability schedule: eps_i = k / (k + exp(i/k)), the
// inverse sigmoid decay.
inline double epsilon_schedule(double k, int epoch) {
  if (k <= 1.0) throw ConfigError("epsilon_schedule: k must exceed 1");
  if (epoch < 0) throw ConfigError("epsilon_schedule: negative epoch");
  const double x = static_cast<double>(epoch) / k;
  if (x > 700.0) return 0.0;  // exp would overflow; the limit is 0
  return k / (k + std::exp(x));
}

struct SamplingSchedule {
  double k = 4.0;

  double epsilon(int epoch) const { return epsilon_schedule(k, epoch); }
};

// Per-example choice between ground-truth and estimated 2D joints.
inline Tensor scheduled_joint_source(int epoch, const SamplingSchedule& schedule, Rng& rng,
                                     const Tensor& gt_joints2d, const Tensor& est_joints2d) {
  if (gt_joints2d.rows() != est_joints2d.rows() || gt_joints2d.cols() != est_joints2d.cols()) {
    throw ShapeError("scheduled_joint_source: sources differ in shape");
  }
  const double eps = schedule.epsilon(epoch);
  return rng.bernoulli(eps) ? gt_joints2d : est_joints2d;
}

using DataPools = std::map<std::string, std::vector<SyntheticExample>>;
using MixSpec = std::vector<std::pair<std::string, double>>;

// Per-dataset counts: floor(fraction * batch) with largest-remainder
// correction, then uniform draws with replacement from each pool.
inline std::vector<const SyntheticExample*> assemble_batch(const DataPools& pools,
                                                           const MixSpec& mix, int batch_size,
                                                           Rng& rng) {
  if (batch_size < 1) throw InputError("assemble_batch: batch_size must be positive");
  std::vector<int> counts(mix.size(), 0);
  std::vector<std::pair<double, std::size_t>> remainders;
  int assigned = 0;
  for (std::size_t i = 0; i < mix.size(); ++i) {
    const double exact = mix[i].second * batch_size;
    counts[i] = static_cast<int>(std::floor(exact));
    assigned += counts[i];
    remainders.emplace_back(exact - std::floor(exact), i);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (int r = 0; r < batch_size - assigned; ++r) {
    ++counts[remainders[static_cast<std::size_t>(r) % remainders.size()].second];
  }

  std::vector<const SyntheticExample*> batch;
  batch.reserve(static_cast<std::size_t>(batch_size));
  for (std::size_t i = 0; i < mix.size(); ++i) {
    if (counts[i] == 0) continue;
    auto it = pools.find(mix[i].first);
    if (it == pools.end() || it->second.empty()) {
      throw InputError("assemble_batch: dataset '" + mix[i].first +
                       "' is empty but has fraction " + std::to_string(mix[i].second));
    }
    const auto& pool = it->second;
    for (int c = 0; c < counts[i]; ++c) {
      batch.push_back(&pool[rng.next_below(pool.size())]);
    }
  }
  return batch;
}

inline const char* kLossTermNames[] = {"m", "mj3d", "mj2d", "s", "sj2d", "theta", "beta"};
constexpr int kNumLossTerms = 7;

struct MetricsRow {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  double terms[kNumLossTerms] = {0, 0, 0, 0, 0, 0, 0};
  double total = 0.0;
  double epsilon = 0.0;
  double wall_clock_s = 0.0;
};

struct TrainResult {
  std::vector<MetricsRow> history;
  bool aborted = false;
  std::string abort_reason;
  std::string last_checkpoint;
  std::string metrics_path;

  const MetricsRow& row_at_step(std::uint64_t step) const {
    for (const auto& r : history) {
      if (r.step == step) return r;
    }
    throw InputError("TrainResult: no metrics row at step " + std::to_string(step));
  }
};

namespace detail {

inline void append_csv_num(std::string& line, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  line += buf;
}

}  // namespace detail

inline std::string metrics_csv_header() {
  std::string h = "step,epoch";
  for (const char* n : kLossTermNames) {
    h += ",loss_";
    h += n;
  }
  h += ",total,epsilon,wall_clock_s";
  return h;
}

inline std::string metrics_csv_row(const MetricsRow& r) {
  std::string line = std::to_string(r.step) + "," + std::to_string(r.epoch);
  for (int t = 0; t < kNumLossTerms; ++t) {
    line += ',';
    detail::append_csv_num(line, r.terms[t]);
  }
  line += ',';
  detail::append_csv_num(line, r.total);
  line += ',';
  detail::append_csv_num(line, r.epsilon);
  line += ',';
  detail::append_csv_num(line, r.wall_clock_s);
  return line;
}

// The training loop: assemble batch -> forward -> total loss -> Adam, with
// scheduled sampling of the 2D joint input, periodic metrics logging and
// checkpointing. Fully reproducible under a fixed seed; a non-finite loss
// aborts with the last periodic checkpoint retained.
class Trainer {
 public:
  Trainer(BilayerNetwork& net, DataPools pools, const Config& cfg)
      : net_(net), pools_(std::move(pools)), cfg_(cfg), mix_(cfg.parse_mix()),
        schedule_{cfg.schedule_k},
        adam_(net.parameters(),
              AdamConfig{cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps}),
        rng_batch_(cfg.seed, 1), rng_sample_(cfg.seed, 2) {
    weights_ = LossWeights::from_config(cfg);
    focal_ = FocalConfig::from_config(cfg);
    switches_ = FocalSwitches::from_config(cfg);
  }

  std::uint64_t step() const { return step_; }

  Checkpoint snapshot() const {
    Checkpoint ck;
    ck.step = step_;
    ck.epoch = step_ / static_cast<std::uint64_t>(cfg_.steps_per_epoch);
    ck.config_json = config_to_json(cfg_).dump();
    ck.rng_batch_state = rng_batch_.state();
    ck.rng_sample_state = rng_sample_.state();
    for (const auto& p : net_.parameters()) ck.params.push_back({p.name, p.tensor.clone()});
    for (const auto& b : net_.buffers()) ck.buffers.push_back({b.name, b.tensor.clone()});
    ck.has_optim = true;
    ck.adam_step = adam_.step;
    for (std::size_t i = 0; i < adam_.params.size(); ++i) {
      ck.moments.emplace_back(adam_.params[i].name,
                              std::make_pair(adam_.m[i].clone(), adam_.v[i].clone()));
    }
    return ck;
  }

  void restore(const Checkpoint& ck) {
    if (ck.config_json != config_to_json(cfg_).dump()) {
      throw ConfigError("Trainer::restore: checkpoint config differs from the trainer config");
    }
    restore_named(ck.params, net_.parameters(), "restore params");
    restore_named(ck.buffers, net_.buffers(), "restore buffers");
    step_ = ck.step;
    rng_batch_ = Rng::from_state(ck.rng_batch_state);
    rng_sample_ = Rng::from_state(ck.rng_sample_state);
    if (ck.has_optim) {
      adam_.step = ck.adam_step;
      if (ck.moments.size() != adam_.params.size()) {
        throw InputError("Trainer::restore: optimizer moment count mismatch");
      }
      for (std::size_t i = 0; i < ck.moments.size(); ++i) {
        if (ck.moments[i].first != adam_.params[i].name) {
          throw InputError("Trainer::restore: moment name mismatch for '" +
                           ck.moments[i].first + "'");
        }
        adam_.m[i].data() = ck.moments[i].second.first.data();
        adam_.v[i].data() = ck.moments[i].second.second.data();
      }
    }
  }

  // Runs through cfg.epochs * cfg.steps_per_epoch total steps (continuing
  // from the restored step if any). out_dir empty: no files are written.
  TrainResult run(const std::string& out_dir = "") {
    TrainResult result;
    const bool writing = !out_dir.empty();
    std::ofstream metrics_out;
    std::ofstream terms_out;
    if (writing) {
      std::filesystem::create_directories(out_dir);
      result.metrics_path = out_dir + "/metrics.csv";
      const bool fresh = step_ == 0;
      metrics_out.open(result.metrics_path, fresh ? std::ios::out : std::ios::app);
      terms_out.open(out_dir + "/loss_terms.csv", fresh ? std::ios::out : std::ios::app);
      if (fresh) {
        metrics_out << metrics_csv_header() << '\n';
        terms_out << "step,term,value\n";
      }
    }

    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t total_steps =
        static_cast<std::uint64_t>(cfg_.epochs) * static_cast<std::uint64_t>(cfg_.steps_per_epoch);

    while (step_ < total_steps) {
      const std::uint64_t epoch = step_ / static_cast<std::uint64_t>(cfg_.steps_per_epoch);
      const double eps = schedule_.epsilon(static_cast<int>(epoch));
      auto batch = assemble_batch(pools_, mix_, cfg_.batch_size, rng_batch_);

      adam_.zero_grad();
      double term_sums[kNumLossTerms] = {0};
      int term_counts[kNumLossTerms] = {0};
      double total_sum = 0.0;
      for (const SyntheticExample* ex : batch) {
        Tape tape;
        ModelInputs in;
        in.global_feat = ex->global_feat;
        in.local_feats = ex->local_feats;
        in.joints_2d = scheduled_joint_source(static_cast<int>(epoch), schedule_, rng_sample_,
                                              ex->joints2d_gt, ex->joints2d_noisy);
        NetworkOutput out = net_.forward(tape, in, /*training=*/true);
        LossResult loss = total_loss(tape, out, ground_truth_of(*ex), weights_, focal_,
                                     switches_);
        total_sum += loss.total.value();
        for (int t = 0; t < kNumLossTerms; ++t) {
          if (loss.terms[static_cast<std::size_t>(t)].active) {
            term_sums[t] += loss.terms[static_cast<std::size_t>(t)].raw;
            ++term_counts[t];
          }
        }
        Tensor scaled = scale(tape, loss.total, 1.0 / cfg_.batch_size);
        tape.backward_from(scaled);
      }

      const double batch_total = total_sum / cfg_.batch_size;
      if (!std::isfinite(batch_total)) {
        result.aborted = true;
        result.abort_reason = "non-finite loss at step " + std::to_string(step_ + 1);
        result.last_checkpoint = last_checkpoint_;
        return result;
      }
      adam_.apply();
      ++step_;

      if (step_ % static_cast<std::uint64_t>(cfg_.log_interval) == 0 || step_ == total_steps) {
        MetricsRow row;
        row.step = step_;
        row.epoch = epoch;
        for (int t = 0; t < kNumLossTerms; ++t) {
          row.terms[t] = term_counts[t] > 0 ? term_sums[t] / term_counts[t] : 0.0;
        }
        row.total = batch_total;
        row.epsilon = eps;
        row.wall_clock_s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.history.push_back(row);
        if (writing) {
          metrics_out << metrics_csv_row(row) << '\n';
          for (int t = 0; t < kNumLossTerms; ++t) {
            if (term_counts[t] > 0) {
              std::string line = std::to_string(row.step) + "," + kLossTermNames[t] + ",";
              detail::append_csv_num(line, row.terms[t]);
              terms_out << line << '\n';
            }
          }
        }
      }
      if (writing && cfg_.checkpoint_interval > 0 &&
          step_ % static_cast<std::uint64_t>(cfg_.checkpoint_interval) == 0) {
        const std::string path = out_dir + "/ckpt_" + std::to_string(step_) + ".bin";
        save_checkpoint(snapshot(), path);
        last_checkpoint_ = path;
      }
    }

    if (writing) {
      const std::string path = out_dir + "/final.bin";
      save_checkpoint(snapshot(), path);
      last_checkpoint_ = path;
    }
    result.last_checkpoint = last_checkpoint_;
    return result;
  }

 private:
  BilayerNetwork& net_;
  DataPools pools_;
  Config cfg_;
  MixSpec mix_;
  SamplingSchedule schedule_;
  AdamState adam_;
  Rng rng_batch_;
  Rng rng_sample_;
  LossWeights weights_;
  FocalConfig focal_;
  FocalSwitches switches_;
  std::uint64_t step_ = 0;
  std::string last_checkpoint_;
};

// Deterministic pool construction from the config: one pool per mix entry,
// with per-pool seeds split from the config seed.
inline DataPools build_train_pools(const SkinnedTemplate& tmpl, const FeatureMaps& maps,
                                   const Config& cfg) {
  DataPools pools;
  const MixSpec mix = cfg.parse_mix();
  for (std::size_t i = 0; i < mix.size(); ++i) {
    DatasetOptions opt;
    opt.theta_max = cfg.theta_max;
    opt.beta_max = cfg.beta_max;
    opt.feature_noise = cfg.feature_noise;
    opt.detector_noise = cfg.detector_noise;
    opt.fraction_2d_only = cfg.fraction_2d_only;
    opt.dataset_id = mix[i].first;
    const int n = std::max(1, static_cast<int>(std::lround(cfg.n_train * mix[i].second)));
    pools[mix[i].first] =
        make_dataset(tmpl, maps, n, opt, Rng(cfg.seed, 100 + i).next_u64());
  }
  return pools;
}

inline std::vector<SyntheticExample> build_eval_pool(const SkinnedTemplate& tmpl,
                                                     const FeatureMaps& maps,
                                                     const Config& cfg) {
  DatasetOptions opt;
  opt.theta_max = cfg.theta_max;
  opt.beta_max = cfg.beta_max;
  opt.feature_noise = cfg.feature_noise;
  opt.detector_noise = cfg.detector_noise;
  opt.fraction_2d_only = 0.0;
  opt.dataset_id = "eval";
  return make_dataset(tmpl, maps, cfg.n_eval, opt, Rng(cfg.seed, 999).next_u64());
}

inline SkinnedTemplate template_from_config(const Config& cfg) {
  return make_template(mesh_kind_from_name(cfg.mesh), cfg.n_joints, cfg.skin_temperature,
                       cfg.mesh_file);
}

inline FeatureMaps feature_maps_from_config(const SkinnedTemplate& tmpl, const Config& cfg) {
  return make_feature_maps(tmpl, cfg.dg, cfg.dl, Rng(cfg.seed, 5));
}

}  // namespace bilayer
