// Command-line surface for the bilayer graph network: synthetic data
// generation, training, evaluation, ablations and diagnostics. Machine
// readable outputs (CSV/JSON) go to --out; human summaries to stderr.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "bilayer/ablation.hpp"
#include "bilayer/checkpoint.hpp"
#include "bilayer/config.hpp"
#include "bilayer/grad_check.hpp"
#include "bilayer/losses.hpp"
#include "bilayer/metrics.hpp"
#include "bilayer/model.hpp"
#include "bilayer/training.hpp"

namespace {

using namespace bilayer;

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";
};

Config resolve_config(const CommonArgs& args) {
  Config cfg;
  if (!args.config_path.empty()) cfg = load_config(args.config_path);
  if (args.seed) cfg.seed = *args.seed;
  validate_config(cfg);
  return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON config file");
  cmd->add_option("--seed", args.seed, "Override the config seed");
  cmd->add_option("--out", args.out_dir, "Output directory");
}

DataPools pools_from_file_or_config(const Config& cfg, const std::string& data_path,
                                    const SkinnedTemplate& tmpl, const FeatureMaps& maps) {
  if (data_path.empty()) return build_train_pools(tmpl, maps, cfg);
  DataPools pools;
  for (auto& ex : load_dataset(data_path)) {
    pools[ex.dataset_id].push_back(std::move(ex));
  }
  if (pools.empty()) throw InputError("dataset file " + data_path + " holds no examples");
  return pools;
}

void restore_network(BilayerNetwork& net, const Checkpoint& ck) {
  restore_named(ck.params, net.parameters(), "checkpoint params");
  restore_named(ck.buffers, net.buffers(), "checkpoint buffers");
}

int cmd_gen_data(const CommonArgs& args) {
  Config cfg = resolve_config(args);
  SkinnedTemplate tmpl = template_from_config(cfg);
  FeatureMaps maps = feature_maps_from_config(tmpl, cfg);
  std::filesystem::create_directories(args.out_dir);
  DataPools pools = build_train_pools(tmpl, maps, cfg);
  std::size_t total = 0;
  for (const auto& [id, pool] : pools) {
    const std::string path = args.out_dir + "/" + id + ".jsonl";
    dump_dataset(pool, path);
    total += pool.size();
    std::cerr << "wrote " << pool.size() << " examples to " << path << "\n";
  }
  auto eval_pool = build_eval_pool(tmpl, maps, cfg);
  dump_dataset(eval_pool, args.out_dir + "/eval.jsonl");
  std::cerr << "wrote " << eval_pool.size() << " eval examples; " << total
            << " training examples total\n";
  return 0;
}

int cmd_train(const CommonArgs& args, const std::string& data_path,
              const std::string& resume_path) {
  Config cfg = resolve_config(args);
  SkinnedTemplate tmpl = template_from_config(cfg);
  FeatureMaps maps = feature_maps_from_config(tmpl, cfg);
  DataPools pools = pools_from_file_or_config(cfg, data_path, tmpl, maps);
  BilayerNetwork net(tmpl, cfg);
  Trainer trainer(net, pools, cfg);
  if (!resume_path.empty()) trainer.restore(load_checkpoint(resume_path));
  std::cerr << "training " << net.count_parameters() << " parameters, "
            << cfg.epochs * cfg.steps_per_epoch << " steps\n";
  TrainResult result = trainer.run(args.out_dir);
  if (result.aborted) {
    std::cerr << "aborted: " << result.abort_reason;
    if (!result.last_checkpoint.empty()) {
      std::cerr << " (last good checkpoint: " << result.last_checkpoint << ")";
    }
    std::cerr << "\n";
    return 1;
  }
  std::cerr << "done; metrics at " << result.metrics_path << ", final checkpoint at "
            << result.last_checkpoint << "\n";
  return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& checkpoint_path,
             const std::string& data_path) {
  Checkpoint ck = load_checkpoint(checkpoint_path);
  Config cfg = config_from_json(nlohmann::json::parse(ck.config_json));
  if (args.seed) cfg.seed = *args.seed;
  SkinnedTemplate tmpl = template_from_config(cfg);
  FeatureMaps maps = feature_maps_from_config(tmpl, cfg);
  BilayerNetwork net(tmpl, cfg);
  restore_network(net, ck);
  std::vector<SyntheticExample> pool;
  if (data_path.empty()) {
    pool = build_eval_pool(tmpl, maps, cfg);
  } else {
    pool = load_dataset(data_path);
  }
  EvalReport report = evaluate_pool(net, tmpl, pool);
  report.checkpoint_id = checkpoint_path;
  std::filesystem::create_directories(args.out_dir);
  write_eval_csv(report, args.out_dir + "/eval.csv");
  nlohmann::ordered_json j;
  j["checkpoint"] = report.checkpoint_id;
  j["config_hash"] = report.config_hash;
  j["examples"] = report.per_example.size();
  j["mpjpe_np"] = report.aggregate.mpjpe_np;
  j["pampjpe_np"] = report.aggregate.pampjpe_np;
  j["mpve_np"] = report.aggregate.mpve_np;
  j["mpjpe_p"] = report.aggregate.mpjpe_p;
  j["pampjpe_p"] = report.aggregate.pampjpe_p;
  j["mpve_p"] = report.aggregate.mpve_p;
  std::ofstream out(args.out_dir + "/eval.json");
  out << j.dump(2) << '\n';
  std::cerr << "MPJPE(np) " << report.aggregate.mpjpe_np << " mm, PA-MPJPE(np) "
            << report.aggregate.pampjpe_np << " mm, MPVE(np) " << report.aggregate.mpve_np
            << " mm over " << pool.size() << " examples\n";
  return 0;
}

int cmd_ablate(const CommonArgs& args, const std::string& spec) {
  Config cfg = resolve_config(args);
  std::vector<std::string> variants;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) variants.push_back(item);
  }
  if (variants.empty()) throw InputError("ablate: empty --spec");
  for (const auto& v : variants) variant_config(cfg, v);  // validate names up front
  std::cerr << "running " << variants.size() << " variants x "
            << cfg.epochs * cfg.steps_per_epoch << " steps\n";
  auto outcomes = run_ablation(variants, cfg, args.out_dir);
  std::filesystem::create_directories(args.out_dir);
  write_ablation_csv(outcomes, args.out_dir + "/ablation.csv");
  for (const auto& o : outcomes) {
    if (o.diverged) {
      std::cerr << o.variant << ": diverged (" << o.divergence_reason << ")\n";
    } else {
      std::cerr << o.variant << ": MPVE(np) " << o.report.aggregate.mpve_np << " mm, "
                << o.param_count << " params\n";
    }
  }
  std::cerr << "wrote " << args.out_dir << "/ablation.csv\n";
  return 0;
}

int cmd_diagnose(const CommonArgs& args, const std::string& checkpoint_path) {
  Config cfg = resolve_config(args);
  std::optional<Checkpoint> ck;
  if (!checkpoint_path.empty()) {
    ck = load_checkpoint(checkpoint_path);
    cfg = config_from_json(nlohmann::json::parse(ck->config_json));
  }
  SkinnedTemplate tmpl = template_from_config(cfg);
  std::vector<double> thresholds = {0.0,  1e-4, 5e-4, 1e-3, 5e-3,
                                    0.01, 0.02, 0.05, 0.1,  1.0};
  std::vector<PathDiagnosticRow> rows;
  if (ck) {
    BilayerNetwork net(tmpl, cfg);
    restore_network(net, *ck);
    if (!net.has_fusion_adjacency()) {
      throw InputError("diagnose: checkpointed model has no fusion adjacency");
    }
    rows = diagnose_paths(tmpl, thresholds, &net.fusion_adjacency());
  } else {
    rows = diagnose_paths(tmpl, thresholds);
  }
  std::filesystem::create_directories(args.out_dir);
  write_path_diagnostic_csv(rows, args.out_dir + "/paths.csv");
  std::cerr << "mesh-only diameter " << rows.front().mesh_only_diameter
            << "; bilayer diameter at threshold 0: " << rows.front().bilayer_diameter << "\n";
  std::cerr << "wrote " << args.out_dir << "/paths.csv\n";
  return 0;
}

int cmd_grad_check(const CommonArgs& args) {
  Config cfg = resolve_config(args);
  // Micro-scale network: every layer type exercised end to end.
  Config micro = cfg;
  micro.n_joints = 4;
  micro.d0 = 8;
  micro.dg = 6;
  micro.dl = 5;
  micro.blocks = 2;
  micro.param_head_hidden = 16;
  micro.mesh = "icosphere_42";  // placeholder; template built directly below
  SkinnedTemplate tmpl = make_template_from(make_icosphere(0), stick_skeleton(4), 0.2);
  BilayerNetwork net(tmpl, micro);
  FeatureMaps maps = make_feature_maps(tmpl, micro.dg, micro.dl, Rng(micro.seed, 5));
  DatasetOptions opt;
  auto pool = make_dataset(tmpl, maps, 1, opt, micro.seed + 71);
  const SyntheticExample& ex = pool[0];
  ModelInputs in;
  in.global_feat = ex.global_feat;
  in.local_feats = ex.local_feats;
  in.joints_2d = ex.joints2d_noisy;
  GroundTruth gt = ground_truth_of(ex);
  LossWeights w = LossWeights::from_config(micro);
  FocalConfig focal = FocalConfig::from_config(micro);
  FocalSwitches sw = FocalSwitches::from_config(micro);
  std::vector<Tensor> params;
  for (const auto& p : net.parameters()) params.push_back(p.tensor);
  RunningStats saved = *net.camera_head().bn_stats;
  double err = grad_check(
      [&](Tape& t) {
        *net.camera_head().bn_stats = saved;
        NetworkOutput out = net.forward(t, in, true);
        return total_loss(t, out, gt, w, focal, sw).total;
      },
      params, 1e-5);
  std::printf("%.3e\n", err);
  std::cerr << "end-to-end max relative gradient error over " << params.size()
            << " parameter tensors: " << err << "\n";
  return err < 1e-3 ? 0 : 1;
}

int cmd_dump_fusion(const CommonArgs& args, const std::string& checkpoint_path) {
  Config cfg = resolve_config(args);
  if (!checkpoint_path.empty()) {
    Checkpoint ck = load_checkpoint(checkpoint_path);
    cfg = config_from_json(nlohmann::json::parse(ck.config_json));
    SkinnedTemplate tmpl = template_from_config(cfg);
    BilayerNetwork net(tmpl, cfg);
    restore_network(net, ck);
    if (!net.has_fusion_adjacency()) {
      throw InputError("dump-fusion: checkpointed model has no fusion adjacency");
    }
    Tape scratch;
    std::filesystem::create_directories(args.out_dir);
    write_fusion_csv(net.fusion_adjacency().effective(scratch), args.out_dir + "/fusion.csv");
  } else {
    SkinnedTemplate tmpl = template_from_config(cfg);
    FusionAdjacency fa(tmpl.body);
    Tape scratch;
    std::filesystem::create_directories(args.out_dir);
    write_fusion_csv(fa.effective(scratch), args.out_dir + "/fusion.csv");
  }
  std::cerr << "wrote " << args.out_dir << "/fusion.csv\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bilayer mesh+skeleton graph network"};
  app.require_subcommand(1);

  CommonArgs gen_args;
  CLI::App* gen = app.add_subcommand("gen-data", "Generate synthetic example pools");
  add_common(gen, gen_args);

  CommonArgs train_args;
  std::string train_data, train_resume;
  CLI::App* train = app.add_subcommand("train", "Train a network");
  add_common(train, train_args);
  train->add_option("--data", train_data, "JSONL dataset (default: generate from config)");
  train->add_option("--resume", train_resume, "Checkpoint to continue from");

  CommonArgs eval_args;
  std::string eval_ckpt, eval_data;
  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(eval, eval_args);
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--data", eval_data, "JSONL dataset (default: generate from config)");

  CommonArgs ablate_args;
  std::string ablate_spec = "full,mesh_only,no_fusion,global_feat_only";
  CLI::App* ablate = app.add_subcommand("ablate", "Train and compare ablation variants");
  add_common(ablate, ablate_args);
  ablate->add_option("--spec", ablate_spec, "Comma-separated variant names");

  CommonArgs diag_args;
  std::string diag_ckpt;
  CLI::App* diagnose = app.add_subcommand("diagnose", "Graph-diameter threshold sweep");
  add_common(diagnose, diag_args);
  diagnose->add_option("--checkpoint", diag_ckpt, "Use the trained fusion adjacency");

  CommonArgs gc_args;
  CLI::App* gradcheck = app.add_subcommand("grad-check", "Finite-difference gradient check");
  add_common(gradcheck, gc_args);

  CommonArgs dump_args;
  std::string dump_ckpt;
  CLI::App* dump = app.add_subcommand("dump-fusion", "Write the effective fusion adjacency");
  add_common(dump, dump_args);
  dump->add_option("--checkpoint", dump_ckpt, "Checkpoint file (default: initial adjacency)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_args);
    if (train->parsed()) return cmd_train(train_args, train_data, train_resume);
    if (eval->parsed()) return cmd_eval(eval_args, eval_ckpt, eval_data);
    if (ablate->parsed()) return cmd_ablate(ablate_args, ablate_spec);
    if (diagnose->parsed()) return cmd_diagnose(diag_args, diag_ckpt);
    if (gradcheck->parsed()) return cmd_grad_check(gc_args);
    if (dump->parsed()) return cmd_dump_fusion(dump_args, dump_ckpt);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
