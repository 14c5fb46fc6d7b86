// Command-line front end: data generation, training, evaluation, inference,
// gradient checking, the ablation harness, and the parameter ledger.
//
// Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 numerical
// failure.

#include <CLI11.hpp>

#include <iostream>

#include "sflab/gradcheck_suite.hpp"
#include "sflab/run_config.hpp"
#include "sflab/scene_gen.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  int64_t seed = -1;  // -1: keep config/default seed
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "key = value configuration file");
  cmd->add_option("--set", args.overrides, "override a config key, e.g. --set train.epochs=20");
  cmd->add_option("--seed", args.seed, "override every seed in the configuration");
}

sflab::RunConfig resolve_config(const CommonArgs& args) {
  sflab::RunConfig cfg;
  if (!args.config_path.empty()) sflab::load_config_file(cfg, args.config_path);
  for (const std::string& kv : args.overrides) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    };
    sflab::set_config_key(cfg, trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }
  if (args.seed >= 0) cfg.seed = static_cast<uint64_t>(args.seed);
  cfg.apply_seed();
  return cfg;
}

std::vector<sflab::ScenePair> load_pairs(const std::string& data_path,
                                         const sflab::NetworkConfig& net, uint64_t seed) {
  const sflab::NetworkConfig resolved = net.resolved();
  std::vector<sflab::ScenePair> pairs;
  uint64_t index = 0;
  for (const std::string& file : sflab::list_pair_files(data_path)) {
    sflab::ScenePair pair = sflab::read_pair(file);
    if (pair.n1() > resolved.n_input) {
      // Fixed-size inputs: subsample deterministically per file.
      sflab::PointCloud pc1 = sflab::cloud_from_coords(pair.pc1);
      pc1.mask = pair.mask;
      auto s1 = sflab::random_subsample(pc1, resolved.n_input, seed + index);
      sflab::PointCloud pc2 = sflab::cloud_from_coords(pair.pc2);
      auto s2 = sflab::random_subsample(pc2, resolved.n_input, seed + index + 1);
      sflab::ScenePair cut;
      cut.pc1.assign(s1.cloud.coords.values().begin(), s1.cloud.coords.values().end());
      cut.pc2.assign(s2.cloud.coords.values().begin(), s2.cloud.coords.values().end());
      cut.mask = *s1.cloud.mask;
      for (int64_t i : s1.indices) {
        for (int c = 0; c < 3; ++c) cut.gt_flow.push_back(pair.gt_flow[i * 3 + c]);
      }
      pair = std::move(cut);
    }
    pairs.push_back(std::move(pair));
    index += 2;
  }
  return pairs;
}

void print_report(const sflab::MetricReport& r) {
  std::printf("EPE3D        %.6f\n", r.epe3d);
  std::printf("Acc3D strict %.6f\n", r.acc3d_strict);
  std::printf("Acc3D relax  %.6f\n", r.acc3d_relax);
  std::printf("Outliers3D   %.6f\n", r.outliers3d);
  if (r.epe2d) std::printf("EPE2D        %.6f\n", *r.epe2d);
  if (r.acc2d) std::printf("Acc2D        %.6f\n", *r.acc2d);
  std::printf("points       %lld\n", static_cast<long long>(r.n_evaluated));
}

void write_report_csv(const std::string& path, const sflab::MetricReport& r) {
  std::ofstream out(path);
  if (!out) throw sflab::IoError("cannot open '" + path + "' for writing");
  out << "epe3d,acc3d_strict,acc3d_relax,outliers3d,epe2d,acc2d,n_points\n";
  char buf[256];
  std::snprintf(buf, sizeof buf, "%.9f,%.9f,%.9f,%.9f,", r.epe3d, r.acc3d_strict, r.acc3d_relax,
                r.outliers3d);
  out << buf;
  if (r.epe2d) out << *r.epe2d;
  out << ',';
  if (r.acc2d) out << *r.acc2d;
  out << ',' << r.n_evaluated << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sflab: coarse-to-fine 3D scene flow on point clouds"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, eval_args, infer_args, grad_args, ablate_args, describe_args;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate synthetic scene pairs");
  std::string gen_out;
  int64_t gen_count = 8;
  std::string gen_split;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--count", gen_count, "number of pairs");
  gen->add_option("--split", gen_split, "write split manifests, e.g. 0.8,0.2");
  add_common(gen, gen_args);

  // train
  auto* tr = app.add_subcommand("train", "train a model");
  std::string train_data, train_out, train_init;
  tr->add_option("--data", train_data, "pair directory or manifest")->required();
  tr->add_option("--out", train_out, "output directory for checkpoints and logs")->required();
  tr->add_option("--init", train_init, "checkpoint to resume from");
  add_common(tr, train_args);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a model or a prediction file");
  std::string eval_model, eval_data, eval_pred, eval_gt, eval_out;
  ev->add_option("--model", eval_model, "checkpoint to evaluate");
  ev->add_option("--data", eval_data, "pair directory or manifest");
  ev->add_option("--pred", eval_pred, "pair file whose flow field is the prediction");
  ev->add_option("--gt", eval_gt, "pair file whose flow field is the ground truth");
  ev->add_option("--out", eval_out, "write the report as CSV");
  add_common(ev, eval_args);

  // infer
  auto* in = app.add_subcommand("infer", "predict flow for one pair");
  std::string infer_model, infer_pair, infer_out;
  in->add_option("--model", infer_model, "checkpoint")->required();
  in->add_option("--pair", infer_pair, "input pair file")->required();
  in->add_option("--out", infer_out, "output pair file with predicted flow")->required();
  add_common(in, infer_args);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every layer");
  add_common(gc, grad_args);

  // ablate
  auto* ab = app.add_subcommand("ablate", "train and score every studied variant");
  std::string ablate_train, ablate_eval, ablate_out;
  ab->add_option("--data", ablate_train, "training pairs (directory or manifest)")->required();
  ab->add_option("--eval", ablate_eval, "held-out pairs (directory or manifest)")->required();
  ab->add_option("--out", ablate_out, "output CSV")->required();
  add_common(ab, ablate_args);

  // describe
  auto* de = app.add_subcommand("describe", "print the parameter ledger");
  add_common(de, describe_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) {
      sflab::RunConfig cfg = resolve_config(gen_args);
      std::filesystem::create_directories(gen_out);
      std::ofstream manifest(std::filesystem::path(gen_out) / "manifest.txt");
      if (!manifest) throw sflab::IoError("cannot write manifest in '" + gen_out + "'");
      for (int64_t i = 0; i < gen_count; ++i) {
        sflab::SceneGenConfig g = cfg.gen;
        g.seed = cfg.gen.seed + static_cast<uint64_t>(i);
        char name[32];
        std::snprintf(name, sizeof name, "pair_%06lld.sfp", static_cast<long long>(i));
        sflab::write_pair(sflab::generate(g), (std::filesystem::path(gen_out) / name).string());
        manifest << name << '\n';
      }
      manifest.close();
      if (!gen_split.empty()) {
        std::vector<double> fractions;
        for (const std::string& part : sflab::detail::split_csv(gen_split)) {
          fractions.push_back(sflab::detail::parse_double("--split", part));
        }
        sflab::make_split(gen_out, fractions, cfg.seed);
      }
      std::printf("wrote %lld pairs to %s\n", static_cast<long long>(gen_count),
                  gen_out.c_str());
      return kExitOk;
    }

    if (*tr) {
      sflab::RunConfig cfg = resolve_config(train_args);
      sflab::Model model = sflab::build(cfg.network);
      if (!train_init.empty()) model.store.load(train_init);
      auto pairs = load_pairs(train_data, cfg.network, cfg.seed);
      sflab::TrainResult result =
          sflab::train(model, pairs, cfg.train, cfg.loss, train_out, [](const auto& s) {
            std::printf("epoch %d  lr %.6g  loss %.6g\n", s.epoch, s.lr, s.mean_loss);
          });
      std::printf("final checkpoint: %s\n", result.final_checkpoint.c_str());
      return kExitOk;
    }

    if (*ev) {
      sflab::RunConfig cfg = resolve_config(eval_args);
      sflab::MetricReport report;
      if (!eval_pred.empty() || !eval_gt.empty()) {
        if (eval_pred.empty() || eval_gt.empty()) {
          throw std::invalid_argument("eval: --pred and --gt must be given together");
        }
        sflab::ScenePair pred = sflab::read_pair(eval_pred);
        sflab::ScenePair gt = sflab::read_pair(eval_gt);
        if (pred.n1() != gt.n1()) {
          throw std::invalid_argument("eval: prediction and ground truth differ in size");
        }
        report = sflab::evaluate(pred.gt_flow, gt.gt_flow, gt.mask.data());
      } else if (!eval_model.empty() && !eval_data.empty()) {
        sflab::Model model = sflab::build(cfg.network);
        model.store.load(eval_model);
        auto pairs = load_pairs(eval_data, cfg.network, cfg.seed);
        report = sflab::evaluate_model(model, pairs);
      } else {
        throw std::invalid_argument("eval: need either --model with --data, or --pred with --gt");
      }
      print_report(report);
      if (!eval_out.empty()) write_report_csv(eval_out, report);
      return kExitOk;
    }

    if (*in) {
      sflab::RunConfig cfg = resolve_config(infer_args);
      sflab::Model model = sflab::build(cfg.network);
      model.store.load(infer_model);
      sflab::ScenePair pair = sflab::read_pair(infer_pair);
      sflab::InferResult result = sflab::infer(model, pair);
      // The finest level covers a subset of the raw input; the written pair
      // holds exactly the predicted points.
      sflab::ScenePair out;
      out.pc2 = pair.pc2;
      for (size_t i = 0; i < result.input_indices.size(); ++i) {
        const int64_t src = result.input_indices[i];
        for (int c = 0; c < 3; ++c) out.pc1.push_back(pair.pc1[src * 3 + c]);
      }
      out.gt_flow = result.flow;
      out.mask = result.mask;
      sflab::write_pair(out, infer_out);
      if (!result.per_point_epe.empty()) {
        double sum = 0;
        int64_t n = 0;
        for (size_t i = 0; i < result.per_point_epe.size(); ++i) {
          if (!result.mask[i]) continue;
          sum += result.per_point_epe[i];
          ++n;
        }
        if (n > 0) std::printf("mean EPE3D over %lld valid points: %.6f\n",
                               static_cast<long long>(n), sum / n);
      }
      std::printf("wrote %s\n", infer_out.c_str());
      return kExitOk;
    }

    if (*gc) {
      sflab::RunConfig cfg = resolve_config(grad_args);
      auto rows = sflab::gradcheck_layers(cfg.network);
      bool ok = true;
      std::printf("%-44s %14s %8s\n", "layer", "max_rel_error", "seconds");
      for (const auto& row : rows) {
        const bool pass = row.max_rel_error < 1e-4;
        ok = ok && pass;
        std::printf("%-44s %14.3e %8.2f  %s\n", row.name.c_str(), row.max_rel_error,
                    row.seconds, pass ? "ok" : "FAIL");
      }
      return ok ? kExitOk : kExitCheckFailed;
    }

    if (*ab) {
      sflab::RunConfig cfg = resolve_config(ablate_args);
      auto train_pairs = load_pairs(ablate_train, cfg.network, cfg.seed);
      auto eval_pairs = load_pairs(ablate_eval, cfg.network, cfg.seed + 1000003);
      auto variants = sflab::ablation_variants(cfg.network);
      auto rows = sflab::run_ablation(variants, train_pairs, eval_pairs, cfg.train, cfg.loss,
                                      &std::cout);
      sflab::write_ablation_csv(ablate_out, rows);
      std::printf("wrote %s\n", ablate_out.c_str());
      return kExitOk;
    }

    if (*de) {
      sflab::RunConfig cfg = resolve_config(describe_args);
      sflab::Model model = sflab::build(cfg.network);
      std::fputs(sflab::describe(model).c_str(), stdout);
      return kExitOk;
    }
  } catch (const sflab::NumericalError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  return kExitUsage;
}
