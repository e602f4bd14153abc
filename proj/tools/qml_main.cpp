// Command line front end: generate / train / evaluate / ablation / verify.
#include <CLI11.hpp>

#include <cstdint>
#include <cstdio>
#include <exception>
#include <string>

#include "qml/config.hpp"
#include "qml/experiment.hpp"
#include "qml/log.hpp"
#include "qml/verify.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool dry_run = false;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool needs_out) {
  cmd->add_option("--config", args.config_path, "experiment config (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  auto* out = cmd->add_option("--out", args.out_dir, "output directory");
  if (needs_out) out->required();
  cmd->add_option("--seed", args.seed, "override the seed in the config");
  cmd->add_flag("--dry-run", args.dry_run, "validate the config and plan, write nothing");
}

qml::ExperimentConfig load_config(const CommonArgs& args, std::string& config_text) {
  config_text = qml::read_text_file(args.config_path);
  return qml::parse_experiment_config(config_text);
}

int cmd_generate(CommonArgs& args, bool seed_given) {
  std::string config_text;
  qml::ExperimentConfig cfg = load_config(args, config_text);
  if (!cfg.data.use_synthetic) {
    throw std::invalid_argument("generate: config must carry data.synthetic");
  }
  if (seed_given) cfg.data.synth.seed = args.seed;
  const qml::SynthConfig& sc = cfg.data.synth;
  std::size_t rows = static_cast<std::size_t>(sc.num_classes) *
                     static_cast<std::size_t>(sc.samples_per_class_per_modality) * 2;
  if (args.dry_run) {
    std::printf("generate: %d classes, dim %zu, %zu rows (dry run)\n", sc.num_classes, sc.dim,
                rows);
    return 0;
  }
  std::string path = qml::run_generate(cfg, args.out_dir, config_text);
  std::printf("generate: wrote %s (%d classes, %zu samples)\n", path.c_str(), sc.num_classes,
              rows);
  return 0;
}

int cmd_train(CommonArgs& args, bool seed_given) {
  std::string config_text;
  qml::ExperimentConfig cfg = load_config(args, config_text);
  if (seed_given) cfg.train.seed = args.seed;
  if (args.dry_run) {
    std::printf("train: %zu epochs x %zu batches, P=%zu K=%zu, variant %s (dry run)\n",
                cfg.train.epochs, cfg.train.batches_per_epoch, cfg.train.P, cfg.train.K,
                qml::variant_name(cfg.train.loss.variant));
    return 0;
  }
  qml::ExperimentResult res = qml::run_experiment(cfg, args.out_dir, config_text);
  std::printf("train: map_all=%s map_at_200=%s prec_at_100=%s prec_at_200=%s\n",
              qml::format_real(res.metrics.map_all).c_str(),
              qml::format_real(res.metrics.map_at_200).c_str(),
              qml::format_real(res.metrics.prec_at_100).c_str(),
              qml::format_real(res.metrics.prec_at_200).c_str());
  return 0;
}

int cmd_evaluate(CommonArgs& args, bool seed_given) {
  std::string config_text;
  qml::ExperimentConfig cfg = load_config(args, config_text);
  if (seed_given) cfg.train.seed = args.seed;
  if (args.dry_run) {
    std::printf("evaluate: would score %s/checkpoint.bin (dry run)\n", args.out_dir.c_str());
    return 0;
  }
  qml::RetrievalMetrics m = qml::run_evaluate(cfg, args.out_dir);
  std::printf("evaluate: map_all=%s map_at_200=%s prec_at_100=%s prec_at_200=%s\n",
              qml::format_real(m.map_all).c_str(), qml::format_real(m.map_at_200).c_str(),
              qml::format_real(m.prec_at_100).c_str(), qml::format_real(m.prec_at_200).c_str());
  return 0;
}

int cmd_ablation(CommonArgs& args, bool seed_given, std::size_t jobs) {
  if (seed_given) {
    throw std::invalid_argument("ablation: seeds come from the config's ablation.seeds list");
  }
  std::string config_text;
  qml::ExperimentConfig cfg = load_config(args, config_text);
  if (!cfg.ablation) {
    throw std::invalid_argument("ablation: config has no ablation section");
  }
  if (args.dry_run) {
    std::printf("ablation: %zu arms x %zu seeds = %zu cells, %zu job(s) (dry run)\n",
                cfg.ablation->arms.size(), cfg.ablation->seeds.size(),
                cfg.ablation->arms.size() * cfg.ablation->seeds.size(), jobs);
    for (const auto& arm : cfg.ablation->arms) {
      for (std::uint64_t s : cfg.ablation->seeds) std::printf("  %s seed=%llu\n", arm.c_str(),
                                                              (unsigned long long)s);
    }
    return 0;
  }
  auto cells = qml::run_ablation(cfg, args.out_dir, jobs, config_text);
  std::printf("ablation: %zu cells done, summary at %s/summary.csv\n", cells.size(),
              args.out_dir.c_str());
  return 0;
}

int cmd_verify(const std::string& fault_op, double fault_delta) {
  if (!fault_op.empty()) {
    qml::g_grad_fault = {fault_op, fault_delta};
    qml::log_info("verify: injected gradient fault on op '" + fault_op + "'");
  }
  auto checks = qml::run_verification();
  std::fputs(qml::verification_table(checks).c_str(), stdout);
  if (qml::all_passed(checks)) {
    std::printf("verify: all %zu checks passed\n", checks.size());
    return 0;
  }
  std::size_t failed = 0;
  for (const auto& c : checks) failed += c.pass ? 0 : 1;
  std::printf("verify: %zu of %zu checks FAILED\n", failed, checks.size());
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-modal metric learning testbed"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, eval_args, abl_args;
  std::size_t jobs = 1;
  std::string fault_op;
  double fault_delta = 1e-3;

  CLI::App* gen = app.add_subcommand("generate", "write a synthetic feature CSV");
  add_common(gen, gen_args, true);

  CLI::App* train = app.add_subcommand("train", "train and evaluate one experiment");
  add_common(train, train_args, true);

  CLI::App* eval = app.add_subcommand("evaluate", "re-score an existing checkpoint");
  add_common(eval, eval_args, true);

  CLI::App* abl = app.add_subcommand("ablation", "run the (arm x seed) sweep");
  add_common(abl, abl_args, true);
  abl->add_option("--jobs", jobs, "parallel cells")->check(CLI::Range(std::size_t{1}, std::size_t{64}));

  CLI::App* verify = app.add_subcommand("verify", "run the built-in verification suite");
  verify->add_option("--inject-grad-fault", fault_op,
                     "test hook: perturb gradients of the named op")
      ->group("");
  verify->add_option("--fault-delta", fault_delta, "test hook: perturbation size")->group("");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_generate(gen_args, gen->count("--seed") > 0);
    if (train->parsed()) return cmd_train(train_args, train->count("--seed") > 0);
    if (eval->parsed()) return cmd_evaluate(eval_args, eval->count("--seed") > 0);
    if (abl->parsed()) return cmd_ablation(abl_args, abl->count("--seed") > 0, jobs);
    if (verify->parsed()) return cmd_verify(fault_op, fault_delta);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "qml: %s\n", e.what());
    return 1;
  }
  std::fprintf(stderr, "qml: no subcommand\n");
  return 2;
}
