// Command-line front end: dataset export, the two training stages, evaluator
// pretraining, metric reports, threshold sweeps, and the ablation grid.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "actloc/trainer.hpp"

namespace {

using namespace actloc;

struct CommonArgs {
  std::string config_path;
  std::string out_dir = "runs";
  std::uint64_t seed = 0;
  bool seed_given = false;
};

void add_common(CLI::App* sub, CommonArgs& args) {
  sub->add_option("--config", args.config_path, "JSON config file mirroring the training settings");
  sub->add_option("--out", args.out_dir, "output directory")->capture_default_str();
  sub->add_option("--seed", args.seed, "master seed override")->each([&](const std::string&) {
    args.seed_given = true;
  });
}

void add_ablation_flags(CLI::App* sub, TrainConfig& cfg) {
  sub->add_flag("--use_Lw,!--no-use_Lw", cfg.ablation.use_Lw, "weighted entropy term");
  sub->add_flag("--use_La,!--no-use_La", cfg.ablation.use_La, "area term");
  sub->add_flag("--use_AE,!--no-use_AE", cfg.ablation.use_AE, "attentive erasing");
  sub->add_flag("--use_Lh_instead_of_Lw", cfg.ablation.use_Lh_instead_of_Lw,
                "swap the weighted entropy term for plain entropy");
  sub->add_flag("--detach_gamma", cfg.ablation.detach_gamma,
                "treat the Gaussian weight as a constant during backprop");
  sub->add_flag("--freeze_stem", cfg.ablation.freeze_stem, "do not update the stem in stage 2");
}

TrainConfig resolve_config(const CommonArgs& args) {
  TrainConfig cfg = args.config_path.empty() ? TrainConfig{} : load_config(args.config_path);
  if (args.seed_given) cfg.seed = args.seed;
  return cfg;
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw CLI::ValidationError("--split", "expected train, val, or test");
}

void cmd_gen_data(const TrainConfig& cfg, const std::string& out_dir) {
  namespace fs = std::filesystem;
  const DataGenConfig dcfg = cfg.data_cfg();
  for (Split split : {Split::train, Split::val, Split::test}) {
    const auto samples = generate_split(dcfg, split);
    const std::string dir = out_dir + "/data/" + split_name(split);
    fs::create_directories(dir);
    char name[32];
    for (std::size_t i = 0; i < samples.size(); ++i) {
      std::snprintf(name, sizeof(name), "img_%05zu.ppm", i);
      write_ppm(dir + "/" + name, samples[i].image);
    }
    write_annotations_csv(dir + "/annotations.csv", samples);
    std::printf("%s: %zu images -> %s\n", split_name(split), samples.size(), dir.c_str());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-stage activation-map localization on synthetic shapes"};
  app.require_subcommand(1);

  CommonArgs common;
  TrainConfig flag_cfg;  // receives CLI ablation flags; merged after config load

  auto* gen = app.add_subcommand("gen-data", "generate the dataset and export images + boxes");
  add_common(gen, common);

  auto* pre = app.add_subcommand("pretrain-evaluator", "train the frozen-stage evaluator");
  add_common(pre, common);
  std::string pre_resume;
  pre->add_option("--resume", pre_resume, "checkpoint to continue from");

  auto* train = app.add_subcommand("train", "run one training stage");
  add_common(train, common);
  int stage = 1;
  train->add_option("--stage", stage, "training stage")->check(CLI::Range(1, 2))->required();
  std::string train_resume, stage1_ckpt, evaluator_ckpt;
  train->add_option("--resume", train_resume, "checkpoint to continue from");
  train->add_option("--stage1-ckpt", stage1_ckpt, "stage-1 checkpoint (stage 2 input)");
  train->add_option("--evaluator-ckpt", evaluator_ckpt, "evaluator checkpoint (stage 2 input)");
  add_ablation_flags(train, flag_cfg);

  auto* ev = app.add_subcommand("eval", "metric report for a checkpoint");
  add_common(ev, common);
  double theta = 0.5;
  std::string eval_ckpt, eval_split = "test";
  ev->add_option("--threshold", theta, "binarization threshold")->capture_default_str();
  ev->add_option("--ckpt", eval_ckpt, "checkpoint to evaluate");
  ev->add_option("--split", eval_split, "train, val, or test")->capture_default_str();

  auto* sweep = app.add_subcommand("sweep", "CorLoc across thresholds 0.1..0.9");
  add_common(sweep, common);
  std::string sweep_ckpt, sweep_split = "test";
  sweep->add_option("--ckpt", sweep_ckpt, "checkpoint to evaluate");
  sweep->add_option("--split", sweep_split, "train, val, or test")->capture_default_str();

  auto* ablate = app.add_subcommand("ablate", "train and score the 9-row ablation grid");
  add_common(ablate, common);
  std::string ab_stage1, ab_eval;
  ablate->add_option("--stage1-ckpt", ab_stage1, "shared stage-1 checkpoint");
  ablate->add_option("--evaluator-ckpt", ab_eval, "shared evaluator checkpoint");

  auto* hist = app.add_subcommand("hist", "activation histogram for a checkpoint");
  add_common(hist, common);
  std::string hist_ckpt, hist_split = "test";
  hist->add_option("--ckpt", hist_ckpt, "checkpoint to evaluate");
  hist->add_option("--split", hist_split, "train, val, or test")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    TrainConfig cfg = resolve_config(common);
    // CLI ablation flags override the config only when actually given.
    if (train->parsed()) {
      if (train->count("--use_Lw")) cfg.ablation.use_Lw = flag_cfg.ablation.use_Lw;
      if (train->count("--use_La")) cfg.ablation.use_La = flag_cfg.ablation.use_La;
      if (train->count("--use_AE")) cfg.ablation.use_AE = flag_cfg.ablation.use_AE;
      if (train->count("--use_Lh_instead_of_Lw"))
        cfg.ablation.use_Lh_instead_of_Lw = flag_cfg.ablation.use_Lh_instead_of_Lw;
      if (train->count("--detach_gamma")) cfg.ablation.detach_gamma = flag_cfg.ablation.detach_gamma;
      if (train->count("--freeze_stem")) cfg.ablation.freeze_stem = flag_cfg.ablation.freeze_stem;
    }

    if (gen->parsed()) {
      cmd_gen_data(cfg, common.out_dir);
    } else if (pre->parsed()) {
      const TrainResult r = pretrain_evaluator(cfg, common.out_dir, pre_resume);
      std::printf("evaluator best val accuracy %.4f -> %s\n", r.best_metric, r.best_path.c_str());
    } else if (train->parsed()) {
      if (stage == 1) {
        const TrainResult r = train_stage1(cfg, common.out_dir, train_resume);
        std::printf("stage 1 best val accuracy %.4f -> %s\n", r.best_metric, r.best_path.c_str());
      } else {
        if (stage1_ckpt.empty()) stage1_ckpt = common.out_dir + "/stage1_best.ckpt";
        if (evaluator_ckpt.empty()) evaluator_ckpt = common.out_dir + "/evaluator_best.ckpt";
        const TrainResult r =
            train_stage2(cfg, stage1_ckpt, evaluator_ckpt, common.out_dir, train_resume);
        std::printf("stage 2 best val CorLoc %.4f -> %s\n", r.best_metric, r.best_path.c_str());
      }
    } else if (ev->parsed()) {
      if (eval_ckpt.empty()) eval_ckpt = common.out_dir + "/stage2_best.ckpt";
      const MetricsReport rep =
          evaluate_checkpoint(cfg, eval_ckpt, parse_split(eval_split), theta, common.out_dir);
      std::printf("corloc %.4f  top1-locerr %.4f  top5-locerr %.4f  top1-clserr %.4f  uncertain %.4f\n",
                  rep.corloc, rep.top1_locerr, rep.top5_locerr, rep.top1_clserr,
                  rep.uncertain_mass);
    } else if (sweep->parsed()) {
      if (sweep_ckpt.empty()) sweep_ckpt = common.out_dir + "/stage2_best.ckpt";
      const auto rows = threshold_sweep(cfg, sweep_ckpt, parse_split(sweep_split), common.out_dir);
      for (const auto& [t, c] : rows) std::printf("theta %.1f  corloc %.4f\n", t, c);
    } else if (ablate->parsed()) {
      if (ab_stage1.empty()) ab_stage1 = common.out_dir + "/stage1_best.ckpt";
      if (ab_eval.empty()) ab_eval = common.out_dir + "/evaluator_best.ckpt";
      const auto rows = run_ablation(cfg, ab_stage1, ab_eval, common.out_dir + "/ablation");
      for (const auto& r : rows)
        std::printf("Lw=%d La=%d AE=%d Lh=%d  corloc %.4f\n", r.use_Lw, r.use_La, r.use_AE,
                    r.use_Lh, r.corloc);
    } else if (hist->parsed()) {
      if (hist_ckpt.empty()) hist_ckpt = common.out_dir + "/stage2_best.ckpt";
      const HistogramResult h =
          map_histogram(cfg, hist_ckpt, parse_split(hist_split), common.out_dir);
      std::printf("uncertain mass %.4f over %lld map pixels\n", h.uncertain_mass,
                  static_cast<long long>(h.total));
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
