// Command line front end: dataset generation, training, evaluation, and the
// predefined experiments. All heavy lifting lives in the headers; this file
// only wires configs and files together.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "vodet/vodet.hpp"

using namespace vodet;
namespace fs = std::filesystem;

namespace {

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  nlohmann::json j;
  f >> j;
  return j;
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream f(path);
  f << j.dump(2) << "\n";
  if (!f) throw std::runtime_error("cannot write " + path);
}

double last_eval_map(const RunLog& log) {
  return log.evals.empty() ? -1.0 : log.evals.back().second.value("map", -1.0);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic video object detection: generate, train, evaluate, experiment"};
  app.require_subcommand(1);
  int exit_code = 0;

  // generate ----------------------------------------------------------------
  auto* gen = app.add_subcommand(
      "generate", "render a dataset root (or a single scene) from a JSON config");
  std::string gen_config, gen_out;
  uint64_t gen_seed = 0;
  gen->add_option("--config", gen_config,
                  "scene config, or a dataset config with scene/train_scenes/test_scenes")
      ->required()
      ->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "output directory")->required();
  auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "override the config seed");
  gen->callback([&] {
    nlohmann::json j = read_json_file(gen_config);
    if (j.contains("train_scenes") || j.contains("test_scenes") || j.contains("scene")) {
      DatasetGenConfig cfg = gen_config_from_json(j);
      if (*gen_seed_opt) cfg.seed = gen_seed;
      generate_dataset_root(cfg, gen_out);
      std::cout << "wrote dataset root " << gen_out << " (" << cfg.train_scenes << " train, "
                << cfg.test_scenes << " test scenes)\n";
    } else {
      SceneSpec spec = scene_spec_from_json(j);
      if (*gen_seed_opt) spec.seed = gen_seed;
      save_dataset(generate_scene(spec), gen_out);
      std::cout << "wrote scene " << gen_out << " (" << spec.num_frames << " frames)\n";
    }
  });

  // train ---------------------------------------------------------------
  auto* tr = app.add_subcommand("train", "train a detector and save checkpoint plus run log");
  std::string tr_config, tr_dataset, tr_out;
  std::string tr_variant;
  uint64_t tr_seed = 0;
  int tr_epochs = 0, tr_offset = 0, tr_eval_every = 0;
  long long tr_max_steps = 0;
  double tr_lr = 0.0;
  tr->add_option("--config", tr_config, "training config JSON; missing keys keep defaults")
      ->check(CLI::ExistingFile);
  tr->add_option("--dataset", tr_dataset, "dataset root or scene directory");
  tr->add_option("--out", tr_out, "output directory for checkpoint.ckpt and runlog.json")
      ->required();
  auto* tr_variant_opt =
      tr->add_option("--variant", tr_variant, "baseline, double, or flow")
          ->check(CLI::IsMember({"baseline", "double", "flow"}));
  auto* tr_seed_opt = tr->add_option("--seed", tr_seed);
  auto* tr_epochs_opt = tr->add_option("--epochs", tr_epochs);
  auto* tr_offset_opt = tr->add_option("--offset", tr_offset, "pairing offset in frames");
  auto* tr_lr_opt = tr->add_option("--lr", tr_lr, "learning rate");
  auto* tr_max_steps_opt = tr->add_option("--max-steps", tr_max_steps);
  auto* tr_eval_every_opt =
      tr->add_option("--eval-every", tr_eval_every, "epochs between mid-training evaluations");
  tr->callback([&] {
    TrainConfig cfg =
        tr_config.empty() ? TrainConfig{} : train_config_from_json(read_json_file(tr_config));
    if (!tr_dataset.empty()) cfg.dataset = tr_dataset;
    if (*tr_variant_opt) cfg.variant = variant_from_name(tr_variant);
    if (*tr_seed_opt) cfg.seed = tr_seed;
    if (*tr_epochs_opt) cfg.epochs = tr_epochs;
    if (*tr_offset_opt) cfg.offset = tr_offset;
    if (*tr_lr_opt) cfg.learning_rate = tr_lr;
    if (*tr_max_steps_opt) cfg.max_steps = tr_max_steps;
    if (*tr_eval_every_opt) cfg.eval_every = tr_eval_every;
    if (cfg.dataset.empty())
      throw CLI::ValidationError("train", "no dataset given (--dataset or config key)");

    Dataset data = load_dataset_root(cfg.dataset);
    TrainResult r = train(cfg, data);

    fs::create_directories(tr_out);
    std::string ckpt = (fs::path(tr_out) / "checkpoint.ckpt").string();
    save_checkpoint(ckpt, r.model);
    r.log.checkpoint_path = ckpt;
    write_json_file((fs::path(tr_out) / "runlog.json").string(), runlog_to_json(r.log));
    std::cout << "trained " << variant_name(cfg.variant) << " for "
              << r.log.total_losses.size() << " steps; final mAP " << last_eval_map(r.log)
              << "; checkpoint " << ckpt << "\n";
  });

  // evaluate ------------------------------------------------------------
  auto* ev = app.add_subcommand("evaluate", "run a checkpoint over a dataset split");
  std::string ev_ckpt, ev_dataset, ev_out, ev_split = "auto";
  double ev_score_thr = 0.3, ev_iou = 0.5;
  bool ev_stratified = false;
  ev->add_option("--checkpoint", ev_ckpt)->required()->check(CLI::ExistingFile);
  ev->add_option("--dataset", ev_dataset)->required();
  ev->add_option("--out", ev_out, "report directory")->required();
  ev->add_option("--split", ev_split, "train, test, or auto (test when present)")
      ->check(CLI::IsMember({"train", "test", "auto"}));
  ev->add_option("--score-thr", ev_score_thr, "detection score threshold");
  ev->add_option("--iou", ev_iou, "matching IoU threshold");
  ev->add_flag("--stratified", ev_stratified, "add per-scenario breakdowns");
  ev->callback([&] {
    ModelState model = load_checkpoint(ev_ckpt);
    Dataset data = load_dataset_root(ev_dataset);
    if (ev_split == "test" && data.test.empty())
      throw CLI::ValidationError("evaluate", "dataset has no test split");
    const auto& scenes =
        (ev_split == "train" || (ev_split == "auto" && data.test.empty())) ? data.train
                                                                           : data.test;
    TrainConfig ecfg;
    ecfg.score_thr = ev_score_thr;
    ecfg.eval_iou = ev_iou;
    // pair frames the way the checkpoint was trained
    bool fallback = model.spec.frame_offset == 0;
    PairBuilder builder(model.spec.variant, fallback ? 1 : model.spec.frame_offset, {},
                        16.0, fallback);
    EvalReport rep = evaluate_model(model, scenes, ecfg, builder, ev_stratified);
    write_eval_report(rep, ev_out, data.class_names);
    std::cout << "mAP " << rep.map << " over " << scenes.size() << " scenes; report in "
              << ev_out << "\n";
  });

  // experiment ----------------------------------------------------------
  auto* ex = app.add_subcommand("experiment", "run a predefined multi-seed comparison");
  ex->require_subcommand(1);
  std::string ex_config, ex_dataset, ex_dst_dataset, ex_out;
  std::vector<uint64_t> ex_seeds{1, 2, 3};
  std::vector<int> ex_offsets{1, 3, 5};
  double ex_band = 0.03;

  auto add_common = [&](CLI::App* sub, bool needs_dst) {
    sub->add_option("--config", ex_config, "training config JSON shared by all runs")
        ->check(CLI::ExistingFile);
    sub->add_option("--dataset", ex_dataset)->required();
    if (needs_dst)
      sub->add_option("--dst-dataset", ex_dst_dataset, "transfer destination dataset")
          ->required();
    sub->add_option("--out", ex_out, "report directory")->required();
    sub->add_option("--seeds", ex_seeds, "training seeds")->delimiter(',');
  };

  auto* ex_variants = ex->add_subcommand(
      "variants", "baseline vs double vs flow under identical budgets");
  add_common(ex_variants, false);
  auto* ex_offsets_cmd = ex->add_subcommand("offsets", "pairing offset sweep");
  add_common(ex_offsets_cmd, false);
  ex_offsets_cmd->add_option("--offsets", ex_offsets)->delimiter(',');
  ex_offsets_cmd->add_option("--band", ex_band, "allowed spread of mean mAP");
  auto* ex_transfer = ex->add_subcommand(
      "transfer", "pretrain, transfer all but the class head, fine-tune at half budget");
  add_common(ex_transfer, true);
  auto* ex_fallback = ex->add_subcommand(
      "fallback", "paired frames vs duplicated-frame fallback at evaluation");
  add_common(ex_fallback, false);

  auto run_experiment = [&](const std::string& which) {
    TrainConfig cfg =
        ex_config.empty() ? TrainConfig{} : train_config_from_json(read_json_file(ex_config));
    Dataset data = load_dataset_root(ex_dataset);
    ExperimentResult res;
    if (which == "variants") {
      res = experiment_compare_variants(cfg, data, ex_seeds);
    } else if (which == "offsets") {
      res = experiment_offset_sweep(cfg, data, ex_offsets, ex_seeds, ex_band);
    } else if (which == "transfer") {
      Dataset dst = load_dataset_root(ex_dst_dataset);
      res = experiment_transfer(cfg, data, dst, ex_seeds);
    } else {
      res = experiment_fallback(cfg, data, ex_seeds);
    }
    write_experiment_report(res, ex_out);
    std::cout << which << ": " << res.report.at("assertion").get<std::string>() << " -> "
              << (res.passed ? "pass" : "FAIL") << "; report in " << ex_out << "\n";
    if (!res.passed) exit_code = 2;
  };
  ex_variants->callback([&] { run_experiment("variants"); });
  ex_offsets_cmd->callback([&] { run_experiment("offsets"); });
  ex_transfer->callback([&] { run_experiment("transfer"); });
  ex_fallback->callback([&] { run_experiment("fallback"); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return exit_code;
}
