#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "vodet/harness.hpp"

using namespace vodet;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("vodet_harness_" + std::to_string(::getpid()) + "_" +
            std::to_string(reinterpret_cast<uintptr_t>(this)));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

SceneSpec tiny_scene_spec(uint64_t seed = 1) {
  SceneSpec s;
  s.image_width = 48;
  s.image_height = 48;
  s.num_frames = 6;
  s.classes = {{"blob", 8.0, 12.0, 0.5, 2.0}, {"chip", 6.0, 9.0, 0.5, 2.0}};
  s.min_objects = 2;
  s.max_objects = 3;
  s.seed = seed;
  return s;
}

DatasetGenConfig tiny_gen_config(uint64_t seed = 1) {
  DatasetGenConfig g;
  g.scene = tiny_scene_spec();
  g.train_scenes = 2;
  g.test_scenes = 1;
  g.seed = seed;
  return g;
}

ModelSpec tiny_model_template() {
  ModelSpec m;
  m.anchor_config = {{4, 8}, {1.0, 1.6}, {0.7, 1.4}, 8.0};
  m.backbone_widths = {8, 12, 16};
  m.fpn_channels = 8;
  m.head_depth = 1;
  return m;
}

TrainConfig tiny_train_config() {
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.epochs = 1;
  c.model = tiny_model_template();
  return c;
}

Dataset make_dataset(const TempDir& tmp, const char* name, uint64_t seed = 1) {
  std::string dir = (tmp.path / name).string();
  generate_dataset_root(tiny_gen_config(seed), dir);
  return load_dataset_root(dir);
}

bool models_equal(const ModelState& a, const ModelState& b) {
  if (a.layers.size() != b.layers.size() || a.step != b.step) return false;
  for (size_t i = 0; i < a.layers.size(); ++i)
    if (a.layers[i].name != b.layers[i].name ||
        a.layers[i].layer.weights != b.layers[i].layer.weights ||
        a.layers[i].layer.bias != b.layers[i].layer.bias)
      return false;
  return true;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("train config json round trip") {
  TrainConfig c;
  c.dataset = "some/where";
  c.variant = Variant::flow;
  c.offset = 3;
  c.learning_rate = 2e-4;
  c.epochs = 7;
  c.max_steps = 44;
  c.batch_size = 2;
  c.seed = 99;
  c.lambda = 1.5;
  c.gamma = 1.0;
  c.eval_every = 2;
  c.score_thr = 0.25;
  c.flow.window_size = 11;
  c.model = tiny_model_template();
  TrainConfig r = train_config_from_json(train_config_to_json(c));
  CHECK(train_config_to_json(r).dump() == train_config_to_json(c).dump());
  CHECK(r.variant == Variant::flow);
  CHECK(r.flow.window_size == 11);
  CHECK(r.max_steps == 44);
}

TEST_CASE("train config from minimal json uses defaults") {
  TrainConfig c = train_config_from_json(nlohmann::json::object());
  CHECK(c.variant == Variant::double_frame);
  CHECK(c.learning_rate == 1e-5);
  CHECK(c.epochs == 1);
  CHECK(c.max_steps == -1);
  CHECK(c.eval_every == 0);

  TrainConfig o = train_config_from_json(nlohmann::json{{"learning_rate", 0.5}});
  CHECK(o.learning_rate == 0.5);
  CHECK(o.epochs == 1);
}

TEST_CASE("train config validation") {
  TrainConfig c = tiny_train_config();
  CHECK_NOTHROW(c.validate());
  c.offset = 0;
  CHECK_THROWS(c.validate());
  c = tiny_train_config();
  c.nms_thr = 1.0;
  CHECK_THROWS(c.validate());
  c = tiny_train_config();
  c.epochs = -1;
  CHECK_THROWS(c.validate());
  c = tiny_train_config();
  c.batch_size = 0;
  CHECK_THROWS(c.validate());
  c = tiny_train_config();
  c.learning_rate = 0.0;
  CHECK_THROWS(c.validate());
}

TEST_CASE("dataset root generation and loading") {
  TempDir tmp;
  std::string dir = (tmp.path / "data").string();
  generate_dataset_root(tiny_gen_config(3), dir);

  CHECK(fs::exists(tmp.path / "data" / "meta.json"));
  CHECK(fs::exists(tmp.path / "data" / "train" / "scene_0000" / "meta.json"));
  CHECK(fs::exists(tmp.path / "data" / "train" / "scene_0001" / "frames" / "000000.ppm"));
  CHECK(fs::exists(tmp.path / "data" / "test" / "scene_0000" / "annotations.jsonl"));

  Dataset ds = load_dataset_root(dir);
  CHECK(ds.train.size() == 2u);
  CHECK(ds.test.size() == 1u);
  CHECK(ds.class_names == std::vector<std::string>{"blob", "chip"});
  CHECK(ds.num_classes() == 2);
  CHECK(ds.image_width == 48);
  CHECK(ds.image_height == 48);

  // root means are the average of the train scene means
  for (int c = 0; c < 3; ++c) {
    double want = 0.5 * (ds.train[0].channel_means[static_cast<size_t>(c)] +
                         ds.train[1].channel_means[static_cast<size_t>(c)]);
    CHECK_THAT(ds.channel_means[static_cast<size_t>(c)],
               Catch::Matchers::WithinAbs(want, 1e-12));
  }

  // train scenes differ from each other and from the test scene
  CHECK(ds.train[0].frames[0].pixels.data != ds.train[1].frames[0].pixels.data);
  CHECK(ds.train[0].frames[0].pixels.data != ds.test[0].frames[0].pixels.data);
}

TEST_CASE("dataset generation is deterministic") {
  TempDir tmp;
  generate_dataset_root(tiny_gen_config(5), (tmp.path / "a").string());
  generate_dataset_root(tiny_gen_config(5), (tmp.path / "b").string());
  Dataset a = load_dataset_root((tmp.path / "a").string());
  Dataset b = load_dataset_root((tmp.path / "b").string());
  REQUIRE(a.train.size() == b.train.size());
  for (size_t s = 0; s < a.train.size(); ++s)
    for (size_t t = 0; t < a.train[s].frames.size(); ++t)
      CHECK(a.train[s].frames[t].pixels.data == b.train[s].frames[t].pixels.data);
}

TEST_CASE("a bare scene directory loads as a one-scene dataset") {
  TempDir tmp;
  AnnotatedSequence seq = generate_scene(tiny_scene_spec(9));
  std::string dir = (tmp.path / "scene").string();
  save_dataset(seq, dir);
  Dataset ds = load_dataset_root(dir);
  CHECK(ds.train.size() == 1u);
  CHECK(ds.test.empty());
  CHECK(ds.class_names == std::vector<std::string>{"blob", "chip"});
  CHECK(ds.channel_means == seq.channel_means);

  CHECK_THROWS(load_dataset_root((tmp.path / "missing").string()));
}

TEST_CASE("ground truth tagging lines up with scene objects") {
  SceneSpec spec = tiny_scene_spec(11);
  spec.occluder_count = 1;
  spec.distractor_count = 2;
  AnnotatedSequence seq = generate_scene(spec);
  auto gts = gts_with_tags(seq);
  REQUIRE(gts.size() == seq.frames.size());
  size_t annotated = 0;
  for (const auto& o : seq.objects)
    if (!o.is_distractor()) ++annotated;
  for (const auto& fg : gts) {
    REQUIRE(fg.size() == annotated);
    for (const auto& g : fg) CHECK((g.tags & tag_distractor) == 0);
  }
  CHECK((gts[0][0].tags & tag_occluded) != 0);

  AnnotatedSequence broken = seq;
  broken.ground_truth[0].pop_back();
  CHECK_THROWS_AS(gts_with_tags(broken), std::logic_error);

  auto strata = default_strata();
  REQUIRE(strata.size() == 4u);
  CHECK(strata[0].name == "small");
  CHECK(strata[3].mask == tag_stationary);
}

TEST_CASE("model spec resolution binds data-dependent fields") {
  TempDir tmp;
  Dataset ds = make_dataset(tmp, "data", 7);
  TrainConfig cfg = tiny_train_config();
  cfg.offset = 2;

  cfg.variant = Variant::baseline;
  ModelSpec b = resolve_model_spec(cfg, ds);
  CHECK(b.input_channels == 3);
  CHECK(b.num_classes == 2);
  CHECK(b.frame_offset == 2);
  REQUIRE(b.input_means.size() == 3u);
  CHECK(b.input_means[0] == ds.channel_means[0]);

  cfg.variant = Variant::double_frame;
  ModelSpec d = resolve_model_spec(cfg, ds);
  REQUIRE(d.input_means.size() == 6u);
  CHECK(d.input_means[0] == ds.channel_means[0]);
  CHECK(d.input_means[3] == ds.channel_means[0]);
  CHECK(d.input_means[5] == ds.channel_means[2]);

  cfg.variant = Variant::flow;
  ModelSpec f = resolve_model_spec(cfg, ds);
  REQUIRE(f.input_means.size() == 6u);
  CHECK(f.input_means[0] == 0.5);
  CHECK(f.input_means[2] == 0.0);
  CHECK(f.input_means[3] == ds.channel_means[0]);
}

TEST_CASE("pair builder reproduces the direct input construction") {
  AnnotatedSequence seq = generate_scene(tiny_scene_spec(13));

  PairBuilder dbl(Variant::double_frame, 2);
  ModelInput got = dbl.build(seq, 4);
  ModelInput want = build_double_input(select_preceding(seq.frames, 4, 2));
  CHECK(got.channels.data == want.channels.data);

  FlowParams fp;
  PairBuilder flw(Variant::flow, 1, fp, 8.0);
  ModelInput fgot = flw.build(seq, 3);
  FramePair pair = select_preceding(seq.frames, 3, 1);
  FlowField field = farneback_flow(pair.preceding.pixels, pair.target.pixels, fp);
  ModelInput fwant = build_flow_input(pair, field, 8.0);
  CHECK(fgot.channels.data == fwant.channels.data);
  // cached second call gives the identical answer
  CHECK(flw.build(seq, 3).channels.data == fwant.channels.data);

  PairBuilder fb(Variant::double_frame, 1, {}, 16.0, true);
  ModelInput dup = fb.build(seq, 2);
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 48; ++x)
      for (int c = 0; c < 3; ++c)
        CHECK(dup.channels.at(x, y, c) == dup.channels.at(x, y, c + 3));

  CHECK_THROWS(PairBuilder(Variant::double_frame, 0));
}

TEST_CASE("training is bit-for-bit deterministic") {
  TempDir tmp;
  Dataset ds = make_dataset(tmp, "data", 15);
  TrainConfig cfg = tiny_train_config();
  cfg.seed = 5;

  TrainResult a = train(cfg, ds);
  TrainResult b = train(cfg, ds);

  CHECK(models_equal(a.model, b.model));
  CHECK(a.log.total_losses == b.log.total_losses);
  CHECK(a.log.cls_losses == b.log.cls_losses);
  CHECK(a.log.reg_losses == b.log.reg_losses);
  CHECK(runlog_to_json(a.log, false).dump() == runlog_to_json(b.log, false).dump());

  fs::path ca = tmp.path / "a.ckpt", cb = tmp.path / "b.ckpt";
  save_checkpoint(ca.string(), a.model);
  save_checkpoint(cb.string(), b.model);
  CHECK(slurp(ca) == slurp(cb));

  // a different seed takes a different path
  cfg.seed = 6;
  TrainResult c = train(cfg, ds);
  CHECK(!models_equal(a.model, c.model));
}

TEST_CASE("zero epochs returns the untouched initialization") {
  TempDir tmp;
  Dataset ds = make_dataset(tmp, "data", 17);
  TrainConfig cfg = tiny_train_config();
  cfg.epochs = 0;
  cfg.seed = 3;
  TrainResult r = train(cfg, ds);
  CHECK(r.model.step == 0);
  CHECK(r.log.total_losses.empty());
  REQUIRE(r.log.evals.size() == 1u);  // still evaluates the initial model
  CHECK(r.log.evals[0].first == 0);
  ModelState fresh = build_model(resolve_model_spec(cfg, ds), cfg.seed);
  CHECK(models_equal(r.model, fresh));
}

TEST_CASE("the step cap cuts the run short") {
  TempDir tmp;
  Dataset ds = make_dataset(tmp, "data", 19);
  TrainConfig cfg = tiny_train_config();
  cfg.epochs = 3;
  cfg.max_steps = 5;
  TrainResult r = train(cfg, ds);
  CHECK(r.log.total_losses.size() == 5u);
  CHECK(r.model.step == 5);
  REQUIRE(!r.log.evals.empty());

  cfg.max_steps = 0;
  TrainResult none = train(cfg, ds);
  CHECK(none.log.total_losses.empty());
  CHECK(none.model.step == 0);
  CHECK(none.log.evals.empty());
}

TEST_CASE("batched gradients step once per batch") {
  TempDir tmp;
  Dataset ds = make_dataset(tmp, "data", 21);
  TrainConfig cfg = tiny_train_config();
  cfg.batch_size = 4;
  TrainResult r = train(cfg, ds);
  // 12 items in batches of 4
  CHECK(r.log.total_losses.size() == 3u);
  CHECK(r.model.step == 3);
}

TEST_CASE("the loss comes down on a small scene") {
  TempDir tmp;
  AnnotatedSequence seq = generate_scene(tiny_scene_spec(23));
  std::string dir = (tmp.path / "scene").string();
  save_dataset(seq, dir);
  Dataset ds = load_dataset_root(dir);

  TrainConfig cfg = tiny_train_config();
  cfg.epochs = 10;  // 60 steps over the 6-frame scene
  cfg.learning_rate = 1e-3;
  TrainResult r = train(cfg, ds);
  REQUIRE(r.log.total_losses.size() == 60u);
  double head = 0, tail = 0;
  for (size_t i = 0; i < 10; ++i) {
    head += r.log.total_losses[i];
    tail += r.log.total_losses[r.log.total_losses.size() - 1 - i];
  }
  INFO("head " << head / 10 << " tail " << tail / 10);
  CHECK(tail < head);
}

TEST_CASE("non-finite losses abort with a diagnostic") {
  TempDir tmp;
  Dataset ds = make_dataset(tmp, "data", 25);
  TrainConfig cfg = tiny_train_config();
  ModelState poisoned = build_model(resolve_model_spec(cfg, ds), cfg.seed);
  // huge regression outputs overflow the summed smooth L1 to infinity
  for (auto& lyr : poisoned.layers)
    if (lyr.name == "head.reg.out")
      for (double& b : lyr.layer.bias) b = 1e308;
  CHECK_THROWS_WITH(train(cfg, ds, &poisoned),
                    Catch::Matchers::ContainsSubstring("diverged"));
}

TEST_CASE("evaluation cadence follows eval_every") {
  TempDir tmp;
  Dataset ds = make_dataset(tmp, "data", 27);
  TrainConfig cfg = tiny_train_config();
  cfg.epochs = 4;
  cfg.eval_every = 2;
  TrainResult r = train(cfg, ds);
  REQUIRE(r.log.evals.size() == 2u);
  CHECK(r.log.evals[0].first == 2);
  CHECK(r.log.evals[1].first == 4);

  cfg.eval_every = 0;
  TrainResult f = train(cfg, ds);
  REQUIRE(f.log.evals.size() == 1u);
  CHECK(f.log.evals[0].first == 4);
}

TEST_CASE("run log json shape") {
  TempDir tmp;
  Dataset ds = make_dataset(tmp, "data", 29);
  TrainConfig cfg = tiny_train_config();
  TrainResult r = train(cfg, ds);
  nlohmann::json with = runlog_to_json(r.log, true);
  CHECK(with.contains("wall_ms"));
  CHECK(with.at("total_losses").size() == 12u);
  CHECK(with.at("config").at("learning_rate") == 1e-3);
  nlohmann::json without = runlog_to_json(r.log, false);
  CHECK(!without.contains("wall_ms"));
  CHECK(without.at("evals").size() == 1u);
  CHECK(without.at("evals")[0].at("report").contains("map"));
}

TEST_CASE("stratified model evaluation reports all strata") {
  TempDir tmp;
  Dataset ds = make_dataset(tmp, "data", 31);
  TrainConfig cfg = tiny_train_config();
  TrainResult r = train(cfg, ds);
  PairBuilder builder(cfg.variant, cfg.offset, cfg.flow, cfg.flow_clamp);
  EvalReport rep = evaluate_model(r.model, ds.test, cfg, builder, true);
  REQUIRE(rep.strata.size() == 4u);
  CHECK(rep.strata[0].name == "small");
  CHECK(rep.classes.size() == 2u);
}

TEST_CASE("variant comparison experiment reports three rows") {
  TempDir tmp;
  Dataset ds = make_dataset(tmp, "data", 33);
  TrainConfig cfg = tiny_train_config();
  ExperimentResult res = experiment_compare_variants(cfg, ds, {1, 2});
  CHECK(res.report.at("experiment") == "compare_variants");
  const auto& rows = res.report.at("rows");
  REQUIRE(rows.size() == 3u);
  CHECK(rows[0].at("variant") == "baseline");
  CHECK(rows[1].at("variant") == "double");
  CHECK(rows[2].at("variant") == "flow");
  for (const auto& row : rows) {
    CHECK(row.at("seeds").size() == 2u);
    CHECK(row.at("mean_map").is_number());
    CHECK(row.at("min_map").get<double>() <= row.at("max_map").get<double>());
  }
  CHECK(res.report.at("passed").get<bool>() == res.passed);
  CHECK_THROWS(experiment_compare_variants(cfg, ds, {}));
}

TEST_CASE("offset sweep rejects offsets longer than the sequences") {
  TempDir tmp;
  Dataset ds = make_dataset(tmp, "data", 35);
  TrainConfig cfg = tiny_train_config();
  CHECK_THROWS(experiment_offset_sweep(cfg, ds, {7}, {1}));

  ExperimentResult res = experiment_offset_sweep(cfg, ds, {1, 2}, {1}, 1.0);
  CHECK(res.report.at("experiment") == "offset_sweep");
  REQUIRE(res.report.at("rows").size() == 2u);
  CHECK(res.report.at("rows")[0].at("offset") == 1);
  CHECK(res.report.at("rows")[1].at("offset") == 2);
  CHECK(res.report.at("spread").is_number());
  CHECK(res.passed);  // the band was set wide open
}

TEST_CASE("transfer experiment copies non-final layers exactly") {
  TempDir tmp;
  Dataset src = make_dataset(tmp, "src", 37);

  // destination task with a third class so the head is reshaped
  DatasetGenConfig g = tiny_gen_config(38);
  g.scene.classes.push_back({"bar", 7.0, 10.0, 0.5, 2.0});
  generate_dataset_root(g, (tmp.path / "dst").string());
  Dataset dst = load_dataset_root((tmp.path / "dst").string());
  REQUIRE(dst.num_classes() == 3);

  TrainConfig cfg = tiny_train_config();
  ExperimentResult res = experiment_transfer(cfg, src, dst, {4});
  const auto& rows = res.report.at("rows");
  REQUIRE(rows.size() == 1u);
  CHECK(rows[0].at("copy_exact").get<bool>());
  CHECK(rows[0].at("scratch_map").is_number());
  CHECK(rows[0].at("transfer_map").is_number());
  CHECK(res.report.at("mean_scratch_map").is_number());
  CHECK(res.report.at("assertion").is_string());
}

TEST_CASE("fallback experiment reports paired and duplicated results") {
  TempDir tmp;
  Dataset ds = make_dataset(tmp, "data", 39);
  TrainConfig cfg = tiny_train_config();
  ExperimentResult res = experiment_fallback(cfg, ds, {6});
  CHECK(res.passed);
  const auto& rows = res.report.at("rows");
  REQUIRE(rows.size() == 1u);
  CHECK(rows[0].at("paired_map").is_number());
  CHECK(rows[0].at("fallback_map").is_number());
  CHECK(rows[0].at("delta").is_number());
  REQUIRE(rows[0].at("strata").size() == 4u);
  CHECK(rows[0].at("strata")[0].at("name") == "small");

  std::string dir = (tmp.path / "report").string();
  write_experiment_report(res, dir);
  CHECK(fs::exists(tmp.path / "report" / "report.json"));
  CHECK(fs::exists(tmp.path / "report" / "rows.csv"));

  nlohmann::json parsed;
  {
    std::ifstream f(tmp.path / "report" / "report.json");
    f >> parsed;
  }
  CHECK(parsed.at("experiment") == "fallback");

  std::ifstream csv(tmp.path / "report" / "rows.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header.find("seed") != std::string::npos);
  CHECK(header.find("delta") != std::string::npos);
  std::string row;
  std::getline(csv, row);
  CHECK(!row.empty());
}
