#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vodet/detector.hpp"
#include "vodet/eval.hpp"
#include "vodet/inputs.hpp"
#include "vodet/losses.hpp"
#include "vodet/synthdata.hpp"

namespace vodet {

struct TrainConfig {
  std::string dataset;
  Variant variant = Variant::double_frame;
  int offset = 1;
  double learning_rate = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int epochs = 1;
  long long max_steps = -1;  // optional cap; -1 means no cap
  int batch_size = 1;
  uint64_t seed = 0;
  double lambda = 1.0;
  double gamma = 2.0;
  int eval_every = 0;  // epochs between mid-training evaluations; 0 = final only
  double score_thr = 0.3;
  double nms_thr = 0.5;
  int max_dets = 100;
  double eval_iou = 0.5;
  double flow_clamp = 16.0;
  FlowParams flow;
  ModelSpec model;  // architecture template; data-bound fields are overwritten

  void validate() const {
    if (offset < 1) throw std::invalid_argument("TrainConfig: offset must be >= 1");
    if (!(learning_rate > 0)) throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1) || !(epsilon > 0))
      throw std::invalid_argument("TrainConfig: bad optimizer hyperparameters");
    if (epochs < 0) throw std::invalid_argument("TrainConfig: negative epochs");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (!(lambda >= 0) || !(gamma >= 0))
      throw std::invalid_argument("TrainConfig: lambda and gamma must be >= 0");
    if (eval_every < 0) throw std::invalid_argument("TrainConfig: negative eval_every");
    if (!(score_thr >= 0 && score_thr <= 1))
      throw std::invalid_argument("TrainConfig: score_thr outside [0,1]");
    if (!(nms_thr > 0 && nms_thr < 1))
      throw std::invalid_argument("TrainConfig: nms_thr outside (0,1)");
    if (max_dets < 1) throw std::invalid_argument("TrainConfig: max_dets must be >= 1");
    if (!(eval_iou > 0 && eval_iou < 1))
      throw std::invalid_argument("TrainConfig: eval_iou outside (0,1)");
    if (!(flow_clamp > 0)) throw std::invalid_argument("TrainConfig: flow_clamp must be > 0");
    flow.validate();
  }
};

inline nlohmann::json flow_params_to_json(const FlowParams& f) {
  return {{"pyramid_scale", f.pyramid_scale}, {"levels", f.levels},
          {"window_size", f.window_size},     {"iterations", f.iterations},
          {"poly_n", f.poly_n},               {"poly_sigma", f.poly_sigma}};
}

inline FlowParams flow_params_from_json(const nlohmann::json& j) {
  FlowParams f;
  f.pyramid_scale = j.value("pyramid_scale", f.pyramid_scale);
  f.levels = j.value("levels", f.levels);
  f.window_size = j.value("window_size", f.window_size);
  f.iterations = j.value("iterations", f.iterations);
  f.poly_n = j.value("poly_n", f.poly_n);
  f.poly_sigma = j.value("poly_sigma", f.poly_sigma);
  return f;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"dataset", c.dataset},
          {"variant", variant_name(c.variant)},
          {"offset", c.offset},
          {"learning_rate", c.learning_rate},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"epsilon", c.epsilon},
          {"epochs", c.epochs},
          {"max_steps", c.max_steps},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"lambda", c.lambda},
          {"gamma", c.gamma},
          {"eval_every", c.eval_every},
          {"score_thr", c.score_thr},
          {"nms_thr", c.nms_thr},
          {"max_dets", c.max_dets},
          {"eval_iou", c.eval_iou},
          {"flow_clamp", c.flow_clamp},
          {"flow", flow_params_to_json(c.flow)},
          {"model", spec_to_json(c.model)}};
}

// Missing keys keep their defaults, so config files can stay minimal.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.dataset = j.value("dataset", c.dataset);
  if (j.contains("variant")) c.variant = variant_from_name(j.at("variant").get<std::string>());
  c.offset = j.value("offset", c.offset);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.epochs = j.value("epochs", c.epochs);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.lambda = j.value("lambda", c.lambda);
  c.gamma = j.value("gamma", c.gamma);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.score_thr = j.value("score_thr", c.score_thr);
  c.nms_thr = j.value("nms_thr", c.nms_thr);
  c.max_dets = j.value("max_dets", c.max_dets);
  c.eval_iou = j.value("eval_iou", c.eval_iou);
  c.flow_clamp = j.value("flow_clamp", c.flow_clamp);
  if (j.contains("flow")) c.flow = flow_params_from_json(j.at("flow"));
  if (j.contains("model")) c.model = spec_from_json(j.at("model"));
  return c;
}

struct Dataset {
  std::vector<AnnotatedSequence> train, test;
  std::vector<std::string> class_names;
  std::array<double, 3> channel_means{0, 0, 0};
  int image_width = 0, image_height = 0;

  int num_classes() const { return static_cast<int>(class_names.size()); }
};

struct DatasetGenConfig {
  SceneSpec scene;  // template; per-scene seeds are derived from `seed`
  int train_scenes = 40;
  int test_scenes = 10;
  uint64_t seed = 1;
};

inline nlohmann::json gen_config_to_json(const DatasetGenConfig& c) {
  return {{"scene", scene_spec_to_json(c.scene)},
          {"train_scenes", c.train_scenes},
          {"test_scenes", c.test_scenes},
          {"seed", c.seed}};
}

inline DatasetGenConfig gen_config_from_json(const nlohmann::json& j) {
  DatasetGenConfig c;
  if (j.contains("scene")) c.scene = scene_spec_from_json(j.at("scene"));
  c.train_scenes = j.value("train_scenes", c.train_scenes);
  c.test_scenes = j.value("test_scenes", c.test_scenes);
  c.seed = j.value("seed", c.seed);
  return c;
}

namespace detail {
inline std::string scene_dir_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%04d", i);
  return buf;
}
}  // namespace detail

// Multi-scene dataset root: meta.json plus train/scene_NNNN and
// test/scene_NNNN scene directories. Channel means are averaged over the
// train scenes (all scenes share dimensions, so this is the exact mean).
inline void generate_dataset_root(const DatasetGenConfig& cfg, const std::string& path) {
  namespace fs = std::filesystem;
  if (cfg.train_scenes < 1 || cfg.test_scenes < 0)
    throw std::invalid_argument("generate_dataset_root: bad scene counts");
  cfg.scene.validate();
  std::array<double, 3> means{0, 0, 0};
  for (int i = 0; i < cfg.train_scenes; ++i) {
    SceneSpec s = cfg.scene;
    s.seed = cfg.seed * 1000003ull + static_cast<uint64_t>(i);
    AnnotatedSequence seq = generate_scene(s);
    for (int c = 0; c < 3; ++c)
      means[static_cast<size_t>(c)] += seq.channel_means[static_cast<size_t>(c)];
    save_dataset(seq, (fs::path(path) / "train" / detail::scene_dir_name(i)).string());
  }
  for (int c = 0; c < 3; ++c) means[static_cast<size_t>(c)] /= cfg.train_scenes;
  for (int i = 0; i < cfg.test_scenes; ++i) {
    SceneSpec s = cfg.scene;
    s.seed = cfg.seed * 1000003ull + 700001ull + static_cast<uint64_t>(i);
    save_dataset(generate_scene(s), (fs::path(path) / "test" / detail::scene_dir_name(i)).string());
  }
  std::vector<std::string> names;
  for (const auto& c : cfg.scene.classes) names.push_back(c.name);
  nlohmann::json meta{{"version", 1},
                      {"class_names", names},
                      {"channel_means", means},
                      {"train_scenes", cfg.train_scenes},
                      {"test_scenes", cfg.test_scenes},
                      {"gen_config", gen_config_to_json(cfg)}};
  std::ofstream f((fs::path(path) / "meta.json").string());
  f << meta.dump(2) << "\n";
  if (!f) throw std::runtime_error("generate_dataset_root: cannot write meta.json");
}

// Accepts either a dataset root or a bare scene directory (which becomes a
// one-scene train set).
inline Dataset load_dataset_root(const std::string& path) {
  namespace fs = std::filesystem;
  std::ifstream mf((fs::path(path) / "meta.json").string());
  if (!mf) throw std::runtime_error("load_dataset_root: missing meta.json in " + path);
  nlohmann::json meta;
  mf >> meta;

  Dataset ds;
  if (meta.contains("objects")) {  // single scene directory
    AnnotatedSequence seq = load_dataset(path);
    for (const auto& c : seq.spec.classes) ds.class_names.push_back(c.name);
    ds.channel_means = seq.channel_means;
    ds.image_width = seq.spec.image_width;
    ds.image_height = seq.spec.image_height;
    ds.train.push_back(std::move(seq));
    return ds;
  }

  int version = meta.at("version").get<int>();
  if (version != 1)
    throw std::runtime_error("load_dataset_root: unsupported dataset version " +
                             std::to_string(version));
  ds.class_names = meta.at("class_names").get<std::vector<std::string>>();
  ds.channel_means = meta.at("channel_means").get<std::array<double, 3>>();
  int ntrain = meta.at("train_scenes").get<int>();
  int ntest = meta.at("test_scenes").get<int>();
  for (int i = 0; i < ntrain; ++i)
    ds.train.push_back(load_dataset((fs::path(path) / "train" / detail::scene_dir_name(i)).string()));
  for (int i = 0; i < ntest; ++i)
    ds.test.push_back(load_dataset((fs::path(path) / "test" / detail::scene_dir_name(i)).string()));
  if (ds.train.empty()) throw std::runtime_error("load_dataset_root: no training scenes");
  ds.image_width = ds.train.front().spec.image_width;
  ds.image_height = ds.train.front().spec.image_height;
  for (const auto& s : ds.train)
    if (s.spec.image_width != ds.image_width || s.spec.image_height != ds.image_height ||
        s.spec.classes.size() != ds.class_names.size())
      throw std::runtime_error("load_dataset_root: inconsistent scenes");
  for (const auto& s : ds.test)
    if (s.spec.image_width != ds.image_width || s.spec.image_height != ds.image_height ||
        s.spec.classes.size() != ds.class_names.size())
      throw std::runtime_error("load_dataset_root: inconsistent scenes");
  return ds;
}

// Ground truth of one scene with per-box scenario tags (frame annotations
// are emitted in object order, so tags map by position).
inline std::vector<std::vector<GroundTruthBox>> gts_with_tags(const AnnotatedSequence& seq) {
  std::vector<uint32_t> tags;
  for (const auto& o : seq.objects)
    if (!o.is_distractor()) tags.push_back(o.tags);
  std::vector<std::vector<GroundTruthBox>> out;
  out.reserve(seq.ground_truth.size());
  for (const auto& frame_gts : seq.ground_truth) {
    if (frame_gts.size() != tags.size())
      throw std::logic_error("gts_with_tags: annotation/object count mismatch");
    std::vector<GroundTruthBox> fg;
    fg.reserve(frame_gts.size());
    for (size_t i = 0; i < frame_gts.size(); ++i)
      fg.push_back({frame_gts[i].box, frame_gts[i].class_id, tags[i]});
    out.push_back(std::move(fg));
  }
  return out;
}

inline std::vector<Stratum> default_strata() {
  return {{tag_small, "small"},
          {tag_occluded, "occluded"},
          {tag_blurred, "blurred"},
          {tag_stationary, "stationary"}};
}

// Builds the per-variant network input for (scene, target frame). Flow
// fields are cached per (scene, frame) since the offset is fixed.
class PairBuilder {
 public:
  PairBuilder(Variant variant, int offset, FlowParams flow_params = {}, double flow_clamp = 16.0,
              bool use_fallback = false)
      : variant_(variant), offset_(offset), flow_params_(flow_params), flow_clamp_(flow_clamp),
        fallback_(use_fallback) {
    if (offset_ < 1 && !fallback_)
      throw std::invalid_argument("PairBuilder: offset must be >= 1");
  }

  ModelInput build(const AnnotatedSequence& seq, int t) {
    FramePair pair = fallback_
                         ? duplicate_fallback(seq.frames[static_cast<size_t>(t)])
                         : select_preceding(seq.frames, t, offset_);
    switch (variant_) {
      case Variant::baseline: return build_baseline_input(pair.target);
      case Variant::double_frame: return build_double_input(pair);
      case Variant::flow: {
        auto key = std::make_pair(static_cast<const void*>(&seq), t);
        auto it = flow_cache_.find(key);
        if (it == flow_cache_.end()) {
          FlowField f = farneback_flow(pair.preceding.pixels, pair.target.pixels, flow_params_);
          it = flow_cache_.emplace(key, std::move(f)).first;
        }
        return build_flow_input(pair, it->second, flow_clamp_);
      }
    }
    throw std::logic_error("PairBuilder: unknown variant");
  }

  Variant variant() const { return variant_; }

 private:
  Variant variant_;
  int offset_;
  FlowParams flow_params_;
  double flow_clamp_;
  bool fallback_;
  std::map<std::pair<const void*, int>, FlowField> flow_cache_;
};

struct RunLog {
  nlohmann::json config;  // resolved config, echoed verbatim
  std::vector<double> total_losses, cls_losses, reg_losses;
  std::vector<std::pair<int, nlohmann::json>> evals;  // (epoch, report)
  double wall_ms = 0.0;
  std::string checkpoint_path;
};

inline nlohmann::json runlog_to_json(const RunLog& log, bool include_timings = true) {
  nlohmann::json evals = nlohmann::json::array();
  for (const auto& [epoch, report] : log.evals)
    evals.push_back({{"epoch", epoch}, {"report", report}});
  nlohmann::json j{{"config", log.config},
                   {"total_losses", log.total_losses},
                   {"cls_losses", log.cls_losses},
                   {"reg_losses", log.reg_losses},
                   {"evals", evals},
                   {"checkpoint_path", log.checkpoint_path}};
  if (include_timings) j["wall_ms"] = log.wall_ms;
  return j;
}

inline EvalReport evaluate_model(const ModelState& model,
                                 const std::vector<AnnotatedSequence>& scenes,
                                 const TrainConfig& cfg, PairBuilder& builder,
                                 bool stratified = false) {
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<GroundTruthBox>> gts;
  for (const auto& seq : scenes) {
    auto scene_gts = gts_with_tags(seq);
    for (size_t t = 0; t < seq.frames.size(); ++t) {
      ModelInput input = builder.build(seq, static_cast<int>(t));
      dets.push_back(predict(model, input, cfg.score_thr, cfg.nms_thr, cfg.max_dets));
      gts.push_back(std::move(scene_gts[t]));
    }
  }
  EvalConfig ec;
  ec.iou_threshold = cfg.eval_iou;
  if (stratified) ec.strata = default_strata();
  return evaluate(dets, gts, ec, model.spec.num_classes);
}

struct TrainResult {
  ModelState model;
  RunLog log;
};

namespace detail {

struct AdamState {
  std::vector<LayerGrads> m, v;
  long long t = 0;

  static AdamState zeros_like(const ModelState& model) {
    AdamState s;
    s.m = ModelGrads::zeros_like(model).layers;
    s.v = ModelGrads::zeros_like(model).layers;
    return s;
  }
};

inline void adam_step(ModelState& model, const ModelGrads& grads, AdamState& opt,
                      const TrainConfig& cfg) {
  ++opt.t;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.t));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.t));
  for (size_t li = 0; li < model.layers.size(); ++li) {
    auto update = [&](std::vector<double>& p, const std::vector<double>& g, std::vector<double>& m,
                      std::vector<double>& v) {
      for (size_t i = 0; i < p.size(); ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        double mh = m[i] / bc1;
        double vh = v[i] / bc2;
        p[i] -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.epsilon);
      }
    };
    update(model.layers[li].layer.weights, grads.layers[li].dweights, opt.m[li].dweights,
           opt.v[li].dweights);
    update(model.layers[li].layer.bias, grads.layers[li].dbias, opt.m[li].dbias,
           opt.v[li].dbias);
  }
}

inline void accumulate(ModelGrads& into, const ModelGrads& g) {
  for (size_t li = 0; li < into.layers.size(); ++li) {
    for (size_t i = 0; i < into.layers[li].dweights.size(); ++i)
      into.layers[li].dweights[i] += g.layers[li].dweights[i];
    for (size_t i = 0; i < into.layers[li].dbias.size(); ++i)
      into.layers[li].dbias[i] += g.layers[li].dbias[i];
  }
}

inline void scale(ModelGrads& g, double s) {
  for (auto& lg : g.layers) {
    for (double& x : lg.dweights) x *= s;
    for (double& x : lg.dbias) x *= s;
  }
}

}  // namespace detail

// Derives the full model spec from the config template plus what the data
// dictates: variant channels, class count, pairing offset, channel means.
inline ModelSpec resolve_model_spec(const TrainConfig& cfg, const Dataset& data) {
  ModelSpec spec = cfg.model;
  spec.variant = cfg.variant;
  spec.input_channels = variant_channels(cfg.variant);
  spec.num_classes = data.num_classes();
  spec.frame_offset = cfg.offset;
  const auto& m = data.channel_means;
  switch (cfg.variant) {
    case Variant::baseline: spec.input_means = {m[0], m[1], m[2]}; break;
    case Variant::double_frame: spec.input_means = {m[0], m[1], m[2], m[0], m[1], m[2]}; break;
    case Variant::flow: spec.input_means = {0.5, 0.5, 0.0, m[0], m[1], m[2]}; break;
  }
  spec.validate();
  return spec;
}

// Single-threaded deterministic training: fixed item order per epoch drawn
// from the seed, batch gradients averaged, adaptive-moment updates with bias
// correction. Non-finite losses abort with a diagnostic.
inline TrainResult train(const TrainConfig& cfg, const Dataset& data,
                         const ModelState* init = nullptr, PairBuilder* shared_builder = nullptr) {
  cfg.validate();
  if (data.train.empty()) throw std::invalid_argument("train: dataset has no training scenes");
  auto t_start = std::chrono::steady_clock::now();

  TrainResult result;
  result.model = init ? *init : build_model(resolve_model_spec(cfg, data), cfg.seed);
  ModelState& model = result.model;
  RunLog& log = result.log;
  log.config = train_config_to_json(cfg);

  std::vector<Box> anchors =
      generate_anchors(model.spec.anchor_config, data.image_width, data.image_height);

  // focal alpha from inverse train-set class frequency
  std::vector<long long> class_counts(static_cast<size_t>(model.spec.num_classes), 0);
  for (const auto& seq : data.train)
    for (const auto& frame_gts : seq.ground_truth)
      for (const auto& gt : frame_gts) {
        if (gt.class_id < 0 || gt.class_id >= model.spec.num_classes)
          throw std::invalid_argument("train: ground-truth class outside model range");
        ++class_counts[static_cast<size_t>(gt.class_id)];
      }
  FocalParams focal;
  focal.gamma = cfg.gamma;
  focal.alpha = inverse_frequency_alpha(class_counts);

  PairBuilder local_builder(cfg.variant, cfg.offset, cfg.flow, cfg.flow_clamp);
  PairBuilder& builder = shared_builder ? *shared_builder : local_builder;

  struct Item {
    int scene, frame;
  };
  std::vector<Item> items;
  for (size_t s = 0; s < data.train.size(); ++s)
    for (size_t t = 0; t < data.train[s].frames.size(); ++t)
      items.push_back({static_cast<int>(s), static_cast<int>(t)});

  // per-(scene, frame) anchor assignments, computed once
  std::vector<std::vector<Assignment>> assignments(data.train.size());
  for (size_t s = 0; s < data.train.size(); ++s) {
    assignments[s].reserve(data.train[s].ground_truth.size());
    for (const auto& frame_gts : data.train[s].ground_truth)
      assignments[s].push_back(assign_anchors(anchors, frame_gts));
  }

  detail::AdamState opt = detail::AdamState::zeros_like(model);
  Rng order_rng(cfg.seed ^ 0x715b3c6f0f2ca9d1ull);
  long long steps_done = 0;
  bool hit_cap = cfg.max_steps == 0;

  auto run_eval = [&](int epoch) {
    const auto& scenes = data.test.empty() ? data.train : data.test;
    PairBuilder eval_builder(cfg.variant, cfg.offset, cfg.flow, cfg.flow_clamp);
    EvalReport rep = evaluate_model(model, scenes, cfg, eval_builder);
    log.evals.emplace_back(epoch, eval_report_to_json(rep));
  };

  for (int epoch = 0; epoch < cfg.epochs && !hit_cap; ++epoch) {
    // Fisher-Yates from the run seed; the generator state carries across
    // epochs so every epoch gets a fresh deterministic order.
    for (size_t i = items.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(order_rng.uniform_int(static_cast<uint64_t>(i)));
      std::swap(items[i - 1], items[j]);
    }

    for (size_t pos = 0; pos < items.size() && !hit_cap; pos += static_cast<size_t>(cfg.batch_size)) {
      ModelGrads batch_grads = ModelGrads::zeros_like(model);
      double batch_total = 0, batch_cls = 0, batch_reg = 0;
      int in_batch = 0;
      for (size_t b = pos; b < std::min(pos + static_cast<size_t>(cfg.batch_size), items.size());
           ++b) {
        const Item& it = items[b];
        const AnnotatedSequence& seq = data.train[static_cast<size_t>(it.scene)];
        ModelInput input = builder.build(seq, it.frame);
        ForwardTrace trace;
        forward(model, input, &trace);
        std::vector<double> probs = flatten_maps(trace.cls_probs);
        std::vector<double> regs = flatten_maps(trace.reg_out);
        const Assignment& assignment =
            assignments[static_cast<size_t>(it.scene)][static_cast<size_t>(it.frame)];
        DetectionLossGrads lg;
        LossValue loss = detection_loss(probs, regs, assignment, model.spec.num_classes, focal,
                                        cfg.lambda, &lg);
        if (!std::isfinite(loss.total))
          throw std::runtime_error(
              "train: diverged at step " + std::to_string(steps_done) + " (cls " +
              std::to_string(loss.classification) + ", reg " + std::to_string(loss.regression) +
              ")");
        detail::accumulate(batch_grads, backward(model, trace, lg.dcls, lg.dreg));
        batch_total += loss.total;
        batch_cls += loss.classification;
        batch_reg += loss.regression;
        ++in_batch;
      }
      if (in_batch == 0) break;
      detail::scale(batch_grads, 1.0 / in_batch);
      detail::adam_step(model, batch_grads, opt, cfg);
      ++model.step;
      ++steps_done;
      log.total_losses.push_back(batch_total / in_batch);
      log.cls_losses.push_back(batch_cls / in_batch);
      log.reg_losses.push_back(batch_reg / in_batch);
      if (cfg.max_steps >= 0 && steps_done >= cfg.max_steps) hit_cap = true;
    }
    if (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 && epoch + 1 < cfg.epochs)
      run_eval(epoch + 1);
  }

  if (steps_done > 0 || cfg.epochs == 0) run_eval(cfg.epochs);
  log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                          t_start)
                    .count();
  return result;
}

inline TrainResult train(const TrainConfig& cfg) {
  Dataset data = load_dataset_root(cfg.dataset);
  return train(cfg, data);
}

struct ExperimentResult {
  nlohmann::json report;
  bool passed = true;
};

namespace detail {

inline nlohmann::json seed_row(uint64_t seed, double map) {
  return {{"seed", seed}, {"map", map}};
}

inline double mean(const std::vector<double>& xs) {
  double s = 0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

inline double minimum(const std::vector<double>& xs) {
  double m = xs.empty() ? 0.0 : xs[0];
  for (double x : xs) m = std::min(m, x);
  return m;
}

inline double maximum(const std::vector<double>& xs) {
  double m = xs.empty() ? 0.0 : xs[0];
  for (double x : xs) m = std::max(m, x);
  return m;
}

}  // namespace detail

// Trains all three variants from scratch under identical budgets and seeds;
// asserts the two-frame model's mean test mAP is at least the single-frame
// baseline's. The flow row is reported without an assertion.
inline ExperimentResult experiment_compare_variants(const TrainConfig& base, const Dataset& data,
                                                    const std::vector<uint64_t>& seeds) {
  if (seeds.empty()) throw std::invalid_argument("experiment_compare_variants: no seeds");
  nlohmann::json rows = nlohmann::json::array();
  std::map<std::string, double> means;
  for (Variant v : {Variant::baseline, Variant::double_frame, Variant::flow}) {
    TrainConfig cfg = base;
    cfg.variant = v;
    PairBuilder shared(v, cfg.offset, cfg.flow, cfg.flow_clamp);
    std::vector<double> maps;
    nlohmann::json seed_rows = nlohmann::json::array();
    for (uint64_t seed : seeds) {
      cfg.seed = seed;
      TrainResult r = train(cfg, data, nullptr, &shared);
      PairBuilder eval_builder(v, cfg.offset, cfg.flow, cfg.flow_clamp);
      EvalReport rep = evaluate_model(r.model, data.test.empty() ? data.train : data.test, cfg,
                                      eval_builder);
      maps.push_back(rep.map);
      seed_rows.push_back(detail::seed_row(seed, rep.map));
    }
    means[variant_name(v)] = detail::mean(maps);
    rows.push_back({{"variant", variant_name(v)},
                    {"seeds", seed_rows},
                    {"mean_map", detail::mean(maps)},
                    {"min_map", detail::minimum(maps)},
                    {"max_map", detail::maximum(maps)},
                    {"config", train_config_to_json(cfg)}});
  }
  bool passed = means["double"] >= means["baseline"];
  return {{{"experiment", "compare_variants"},
           {"rows", rows},
           {"assertion", "mean mAP(double) >= mean mAP(baseline)"},
           {"passed", passed}},
          passed};
}

// Trains the two-frame variant at several pairing offsets; asserts the
// spread of mean mAPs stays inside the configured band.
inline ExperimentResult experiment_offset_sweep(const TrainConfig& base, const Dataset& data,
                                                const std::vector<int>& offsets,
                                                const std::vector<uint64_t>& seeds,
                                                double band = 0.03) {
  if (seeds.empty() || offsets.empty())
    throw std::invalid_argument("experiment_offset_sweep: empty seeds or offsets");
  for (int off : offsets)
    for (const auto& seq : data.train)
      if (seq.spec.num_frames <= off)
        throw std::invalid_argument("experiment_offset_sweep: sequence shorter than offset");
  nlohmann::json rows = nlohmann::json::array();
  std::vector<double> offset_means;
  for (int off : offsets) {
    TrainConfig cfg = base;
    cfg.variant = Variant::double_frame;
    cfg.offset = off;
    PairBuilder shared(cfg.variant, off, cfg.flow, cfg.flow_clamp);
    std::vector<double> maps;
    nlohmann::json seed_rows = nlohmann::json::array();
    for (uint64_t seed : seeds) {
      cfg.seed = seed;
      TrainResult r = train(cfg, data, nullptr, &shared);
      PairBuilder eval_builder(cfg.variant, off, cfg.flow, cfg.flow_clamp);
      EvalReport rep = evaluate_model(r.model, data.test.empty() ? data.train : data.test, cfg,
                                      eval_builder);
      maps.push_back(rep.map);
      seed_rows.push_back(detail::seed_row(seed, rep.map));
    }
    offset_means.push_back(detail::mean(maps));
    rows.push_back({{"offset", off},
                    {"seeds", seed_rows},
                    {"mean_map", detail::mean(maps)},
                    {"config", train_config_to_json(cfg)}});
  }
  double spread = detail::maximum(offset_means) - detail::minimum(offset_means);
  bool passed = spread <= band;
  return {{{"experiment", "offset_sweep"},
           {"rows", rows},
           {"band", band},
           {"spread", spread},
           {"assertion", "max(mean mAP) - min(mean mAP) <= band"},
           {"passed", passed}},
          passed};
}

// Pre-trains on src, transfers everything but the final classification layer
// into a dst-shaped model, fine-tunes at half budget, and compares with a
// full-budget from-scratch run on dst.
inline ExperimentResult experiment_transfer(const TrainConfig& base, const Dataset& src,
                                            const Dataset& dst,
                                            const std::vector<uint64_t>& seeds) {
  if (seeds.empty()) throw std::invalid_argument("experiment_transfer: no seeds");
  nlohmann::json rows = nlohmann::json::array();
  std::vector<double> scratch_maps, transfer_maps;
  bool all_copies_exact = true;
  for (uint64_t seed : seeds) {
    TrainConfig src_cfg = base;
    src_cfg.variant = Variant::double_frame;
    src_cfg.seed = seed;
    TrainResult src_run = train(src_cfg, src);

    TrainConfig dst_cfg = src_cfg;
    TrainResult scratch_run = train(dst_cfg, dst);
    PairBuilder eval_builder(dst_cfg.variant, dst_cfg.offset, dst_cfg.flow, dst_cfg.flow_clamp);
    double scratch_map =
        evaluate_model(scratch_run.model, dst.test.empty() ? dst.train : dst.test, dst_cfg,
                       eval_builder)
            .map;

    ModelState dst_init = build_model(resolve_model_spec(dst_cfg, dst), seed);
    ModelState transferred = transfer_weights(src_run.model, dst_init);
    bool copy_exact = true;
    for (size_t li = 0; li < transferred.layers.size(); ++li) {
      if (transferred.layers[li].name == "head.cls.out" &&
          src_run.model.spec.num_classes != transferred.spec.num_classes)
        continue;
      copy_exact = copy_exact &&
                   transferred.layers[li].layer.weights == src_run.model.layers[li].layer.weights &&
                   transferred.layers[li].layer.bias == src_run.model.layers[li].layer.bias;
    }
    all_copies_exact = all_copies_exact && copy_exact;

    TrainConfig ft_cfg = dst_cfg;
    ft_cfg.epochs = std::max(1, dst_cfg.epochs / 2);
    TrainResult ft_run = train(ft_cfg, dst, &transferred);
    PairBuilder ft_eval(ft_cfg.variant, ft_cfg.offset, ft_cfg.flow, ft_cfg.flow_clamp);
    double transfer_map =
        evaluate_model(ft_run.model, dst.test.empty() ? dst.train : dst.test, ft_cfg, ft_eval).map;

    scratch_maps.push_back(scratch_map);
    transfer_maps.push_back(transfer_map);
    rows.push_back({{"seed", seed},
                    {"scratch_map", scratch_map},
                    {"transfer_map", transfer_map},
                    {"copy_exact", copy_exact},
                    {"scratch_config", train_config_to_json(dst_cfg)},
                    {"finetune_config", train_config_to_json(ft_cfg)},
                    {"src_config", train_config_to_json(src_cfg)}});
  }
  double mean_scratch = detail::mean(scratch_maps);
  double mean_transfer = detail::mean(transfer_maps);
  bool passed = all_copies_exact && mean_transfer >= 0.9 * mean_scratch;
  return {{{"experiment", "transfer"},
           {"rows", rows},
           {"mean_scratch_map", mean_scratch},
           {"mean_transfer_map", mean_transfer},
           {"assertion",
            "non-final weights copied bit-exactly and half-budget transfer mAP >= 90% of "
            "from-scratch mAP"},
           {"passed", passed}},
          passed};
}

// Trains the two-frame variant, then evaluates with true pairs versus the
// duplicated-frame fallback. Report-only: the delta is informational,
// including per-stratum breakdowns.
inline ExperimentResult experiment_fallback(const TrainConfig& base, const Dataset& data,
                                            const std::vector<uint64_t>& seeds) {
  if (seeds.empty()) throw std::invalid_argument("experiment_fallback: no seeds");
  nlohmann::json rows = nlohmann::json::array();
  for (uint64_t seed : seeds) {
    TrainConfig cfg = base;
    cfg.variant = Variant::double_frame;
    cfg.seed = seed;
    TrainResult r = train(cfg, data);
    const auto& eval_scenes = data.test.empty() ? data.train : data.test;
    PairBuilder paired(cfg.variant, cfg.offset, cfg.flow, cfg.flow_clamp);
    PairBuilder fallback(cfg.variant, cfg.offset, cfg.flow, cfg.flow_clamp, true);
    EvalReport paired_rep = evaluate_model(r.model, eval_scenes, cfg, paired, true);
    EvalReport fallback_rep = evaluate_model(r.model, eval_scenes, cfg, fallback, true);
    nlohmann::json strata = nlohmann::json::array();
    for (size_t s = 0; s < paired_rep.strata.size(); ++s)
      strata.push_back({{"name", paired_rep.strata[s].name},
                        {"paired_map", paired_rep.strata[s].map},
                        {"fallback_map", fallback_rep.strata[s].map},
                        {"delta", paired_rep.strata[s].map - fallback_rep.strata[s].map}});
    rows.push_back({{"seed", seed},
                    {"paired_map", paired_rep.map},
                    {"fallback_map", fallback_rep.map},
                    {"delta", paired_rep.map - fallback_rep.map},
                    {"strata", strata},
                    {"config", train_config_to_json(cfg)}});
  }
  return {{{"experiment", "fallback"},
           {"rows", rows},
           {"assertion", "none (reported, not asserted)"},
           {"passed", true}},
          true};
}

inline void write_experiment_report(const ExperimentResult& result, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream f((fs::path(dir) / "report.json").string());
  f << result.report.dump(2) << "\n";
  if (!f) throw std::runtime_error("write_experiment_report: cannot write report.json");
  std::ofstream csv((fs::path(dir) / "rows.csv").string());
  const auto& rows = result.report.at("rows");
  if (!rows.empty()) {
    std::vector<std::string> cols;
    for (auto it = rows[0].begin(); it != rows[0].end(); ++it)
      if (!it.value().is_structured()) cols.push_back(it.key());
    for (size_t i = 0; i < cols.size(); ++i) csv << cols[i] << (i + 1 < cols.size() ? "," : "\n");
    for (const auto& row : rows) {
      for (size_t i = 0; i < cols.size(); ++i) {
        const auto& v = row.at(cols[i]);
        if (v.is_string())
          csv << v.get<std::string>();
        else
          csv << v.dump();
        csv << (i + 1 < cols.size() ? "," : "\n");
      }
    }
  }
}

}  // namespace vodet
