#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vodet/geometry.hpp"
#include "vodet/inputs.hpp"
#include "vodet/nn.hpp"
#include "vodet/random.hpp"

namespace vodet {

// Architecture description. pyramid_levels must equal
// anchor_config.pyramid_strides so head output grids and anchor grids
// coincide cell for cell.
struct ModelSpec {
  Variant variant = Variant::double_frame;
  int input_channels = 6;
  int num_classes = 3;
  AnchorConfig anchor_config{{4, 8}, {0.75, 1.25, 2.0}, {0.5, 1.0, 2.0}, 8.0};
  std::vector<int> backbone_widths{16, 32, 64};
  std::vector<int> pyramid_levels{4, 8};
  int fpn_channels = 32;
  int head_depth = 1;
  double prior_prob = 0.01;
  std::vector<double> input_means;  // subtracted per channel before the backbone
  int frame_offset = 1;             // pairing offset the model expects

  static ModelSpec for_variant(Variant v, int num_classes_ = 3) {
    ModelSpec s;
    s.variant = v;
    s.input_channels = variant_channels(v);
    s.num_classes = num_classes_;
    return s;
  }

  void validate() const {
    if (num_classes < 1) throw std::invalid_argument("ModelSpec: num_classes must be >= 1");
    if (input_channels != variant_channels(variant))
      throw std::invalid_argument("ModelSpec: input_channels inconsistent with variant");
    if (backbone_widths.size() != 3)
      throw std::invalid_argument("ModelSpec: backbone has exactly 3 stages");
    for (int w : backbone_widths)
      if (w < 1) throw std::invalid_argument("ModelSpec: backbone widths must be >= 1");
    if (pyramid_levels.empty())
      throw std::invalid_argument("ModelSpec: pyramid_levels empty");
    for (int s : pyramid_levels)
      if (s != 2 && s != 4 && s != 8)
        throw std::invalid_argument("ModelSpec: pyramid strides limited to {2,4,8}");
    for (size_t i = 1; i < pyramid_levels.size(); ++i)
      if (pyramid_levels[i] <= pyramid_levels[i - 1])
        throw std::invalid_argument("ModelSpec: pyramid_levels must be strictly increasing");
    if (pyramid_levels != anchor_config.pyramid_strides)
      throw std::invalid_argument("ModelSpec: pyramid_levels must match anchor strides");
    if (fpn_channels < 1) throw std::invalid_argument("ModelSpec: fpn_channels must be >= 1");
    if (head_depth < 0) throw std::invalid_argument("ModelSpec: head_depth must be >= 0");
    if (!(prior_prob > 0.0 && prior_prob < 1.0))
      throw std::invalid_argument("ModelSpec: prior_prob must be in (0,1)");
    if (!input_means.empty() && input_means.size() != static_cast<size_t>(input_channels))
      throw std::invalid_argument("ModelSpec: input_means size mismatch");
    for (double m : input_means)
      if (!std::isfinite(m)) throw std::invalid_argument("ModelSpec: non-finite input mean");
    if (frame_offset < 0) throw std::invalid_argument("ModelSpec: negative frame_offset");
    anchor_config.validate();
  }

  // Equality of everything that determines parameter shapes and meaning.
  // input_means and frame_offset are data-bound, not architectural.
  bool architecture_equals(const ModelSpec& o, bool ignore_num_classes) const {
    return variant == o.variant && input_channels == o.input_channels &&
           (ignore_num_classes || num_classes == o.num_classes) &&
           anchor_config.pyramid_strides == o.anchor_config.pyramid_strides &&
           anchor_config.scales == o.anchor_config.scales &&
           anchor_config.aspect_ratios == o.anchor_config.aspect_ratios &&
           anchor_config.base_size == o.anchor_config.base_size &&
           backbone_widths == o.backbone_widths && pyramid_levels == o.pyramid_levels &&
           fpn_channels == o.fpn_channels && head_depth == o.head_depth;
  }
};

struct NamedLayer {
  std::string name;
  ConvLayer layer;
};

struct ModelState {
  ModelSpec spec;
  long long step = 0;
  std::vector<NamedLayer> layers;

  int find(const std::string& name) const {
    for (size_t i = 0; i < layers.size(); ++i)
      if (layers[i].name == name) return static_cast<int>(i);
    return -1;
  }
  const ConvLayer& layer(const std::string& name) const {
    int i = find(name);
    if (i < 0) throw std::out_of_range("ModelState: no layer " + name);
    return layers[static_cast<size_t>(i)].layer;
  }
  ConvLayer& layer(const std::string& name) {
    int i = find(name);
    if (i < 0) throw std::out_of_range("ModelState: no layer " + name);
    return layers[static_cast<size_t>(i)].layer;
  }
  size_t parameter_count() const {
    size_t n = 0;
    for (const auto& nl : layers) n += nl.layer.parameter_count();
    return n;
  }
};

namespace detail {

inline int stage_for_stride(int stride) {
  switch (stride) {
    case 2: return 1;
    case 4: return 2;
    case 8: return 3;
  }
  throw std::invalid_argument("stage_for_stride: unsupported stride");
}

// Layer skeleton in canonical order; shared by init and checkpoint loading.
inline std::vector<NamedLayer> make_layers(const ModelSpec& spec) {
  std::vector<NamedLayer> layers;
  int a = spec.anchor_config.anchors_per_cell();
  int in_c = spec.input_channels;
  for (int t = 1; t <= 3; ++t) {
    int w = spec.backbone_widths[static_cast<size_t>(t - 1)];
    layers.push_back({"backbone.s" + std::to_string(t) + ".down", ConvLayer(in_c, w, 3, 2)});
    layers.push_back({"backbone.s" + std::to_string(t) + ".conv", ConvLayer(w, w, 3, 1)});
    in_c = w;
  }
  for (int s : spec.pyramid_levels) {
    int w = spec.backbone_widths[static_cast<size_t>(stage_for_stride(s) - 1)];
    layers.push_back({"fpn.lateral.s" + std::to_string(s), ConvLayer(w, spec.fpn_channels, 1, 1)});
  }
  for (int s : spec.pyramid_levels)
    layers.push_back(
        {"fpn.smooth.s" + std::to_string(s), ConvLayer(spec.fpn_channels, spec.fpn_channels, 3, 1)});
  for (int d = 0; d < spec.head_depth; ++d)
    layers.push_back(
        {"head.cls." + std::to_string(d), ConvLayer(spec.fpn_channels, spec.fpn_channels, 3, 1)});
  layers.push_back({"head.cls.out", ConvLayer(spec.fpn_channels, a * spec.num_classes, 3, 1)});
  for (int d = 0; d < spec.head_depth; ++d)
    layers.push_back(
        {"head.reg." + std::to_string(d), ConvLayer(spec.fpn_channels, spec.fpn_channels, 3, 1)});
  layers.push_back({"head.reg.out", ConvLayer(spec.fpn_channels, a * 4, 3, 1)});
  return layers;
}

}  // namespace detail

// Deterministic initialization: He-normal hidden layers, small-sigma output
// layers, and a classification output bias putting the initial foreground
// probability at prior_prob.
inline ModelState build_model(const ModelSpec& spec, uint64_t seed) {
  spec.validate();
  ModelState m;
  m.spec = spec;
  m.layers = detail::make_layers(spec);
  Rng rng(seed);
  for (auto& nl : m.layers) {
    ConvLayer& l = nl.layer;
    bool is_out = nl.name == "head.cls.out" || nl.name == "head.reg.out";
    double std_dev =
        is_out ? 0.01 : std::sqrt(2.0 / (static_cast<double>(l.ksize) * l.ksize * l.in_channels));
    for (double& w : l.weights) w = rng.normal() * std_dev;
    double b = nl.name == "head.cls.out"
                   ? std::log(spec.prior_prob / (1.0 - spec.prior_prob))
                   : 0.0;
    for (double& v : l.bias) v = b;
  }
  return m;
}

// Per-level maps. Channel packing on a cls map is anchor-major: channel
// a * num_classes + k; on a reg map, a * 4 + j. Concatenating map buffers
// level by level therefore yields anchor-major flat arrays in exactly the
// generate_anchors order.
struct DetectorOutput {
  std::vector<Image> cls_probs;
  std::vector<Image> reg;
};

struct ForwardTrace {
  Image input;
  std::vector<Image> bb_pre, bb_act;           // six entries: s1.down .. s3.conv
  std::vector<Image> laterals, merged, feats;  // per pyramid level
  std::vector<std::vector<Image>> cls_pre, cls_act, reg_pre, reg_act;  // [level][depth]
  std::vector<Image> cls_logits, cls_probs, reg_out;
};

inline DetectorOutput forward(const ModelState& m, const ModelInput& input,
                              ForwardTrace* trace = nullptr) {
  if (input.channels.channels != m.spec.input_channels)
    throw std::invalid_argument("forward: input channel count mismatch");
  if (input.variant != m.spec.variant)
    throw std::invalid_argument("forward: input variant mismatch");

  Image x = input.channels;
  if (!m.spec.input_means.empty())
    for (size_t i = 0; i < x.data.size(); ++i)
      x.data[i] -= m.spec.input_means[i % m.spec.input_means.size()];

  ForwardTrace local;
  ForwardTrace& tr = trace ? *trace : local;
  tr = ForwardTrace{};
  tr.input = std::move(x);

  // backbone
  const Image* cur = &tr.input;
  tr.bb_pre.reserve(6);
  tr.bb_act.reserve(6);
  for (int t = 1; t <= 3; ++t) {
    for (const char* part : {".down", ".conv"}) {
      const ConvLayer& l = m.layer("backbone.s" + std::to_string(t) + part);
      tr.bb_pre.push_back(conv_forward(l, *cur));
      tr.bb_act.push_back(relu(tr.bb_pre.back()));
      cur = &tr.bb_act.back();
    }
  }

  const size_t num_levels = m.spec.pyramid_levels.size();
  auto stage_out = [&](int stride) -> const Image& {
    return tr.bb_act[static_cast<size_t>(2 * detail::stage_for_stride(stride) - 1)];
  };

  // lateral projections and top-down merge, coarsest level first
  tr.laterals.resize(num_levels);
  tr.merged.resize(num_levels);
  tr.feats.resize(num_levels);
  for (size_t i = 0; i < num_levels; ++i) {
    int s = m.spec.pyramid_levels[i];
    tr.laterals[i] = conv_forward(m.layer("fpn.lateral.s" + std::to_string(s)), stage_out(s));
  }
  for (size_t ri = 0; ri < num_levels; ++ri) {
    size_t i = num_levels - 1 - ri;
    if (i == num_levels - 1)
      tr.merged[i] = tr.laterals[i];
    else
      tr.merged[i] = add(tr.laterals[i], upsample_nearest(tr.merged[i + 1], tr.laterals[i].width,
                                                          tr.laterals[i].height));
  }
  for (size_t i = 0; i < num_levels; ++i) {
    int s = m.spec.pyramid_levels[i];
    tr.feats[i] = conv_forward(m.layer("fpn.smooth.s" + std::to_string(s)), tr.merged[i]);
  }

  // shared heads on every level
  tr.cls_pre.assign(num_levels, {});
  tr.cls_act.assign(num_levels, {});
  tr.reg_pre.assign(num_levels, {});
  tr.reg_act.assign(num_levels, {});
  tr.cls_logits.resize(num_levels);
  tr.cls_probs.resize(num_levels);
  tr.reg_out.resize(num_levels);
  for (size_t i = 0; i < num_levels; ++i) {
    size_t depth = static_cast<size_t>(m.spec.head_depth);
    tr.cls_pre[i].reserve(depth);
    tr.cls_act[i].reserve(depth);
    tr.reg_pre[i].reserve(depth);
    tr.reg_act[i].reserve(depth);
    const Image* h = &tr.feats[i];
    for (int d = 0; d < m.spec.head_depth; ++d) {
      tr.cls_pre[i].push_back(conv_forward(m.layer("head.cls." + std::to_string(d)), *h));
      tr.cls_act[i].push_back(relu(tr.cls_pre[i].back()));
      h = &tr.cls_act[i].back();
    }
    tr.cls_logits[i] = conv_forward(m.layer("head.cls.out"), *h);
    tr.cls_probs[i] = tr.cls_logits[i];
    for (double& v : tr.cls_probs[i].data) v = sigmoid(v);

    h = &tr.feats[i];
    for (int d = 0; d < m.spec.head_depth; ++d) {
      tr.reg_pre[i].push_back(conv_forward(m.layer("head.reg." + std::to_string(d)), *h));
      tr.reg_act[i].push_back(relu(tr.reg_pre[i].back()));
      h = &tr.reg_act[i].back();
    }
    tr.reg_out[i] = conv_forward(m.layer("head.reg.out"), *h);
  }

  DetectorOutput out;
  out.cls_probs = tr.cls_probs;
  out.reg = tr.reg_out;
  return out;
}

// Concatenation of per-level map buffers; see DetectorOutput for why this is
// the anchor-major order.
inline std::vector<double> flatten_maps(const std::vector<Image>& maps) {
  std::vector<double> flat;
  size_t n = 0;
  for (const Image& im : maps) n += im.data.size();
  flat.reserve(n);
  for (const Image& im : maps) flat.insert(flat.end(), im.data.begin(), im.data.end());
  return flat;
}

inline std::vector<Image> unflatten_like(const std::vector<Image>& shape_ref,
                                         const std::vector<double>& flat) {
  size_t total = 0;
  for (const Image& im : shape_ref) total += im.data.size();
  if (flat.size() != total) throw std::invalid_argument("unflatten_like: size mismatch");
  std::vector<Image> out;
  out.reserve(shape_ref.size());
  size_t pos = 0;
  for (const Image& im : shape_ref) {
    Image o(im.width, im.height, im.channels);
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(pos),
              flat.begin() + static_cast<std::ptrdiff_t>(pos + o.data.size()), o.data.begin());
    pos += o.data.size();
    out.push_back(std::move(o));
  }
  return out;
}

struct LayerGrads {
  std::vector<double> dweights;
  std::vector<double> dbias;
};

struct ModelGrads {
  std::vector<LayerGrads> layers;

  static ModelGrads zeros_like(const ModelState& m) {
    ModelGrads g;
    g.layers.reserve(m.layers.size());
    for (const auto& nl : m.layers)
      g.layers.push_back({std::vector<double>(nl.layer.weights.size(), 0.0),
                          std::vector<double>(nl.layer.bias.size(), 0.0)});
    return g;
  }
};

// Backpropagation through the trace. dcls is dL/d(probability), dreg is
// dL/d(regression output), both flattened in the anchor-major order.
inline ModelGrads backward(const ModelState& m, const ForwardTrace& tr,
                           const std::vector<double>& dcls, const std::vector<double>& dreg) {
  ModelGrads grads = ModelGrads::zeros_like(m);
  auto grad_of = [&](const std::string& name) -> LayerGrads& {
    int i = m.find(name);
    if (i < 0) throw std::out_of_range("backward: no layer " + name);
    return grads.layers[static_cast<size_t>(i)];
  };
  auto back = [&](const std::string& name, const Image& in, const Image& dout) {
    LayerGrads& lg = grad_of(name);
    return conv_backward(m.layer(name), in, dout, lg.dweights, lg.dbias);
  };

  const size_t num_levels = m.spec.pyramid_levels.size();
  std::vector<Image> dprob = unflatten_like(tr.cls_probs, dcls);
  std::vector<Image> dregm = unflatten_like(tr.reg_out, dreg);

  // heads; chain through the sigmoid first
  std::vector<Image> dfeats(num_levels);
  for (size_t i = 0; i < num_levels; ++i) {
    Image dlogit = dprob[i];
    for (size_t j = 0; j < dlogit.data.size(); ++j) {
      double p = tr.cls_probs[i].data[j];
      dlogit.data[j] *= p * (1.0 - p);
    }
    const Image& cls_in =
        m.spec.head_depth > 0 ? tr.cls_act[i].back() : tr.feats[i];
    Image d = back("head.cls.out", cls_in, dlogit);
    for (int dd = m.spec.head_depth - 1; dd >= 0; --dd) {
      d = relu_backward(d, tr.cls_pre[i][static_cast<size_t>(dd)]);
      const Image& in = dd == 0 ? tr.feats[i] : tr.cls_act[i][static_cast<size_t>(dd - 1)];
      d = back("head.cls." + std::to_string(dd), in, d);
    }
    dfeats[i] = d;

    const Image& reg_in =
        m.spec.head_depth > 0 ? tr.reg_act[i].back() : tr.feats[i];
    d = back("head.reg.out", reg_in, dregm[i]);
    for (int dd = m.spec.head_depth - 1; dd >= 0; --dd) {
      d = relu_backward(d, tr.reg_pre[i][static_cast<size_t>(dd)]);
      const Image& in = dd == 0 ? tr.feats[i] : tr.reg_act[i][static_cast<size_t>(dd - 1)];
      d = back("head.reg." + std::to_string(dd), in, d);
    }
    dfeats[i] = add(dfeats[i], d);
  }

  // pyramid
  std::vector<Image> dmerged(num_levels);
  for (size_t i = 0; i < num_levels; ++i) {
    int s = m.spec.pyramid_levels[i];
    dmerged[i] = back("fpn.smooth.s" + std::to_string(s), tr.merged[i], dfeats[i]);
  }
  for (size_t i = 0; i + 1 < num_levels; ++i)
    dmerged[i + 1] = add(dmerged[i + 1], upsample_nearest_backward(dmerged[i], tr.merged[i + 1].width,
                                                                   tr.merged[i + 1].height));

  // laterals feed backbone stage outputs
  std::vector<Image> dstage(tr.bb_act.size());
  for (size_t i = 0; i < num_levels; ++i) {
    int s = m.spec.pyramid_levels[i];
    size_t idx = static_cast<size_t>(2 * detail::stage_for_stride(s) - 1);
    Image d = back("fpn.lateral.s" + std::to_string(s), tr.bb_act[idx], dmerged[i]);
    dstage[idx] = dstage[idx].data.empty() ? std::move(d) : add(dstage[idx], d);
  }

  // backbone, last conv to first
  Image d;
  for (int li = 5; li >= 0; --li) {
    size_t idx = static_cast<size_t>(li);
    if (!dstage[idx].data.empty())
      d = d.data.empty() ? std::move(dstage[idx]) : add(d, dstage[idx]);
    if (d.data.empty())
      d = Image(tr.bb_act[idx].width, tr.bb_act[idx].height, tr.bb_act[idx].channels);
    d = relu_backward(d, tr.bb_pre[idx]);
    int t = li / 2 + 1;
    const char* part = (li % 2 == 1) ? ".conv" : ".down";
    const Image& in = idx == 0 ? tr.input : tr.bb_act[idx - 1];
    d = back("backbone.s" + std::to_string(t) + part, in, d);
  }
  return grads;
}

// Decode every anchor whose class probability clears score_thr, clip to the
// input, run per-class NMS, keep the top max_dets by score.
inline std::vector<Detection> predict(const ModelState& m, const ModelInput& input,
                                      double score_thr = 0.3, double nms_thr = 0.5,
                                      int max_dets = 100) {
  DetectorOutput out = forward(m, input);
  std::vector<Box> anchors =
      generate_anchors(m.spec.anchor_config, input.channels.width, input.channels.height);
  std::vector<double> probs = flatten_maps(out.cls_probs);
  std::vector<double> regs = flatten_maps(out.reg);
  const int k = m.spec.num_classes;
  if (probs.size() != anchors.size() * static_cast<size_t>(k))
    throw std::logic_error("predict: probability map size inconsistent with anchors");
  Box frame{0.0, 0.0, static_cast<double>(input.channels.width),
            static_cast<double>(input.channels.height)};
  std::vector<Detection> dets;
  for (size_t a = 0; a < anchors.size(); ++a)
    for (int c = 0; c < k; ++c) {
      double p = probs[a * static_cast<size_t>(k) + static_cast<size_t>(c)];
      if (p < score_thr) continue;
      BoxDelta t{regs[a * 4], regs[a * 4 + 1], regs[a * 4 + 2], regs[a * 4 + 3]};
      if (auto b = decode_box(anchors[a], t, frame)) dets.push_back({*b, c, p});
    }
  dets = nms(dets, nms_thr);
  if (dets.size() > static_cast<size_t>(max_dets)) dets.resize(static_cast<size_t>(max_dets));
  return dets;
}

// Copy all parameters from src into a clone of dst. When class counts differ
// the final classification layer keeps dst's values; everything else must
// match shape for shape.
inline ModelState transfer_weights(const ModelState& src, const ModelState& dst) {
  if (!src.spec.architecture_equals(dst.spec, true))
    throw std::invalid_argument("transfer_weights: architectures differ beyond num_classes");
  bool skip_cls_out = src.spec.num_classes != dst.spec.num_classes;
  if (src.layers.size() != dst.layers.size())
    throw std::invalid_argument("transfer_weights: layer count mismatch");
  ModelState out = dst;
  for (size_t i = 0; i < src.layers.size(); ++i) {
    const NamedLayer& s = src.layers[i];
    NamedLayer& d = out.layers[i];
    if (s.name != d.name) throw std::invalid_argument("transfer_weights: layer order mismatch");
    if (s.name == "head.cls.out" && skip_cls_out) continue;
    if (s.layer.weights.size() != d.layer.weights.size() ||
        s.layer.bias.size() != d.layer.bias.size())
      throw std::invalid_argument("transfer_weights: shape mismatch at " + s.name);
    d.layer.weights = s.layer.weights;
    d.layer.bias = s.layer.bias;
  }
  return out;
}

// Flat parameter view in canonical order (per layer: weights then bias).
inline double& parameter_at(ModelState& m, size_t idx) {
  for (auto& nl : m.layers) {
    if (idx < nl.layer.weights.size()) return nl.layer.weights[idx];
    idx -= nl.layer.weights.size();
    if (idx < nl.layer.bias.size()) return nl.layer.bias[idx];
    idx -= nl.layer.bias.size();
  }
  throw std::out_of_range("parameter_at: index out of range");
}

inline double gradient_at(const ModelGrads& g, size_t idx) {
  for (const auto& lg : g.layers) {
    if (idx < lg.dweights.size()) return lg.dweights[idx];
    idx -= lg.dweights.size();
    if (idx < lg.dbias.size()) return lg.dbias[idx];
    idx -= lg.dbias.size();
  }
  throw std::out_of_range("gradient_at: index out of range");
}

inline nlohmann::json spec_to_json(const ModelSpec& s) {
  return nlohmann::json{{"variant", variant_name(s.variant)},
                        {"input_channels", s.input_channels},
                        {"num_classes", s.num_classes},
                        {"anchor_config",
                         {{"pyramid_strides", s.anchor_config.pyramid_strides},
                          {"scales", s.anchor_config.scales},
                          {"aspect_ratios", s.anchor_config.aspect_ratios},
                          {"base_size", s.anchor_config.base_size}}},
                        {"backbone_widths", s.backbone_widths},
                        {"pyramid_levels", s.pyramid_levels},
                        {"fpn_channels", s.fpn_channels},
                        {"head_depth", s.head_depth},
                        {"prior_prob", s.prior_prob},
                        {"input_means", s.input_means},
                        {"frame_offset", s.frame_offset}};
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.variant = variant_from_name(j.at("variant").get<std::string>());
  s.input_channels = j.at("input_channels").get<int>();
  s.num_classes = j.at("num_classes").get<int>();
  const auto& a = j.at("anchor_config");
  s.anchor_config.pyramid_strides = a.at("pyramid_strides").get<std::vector<int>>();
  s.anchor_config.scales = a.at("scales").get<std::vector<double>>();
  s.anchor_config.aspect_ratios = a.at("aspect_ratios").get<std::vector<double>>();
  s.anchor_config.base_size = a.at("base_size").get<double>();
  s.backbone_widths = j.at("backbone_widths").get<std::vector<int>>();
  s.pyramid_levels = j.at("pyramid_levels").get<std::vector<int>>();
  s.fpn_channels = j.at("fpn_channels").get<int>();
  s.head_depth = j.at("head_depth").get<int>();
  s.prior_prob = j.at("prior_prob").get<double>();
  s.input_means = j.at("input_means").get<std::vector<double>>();
  s.frame_offset = j.at("frame_offset").get<int>();
  s.validate();
  return s;
}

// Checkpoint container: magic "PDET1", then a JSON header (spec, step,
// format version), then named shape-tagged little-endian float32 arrays.
inline void save_checkpoint(const std::string& path, const ModelState& m) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  f.write("PDET1", 5);
  nlohmann::json header{{"format", 1}, {"step", m.step}, {"spec", spec_to_json(m.spec)}};
  std::string hs = header.dump();
  auto write_u32 = [&](uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
  write_u32(static_cast<uint32_t>(hs.size()));
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  write_u32(static_cast<uint32_t>(m.layers.size() * 2));
  auto write_array = [&](const std::string& name, const std::vector<uint32_t>& dims,
                         const std::vector<double>& data) {
    write_u32(static_cast<uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(static_cast<uint32_t>(dims.size()));
    for (uint32_t d : dims) write_u32(d);
    std::vector<float> buf(data.begin(), data.end());
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  };
  for (const auto& nl : m.layers) {
    const ConvLayer& l = nl.layer;
    write_array(nl.name + ".weight",
                {static_cast<uint32_t>(l.out_channels), static_cast<uint32_t>(l.ksize),
                 static_cast<uint32_t>(l.ksize), static_cast<uint32_t>(l.in_channels)},
                l.weights);
    write_array(nl.name + ".bias", {static_cast<uint32_t>(l.out_channels)}, l.bias);
  }
  if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline ModelState load_checkpoint(const std::string& path) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[5];
  f.read(magic, 5);
  if (!f || std::memcmp(magic, "PDET1", 5) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  auto read_u32 = [&]() {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    if (!f) throw std::runtime_error("load_checkpoint: truncated file " + path);
    return v;
  };
  uint32_t hlen = read_u32();
  std::string hs(hlen, '\0');
  f.read(hs.data(), hlen);
  if (!f) throw std::runtime_error("load_checkpoint: truncated header in " + path);
  nlohmann::json header = nlohmann::json::parse(hs);
  if (header.at("format").get<int>() != 1)
    throw std::runtime_error("load_checkpoint: unsupported format version");
  ModelState m;
  m.spec = spec_from_json(header.at("spec"));
  m.step = header.at("step").get<long long>();
  m.layers = detail::make_layers(m.spec);

  uint32_t num_arrays = read_u32();
  for (uint32_t i = 0; i < num_arrays; ++i) {
    uint32_t nlen = read_u32();
    std::string name(nlen, '\0');
    f.read(name.data(), nlen);
    uint32_t ndim = read_u32();
    size_t count = 1;
    std::vector<uint32_t> dims(ndim);
    for (uint32_t d = 0; d < ndim; ++d) {
      dims[d] = read_u32();
      count *= dims[d];
    }
    std::vector<float> buf(count);
    f.read(reinterpret_cast<char*>(buf.data()),
           static_cast<std::streamsize>(count * sizeof(float)));
    if (!f) throw std::runtime_error("load_checkpoint: truncated array " + name);

    bool is_weight = name.size() > 7 && name.substr(name.size() - 7) == ".weight";
    bool is_bias = name.size() > 5 && name.substr(name.size() - 5) == ".bias";
    if (!is_weight && !is_bias)
      throw std::runtime_error("load_checkpoint: unknown array " + name);
    std::string lname = name.substr(0, name.size() - (is_weight ? 7 : 5));
    ConvLayer& l = m.layer(lname);
    std::vector<double>& dst = is_weight ? l.weights : l.bias;
    if (dst.size() != count)
      throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
    std::copy(buf.begin(), buf.end(), dst.begin());
  }
  return m;
}

}  // namespace vodet
