#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vodet/geometry.hpp"
#include "vodet/image.hpp"
#include "vodet/inputs.hpp"
#include "vodet/random.hpp"

namespace vodet {

enum ScenarioTag : uint32_t {
  tag_small = 1,
  tag_occluded = 2,
  tag_blurred = 4,
  tag_stationary = 8,
  tag_distractor = 16,
};

struct ClassSpec {
  std::string name;
  double min_size = 4.0;
  double max_size = 8.0;
  double min_speed = 0.0;
  double max_speed = 4.0;
};

struct SceneSpec {
  int image_width = 128;
  int image_height = 128;
  int num_frames = 20;
  std::vector<ClassSpec> classes{{"car", 16.0, 28.0, 0.0, 4.0},
                                 {"pedestrian", 4.0, 8.0, 0.0, 4.0},
                                 {"bus", 28.0, 40.0, 0.0, 4.0}};
  int min_objects = 4;
  int max_objects = 8;
  int occluder_count = 0;
  int blur_strength = 1;  // sub-frame samples averaged per frame; 1 = no blur
  int distractor_count = 0;
  double stationary_fraction = 0.0;
  double background_scale = 16.0;
  double background_contrast = 0.25;
  double texture_contrast = 0.5;
  double small_threshold = 12.0;  // tag_small when max(w,h) <= this
  uint64_t seed = 0;

  void validate() const {
    if (image_width < 16 || image_height < 16)
      throw std::invalid_argument("SceneSpec: image too small");
    if (num_frames < 1) throw std::invalid_argument("SceneSpec: num_frames must be >= 1");
    if (classes.empty()) throw std::invalid_argument("SceneSpec: no classes");
    for (const auto& c : classes) {
      if (!(c.min_size > 0) || c.max_size < c.min_size)
        throw std::invalid_argument("SceneSpec: bad size range for class " + c.name);
      if (c.min_speed < 0 || c.max_speed < c.min_speed)
        throw std::invalid_argument("SceneSpec: bad speed range for class " + c.name);
    }
    if (min_objects < 0 || max_objects < min_objects)
      throw std::invalid_argument("SceneSpec: bad object count range");
    if (occluder_count < 0 || distractor_count < 0)
      throw std::invalid_argument("SceneSpec: negative counts");
    if (blur_strength < 1) throw std::invalid_argument("SceneSpec: blur_strength must be >= 1");
    if (!(stationary_fraction >= 0.0 && stationary_fraction <= 1.0))
      throw std::invalid_argument("SceneSpec: stationary_fraction outside [0,1]");
    if (!(background_scale > 0) || !(small_threshold > 0))
      throw std::invalid_argument("SceneSpec: non-positive texture parameter");
  }
};

struct SceneObject {
  int class_id = 0;
  double w = 0, h = 0;
  double x0 = 0, y0 = 0;  // center at frame 0
  double vx = 0, vy = 0;  // px per frame
  uint32_t tags = 0;
  uint64_t texture_seed = 0;
  std::array<double, 3> color{0.5, 0.5, 0.5};

  double cx(double t) const { return x0 + vx * t; }
  double cy(double t) const { return y0 + vy * t; }
  Box box_at(double t) const {
    return Box(cx(t) - 0.5 * w, cy(t) - 0.5 * h, cx(t) + 0.5 * w, cy(t) + 0.5 * h);
  }
  bool is_distractor() const { return (tags & tag_distractor) != 0; }
};

struct Occluder {
  Box box;  // static, spans the full image along one axis
  uint64_t texture_seed = 0;
};

struct AnnotatedSequence {
  SceneSpec spec;
  std::vector<Frame> frames;
  std::vector<std::vector<LabeledBox>> ground_truth;  // per frame, distractors excluded
  std::vector<SceneObject> objects;                   // annotated objects then distractors
  std::vector<Occluder> occluders;
  std::array<double, 3> channel_means{0, 0, 0};
};

// Bilinearly interpolated lattice noise in [0,1].
inline double value_noise(uint64_t seed, double u, double v, double cell) {
  double fu = u / cell, fv = v / cell;
  long long iu = static_cast<long long>(std::floor(fu));
  long long iv = static_cast<long long>(std::floor(fv));
  double tu = fu - iu, tv = fv - iv;
  auto corner = [&](long long a, long long b) {
    return hash_to_unit(hash_coords(seed, a, b));
  };
  double top = corner(iu, iv) * (1 - tu) + corner(iu + 1, iv) * tu;
  double bot = corner(iu, iv + 1) * (1 - tu) + corner(iu + 1, iv + 1) * tu;
  return top * (1 - tv) + bot * tv;
}

namespace detail {

inline std::array<double, 3> class_palette(int class_id) {
  static const std::array<double, 3> palette[] = {
      {0.62, 0.30, 0.26}, {0.26, 0.32, 0.62}, {0.64, 0.58, 0.20},
      {0.30, 0.58, 0.34}, {0.55, 0.30, 0.55}, {0.30, 0.55, 0.55},
  };
  return palette[static_cast<size_t>(class_id) % 6];
}

// Coverage-weighted rectangle fill: each pixel blends by the overlap area of
// its unit cell with the box, using the object's own moving texture frame.
inline void draw_textured_box(Image& img, const Box& b, const std::array<double, 3>& color,
                              uint64_t texture_seed, double texture_contrast, double local_u0,
                              double local_v0) {
  int x_lo = std::max(0, static_cast<int>(std::floor(b.x1)));
  int x_hi = std::min(img.width - 1, static_cast<int>(std::ceil(b.x2)) - 1);
  int y_lo = std::max(0, static_cast<int>(std::floor(b.y1)));
  int y_hi = std::min(img.height - 1, static_cast<int>(std::ceil(b.y2)) - 1);
  for (int y = y_lo; y <= y_hi; ++y) {
    double cy = std::min(b.y2, y + 1.0) - std::max(b.y1, static_cast<double>(y));
    if (cy <= 0) continue;
    for (int x = x_lo; x <= x_hi; ++x) {
      double cx = std::min(b.x2, x + 1.0) - std::max(b.x1, static_cast<double>(x));
      if (cx <= 0) continue;
      double cov = cx * cy;
      double n = value_noise(texture_seed, x + 0.5 - local_u0, y + 0.5 - local_v0, 3.0);
      for (int c = 0; c < 3; ++c) {
        double val = std::clamp(color[static_cast<size_t>(c)] *
                                    (1.0 + texture_contrast * (n - 0.5)),
                                0.0, 1.0);
        img.at(x, y, c) = (1.0 - cov) * img.at(x, y, c) + cov * val;
      }
    }
  }
}

inline Image render_background(const SceneSpec& spec) {
  Image bg(spec.image_width, spec.image_height, 3);
  uint64_t s0 = spec.seed * 0x9e3779b97f4a7c15ull + 0xb5297a4d3a2ddec5ull;
  for (int y = 0; y < bg.height; ++y)
    for (int x = 0; x < bg.width; ++x) {
      double n1 = value_noise(s0, x + 0.5, y + 0.5, spec.background_scale);
      double n2 = value_noise(s0 ^ 0x5851f42d4c957f2dull, x + 0.5, y + 0.5,
                              spec.background_scale * 0.25);
      double base = 0.45 + spec.background_contrast * (n1 - 0.5) + 0.08 * (n2 - 0.5);
      for (int c = 0; c < 3; ++c) {
        double tint = 0.03 * (hash_to_unit(hash_coords(s0 + 17, c, 0)) - 0.5);
        bg.at(x, y, c) = std::clamp(base + tint, 0.0, 1.0);
      }
    }
  return bg;
}

inline Image render_at(const SceneSpec& spec, const Image& background,
                       const std::vector<SceneObject>& objects,
                       const std::vector<Occluder>& occluders, double t) {
  Image img = background;
  for (const auto& o : objects) {
    Box b = o.box_at(t);
    draw_textured_box(img, b, o.color, o.texture_seed, spec.texture_contrast, b.x1, b.y1);
  }
  for (const auto& oc : occluders)
    draw_textured_box(img, oc.box, {0.17, 0.17, 0.19}, oc.texture_seed, 0.6, oc.box.x1,
                      oc.box.y1);
  return img;
}

inline void quantize_to_8bit(Image& img) {
  for (double& v : img.data) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
}

}  // namespace detail

// Pure function of the spec: every random draw comes from one seeded
// generator in a fixed order, so identical specs give bit-identical scenes.
inline AnnotatedSequence generate_scene(const SceneSpec& spec) {
  spec.validate();
  const double W = spec.image_width, H = spec.image_height;
  const int T = spec.num_frames;
  Rng rng(spec.seed);

  AnnotatedSequence seq;
  seq.spec = spec;

  int n_obj = rng.uniform_int(spec.min_objects, spec.max_objects);
  int n_stationary = static_cast<int>(std::lround(spec.stationary_fraction * n_obj));

  auto sample_body = [&](int class_id, bool moving) {
    const ClassSpec& cs = spec.classes[static_cast<size_t>(class_id)];
    SceneObject o;
    o.class_id = class_id;
    o.w = rng.uniform(cs.min_size, cs.max_size);
    o.h = rng.uniform(cs.min_size, cs.max_size);
    if (W - o.w < 4.0 || H - o.h < 4.0)
      throw std::invalid_argument("generate_scene: object too large for image");
    if (moving) {
      double speed = rng.uniform(cs.min_speed, cs.max_speed);
      double theta = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      o.vx = speed * std::cos(theta);
      o.vy = speed * std::sin(theta);
      if (T > 1) {
        double lx = (W - o.w - 2.0) / (T - 1);
        double ly = (H - o.h - 2.0) / (T - 1);
        o.vx = std::clamp(o.vx, -lx, lx);
        o.vy = std::clamp(o.vy, -ly, ly);
      }
    }
    double dx = o.vx * (T - 1), dy = o.vy * (T - 1);
    double x_lo = 0.5 * o.w + 1.0 + std::max(0.0, -dx);
    double x_hi = W - 0.5 * o.w - 1.0 - std::max(0.0, dx);
    double y_lo = 0.5 * o.h + 1.0 + std::max(0.0, -dy);
    double y_hi = H - 0.5 * o.h - 1.0 - std::max(0.0, dy);
    o.x0 = rng.uniform(x_lo, x_hi);
    o.y0 = rng.uniform(y_lo, y_hi);
    o.texture_seed = rng.next_u64();
    auto base = detail::class_palette(class_id);
    for (int c = 0; c < 3; ++c)
      o.color[static_cast<size_t>(c)] =
          std::clamp(base[static_cast<size_t>(c)] + rng.uniform(-0.08, 0.08), 0.05, 0.95);
    return o;
  };

  for (int i = 0; i < n_obj; ++i) {
    int class_id = rng.uniform_int(static_cast<int>(spec.classes.size()));
    bool stationary = i < n_stationary;
    SceneObject o = sample_body(class_id, !stationary);
    if (stationary) o.tags |= tag_stationary;
    bool moving = o.vx != 0.0 || o.vy != 0.0;
    if (std::max(o.w, o.h) <= spec.small_threshold) o.tags |= tag_small;
    if (spec.blur_strength > 1 && moving) o.tags |= tag_blurred;
    seq.objects.push_back(o);
  }

  // static foreground bars crossing their target's mid-sequence position
  for (int j = 0; j < spec.occluder_count && n_obj > 0; ++j) {
    SceneObject& target = seq.objects[static_cast<size_t>(j % n_obj)];
    bool vertical = rng.uniform() < 0.5;
    double frac = rng.uniform(0.3, 0.5);
    double t_mid = 0.5 * (T - 1);
    Occluder oc;
    if (vertical) {
      double bw = std::max(1.0, frac * target.w);
      double cx = target.cx(t_mid);
      oc.box = Box(cx - 0.5 * bw, 0.0, cx + 0.5 * bw, H);
    } else {
      double bh = std::max(1.0, frac * target.h);
      double cy = target.cy(t_mid);
      oc.box = Box(0.0, cy - 0.5 * bh, W, cy + 0.5 * bh);
    }
    oc.texture_seed = rng.next_u64();
    target.tags |= tag_occluded;
    seq.occluders.push_back(oc);
  }

  // class-like static patches, drawn but never annotated
  for (int d = 0; d < spec.distractor_count; ++d) {
    int class_id = rng.uniform_int(static_cast<int>(spec.classes.size()));
    SceneObject o = sample_body(class_id, false);
    o.tags |= tag_distractor;
    seq.objects.push_back(o);
  }

  Image background = detail::render_background(spec);
  seq.frames.reserve(static_cast<size_t>(T));
  seq.ground_truth.resize(static_cast<size_t>(T));
  for (int t = 0; t < T; ++t) {
    Image frame(spec.image_width, spec.image_height, 3);
    if (spec.blur_strength == 1) {
      frame = detail::render_at(spec, background, seq.objects, seq.occluders, t);
    } else {
      for (int k = 0; k < spec.blur_strength; ++k) {
        double tau = t - static_cast<double>(k) / spec.blur_strength;
        Image sub = detail::render_at(spec, background, seq.objects, seq.occluders, tau);
        for (size_t i = 0; i < frame.data.size(); ++i) frame.data[i] += sub.data[i];
      }
      for (double& v : frame.data) v /= spec.blur_strength;
    }
    detail::quantize_to_8bit(frame);
    seq.frames.push_back({std::move(frame), t});
    for (const auto& o : seq.objects)
      if (!o.is_distractor())
        seq.ground_truth[static_cast<size_t>(t)].push_back({o.box_at(t), o.class_id});
  }

  double sums[3] = {0, 0, 0};
  for (const auto& fr : seq.frames)
    for (size_t i = 0; i < fr.pixels.data.size(); ++i) sums[i % 3] += fr.pixels.data[i];
  double npx = static_cast<double>(seq.frames.size()) * spec.image_width * spec.image_height;
  for (int c = 0; c < 3; ++c) seq.channel_means[static_cast<size_t>(c)] = sums[c] / npx;
  return seq;
}

inline nlohmann::json scene_spec_to_json(const SceneSpec& s) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : s.classes)
    classes.push_back({{"name", c.name},
                       {"min_size", c.min_size},
                       {"max_size", c.max_size},
                       {"min_speed", c.min_speed},
                       {"max_speed", c.max_speed}});
  return {{"image_width", s.image_width},
          {"image_height", s.image_height},
          {"num_frames", s.num_frames},
          {"classes", classes},
          {"min_objects", s.min_objects},
          {"max_objects", s.max_objects},
          {"occluder_count", s.occluder_count},
          {"blur_strength", s.blur_strength},
          {"distractor_count", s.distractor_count},
          {"stationary_fraction", s.stationary_fraction},
          {"background_scale", s.background_scale},
          {"background_contrast", s.background_contrast},
          {"texture_contrast", s.texture_contrast},
          {"small_threshold", s.small_threshold},
          {"seed", s.seed}};
}

inline SceneSpec scene_spec_from_json(const nlohmann::json& j) {
  SceneSpec s;
  s.image_width = j.at("image_width").get<int>();
  s.image_height = j.at("image_height").get<int>();
  s.num_frames = j.at("num_frames").get<int>();
  s.classes.clear();
  for (const auto& c : j.at("classes")) {
    ClassSpec cs;
    cs.name = c.at("name").get<std::string>();
    cs.min_size = c.at("min_size").get<double>();
    cs.max_size = c.at("max_size").get<double>();
    cs.min_speed = c.at("min_speed").get<double>();
    cs.max_speed = c.at("max_speed").get<double>();
    s.classes.push_back(cs);
  }
  s.min_objects = j.at("min_objects").get<int>();
  s.max_objects = j.at("max_objects").get<int>();
  s.occluder_count = j.at("occluder_count").get<int>();
  s.blur_strength = j.at("blur_strength").get<int>();
  s.distractor_count = j.at("distractor_count").get<int>();
  s.stationary_fraction = j.at("stationary_fraction").get<double>();
  s.background_scale = j.at("background_scale").get<double>();
  s.background_contrast = j.at("background_contrast").get<double>();
  s.texture_contrast = j.at("texture_contrast").get<double>();
  s.small_threshold = j.at("small_threshold").get<double>();
  s.seed = j.at("seed").get<uint64_t>();
  s.validate();
  return s;
}

// Directory layout: frames/NNNNNN.ppm, annotations.jsonl (one record per
// frame), spec.json, meta.json (format version, channel means, objects,
// occluders). Pixels are 8-bit quantized at generation, so the roundtrip is
// lossless.
inline void save_dataset(const AnnotatedSequence& seq, const std::string& path) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(path) / "frames");

  for (size_t t = 0; t < seq.frames.size(); ++t) {
    char name[32];
    std::snprintf(name, sizeof(name), "%06zu.ppm", t);
    write_ppm(seq.frames[t].pixels, (fs::path(path) / "frames" / name).string());
  }

  std::ofstream ann((fs::path(path) / "annotations.jsonl").string());
  if (!ann) throw std::runtime_error("save_dataset: cannot write annotations");
  for (size_t t = 0; t < seq.ground_truth.size(); ++t) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& lb : seq.ground_truth[t])
      boxes.push_back({{"x1", lb.box.x1},
                       {"y1", lb.box.y1},
                       {"x2", lb.box.x2},
                       {"y2", lb.box.y2},
                       {"class_id", lb.class_id}});
    ann << nlohmann::json{{"frame", t}, {"boxes", boxes}}.dump() << "\n";
  }
  ann.close();

  std::ofstream sp((fs::path(path) / "spec.json").string());
  sp << scene_spec_to_json(seq.spec).dump(2) << "\n";
  sp.close();

  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : seq.objects)
    objs.push_back({{"class_id", o.class_id},
                    {"w", o.w},
                    {"h", o.h},
                    {"x0", o.x0},
                    {"y0", o.y0},
                    {"vx", o.vx},
                    {"vy", o.vy},
                    {"tags", o.tags},
                    {"texture_seed", o.texture_seed},
                    {"color", o.color}});
  nlohmann::json occs = nlohmann::json::array();
  for (const auto& oc : seq.occluders)
    occs.push_back({{"x1", oc.box.x1},
                    {"y1", oc.box.y1},
                    {"x2", oc.box.x2},
                    {"y2", oc.box.y2},
                    {"texture_seed", oc.texture_seed}});
  nlohmann::json meta{{"version", 1},
                      {"channel_means", seq.channel_means},
                      {"num_frames", seq.frames.size()},
                      {"objects", objs},
                      {"occluders", occs}};
  std::ofstream mf((fs::path(path) / "meta.json").string());
  mf << meta.dump(2) << "\n";
  if (!mf) throw std::runtime_error("save_dataset: cannot write meta.json");
}

inline AnnotatedSequence load_dataset(const std::string& path) {
  namespace fs = std::filesystem;
  auto read_json_file = [](const fs::path& p) {
    std::ifstream f(p);
    if (!f) throw std::runtime_error("load_dataset: missing " + p.string());
    nlohmann::json j;
    try {
      f >> j;
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("load_dataset: malformed " + p.string() + ": " + e.what());
    }
    return j;
  };

  nlohmann::json meta = read_json_file(fs::path(path) / "meta.json");
  int version = meta.at("version").get<int>();
  if (version != 1)
    throw std::runtime_error("load_dataset: unsupported dataset version " +
                             std::to_string(version));

  AnnotatedSequence seq;
  seq.spec = scene_spec_from_json(read_json_file(fs::path(path) / "spec.json"));
  seq.channel_means = meta.at("channel_means").get<std::array<double, 3>>();
  for (const auto& jo : meta.at("objects")) {
    SceneObject o;
    o.class_id = jo.at("class_id").get<int>();
    o.w = jo.at("w").get<double>();
    o.h = jo.at("h").get<double>();
    o.x0 = jo.at("x0").get<double>();
    o.y0 = jo.at("y0").get<double>();
    o.vx = jo.at("vx").get<double>();
    o.vy = jo.at("vy").get<double>();
    o.tags = jo.at("tags").get<uint32_t>();
    o.texture_seed = jo.at("texture_seed").get<uint64_t>();
    o.color = jo.at("color").get<std::array<double, 3>>();
    seq.objects.push_back(o);
  }
  for (const auto& jo : meta.at("occluders")) {
    Occluder oc;
    oc.box = Box(jo.at("x1").get<double>(), jo.at("y1").get<double>(),
                 jo.at("x2").get<double>(), jo.at("y2").get<double>());
    oc.texture_seed = jo.at("texture_seed").get<uint64_t>();
    seq.occluders.push_back(oc);
  }

  size_t num_frames = meta.at("num_frames").get<size_t>();
  seq.ground_truth.resize(num_frames);
  for (size_t t = 0; t < num_frames; ++t) {
    char name[32];
    std::snprintf(name, sizeof(name), "%06zu.ppm", t);
    Image px = read_ppm((fs::path(path) / "frames" / name).string());
    seq.frames.push_back({std::move(px), static_cast<int>(t)});
  }

  std::ifstream ann((fs::path(path) / "annotations.jsonl").string());
  if (!ann) throw std::runtime_error("load_dataset: missing annotations.jsonl");
  std::string line;
  size_t lines = 0;
  while (std::getline(ann, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(std::string("load_dataset: malformed annotation line: ") +
                               e.what());
    }
    size_t t = j.at("frame").get<size_t>();
    if (t >= num_frames) throw std::runtime_error("load_dataset: frame index out of range");
    for (const auto& jb : j.at("boxes"))
      seq.ground_truth[t].push_back(
          {Box(jb.at("x1").get<double>(), jb.at("y1").get<double>(), jb.at("x2").get<double>(),
               jb.at("y2").get<double>()),
           jb.at("class_id").get<int>()});
    ++lines;
  }
  if (lines != num_frames)
    throw std::runtime_error("load_dataset: annotation record count mismatch");
  return seq;
}

}  // namespace vodet
