#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "vodet/flow.hpp"
#include "vodet/image.hpp"

namespace vodet {

enum class Variant { baseline, double_frame, flow };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::baseline: return "baseline";
    case Variant::double_frame: return "double";
    case Variant::flow: return "flow";
  }
  throw std::logic_error("variant_name: unknown variant");
}

inline Variant variant_from_name(const std::string& name) {
  if (name == "baseline") return Variant::baseline;
  if (name == "double") return Variant::double_frame;
  if (name == "flow") return Variant::flow;
  throw std::invalid_argument("unknown variant: " + name);
}

inline int variant_channels(Variant v) { return v == Variant::baseline ? 3 : 6; }

struct Frame {
  Image pixels;  // 3-channel, values in [0,1]
  int time_index = 0;
};

// Two frames feeding one forward pass. offset == 0 marks the duplicated-frame
// fallback (preceding is a copy of the target).
struct FramePair {
  Frame preceding;
  Frame target;
  int offset = 1;

  void validate() const {
    if (preceding.pixels.channels != 3 || target.pixels.channels != 3)
      throw std::invalid_argument("FramePair: frames must have 3 channels");
    if (!preceding.pixels.same_shape(target.pixels))
      throw std::invalid_argument("FramePair: frame dimensions differ");
    if (offset < 0) throw std::invalid_argument("FramePair: negative offset");
    if (preceding.time_index != target.time_index - offset)
      throw std::invalid_argument("FramePair: time indices inconsistent with offset");
  }
};

struct ModelInput {
  Variant variant = Variant::baseline;
  Image channels;
};

inline ModelInput build_baseline_input(const Frame& frame) {
  if (frame.pixels.channels != 3)
    throw std::invalid_argument("build_baseline_input: frame must have 3 channels");
  return {Variant::baseline, frame.pixels};
}

// Channel-wise concatenation, preceding frame first, target last.
inline ModelInput build_double_input(const FramePair& pair) {
  pair.validate();
  const Image& p = pair.preceding.pixels;
  const Image& t = pair.target.pixels;
  Image out(p.width, p.height, 6);
  for (int y = 0; y < p.height; ++y)
    for (int x = 0; x < p.width; ++x)
      for (int c = 0; c < 3; ++c) {
        out.at(x, y, c) = p.at(x, y, c);
        out.at(x, y, c + 3) = t.at(x, y, c);
      }
  return {Variant::double_frame, std::move(out)};
}

// Flow image of (preceding -> target) first, then the target pixels.
inline ModelInput build_flow_input(const FramePair& pair, const FlowField& flow,
                                   double clamp_px = 16.0) {
  pair.validate();
  const Image& t = pair.target.pixels;
  if (flow.width != t.width || flow.height != t.height)
    throw std::invalid_argument("build_flow_input: flow dimensions differ from frames");
  Image fi = flow_image(flow, clamp_px);
  Image out(t.width, t.height, 6);
  for (int y = 0; y < t.height; ++y)
    for (int x = 0; x < t.width; ++x)
      for (int c = 0; c < 3; ++c) {
        out.at(x, y, c) = fi.at(x, y, c);
        out.at(x, y, c + 3) = t.at(x, y, c);
      }
  return {Variant::flow, std::move(out)};
}

inline ModelInput build_flow_input(const FramePair& pair, const FlowParams& params = {},
                                   double clamp_px = 16.0) {
  pair.validate();
  FlowField flow = farneback_flow(pair.preceding.pixels, pair.target.pixels, params);
  return build_flow_input(pair, flow, clamp_px);
}

// Pairs frame t with frame t - i, clamped to the first frame at the start of
// the sequence. offset records the actual index difference.
inline FramePair select_preceding(const std::vector<Frame>& sequence, int t, int i) {
  if (sequence.empty()) throw std::invalid_argument("select_preceding: empty sequence");
  if (t < 0 || static_cast<size_t>(t) >= sequence.size())
    throw std::out_of_range("select_preceding: t outside sequence");
  if (i < 1) throw std::invalid_argument("select_preceding: offset must be >= 1");
  int p = std::max(t - i, 0);
  return {sequence[static_cast<size_t>(p)], sequence[static_cast<size_t>(t)], t - p};
}

// Same image twice; lets the two-frame variants run on single still images.
inline FramePair duplicate_fallback(const Frame& target) {
  return {target, target, 0};
}

}  // namespace vodet
