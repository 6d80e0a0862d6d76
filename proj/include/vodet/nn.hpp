#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "vodet/image.hpp"

namespace vodet {

// Square-kernel 2-D convolution with zero padding k/2, so stride-1 layers
// preserve the grid and stride-2 layers produce ceil(size/2). Weights are
// stored [out_ch][ky][kx][in_ch] so the inner product runs over contiguous
// input channels.
struct ConvLayer {
  int in_channels = 0;
  int out_channels = 0;
  int ksize = 3;
  int stride = 1;
  std::vector<double> weights;
  std::vector<double> bias;

  ConvLayer() = default;
  ConvLayer(int in_c, int out_c, int k, int s)
      : in_channels(in_c), out_channels(out_c), ksize(k), stride(s),
        weights(static_cast<size_t>(out_c) * k * k * in_c, 0.0),
        bias(static_cast<size_t>(out_c), 0.0) {
    if (in_c < 1 || out_c < 1 || k < 1 || k % 2 == 0 || s < 1)
      throw std::invalid_argument("ConvLayer: bad shape parameters");
  }

  size_t weight_index(int oc, int ky, int kx, int ic) const {
    return ((static_cast<size_t>(oc) * ksize + ky) * ksize + kx) * in_channels + ic;
  }
  size_t parameter_count() const { return weights.size() + bias.size(); }
};

inline int conv_output_size(int in, int ksize, int stride) {
  int pad = ksize / 2;
  return (in + 2 * pad - ksize) / stride + 1;
}

inline Image conv_forward(const ConvLayer& l, const Image& in) {
  if (in.channels != l.in_channels)
    throw std::invalid_argument("conv_forward: channel mismatch");
  const int pad = l.ksize / 2;
  const int ow = conv_output_size(in.width, l.ksize, l.stride);
  const int oh = conv_output_size(in.height, l.ksize, l.stride);
  Image out(ow, oh, l.out_channels);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x)
      for (int oc = 0; oc < l.out_channels; ++oc) {
        double acc = l.bias[static_cast<size_t>(oc)];
        for (int ky = 0; ky < l.ksize; ++ky) {
          int yy = y * l.stride + ky - pad;
          if (yy < 0 || yy >= in.height) continue;
          for (int kx = 0; kx < l.ksize; ++kx) {
            int xx = x * l.stride + kx - pad;
            if (xx < 0 || xx >= in.width) continue;
            const double* w = l.weights.data() + l.weight_index(oc, ky, kx, 0);
            const double* v = in.data.data() + in.index(xx, yy, 0);
            for (int ic = 0; ic < l.in_channels; ++ic) acc += w[ic] * v[ic];
          }
        }
        out.at(x, y, oc) = acc;
      }
  return out;
}

// Accumulates parameter gradients into dweights/dbias and returns dL/dinput.
inline Image conv_backward(const ConvLayer& l, const Image& in, const Image& dout,
                           std::vector<double>& dweights, std::vector<double>& dbias) {
  if (dweights.size() != l.weights.size() || dbias.size() != l.bias.size())
    throw std::invalid_argument("conv_backward: gradient buffer shape mismatch");
  const int pad = l.ksize / 2;
  Image din(in.width, in.height, in.channels);
  for (int y = 0; y < dout.height; ++y)
    for (int x = 0; x < dout.width; ++x)
      for (int oc = 0; oc < l.out_channels; ++oc) {
        double g = dout.at(x, y, oc);
        if (g == 0.0) continue;
        dbias[static_cast<size_t>(oc)] += g;
        for (int ky = 0; ky < l.ksize; ++ky) {
          int yy = y * l.stride + ky - pad;
          if (yy < 0 || yy >= in.height) continue;
          for (int kx = 0; kx < l.ksize; ++kx) {
            int xx = x * l.stride + kx - pad;
            if (xx < 0 || xx >= in.width) continue;
            double* dw = dweights.data() + l.weight_index(oc, ky, kx, 0);
            const double* v = in.data.data() + in.index(xx, yy, 0);
            double* dv = din.data.data() + din.index(xx, yy, 0);
            const double* w = l.weights.data() + l.weight_index(oc, ky, kx, 0);
            for (int ic = 0; ic < l.in_channels; ++ic) {
              dw[ic] += g * v[ic];
              dv[ic] += g * w[ic];
            }
          }
        }
      }
  return din;
}

inline Image relu(const Image& in) {
  Image out = in;
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return out;
}

inline Image relu_backward(const Image& dout, const Image& pre_activation) {
  Image din = dout;
  for (size_t i = 0; i < din.data.size(); ++i)
    if (pre_activation.data[i] <= 0.0) din.data[i] = 0.0;
  return din;
}

// Nearest-neighbor resize used by the top-down pyramid path (coarse level to
// the finer level's grid size).
inline Image upsample_nearest(const Image& in, int out_w, int out_h) {
  Image out(out_w, out_h, in.channels);
  for (int y = 0; y < out_h; ++y) {
    int sy = std::min(y * in.height / out_h, in.height - 1);
    for (int x = 0; x < out_w; ++x) {
      int sx = std::min(x * in.width / out_w, in.width - 1);
      for (int c = 0; c < in.channels; ++c) out.at(x, y, c) = in.at(sx, sy, c);
    }
  }
  return out;
}

inline Image upsample_nearest_backward(const Image& dout, int in_w, int in_h) {
  Image din(in_w, in_h, dout.channels);
  for (int y = 0; y < dout.height; ++y) {
    int sy = std::min(y * in_h / dout.height, in_h - 1);
    for (int x = 0; x < dout.width; ++x) {
      int sx = std::min(x * in_w / dout.width, in_w - 1);
      for (int c = 0; c < dout.channels; ++c) din.at(sx, sy, c) += dout.at(x, y, c);
    }
  }
  return din;
}

inline Image add(const Image& a, const Image& b) {
  if (!a.same_shape(b) || a.channels != b.channels)
    throw std::invalid_argument("add: shape mismatch");
  Image out = a;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
  return out;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace vodet
