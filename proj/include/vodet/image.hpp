#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vodet {

// Dense row-major image / activation tensor, channel-innermost (HWC).
// Pixel values are doubles; image data is expected in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, int c, double fill = 0.0)
      : width(w), height(h), channels(c),
        data(static_cast<size_t>(w) * h * c, fill) {
    if (w <= 0 || h <= 0 || c <= 0) throw std::invalid_argument("Image: non-positive dimensions");
  }

  size_t index(int x, int y, int c) const {
    return (static_cast<size_t>(y) * width + x) * channels + c;
  }
  double& at(int x, int y, int c = 0) { return data[index(x, y, c)]; }
  double at(int x, int y, int c = 0) const { return data[index(x, y, c)]; }

  bool same_shape(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
  size_t size() const { return data.size(); }
};

// Luma conversion with fixed 0.299/0.587/0.114 weights. 1-channel input passes through.
inline Image to_grayscale(const Image& img) {
  if (img.channels == 1) return img;
  if (img.channels != 3) throw std::invalid_argument("to_grayscale: expected 1 or 3 channels");
  Image out(img.width, img.height, 1);
  const double* p = img.data.data();
  double* q = out.data.data();
  size_t n = static_cast<size_t>(img.width) * img.height;
  for (size_t i = 0; i < n; ++i, p += 3) q[i] = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
  return out;
}

inline Image resize_bilinear(const Image& src, int new_w, int new_h) {
  if (new_w <= 0 || new_h <= 0) throw std::invalid_argument("resize_bilinear: bad target size");
  if (new_w == src.width && new_h == src.height) return src;
  Image out(new_w, new_h, src.channels);
  const double sx = static_cast<double>(src.width) / new_w;
  const double sy = static_cast<double>(src.height) / new_h;
  for (int y = 0; y < new_h; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(src.height - 1));
    int y0 = static_cast<int>(fy);
    int y1 = std::min(y0 + 1, src.height - 1);
    double wy = fy - y0;
    for (int x = 0; x < new_w; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, static_cast<double>(src.width - 1));
      int x0 = static_cast<int>(fx);
      int x1 = std::min(x0 + 1, src.width - 1);
      double wx = fx - x0;
      for (int c = 0; c < src.channels; ++c) {
        double v00 = src.at(x0, y0, c), v10 = src.at(x1, y0, c);
        double v01 = src.at(x0, y1, c), v11 = src.at(x1, y1, c);
        out.at(x, y, c) = (1 - wy) * ((1 - wx) * v00 + wx * v10) + wy * ((1 - wx) * v01 + wx * v11);
      }
    }
  }
  return out;
}

// Separable Gaussian smoothing with replicated borders. sigma <= 0 is a no-op.
inline Image gaussian_blur(const Image& src, double sigma) {
  if (sigma <= 0.0) return src;
  int radius = std::max(1, static_cast<int>(std::ceil(2.5 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;

  Image tmp(src.width, src.height, src.channels);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x)
      for (int c = 0; c < src.channels; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          int xx = std::clamp(x + i, 0, src.width - 1);
          acc += k[i + radius] * src.at(xx, y, c);
        }
        tmp.at(x, y, c) = acc;
      }
  Image out(src.width, src.height, src.channels);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x)
      for (int c = 0; c < src.channels; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          int yy = std::clamp(y + i, 0, src.height - 1);
          acc += k[i + radius] * src.at(x, yy, c);
        }
        out.at(x, y, c) = acc;
      }
  return out;
}

// Binary PPM (P6, 8-bit). Values are quantized to the 1/255 grid, so images
// whose pixels already sit on that grid round-trip losslessly.
inline void write_ppm(const Image& img, const std::string& path) {
  if (img.channels != 3) throw std::invalid_argument("write_ppm: expected 3 channels");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(img.width) * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = std::clamp(img.at(x, y, c), 0.0, 1.0);
        row[static_cast<size_t>(x) * 3 + c] = static_cast<uint8_t>(std::lround(v * 255.0));
      }
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw std::runtime_error("write_ppm: short write to " + path);
}

inline Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_ppm: cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != "P6") throw std::runtime_error("read_ppm: bad magic in " + path);
  int w = 0, h = 0, maxval = 0;
  f >> w >> h >> maxval;
  if (!f || w <= 0 || h <= 0 || maxval != 255)
    throw std::runtime_error("read_ppm: bad header in " + path);
  f.get();  // single whitespace after header
  Image img(w, h, 3);
  std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    f.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!f) throw std::runtime_error("read_ppm: truncated pixel data in " + path);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = row[static_cast<size_t>(x) * 3 + c] / 255.0;
  }
  return img;
}

}  // namespace vodet
