#pragma once

// 8-bit images, PNG I/O and the resampling used for images and masks.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "textloc/autodiff.hpp"
#include "textloc/errors.hpp"

namespace textloc {

struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 (gray) or 3 (RGB)
  std::vector<std::uint8_t> pixels;  // row-major, interleaved

  Image() = default;
  Image(int w, int h, int c) : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, 0) {}

  std::uint8_t& at(int x, int y, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  std::uint8_t at(int x, int y, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool operator==(const Image&) const = default;
};

inline void write_png(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw ArgumentError("write_png: only 1 or 3 channels supported");
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&pi, path.c_str(), 0, img.pixels.data(), 0, nullptr)) {
    throw std::runtime_error("cannot write PNG '" + path + "': " + pi.message);
  }
}

struct PngInfo {
  Image rgb;        // decoded to 8-bit RGB
  bool color = false;
  bool alpha = false;
};

inline PngInfo read_png_rgb(const std::string& path) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.c_str())) {
    throw FormatError("cannot read PNG '" + path + "': " + pi.message);
  }
  PngInfo info;
  info.color = (pi.format & PNG_FORMAT_FLAG_COLOR) != 0;
  info.alpha = (pi.format & PNG_FORMAT_FLAG_ALPHA) != 0;
  pi.format = PNG_FORMAT_RGB;
  info.rgb = Image(static_cast<int>(pi.width), static_cast<int>(pi.height), 3);
  if (!png_image_finish_read(&pi, nullptr, info.rgb.pixels.data(), 0, nullptr)) {
    png_image_free(&pi);
    throw FormatError("cannot decode PNG '" + path + "': " + pi.message);
  }
  return info;
}

inline Image read_png(const std::string& path) { return read_png_rgb(path).rgb; }

// Largest centred square.
inline Image center_crop_square(const Image& img) {
  const int side = std::min(img.width, img.height);
  const int x0 = (img.width - side) / 2;
  const int y0 = (img.height - side) / 2;
  Image out(side, side, img.channels);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      for (int c = 0; c < img.channels; ++c) out.at(x, y, c) = img.at(x0 + x, y0 + y, c);
    }
  }
  return out;
}

// Area-overlap weights mapping `in` samples to `out` samples. Each output
// cell averages the input cells it covers, weighted by overlap; for integer
// downscales this is a box average and for upscales a replication.
inline Matrix area_weights(int in, int out) {
  if (in <= 0 || out <= 0) throw ArgumentError("area_weights: sizes must be positive");
  Matrix w = Matrix::Zero(out, in);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    const double lo = o * scale;
    const double hi = (o + 1) * scale;
    for (int i = static_cast<int>(std::floor(lo)); i < in && i < hi; ++i) {
      const double overlap = std::min(hi, i + 1.0) - std::max(lo, static_cast<double>(i));
      if (overlap > 0.0) w(o, i) = overlap / scale;
    }
  }
  return w;
}

inline Matrix area_resize(const Matrix& m, int out_height, int out_width) {
  if (out_height <= 0 || out_width <= 0) throw ArgumentError("area_resize: target size must be positive");
  return area_weights(static_cast<int>(m.rows()), out_height) * m *
         area_weights(static_cast<int>(m.cols()), out_width).transpose();
}

// Nearest-neighbour sampling at output pixel centres.
inline Matrix nearest_resize(const Matrix& m, int out_height, int out_width) {
  if (out_height <= 0 || out_width <= 0) throw ArgumentError("nearest_resize: target size must be positive");
  Matrix out(out_height, out_width);
  for (int y = 0; y < out_height; ++y) {
    const auto sy = std::min<Eigen::Index>(static_cast<Eigen::Index>((y + 0.5) * m.rows() / out_height), m.rows() - 1);
    for (int x = 0; x < out_width; ++x) {
      const auto sx = std::min<Eigen::Index>(static_cast<Eigen::Index>((x + 0.5) * m.cols() / out_width), m.cols() - 1);
      out(y, x) = m(sy, sx);
    }
  }
  return out;
}

inline Matrix channel_plane(const Image& img, int c) {
  Matrix m(img.height, img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) m(y, x) = img.at(x, y, c);
  }
  return m;
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

// Area resize of every channel.
inline Image resize_image(const Image& img, int out_width, int out_height) {
  Image out(out_width, out_height, img.channels);
  for (int c = 0; c < img.channels; ++c) {
    const Matrix plane = area_resize(channel_plane(img, c), out_height, out_width);
    for (int y = 0; y < out_height; ++y) {
      for (int x = 0; x < out_width; ++x) out.at(x, y, c) = to_byte(plane(y, x));
    }
  }
  return out;
}

// Pixels -> positions x channels in [-1, 1], positions row-major.
inline Matrix image_to_latent(const Image& img) {
  Matrix z(static_cast<Eigen::Index>(img.width) * img.height, img.channels);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < img.channels; ++c) z(y * img.width + x, c) = img.at(x, y, c) / 127.5 - 1.0;
    }
  }
  return z;
}

inline Image latent_to_image(const Matrix& z, int width, int height) {
  if (z.rows() != static_cast<Eigen::Index>(width) * height) throw ArgumentError("latent_to_image: size mismatch");
  Image img(width, height, static_cast<int>(z.cols()));
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < img.channels; ++c) {
        img.at(x, y, c) = to_byte((std::clamp(z(y * width + x, c), -1.0, 1.0) + 1.0) * 127.5);
      }
    }
  }
  return img;
}

// [0, 1] map -> 8-bit grayscale, value = round(255 v).
inline Image map_to_gray(const Matrix& map) {
  Image img(static_cast<int>(map.cols()), static_cast<int>(map.rows()), 1);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) img.at(x, y, 0) = to_byte(255.0 * std::clamp(map(y, x), 0.0, 1.0));
  }
  return img;
}

inline Image upscale_nearest(const Image& img, int factor) {
  Image out(img.width * factor, img.height * factor, img.channels);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      for (int c = 0; c < img.channels; ++c) out.at(x, y, c) = img.at(x / factor, y / factor, c);
    }
  }
  return out;
}

inline Image to_rgb(const Image& img) {
  if (img.channels == 3) return img;
  Image out(img.width, img.height, 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = img.at(x, y, 0);
    }
  }
  return out;
}

// Places images left to right separated by `gap` white pixels; heights are
// top-aligned.
inline Image hstack(const std::vector<Image>& images, int gap = 4) {
  int width = 0;
  int height = 0;
  for (const Image& i : images) {
    width += i.width;
    height = std::max(height, i.height);
  }
  width += gap * static_cast<int>(images.empty() ? 0 : images.size() - 1);
  Image out(width, height, 3);
  std::fill(out.pixels.begin(), out.pixels.end(), 255);
  int x0 = 0;
  for (const Image& i : images) {
    const Image rgb = to_rgb(i);
    for (int y = 0; y < rgb.height; ++y) {
      for (int x = 0; x < rgb.width; ++x) {
        for (int c = 0; c < 3; ++c) out.at(x0 + x, y, c) = rgb.at(x, y, c);
      }
    }
    x0 += i.width + gap;
  }
  return out;
}

}  // namespace textloc
