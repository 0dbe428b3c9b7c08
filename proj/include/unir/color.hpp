// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "unir/error.hpp"

namespace unir {

// Interleaved 8-bit RGB, row-major.
struct ImageU8 {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;

  ImageU8() = default;
  ImageU8(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), data(h * w * 3, fill) {}
  ImageU8(std::size_t h, std::size_t w, std::vector<std::uint8_t> pixels)
    : height(h), width(w), data(std::move(pixels)) {
    if (data.size() != h * w * 3)
      throw Error("ShapeMismatch", "RGB buffer of " + std::to_string(data.size()) + " bytes for " +
                                       std::to_string(h) + "x" + std::to_string(w));
  }

  static constexpr std::size_t channels = 3;
  std::size_t pixels() const noexcept { return height * width; }
  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return data[(y * width + x) * 3 + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return data[(y * width + x) * 3 + c]; }
  bool operator==(const ImageU8&) const = default;
};

// Per-pixel HSV planes: hue in degrees [0, 360), saturation [0, 1],
// value on the 8-bit scale [0, 255].
struct HsvImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> h, s, v;

  HsvImage() = default;
  HsvImage(std::size_t rows, std::size_t cols, std::vector<float> hue, std::vector<float> sat, std::vector<float> val)
    : height(rows), width(cols), h(std::move(hue)), s(std::move(sat)), v(std::move(val)) {
    const std::size_t n = rows * cols;
    if (h.size() != n || s.size() != n || v.size() != n) throw Error("ShapeMismatch", "HSV plane size mismatch");
    for (std::size_t i = 0; i < n; ++i)
      if (!(h[i] >= 0.0f && h[i] < 360.0f) || !(s[i] >= 0.0f && s[i] <= 1.0f) || !(v[i] >= 0.0f && v[i] <= 255.0f))
        throw Error("RangeError", "HSV value out of range at pixel " + std::to_string(i));
  }
};

// Achromatic pixels get hue 0.
inline HsvImage rgb_to_hsv(const ImageU8& img) {
  const std::size_t n = img.pixels();
  std::vector<float> hue(n), sat(n), val(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = img.data[i * 3], g = img.data[i * 3 + 1], b = img.data[i * 3 + 2];
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    const double chroma = mx - mn;
    double hdeg = 0.0;
    if (chroma > 0.0) {
      if (mx == r) hdeg = 60.0 * std::fmod((g - b) / chroma + 6.0, 6.0);
      else if (mx == g) hdeg = 60.0 * ((b - r) / chroma + 2.0);
      else hdeg = 60.0 * ((r - g) / chroma + 4.0);
      if (hdeg >= 360.0) hdeg -= 360.0;
    }
    hue[i] = static_cast<float>(hdeg);
    if (hue[i] >= 360.0f) hue[i] = 0.0f;
    sat[i] = mx > 0.0 ? static_cast<float>(chroma / mx) : 0.0f;
    val[i] = static_cast<float>(mx);
  }
  return HsvImage(img.height, img.width, std::move(hue), std::move(sat), std::move(val));
}

inline ImageU8 hsv_to_rgb(const HsvImage& hsv) {
  ImageU8 out(hsv.height, hsv.width);
  const std::size_t n = hsv.height * hsv.width;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = hsv.v[i], chroma = v * hsv.s[i];
    const double hp = hsv.h[i] / 60.0;
    const double x = chroma * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    const double m = v - chroma;
    double r = 0, g = 0, b = 0;
    switch (static_cast<int>(hp) % 6) {
      case 0: r = chroma, g = x; break;
      case 1: r = x, g = chroma; break;
      case 2: g = chroma, b = x; break;
      case 3: g = x, b = chroma; break;
      case 4: r = x, b = chroma; break;
      default: r = chroma, b = x; break;
    }
    auto to_u8 = [](double c) { return static_cast<std::uint8_t>(std::clamp(std::lround(c), 0L, 255L)); };
    out.data[i * 3] = to_u8(r + m);
    out.data[i * 3 + 1] = to_u8(g + m);
    out.data[i * 3 + 2] = to_u8(b + m);
  }
  return out;
}

struct Lab {
  double l, a, b;
};

// sRGB (D65, 2 degree observer) to CIELAB for one 8-bit pixel.
inline Lab srgb_to_lab(std::uint8_t r8, std::uint8_t g8, std::uint8_t b8) {
  auto linear = [](std::uint8_t c) {
    const double v = c / 255.0;
    return v <= 0.04045 ? v / 12.92 : std::pow((v + 0.055) / 1.055, 2.4);
  };
  const double r = linear(r8), g = linear(g8), b = linear(b8);
  const double x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
  const double y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
  const double z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
  constexpr double xn = 0.95047, yn = 1.0, zn = 1.08883;
  auto f = [](double t) {
    constexpr double delta = 6.0 / 29.0;
    return t > delta * delta * delta ? std::cbrt(t) : t / (3.0 * delta * delta) + 4.0 / 29.0;
  };
  const double fx = f(x / xn), fy = f(y / yn), fz = f(z / zn);
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

inline std::vector<Lab> srgb_to_lab(const ImageU8& img) {
  std::vector<Lab> out(img.pixels());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = srgb_to_lab(img.data[i * 3], img.data[i * 3 + 1], img.data[i * 3 + 2]);
  return out;
}

// Rec.601 luma on [0, 1]; the guide image for synthesis smoothing.
inline std::vector<double> luminance(const ImageU8& img) {
  std::vector<double> out(img.pixels());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = (0.299 * img.data[i * 3] + 0.587 * img.data[i * 3 + 1] + 0.114 * img.data[i * 3 + 2]) / 255.0;
  return out;
}

}  // namespace unir
