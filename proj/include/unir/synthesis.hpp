// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "unir/color.hpp"
#include "unir/error.hpp"

// Paired low-light / ground-truth synthesis from a raw image and a binary
// mask of the region whose illumination is altered.
namespace unir::synth {

using Rng = std::mt19937_64;

struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;  // 0 or 1 per pixel

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), data(h * w, fill ? 1 : 0) {}

  std::size_t count() const {
    return static_cast<std::size_t>(std::count(data.begin(), data.end(), std::uint8_t{1}));
  }
};

enum class Adjustment { Deepen, Surface, None };

inline std::string to_string(Adjustment a) {
  switch (a) {
    case Adjustment::Deepen: return "deepen";
    case Adjustment::Surface: return "surface";
    case Adjustment::None: break;
  }
  return "none";
}

inline Adjustment adjustment_from_string(const std::string& s) {
  if (s == "deepen") return Adjustment::Deepen;
  if (s == "surface") return Adjustment::Surface;
  if (s == "none") return Adjustment::None;
  throw Error("InvalidArgument", "unknown adjustment '" + s + "'");
}

// Which image steers the guided filter.
enum class Guide { Luminance, Source };

struct SynthConfig {
  double alpha = 70.0;      // brightness threshold on V in [0, 255]
  int kernel_g = 64;        // guided-filter window side
  double gamma_d = 2.2;
  double gamma_s = 0.5;
  double beta = 0.9;
  double epsilon_gf = 1e-2;  // on the [0, 1] scale
  std::uint64_t seed = 0;
  Guide guide = Guide::Luminance;

  void validate() const {
    auto fail = [](const std::string& what) { throw Error("InvalidConfig", what); };
    if (!(alpha > 0.0 && alpha < 255.0)) fail("alpha must lie in (0, 255)");
    if (kernel_g < 2 || kernel_g % 2 != 0) fail("kernel_g must be even and >= 2");
    if (!(gamma_d > 1.0)) fail("gamma_d must be > 1");
    if (!(gamma_s > 0.0 && gamma_s < 1.0)) fail("gamma_s must lie in (0, 1)");
    if (!(beta > 0.0 && beta <= 1.0)) fail("beta must lie in (0, 1]");
    if (!(epsilon_gf > 0.0)) fail("epsilon_gf must be > 0");
  }
};

// Independent stream per image so dataset synthesis is order-independent.
inline Rng image_rng(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

inline double masked_mean_brightness(std::span<const float> v, const BinaryMask& mask) {
  if (v.size() != mask.data.size()) throw Error("ShapeMismatch", "mask and V channel differ in size");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (mask.data[i]) {
      total += v[i];
      ++count;
    }
  if (count == 0) throw Error("EmptyMask", "mask has no set pixels");
  return total / static_cast<double>(count);
}

// Dark regions are always deepened; otherwise one of the three is drawn
// uniformly. The boundary b_avg == alpha is not dark.
inline Adjustment select_adjustment(double b_avg, double alpha, Rng& rng) {
  if (b_avg < alpha) return Adjustment::Deepen;
  static constexpr Adjustment choices[] = {Adjustment::Surface, Adjustment::Deepen, Adjustment::None};
  std::uniform_int_distribution<int> pick(0, 2);
  return choices[pick(rng)];
}

// Gamma applied to V / 255 inside the mask only; result clamped to [0, 255].
inline std::vector<float> adjust_brightness(std::span<const float> v, const BinaryMask& mask, Adjustment delta,
                                            const SynthConfig& cfg) {
  if (v.size() != mask.data.size()) throw Error("ShapeMismatch", "mask and V channel differ in size");
  std::vector<float> out(v.begin(), v.end());
  if (delta == Adjustment::None) return out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!mask.data[i]) continue;
    const double norm = v[i] / 255.0;
    const double adjusted = delta == Adjustment::Deepen ? cfg.beta * std::pow(norm, cfg.gamma_d)
                                                        : std::pow(norm, cfg.gamma_s);
    out[i] = static_cast<float>(std::clamp(255.0 * adjusted, 0.0, 255.0));
  }
  return out;
}

namespace detail {

// Summed-area table with a zero top row/left column.
struct Integral {
  std::size_t h, w;
  std::vector<double> s;

  Integral(std::span<const double> img, std::size_t rows, std::size_t cols)
    : h(rows), w(cols), s((rows + 1) * (cols + 1), 0.0) {
    for (std::size_t y = 0; y < h; ++y) {
      double row = 0.0;
      for (std::size_t x = 0; x < w; ++x) {
        row += img[y * w + x];
        s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
      }
    }
  }

  double box(std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1) const {  // [y0, y1) x [x0, x1)
    return s[y1 * (w + 1) + x1] - s[y0 * (w + 1) + x1] - s[y1 * (w + 1) + x0] + s[y0 * (w + 1) + x0];
  }
};

// Mean over the side x side window anchored at (i - side/2, j - side/2),
// clipped to the image.
inline std::vector<double> box_mean(std::span<const double> img, std::size_t h, std::size_t w, std::size_t side) {
  Integral integral(img, h, w);
  std::vector<double> out(h * w);
  const long half = static_cast<long>(side / 2), len = static_cast<long>(side);
  auto span_of = [&](std::size_t i, std::size_t extent) {
    const long start = static_cast<long>(i) - half;
    return std::pair<std::size_t, std::size_t>(static_cast<std::size_t>(std::max(0L, start)),
                                               std::min(extent, static_cast<std::size_t>(start + len)));
  };
  for (std::size_t y = 0; y < h; ++y) {
    const auto [y0, y1] = span_of(y, h);
    for (std::size_t x = 0; x < w; ++x) {
      const auto [x0, x1] = span_of(x, w);
      out[y * w + x] = integral.box(y0, y1, x0, x1) / static_cast<double>((y1 - y0) * (x1 - x0));
    }
  }
  return out;
}

}  // namespace detail

// Edge-preserving guided filter (grayscale guide). Per window k:
//   a_k = cov(I, p) / (var(I) + eps),  b_k = mean(p) - a_k mean(I)
// and the output is mean(a) * I + mean(b) over the same windows.
inline std::vector<double> guided_filter(std::span<const double> guide, std::span<const double> src, std::size_t h,
                                         std::size_t w, std::size_t side, double eps) {
  if (guide.size() != h * w || src.size() != h * w) throw Error("ShapeMismatch", "guide and source differ in size");
  if (h < side || w < side)
    throw Error("ImageTooSmall", "image " + std::to_string(h) + "x" + std::to_string(w) +
                                     " smaller than guided-filter window " + std::to_string(side));
  std::vector<double> ii(h * w), ip(h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    ii[i] = guide[i] * guide[i];
    ip[i] = guide[i] * src[i];
  }
  const auto mean_i = detail::box_mean(guide, h, w, side);
  const auto mean_p = detail::box_mean(src, h, w, side);
  const auto mean_ii = detail::box_mean(ii, h, w, side);
  const auto mean_ip = detail::box_mean(ip, h, w, side);
  std::vector<double> a(h * w), b(h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    const double var = std::max(0.0, mean_ii[i] - mean_i[i] * mean_i[i]);
    const double cov = mean_ip[i] - mean_i[i] * mean_p[i];
    a[i] = cov / (var + eps);
    b[i] = mean_p[i] - a[i] * mean_i[i];
  }
  const auto mean_a = detail::box_mean(a, h, w, side);
  const auto mean_b = detail::box_mean(b, h, w, side);
  std::vector<double> out(h * w);
  for (std::size_t i = 0; i < h * w; ++i) out[i] = mean_a[i] * guide[i] + mean_b[i];
  return out;
}

struct SynthResult {
  ImageU8 low;
  Adjustment delta = Adjustment::None;
  double brightness = 0.0;  // masked mean V of the raw image
};

// Full low-light synthesis. `force` overrides the random branch choice.
inline SynthResult synthesize_low(const ImageU8& raw, const BinaryMask& mask, const SynthConfig& cfg, Rng& rng,
                                  std::optional<Adjustment> force = std::nullopt) {
  cfg.validate();
  if (raw.height != mask.height || raw.width != mask.width)
    throw Error("ShapeMismatch", "mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                                     " does not match image " + std::to_string(raw.height) + "x" +
                                     std::to_string(raw.width));
  HsvImage hsv = rgb_to_hsv(raw);
  SynthResult result;
  result.brightness = masked_mean_brightness(hsv.v, mask);
  const Adjustment drawn = select_adjustment(result.brightness, cfg.alpha, rng);
  result.delta = force.value_or(drawn);
  const std::vector<float> adjusted = adjust_brightness(hsv.v, mask, result.delta, cfg);

  const std::size_t n = raw.pixels();
  std::vector<double> src(n);
  for (std::size_t i = 0; i < n; ++i) src[i] = adjusted[i] / 255.0;
  const std::vector<double> guide = cfg.guide == Guide::Luminance ? luminance(raw) : src;
  const auto smooth =
      guided_filter(guide, src, raw.height, raw.width, static_cast<std::size_t>(cfg.kernel_g), cfg.epsilon_gf);
  for (std::size_t i = 0; i < n; ++i) hsv.v[i] = static_cast<float>(std::clamp(smooth[i] * 255.0, 0.0, 255.0));
  result.low = hsv_to_rgb(hsv);
  return result;
}

// Channel-wise 3x3 sharpening [[0,-1,0],[-1,5,-1],[0,-1,0]] with replicate
// padding, clamped to [0, 255].
inline ImageU8 sharpen_gt(const ImageU8& raw) {
  ImageU8 out(raw.height, raw.width);
  if (raw.pixels() == 0) return out;
  const long h = static_cast<long>(raw.height), w = static_cast<long>(raw.width);
  auto px = [&](long y, long x, std::size_t c) {
    return static_cast<int>(raw.at(static_cast<std::size_t>(std::clamp(y, 0L, h - 1)),
                                   static_cast<std::size_t>(std::clamp(x, 0L, w - 1)), c));
  };
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const int v = 5 * px(y, x, c) - px(y - 1, x, c) - px(y + 1, x, c) - px(y, x - 1, c) - px(y, x + 1, c);
        out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
      }
  return out;
}

// Pixels darker than `threshold` (luma, 0-255). Test fixture helper only;
// production masks come from an external segmenter.
inline BinaryMask luminance_threshold_mask(const ImageU8& img, double threshold) {
  BinaryMask mask(img.height, img.width);
  const auto luma = luminance(img);
  for (std::size_t i = 0; i < luma.size(); ++i) mask.data[i] = luma[i] * 255.0 < threshold ? 1 : 0;
  return mask;
}

}  // namespace unir::synth
