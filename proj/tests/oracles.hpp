// SPDX-License-Identifier: Apache-2.0
// Brute-force reference implementations shared by unit and acceptance tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <utility>
#include <vector>

#include "unir/color.hpp"
#include "unir/synthesis.hpp"

namespace unir::testing {

inline synth::BinaryMask random_mask(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  synth::BinaryMask m(h, w);
  for (auto& v : m.data) v = static_cast<std::uint8_t>(rng() & 1u);
  m.data[0] = 1;
  return m;
}

inline ImageU8 add_noise(const ImageU8& img, int amplitude, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> d(-amplitude, amplitude);
  ImageU8 out = img;
  for (auto& v : out.data) v = static_cast<std::uint8_t>(std::clamp(v + d(rng), 0, 255));
  return out;
}

// Direct 2-D Gaussian window sums per output location.
inline double ssim_oracle(const ImageU8& a, const ImageU8& b) {
  const int k = 11;
  double g[11][11], total = 0.0;
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) total += g[i][j] = std::exp(-((i - 5.0) * (i - 5.0) + (j - 5.0) * (j - 5.0)) / 4.5);
  const double c1 = 6.5025, c2 = 58.5225;
  double sum = 0.0;
  int count = 0;
  for (int c = 0; c < 3; ++c)
    for (std::size_t y = 0; y + k <= a.height; ++y)
      for (std::size_t x = 0; x + k <= a.width; ++x) {
        double mx = 0, my = 0;
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < k; ++j) {
            mx += g[i][j] / total * a.at(y + i, x + j, c);
            my += g[i][j] / total * b.at(y + i, x + j, c);
          }
        double vx = 0, vy = 0, cxy = 0;
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < k; ++j) {
            const double dx = a.at(y + i, x + j, c) - mx, dy = b.at(y + i, x + j, c) - my;
            vx += g[i][j] / total * dx * dx;
            vy += g[i][j] / total * dy * dy;
            cxy += g[i][j] / total * dx * dy;
          }
        sum += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
  return sum / count;
}

// Two-pass window statistics with population moments.
inline double uqi_oracle(const std::vector<double>& a, const std::vector<double>& b, std::size_t h, std::size_t w,
                  std::size_t channels) {
  double sum = 0.0;
  int count = 0;
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t y = 0; y + 8 <= h; ++y)
      for (std::size_t x = 0; x + 8 <= w; ++x) {
        auto px = [&](const std::vector<double>& v, std::size_t i, std::size_t j) {
          return v[((y + i) * w + x + j) * channels + c];
        };
        double mx = 0, my = 0;
        for (std::size_t i = 0; i < 8; ++i)
          for (std::size_t j = 0; j < 8; ++j) mx += px(a, i, j) / 64, my += px(b, i, j) / 64;
        double vx = 0, vy = 0, cxy = 0;
        for (std::size_t i = 0; i < 8; ++i)
          for (std::size_t j = 0; j < 8; ++j) {
            const double dx = px(a, i, j) - mx, dy = px(b, i, j) - my;
            vx += dx * dx / 63, vy += dy * dy / 63, cxy += dx * dy / 63;
          }
        const double den = (vx + vy) * (mx * mx + my * my);
        if (den == 0.0) continue;
        sum += 4 * cxy * mx * my / den;
        ++count;
      }
  return sum / count;
}

inline double delta_e_oracle(const ImageU8& a, const ImageU8& b) {
  double sum = 0.0;
  for (std::size_t i = 0; i < a.pixels(); ++i) {
    const Lab p = srgb_to_lab(a.data[i * 3], a.data[i * 3 + 1], a.data[i * 3 + 2]);
    const Lab q = srgb_to_lab(b.data[i * 3], b.data[i * 3 + 1], b.data[i * 3 + 2]);
    sum += std::sqrt(std::pow(p.l - q.l, 2) + std::pow(p.a - q.a, 2) + std::pow(p.b - q.b, 2));
  }
  return sum / static_cast<double>(a.pixels());
}

// Two-pass statistics; tails from a full copy sorted descending.
inline double uciqe_oracle(const ImageU8& img) {
  const std::size_t n = img.pixels();
  std::vector<double> ls, cs;
  double sat = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Lab p = srgb_to_lab(img.data[i * 3], img.data[i * 3 + 1], img.data[i * 3 + 2]);
    const double c = std::sqrt(p.a * p.a + p.b * p.b);
    ls.push_back(p.l);
    cs.push_back(c);
    sat += (c == 0 && p.l == 0) ? 0.0 : c / std::sqrt(c * c + p.l * p.l);
  }
  double mean = 0.0;
  for (double c : cs) mean += c / n;
  double var = 0.0;
  for (double c : cs) var += (c - mean) * (c - mean) / n;
  std::sort(ls.rbegin(), ls.rend());
  const std::size_t t = std::max<std::size_t>(1, n / 100);
  double top = 0, bottom = 0;
  for (std::size_t i = 0; i < t; ++i) top += ls[i] / t, bottom += ls[n - 1 - i] / t;
  return 0.4680 * std::sqrt(var) + 0.2745 * (top - bottom) + 0.2576 * sat / n;
}

// Direct O(H W k^2) evaluation of the guided filter over the same clipped
// windows (anchored at i - k/2, side k).
inline std::vector<double> naive_guided(const std::vector<double>& guide, const std::vector<double>& src, std::size_t h,
                                 std::size_t w, std::size_t k, double eps) {
  auto window = [&](std::size_t i, std::size_t extent) {
    const long s = static_cast<long>(i) - static_cast<long>(k / 2);
    return std::pair<long, long>(std::max(0L, s), std::min(static_cast<long>(extent), s + static_cast<long>(k)));
  };
  std::vector<double> a(h * w), b(h * w), out(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      auto [y0, y1] = window(y, h);
      auto [x0, x1] = window(x, w);
      double si = 0, sp = 0, sii = 0, sip = 0, n = 0;
      for (long yy = y0; yy < y1; ++yy)
        for (long xx = x0; xx < x1; ++xx) {
          const double gi = guide[yy * w + xx], pi = src[yy * w + xx];
          si += gi, sp += pi, sii += gi * gi, sip += gi * pi, n += 1;
        }
      const double mi = si / n, mp = sp / n;
      const double var = sii / n - mi * mi, cov = sip / n - mi * mp;
      a[y * w + x] = cov / (var + eps);
      b[y * w + x] = mp - a[y * w + x] * mi;
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      auto [y0, y1] = window(y, h);
      auto [x0, x1] = window(x, w);
      double sa = 0, sb = 0, n = 0;
      for (long yy = y0; yy < y1; ++yy)
        for (long xx = x0; xx < x1; ++xx) sa += a[yy * w + xx], sb += b[yy * w + xx], n += 1;
      out[y * w + x] = sa / n * guide[y * w + x] + sb / n;
    }
  return out;
}

}  // namespace unir::testing
