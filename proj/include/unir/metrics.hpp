// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "unir/color.hpp"
#include "unir/objective.hpp"

// Image-quality metrics on 8-bit RGB images.
namespace unir::metrics {

namespace detail {

inline void require_same_dims(const ImageU8& a, const ImageU8& b, const char* metric) {
  if (a.height != b.height || a.width != b.width || a.data.size() != b.data.size())
    throw Error("ShapeMismatch", std::string(metric) + ": " + std::to_string(a.height) + "x" +
                                     std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                                     std::to_string(b.width));
}

inline std::vector<double> to_double(const ImageU8& img) { return {img.data.begin(), img.data.end()}; }

// Separable valid correlation of one interleaved channel plane.
inline std::vector<double> blur_valid(std::span<const double> img, std::size_t h, std::size_t w, std::size_t channels,
                                      std::size_t c, std::span<const double> g) {
  const std::size_t k = g.size(), ho = h - k + 1, wo = w - k + 1;
  std::vector<double> rows(h * wo), out(ho * wo);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < wo; ++x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < k; ++i) acc += g[i] * img[(y * w + x + i) * channels + c];
      rows[y * wo + x] = acc;
    }
  for (std::size_t y = 0; y < ho; ++y)
    for (std::size_t x = 0; x < wo; ++x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < k; ++i) acc += g[i] * rows[(y + i) * wo + x];
      out[y * wo + x] = acc;
    }
  return out;
}

inline std::vector<double> gaussian_1d(std::size_t side, double sigma) {
  std::vector<double> g(side);
  const double c = (static_cast<double>(side) - 1.0) / 2.0;
  for (std::size_t i = 0; i < side; ++i) g[i] = std::exp(-(i - c) * (i - c) / (2.0 * sigma * sigma));
  const double total = std::accumulate(g.begin(), g.end(), 0.0);
  for (auto& v : g) v /= total;
  return g;
}

}  // namespace detail

// 10 log10(255^2 / MSE) over all channels; +inf for identical images.
inline double psnr(const ImageU8& a, const ImageU8& b) {
  detail::require_same_dims(a, b, "psnr");
  double sse = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    sse += d * d;
  }
  if (sse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(255.0 * 255.0 / (sse / static_cast<double>(a.data.size())));
}

// Gaussian-window SSIM (11x11, sigma 1.5) on interleaved planes with the
// given dynamic range; mean over windows and channels.
inline double ssim_planes(std::span<const double> a, std::span<const double> b, std::size_t h, std::size_t w,
                          std::size_t channels, double range = 255.0) {
  const std::size_t k = loss::kSsimWindow;
  if (h < k || w < k)
    throw Error("ImageTooSmall", "ssim needs at least " + std::to_string(k) + "x" + std::to_string(k) + ", got " +
                                     std::to_string(h) + "x" + std::to_string(w));
  const auto g = detail::gaussian_1d(k, loss::kSsimSigma);
  const double c1 = (0.01 * range) * (0.01 * range), c2 = (0.03 * range) * (0.03 * range);
  std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    const auto mx = detail::blur_valid(a, h, w, channels, c, g), my = detail::blur_valid(b, h, w, channels, c, g);
    const auto sxx = detail::blur_valid(aa, h, w, channels, c, g), syy = detail::blur_valid(bb, h, w, channels, c, g);
    const auto sxy = detail::blur_valid(ab, h, w, channels, c, g);
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cov = sxy[i] - mx[i] * my[i];
      total += (2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

inline double ssim_metric(const ImageU8& a, const ImageU8& b) {
  detail::require_same_dims(a, b, "ssim");
  return ssim_planes(detail::to_double(a), detail::to_double(b), a.height, a.width, 3);
}

constexpr std::size_t kUqiWindow = 8;

// Wang-Bovik universal quality index over 8x8 sliding windows (stride 1),
// per channel, averaged over non-degenerate windows. Computed from window
// sums so integer-valued inputs are exact up to the final division.
inline double uqi_planes(std::span<const double> a, std::span<const double> b, std::size_t h, std::size_t w,
                         std::size_t channels) {
  const std::size_t k = kUqiWindow;
  if (a.size() != b.size() || a.size() != h * w * channels) throw Error("ShapeMismatch", "uqi plane size mismatch");
  if (h < k || w < k)
    throw Error("ImageTooSmall", "uqi needs at least 8x8, got " + std::to_string(h) + "x" + std::to_string(w));
  const double n = static_cast<double>(k * k);
  double total = 0.0;
  std::size_t count = 0;
  std::vector<double> sums[5];
  for (auto& s : sums) s.assign((h + 1) * (w + 1), 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      double row[5] = {};
      for (std::size_t x = 0; x < w; ++x) {
        const double av = a[(y * w + x) * channels + c], bv = b[(y * w + x) * channels + c];
        const double vals[5] = {av, bv, av * av, bv * bv, av * bv};
        for (int s = 0; s < 5; ++s) {
          row[s] += vals[s];
          sums[s][(y + 1) * (w + 1) + x + 1] = sums[s][y * (w + 1) + x + 1] + row[s];
        }
      }
    }
    auto box = [&](int s, std::size_t y0, std::size_t x0) {
      const auto& t = sums[s];
      const std::size_t y1 = y0 + k, x1 = x0 + k;
      return t[y1 * (w + 1) + x1] - t[y0 * (w + 1) + x1] - t[y1 * (w + 1) + x0] + t[y0 * (w + 1) + x0];
    };
    for (std::size_t y = 0; y + k <= h; ++y)
      for (std::size_t x = 0; x + k <= w; ++x) {
        const double sx = box(0, y, x), sy = box(1, y, x);
        const double vx = n * box(2, y, x) - sx * sx, vy = n * box(3, y, x) - sy * sy;
        const double cxy = n * box(4, y, x) - sx * sy;
        const double den = (vx + vy) * (sx * sx + sy * sy);
        if (den == 0.0) continue;
        total += 4.0 * cxy * sx * sy / den;
        ++count;
      }
  }
  if (count == 0) return std::equal(a.begin(), a.end(), b.begin()) ? 1.0 : 0.0;
  return total / static_cast<double>(count);
}

inline double uqi(const ImageU8& a, const ImageU8& b) {
  detail::require_same_dims(a, b, "uqi");
  return uqi_planes(detail::to_double(a), detail::to_double(b), a.height, a.width, 3);
}

// Mean CIE76 colour difference.
inline double delta_e(const ImageU8& a, const ImageU8& b) {
  detail::require_same_dims(a, b, "delta_e");
  if (a.pixels() == 0) return 0.0;
  const auto la = srgb_to_lab(a), lb = srgb_to_lab(b);
  double total = 0.0;
  for (std::size_t i = 0; i < la.size(); ++i)
    total += std::sqrt((la[i].l - lb[i].l) * (la[i].l - lb[i].l) + (la[i].a - lb[i].a) * (la[i].a - lb[i].a) +
                       (la[i].b - lb[i].b) * (la[i].b - lb[i].b));
  return total / static_cast<double>(la.size());
}

constexpr double kUciqeChroma = 0.4680;
constexpr double kUciqeContrast = 0.2745;
constexpr double kUciqeSaturation = 0.2576;

struct UciqeTerms {
  double chroma_std;
  double luminance_contrast;
  double mean_saturation;
  double value;
};

// Underwater colour quality: weighted chroma spread, L contrast between the
// brightest and darkest 1% of pixels, and mean saturation, all in CIELAB.
inline UciqeTerms uciqe_terms(const ImageU8& img) {
  const auto lab = srgb_to_lab(img);
  const std::size_t n = lab.size();
  if (n == 0) return {0.0, 0.0, 0.0, 0.0};
  std::vector<double> chroma(n), lum(n);
  double chroma_mean = 0.0, sat_total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    chroma[i] = std::hypot(lab[i].a, lab[i].b);
    lum[i] = lab[i].l;
    chroma_mean += chroma[i];
    const double denom = std::sqrt(chroma[i] * chroma[i] + lum[i] * lum[i]);
    sat_total += denom > 0.0 ? chroma[i] / denom : 0.0;
  }
  chroma_mean /= static_cast<double>(n);
  double var = 0.0;
  for (double c : chroma) var += (c - chroma_mean) * (c - chroma_mean);
  const double chroma_std = std::sqrt(var / static_cast<double>(n));
  std::sort(lum.begin(), lum.end());
  const std::size_t tail = std::max<std::size_t>(1, n / 100);
  const double low = std::accumulate(lum.begin(), lum.begin() + static_cast<long>(tail), 0.0) / static_cast<double>(tail);
  const double high = std::accumulate(lum.end() - static_cast<long>(tail), lum.end(), 0.0) / static_cast<double>(tail);
  UciqeTerms t{chroma_std, high - low, sat_total / static_cast<double>(n), 0.0};
  t.value = kUciqeChroma * t.chroma_std + kUciqeContrast * t.luminance_contrast + kUciqeSaturation * t.mean_saturation;
  return t;
}

inline double uciqe(const ImageU8& img) { return uciqe_terms(img).value; }

struct MetricRow {
  std::string image_id;
  double psnr = 0.0, ssim = 0.0, uqi = 0.0, delta_e = 0.0, uciqe = 0.0;
};

// Full-reference metrics of `enhanced` against `reference`; UCIQE is taken
// on `enhanced` alone.
inline MetricRow evaluate_pair(std::string id, const ImageU8& enhanced, const ImageU8& reference) {
  return {std::move(id),         psnr(enhanced, reference),     ssim_metric(enhanced, reference),
          uqi(enhanced, reference), delta_e(enhanced, reference), uciqe(enhanced)};
}

struct MetricsReport {
  std::vector<MetricRow> rows;

  MetricRow mean() const {
    MetricRow m{"MEAN"};
    if (rows.empty()) return m;
    for (const auto& r : rows) {
      m.psnr += r.psnr;
      m.ssim += r.ssim;
      m.uqi += r.uqi;
      m.delta_e += r.delta_e;
      m.uciqe += r.uciqe;
    }
    const double n = static_cast<double>(rows.size());
    m.psnr /= n, m.ssim /= n, m.uqi /= n, m.delta_e /= n, m.uciqe /= n;
    return m;
  }
};

inline std::string format_metric(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10f", v);
  return buf;
}

inline void write_csv(std::ostream& os, const MetricsReport& report) {
  os << "image_id,psnr,ssim,uqi,delta_e,uciqe\n";
  auto line = [&](const MetricRow& r) {
    os << r.image_id << ',' << format_metric(r.psnr) << ',' << format_metric(r.ssim) << ',' << format_metric(r.uqi)
       << ',' << format_metric(r.delta_e) << ',' << format_metric(r.uciqe) << '\n';
  };
  for (const auto& r : report.rows) line(r);
  line(report.mean());
}

}  // namespace unir::metrics
