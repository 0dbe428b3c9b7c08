// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "unir/ops.hpp"

namespace unir::loss {

struct LossWeights {
  double lambda_c = 1.0;  // L1 contrast term
  double lambda_s = 1.0;  // SSIM structural term
  double lambda_p = 0.0;  // perceptual term, needs a FeatureExtractor

  void validate() const {
    if (!(lambda_c >= 0.0 && lambda_s >= 0.0 && lambda_p >= 0.0))
      throw Error("InvalidConfig", "loss weights must be nonnegative");
  }
};

// Maps an image batch to a list of feature maps (each N x C_j x H_j x W_j).
// Nothing ships; callers plug in their own network.
template <class T>
class BasicFeatureExtractor {
public:
  virtual ~BasicFeatureExtractor() = default;
  virtual std::vector<BasicTensor<T>> features(const BasicTensor<T>& image) const = 0;
};
using FeatureExtractor = BasicFeatureExtractor<float>;

constexpr std::size_t kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;
constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;

// Normalized side x side Gaussian, row-major.
inline std::vector<double> gaussian_window(std::size_t side = kSsimWindow, double sigma = kSsimSigma) {
  std::vector<double> g1(side);
  const double c = (static_cast<double>(side) - 1.0) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < side; ++i) {
    const double d = static_cast<double>(i) - c;
    g1[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += g1[i];
  }
  for (auto& v : g1) v /= total;
  std::vector<double> out(side * side);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) out[y * side + x] = g1[y] * g1[x];
  return out;
}

template <class T>
BasicTensor<T> l1_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  return ops::mean(ops::abs(ops::sub(pred, target)));
}

// Per-window SSIM map (N x C x H-10 x W-10) on the [0, 1] scale.
template <class T>
BasicTensor<T> ssim_map(const BasicTensor<T>& x, const BasicTensor<T>& y) {
  if (x.shape() != y.shape())
    throw Error("ShapeMismatch", "ssim inputs " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  static const std::vector<double> window = gaussian_window();
  auto blur = [](const BasicTensor<T>& t) { return ops::filter2d_valid(t, window, kSsimWindow); };
  const auto mu_x = blur(x), mu_y = blur(y);
  const auto mu_xx = ops::square(mu_x), mu_yy = ops::square(mu_y), mu_xy = ops::mul(mu_x, mu_y);
  const auto var_x = ops::sub(blur(ops::square(x)), mu_xx);
  const auto var_y = ops::sub(blur(ops::square(y)), mu_yy);
  const auto cov = ops::sub(blur(ops::mul(x, y)), mu_xy);
  const T c1 = static_cast<T>(kSsimC1), c2 = static_cast<T>(kSsimC2);
  const auto num = ops::mul(ops::add_scalar(ops::scale(mu_xy, T(2)), c1), ops::add_scalar(ops::scale(cov, T(2)), c2));
  const auto den = ops::mul(ops::add_scalar(ops::add(mu_xx, mu_yy), c1), ops::add_scalar(ops::add(var_x, var_y), c2));
  return ops::div(num, den);
}

// 1 - mean SSIM over windows and channels.
template <class T>
BasicTensor<T> ssim_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  return ops::add_scalar(ops::scale(ops::mean(ssim_map(pred, target)), T(-1)), T(1));
}

// sum_j mean((phi_j(pred) - phi_j(target))^2)
template <class T>
BasicTensor<T> perceptual_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target,
                               const BasicFeatureExtractor<T>& extractor) {
  const auto fp = extractor.features(pred), ft = extractor.features(target);
  if (fp.size() != ft.size() || fp.empty()) throw Error("ShapeMismatch", "feature extractor returned mismatched lists");
  BasicTensor<T> total = ops::mean(ops::square(ops::sub(fp[0], ft[0])));
  for (std::size_t j = 1; j < fp.size(); ++j) total = ops::add(total, ops::mean(ops::square(ops::sub(fp[j], ft[j]))));
  return total;
}

// Weighted sum; terms with zero weight are not evaluated.
template <class T>
BasicTensor<T> total_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target, const LossWeights& weights,
                          const BasicFeatureExtractor<T>* extractor = nullptr) {
  weights.validate();
  if (weights.lambda_p > 0.0 && extractor == nullptr)
    throw Error("MissingExtractor", "lambda_p > 0 requires a feature extractor");
  if (pred.shape() != target.shape())
    throw Error("ShapeMismatch", "loss inputs " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  std::optional<BasicTensor<T>> total;
  auto accumulate = [&](double lambda, BasicTensor<T> term) {
    term = ops::scale(term, static_cast<T>(lambda));
    total = total ? ops::add(*total, term) : term;
  };
  if (weights.lambda_c > 0.0) accumulate(weights.lambda_c, l1_loss(pred, target));
  if (weights.lambda_s > 0.0) accumulate(weights.lambda_s, ssim_loss(pred, target));
  if (weights.lambda_p > 0.0) accumulate(weights.lambda_p, perceptual_loss(pred, target, *extractor));
  if (!total) return ops::scale(l1_loss(pred, target), T(0));
  return *total;
}

}  // namespace unir::loss
