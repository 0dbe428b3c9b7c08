// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "unir/ops.hpp"

namespace unir::net {

// Channel layout and hyperparameters of the restoration network.
//
// Block order: IEB1 -> AB1 -> IEB2 -> AB2 -> IEB3 -> IEB4 -> Conv3x3 -> VRM,
// then CCM at inference. `width_schedule`, when set, gives the output
// channels of IEB1..IEB4 and the decoder conv (5 entries); attention blocks
// keep the width of the IEB before them.
struct NetConfig {
  std::size_t base_width = 64;
  std::vector<std::size_t> width_schedule;
  std::size_t n_heads = 4;
  std::size_t ffn_expansion = 2;
  std::size_t attn_window = 16;
  double gamma_ccm = 1.4;

  std::array<std::size_t, 5> widths() const {
    if (width_schedule.empty()) return {base_width, base_width, base_width, base_width, base_width};
    std::array<std::size_t, 5> w{};
    std::copy_n(width_schedule.begin(), 5, w.begin());
    return w;
  }

  void validate() const {
    auto fail = [](const std::string& what) { throw Error("InvalidConfig", what); };
    if (!width_schedule.empty() && width_schedule.size() != 5) fail("width_schedule needs 5 entries");
    const auto w = widths();
    for (auto c : w)
      if (c == 0) fail("block widths must be positive");
    if (n_heads == 0) fail("n_heads must be positive");
    if (w[0] % n_heads != 0 || w[1] % n_heads != 0)
      fail("attention block widths must be divisible by n_heads=" + std::to_string(n_heads));
    if (ffn_expansion == 0) fail("ffn_expansion must be positive");
    if (attn_window == 0) fail("attn_window must be positive");
    if (!(gamma_ccm > 0.0)) fail("gamma_ccm must be positive");
  }
};

// Ordered, uniquely named parameter set.
template <class T>
class BasicNetWeights {
public:
  using value_type = T;

  void add(std::string name, Shape shape) {
    if (index_.count(name)) throw Error("DuplicateName", "parameter '" + name + "' defined twice");
    index_[name] = params_.size();
    params_.push_back({std::move(name), BasicTensor<T>(std::move(shape), T(0), true)});
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const BasicTensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("MissingParameter", "no parameter named '" + name + "'");
    return params_[it->second].tensor;
  }
  BasicTensor<T>& at(const std::string& name) {
    return const_cast<BasicTensor<T>&>(std::as_const(*this).at(name));
  }

  std::optional<BasicTensor<T>> maybe(const std::string& name) const {
    if (!contains(name)) return std::nullopt;
    return at(name);
  }

  std::vector<BasicParameter<T>>& params() noexcept { return params_; }
  const std::vector<BasicParameter<T>>& params() const noexcept { return params_; }

  std::vector<BasicTensor<T>> tensors() const {
    std::vector<BasicTensor<T>> out;
    for (const auto& p : params_) out.push_back(p.tensor);
    return out;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  // Deep copy, optionally converting the scalar type; shares no storage
  // with *this.
  template <class U = T>
  BasicNetWeights<U> clone() const {
    BasicNetWeights<U> out;
    for (const auto& p : params_) {
      out.add(p.name, p.tensor.shape());
      auto dst = out.at(p.name).mutable_data();
      std::transform(p.tensor.data().begin(), p.tensor.data().end(), dst.begin(),
                     [](T v) { return static_cast<U>(v); });
    }
    return out;
  }

private:
  std::vector<BasicParameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

using NetWeights = BasicNetWeights<float>;

namespace detail {

template <class T>
void add_conv(BasicNetWeights<T>& w, const std::string& prefix, std::size_t in, std::size_t out, std::size_t k,
                     bool bias) {
  w.add(prefix + ".weight", {out, in, k, k});
  if (bias) w.add(prefix + ".bias", {out});
}

template <class T>
void add_ieb(BasicNetWeights<T>& w, const std::string& name, std::size_t in, std::size_t out) {
  add_conv(w, name + ".conv1", in, out, 3, true);
  add_conv(w, name + ".conv2", out, out, 3, true);
  if (in != out) add_conv(w, name + ".match", in, out, 1, true);
}

template <class T>
void add_ab(BasicNetWeights<T>& w, const std::string& name, std::size_t c, std::size_t expansion) {
  add_conv(w, name + ".query", c, c, 1, false);
  add_conv(w, name + ".key", c, c, 1, false);
  add_conv(w, name + ".value", c, c, 1, false);
  add_conv(w, name + ".ffn_in", c, c * expansion, 1, true);
  add_conv(w, name + ".ffn_out", c * expansion, c, 1, true);
}

}  // namespace detail

// Zero-valued parameters with the exact name/shape set implied by `cfg`.
template <class T = float>
BasicNetWeights<T> make_weights(const NetConfig& cfg) {
  cfg.validate();
  const auto w = cfg.widths();
  BasicNetWeights<T> weights;
  detail::add_ieb(weights, "ieb1", 3, w[0]);
  detail::add_ab(weights, "ab1", w[0], cfg.ffn_expansion);
  detail::add_ieb(weights, "ieb2", w[0], w[1]);
  detail::add_ab(weights, "ab2", w[1], cfg.ffn_expansion);
  detail::add_ieb(weights, "ieb3", w[1], w[2]);
  detail::add_ieb(weights, "ieb4", w[2], w[3]);
  detail::add_conv(weights, "decoder", w[3], w[4], 3, true);
  detail::add_conv(weights, "vrm", w[4], 3, 3, true);
  return weights;
}

// He-normal weights, zero biases. The second conv of each residual branch
// is scaled down so the untrained network starts close to its skip paths.
template <class T>
void init_weights(BasicNetWeights<T>& weights, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& p : weights.params()) {
    auto v = p.tensor.mutable_data();
    if (p.tensor.rank() == 1) {
      std::fill(v.begin(), v.end(), T(0));
      continue;
    }
    const auto& s = p.tensor.shape();
    const double fan_in = static_cast<double>(s[1] * s[2] * s[3]);
    double stddev = std::sqrt(2.0 / fan_in);
    if (p.name.ends_with("conv2.weight") || p.name.ends_with("ffn_out.weight")) stddev *= 0.1;
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& x : v) x = static_cast<T>(dist(rng));
  }
}

template <class T>
std::size_t param_count(const BasicNetWeights<T>& weights) {
  std::size_t total = 0;
  for (const auto& p : weights.params()) total += p.tensor.numel();
  return total;
}

inline std::size_t param_count(const NetConfig& cfg) {
  cfg.validate();
  const auto w = cfg.widths();
  auto conv = [](std::size_t i, std::size_t o, std::size_t k, bool bias) { return o * i * k * k + (bias ? o : 0); };
  auto ieb = [&](std::size_t i, std::size_t o) {
    return conv(i, o, 3, true) + conv(o, o, 3, true) + (i != o ? conv(i, o, 1, true) : 0);
  };
  auto ab = [&](std::size_t c) {
    const std::size_t hidden = c * cfg.ffn_expansion;
    return 3 * conv(c, c, 1, false) + conv(c, hidden, 1, true) + conv(hidden, c, 1, true);
  };
  return ieb(3, w[0]) + ab(w[0]) + ieb(w[0], w[1]) + ab(w[1]) + ieb(w[1], w[2]) + ieb(w[2], w[3]) +
         conv(w[3], w[4], 3, true) + conv(w[4], 3, 3, true);
}

// Uniform width (multiple of n_heads, within [lo, hi]) whose parameter
// count is closest to `target`; ties go to the narrower width.
inline std::size_t find_width(std::size_t target, NetConfig cfg = {}, std::size_t lo = 1, std::size_t hi = 512) {
  cfg.width_schedule.clear();
  std::size_t best = 0, best_gap = SIZE_MAX;
  for (std::size_t w = lo; w <= hi; ++w) {
    if (w % cfg.n_heads != 0) continue;
    cfg.base_width = w;
    const std::size_t count = param_count(cfg);
    const std::size_t gap = count > target ? count - target : target - count;
    if (gap < best_gap) best = w, best_gap = gap;
  }
  if (best == 0) throw Error("InvalidArgument", "no valid width in search range");
  return best;
}

template <class T>
struct IebParams {
  BasicTensor<T> w1, b1, w2, b2;
  std::optional<BasicTensor<T>> wm, bm;
};
using IebWeights = IebParams<float>;

template <class T>
struct AbParams {
  BasicTensor<T> wq, wk, wv, wa, ba, wb, bb;
};
using AbWeights = AbParams<float>;

template <class T>
IebParams<T> ieb_weights(const BasicNetWeights<T>& w, const std::string& name) {
  return {w.at(name + ".conv1.weight"), w.at(name + ".conv1.bias"), w.at(name + ".conv2.weight"),
          w.at(name + ".conv2.bias"), w.maybe(name + ".match.weight"), w.maybe(name + ".match.bias")};
}

template <class T>
AbParams<T> ab_weights(const BasicNetWeights<T>& w, const std::string& name) {
  return {w.at(name + ".query.weight"), w.at(name + ".key.weight"),       w.at(name + ".value.weight"),
          w.at(name + ".ffn_in.weight"), w.at(name + ".ffn_in.bias"),     w.at(name + ".ffn_out.weight"),
          w.at(name + ".ffn_out.bias")};
}

// Illumination enhancement block:
//   out = ReLU(conv3(ReLU(conv3(x, W1)), W2) + R),  R = conv1(x, Wm) if Cin != Cout else x
template <class T>
BasicTensor<T> ieb_forward(const BasicTensor<T>& x, const IebParams<T>& w) {
  const std::size_t cin = x.dim(1), cout = w.w2.dim(0);
  BasicTensor<T> y1 = ops::relu(ops::conv2d(x, w.w1, w.b1, 1, 1));
  BasicTensor<T> y2 = ops::conv2d(y1, w.w2, w.b2, 1, 1);
  BasicTensor<T> residual = x;
  if (cin != cout) {
    if (!w.wm) throw Error("ShapeMismatch", "IEB changes channels " + std::to_string(cin) + "->" +
                                                std::to_string(cout) + " but has no matching conv");
    residual = ops::conv2d(x, *w.wm, w.bm, 1, 0);
  }
  return ops::relu(ops::add(y2, residual));
}

// Attention block: windowed multi-head self-attention with residual, then a
// two-layer 1x1 feed-forward network with residual.
template <class T>
BasicTensor<T> ab_forward(const BasicTensor<T>& x, const AbParams<T>& w, std::size_t n_heads, std::size_t window) {
  if (n_heads == 0 || x.dim(1) % n_heads != 0)
    throw Error("HeadMismatch", std::to_string(x.dim(1)) + " channels not divisible by " + std::to_string(n_heads) +
                                    " heads");
  BasicTensor<T> q = ops::conv2d(x, w.wq, std::nullopt, 1, 0);
  BasicTensor<T> k = ops::conv2d(x, w.wk, std::nullopt, 1, 0);
  BasicTensor<T> v = ops::conv2d(x, w.wv, std::nullopt, 1, 0);
  BasicTensor<T> z1 = ops::add(ops::window_attention(q, k, v, n_heads, window), x);
  BasicTensor<T> z2 = ops::conv2d(ops::relu(ops::conv2d(z1, w.wa, w.ba, 1, 0)), w.wb, w.bb, 1, 0);
  return ops::add(z1, z2);
}

// Visual refinement: sigmoid(conv3x3(x)), strictly inside (0, 1).
template <class T>
BasicTensor<T> vrm_forward(const BasicTensor<T>& x, const std::type_identity_t<BasicTensor<T>>& ws,
                           const std::type_identity_t<std::optional<BasicTensor<T>>>& bias) {
  return ops::sigmoid(ops::conv2d(x, ws, bias, 1, 1));
}

struct CcmTerms {
  double pdf;       // standard normal density
  double softplus;  // ln(1 + e^x)
  double lip;       // sqrt(pdf + softplus + pdf * softplus)
};

inline CcmTerms ccm_terms(double x) {
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
  const double softplus = std::log1p(std::exp(x));
  return {pdf, softplus, std::sqrt(pdf + softplus + pdf * softplus)};
}

// Contrast correction on an N x C x H x W tensor in [0, 1]. Each image is
// normalized by the min/max of its LIP map taken over all channels and
// pixels, then raised to `gamma`. Flat images (range < 1e-6) pass through.
// Not differentiable; used only after training.
template <class T>
BasicTensor<T> ccm_forward(const BasicTensor<T>& x, double gamma) {
  if (x.rank() != 4) throw Error("ShapeMismatch", "ccm_forward expects NCHW");
  if (!(gamma > 0.0)) throw Error("InvalidArgument", "CCM gamma must be positive");
  const std::size_t n = x.dim(0), per = x.numel() / std::max<std::size_t>(n, 1);
  std::vector<T> out(x.data().begin(), x.data().end());
  std::vector<double> lip(per);
  for (std::size_t s = 0; s < n; ++s) {
    const T* src = x.data().data() + s * per;
    for (std::size_t i = 0; i < per; ++i) lip[i] = ccm_terms(src[i]).lip;
    const auto [mn, mx] = std::minmax_element(lip.begin(), lip.end());
    const double lo = *mn, range = *mx - *mn;
    if (range < 1e-6) continue;
    for (std::size_t i = 0; i < per; ++i)
      out[s * per + i] = static_cast<T>(std::pow(std::clamp((lip[i] - lo) / range, 0.0, 1.0), gamma));
  }
  return BasicTensor<T>(x.shape(), std::move(out));
}

// Full network. Training uses the VRM output (apply_ccm = false).
template <class T>
BasicTensor<T> unirnet_forward(const BasicTensor<T>& x, const BasicNetWeights<T>& weights, const NetConfig& cfg,
                               bool apply_ccm) {
  if (x.rank() != 4 || x.dim(1) != 3) throw Error("ShapeMismatch", "network input must be N x 3 x H x W");
  BasicTensor<T> h = ieb_forward(x, ieb_weights(weights, "ieb1"));
  h = ab_forward(h, ab_weights(weights, "ab1"), cfg.n_heads, cfg.attn_window);
  h = ieb_forward(h, ieb_weights(weights, "ieb2"));
  h = ab_forward(h, ab_weights(weights, "ab2"), cfg.n_heads, cfg.attn_window);
  h = ieb_forward(h, ieb_weights(weights, "ieb3"));
  h = ieb_forward(h, ieb_weights(weights, "ieb4"));
  h = ops::conv2d(h, weights.at("decoder.weight"), weights.at("decoder.bias"), 1, 1);
  BasicTensor<T> y = vrm_forward(h, weights.at("vrm.weight"), weights.at("vrm.bias"));
  return apply_ccm ? ccm_forward(y, cfg.gamma_ccm) : y;
}

struct LayerRow {
  std::string module;
  int conv_layers;
  std::string kernel;
  int stride;
  int padding;
  std::string activation;
};

inline std::vector<LayerRow> layer_table() {
  return {
      {"IEB", 2, "3x3", 1, 1, "ReLU"},
      {"AB", 2, "1x1", 1, 0, "ReLU"},
      {"Conv 3x3", 1, "3x3", 1, 1, "-"},
      {"VRM", 1, "3x3", 1, 1, "Sigmoid"},
  };
}

}  // namespace unir::net
