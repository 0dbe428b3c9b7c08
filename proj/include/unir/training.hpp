// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "unir/image_tensor.hpp"
#include "unir/io.hpp"
#include "unir/network.hpp"
#include "unir/objective.hpp"

namespace unir::train {

using Rng = std::mt19937_64;
using net::NetConfig;
using net::BasicNetWeights;
using net::NetWeights;
namespace fs = std::filesystem;

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 8;
  std::size_t patch_size = 128;
  AdamConfig adam;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // epochs; 0 disables periodic checkpoints
  std::size_t max_steps = 0;         // 0 = run all epochs
  loss::LossWeights loss;

  void validate() const {
    auto fail = [](const std::string& what) { throw Error("InvalidConfig", what); };
    if (epochs == 0) fail("epochs must be >= 1");
    if (batch_size == 0) fail("batch_size must be >= 1");
    if (patch_size == 0) fail("patch_size must be >= 1");
    if (!(adam.lr > 0.0)) fail("lr must be positive");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0))
      fail("adam betas must lie in [0, 1)");
    if (!(adam.eps > 0.0)) fail("adam eps must be positive");
    loss.validate();
  }
};

inline io::Json to_json(const NetConfig& c) {
  return {{"base_width", c.base_width}, {"width_schedule", c.width_schedule}, {"n_heads", c.n_heads},
          {"ffn_expansion", c.ffn_expansion}, {"attn_window", c.attn_window}, {"gamma_ccm", c.gamma_ccm}};
}

inline io::Json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"patch_size", c.patch_size},
          {"lr", c.adam.lr},
          {"beta1", c.adam.beta1},
          {"beta2", c.adam.beta2},
          {"adam_eps", c.adam.eps},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every},
          {"max_steps", c.max_steps},
          {"lambda_c", c.loss.lambda_c},
          {"lambda_s", c.loss.lambda_s},
          {"lambda_p", c.loss.lambda_p}};
}

inline NetConfig net_config_from_json(const io::Json& j) {
  NetConfig c;
  c.base_width = j.at("base_width").get<std::size_t>();
  c.width_schedule = j.at("width_schedule").get<std::vector<std::size_t>>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.ffn_expansion = j.at("ffn_expansion").get<std::size_t>();
  c.attn_window = j.at("attn_window").get<std::size_t>();
  c.gamma_ccm = j.at("gamma_ccm").get<double>();
  return c;
}

// ---------------------------------------------------------------- data

struct TrainPair {
  std::string id;
  ImageU8 low;
  ImageU8 gt;
};

inline ImageU8 crop(const ImageU8& img, std::size_t y0, std::size_t x0, std::size_t side) {
  ImageU8 out(side, side);
  for (std::size_t y = 0; y < side; ++y)
    std::copy_n(&img.data[((y0 + y) * img.width + x0) * 3], side * 3, &out.data[y * side * 3]);
  return out;
}

// Same random window from both images, uniform over valid top-left corners.
inline std::pair<ImageU8, ImageU8> sample_patch(const ImageU8& low, const ImageU8& gt, std::size_t patch, Rng& rng) {
  if (low.height != gt.height || low.width != gt.width)
    throw Error("ShapeMismatch", "low and gt images differ in size");
  if (low.height < patch || low.width < patch)
    throw Error("ImageTooSmall", std::to_string(low.height) + "x" + std::to_string(low.width) +
                                     " image is smaller than patch " + std::to_string(patch));
  const std::size_t y = std::uniform_int_distribution<std::size_t>(0, low.height - patch)(rng);
  const std::size_t x = std::uniform_int_distribution<std::size_t>(0, low.width - patch)(rng);
  return {crop(low, y, x, patch), crop(gt, y, x, patch)};
}

// Loads every pair of a manifest; the failing path is named on error.
inline std::vector<TrainPair> load_pairs(const fs::path& manifest) {
  const auto records = io::read_manifest(manifest);
  io::check_manifest_files(records, manifest);
  std::vector<TrainPair> pairs;
  for (const auto& r : records)
    pairs.push_back({r.id, io::load_image(io::resolve(manifest, r.low_path)),
                     io::load_image(io::resolve(manifest, r.gt_path))});
  return pairs;
}

// ---------------------------------------------------------------- optimizer

// One bias-corrected Adam update; `step` is the 1-based index of this
// update. Moments are kept in T, the arithmetic in double.
template <class T>
void adam_step(BasicNetWeights<T>& weights, BasicNetWeights<T>& m, BasicNetWeights<T>& v, std::uint64_t step,
               const AdamConfig& cfg) {
  if (step == 0) throw Error("InvalidArgument", "adam step index starts at 1");
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (auto& p : weights.params()) {
    if (!p.tensor.has_grad()) throw Error("MissingGradient", "parameter '" + p.name + "' has no gradient");
    auto value = p.tensor.mutable_data();
    const auto grad = p.tensor.grad();
    auto mv = m.at(p.name).mutable_data();
    auto vv = v.at(p.name).mutable_data();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      const double mi = cfg.beta1 * static_cast<double>(mv[i]) + (1.0 - cfg.beta1) * g;
      const double vi = cfg.beta2 * static_cast<double>(vv[i]) + (1.0 - cfg.beta2) * g * g;
      mv[i] = static_cast<T>(mi);
      vv[i] = static_cast<T>(vi);
      value[i] = static_cast<T>(value[i] - cfg.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps));
    }
  }
}

// Loss of the VRM output on one batch; gradients land on `weights`.
template <class T>
double loss_and_grad(BasicNetWeights<T>& weights, const NetConfig& net_cfg, const loss::LossWeights& lw,
                     const BasicTensor<T>& low, const BasicTensor<T>& gt) {
  weights.zero_grad();
  Tape tape;
  const BasicTensor<T> pred = net::unirnet_forward(low, weights, net_cfg, false);
  const BasicTensor<T> l = loss::total_loss(pred, gt, lw);
  tape.backward(l);
  return static_cast<double>(l.item());
}

// ---------------------------------------------------------------- loop

struct TrainState {
  NetWeights weights, m, v;
  std::uint64_t step = 0;
  std::size_t epoch = 0;           // completed epochs
  std::vector<std::size_t> order;  // shuffled pair order of the running epoch
  std::size_t cursor = 0;          // next position in `order`
  double epoch_loss_sum = 0.0;
  std::size_t epoch_batches = 0;
  Rng rng;
};

inline TrainState fresh_state(const NetConfig& net_cfg, const TrainConfig& cfg) {
  TrainState s{net::make_weights(net_cfg), net::make_weights(net_cfg), net::make_weights(net_cfg)};
  net::init_weights(s.weights, cfg.seed);
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32), 0x7261u};
  s.rng.seed(seq);
  return s;
}

inline io::Checkpoint to_checkpoint(const TrainState& s, const NetConfig& net_cfg, const TrainConfig& cfg) {
  std::ostringstream rng;
  rng << s.rng;
  io::Json meta = {{"step", s.step},
                   {"epoch", s.epoch},
                   {"order", s.order},
                   {"cursor", s.cursor},
                   {"epoch_loss_sum", s.epoch_loss_sum},
                   {"epoch_batches", s.epoch_batches},
                   {"rng", rng.str()},
                   {"train_config", to_json(cfg)},
                   {"net_config", to_json(net_cfg)}};
  return {s.weights.clone(), s.m.clone(), s.v.clone(), std::move(meta)};
}

inline TrainState from_checkpoint(const io::Checkpoint& c) {
  TrainState s{c.weights.clone(), c.adam_m.clone(), c.adam_v.clone()};
  try {
    s.step = c.meta.at("step").get<std::uint64_t>();
    s.epoch = c.meta.at("epoch").get<std::size_t>();
    s.order = c.meta.at("order").get<std::vector<std::size_t>>();
    s.cursor = c.meta.at("cursor").get<std::size_t>();
    s.epoch_loss_sum = c.meta.at("epoch_loss_sum").get<double>();
    s.epoch_batches = c.meta.at("epoch_batches").get<std::size_t>();
    std::istringstream rng(c.meta.at("rng").get<std::string>());
    rng >> s.rng;
    if (!rng) throw Error("DecodeError", "checkpoint RNG state is unreadable");
  } catch (const nlohmann::json::exception& e) {
    throw Error("DecodeError", std::string("checkpoint metadata: ") + e.what());
  }
  return s;
}

struct EpochLoss {
  std::size_t epoch;  // 1-based
  double loss;        // mean training loss over the epoch's batches
};

struct TrainHooks {
  std::function<void(std::uint64_t step, double loss)> on_step;
  std::function<void(const EpochLoss&)> on_epoch;
  std::function<void(std::size_t epoch, const io::Checkpoint&)> on_checkpoint;
};

struct TrainResult {
  io::Checkpoint checkpoint;
  std::vector<EpochLoss> log;        // epochs completed in this call
  std::vector<double> step_losses;   // steps taken in this call
};

// Runs until `cfg.epochs` epochs are complete (or `cfg.max_steps` steps).
// Every epoch visits each pair once in a freshly shuffled order, in batches
// of `batch_size` (the last one may be smaller).
inline TrainResult train(const std::vector<TrainPair>& pairs, const NetConfig& net_cfg, const TrainConfig& cfg,
                         const std::optional<io::Checkpoint>& resume = std::nullopt, const TrainHooks& hooks = {}) {
  cfg.validate();
  net_cfg.validate();
  if (pairs.empty()) throw Error("InvalidArgument", "training set is empty");
  for (const auto& p : pairs) {
    if (p.low.height != p.gt.height || p.low.width != p.gt.width)
      throw Error("ShapeMismatch", "pair '" + p.id + "': low and gt differ in size");
    if (std::min(p.low.height, p.low.width) < cfg.patch_size)
      throw Error("ImageTooSmall", "pair '" + p.id + "' is smaller than patch_size " + std::to_string(cfg.patch_size));
  }
  TrainState s = resume ? from_checkpoint(*resume) : fresh_state(net_cfg, cfg);
  const std::size_t n = pairs.size();
  TrainResult result;

  while (s.epoch < cfg.epochs) {
    if (s.order.empty()) {
      s.order.resize(n);
      std::iota(s.order.begin(), s.order.end(), std::size_t{0});
      std::shuffle(s.order.begin(), s.order.end(), s.rng);
      s.cursor = 0;
      s.epoch_loss_sum = 0.0;
      s.epoch_batches = 0;
    }
    while (s.cursor < n) {
      if (cfg.max_steps != 0 && s.step >= cfg.max_steps) {
        result.checkpoint = to_checkpoint(s, net_cfg, cfg);
        return result;
      }
      const std::size_t end = std::min(n, s.cursor + cfg.batch_size);
      std::vector<ImageU8> lows, gts;
      for (std::size_t i = s.cursor; i < end; ++i) {
        auto [l, g] = sample_patch(pairs[s.order[i]].low, pairs[s.order[i]].gt, cfg.patch_size, s.rng);
        lows.push_back(std::move(l));
        gts.push_back(std::move(g));
      }
      std::vector<const ImageU8*> lp, gp;
      for (std::size_t i = 0; i < lows.size(); ++i) lp.push_back(&lows[i]), gp.push_back(&gts[i]);
      const double loss = loss_and_grad(s.weights, net_cfg, cfg.loss, images_to_tensor(lp), images_to_tensor(gp));
      adam_step(s.weights, s.m, s.v, ++s.step, cfg.adam);
      s.cursor = end;
      s.epoch_loss_sum += loss;
      ++s.epoch_batches;
      result.step_losses.push_back(loss);
      if (hooks.on_step) hooks.on_step(s.step, loss);
    }
    ++s.epoch;
    const EpochLoss row{s.epoch, s.epoch_loss_sum / static_cast<double>(s.epoch_batches)};
    s.order.clear();
    s.cursor = 0;
    result.log.push_back(row);
    if (hooks.on_epoch) hooks.on_epoch(row);
    if (cfg.checkpoint_every != 0 && s.epoch % cfg.checkpoint_every == 0 && hooks.on_checkpoint)
      hooks.on_checkpoint(s.epoch, to_checkpoint(s, net_cfg, cfg));
  }
  result.checkpoint = to_checkpoint(s, net_cfg, cfg);
  return result;
}

inline void write_loss_log(std::ostream& os, const std::vector<EpochLoss>& log, bool header = true) {
  if (header) os << "epoch,loss\n";
  char buf[64];
  for (const auto& row : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.10f\n", row.epoch, row.loss);
    os << buf;
  }
}

}  // namespace unir::train
