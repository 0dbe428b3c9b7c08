// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "test_util.hpp"
#include "unir/config.hpp"
#include "unir/training.hpp"

using namespace unir;
using namespace unir::train;
namespace fs = std::filesystem;

namespace {

std::string error_code(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return "";
}

NetConfig tiny_net() {
  NetConfig cfg;
  cfg.base_width = 4;
  cfg.n_heads = 2;
  cfg.attn_window = 8;
  return cfg;
}

std::vector<TrainPair> toy_pairs(std::size_t count, std::size_t h, std::size_t w, std::uint64_t seed) {
  std::vector<TrainPair> pairs;
  for (std::size_t i = 0; i < count; ++i) {
    ImageU8 gt = unir::testing::scene_image(h, w, seed + i);
    ImageU8 low = gt;
    for (auto& v : low.data) v = static_cast<std::uint8_t>(v / 3);
    pairs.push_back({"p" + std::to_string(i), low, gt});
  }
  return pairs;
}

TrainConfig tiny_train() {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.patch_size = 12;
  cfg.seed = 7;
  return cfg;
}

std::string checkpoint_bytes(const io::Checkpoint& c) {
  const fs::path p = fs::temp_directory_path() / ("unir_train_" + std::to_string(::getpid()) + ".ckpt");
  io::save_checkpoint(c, p);
  std::ifstream in(p, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  fs::remove(p);
  return bytes;
}

}  // namespace

TEST(SamplePatch, ExactSizeIsWholeImage) {
  Rng rng(1);
  const ImageU8 a = unir::testing::random_image(16, 16, 1), b = unir::testing::random_image(16, 16, 2);
  for (int i = 0; i < 5; ++i) {
    auto [pa, pb] = sample_patch(a, b, 16, rng);
    EXPECT_EQ(pa, a);
    EXPECT_EQ(pb, b);
  }
}

TEST(SamplePatch, CornersAreUniform) {
  // Pixel value encodes the source row, so the patch reveals its corner.
  ImageU8 img(129, 128);
  for (std::size_t y = 0; y < 129; ++y)
    for (std::size_t x = 0; x < 128; ++x) img.at(y, x, 0) = static_cast<std::uint8_t>(y);
  Rng rng(3);
  int row1 = 0;
  for (int i = 0; i < 2000; ++i) {
    auto [pa, pb] = sample_patch(img, img, 128, rng);
    ASSERT_EQ(pa.height, 128u);
    const int corner = pa.at(0, 0, 0);
    ASSERT_TRUE(corner == 0 || corner == 1);
    row1 += corner;
  }
  EXPECT_NEAR(row1 / 2000.0, 0.5, 0.05);
}

TEST(SamplePatch, CropsAreCoLocated) {
  ImageU8 low(40, 50), gt(40, 50);
  for (std::size_t y = 0; y < 40; ++y)
    for (std::size_t x = 0; x < 50; ++x) {
      low.at(y, x, 0) = gt.at(y, x, 1) = static_cast<std::uint8_t>(y);
      low.at(y, x, 1) = gt.at(y, x, 0) = static_cast<std::uint8_t>(x);
    }
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    auto [pl, pg] = sample_patch(low, gt, 17, rng);
    EXPECT_EQ(pl.at(0, 0, 0), pg.at(0, 0, 1));
    EXPECT_EQ(pl.at(0, 0, 1), pg.at(0, 0, 0));
  }
}

TEST(SamplePatch, Errors) {
  Rng rng(0);
  const ImageU8 a(10, 12), b(10, 13);
  EXPECT_EQ(error_code([&] { sample_patch(a, a, 11, rng); }), "ImageTooSmall");
  EXPECT_EQ(error_code([&] { sample_patch(a, b, 4, rng); }), "ShapeMismatch");
}

namespace {

net::BasicNetWeights<double> scalar_param(double value) {
  net::BasicNetWeights<double> w;
  w.add("p", {1});
  w.at("p").mutable_data()[0] = value;
  return w;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  auto w = scalar_param(0.25), m = scalar_param(0), v = scalar_param(0);
  w.zero_grad();
  adam_step(w, m, v, 1, AdamConfig{});
  EXPECT_EQ(w.at("p").data()[0], 0.25);
}

TEST(Adam, FirstStepIsLearningRate) {
  auto w = scalar_param(0.5), m = scalar_param(0), v = scalar_param(0);
  w.at("p").mutable_grad()[0] = 1.0;
  adam_step(w, m, v, 1, AdamConfig{});
  EXPECT_NEAR(0.5 - w.at("p").data()[0], 1e-4 / (1 + 1e-8), 1e-15);
}

TEST(Adam, TwoStepRecurrence) {
  auto w = scalar_param(1.0), m = scalar_param(0), v = scalar_param(0);
  // Hand-rolled reference.
  const double lr = 1e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double p = 1.0, mm = 0.0, vv = 0.0;
  const double grads[2] = {1.0, -1.0};
  for (int t = 1; t <= 2; ++t) {
    const double g = grads[t - 1];
    mm = b1 * mm + (1 - b1) * g;
    vv = b2 * vv + (1 - b2) * g * g;
    p -= lr * (mm / (1 - std::pow(b1, t))) / (std::sqrt(vv / (1 - std::pow(b2, t))) + eps);
    w.at("p").zero_grad();
    w.at("p").mutable_grad()[0] = g;
    adam_step(w, m, v, static_cast<std::uint64_t>(t), AdamConfig{lr, b1, b2, eps});
  }
  EXPECT_NEAR(w.at("p").data()[0], p, 1e-10);
  EXPECT_NEAR(m.at("p").data()[0], mm, 1e-15);
  EXPECT_NEAR(v.at("p").data()[0], vv, 1e-15);
}

TEST(Adam, MissingGradient) {
  auto w = scalar_param(1.0), m = scalar_param(0), v = scalar_param(0);
  EXPECT_EQ(error_code([&] { adam_step(w, m, v, 1, AdamConfig{}); }), "MissingGradient");
}

TEST(Training, BatchGradientIsMeanOfPerSampleGradients) {
  const NetConfig cfg = tiny_net();
  NetWeights w = net::make_weights(cfg);
  net::init_weights(w, 3);
  const auto pairs = toy_pairs(4, 12, 12, 20);
  std::vector<const ImageU8*> lows, gts;
  for (const auto& p : pairs) lows.push_back(&p.low), gts.push_back(&p.gt);
  const loss::LossWeights lw;
  loss_and_grad(w, cfg, lw, images_to_tensor(lows), images_to_tensor(gts));
  std::map<std::string, std::vector<float>> batch;
  for (const auto& p : w.params()) batch[p.name] = {p.tensor.grad().begin(), p.tensor.grad().end()};

  std::map<std::string, std::vector<double>> mean;
  for (const auto& p : pairs) {
    loss_and_grad(w, cfg, lw, image_to_tensor(p.low), image_to_tensor(p.gt));
    for (const auto& q : w.params()) {
      auto& acc = mean[q.name];
      acc.resize(q.tensor.numel());
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += q.tensor.grad()[i] / 4.0;
    }
  }
  double worst = 0.0;
  for (const auto& [name, g] : batch)
    for (std::size_t i = 0; i < g.size(); ++i) worst = std::max(worst, std::fabs(g[i] - mean[name][i]));
  EXPECT_LT(worst, 1e-5);
}

TEST(Training, SmallStepDoesNotIncreaseLoss) {
  const NetConfig cfg = tiny_net();
  int failures = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto w = net::make_weights<double>(cfg);
    net::init_weights(w, seed);
    auto m = net::make_weights<double>(cfg), v = net::make_weights<double>(cfg);
    const auto pair = toy_pairs(1, 12, 12, 100 + seed)[0];
    const auto low = image_to_tensor<double>(pair.low), gt = image_to_tensor<double>(pair.gt);
    const double before = loss_and_grad(w, cfg, loss::LossWeights{}, low, gt);
    adam_step(w, m, v, 1, AdamConfig{1e-6, 0.9, 0.999, 1e-8});
    const double after = loss_and_grad(w, cfg, loss::LossWeights{}, low, gt);
    if (!(after <= before)) ++failures;
  }
  EXPECT_EQ(failures, 0);
}

TEST(Training, OverfittingOnePairIsNearlyMonotone) {
  TrainConfig cfg = tiny_train();
  cfg.batch_size = 1;
  cfg.patch_size = 12;
  cfg.epochs = 500;
  cfg.adam.lr = 1e-4;
  const auto result = train::train(toy_pairs(1, 12, 12, 50), tiny_net(), cfg);
  ASSERT_EQ(result.log.size(), 500u);
  double best = result.log.front().loss;
  for (const auto& row : result.log) {
    EXPECT_LE(row.loss, best * 1.05) << "epoch " << row.epoch;
    best = std::min(best, row.loss);
  }
  EXPECT_LT(result.log.back().loss, 0.5 * result.log.front().loss);
}

TEST(Training, StepAndEpochCounts) {
  TrainConfig cfg = tiny_train();
  cfg.epochs = 3;
  cfg.batch_size = 2;
  const auto result = train::train(toy_pairs(5, 14, 13, 1), tiny_net(), cfg);
  EXPECT_EQ(result.log.size(), 3u);
  EXPECT_EQ(result.step_losses.size(), 9u);  // ceil(5 / 2) per epoch
  EXPECT_EQ(result.checkpoint.meta["step"], 9);
  EXPECT_EQ(result.checkpoint.meta["epoch"], 3);
  for (std::size_t e = 0; e < 3; ++e) {
    const double mean = (result.step_losses[3 * e] + result.step_losses[3 * e + 1] + result.step_losses[3 * e + 2]) / 3;
    EXPECT_DOUBLE_EQ(result.log[e].loss, mean);
    EXPECT_EQ(result.log[e].epoch, e + 1);
  }
  cfg.max_steps = 4;
  EXPECT_EQ(train::train(toy_pairs(5, 14, 13, 1), tiny_net(), cfg).step_losses.size(), 4u);
}

TEST(Training, SameSeedGivesIdenticalCheckpoints) {
  const auto pairs = toy_pairs(4, 16, 16, 9);
  const auto a = train::train(pairs, tiny_net(), tiny_train());
  const auto b = train::train(pairs, tiny_net(), tiny_train());
  EXPECT_EQ(checkpoint_bytes(a.checkpoint), checkpoint_bytes(b.checkpoint));
  TrainConfig other = tiny_train();
  other.seed = 8;
  EXPECT_NE(checkpoint_bytes(train::train(pairs, tiny_net(), other).checkpoint), checkpoint_bytes(a.checkpoint));
}

TEST(Training, ResumeMatchesUninterruptedRun) {
  const auto pairs = toy_pairs(5, 16, 16, 30);
  TrainConfig full = tiny_train();
  full.epochs = 4;
  const auto reference = train::train(pairs, tiny_net(), full);

  TrainConfig half = full;
  half.epochs = 2;
  const auto first = train::train(pairs, tiny_net(), half);
  // Through the file format, as a real resume would.
  const fs::path p = fs::temp_directory_path() / ("unir_resume_" + std::to_string(::getpid()) + ".ckpt");
  io::save_checkpoint(first.checkpoint, p);
  const auto loaded = io::load_checkpoint(p, tiny_net());
  fs::remove(p);
  const auto second = train::train(pairs, tiny_net(), full, loaded);
  EXPECT_EQ(checkpoint_bytes(second.checkpoint), checkpoint_bytes(reference.checkpoint));
  ASSERT_EQ(second.log.size(), 2u);
  EXPECT_EQ(second.log[1].loss, reference.log[3].loss);

  // Mid-epoch stop and resume.
  TrainConfig partial = full;
  partial.max_steps = 5;
  const auto stopped = train::train(pairs, tiny_net(), partial);
  const auto resumed = train::train(pairs, tiny_net(), full, stopped.checkpoint);
  EXPECT_EQ(checkpoint_bytes(resumed.checkpoint), checkpoint_bytes(reference.checkpoint));
}

TEST(Training, PeriodicCheckpoints) {
  TrainConfig cfg = tiny_train();
  cfg.epochs = 4;
  cfg.checkpoint_every = 2;
  std::vector<std::size_t> epochs;
  TrainHooks hooks;
  hooks.on_checkpoint = [&](std::size_t epoch, const io::Checkpoint& c) {
    epochs.push_back(epoch);
    EXPECT_EQ(c.meta["epoch"], epoch);
  };
  train::train(toy_pairs(2, 12, 12, 4), tiny_net(), cfg, std::nullopt, hooks);
  EXPECT_EQ(epochs, (std::vector<std::size_t>{2, 4}));
}

TEST(Training, InputErrors) {
  EXPECT_EQ(error_code([&] { train::train({}, tiny_net(), tiny_train()); }), "InvalidArgument");
  TrainConfig big = tiny_train();
  big.patch_size = 20;
  EXPECT_EQ(error_code([&] { train::train(toy_pairs(2, 16, 16, 0), tiny_net(), big); }), "ImageTooSmall");
  TrainConfig zero = tiny_train();
  zero.batch_size = 0;
  EXPECT_EQ(error_code([&] { train::train(toy_pairs(2, 16, 16, 0), tiny_net(), zero); }), "InvalidConfig");
}

TEST(Training, LoadPairsFromManifest) {
  const fs::path dir = fs::temp_directory_path() / ("unir_pairs_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  const auto pairs = toy_pairs(2, 8, 9, 3);
  std::vector<io::ManifestRecord> records;
  for (const auto& p : pairs) {
    io::save_image(p.low, dir / (p.id + "_low.png"));
    io::save_image(p.gt, dir / (p.id + "_gt.png"));
    records.push_back({p.id, p.id + "_low.png", p.id + "_gt.png", std::nullopt, std::nullopt, io::Json::object()});
  }
  io::write_manifest(records, dir / "manifest.jsonl");
  const auto loaded = load_pairs(dir / "manifest.jsonl");
  ASSERT_EQ(loaded.size(), 2u);
  EXPECT_EQ(loaded[1].low, pairs[1].low);
  EXPECT_EQ(loaded[1].gt, pairs[1].gt);
  fs::remove(dir / "p1_gt.png");
  try {
    load_pairs(dir / "manifest.jsonl");
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("p1_gt.png"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(Training, LossLogCsv) {
  std::ostringstream os;
  write_loss_log(os, {{1, 0.5}, {2, 0.25}});
  EXPECT_EQ(os.str(), "epoch,loss\n1,0.5000000000\n2,0.2500000000\n");
}

TEST(ImageTensor, RoundTripAndScaling) {
  const ImageU8 img = unir::testing::random_image(5, 7, 2);
  const Tensor t = image_to_tensor(img);
  ASSERT_EQ(t.shape(), (Shape{1, 3, 5, 7}));
  EXPECT_FLOAT_EQ(t.at(0, 2, 4, 6), img.at(4, 6, 2) / 255.0f);
  EXPECT_EQ(tensor_to_image(t), img);
  Tensor out({1, 3, 1, 2}, std::vector<float>{-0.5f, 1.5f, 0.5f, 0.2f, 0.998f, 0.0f});
  EXPECT_EQ(tensor_to_image(out), ImageU8(1, 2, {0, 128, 254, 255, 51, 0}));
}

TEST(Config, PrecedenceFlagsOverFileOverDefaults) {
  std::istringstream file("# comment\ntrain.lr = 0.01\nnet.base_width=16\n\nsynth.guide = source  # trailing\n");
  const auto from_file = config::parse_overrides(file, "run.cfg");
  const auto cfg = config::resolve(from_file, {{"train.lr", "0.5"}});
  EXPECT_EQ(cfg.train.adam.lr, 0.5);
  EXPECT_EQ(cfg.net.base_width, 16u);
  EXPECT_EQ(cfg.synth.guide, synth::Guide::Source);
  EXPECT_EQ(cfg.train.batch_size, 8u);
  EXPECT_EQ(cfg.synth.alpha, 70.0);
}

TEST(Config, Errors) {
  std::istringstream unknown("train.lr = 1\ntrain.speed = 3\n");
  try {
    config::parse_overrides(unknown, "run.cfg");
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "InvalidConfig");
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  config::RunConfig cfg;
  EXPECT_EQ(error_code([&] { config::set_value(cfg, "train.epochs", "3.5"); }), "InvalidConfig");
  EXPECT_EQ(error_code([&] { config::set_value(cfg, "synth.guide", "moon"); }), "InvalidConfig");
  config::set_value(cfg, "net.width_schedule", "8, 8,16,16,8");
  EXPECT_EQ(cfg.net.width_schedule, (std::vector<std::size_t>{8, 8, 16, 16, 8}));
}
