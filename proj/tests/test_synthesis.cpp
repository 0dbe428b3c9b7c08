// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <map>

#include "oracles.hpp"
#include "test_util.hpp"
#include "unir/synthesis.hpp"

using namespace unir;
using namespace unir::synth;
using namespace unir::testing;

namespace {

std::vector<double> random_plane(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

double mean_v_in_mask(const ImageU8& img, const BinaryMask& m) { return masked_mean_brightness(rgb_to_hsv(img).v, m); }

}  // namespace

TEST(MaskedMean, ConstantField) {
  std::vector<float> v(16, 50.0f);
  EXPECT_EQ(masked_mean_brightness(v, BinaryMask(4, 4, 1)), 50.0);
}

TEST(MaskedMean, ConstantOnMask) {
  BinaryMask m(4, 4);
  std::vector<float> v(16);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) {
      v[y * 4 + x] = x < 2 ? 0.0f : 200.0f;
      m.data[y * 4 + x] = x < 2 ? 0 : 1;
    }
  EXPECT_EQ(masked_mean_brightness(v, m), 200.0);
}

TEST(MaskedMean, MatchesDirectLoop) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(0.0f, 255.0f);
  std::vector<float> v(37 * 41);
  for (auto& x : v) x = u(rng);
  BinaryMask m = random_mask(37, 41, 6);
  double total = 0.0;
  int count = 0;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (m.data[i]) total += v[i], ++count;
  EXPECT_EQ(masked_mean_brightness(v, m), total / count);
}

TEST(MaskedMean, EmptyMaskIsAnError) {
  std::vector<float> v(4, 1.0f);
  try {
    masked_mean_brightness(v, BinaryMask(2, 2, 0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "EmptyMask");
  }
}

TEST(SelectAdjustment, DarkRegionsDeepen) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(select_adjustment(50.0, 70.0, rng), Adjustment::Deepen);
}

TEST(SelectAdjustment, BoundaryIsRandom) {
  Rng rng(2);
  std::map<Adjustment, int> seen;
  for (int i = 0; i < 300; ++i) ++seen[select_adjustment(70.0, 70.0, rng)];
  EXPECT_EQ(seen.size(), 3u);
}

TEST(SelectAdjustment, UniformFrequencies) {
  Rng rng(3);
  std::map<Adjustment, int> seen;
  for (int i = 0; i < 3000; ++i) ++seen[select_adjustment(200.0, 70.0, rng)];
  for (auto [branch, n] : seen) {
    const double freq = n / 3000.0;
    EXPECT_GE(freq, 0.30) << to_string(branch);
    EXPECT_LE(freq, 0.37) << to_string(branch);
  }
}

TEST(AdjustBrightness, NoneIsIdentity) {
  std::vector<float> v = {0.0f, 17.5f, 128.0f, 255.0f};
  EXPECT_EQ(adjust_brightness(v, BinaryMask(2, 2, 1), Adjustment::None, SynthConfig{}), v);
}

TEST(AdjustBrightness, DeepenAndSurfaceValues) {
  SynthConfig cfg;
  cfg.beta = 0.5;
  cfg.gamma_d = 2.0;
  cfg.gamma_s = 0.5;
  BinaryMask m(1, 2);
  m.data = {1, 0};
  auto deep = adjust_brightness(std::vector<float>{255.0f, 255.0f}, m, Adjustment::Deepen, cfg);
  EXPECT_FLOAT_EQ(deep[0], 127.5f);
  EXPECT_EQ(deep[1], 255.0f);
  auto surf = adjust_brightness(std::vector<float>{63.75f, 63.75f}, m, Adjustment::Surface, cfg);
  EXPECT_FLOAT_EQ(surf[0], 127.5f);
  EXPECT_EQ(surf[1], 63.75f);
}

TEST(AdjustBrightness, DirectionProperties) {
  SynthConfig cfg;
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<float> u(0.0f, 255.0f);
  std::vector<float> v(1000);
  for (auto& x : v) x = u(rng);
  BinaryMask m(1, 1000, 1);
  auto deep = adjust_brightness(v, m, Adjustment::Deepen, cfg);
  auto surf = adjust_brightness(v, m, Adjustment::Surface, cfg);
  for (std::size_t i = 0; i < v.size(); ++i) {
    EXPECT_LE(deep[i], v[i]);
    EXPECT_GE(surf[i], v[i]);
  }
}

TEST(GuidedFilter, ConstantSourceStaysConstant) {
  auto guide = random_plane(20 * 24, 1);
  std::vector<double> src(20 * 24, 0.37);
  auto out = guided_filter(guide, src, 20, 24, 8, 1e-2);
  for (double v : out) EXPECT_NEAR(v, 0.37, 1e-12);
}

TEST(GuidedFilter, SelfGuidanceLimit) {
  auto src = random_plane(32 * 32, 2);
  auto out = guided_filter(src, src, 32, 32, 8, 1e-8);
  for (std::size_t i = 0; i < src.size(); ++i) EXPECT_NEAR(out[i], src[i], 1e-3);
}

TEST(GuidedFilter, MatchesNaiveWindowOracle) {
  for (std::size_t k : {2u, 8u, 64u}) {
    auto guide = random_plane(64 * 64, 10 + k), src = random_plane(64 * 64, 20 + k);
    auto fast = guided_filter(guide, src, 64, 64, k, 1e-2);
    auto slow = naive_guided(guide, src, 64, 64, k, 1e-2);
    for (std::size_t i = 0; i < fast.size(); ++i) ASSERT_NEAR(fast[i], slow[i], 1e-4) << "k=" << k << " i=" << i;
  }
}

TEST(GuidedFilter, ShiftCovariantInSource) {
  auto guide = random_plane(30 * 30, 3), src = random_plane(30 * 30, 4);
  std::vector<double> shifted(src);
  for (auto& v : shifted) v += 0.25;
  auto a = guided_filter(guide, src, 30, 30, 6, 1e-2), b = guided_filter(guide, shifted, 30, 30, 6, 1e-2);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(b[i], a[i] + 0.25, 1e-9);
}

TEST(GuidedFilter, TooSmallImage) {
  std::vector<double> p(10 * 10, 0.5);
  try {
    guided_filter(p, p, 10, 10, 64, 1e-2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "ImageTooSmall");
  }
}

TEST(Synthesize, IdentityPipeline) {
  ImageU8 raw = scene_image(64, 64, 11);
  SynthConfig cfg;
  cfg.epsilon_gf = 1e-8;
  cfg.guide = Guide::Source;
  Rng rng(0);
  auto res = synthesize_low(raw, BinaryMask(64, 64, 1), cfg, rng, Adjustment::None);
  for (std::size_t i = 0; i < raw.data.size(); ++i) EXPECT_LE(std::abs(int(res.low.data[i]) - int(raw.data[i])), 2);
}

TEST(Synthesize, DarkRegionIsDeepenedAndDarker) {
  ImageU8 raw = scene_image(64, 64, 12);
  BinaryMask mask = luminance_threshold_mask(raw, 90.0);
  ASSERT_GT(mask.count(), 0u);
  SynthConfig cfg;
  Rng rng(1);
  auto res = synthesize_low(raw, mask, cfg, rng);
  if (res.brightness < cfg.alpha) EXPECT_EQ(res.delta, Adjustment::Deepen);
  cfg.alpha = 254.0;  // force the dark branch through the threshold itself
  Rng rng2(1);
  auto dark = synthesize_low(raw, mask, cfg, rng2);
  EXPECT_EQ(dark.delta, Adjustment::Deepen);
  EXPECT_LT(mean_v_in_mask(dark.low, mask), mean_v_in_mask(raw, mask));
}

TEST(Synthesize, DeterministicForFixedSeed) {
  ImageU8 raw = scene_image(64, 80, 13);
  BinaryMask mask = luminance_threshold_mask(raw, 120.0);
  SynthConfig cfg;
  Rng a = image_rng(42, 3), b = image_rng(42, 3);
  auto r1 = synthesize_low(raw, mask, cfg, a), r2 = synthesize_low(raw, mask, cfg, b);
  EXPECT_EQ(r1.low, r2.low);
  EXPECT_EQ(r1.delta, r2.delta);
}

TEST(Synthesize, Errors) {
  ImageU8 raw = scene_image(64, 64, 14);
  SynthConfig cfg;
  Rng rng(0);
  try {
    synthesize_low(raw, BinaryMask(64, 64, 0), cfg, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "EmptyMask");
  }
  EXPECT_THROW(synthesize_low(raw, BinaryMask(32, 64, 1), cfg, rng), Error);
  cfg.kernel_g = 7;
  EXPECT_THROW(synthesize_low(raw, BinaryMask(64, 64, 1), cfg, rng), Error);
}

TEST(Sharpen, UniformUnchanged) {
  ImageU8 img(6, 7, 77);
  EXPECT_EQ(sharpen_gt(img), img);
}

TEST(Sharpen, ImpulseResponse) {
  ImageU8 img(5, 5, 0);
  for (std::size_t c = 0; c < 3; ++c) img.at(2, 2, c) = 100;
  ImageU8 out = sharpen_gt(img);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(out.at(2, 2, c), 255);  // 500 clamped
    EXPECT_EQ(out.at(1, 2, c), 0);    // -100 clamped
    EXPECT_EQ(out.at(3, 2, c), 0);
    EXPECT_EQ(out.at(2, 1, c), 0);
    EXPECT_EQ(out.at(2, 3, c), 0);
    EXPECT_EQ(out.at(0, 0, c), 0);
  }
}

TEST(Sharpen, CheckerboardSaturates) {
  ImageU8 img(8, 8);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = (x + y) % 2 ? 255 : 0;
  for (auto v : sharpen_gt(img).data) EXPECT_TRUE(v == 0 || v == 255);
}

// With replicate borders the Laplacian term sums to zero, so the image mean
// is preserved whenever nothing clamps.
TEST(Sharpen, PreservesMeanWithoutClamping) {
  ImageU8 img(24, 31);
  for (std::size_t y = 0; y < 24; ++y)
    for (std::size_t x = 0; x < 31; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<std::uint8_t>(90 + x + 2 * y + 7 * c + (x * y) % 5);
  ImageU8 out = sharpen_gt(img);
  long before = 0, after = 0;
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    before += img.data[i];
    after += out.data[i];
    ASSERT_GT(out.data[i], 0);
    ASSERT_LT(out.data[i], 255);
  }
  EXPECT_EQ(before, after);
}
