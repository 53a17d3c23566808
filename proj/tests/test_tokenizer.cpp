#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "m3l/tokenizer/tokenizer.hpp"
#include "test_support.hpp"

namespace m3l::tok {
namespace {

TEST(SincosPosEmbed, OriginIsSinZeroCosOne) {
  const auto t = sincos_pos_embed<double>(8, 8, 128);
  for (int i = 0; i < 32; ++i) {
    EXPECT_EQ(t(0, i), 0.0);
    EXPECT_EQ(t(0, 32 + i), 1.0);
    EXPECT_EQ(t(0, 64 + i), 0.0);
    EXPECT_EQ(t(0, 96 + i), 1.0);
  }
}

TEST(SincosPosEmbed, RangeAndDistinctRows) {
  const auto t = sincos_pos_embed<double>(8, 8, 128);
  EXPECT_LE(t.maxCoeff(), 1.0);
  EXPECT_GE(t.minCoeff(), -1.0);
  for (int a = 0; a < 64; ++a) {
    for (int b = a + 1; b < 64; ++b) EXPECT_GT((t.row(a) - t.row(b)).norm(), 1e-6) << a << " vs " << b;
  }
}

TEST(SincosPosEmbed, PureFunctionAndDimCheck) {
  EXPECT_EQ(sincos_pos_embed<double>(4, 8, 16), sincos_pos_embed<double>(4, 8, 16));
  EXPECT_THROW(sincos_pos_embed<double>(8, 8, 126), std::invalid_argument);
  EXPECT_THROW(sincos_pos_embed<double>(0, 8, 128), std::invalid_argument);
}

TEST(SampleMask, KeptCountExamples) {
  auto m = sample_mask(96, MaskSpec{0.95, 1});
  EXPECT_EQ(m.keep.size(), 5u);
  EXPECT_EQ(m.masked.size(), 91u);
  m = sample_mask(10, MaskSpec{0.0, 1});
  EXPECT_EQ(m.keep.size(), 10u);
  EXPECT_TRUE(m.masked.empty());
  m = sample_mask(4, MaskSpec{1.0, 1});
  EXPECT_EQ(m.keep.size(), 1u);
  EXPECT_EQ(m.masked.size(), 3u);
  EXPECT_THROW(sample_mask(0, MaskSpec{0.5, 1}), std::invalid_argument);
  EXPECT_THROW(sample_mask(4, MaskSpec{1.5, 1}), std::invalid_argument);
}

TEST(SampleMask, AlwaysAnExactPartition) {
  Rng rng(11);
  for (int trial = 0; trial < 2000; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(200));
    const double ratio = rng.uniform();
    const MaskIndices m = sample_mask(n, ratio, rng);
    ASSERT_EQ(static_cast<int>(m.keep.size()), std::max(1, static_cast<int>(std::lround(n * (1.0 - ratio)))));
    std::vector<int> seen(static_cast<std::size_t>(n), 0);
    for (int i : m.keep) ++seen[static_cast<std::size_t>(i)];
    for (int i : m.masked) ++seen[static_cast<std::size_t>(i)];
    for (int c : seen) ASSERT_EQ(c, 1);
    ASSERT_TRUE(std::is_sorted(m.masked.begin(), m.masked.end()));
  }
}

TEST(SampleMask, DeterministicGivenSeed) {
  const auto a = sample_mask(96, MaskSpec{0.9, 42});
  const auto b = sample_mask(96, MaskSpec{0.9, 42});
  const auto c = sample_mask(96, MaskSpec{0.9, 43});
  EXPECT_EQ(a.keep, b.keep);
  EXPECT_EQ(a.masked, b.masked);
  EXPECT_NE(a.keep, c.keep);
}

TEST(SampleMask, PerTokenKeepFrequencyIsUniform) {
  constexpr int kDraws = 10000;
  Rng rng(5);
  std::vector<int> kept(96, 0);
  for (int d = 0; d < kDraws; ++d) {
    const auto m = sample_mask(96, 0.95, rng);
    ASSERT_EQ(m.keep.size(), 5u);
    for (int i : m.keep) ++kept[static_cast<std::size_t>(i)];
  }
  const double p = 5.0 / 96.0;
  const double sigma = std::sqrt(kDraws * p * (1.0 - p));
  for (int i = 0; i < 96; ++i) EXPECT_LE(std::abs(kept[static_cast<std::size_t>(i)] - kDraws * p), 4.0 * sigma) << "token " << i;
}

TEST(TokenLayout, DefaultCounts) {
  const TokenizerConfig cfg;
  const TokenLayout both = token_layout(cfg, ModalitySet::both());
  EXPECT_EQ(both.n_tokens, 96);
  const auto ids = both.modality_ids();
  EXPECT_EQ(std::count(ids.begin(), ids.end(), Modality::vision), 64);
  EXPECT_EQ(std::count(ids.begin(), ids.end(), Modality::touch), 32);
  const TokenLayout vision = token_layout(cfg, ModalitySet::vision_only());
  EXPECT_EQ(vision.n_tokens, 64);
  EXPECT_EQ(cfg.vision_payload(), 8 * 8 * 12);
  EXPECT_EQ(cfg.touch_payload(), 8 * 8 * 12);
}

TEST(TokenLayout, TouchPadsGetDistinctPositions) {
  const TokenizerConfig cfg;
  const auto layout = token_layout(cfg, ModalitySet::both());
  const auto pos = layout_pos_embed<double>(cfg, layout, 128);
  for (int t = 0; t < 16; ++t) EXPECT_GT((pos.row(64 + t) - pos.row(80 + t)).norm(), 1e-3);
}

class TokenizerTest : public ::testing::Test {
 protected:
  TokenizerTest() : tokenizer(cfg) {
    Rng rng(3);
    tokenizer.init(rng);
  }
  TokenizerConfig cfg;
  Tokenizer<double> tokenizer;
};

TEST_F(TokenizerTest, FeatureGridShapes) {
  Rng rng(1);
  const auto obs = testing::random_obs<double>(cfg, 2, rng);
  const auto vf = tokenizer.conv_features_vision(obs.image, 2);
  EXPECT_EQ(vf.rows(), 2 * 64);
  EXPECT_EQ(vf.cols(), 128);
  const auto tf = tokenizer.conv_features_touch(obs.touch, 4);
  EXPECT_EQ(tf.rows(), 4 * 16);
  EXPECT_EQ(tf.cols(), 128);
  EXPECT_THROW(tokenizer.conv_features_vision(obs.image, 3), std::invalid_argument);
  EXPECT_THROW(tokenizer.conv_features_touch(obs.image, 2), std::invalid_argument);
}

TEST_F(TokenizerTest, ZeroInputGivesZeroFeatures) {
  const Matrix<double> image = Matrix<double>::Zero(64 * 64, 12);
  const Matrix<double> taxels = Matrix<double>::Zero(2 * 32 * 32, 12);
  EXPECT_EQ(tokenizer.conv_features_vision(image, 1).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(tokenizer.conv_features_touch(taxels, 2).cwiseAbs().maxCoeff(), 0.0);
}

TEST_F(TokenizerTest, OnePixelChangesOnlyItsReceptiveField) {
  Rng rng(2);
  auto obs = testing::random_obs<double>(cfg, 1, rng);
  const auto before = tokenizer.conv_features_vision(obs.image, 1);
  const int y = 29, x = 42;
  obs.image(y * 64 + x, 5) += 0.5;
  const auto after = tokenizer.conv_features_vision(obs.image, 1);
  const int covering = (y / 8) * 8 + x / 8;
  for (int t = 0; t < 64; ++t) {
    const double d = (after.row(t) - before.row(t)).cwiseAbs().maxCoeff();
    if (t == covering) {
      EXPECT_GT(d, 0.0);
    } else {
      EXPECT_EQ(d, 0.0) << "token " << t;
    }
  }
}

TEST_F(TokenizerTest, TouchWeightsSharedAcrossPads) {
  Rng rng(4);
  auto obs = testing::random_obs<double>(cfg, 1, rng);
  obs.touch.bottomRows(32 * 32) = obs.touch.topRows(32 * 32);
  const auto tf = tokenizer.conv_features_touch(obs.touch, 2);
  EXPECT_EQ(tf.topRows(16), tf.bottomRows(16));
}

TEST_F(TokenizerTest, TokenBatchAssembly) {
  Rng rng(6);
  const auto obs = testing::random_obs<double>(cfg, 3, rng);
  const auto both = tokenizer.forward(obs, ModalitySet::both());
  EXPECT_EQ(both.n_tokens(), 96);
  EXPECT_EQ(both.tokens.rows(), 3 * 96);
  EXPECT_EQ(both.tokens.cols(), 128);
  const auto vision = tokenizer.forward(obs, ModalitySet::vision_only());
  EXPECT_EQ(vision.n_tokens(), 64);
  for (auto m : vision.modality_id) EXPECT_EQ(m, Modality::vision);
  // vision-only tokens equal the vision part of the joint sequence
  for (int b = 0; b < 3; ++b) EXPECT_EQ(vision.tokens.block(b * 64, 0, 64, 128), both.tokens.block(b * 96, 0, 64, 128));
  EXPECT_THROW(tokenizer.forward(obs, ModalitySet{false, false}), std::invalid_argument);
}

TEST_F(TokenizerTest, ModalityEmbeddingDelta) {
  for (Index i = 0; i < tokenizer.modality_embed().value.size(); ++i) {
    tokenizer.modality_embed().value.data()[i] = 0.01 * static_cast<double>(i % 17) - 0.05;
  }
  ObsBatch<double> obs;
  obs.batch = 1;
  obs.frames = 4;
  obs.image = Matrix<double>::Zero(64 * 64, 12);
  obs.touch = Matrix<double>::Zero(2 * 32 * 32, 12);
  const auto tb = tokenizer.forward(obs, ModalitySet::both());
  // grid cell (0, 0) of the vision grid and of the left pad share the positional row
  const auto delta = (tb.tokens.row(64) - tb.tokens.row(0)).eval();
  const auto expect = (tokenizer.modality_embed().value.row(1) - tokenizer.modality_embed().value.row(0)).eval();
  EXPECT_LT((delta - expect).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(GatherObs, CountsTaxelReadsOnlyForTouch) {
  const auto obs = testing::sample_observations(3, 9);
  const auto ptrs = testing::pointers(obs);
  const auto before = taxel_reads().load();
  const auto v = gather_obs<float>(ptrs, ModalitySet::vision_only());
  EXPECT_EQ(taxel_reads().load(), before);
  EXPECT_FALSE(v.has_touch());
  EXPECT_EQ(v.image.rows(), 3 * 64 * 64);
  const auto b = gather_obs<float>(ptrs, ModalitySet::both());
  EXPECT_EQ(taxel_reads().load(), before + 3);
  EXPECT_EQ(b.touch.rows(), 2 * 3 * 32 * 32);
  // right pad of sample 1 sits after all left pads
  EXPECT_EQ(b.touch(4 * 32 * 32, 2), obs[1].tactile_right_stack[2]);
}

}  // namespace
}  // namespace m3l::tok
