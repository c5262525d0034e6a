#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <limits>
#include <set>

#include "aegis/loss.hpp"
#include "aegis/multiexit.hpp"
#include "aegis/quant.hpp"
#include "unit/support.hpp"

namespace aegis::quant {
namespace {

QuantizedTensor from_codes(std::vector<std::int8_t> codes, double scale) {
  QuantizedTensor q;
  q.shape = {codes.size()};
  q.codes = std::move(codes);
  q.scale = scale;
  return q;
}

TEST(Quantize, ScaleFromMaxMagnitude) {
  const nn::Tensor w({3}, {1.27, 0.506, -0.3});
  const auto q = quantize_layer(w);
  EXPECT_NEAR(q.scale, 0.01, 1e-15);
  EXPECT_GE(q.scale, 1.27 / 127.0);
  EXPECT_EQ(q.codes[0], 127);
  EXPECT_EQ(q.codes[1], 51);
  EXPECT_EQ(q.codes[2], -30);
}

TEST(Quantize, AllZeroLayer) {
  const auto q = quantize_layer(nn::Tensor({5}));
  EXPECT_EQ(q.scale, 1.0);
  for (auto c : q.codes) EXPECT_EQ(c, 0);
}

TEST(Quantize, RoundsHalfAwayFromZero) {
  EXPECT_EQ(round_half_away(2.5), 3.0);
  EXPECT_EQ(round_half_away(-2.5), -3.0);
  EXPECT_EQ(round_half_away(0.49), 0.0);
}

TEST(Quantize, ErrorAtMostHalfStep) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const nn::Tensor w = testing::random_tensor({257}, rng, -3.0, 3.0);
    const auto q = quantize_layer(w);
    for (std::size_t i = 0; i < w.size(); ++i)
      EXPECT_LE(std::abs(q.value(i) - w[i]), 0.5 * q.scale * (1 + 1e-12));
  }
}

TEST(Quantize, IdempotentOnQuantizedValues) {
  Rng rng(2);
  const auto q = quantize_layer(testing::random_tensor({100}, rng));
  const auto again = quantize_layer(q.dequantize());
  EXPECT_EQ(again, q);
}

TEST(Quantize, RejectsNonFinite) {
  nn::Tensor w({2});
  w[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(quantize_layer(w), std::invalid_argument);
  EXPECT_THROW(quantize_layer(nn::Tensor()), std::invalid_argument);
}

TEST(FlipBit, SignBitOfNegativeCode) {
  // Pattern 10001000 is -120 in two's complement.
  const auto q = from_codes({static_cast<std::int8_t>(0b10001000)}, 0.01);
  EXPECT_EQ(q.codes[0], -120);
  const auto f = flip_bit(q, {0, 0, 7});
  EXPECT_EQ(f.pattern(0), 0b00001000);
  EXPECT_EQ(f.codes[0], 8);
}

TEST(FlipBit, SetsLowBit) {
  const auto f = flip_bit(from_codes({0}, 0.01), {0, 0, 3});
  EXPECT_EQ(f.codes[0], 8);
}

TEST(FlipBit, IsAnInvolution) {
  Rng rng(3);
  const auto q = quantize_layer(testing::random_tensor({64}, rng));
  for (unsigned bit = 0; bit < 8; ++bit) {
    const BitLocation loc{0, 17, bit};
    EXPECT_EQ(flip_bit(flip_bit(q, loc), loc), q);
  }
}

TEST(FlipBit, RejectsOutOfBounds) {
  const auto q = from_codes({1, 2}, 1.0);
  EXPECT_THROW(flip_bit(q, {0, 2, 0}), std::out_of_range);
  EXPECT_THROW(flip_bit(q, {0, 0, 8}), std::out_of_range);
}

TEST(ToggleDelta, Examples) {
  const auto q = from_codes({0}, 0.01);
  EXPECT_NEAR(bit_toggle_delta(q, 0, 3), 0.08, 1e-15);
  EXPECT_NEAR(bit_toggle_delta(q, 0, 7), -1.28, 1e-15);
}

TEST(ToggleDelta, ExactOverRandomFlips) {
  Rng rng(4);
  std::size_t checks = 0;
  for (int layer = 0; layer < 10; ++layer) {
    const auto q = quantize_layer(testing::random_tensor({97}, rng, -5.0, 5.0));
    for (int k = 0; k < 1000; ++k) {
      const BitLocation loc{0, static_cast<std::size_t>(rng.below(q.size())), static_cast<unsigned>(rng.below(8))};
      const auto f = flip_bit(q, loc);
      const double delta = bit_toggle_delta(q, loc);
      ASSERT_EQ(f.value(loc.flat_index) - q.value(loc.flat_index), delta);
      const int code_delta = f.codes[loc.flat_index] - q.codes[loc.flat_index];
      if (loc.bit == 7)
        ASSERT_EQ(std::abs(code_delta), 128);
      else
        ASSERT_EQ(std::abs(code_delta), 1 << loc.bit);
      ++checks;
    }
  }
  EXPECT_EQ(checks, 10000u);
}

TEST(Hamming, EqualsNetToggledLocations) {
  Rng rng(5);
  const auto q = quantize_layer(testing::random_tensor({50}, rng));
  for (int trial = 0; trial < 50; ++trial) {
    QuantizedTensor cur = q;
    std::set<std::pair<std::size_t, unsigned>> net;
    for (int k = 0; k < 40; ++k) {
      const std::size_t i = static_cast<std::size_t>(rng.below(8));  // few weights, many repeats
      const unsigned b = static_cast<unsigned>(rng.below(8));
      cur = flip_bit(cur, {0, i, b});
      if (!net.erase({i, b})) net.insert({i, b});
    }
    EXPECT_EQ(hamming_distance(q, cur), net.size());
  }
}

TEST(RankBits, ZeroGradientsTieBreakLexicographically) {
  const auto a = from_codes({3, -4}, 0.5), b = from_codes({1}, 0.5);
  const nn::Tensor ga({2}), gb({1});
  const std::vector<GradView> views{{0, &a, &ga}, {1, &b, &gb}};
  const auto top = rank_bits(views, 3);
  ASSERT_EQ(top.size(), 3u);
  for (unsigned i = 0; i < 3; ++i) {
    EXPECT_EQ(top[i].predicted_delta, 0.0);
    EXPECT_EQ(top[i].location, (BitLocation{0, 0, i}));
  }
}

TEST(RankBits, PredictedDeltaExample) {
  const auto q = from_codes({0, 0}, 0.01);
  const nn::Tensor g({2}, {0.5, 0.0});
  const std::vector<GradView> views{{0, &q, &g}};
  const auto all = rank_bits(views, 16);
  const auto it = std::find_if(all.begin(), all.end(), [](const BitScore& s) { return s.location == BitLocation{0, 0, 3}; });
  ASSERT_NE(it, all.end());
  EXPECT_NEAR(it->predicted_delta, 0.04, 1e-15);
  EXPECT_EQ(all.front().location, (BitLocation{0, 0, 6}));  // +0.64 * 0.5 is the largest gain
}

TEST(RankBits, SpearmanAgainstBruteForceToggles) {
  const MultiExitModel m = testing::tiny_model(9, false);
  std::size_t bits = 0;
  for (std::size_t id = 0; id < m.param_layer_count(); ++id) bits += 8 * m.codes(id).size();
  ASSERT_LE(bits, 2048u);

  Rng rng(6);
  const auto xs = testing::random_inputs(32, {1, 5, 5}, rng);
  const auto ys = testing::random_labels(32, 3, rng);
  const auto loss_of = [&](const MultiExitModel& model) {
    double s = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i)
      s += nn::cross_entropy(nn::forward(model.backbone(), xs[i]).logits, ys[i]);
    return s / static_cast<double>(xs.size());
  };
  const auto g = nn::grad_params(m.backbone(), xs, nn::cross_entropy_fn(ys));
  std::vector<GradView> views;
  const auto layers = m.backbone().param_layers();
  for (std::size_t id = 0; id < layers.size(); ++id) views.push_back({id, &m.codes(id), &g.grads.weight[layers[id]]});
  const auto top = rank_bits(views, 100);

  const double base = loss_of(m);
  std::vector<double> predicted, actual;
  for (const auto& s : top) {
    MultiExitModel f = m;
    f.flip(s.location);
    predicted.push_back(s.predicted_delta);
    actual.push_back(loss_of(f) - base);
  }
  EXPECT_GE(testing::spearman(predicted, actual), 0.8);
}

}  // namespace
}  // namespace aegis::quant
