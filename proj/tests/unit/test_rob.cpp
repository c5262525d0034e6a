#include <gtest/gtest.h>

#include <algorithm>

#include "aegis/checkpoint.hpp"
#include "aegis/rob.hpp"
#include "unit/support.hpp"

namespace aegis {
namespace {

class Vpa : public ::testing::Test {
 protected:
  void SetUp() override {
    Rng rng(13);
    xs = testing::random_inputs(48, {1, 5, 5}, rng);
    ys = testing::random_labels(48, 3, rng);
  }
  MultiExitModel m = testing::tiny_model(21);
  std::vector<nn::Tensor> xs;
  std::vector<std::size_t> ys;
};

TEST_F(Vpa, OneIterationOneBit) {
  rob::VpaConfig cfg;
  cfg.n_vpa = 1;
  cfg.k_per_iter = 1;
  Rng rng(1);
  const auto f = rob::vpa(m, xs, ys, cfg, rng);
  EXPECT_EQ(f.flipped.size(), 1u);
  EXPECT_EQ(io::checkpoint_hamming(io::serialize_model(m), io::serialize_model(f.model)), 1u);
}

TEST_F(Vpa, OriginalUntouched) {
  const auto before = io::serialize_model(m);
  Rng rng(2);
  rob::vpa(m, xs, ys, {}, rng);
  EXPECT_EQ(io::serialize_model(m), before);
}

TEST_F(Vpa, FlipsOnlyBackboneBitsAndRaisesLoss) {
  rob::VpaConfig cfg;
  cfg.n_vpa = 6;
  Rng rng(3);
  const auto f = rob::vpa(m, xs, ys, cfg, rng);
  ASSERT_FALSE(f.flipped.empty());
  for (const auto& loc : f.flipped) EXPECT_LT(loc.layer_id, m.backbone_param_layers());
  EXPECT_GT(rob::inference_loss(f.model, xs, ys), rob::inference_loss(m, xs, ys));
}

TEST_F(Vpa, SurrogateReconstructsFromFlipList) {
  rob::VpaConfig cfg;
  cfg.n_vpa = 8;
  cfg.k_per_iter = 2;
  Rng rng(4);
  const auto f = rob::vpa(m, xs, ys, cfg, rng);
  EXPECT_TRUE(rob::reconstruct(m, f.flipped) == f.model);
  EXPECT_TRUE(std::is_sorted(f.flipped.begin(), f.flipped.end()));
}

TEST_F(Vpa, FirstFlipWithinTopFivePercentOfBruteForce) {
  rob::VpaConfig cfg;
  cfg.n_vpa = 1;
  cfg.batch = xs.size();  // whole set, so the oracle sees the same loss
  Rng rng(5);
  const auto f = rob::vpa(m, xs, ys, cfg, rng);
  ASSERT_EQ(f.flipped.size(), 1u);

  const double base = rob::inference_loss(m, xs, ys);
  std::vector<double> gains;
  double chosen = 0.0;
  for (std::size_t id = 0; id < m.backbone_param_layers(); ++id)
    for (std::size_t i = 0; i < m.codes(id).size(); ++i)
      for (unsigned b = 0; b < 8; ++b) {
        MultiExitModel t = m;
        t.flip({id, i, b});
        const double g = rob::inference_loss(t, xs, ys) - base;
        gains.push_back(g);
        if (quant::BitLocation{id, i, b} == f.flipped.front()) chosen = g;
      }
  ASSERT_LE(gains.size(), 2048u);
  const auto better = std::count_if(gains.begin(), gains.end(), [&](double g) { return g > chosen; });
  EXPECT_LE(static_cast<double>(better), 0.05 * static_cast<double>(gains.size()));
}

TEST_F(Vpa, RejectsZeroConfig) {
  rob::VpaConfig cfg;
  cfg.n_vpa = 0;
  Rng rng(6);
  EXPECT_THROW(rob::vpa(m, xs, ys, cfg, rng), std::invalid_argument);
}

TEST_F(Vpa, ZeroMixReproducesTrainIcs) {
  rob::VpaConfig vc;
  vc.n_vpa = 4;
  Rng vr(7);
  const auto f = rob::vpa(m, xs, ys, vc, vr);
  IcTrainConfig cfg;
  cfg.epochs = 2;
  Rng a(8), b(8);
  const auto plain = train_ics(m, xs, ys, cfg, a);
  const auto mixed = rob::rob_train_ics(m, f, xs, ys, cfg, 0.0, b);
  EXPECT_EQ(io::serialize_model(plain), io::serialize_model(mixed));
}

TEST_F(Vpa, RobTrainingKeepsBackboneBytes) {
  rob::VpaConfig vc;
  vc.n_vpa = 4;
  Rng vr(9);
  const auto f = rob::vpa(m, xs, ys, vc, vr);
  IcTrainConfig cfg;
  cfg.epochs = 2;
  Rng rng(10);
  const auto t = rob::rob_train_ics(m, f, xs, ys, cfg, 0.5, rng);
  EXPECT_EQ(io::backbone_section_bytes(t), io::backbone_section_bytes(m));
  EXPECT_THROW(rob::rob_train_ics(m, f, xs, ys, cfg, 1.0, rng), std::invalid_argument);
}

TEST_F(Vpa, MixedBatchesFollowInterleavingRule) {
  // With mix 0.5 every second minibatch is flipped: floor((b+1)/2) > floor(b/2).
  std::size_t flipped = 0;
  for (std::size_t b = 0; b < 10; ++b) flipped += (b + 1) / 2 > b / 2;
  EXPECT_EQ(flipped, 5u);
}

}  // namespace
}  // namespace aegis
