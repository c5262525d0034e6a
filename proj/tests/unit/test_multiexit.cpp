#include <gtest/gtest.h>

#include "aegis/checkpoint.hpp"
#include "aegis/loss.hpp"
#include "aegis/multiexit.hpp"
#include "unit/support.hpp"

namespace aegis {
namespace {

TEST(AttachIcs, OnePerExitPoint) {
  const MultiExitModel m = testing::desk_model();
  EXPECT_EQ(m.backbone().exit_points().size(), 6u);
  EXPECT_EQ(m.ics().size(), 6u);
  EXPECT_EQ(m.exit_count(), 7u);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(m.ic(i).position, m.backbone().exit_points()[i]);
}

TEST(AttachIcs, EmptyPositionsGiveVanillaNetwork) {
  const MultiExitModel base = MultiExitModel::from_backbone(testing::tiny_net());
  Rng rng(1);
  const MultiExitModel m = attach_ics(base, std::vector<std::size_t>{}, rng);
  EXPECT_EQ(m.exit_count(), 1u);
  EXPECT_TRUE(m == base);
  Rng xr(2);
  const auto x = testing::random_tensor({1, 5, 5}, xr);
  EXPECT_EQ(ic_predict(m, m.final_exit(), x).label, nn::argmax(nn::forward(base.backbone(), x).logits.values()));
}

TEST(AttachIcs, RejectsPositionsOutsideExitPoints) {
  const MultiExitModel base = MultiExitModel::from_backbone(testing::tiny_net());
  Rng rng(1);
  EXPECT_THROW(attach_ics(base, std::vector<std::size_t>{2}, rng), std::invalid_argument);
  EXPECT_THROW(attach_ics(base, std::vector<std::size_t>{3, 1}, rng), std::invalid_argument);
}

TEST(AttachIcs, BackboneBytesUnchanged) {
  const MultiExitModel base = MultiExitModel::from_backbone(testing::tiny_net());
  const auto before = io::backbone_section_bytes(base);
  Rng rng(3);
  const auto pos = base.backbone().exit_points();
  EXPECT_EQ(io::backbone_section_bytes(attach_ics(base, pos, rng)), before);
}

TEST(InternalClassifier, OneConvAndOneDenseLayer) {
  const MultiExitModel m = testing::desk_model();
  for (const auto& ic : m.ics()) {
    const auto params = ic.head.param_layers();
    ASSERT_EQ(params.size(), 2u);
    EXPECT_EQ(ic.head.layer(params[0]).spec.kind, nn::LayerKind::conv2d);
    EXPECT_EQ(ic.head.layer(params[1]).spec.kind, nn::LayerKind::dense);
    EXPECT_EQ(ic.head.layer(params[1]).spec.out_features, m.class_count());
    const std::size_t in = m.backbone().activation_shape(ic.position)[0];
    EXPECT_EQ(ic.head.layer(params[0]).spec.out_channels, std::min<std::size_t>(2 * in, 128));
  }
}

TEST(LayerIds, BackboneFirstThenIcLayers) {
  const MultiExitModel m = testing::tiny_model();
  EXPECT_EQ(m.backbone_param_layers(), 3u);
  EXPECT_EQ(m.param_layer_count(), 3u + 2u * m.ics().size());
  EXPECT_TRUE(m.slot(0).is_backbone());
  EXPECT_EQ(m.slot(3).ic, 0u);
  EXPECT_EQ(m.final_layer_id(), 2u);
  EXPECT_EQ(m.slot(m.ic_dense_layer_id(1)).ic, 1u);
}

class IcTraining : public ::testing::Test {
 protected:
  void SetUp() override {
    Rng rng(4);
    xs = testing::random_inputs(40, {1, 5, 5}, rng);
    ys = testing::random_labels(40, 3, rng);
  }
  std::vector<nn::Tensor> xs;
  std::vector<std::size_t> ys;
};

TEST_F(IcTraining, ZeroLearningRateLeavesIcsUnchanged) {
  const MultiExitModel m = testing::tiny_model();
  IcTrainConfig cfg;
  cfg.epochs = 2;
  cfg.lr = 0.0;
  Rng rng(5);
  EXPECT_TRUE(train_ics(m, xs, ys, cfg, rng) == m);
}

TEST_F(IcTraining, OnlyIcParametersChange) {
  const MultiExitModel m = testing::tiny_model();
  IcTrainConfig cfg;
  cfg.epochs = 3;
  cfg.lr = 0.05;
  Rng rng(6);
  const MultiExitModel t = train_ics(m, xs, ys, cfg, rng);
  EXPECT_EQ(io::backbone_section_bytes(t), io::backbone_section_bytes(m));
  bool changed = false;
  for (std::size_t id = m.backbone_param_layers(); id < m.param_layer_count(); ++id)
    changed = changed || !(t.codes(id) == m.codes(id));
  EXPECT_TRUE(changed);
}

TEST_F(IcTraining, RejectsZeroEpochs) {
  IcTrainConfig cfg;
  cfg.epochs = 0;
  Rng rng(7);
  EXPECT_THROW(train_ics(testing::tiny_model(), xs, ys, cfg, rng), std::invalid_argument);
}

TEST(IcPredict, UniformLogitsGiveInverseClassCount) {
  const Prediction p = predict_from_logits(nn::Tensor({10}));
  EXPECT_NEAR(p.confidence, 0.1, 1e-15);
}

TEST(IcPredict, FinalExitEqualsBackbone) {
  const MultiExitModel m = testing::tiny_model();
  Rng rng(8);
  for (int i = 0; i < 10; ++i) {
    const auto x = testing::random_tensor({1, 5, 5}, rng);
    const auto z = nn::forward(m.backbone(), x).logits;
    const Prediction p = ic_predict(m, m.final_exit(), x);
    EXPECT_EQ(p.label, nn::argmax(z.values()));
    EXPECT_EQ(p.confidence, predict_from_logits(z).confidence);
  }
}

TEST(IcPredict, DeterministicOnRepeat) {
  const MultiExitModel m = testing::tiny_model();
  Rng rng(9);
  const auto x = testing::random_tensor({1, 5, 5}, rng);
  for (std::size_t e = 0; e < m.exit_count(); ++e) {
    const Prediction a = ic_predict(m, e, x), b = ic_predict(m, e, x);
    EXPECT_EQ(a.label, b.label);
    EXPECT_EQ(a.confidence, b.confidence);
  }
  EXPECT_THROW(ic_predict(m, m.exit_count(), x), std::out_of_range);
}

TEST(IcPredict, IcLogitsComposeFeaturesAndHead) {
  const MultiExitModel m = testing::tiny_model();
  Rng rng(10);
  const auto x = testing::random_tensor({1, 5, 5}, rng);
  const auto logits = all_exit_logits(m, x);
  ASSERT_EQ(logits.size(), m.exit_count());
  const auto trace = nn::forward_trace(m.backbone(), x);
  for (std::size_t i = 0; i < m.ics().size(); ++i)
    EXPECT_EQ(logits[i], nn::forward(m.ic(i).head, trace.after(m.ic(i).position)).logits);
}

TEST(ModelFlip, TogglesStoredBitAndWeight) {
  MultiExitModel m = testing::tiny_model();
  const quant::BitLocation loc{m.ic_dense_layer_id(0), 3, 5};
  const MultiExitModel orig = m;
  const double delta = quant::bit_toggle_delta(m.codes(loc.layer_id), loc);
  const double w0 = m.param_layer(loc.layer_id).weight[3];
  m.flip(loc);
  EXPECT_EQ(m.param_layer(loc.layer_id).weight[3] - w0, delta);
  EXPECT_EQ(quant::hamming_distance(m.codes(loc.layer_id), orig.codes(loc.layer_id)), 1u);
  m.flip(loc);
  EXPECT_TRUE(m == orig);
}

}  // namespace
}  // namespace aegis
