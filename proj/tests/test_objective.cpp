#include <gtest/gtest.h>

#include "laff/errors.hpp"
#include "laff/objective.hpp"
#include "test_util.hpp"

using namespace laff;
using laff::testing::random_matrix;
using laff::testing::tiny_config;

namespace {
const std::vector<std::size_t> kFirst{0};
}

TEST(Triplet, MarginSatisfiedGivesZero) {
  Matrix s{{0.9, 0.5, 0.7}};
  TripletResult r = triplet_hard_loss(s, kFirst, 0.2);
  EXPECT_EQ(r.hardest[0], 2u);
  EXPECT_EQ(r.loss, 0.0);
  for (double g : r.grad.values()) EXPECT_EQ(g, 0.0);
}

TEST(Triplet, HandViolation) {
  Matrix s{{0.6, 0.5, 0.55}};
  TripletResult r = triplet_hard_loss(s, kFirst, 0.2);
  EXPECT_EQ(r.hardest[0], 2u);
  EXPECT_NEAR(r.loss, 0.15, 1e-15);
  EXPECT_EQ(r.grad(0, 0), -1.0);
  EXPECT_EQ(r.grad(0, 2), 1.0);
  EXPECT_EQ(r.grad(0, 1), 0.0);
}

TEST(Triplet, MeanOverQueriesAndGradientScale) {
  Matrix s{{0.6, 0.55}, {0.1, 0.9}};
  std::vector<std::size_t> pos{0, 1};
  TripletResult r = triplet_hard_loss(s, pos, 0.2);
  EXPECT_NEAR(r.per_query[0], 0.15, 1e-15);
  EXPECT_EQ(r.per_query[1], 0.0);
  EXPECT_NEAR(r.loss, 0.075, 1e-15);
  EXPECT_EQ(r.grad(0, 0), -0.5);
  EXPECT_EQ(r.grad(0, 1), 0.5);
}

TEST(Triplet, TiesPickLowestColumn) {
  Matrix s{{0.3, 0.7, 0.2, 0.7}};
  EXPECT_EQ(triplet_hard_loss(s, std::vector<std::size_t>{2}, 0.2).hardest[0], 1u);
}

TEST(Triplet, SameVideoColumnsAreNotNegatives) {
  Matrix s{{0.5, 0.9, 0.45}};
  std::vector<std::size_t> groups{4, 4, 7};
  TripletResult r = triplet_hard_loss(s, kFirst, 0.2, groups);
  EXPECT_EQ(r.hardest[0], 2u);
  EXPECT_NEAR(r.loss, 0.15, 1e-15);
}

TEST(Triplet, Errors) {
  EXPECT_THROW(triplet_hard_loss(Matrix{{0.5}}, kFirst, 0.2), DegenerateInputError);
  EXPECT_THROW(triplet_hard_loss(Matrix{{0.5, 0.1}}, kFirst, 0.0), ConfigError);
  EXPECT_THROW(triplet_hard_loss(Matrix{{0.5, 0.1}}, kFirst, -1.0), ConfigError);
  EXPECT_THROW(triplet_hard_loss(Matrix{{0.5, 0.1}}, std::vector<std::size_t>{3}, 0.2),
               DimensionError);
  std::vector<std::size_t> one_group{1, 1};
  EXPECT_THROW(triplet_hard_loss(Matrix{{0.5, 0.1}}, kFirst, 0.2, one_group), DegenerateInputError);
}

TEST(Triplet, NonNegativeAndZeroIffAllSeparated) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix s = random_matrix(4, 4, rng, 0.5);
    std::vector<std::size_t> pos{0, 1, 2, 3};
    TripletResult r = triplet_hard_loss(s, pos, 0.2);
    EXPECT_GE(r.loss, 0.0);
    bool separated = true;
    for (std::size_t q = 0; q < 4; ++q)
      for (std::size_t j = 0; j < 4; ++j)
        if (j != q && s(q, j) + 0.2 > s(q, q)) separated = false;
    EXPECT_EQ(r.loss == 0.0, separated);
  }
}

TEST(Triplet, ScaleInvariantMining) {
  Rng rng(2);
  Matrix s = random_matrix(5, 5, rng);
  std::vector<std::size_t> pos{0, 1, 2, 3, 4};
  TripletResult a = triplet_hard_loss(s, pos, 0.3);
  Matrix scaled = s;
  for (double& v : scaled.values()) v *= 4.0;
  TripletResult b = triplet_hard_loss(scaled, pos, 1.2);
  EXPECT_EQ(a.hardest, b.hardest);
  for (std::size_t q = 0; q < 5; ++q) EXPECT_EQ(a.per_query[q] > 0.0, b.per_query[q] > 0.0);
}

TEST(Combined, SingleSpaceEqualsSingleLoss) {
  Rng rng(3);
  std::vector<Matrix> s{random_matrix(4, 4, rng)};
  std::vector<std::size_t> pos{0, 1, 2, 3};
  LossResult c = combined_loss(s, pos, 0.2);
  LossResult m = single_loss(s, pos, 0.2);
  EXPECT_EQ(c.report.combined, m.report.combined);
  EXPECT_EQ(c.grads[0], m.grads[0]);
  EXPECT_EQ(c.report.combined, triplet_hard_loss(s[0], pos, 0.2).loss);
}

TEST(Combined, DuplicatedSpacesDoubleTheLoss) {
  Rng rng(4);
  Matrix one = random_matrix(4, 4, rng);
  std::vector<Matrix> s{one, one};
  std::vector<std::size_t> pos{0, 1, 2, 3};
  EXPECT_EQ(combined_loss(s, pos, 0.2).report.combined, 2.0 * single_loss(s, pos, 0.2).report.combined);
}

TEST(Combined, DivergesFromSingleWhenHardestDiffers) {
  // Space 1 mines column 1, space 2 mines column 2; the mean ties and picks column 1.
  std::vector<Matrix> s{Matrix{{0.5, 0.6, 0.1}}, Matrix{{0.5, 0.1, 0.6}}};
  LossResult c = combined_loss(s, kFirst, 0.2);
  LossResult m = single_loss(s, kFirst, 0.2);
  EXPECT_NEAR(c.report.combined, 0.6, 1e-15);
  EXPECT_NEAR(m.report.combined, 0.05, 1e-15);
  EXPECT_NE(c.report.hardest[0], c.report.hardest[1]);
  EXPECT_EQ(m.report.hardest[0][0], 1u);
  // Single-mode gradient is spread evenly over spaces.
  EXPECT_EQ(m.grads[0], m.grads[1]);
  EXPECT_EQ(m.grads[0](0, 1), 0.5);
}

TEST(Combined, NoSpacesIsAnError) {
  std::vector<Matrix> none;
  EXPECT_THROW(combined_loss(none, kFirst, 0.2), DimensionError);
  EXPECT_EQ(parse_loss_mode("single"), LossMode::single);
  EXPECT_THROW(parse_loss_mode("both"), ConfigError);
}

class BatchGradient : public ::testing::TestWithParam<LossMode> {};

TEST_P(BatchGradient, FullLaffPairMatchesFiniteDifferences) {
  ModelConfig c = tiny_config(BlockKind::laff, 2, 8);
  FusionModel model(c, 5);
  Rng rng(6);
  for (Parameter* p : model.parameters())
    if (p->name.find("attention") != std::string::npos) p->value = random_matrix(1, p->value.cols(), rng);
  PairedBatch batch = laff::testing::random_pairs(c, 4, rng);
  // Margin 1 keeps every triplet active, away from the hinge kink.
  ScalarObjective f = laff::testing::batch_objective(model, batch, GetParam(), 1.0);
  std::vector<Parameter*> params = model.parameters();
  GradCheckReport r = grad_check(f, params);
  EXPECT_LE(r.max_relative_error, 1e-4) << r.worst_parameter;
}

INSTANTIATE_TEST_SUITE_P(Modes, BatchGradient, ::testing::Values(LossMode::combined, LossMode::single),
                         [](const auto& info) { return to_string(info.param); });

TEST(RunBatch, DeterministicReport) {
  ModelConfig c = tiny_config(BlockKind::laff, 2, 8);
  FusionModel model(c, 7);
  Rng rng(8);
  PairedBatch batch = laff::testing::random_pairs(c, 5, rng);
  BatchOutcome a = run_batch(model, batch, 0.2, LossMode::combined, Mode::eval, nullptr, false);
  BatchOutcome b = run_batch(model, batch, 0.2, LossMode::combined, Mode::eval, nullptr, false);
  EXPECT_EQ(a.report.combined, b.report.combined);
  EXPECT_EQ(a.report.space_losses, b.report.space_losses);
  EXPECT_EQ(a.report.hardest, b.report.hardest);
  ASSERT_EQ(a.video_weights.size(), 2u);
  EXPECT_EQ(a.video_weights[0].cols(), 2u);
}

TEST(RunBatch, GradientsAccumulate) {
  ModelConfig c = tiny_config(BlockKind::concat, 1, 4);
  FusionModel model(c, 9);
  Rng rng(10);
  PairedBatch batch = laff::testing::random_pairs(c, 4, rng);
  model.zero_grad();
  run_batch(model, batch, 1.0, LossMode::combined, Mode::eval, nullptr, true);
  std::vector<double> once;
  for (const Parameter* p : model.parameters())
    for (double g : p->grad.values()) once.push_back(g);
  run_batch(model, batch, 1.0, LossMode::combined, Mode::eval, nullptr, true);
  std::size_t i = 0;
  for (const Parameter* p : model.parameters())
    for (double g : p->grad.values()) EXPECT_NEAR(g, 2.0 * once[i++], 1e-12);
}
