#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>

#include "aegis/attacks.hpp"
#include "aegis/talbf_solver.hpp"
#include "unit/support.hpp"

namespace aegis::attacks {
namespace {

int decode(int pattern, int bits) {
  pattern &= (1 << bits) - 1;
  return pattern & (1 << (bits - 1)) ? pattern - (1 << bits) : pattern;
}

// Direct evaluation from the row weights, independent of the solver.
double oracle_objective(const TalbfProblem& p, std::span<const TalbfVar> toggles) {
  double total = 0.0;
  for (std::size_t hi = 0; hi < p.heads.size(); ++hi) {
    const TalbfHead& h = p.heads[hi];
    const std::size_t n = h.features();
    std::vector<double> w[2], d[2];
    for (int r = 0; r < 2; ++r) {
      const auto& codes = r == 0 ? h.codes_source : h.codes_target;
      std::vector<int> pat(n);
      for (std::size_t j = 0; j < n; ++j) pat[j] = static_cast<std::uint8_t>(codes[j]);
      for (const auto& v : toggles)
        if (v.head == hi && v.row == static_cast<std::size_t>(r)) pat[v.feature] ^= 1 << v.bit;
      w[r].resize(n);
      d[r].resize(n);
      for (std::size_t j = 0; j < n; ++j) {
        w[r][j] = h.scale * decode(pat[j], h.bits);
        d[r][j] = w[r][j] - h.scale * decode(static_cast<std::uint8_t>(codes[j]), h.bits);
      }
    }
    double zl = h.bias_source, zt = h.bias_target;
    for (std::size_t j = 0; j < n; ++j) {
      zl += w[0][j] * h.x_features[j];
      zt += w[1][j] * h.x_features[j];
    }
    const double l1 = std::max(0.0, p.margin - (zt - std::max(zl, h.x_other_max))) +
                      std::max(0.0, p.margin - (std::max(zt, h.x_other_max) - zl));
    double quad = 0.0;
    for (int r = 0; r < 2; ++r)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) quad += d[r][i] * h.gram[i * n + j] * d[r][j];
    total += l1 + h.l2_weight * quad / h.l2_norm;
  }
  return total;
}

TalbfProblem two_feature_problem(double l2_weight) {
  TalbfHead h;
  h.layer_id = 0;
  h.source = 0;
  h.target = 1;
  h.bits = 4;
  h.scale = 0.25;
  h.codes_source = {5, -2};
  h.codes_target = {-3, 1};
  h.bias_source = 0.1;
  h.bias_target = -0.2;
  h.x_features = {1.5, 0.8};
  h.x_other_max = -std::numeric_limits<double>::infinity();
  const std::vector<std::vector<double>> aux{{1.0, 0.2}, {0.3, 1.1}, {0.9, 0.9}};
  h.gram = gram_matrix(aux);
  h.l2_norm = 4.0;
  h.l2_weight = l2_weight;
  TalbfProblem p;
  p.heads = {h};
  p.margin = 0.5;
  return p;
}

std::vector<TalbfVar> all_vars(const TalbfProblem& p) {
  std::vector<TalbfVar> vars;
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t j = 0; j < 2; ++j)
      for (unsigned b = 0; b < 4; ++b) vars.push_back({0, r, j, b});
  EXPECT_EQ(vars.size(), 16u);
  (void)p;
  return vars;
}

TEST(GramMatrix, SumOfOuterProducts) {
  const std::vector<std::vector<double>> aux{{1.0, 2.0}, {3.0, -1.0}};
  EXPECT_EQ(gram_matrix(aux), (std::vector<double>{10.0, -1.0, -1.0, 5.0}));
}

TEST(TalbfObjective, MatchesDirectEvaluation) {
  const auto p = two_feature_problem(0.7);
  const auto vars = all_vars(p);
  for (unsigned mask = 0; mask < (1u << 16); mask += 37) {
    std::vector<TalbfVar> s;
    for (std::size_t i = 0; i < 16; ++i)
      if (mask >> i & 1u) s.push_back(vars[i]);
    ASSERT_NEAR(talbf_objective(p, s), oracle_objective(p, s), 1e-9);
  }
}

class Exhaustive : public ::testing::TestWithParam<std::size_t> {};

TEST_P(Exhaustive, SolverReachesOptimumOverSmallSets) {
  const std::size_t k = GetParam();
  for (double l2w : {0.0, 0.3, 2.0}) {
    const auto p = two_feature_problem(l2w);
    const auto vars = all_vars(p);
    double best = std::numeric_limits<double>::infinity();
    for (unsigned mask = 0; mask < (1u << 16); ++mask) {
      if (static_cast<std::size_t>(std::popcount(mask)) > k) continue;
      std::vector<TalbfVar> s;
      for (std::size_t i = 0; i < 16; ++i)
        if (mask >> i & 1u) s.push_back(vars[i]);
      best = std::min(best, oracle_objective(p, s));
    }
    const auto sol = solve_talbf(p, k);
    EXPECT_LE(sol.toggles.size(), k);
    EXPECT_NEAR(sol.loss, oracle_objective(p, sol.toggles), 1e-9);
    EXPECT_LE(sol.loss, best + 1e-6) << "k=" << k << " l2_weight=" << l2w;
    EXPECT_EQ(sol.success, talbf_success(p, sol.toggles));
  }
}

INSTANTIATE_TEST_SUITE_P(Budgets, Exhaustive, ::testing::Values(1, 2, 3, 4));

TEST(TalbfSolver, HugeDriftPenaltyKeepsWeights) {
  const auto p = two_feature_problem(1e12);
  const auto sol = solve_talbf(p, 4);
  EXPECT_TRUE(sol.toggles.empty());
  EXPECT_FALSE(sol.success);
}

TEST(TalbfSolver, SuccessMeansTargetRanksFirst) {
  const auto p = two_feature_problem(0.0);
  const auto sol = solve_talbf(p, 6);
  ASSERT_TRUE(sol.success);
  // With zero drift penalty the hinge terms are driven to zero.
  EXPECT_NEAR(sol.loss, 0.0, 1e-12);
}

TEST(TalbfSolver, RejectsBadHeads) {
  auto p = two_feature_problem(1.0);
  p.heads[0].bits = 1;
  EXPECT_THROW(solve_talbf(p, 2), std::invalid_argument);
  p = two_feature_problem(1.0);
  p.heads[0].l2_norm = 0.0;
  EXPECT_THROW(solve_talbf(p, 2), std::invalid_argument);
}

TEST(TalbfAttack, FlipsOnlySourceAndTargetRowsOfFinalLayer) {
  const MultiExitModel m = testing::tiny_model(41);
  Rng rng(2);
  const auto aux = testing::random_inputs(16, {1, 5, 5}, rng);
  const auto x = testing::random_tensor({1, 5, 5}, rng);
  const std::size_t source = ic_predict(m, m.final_exit(), x).label;
  const std::size_t target = (source + 1) % 3;
  AttackBudget budget;
  budget.n_b_max = 40;
  budget.scope = final_layer_scope(m, false);
  const FlipPlan plan = talbf(m, x, source, target, aux, {}, budget);
  check_plan(plan, budget);
  const std::size_t in = m.param_layer(m.final_layer_id()).weight.shape()[1];
  for (const auto& loc : plan.flips) {
    EXPECT_EQ(loc.layer_id, m.final_layer_id());
    const std::size_t row = loc.flat_index / in;
    EXPECT_TRUE(row == source || row == target);
  }
  if (plan.complete) {
    EXPECT_EQ(ic_predict(apply_plan(m, plan), m.final_exit(), x).label, target);
  }
}

TEST(TalbfAttack, AdaptiveProblemHasOneHeadPerExit) {
  const MultiExitModel m = testing::tiny_model(42);
  Rng rng(3);
  const auto aux = testing::random_inputs(8, {1, 5, 5}, rng);
  const auto x = testing::random_tensor({1, 5, 5}, rng);
  EXPECT_EQ(talbf_problem(m, x, 0, 1, aux, 10.0, 3.0, false).heads.size(), 1u);
  const auto p = talbf_problem(m, x, 0, 1, aux, 10.0, 3.0, true);
  ASSERT_EQ(p.heads.size(), m.exit_count());
  for (const auto& h : p.heads) EXPECT_EQ(h.features(), m.param_layer(h.layer_id).weight.shape()[1]);
}

}  // namespace
}  // namespace aegis::attacks
