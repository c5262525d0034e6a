#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace aegis::attacks {

/// The linear classifier of one exit, restricted to the rows of the source
/// class l and the target class t. Only these two rows may be flipped.
///
/// Loss of a head, with z the logits of the attacked sample x and
/// dz_r(a) the change of row r's logit on auxiliary sample a:
///
///   L1 = max(0, m - (z_t - max_{c != t} z_c))
///      + max(0, m - (max_{c != l} z_c - z_l))
///   L2 = sum_a (dz_l(a)^2 + dz_t(a)^2) / l2_norm
///   loss = L1 + l2_weight * L2
///
/// talbf_problem sets l2_norm = sum_a (z_l(a)^2 + z_t(a)^2), making L2 the
/// relative drift of the two rows' logits.
struct TalbfHead {
  std::size_t layer_id = 0;
  std::size_t source = 0;  // class l
  std::size_t target = 0;  // class t
  int bits = 8;
  double scale = 1.0;
  std::vector<std::int8_t> codes_source;  // row l, original
  std::vector<std::int8_t> codes_target;  // row t, original
  double bias_source = 0.0;
  double bias_target = 0.0;
  std::vector<double> x_features;
  /// Largest logit of x over classes other than l and t (-inf if none).
  double x_other_max = 0.0;
  /// sum_a phi(a) phi(a)^T, row-major features x features.
  std::vector<double> gram;
  double l2_norm = 1.0;
  double l2_weight = 1.0;

  std::size_t features() const { return x_features.size(); }
};

/// Builds the Gram matrix of auxiliary features.
std::vector<double> gram_matrix(std::span<const std::vector<double>> aux);

struct TalbfVar {
  std::size_t head = 0;
  std::size_t row = 0;  // 0 = source row, 1 = target row
  std::size_t feature = 0;
  unsigned bit = 0;

  friend auto operator<=>(const TalbfVar&, const TalbfVar&) = default;
};

struct TalbfProblem {
  std::vector<TalbfHead> heads;
  double margin = 3.0;
};

struct TalbfSolverConfig {
  std::size_t relax_iters = 150;
  double relax_step = 0.1;
  /// Pair moves are tried when |S| * |vars| does not exceed this.
  std::size_t max_swap_evals = 200000;
  /// Every toggle set of size <= k is scored when there are at most this
  /// many.
  std::size_t max_exhaustive_evals = 100000;
};

struct TalbfSolution {
  std::vector<TalbfVar> toggles;  // sorted
  double loss = 0.0;
  /// Every head classifies x as its target after the toggles.
  bool success = false;
};

/// Objective of a toggle set, evaluated from scratch.
double talbf_objective(const TalbfProblem& p, std::span<const TalbfVar> toggles);
/// True when every head ranks the target class first after the toggles.
bool talbf_success(const TalbfProblem& p, std::span<const TalbfVar> toggles);

/// Minimizes the objective over toggle sets of size <= k. Small instances
/// are enumerated exactly. Otherwise: projected gradient descent on the box
/// relaxation intersected with the l1 ball of radius k around the stored
/// bits, rounding to the k most-moved bits, then best-improvement local
/// search with add, remove and swap moves. The search also starts from the
/// empty set and keeps the better result.
TalbfSolution solve_talbf(const TalbfProblem& p, std::size_t k,
                          const TalbfSolverConfig& cfg = {});

}  // namespace aegis::attacks
