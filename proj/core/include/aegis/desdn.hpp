#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "aegis/multiexit.hpp"
#include "aegis/rng.hpp"

namespace aegis {

/// Randomized early exit: per query sample q exits uniformly, leave at the
/// shallowest sampled exit whose confidence exceeds tau, else at the deepest
/// sampled exit.
struct ExitPolicy {
  double tau = 0.95;
  std::size_t q = 3;
  std::uint64_t rng_seed = Rng::kDefaultSeed;
  /// Optional per-exit thresholds; overrides tau when nonempty.
  std::vector<double> per_exit_tau;

  double threshold(std::size_t exit) const {
    return per_exit_tau.empty() ? tau : per_exit_tau.at(exit);
  }
  /// Throws std::invalid_argument when tau or q are out of range.
  void validate(std::size_t total_exits) const;
};

struct ExitTrace {
  std::vector<std::size_t> candidates;  // sorted by depth
  std::size_t chosen = 0;
  double confidence = 0.0;
  std::size_t label = 0;
  // evaluation counters
  std::size_t backbone_layers_evaluated = 0;
  std::size_t ics_evaluated = 0;
};

/// Uniform q-subset of {0, ..., total_exits - 1}, sorted ascending.
std::vector<std::size_t> sample_candidates(Rng& rng, std::size_t q,
                                           std::size_t total_exits);

/// Per-query generator: Rng(policy.rng_seed).split(query_index).
Rng query_rng(const ExitPolicy& policy, std::uint64_t query_index);

/// Early exit restricted to `candidates`; layers past the chosen exit are
/// never evaluated.
ExitTrace exit_among(const MultiExitModel& model, const nn::Tensor& x,
                     std::span<const std::size_t> candidates,
                     std::span<const double> thresholds);

ExitTrace dynamic_infer(const MultiExitModel& model, const nn::Tensor& x,
                        const ExitPolicy& policy, Rng& rng);

/// Deterministic SDN baseline: every exit is a candidate.
ExitTrace static_infer(const MultiExitModel& model, const nn::Tensor& x,
                       double tau);

/// Share of queries leaving through each exit, over `trials` passes of the
/// dataset. Query k of trial r uses query_rng(policy, r * n + k).
std::vector<double> exit_histogram(const MultiExitModel& model,
                                   std::span<const nn::Tensor> inputs,
                                   const ExitPolicy& policy,
                                   std::size_t trials = 1);

std::vector<double> static_exit_histogram(const MultiExitModel& model,
                                          std::span<const nn::Tensor> inputs,
                                          double tau);

struct PolicyScore {
  double tau = 0.0;
  std::size_t q = 0;
  double accuracy = 0.0;   // percent
  double max_share = 0.0;  // largest exit share
  double mean_layers = 0.0;
};

struct TuneResult {
  ExitPolicy policy;
  std::vector<PolicyScore> grid;
};

/// Grid search on clean data for near-uniform exits with bounded accuracy
/// loss: among settings whose accuracy is within `max_acc_drop` points of
/// the final exit's, pick the smallest max exit share (ties: higher
/// accuracy, then larger q, then smaller tau).
TuneResult tune_policy(const MultiExitModel& model,
                       std::span<const nn::Tensor> inputs,
                       std::span<const std::size_t> labels,
                       std::span<const double> taus,
                       std::span<const std::size_t> qs, double max_acc_drop,
                       std::uint64_t seed, std::size_t trials = 1);

}  // namespace aegis
