#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aegis/desdn.hpp"
#include "aegis/multiexit.hpp"

namespace aegis {

/// 100 * (#predictions == target) / #predictions. Callers pass predictions
/// for inputs whose ground truth differs from the target.
double compute_asr(std::span<const std::size_t> predictions, std::size_t target);

/// Inference mode of a deployed model.
enum class Defense {
  base,   // final exit only
  sdn,    // every exit is a candidate, fixed threshold
  desdn,  // randomized exits
  aegis,  // randomized exits with robustly trained ICs
};

std::string_view to_string(Defense d);
/// Throws std::invalid_argument on unknown names.
Defense defense_from_string(std::string_view name);

/// One query under a defense. Query index k selects the exit randomness of
/// dynamic defenses.
ExitTrace defended_predict(const MultiExitModel& model, Defense d,
                           const nn::Tensor& x, const ExitPolicy& policy,
                           std::uint64_t query_index);

/// Repetitions that matter: 1 for deterministic defenses.
std::size_t effective_reps(Defense d, std::size_t reps);

/// Accuracy (percent) averaged over repetitions; repetition r of sample k
/// uses query index r * n + k.
double defended_accuracy(const MultiExitModel& model, Defense d,
                         std::span<const nn::Tensor> inputs,
                         std::span<const std::size_t> labels,
                         const ExitPolicy& policy, std::size_t reps);

/// ASR (percent) over inputs whose label differs from `target`, averaged
/// over repetitions as above.
double defended_asr(const MultiExitModel& model, Defense d,
                    std::span<const nn::Tensor> inputs,
                    std::span<const std::size_t> labels, std::size_t target,
                    const ExitPolicy& policy, std::size_t reps);

struct ExitUsage {
  std::vector<double> histogram;  // share per exit
  double mean_layers = 0.0;       // backbone layers evaluated per query
};

ExitUsage defended_exit_usage(const MultiExitModel& model, Defense d,
                              std::span<const nn::Tensor> inputs,
                              const ExitPolicy& policy, std::size_t reps);

}  // namespace aegis
