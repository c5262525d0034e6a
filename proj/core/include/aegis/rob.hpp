#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "aegis/multiexit.hpp"
#include "aegis/quant.hpp"
#include "aegis/rng.hpp"

namespace aegis::rob {

struct VpaConfig {
  std::size_t k_per_iter = 1;
  std::size_t n_vpa = 25;
  std::size_t batch = 128;

  void validate() const;
};

/// Surrogate of the deployed model with vulnerable backbone bits toggled.
struct FlippedModel {
  MultiExitModel model;
  std::vector<quant::BitLocation> flipped;  // net toggles, sorted
};

/// Vulnerable-bit search on the backbone. Each iteration recomputes the
/// gradient of the inference loss CE(F_final(x), l) on the current surrogate,
/// ranks every backbone bit by predicted loss increase and toggles the top
/// k_per_iter bits whose prediction is positive. Stops early when no bit is
/// predicted to raise the loss. The input model is not modified.
FlippedModel vpa(const MultiExitModel& model,
                 std::span<const nn::Tensor> inputs,
                 std::span<const std::size_t> labels, const VpaConfig& cfg,
                 Rng& rng);

/// The surrogate obtained by toggling `flips` on a copy of `original`.
MultiExitModel reconstruct(const MultiExitModel& original,
                           std::span<const quant::BitLocation> flips);

/// Trains the ICs of `model` on features of both the clean backbone and the
/// surrogate's backbone; a fraction `mix` of minibatches come from the
/// surrogate, interleaved. mix == 0 reproduces train_ics exactly. The
/// backbone and final layer are untouched.
MultiExitModel rob_train_ics(MultiExitModel model, const FlippedModel& flipped,
                             std::span<const nn::Tensor> inputs,
                             std::span<const std::size_t> labels,
                             const IcTrainConfig& cfg, double mix, Rng& rng);

/// Inference loss of the final exit, mean over the set.
double inference_loss(const MultiExitModel& model,
                      std::span<const nn::Tensor> inputs,
                      std::span<const std::size_t> labels);

}  // namespace aegis::rob
