#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aegis/multiexit.hpp"
#include "aegis/quant.hpp"
#include "aegis/talbf_solver.hpp"
#include "aegis/trigger.hpp"

namespace aegis::attacks {

/// Bits an attack may spend and the parameter layers it may touch.
struct AttackBudget {
  std::size_t n_b_max = 50;
  std::vector<std::size_t> scope;  // flat parameter layer ids
  bool include_ics = false;        // adaptive loss over every exit

  bool allows(std::size_t layer_id) const;
  /// Throws std::invalid_argument on an empty scope.
  void validate() const;
};

/// Final dense layer of the backbone, plus each IC's dense layer when
/// `include_ics`.
std::vector<std::size_t> final_layer_scope(const MultiExitModel& model,
                                           bool include_ics);
/// Every backbone parameter layer, plus all IC layers when `include_ics`.
std::vector<std::size_t> backbone_scope(const MultiExitModel& model,
                                        bool include_ics);
/// The first `layers` backbone parameter layers.
std::vector<std::size_t> shallow_scope(const MultiExitModel& model,
                                       std::size_t layers = 3);

struct FlipPlan {
  std::string attack;
  /// Net toggles in the order they were chosen; no duplicates.
  std::vector<quant::BitLocation> flips;
  std::optional<TriggerSpec> trigger;
  double achieved_loss = 0.0;
  /// False when the budget ran out before the attack goal was met.
  bool complete = true;
};

/// Throws std::logic_error when the plan repeats a bit, exceeds n_b_max or
/// leaves the scope.
void check_plan(const FlipPlan& plan, const AttackBudget& budget);

/// Copy of `model` with every planned bit toggled.
MultiExitModel apply_plan(const MultiExitModel& model, const FlipPlan& plan);

/// Minibatch SGD on a trigger patch. The loss pulls the activations at
/// `neurons` of backbone layer `layer` toward `goal`.
struct TriggerTraining {
  std::size_t layer = 0;
  std::vector<std::size_t> neurons;  // flat indices into that activation
  double goal = 10.0;
  double lr = 0.5;
  std::size_t iters = 200;
  std::size_t batch = 32;
};
/// Returns the mean activation loss of the last minibatch.
double train_trigger(const MultiExitModel& model,
                     std::span<const nn::Tensor> inputs, TriggerSpec& trigger,
                     const TriggerTraining& cfg, Rng& rng);

struct TbtConfig {
  std::size_t target = 0;
  std::size_t w_b = 10;
  double tap = 0.0976;
  double trigger_lr = 0.5;
  std::size_t trigger_iters = 200;
  std::size_t trigger_batch = 32;
  double activation_goal = 10.0;
  std::size_t weight_steps = 200;
  double weight_lr = 2.0;  // Adam step in code units
  std::size_t samples = 256;
  std::uint64_t seed = 1;
};

/// Neurons feeding the final dense layer of exit `exit` with the largest
/// |dCE(., target)/dW[target][j]| summed over `inputs`, ascending by index.
std::vector<std::size_t> tbt_select_neurons(const MultiExitModel& model,
                                            std::size_t exit,
                                            std::span<const nn::Tensor> inputs,
                                            std::size_t target,
                                            std::size_t w_b);

/// Targeted backdoor through the final dense layer(s): selects w_b neurons,
/// trains a trigger that excites them, optimizes the target-class weights of
/// those neurons and realizes the new codes as bit flips.
FlipPlan tbt(const MultiExitModel& model, std::span<const nn::Tensor> inputs,
             std::span<const std::size_t> labels, const TbtConfig& cfg,
             const AttackBudget& budget);

/// Per-exit TBT loss of a model over clean samples and their triggered
/// copies: CE(exit(x), y) + CE(exit(x + trigger), t), means over samples.
std::vector<double> tbt_exit_losses(const MultiExitModel& model,
                                    std::span<const nn::Tensor> inputs,
                                    std::span<const std::size_t> labels,
                                    const TriggerSpec& trigger);

struct TalbfConfig {
  std::size_t aux_n = 128;
  std::size_t k_init = 5;
  std::size_t k_searches = 6;
  double lambda_init = 100.0;
  std::size_t lambda_searches = 8;
  double margin = 3.0;
  TalbfSolverConfig solver;
};

/// The binary program attacking sample x (true class `source`) toward
/// `target`: the final head weighted by `lambda`, plus every IC head with
/// unit weight when `include_ics`.
TalbfProblem talbf_problem(const MultiExitModel& model, const nn::Tensor& x,
                           std::size_t source, std::size_t target,
                           std::span<const nn::Tensor> aux, double lambda,
                           double margin, bool include_ics);

/// Sample-wise attack on x over the source and target rows of the final
/// dense layer(s). Searches k upward from k_init (doubling, capped at
/// n_b_max) inside a search over lambda downward from lambda_init
/// (halving); returns the first plan that flips x to the target.
FlipPlan talbf(const MultiExitModel& model, const nn::Tensor& x,
               std::size_t source, std::size_t target,
               std::span<const nn::Tensor> aux, const TalbfConfig& cfg,
               const AttackBudget& budget);

struct ProflipConfig {
  std::size_t target = 0;
  std::size_t k_points = 20;
  double tap = 0.0976;
  std::size_t n_salient = 10;
  double trigger_lr = 0.5;
  std::size_t trigger_iters = 200;
  std::size_t trigger_batch = 32;
  double activation_goal = 10.0;  // also caps each salient activation
  double salient_weight = 1.0;
  std::size_t candidates = 10;  // parameters examined per iteration
  std::size_t samples = 64;
  std::size_t max_iters = 100;
  std::size_t plateau_window = 3;
  double plateau_gain = 1.0;  // ASR points
  std::uint64_t seed = 1;
};

/// Backbone layer whose activations hold the salient neurons: the deepest
/// exit point.
std::size_t proflip_saliency_layer(const MultiExitModel& model);

/// Flat indices of the n activations at the saliency layer with the largest
/// summed forward derivative of the target logit (final exit, plus every IC
/// when include_ics).
std::vector<std::size_t> proflip_salient_neurons(
    const MultiExitModel& model, std::span<const nn::Tensor> inputs,
    std::size_t target, std::size_t n, bool include_ics);

/// ProFlip objective on triggered samples: mean CE(final, t) (+ mean
/// CE(IC_i, t) for every IC when include_ics) - salient_weight * mean sum of
/// salient activations, each capped at salient_cap.
double proflip_loss(const MultiExitModel& model,
                    std::span<const nn::Tensor> triggered, std::size_t target,
                    std::span<const std::size_t> salient,
                    double salient_weight, double salient_cap,
                    bool include_ics);

/// Iterative backdoor: salient neurons, a trigger exciting them, then per
/// iteration the best value among k_points evenly spaced codes for the most
/// sensitive parameters, encoded as flips.
FlipPlan proflip(const MultiExitModel& model,
                 std::span<const nn::Tensor> inputs,
                 std::span<const std::size_t> labels, const ProflipConfig& cfg,
                 const AttackBudget& budget);

/// ProFlip with the adaptive loss restricted to the first three backbone
/// parameter layers.
FlipPlan shallow_proflip(const MultiExitModel& model,
                         std::span<const nn::Tensor> inputs,
                         std::span<const std::size_t> labels,
                         const ProflipConfig& cfg, std::size_t n_b_max);

struct UntargetedConfig {
  std::size_t batch = 128;
  /// Stop once accuracy (percent) is at or below this; negative selects
  /// 100 / classes.
  double target_acc = -1.0;
};

/// Accuracy in percent of a candidate model under the defense being
/// attacked.
using AccuracyFn = std::function<double(const MultiExitModel&)>;

/// Progressive bit search: flips the single most loss-increasing unflipped
/// bit per step (CE of the final exit, plus every IC when include_ics) until
/// `accuracy` reports the target or the budget is spent.
FlipPlan untargeted_bfa(const MultiExitModel& model,
                        std::span<const nn::Tensor> inputs,
                        std::span<const std::size_t> labels,
                        const UntargetedConfig& cfg,
                        const AttackBudget& budget, const AccuracyFn& accuracy);

}  // namespace aegis::attacks
