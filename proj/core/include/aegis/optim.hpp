#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "aegis/loss.hpp"
#include "aegis/network.hpp"
#include "aegis/rng.hpp"

namespace aegis::nn {

/// p <- p - lr * g, elementwise.
void sgd_step(std::span<double> params, std::span<const double> grads,
              double lr);
void sgd_step(Network& net, const ParamGrads& grads, double lr);

/// Heavy-ball momentum: v <- mu * v + g; p <- p - lr * v.
class MomentumSgd {
 public:
  MomentumSgd(const Network& net, double momentum);
  void step(Network& net, const ParamGrads& grads, double lr);

 private:
  double momentum_;
  ParamGrads velocity_;
};

/// lr0 * (1 + cos(pi * step / total)) / 2
double cosine_lr(double lr0, std::size_t step, std::size_t total);

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch = 32;
  double lr = 0.05;
  double momentum = 0.9;
  bool cosine = true;
};

/// Minibatch training with cross-entropy. Batch order comes from a seeded
/// shuffle per epoch. Returns the mean loss of each epoch.
std::vector<double> fit(Network& net, std::span<const Tensor> inputs,
                        std::span<const std::size_t> labels,
                        const TrainConfig& cfg, Rng& rng);

}  // namespace aegis::nn
