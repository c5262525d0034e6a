#include "aegis/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace aegis::nn {

void sgd_step(std::span<double> params, std::span<const double> grads,
              double lr) {
  if (params.size() != grads.size())
    throw std::invalid_argument("sgd_step: size mismatch");
  if (!(lr > 0.0)) throw std::invalid_argument("sgd_step: lr must be positive");
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
}

void sgd_step(Network& net, const ParamGrads& grads, double lr) {
  for (std::size_t i = 0; i < net.size(); ++i) {
    auto& l = net.layer(i);
    if (!l.spec.has_params()) continue;
    sgd_step(l.weight.values(), grads.weight[i].values(), lr);
    sgd_step(l.bias.values(), grads.bias[i].values(), lr);
  }
}

MomentumSgd::MomentumSgd(const Network& net, double momentum)
    : momentum_(momentum), velocity_(net) {}

void MomentumSgd::step(Network& net, const ParamGrads& grads, double lr) {
  auto update = [&](Tensor& p, Tensor& v, const Tensor& g) {
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = momentum_ * v[k] + g[k];
      p[k] -= lr * v[k];
    }
  };
  for (std::size_t i = 0; i < net.size(); ++i) {
    auto& l = net.layer(i);
    if (!l.spec.has_params()) continue;
    update(l.weight, velocity_.weight[i], grads.weight[i]);
    update(l.bias, velocity_.bias[i], grads.bias[i]);
  }
}

double cosine_lr(double lr0, std::size_t step, std::size_t total) {
  if (total == 0) return lr0;
  return lr0 * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                         static_cast<double>(total)));
}

std::vector<double> fit(Network& net, std::span<const Tensor> inputs,
                        std::span<const std::size_t> labels,
                        const TrainConfig& cfg, Rng& rng) {
  if (inputs.size() != labels.size() || inputs.empty())
    throw std::invalid_argument("fit: inputs and labels must match");
  MomentumSgd opt(net, cfg.momentum);
  const std::size_t n = inputs.size();
  const std::size_t steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
  const std::size_t total = steps_per_epoch * cfg.epochs;
  std::size_t step = 0;
  std::vector<double> history;

  std::vector<Tensor> bx;
  std::vector<std::size_t> by;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto order = shuffled_indices(n, rng);
    double epoch_loss = 0.0;
    for (std::size_t s = 0; s < n; s += cfg.batch) {
      bx.clear();
      by.clear();
      for (std::size_t k = s; k < std::min(n, s + cfg.batch); ++k) {
        bx.push_back(inputs[order[k]]);
        by.push_back(labels[order[k]]);
      }
      auto r = grad_params(net, bx, cross_entropy_fn(by));
      epoch_loss += r.loss * static_cast<double>(bx.size());
      const double lr = cfg.cosine ? cosine_lr(cfg.lr, step, total) : cfg.lr;
      if (lr > 0.0) opt.step(net, r.grads, lr);
      ++step;
    }
    history.push_back(epoch_loss / static_cast<double>(n));
  }
  return history;
}

}  // namespace aegis::nn
