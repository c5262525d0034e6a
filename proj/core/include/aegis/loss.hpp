#pragma once

#include <cstddef>
#include <functional>
#include <span>

#include "aegis/network.hpp"

namespace aegis::nn {

struct LossValue {
  double value = 0.0;
  Tensor grad;  // dLoss/dlogits
};

/// Loss over the logits of batch element `index`.
using LossFn = std::function<LossValue(const Tensor& logits, std::size_t index)>;

Tensor softmax(const Tensor& logits);
double log_sum_exp(std::span<const double> v);

/// -log softmax(logits)[label].
double cross_entropy(const Tensor& logits, std::size_t label);
LossValue cross_entropy_loss(const Tensor& logits, std::size_t label);

/// 0.5 * ||logits - target||^2.
LossValue squared_error_loss(const Tensor& logits, const Tensor& target);

/// Cross-entropy against labels[index].
LossFn cross_entropy_fn(std::span<const std::size_t> labels);

struct GradResult {
  double loss = 0.0;  // mean over the batch
  ParamGrads grads;   // mean over the batch
};

/// Mean loss and mean parameter gradients over a nonempty batch.
GradResult grad_params(const Network& net, std::span<const Tensor> inputs,
                       const LossFn& loss);

/// dLoss/dx for a single sample.
Tensor grad_input(const Network& net, const Tensor& x, const LossFn& loss);

}  // namespace aegis::nn
