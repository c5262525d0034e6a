#include "aegis/loss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace aegis::nn {

double log_sum_exp(std::span<const double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - m);
  return m + std::log(acc);
}

Tensor softmax(const Tensor& logits) {
  const auto v = logits.values();
  const double m = *std::max_element(v.begin(), v.end());
  Tensor p(logits.shape());
  double z = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) z += (p[i] = std::exp(v[i] - m));
  p *= 1.0 / z;
  return p;
}

double cross_entropy(const Tensor& logits, std::size_t label) {
  if (label >= logits.size())
    throw std::invalid_argument("cross_entropy: label out of range");
  return std::max(0.0, log_sum_exp(logits.values()) - logits[label]);
}

LossValue cross_entropy_loss(const Tensor& logits, std::size_t label) {
  LossValue r{cross_entropy(logits, label), softmax(logits)};
  r.grad[label] -= 1.0;
  return r;
}

LossValue squared_error_loss(const Tensor& logits, const Tensor& target) {
  if (logits.size() != target.size())
    throw std::invalid_argument("squared_error_loss: size mismatch");
  LossValue r{0.0, Tensor(logits.shape())};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double d = logits[i] - target[i];
    r.value += 0.5 * d * d;
    r.grad[i] = d;
  }
  return r;
}

LossFn cross_entropy_fn(std::span<const std::size_t> labels) {
  return [labels](const Tensor& logits, std::size_t index) {
    return cross_entropy_loss(logits, labels[index]);
  };
}

GradResult grad_params(const Network& net, std::span<const Tensor> inputs,
                       const LossFn& loss) {
  if (inputs.empty()) throw std::invalid_argument("grad_params: empty batch");
  GradResult r{0.0, ParamGrads(net)};
  BackwardOptions opts;
  opts.grads = &r.grads;
  opts.skip_input_grad = true;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Trace t = forward_trace(net, inputs[i]);
    LossValue l = loss(t.output(), i);
    r.loss += l.value;
    backward(net, t, l.grad, opts);
  }
  const double inv = 1.0 / static_cast<double>(inputs.size());
  r.loss *= inv;
  r.grads.scale(inv);
  return r;
}

Tensor grad_input(const Network& net, const Tensor& x, const LossFn& loss) {
  const Trace t = forward_trace(net, x);
  return backward(net, t, loss(t.output(), 0).grad);
}

}  // namespace aegis::nn
