#include "aegis/metrics.hpp"

#include <stdexcept>

namespace aegis {

double compute_asr(std::span<const std::size_t> predictions, std::size_t target) {
  if (predictions.empty()) throw std::invalid_argument("compute_asr: no predictions");
  std::size_t hit = 0;
  for (std::size_t p : predictions) hit += p == target;
  return 100.0 * static_cast<double>(hit) / static_cast<double>(predictions.size());
}

std::string_view to_string(Defense d) {
  switch (d) {
    case Defense::base: return "base";
    case Defense::sdn: return "sdn";
    case Defense::desdn: return "desdn";
    case Defense::aegis: return "aegis";
  }
  return "?";
}

Defense defense_from_string(std::string_view name) {
  for (Defense d : {Defense::base, Defense::sdn, Defense::desdn, Defense::aegis})
    if (to_string(d) == name) return d;
  throw std::invalid_argument("unknown defense: " + std::string(name));
}

ExitTrace defended_predict(const MultiExitModel& model, Defense d, const nn::Tensor& x,
                           const ExitPolicy& policy, std::uint64_t query_index) {
  switch (d) {
    case Defense::base: {
      const std::size_t last = model.final_exit();
      return exit_among(model, x, std::span(&last, 1), std::vector<double>(model.exit_count(), 2.0));
    }
    case Defense::sdn:
      return static_infer(model, x, policy.tau);
    case Defense::desdn:
    case Defense::aegis: {
      Rng rng = query_rng(policy, query_index);
      return dynamic_infer(model, x, policy, rng);
    }
  }
  throw std::logic_error("defended_predict: bad defense");
}

std::size_t effective_reps(Defense d, std::size_t reps) {
  if (reps == 0) throw std::invalid_argument("reps must be positive");
  return d == Defense::desdn || d == Defense::aegis ? reps : 1;
}

double defended_accuracy(const MultiExitModel& model, Defense d, std::span<const nn::Tensor> inputs,
                         std::span<const std::size_t> labels, const ExitPolicy& policy,
                         std::size_t reps) {
  if (inputs.empty() || inputs.size() != labels.size())
    throw std::invalid_argument("defended_accuracy: bad sample set");
  const std::size_t r_n = effective_reps(d, reps);
  const std::size_t n = inputs.size();
  std::size_t hit = 0;
  for (std::size_t r = 0; r < r_n; ++r)
    for (std::size_t k = 0; k < n; ++k)
      hit += defended_predict(model, d, inputs[k], policy, r * n + k).label == labels[k];
  return 100.0 * static_cast<double>(hit) / static_cast<double>(n * r_n);
}

double defended_asr(const MultiExitModel& model, Defense d, std::span<const nn::Tensor> inputs,
                    std::span<const std::size_t> labels, std::size_t target,
                    const ExitPolicy& policy, std::size_t reps) {
  if (inputs.size() != labels.size()) throw std::invalid_argument("defended_asr: bad sample set");
  const std::size_t r_n = effective_reps(d, reps);
  const std::size_t n = inputs.size();
  std::vector<std::size_t> preds;
  for (std::size_t r = 0; r < r_n; ++r)
    for (std::size_t k = 0; k < n; ++k)
      if (labels[k] != target)
        preds.push_back(defended_predict(model, d, inputs[k], policy, r * n + k).label);
  return compute_asr(preds, target);
}

ExitUsage defended_exit_usage(const MultiExitModel& model, Defense d,
                              std::span<const nn::Tensor> inputs, const ExitPolicy& policy,
                              std::size_t reps) {
  if (inputs.empty()) throw std::invalid_argument("defended_exit_usage: no inputs");
  const std::size_t r_n = effective_reps(d, reps);
  const std::size_t n = inputs.size();
  ExitUsage u;
  u.histogram.assign(model.exit_count(), 0.0);
  for (std::size_t r = 0; r < r_n; ++r)
    for (std::size_t k = 0; k < n; ++k) {
      const ExitTrace t = defended_predict(model, d, inputs[k], policy, r * n + k);
      u.histogram[t.chosen] += 1.0;
      u.mean_layers += static_cast<double>(t.backbone_layers_evaluated);
    }
  const double total = static_cast<double>(n * r_n);
  for (double& h : u.histogram) h /= total;
  u.mean_layers /= total;
  return u;
}

}  // namespace aegis
