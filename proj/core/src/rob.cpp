#include "aegis/rob.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

#include "aegis/loss.hpp"

namespace aegis::rob {

void VpaConfig::validate() const {
  if (k_per_iter == 0 || n_vpa == 0 || batch == 0)
    throw std::invalid_argument("VpaConfig: all fields must be positive");
}

FlippedModel vpa(const MultiExitModel& model,
                 std::span<const nn::Tensor> inputs,
                 std::span<const std::size_t> labels, const VpaConfig& cfg,
                 Rng& rng) {
  cfg.validate();
  if (inputs.empty() || inputs.size() != labels.size())
    throw std::invalid_argument("vpa: labeled data required");
  FlippedModel out{model, {}};
  std::set<quant::BitLocation> toggled;
  std::vector<nn::Tensor> bx;
  std::vector<std::size_t> by;
  for (std::size_t it = 0; it < cfg.n_vpa; ++it) {
    bx.clear();
    by.clear();
    if (cfg.batch >= inputs.size()) {
      bx.assign(inputs.begin(), inputs.end());
      by.assign(labels.begin(), labels.end());
    } else {
      const auto order = shuffled_indices(inputs.size(), rng);
      for (std::size_t k = 0; k < cfg.batch; ++k) {
        bx.push_back(inputs[order[k]]);
        by.push_back(labels[order[k]]);
      }
    }
    const auto g = nn::grad_params(out.model.backbone(), bx,
                                   nn::cross_entropy_fn(by));
    std::vector<quant::GradView> views;
    for (std::size_t id = 0; id < out.model.backbone_param_layers(); ++id)
      views.push_back({id, &out.model.codes(id),
                       &g.grads.weight[out.model.slot(id).layer]});
    const auto top = quant::rank_bits(views, cfg.k_per_iter);
    std::size_t applied = 0;
    for (const auto& s : top) {
      if (!(s.predicted_delta > 0.0)) break;
      out.model.flip(s.location);
      if (!toggled.erase(s.location)) toggled.insert(s.location);
      ++applied;
    }
    if (applied == 0) break;
  }
  out.flipped.assign(toggled.begin(), toggled.end());
  return out;
}

MultiExitModel reconstruct(const MultiExitModel& original,
                           std::span<const quant::BitLocation> flips) {
  MultiExitModel m = original;
  for (const auto& loc : flips) m.flip(loc);
  return m;
}

MultiExitModel rob_train_ics(MultiExitModel model, const FlippedModel& flipped,
                             std::span<const nn::Tensor> inputs,
                             std::span<const std::size_t> labels,
                             const IcTrainConfig& cfg, double mix, Rng& rng) {
  if (!(mix >= 0.0 && mix < 1.0))
    throw std::invalid_argument("rob_train_ics: mix must lie in [0, 1)");
  if (flipped.model.backbone().size() != model.backbone().size())
    throw std::invalid_argument("rob_train_ics: surrogate does not match");
  const ExitFeatures clean = compute_exit_features(model, inputs);
  // The surrogate carries the same IC positions; only its backbone matters.
  MultiExitModel surrogate = flipped.model;
  if (surrogate.ics().size() != model.ics().size()) {
    std::vector<std::size_t> pos;
    for (const auto& ic : model.ics()) pos.push_back(ic.position);
    Rng unused(0);
    surrogate = attach_ics(surrogate, pos, unused);
  }
  const ExitFeatures flip_feats = compute_exit_features(surrogate, inputs);
  return detail::train_heads(std::move(model), clean, &flip_feats, labels, cfg,
                             mix, rng);
}

double inference_loss(const MultiExitModel& model,
                      std::span<const nn::Tensor> inputs,
                      std::span<const std::size_t> labels) {
  double acc = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    acc += nn::cross_entropy(nn::forward(model.backbone(), inputs[i]).logits,
                             labels[i]);
  return acc / static_cast<double>(inputs.size());
}

}  // namespace aegis::rob
