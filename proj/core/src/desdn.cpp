#include "aegis/desdn.hpp"

#include <algorithm>
#include <stdexcept>

namespace aegis {

void ExitPolicy::validate(std::size_t total_exits) const {
  if (!(tau > 0.0 && tau < 1.0))
    throw std::invalid_argument("ExitPolicy: tau must lie in (0, 1)");
  if (q < 1 || q > total_exits)
    throw std::invalid_argument("ExitPolicy: q must lie in [1, " +
                                std::to_string(total_exits) + "]");
  if (!per_exit_tau.empty() && per_exit_tau.size() != total_exits)
    throw std::invalid_argument("ExitPolicy: one threshold per exit");
}

std::vector<std::size_t> sample_candidates(Rng& rng, std::size_t q,
                                           std::size_t total_exits) {
  if (q < 1 || q > total_exits)
    throw std::invalid_argument("sample_candidates: q out of range");
  // partial Fisher-Yates
  std::vector<std::size_t> pool(total_exits);
  for (std::size_t i = 0; i < total_exits; ++i) pool[i] = i;
  for (std::size_t i = 0; i < q; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(total_exits - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(q);
  std::sort(pool.begin(), pool.end());
  return pool;
}

Rng query_rng(const ExitPolicy& policy, std::uint64_t query_index) {
  return Rng(policy.rng_seed).split(query_index);
}

ExitTrace exit_among(const MultiExitModel& model, const nn::Tensor& x,
                     std::span<const std::size_t> candidates,
                     std::span<const double> thresholds) {
  if (candidates.empty())
    throw std::invalid_argument("exit_among: no candidate exits");
  ExitTrace tr;
  tr.candidates.assign(candidates.begin(), candidates.end());
  const auto& net = model.backbone();
  nn::Tensor cur = x;
  std::size_t next_layer = 0;
  auto advance_to = [&](std::size_t end) {
    for (; next_layer < end; ++next_layer) {
      cur = nn::apply_layer(net.layer(next_layer), cur);
      ++tr.backbone_layers_evaluated;
    }
  };
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    const std::size_t e = candidates[k];
    const bool deepest = k + 1 == candidates.size();
    Prediction p;
    if (e == model.final_exit()) {
      advance_to(net.size());
      p = predict_from_logits(cur);
    } else {
      advance_to(model.ic(e).position + 1);
      p = predict_from_logits(nn::forward(model.ic(e).head, cur).logits);
      ++tr.ics_evaluated;
    }
    if (p.confidence > thresholds[e] || deepest) {
      tr.chosen = e;
      tr.confidence = p.confidence;
      tr.label = p.label;
      return tr;
    }
  }
  return tr;  // unreachable: the deepest candidate always exits
}

namespace {

std::vector<double> thresholds_of(const ExitPolicy& policy, std::size_t n) {
  std::vector<double> t(n);
  for (std::size_t e = 0; e < n; ++e) t[e] = policy.threshold(e);
  return t;
}

}  // namespace

ExitTrace dynamic_infer(const MultiExitModel& model, const nn::Tensor& x,
                        const ExitPolicy& policy, Rng& rng) {
  policy.validate(model.exit_count());
  const auto cands = sample_candidates(rng, policy.q, model.exit_count());
  const auto th = thresholds_of(policy, model.exit_count());
  return exit_among(model, x, cands, th);
}

ExitTrace static_infer(const MultiExitModel& model, const nn::Tensor& x,
                       double tau) {
  std::vector<std::size_t> all(model.exit_count());
  for (std::size_t e = 0; e < all.size(); ++e) all[e] = e;
  const std::vector<double> th(model.exit_count(), tau);
  return exit_among(model, x, all, th);
}

std::vector<double> exit_histogram(const MultiExitModel& model,
                                   std::span<const nn::Tensor> inputs,
                                   const ExitPolicy& policy,
                                   std::size_t trials) {
  if (inputs.empty())
    throw std::invalid_argument("exit_histogram: empty dataset");
  std::vector<double> h(model.exit_count(), 0.0);
  const std::size_t n = inputs.size();
  for (std::size_t r = 0; r < trials; ++r)
    for (std::size_t k = 0; k < n; ++k) {
      Rng rng = query_rng(policy, r * n + k);
      h[dynamic_infer(model, inputs[k], policy, rng).chosen] += 1.0;
    }
  for (auto& v : h) v /= static_cast<double>(n * trials);
  return h;
}

std::vector<double> static_exit_histogram(const MultiExitModel& model,
                                          std::span<const nn::Tensor> inputs,
                                          double tau) {
  if (inputs.empty())
    throw std::invalid_argument("static_exit_histogram: empty dataset");
  std::vector<double> h(model.exit_count(), 0.0);
  for (const auto& x : inputs) h[static_infer(model, x, tau).chosen] += 1.0;
  for (auto& v : h) v /= static_cast<double>(inputs.size());
  return h;
}

TuneResult tune_policy(const MultiExitModel& model,
                       std::span<const nn::Tensor> inputs,
                       std::span<const std::size_t> labels,
                       std::span<const double> taus,
                       std::span<const std::size_t> qs, double max_acc_drop,
                       std::uint64_t seed, std::size_t trials) {
  if (taus.empty() || qs.empty())
    throw std::invalid_argument("tune_policy: empty grid");
  const double base_acc =
      exit_accuracy(model, model.final_exit(), inputs, labels);
  const std::size_t n = inputs.size();

  // Exit confidences do not depend on the policy; cache them per sample.
  std::vector<std::vector<Prediction>> preds(n);
  std::vector<std::size_t> depth(model.exit_count());
  for (std::size_t e = 0; e < model.ics().size(); ++e)
    depth[e] = model.ic(e).position + 1;
  depth[model.final_exit()] = model.backbone().size();
  for (std::size_t k = 0; k < n; ++k)
    for (const auto& z : all_exit_logits(model, inputs[k]))
      preds[k].push_back(predict_from_logits(z));

  TuneResult out;
  bool have = false;
  PolicyScore best;
  for (std::size_t q : qs) {
    if (q < 1 || q > model.exit_count()) continue;
    for (double tau : taus) {
      ExitPolicy pol{tau, q, seed, {}};
      std::vector<double> share(model.exit_count(), 0.0);
      double hits = 0.0, layers = 0.0;
      for (std::size_t r = 0; r < trials; ++r)
        for (std::size_t k = 0; k < n; ++k) {
          Rng rng = query_rng(pol, r * n + k);
          const auto cands = sample_candidates(rng, q, model.exit_count());
          std::size_t chosen = cands.back();
          for (std::size_t e : cands)
            if (preds[k][e].confidence > tau) {
              chosen = e;
              break;
            }
          share[chosen] += 1.0;
          hits += preds[k][chosen].label == labels[k];
          layers += static_cast<double>(depth[chosen]);
        }
      const double total = static_cast<double>(n * trials);
      PolicyScore s{tau, q, 100.0 * hits / total,
                    *std::max_element(share.begin(), share.end()) / total,
                    layers / total};
      out.grid.push_back(s);
      if (s.accuracy + max_acc_drop < base_acc) continue;
      auto better = [](const PolicyScore& a, const PolicyScore& b) {
        if (a.max_share != b.max_share) return a.max_share < b.max_share;
        if (a.accuracy != b.accuracy) return a.accuracy > b.accuracy;
        if (a.q != b.q) return a.q > b.q;
        return a.tau < b.tau;
      };
      if (!have || better(s, best)) {
        best = s;
        have = true;
      }
    }
  }
  if (!have) {
    // nothing met the accuracy goal: fall back to the most accurate setting
    best = *std::max_element(out.grid.begin(), out.grid.end(),
                             [](const PolicyScore& a, const PolicyScore& b) {
                               return a.accuracy < b.accuracy;
                             });
  }
  out.policy = ExitPolicy{best.tau, best.q, seed, {}};
  return out;
}

}  // namespace aegis
