#include "aegis/attacks.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>
#include <tuple>

#include "aegis/loss.hpp"

namespace aegis::attacks {

using quant::BitLocation;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::size_t head_layer_id(const MultiExitModel& m, std::size_t exit) {
  return exit == m.final_exit() ? m.final_layer_id() : m.ic_dense_layer_id(exit);
}

std::vector<double> to_vector(std::span<const double> v) { return {v.begin(), v.end()}; }

/// Inputs of the dense layer of every exit, indexed by exit.
std::vector<std::vector<double>> exit_head_inputs(const MultiExitModel& m, const nn::Tensor& x) {
  const nn::Trace t = nn::forward_trace(m.backbone(), x);
  std::vector<std::vector<double>> out(m.exit_count());
  for (std::size_t i = 0; i < m.ics().size(); ++i) {
    const auto& ic = m.ic(i);
    const nn::Trace ht = nn::forward_trace(ic.head, t.after(ic.position));
    out[i] = to_vector(ht.values[ht.values.size() - 2].values());
  }
  out[m.final_exit()] = to_vector(t.values[t.values.size() - 2].values());
  return out;
}

/// Logits of a dense layer on the given features.
std::vector<double> dense_logits(const nn::Layer& layer, std::span<const double> f) {
  const std::size_t c = layer.spec.out_features;
  const std::size_t n = f.size();
  std::vector<double> z(c);
  for (std::size_t k = 0; k < c; ++k) {
    double s = layer.bias[k];
    for (std::size_t j = 0; j < n; ++j) s += layer.weight[k * n + j] * f[j];
    z[k] = s;
  }
  return z;
}

/// Cross-entropy of a logit vector and its derivative wrt logit `focus`.
double ce(std::span<const double> z, std::size_t label, std::size_t focus, double* dfocus) {
  const double lse = nn::log_sum_exp(z);
  if (dfocus) *dfocus = std::exp(z[focus] - lse) - (focus == label ? 1.0 : 0.0);
  return std::max(0.0, lse - z[label]);
}

std::vector<std::size_t> attacked_exits(const MultiExitModel& m, bool include_ics) {
  std::vector<std::size_t> exits;
  if (include_ics)
    for (std::size_t i = 0; i < m.ics().size(); ++i) exits.push_back(i);
  exits.push_back(m.final_exit());
  return exits;
}

void require_scope(const AttackBudget& b, std::size_t layer_id, const char* what) {
  if (!b.allows(layer_id))
    throw std::invalid_argument(std::string(what) + ": required layer outside budget scope");
}

/// Toggles one bit in an ordered net flip list.
void toggle_in(std::vector<BitLocation>& flips, const BitLocation& loc) {
  const auto it = std::find(flips.begin(), flips.end(), loc);
  if (it == flips.end()) {
    flips.push_back(loc);
  } else {
    flips.erase(it);
  }
}

std::size_t popcount8(std::int8_t a, std::int8_t b) {
  return static_cast<std::size_t>(
      std::popcount(static_cast<unsigned>(static_cast<std::uint8_t>(a) ^ static_cast<std::uint8_t>(b))));
}

std::int8_t clamp_code(double v, int bits) {
  const double lo = -std::ldexp(1.0, bits - 1);
  const double hi = std::ldexp(1.0, bits - 1) - 1.0;
  return static_cast<std::int8_t>(std::clamp(quant::round_half_away(v), lo, hi));
}

std::span<const nn::Tensor> head(std::span<const nn::Tensor> v, std::size_t n) {
  return v.first(std::min(n, v.size()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Budget and plans

bool AttackBudget::allows(std::size_t layer_id) const {
  return std::find(scope.begin(), scope.end(), layer_id) != scope.end();
}

void AttackBudget::validate() const {
  if (scope.empty()) throw std::invalid_argument("attack budget: empty scope");
}

std::vector<std::size_t> final_layer_scope(const MultiExitModel& model, bool include_ics) {
  std::vector<std::size_t> s{model.final_layer_id()};
  if (include_ics)
    for (std::size_t i = 0; i < model.ics().size(); ++i) s.push_back(model.ic_dense_layer_id(i));
  return s;
}

std::vector<std::size_t> backbone_scope(const MultiExitModel& model, bool include_ics) {
  const std::size_t n = include_ics ? model.param_layer_count() : model.backbone_param_layers();
  std::vector<std::size_t> s(n);
  std::iota(s.begin(), s.end(), 0);
  return s;
}

std::vector<std::size_t> shallow_scope(const MultiExitModel& model, std::size_t layers) {
  std::vector<std::size_t> s(std::min(layers, model.backbone_param_layers()));
  std::iota(s.begin(), s.end(), 0);
  return s;
}

void check_plan(const FlipPlan& plan, const AttackBudget& budget) {
  std::set<BitLocation> seen;
  for (const auto& f : plan.flips) {
    if (!budget.allows(f.layer_id)) throw std::logic_error("flip plan leaves the budget scope");
    if (!seen.insert(f).second) throw std::logic_error("flip plan repeats a bit");
  }
  if (plan.flips.size() > budget.n_b_max) throw std::logic_error("flip plan exceeds n_b_max");
}

MultiExitModel apply_plan(const MultiExitModel& model, const FlipPlan& plan) {
  MultiExitModel out = model;
  for (const auto& f : plan.flips) out.flip(f);
  return out;
}

// ---------------------------------------------------------------------------
// Trigger training

double train_trigger(const MultiExitModel& model, std::span<const nn::Tensor> inputs,
                     TriggerSpec& trigger, const TriggerTraining& cfg, Rng& rng) {
  if (inputs.empty()) throw std::invalid_argument("train_trigger: no inputs");
  if (cfg.layer >= model.backbone().size())
    throw std::invalid_argument("train_trigger: layer out of range");
  const std::size_t act_size = nn::numel(model.backbone().activation_shape(cfg.layer));
  for (std::size_t n : cfg.neurons)
    if (n >= act_size) throw std::invalid_argument("train_trigger: neuron out of range");

  const auto goal = cfg.goal;
  const auto& neurons = cfg.neurons;
  const ActivationLoss al{cfg.layer, [&](const nn::Tensor& a) {
                            nn::LossValue lv{0.0, nn::Tensor(a.shape())};
                            for (std::size_t n : neurons) {
                              const double d = a[n] - goal;
                              lv.value += 0.5 * d * d;
                              lv.grad[n] = d;
                            }
                            return lv;
                          }};
  const std::vector<ExitLossFn> none(model.exit_count());
  ExitBackwardOptions opts;
  opts.input_grad = true;
  opts.activation_losses = std::span(&al, 1);

  const std::size_t b = std::max<std::size_t>(1, std::min(cfg.batch, inputs.size()));
  std::vector<std::size_t> order = shuffled_indices(inputs.size(), rng);
  std::size_t cursor = 0;
  double last = 0.0;
  for (std::size_t it = 0; it < cfg.iters; ++it) {
    nn::Tensor g(trigger.patch.shape());
    double loss = 0.0;
    for (std::size_t s = 0; s < b; ++s) {
      if (cursor == order.size()) {
        rng.shuffle(std::span(order));
        cursor = 0;
      }
      const nn::Tensor xt = apply_trigger(inputs[order[cursor++]], trigger);
      const ExitBackward r = exit_backward(model, xt, none, nullptr, opts);
      g += patch_gradient(r.input_grad, trigger);
      loss += r.loss;
    }
    const double step = cfg.lr / static_cast<double>(b);
    for (std::size_t i = 0; i < g.size(); ++i)
      trigger.patch[i] = std::clamp(trigger.patch[i] - step * g[i], 0.0, 1.0);
    last = loss / static_cast<double>(b);
  }
  return last;
}

// ---------------------------------------------------------------------------
// TBT

std::vector<std::size_t> tbt_select_neurons(const MultiExitModel& model, std::size_t exit,
                                            std::span<const nn::Tensor> inputs,
                                            std::size_t target, std::size_t w_b) {
  if (exit >= model.exit_count()) throw std::invalid_argument("tbt: exit out of range");
  if (target >= model.class_count()) throw std::invalid_argument("tbt: target out of range");
  const nn::Layer& layer = model.param_layer(head_layer_id(model, exit));
  const std::size_t f = layer.spec.in_features;
  if (w_b == 0 || w_b > f) throw std::invalid_argument("tbt: w_b must lie in [1, features]");
  std::vector<double> g(f, 0.0);
  for (const auto& x : inputs) {
    const auto phi = exit_head_inputs(model, x)[exit];
    const auto z = dense_logits(layer, phi);
    double dz = 0.0;
    ce(z, target, target, &dz);
    for (std::size_t j = 0; j < f; ++j) g[j] += dz * phi[j];
  }
  std::vector<std::size_t> idx(f);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return std::abs(g[a]) > std::abs(g[b]); });
  idx.resize(w_b);
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<double> tbt_exit_losses(const MultiExitModel& model, std::span<const nn::Tensor> inputs,
                                    std::span<const std::size_t> labels,
                                    const TriggerSpec& trigger) {
  if (inputs.empty() || inputs.size() != labels.size())
    throw std::invalid_argument("tbt_exit_losses: bad sample set");
  std::vector<double> out(model.exit_count(), 0.0);
  for (std::size_t s = 0; s < inputs.size(); ++s) {
    const auto clean = all_exit_logits(model, inputs[s]);
    const auto trig = all_exit_logits(model, apply_trigger(inputs[s], trigger));
    for (std::size_t e = 0; e < out.size(); ++e)
      out[e] += nn::cross_entropy(clean[e], labels[s]) + nn::cross_entropy(trig[e], trigger.target);
  }
  for (auto& v : out) v /= static_cast<double>(inputs.size());
  return out;
}

namespace {

/// Cached features of one exit for TBT weight optimization. Only the target
/// row entries of `neurons` vary.
struct TbtHead {
  std::size_t layer_id = 0;
  double scale = 1.0;
  int bits = 8;
  std::size_t features = 0;
  std::vector<std::size_t> neurons;
  std::vector<std::int8_t> base_codes;              // per neuron
  std::vector<std::vector<double>> clean, trig;     // features per sample
  std::vector<std::vector<double>> clean_z, trig_z; // original logits

  /// Mean CE(clean, y) + mean CE(trig, t) with the target-row codes `c`;
  /// accumulates d/dc into `grad` when given.
  double loss(std::span<const double> c, std::span<const std::size_t> labels, std::size_t target,
              std::vector<double>* grad) const {
    const std::size_t k = neurons.size();
    const double inv = 1.0 / static_cast<double>(clean.size());
    if (grad) grad->assign(k, 0.0);
    double total = 0.0;
    std::vector<double> z;
    const auto one = [&](const std::vector<double>& phi, const std::vector<double>& z0,
                         std::size_t label) {
      z = z0;
      for (std::size_t i = 0; i < k; ++i)
        z[target] += (c[i] - base_codes[i]) * scale * phi[neurons[i]];
      double dz = 0.0;
      total += inv * ce(z, label, target, grad ? &dz : nullptr);
      if (grad)
        for (std::size_t i = 0; i < k; ++i) (*grad)[i] += inv * dz * scale * phi[neurons[i]];
    };
    for (std::size_t s = 0; s < clean.size(); ++s) {
      one(clean[s], clean_z[s], labels[s]);
      one(trig[s], trig_z[s], target);
    }
    return total;
  }
};

}  // namespace

FlipPlan tbt(const MultiExitModel& model, std::span<const nn::Tensor> inputs,
             std::span<const std::size_t> labels, const TbtConfig& cfg,
             const AttackBudget& budget) {
  budget.validate();
  if (inputs.empty() || inputs.size() != labels.size())
    throw std::invalid_argument("tbt: bad sample set");
  if (cfg.target >= model.class_count()) throw std::invalid_argument("tbt: target out of range");
  const auto exits = attacked_exits(model, budget.include_ics);
  for (std::size_t e : exits) require_scope(budget, head_layer_id(model, e), "tbt");

  FlipPlan plan;
  plan.attack = budget.include_ics ? "tbt_adaptive" : "tbt";
  Rng rng(cfg.seed);
  const auto xs = head(inputs, cfg.samples);
  const auto ys = labels.first(xs.size());
  const std::size_t t = cfg.target;

  const auto sel_final = tbt_select_neurons(model, model.final_exit(), xs, t, cfg.w_b);
  TriggerSpec trigger = bottom_right_trigger(xs.front().shape(), cfg.tap, t);
  TriggerTraining tt;
  tt.layer = model.backbone().size() - 2;
  tt.neurons = sel_final;
  tt.goal = cfg.activation_goal;
  tt.lr = cfg.trigger_lr;
  tt.iters = cfg.trigger_iters;
  tt.batch = cfg.trigger_batch;
  train_trigger(model, xs, trigger, tt, rng);
  plan.trigger = trigger;

  std::vector<TbtHead> heads;
  std::vector<std::vector<std::vector<double>>> clean_f, trig_f;
  for (const auto& x : xs) {
    clean_f.push_back(exit_head_inputs(model, x));
    trig_f.push_back(exit_head_inputs(model, apply_trigger(x, trigger)));
  }
  for (std::size_t e : exits) {
    TbtHead h;
    h.layer_id = head_layer_id(model, e);
    const auto& q = model.codes(h.layer_id);
    const nn::Layer& layer = model.param_layer(h.layer_id);
    h.scale = q.scale;
    h.bits = q.bits;
    h.features = layer.spec.in_features;
    h.neurons = e == model.final_exit() ? sel_final : tbt_select_neurons(model, e, xs, t, cfg.w_b);
    for (std::size_t j : h.neurons) h.base_codes.push_back(q.codes[t * h.features + j]);
    for (std::size_t s = 0; s < xs.size(); ++s) {
      h.clean.push_back(clean_f[s][e]);
      h.trig.push_back(trig_f[s][e]);
      h.clean_z.push_back(dense_logits(layer, h.clean.back()));
      h.trig_z.push_back(dense_logits(layer, h.trig.back()));
    }
    heads.push_back(std::move(h));
  }

  const auto total_loss = [&](const std::vector<std::vector<double>>& codes) {
    double l = 0.0;
    for (std::size_t h = 0; h < heads.size(); ++h) l += heads[h].loss(codes[h], ys, t, nullptr);
    return l;
  };

  std::vector<std::vector<double>> base(heads.size());
  for (std::size_t h = 0; h < heads.size(); ++h)
    base[h].assign(heads[h].base_codes.begin(), heads[h].base_codes.end());

  if (budget.n_b_max == 0) {
    plan.achieved_loss = total_loss(base);
    plan.complete = false;
    return plan;
  }

  // Continuous optimization in code units (Adam).
  std::vector<std::vector<double>> c = base;
  std::vector<std::vector<double>> m(heads.size()), v(heads.size());
  for (std::size_t h = 0; h < heads.size(); ++h) {
    m[h].assign(c[h].size(), 0.0);
    v[h].assign(c[h].size(), 0.0);
  }
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<double> g;
  for (std::size_t step = 1; step <= cfg.weight_steps; ++step) {
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
    for (std::size_t h = 0; h < heads.size(); ++h) {
      heads[h].loss(c[h], ys, t, &g);
      const double lo = -std::ldexp(1.0, heads[h].bits - 1);
      const double hi = std::ldexp(1.0, heads[h].bits - 1) - 1.0;
      for (std::size_t i = 0; i < g.size(); ++i) {
        m[h][i] = b1 * m[h][i] + (1 - b1) * g[i];
        v[h][i] = b2 * v[h][i] + (1 - b2) * g[i] * g[i];
        c[h][i] -= cfg.weight_lr * (m[h][i] / c1) / (std::sqrt(v[h][i] / c2) + eps);
        c[h][i] = std::clamp(c[h][i], lo, hi);
      }
    }
  }

  // Bits separating the original codes from the rounded optimum.
  struct Wanted {
    std::size_t head, slot;
    BitLocation loc;
  };
  std::vector<Wanted> wanted;
  for (std::size_t h = 0; h < heads.size(); ++h) {
    for (std::size_t i = 0; i < c[h].size(); ++i) {
      const std::int8_t nc = clamp_code(c[h][i], heads[h].bits);
      const auto diff = static_cast<std::uint8_t>(static_cast<std::uint8_t>(nc) ^
                                                  static_cast<std::uint8_t>(heads[h].base_codes[i]));
      for (unsigned b = 0; b < static_cast<unsigned>(heads[h].bits); ++b)
        if (diff >> b & 1U)
          wanted.push_back({h, i, BitLocation{heads[h].layer_id, t * heads[h].features + heads[h].neurons[i], b}});
    }
  }
  std::sort(wanted.begin(), wanted.end(),
            [](const Wanted& a, const Wanted& b) { return a.loc < b.loc; });

  std::vector<std::vector<double>> cur = base;
  const auto toggled = [&](const Wanted& w) {
    auto code = static_cast<std::int8_t>(cur[w.head][w.slot]);
    code = static_cast<std::int8_t>(static_cast<std::uint8_t>(code) ^ (1U << w.loc.bit));
    return static_cast<double>(quant::code_from_pattern(static_cast<std::uint8_t>(code), heads[w.head].bits));
  };

  if (wanted.size() <= budget.n_b_max) {
    for (const auto& w : wanted) {
      cur[w.head][w.slot] = toggled(w);
      plan.flips.push_back(w.loc);
    }
  } else {
    plan.complete = false;
    std::vector<char> used(wanted.size(), 0);
    for (std::size_t n = 0; n < budget.n_b_max; ++n) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t pick = wanted.size();
      for (std::size_t i = 0; i < wanted.size(); ++i) {
        if (used[i]) continue;
        const double keep = cur[wanted[i].head][wanted[i].slot];
        cur[wanted[i].head][wanted[i].slot] = toggled(wanted[i]);
        const double l = total_loss(cur);
        cur[wanted[i].head][wanted[i].slot] = keep;
        if (l < best) {
          best = l;
          pick = i;
        }
      }
      used[pick] = 1;
      cur[wanted[pick].head][wanted[pick].slot] = toggled(wanted[pick]);
      plan.flips.push_back(wanted[pick].loc);
    }
  }
  plan.achieved_loss = total_loss(cur);
  check_plan(plan, budget);
  return plan;
}

// ---------------------------------------------------------------------------
// TA-LBF

TalbfProblem talbf_problem(const MultiExitModel& model, const nn::Tensor& x, std::size_t source,
                           std::size_t target, std::span<const nn::Tensor> aux, double lambda,
                           double margin, bool include_ics) {
  const std::size_t classes = model.class_count();
  if (source >= classes || target >= classes || source == target)
    throw std::invalid_argument("talbf: bad source/target");
  const auto xf = exit_head_inputs(model, x);
  std::vector<std::vector<std::vector<double>>> af;
  af.reserve(aux.size());
  for (const auto& a : aux) af.push_back(exit_head_inputs(model, a));

  TalbfProblem p;
  p.margin = margin;
  // final head first, then ICs in depth order
  std::vector<std::size_t> exits{model.final_exit()};
  if (include_ics)
    for (std::size_t i = 0; i < model.ics().size(); ++i) exits.push_back(i);
  for (std::size_t e : exits) {
    TalbfHead h;
    h.layer_id = head_layer_id(model, e);
    h.source = source;
    h.target = target;
    const auto& q = model.codes(h.layer_id);
    const nn::Layer& layer = model.param_layer(h.layer_id);
    const std::size_t f = layer.spec.in_features;
    h.bits = q.bits;
    h.scale = q.scale;
    h.codes_source.assign(q.codes.begin() + static_cast<std::ptrdiff_t>(source * f),
                          q.codes.begin() + static_cast<std::ptrdiff_t>((source + 1) * f));
    h.codes_target.assign(q.codes.begin() + static_cast<std::ptrdiff_t>(target * f),
                          q.codes.begin() + static_cast<std::ptrdiff_t>((target + 1) * f));
    h.bias_source = layer.bias[source];
    h.bias_target = layer.bias[target];
    h.x_features = xf[e];
    const auto z = dense_logits(layer, h.x_features);
    h.x_other_max = kNegInf;
    for (std::size_t c = 0; c < classes; ++c)
      if (c != source && c != target) h.x_other_max = std::max(h.x_other_max, z[c]);
    std::vector<std::vector<double>> feats;
    feats.reserve(af.size());
    double norm = 0.0;
    for (const auto& a : af) {
      feats.push_back(a[e]);
      const auto za = dense_logits(layer, feats.back());
      norm += za[source] * za[source] + za[target] * za[target];
    }
    h.gram = feats.empty() ? std::vector<double>(f * f, 0.0) : gram_matrix(feats);
    h.l2_norm = norm > 0.0 ? norm : 1.0;
    h.l2_weight = e == model.final_exit() ? lambda : 1.0;
    p.heads.push_back(std::move(h));
  }
  return p;
}

FlipPlan talbf(const MultiExitModel& model, const nn::Tensor& x, std::size_t source,
               std::size_t target, std::span<const nn::Tensor> aux, const TalbfConfig& cfg,
               const AttackBudget& budget) {
  budget.validate();
  for (std::size_t e : attacked_exits(model, budget.include_ics))
    require_scope(budget, head_layer_id(model, e), "talbf");
  if (ic_predict(model, model.final_exit(), x).label != source)
    throw std::invalid_argument("talbf: sample is not classified as its source label");
  if (cfg.k_init == 0) throw std::invalid_argument("talbf: k_init must be positive");

  FlipPlan plan;
  plan.attack = budget.include_ics ? "talbf_adaptive" : "talbf";
  TalbfProblem p = talbf_problem(model, x, source, target, head(aux, cfg.aux_n),
                                 cfg.lambda_init, cfg.margin, budget.include_ics);
  const auto to_plan = [&](const TalbfSolution& sol, bool complete) {
    plan.flips.clear();
    for (const auto& v : sol.toggles) {
      const auto& h = p.heads[v.head];
      const std::size_t row = v.row == 0 ? h.source : h.target;
      plan.flips.push_back(BitLocation{h.layer_id, row * h.features() + v.feature, v.bit});
    }
    std::sort(plan.flips.begin(), plan.flips.end());
    plan.achieved_loss = sol.loss;
    plan.complete = complete;
    check_plan(plan, budget);
    return plan;
  };

  if (budget.n_b_max == 0) {
    TalbfSolution none;
    none.loss = talbf_objective(p, {});
    return to_plan(none, talbf_success(p, {}));
  }

  TalbfSolution last;
  double lambda = cfg.lambda_init;
  for (std::size_t s = 0; s < std::max<std::size_t>(1, cfg.lambda_searches); ++s, lambda /= 2.0) {
    p.heads.front().l2_weight = lambda;
    std::size_t k = std::min(cfg.k_init, budget.n_b_max);
    for (std::size_t i = 0; i < std::max<std::size_t>(1, cfg.k_searches); ++i) {
      last = solve_talbf(p, k, cfg.solver);
      if (last.success) return to_plan(last, true);
      if (k == budget.n_b_max) break;
      k = std::min(2 * k, budget.n_b_max);
    }
  }
  return to_plan(last, false);
}

// ---------------------------------------------------------------------------
// ProFlip

std::size_t proflip_saliency_layer(const MultiExitModel& model) {
  const auto& eps = model.backbone().exit_points();
  return eps.empty() ? model.backbone().size() - 2 : eps.back();
}

std::vector<std::size_t> proflip_salient_neurons(const MultiExitModel& model,
                                                 std::span<const nn::Tensor> inputs,
                                                 std::size_t target, std::size_t n,
                                                 bool include_ics) {
  if (target >= model.class_count()) throw std::invalid_argument("proflip: target out of range");
  const std::size_t layer = proflip_saliency_layer(model);
  const auto logit = [target](const nn::Tensor& z) {
    nn::LossValue lv{z[target], nn::Tensor(z.shape())};
    lv.grad[target] = 1.0;
    return lv;
  };
  std::vector<ExitLossFn> losses(model.exit_count());
  losses[model.final_exit()] = logit;
  if (include_ics)
    for (std::size_t i = 0; i < model.ics().size(); ++i)
      if (model.ic(i).position >= layer) losses[i] = logit;
  ExitBackwardOptions opts;
  opts.activation_grads = true;
  nn::Tensor acc(model.backbone().activation_shape(layer));
  for (const auto& x : inputs) acc += exit_backward(model, x, losses, nullptr, opts).activation_grads[layer];
  n = std::min(n, acc.size());
  std::vector<std::size_t> idx(acc.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return acc[a] > acc[b]; });
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  return idx;
}

namespace {

/// Salient activations, each saturating at `cap`.
double salient_sum(const nn::Tensor& a, std::span<const std::size_t> salient, double cap) {
  double s = 0.0;
  for (std::size_t n : salient) s += std::min(a[n], cap);
  return s;
}

/// Per-sample terms of the ProFlip objective on the current model.
struct ProflipSample {
  nn::Trace trace;
  std::vector<double> ic_ce;  // per IC; zero when ICs are excluded
  double final_ce = 0.0;
  double salient = 0.0;
};

class ProflipObjective {
 public:
  ProflipObjective(const MultiExitModel& model, std::span<const nn::Tensor> triggered,
                   std::size_t target, std::span<const std::size_t> salient, double weight,
                   double cap, bool include_ics)
      : triggered_(triggered), target_(target), salient_(salient.begin(), salient.end()),
        weight_(weight), cap_(cap), include_ics_(include_ics),
        layer_(proflip_saliency_layer(model)) {
    refresh(model);
  }

  void refresh(const MultiExitModel& m) {
    samples_.clear();
    for (const auto& x : triggered_) {
      ProflipSample s;
      s.trace = nn::forward_trace(m.backbone(), x);
      s.final_ce = nn::cross_entropy(s.trace.output(), target_);
      s.salient = salient_sum(s.trace.after(layer_), salient_, cap_);
      s.ic_ce.assign(m.ics().size(), 0.0);
      if (include_ics_)
        for (std::size_t i = 0; i < m.ics().size(); ++i)
          s.ic_ce[i] = nn::cross_entropy(nn::forward(m.ic(i).head, s.trace.after(m.ic(i).position)).logits, target_);
      samples_.push_back(std::move(s));
    }
  }

  double value() const {
    double v = 0.0;
    for (const auto& s : samples_) v += term(s.final_ce, s.ic_ce, s.salient);
    return v / static_cast<double>(samples_.size());
  }

  /// Objective of `m`, which differs from the cached model only in
  /// parameter layer `layer_id`.
  double value_with(const MultiExitModel& m, std::size_t layer_id) const {
    const ParamSlot slot = m.slot(layer_id);
    double v = 0.0;
    std::vector<double> ic_ce;
    for (const auto& s : samples_) {
      ic_ce = s.ic_ce;
      if (!slot.is_backbone()) {
        const auto& ic = m.ic(slot.ic);
        ic_ce[slot.ic] = nn::cross_entropy(nn::forward(ic.head, s.trace.after(ic.position)).logits, target_);
        v += term(s.final_ce, ic_ce, s.salient);
        continue;
      }
      const std::size_t l = slot.layer;
      const nn::Trace t = nn::forward_trace(m.backbone(), s.trace.values[l], l);
      const double fce = nn::cross_entropy(t.output(), target_);
      const double sal = layer_ >= l ? salient_sum(t.after(layer_), salient_, cap_) : s.salient;
      if (include_ics_)
        for (std::size_t i = 0; i < m.ics().size(); ++i)
          if (m.ic(i).position >= l)
            ic_ce[i] = nn::cross_entropy(nn::forward(m.ic(i).head, t.after(m.ic(i).position)).logits, target_);
      v += term(fce, ic_ce, sal);
    }
    return v / static_cast<double>(samples_.size());
  }

  /// Percentage of cached samples the final exit assigns to the target.
  double asr() const {
    std::size_t hit = 0;
    for (const auto& s : samples_) hit += nn::argmax(s.trace.output().values()) == target_;
    return 100.0 * static_cast<double>(hit) / static_cast<double>(samples_.size());
  }

 private:
  double term(double fce, const std::vector<double>& ic_ce, double sal) const {
    double v = fce - weight_ * sal;
    for (double c : ic_ce) v += c;
    return v;
  }

  std::span<const nn::Tensor> triggered_;
  std::size_t target_;
  std::vector<std::size_t> salient_;
  double weight_;
  double cap_;
  bool include_ics_;
  std::size_t layer_;
  std::vector<ProflipSample> samples_;
};

}  // namespace

double proflip_loss(const MultiExitModel& model, std::span<const nn::Tensor> triggered,
                    std::size_t target, std::span<const std::size_t> salient, double salient_weight,
                    double salient_cap, bool include_ics) {
  if (triggered.empty()) throw std::invalid_argument("proflip_loss: no samples");
  const std::size_t layer = proflip_saliency_layer(model);
  double v = 0.0;
  for (const auto& x : triggered) {
    const nn::Trace t = nn::forward_trace(model.backbone(), x);
    v += nn::cross_entropy(t.output(), target) - salient_weight * salient_sum(t.after(layer), salient, salient_cap);
    if (include_ics)
      for (const auto& ic : model.ics())
        v += nn::cross_entropy(nn::forward(ic.head, t.after(ic.position)).logits, target);
  }
  return v / static_cast<double>(triggered.size());
}

FlipPlan proflip(const MultiExitModel& model, std::span<const nn::Tensor> inputs,
                 std::span<const std::size_t> labels, const ProflipConfig& cfg,
                 const AttackBudget& budget) {
  budget.validate();
  if (inputs.size() != labels.size()) throw std::invalid_argument("proflip: bad sample set");
  if (cfg.target >= model.class_count()) throw std::invalid_argument("proflip: target out of range");
  if (cfg.k_points < 2) throw std::invalid_argument("proflip: k_points must be at least 2");
  for (std::size_t id : budget.scope)
    if (id >= model.param_layer_count()) throw std::invalid_argument("proflip: scope out of range");

  std::vector<nn::Tensor> xs;
  for (std::size_t i = 0; i < inputs.size() && xs.size() < cfg.samples; ++i)
    if (labels[i] != cfg.target) xs.push_back(inputs[i]);
  if (xs.empty()) throw std::invalid_argument("proflip: no samples outside the target class");

  FlipPlan plan;
  plan.attack = budget.include_ics ? "proflip_adaptive" : "proflip";
  Rng rng(cfg.seed);
  const std::size_t layer = proflip_saliency_layer(model);
  const auto salient = proflip_salient_neurons(model, xs, cfg.target, cfg.n_salient, budget.include_ics);

  TriggerSpec trigger = bottom_right_trigger(xs.front().shape(), cfg.tap, cfg.target);
  TriggerTraining tt;
  tt.layer = layer;
  tt.neurons = salient;
  tt.goal = cfg.activation_goal;
  tt.lr = cfg.trigger_lr;
  tt.iters = cfg.trigger_iters;
  tt.batch = cfg.trigger_batch;
  train_trigger(model, xs, trigger, tt, rng);
  plan.trigger = trigger;
  const auto triggered = apply_trigger(xs, trigger);

  MultiExitModel work = model;
  ProflipObjective obj(work, triggered, cfg.target, salient, cfg.salient_weight,
                       cfg.activation_goal, budget.include_ics);
  double current = obj.value();
  plan.achieved_loss = current;

  // gradient of the objective
  const std::size_t t = cfg.target;
  const auto ce_t = [t](const nn::Tensor& z) { return nn::cross_entropy_loss(z, t); };
  std::vector<ExitLossFn> losses(work.exit_count());
  losses[work.final_exit()] = ce_t;
  if (budget.include_ics)
    for (std::size_t i = 0; i < work.ics().size(); ++i) losses[i] = ce_t;
  const double w = cfg.salient_weight;
  const double cap = cfg.activation_goal;
  const ActivationLoss al{layer, [&](const nn::Tensor& a) {
                            nn::LossValue lv{-w * salient_sum(a, salient, cap), nn::Tensor(a.shape())};
                            for (std::size_t n : salient)
                              if (a[n] < cap) lv.grad[n] = -w;
                            return lv;
                          }};
  ExitBackwardOptions opts;
  opts.activation_losses = std::span(&al, 1);

  std::vector<double> asr_history{obj.asr()};
  bool budget_bound = false;
  for (std::size_t iter = 0; iter < cfg.max_iters; ++iter) {
    if (plan.flips.size() >= budget.n_b_max) {
      budget_bound = true;
      break;
    }
    ModelGrads grads(work);
    for (const auto& x : triggered) exit_backward(work, x, losses, &grads, opts);

    struct Cand {
      double mag;
      std::size_t id, idx;
    };
    std::vector<Cand> cands;
    for (std::size_t id : budget.scope) {
      const nn::Tensor& g = grads.weight(work, id);
      for (std::size_t i = 0; i < g.size(); ++i) cands.push_back({std::abs(g[i]), id, i});
    }
    const std::size_t p = std::min(cfg.candidates, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(p), cands.end(),
                      [](const Cand& a, const Cand& b) {
                        if (a.mag != b.mag) return a.mag > b.mag;
                        return std::tie(a.id, a.idx) < std::tie(b.id, b.idx);
                      });
    cands.resize(p);

    double best = current;
    std::size_t best_id = 0, best_idx = 0;
    std::int8_t best_code = 0;
    bool found = false;
    bool blocked = false;
    for (const auto& c : cands) {
      const auto& q = work.codes(c.id);
      const auto [lo_it, hi_it] = std::minmax_element(q.codes.begin(), q.codes.end());
      const double lo = *lo_it, hi = *hi_it;
      const std::int8_t cur = q.codes[c.idx];
      const std::int8_t orig = model.codes(c.id).codes[c.idx];
      std::set<std::int8_t> tried;
      for (std::size_t k = 0; k < cfg.k_points; ++k) {
        const double val = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(cfg.k_points - 1);
        const std::int8_t code = clamp_code(val, q.bits);
        if (code == cur || !tried.insert(code).second) continue;
        const std::size_t after = plan.flips.size() - popcount8(orig, cur) + popcount8(orig, code);
        if (after > budget.n_b_max) {
          blocked = true;
          continue;
        }
        work.set_code(c.id, c.idx, code);
        const double v = obj.value_with(work, c.id);
        work.set_code(c.id, c.idx, cur);
        if (v < best - 1e-12 * std::max(1.0, std::abs(best))) {
          best = v;
          best_id = c.id;
          best_idx = c.idx;
          best_code = code;
          found = true;
        }
      }
    }
    if (!found) {
      budget_bound = blocked;
      break;
    }
    const std::int8_t cur = work.codes(best_id).codes[best_idx];
    const auto diff = static_cast<std::uint8_t>(static_cast<std::uint8_t>(cur) ^ static_cast<std::uint8_t>(best_code));
    for (unsigned b = 0; b < 8; ++b)
      if (diff >> b & 1U) toggle_in(plan.flips, BitLocation{best_id, best_idx, b});
    work.set_code(best_id, best_idx, best_code);
    obj.refresh(work);
    current = obj.value();
    asr_history.push_back(obj.asr());
    const std::size_t wdw = cfg.plateau_window;
    if (wdw > 0 && asr_history.size() > wdw &&
        asr_history.back() - asr_history[asr_history.size() - 1 - wdw] < cfg.plateau_gain)
      break;
  }
  plan.achieved_loss = current;
  plan.complete = !budget_bound || asr_history.back() >= 100.0;
  check_plan(plan, budget);
  return plan;
}

FlipPlan shallow_proflip(const MultiExitModel& model, std::span<const nn::Tensor> inputs,
                         std::span<const std::size_t> labels, const ProflipConfig& cfg,
                         std::size_t n_b_max) {
  AttackBudget budget;
  budget.n_b_max = n_b_max;
  budget.scope = shallow_scope(model);
  budget.include_ics = true;
  FlipPlan plan = proflip(model, inputs, labels, cfg, budget);
  plan.attack = "proflip_shallow";
  return plan;
}

// ---------------------------------------------------------------------------
// Untargeted progressive bit search

FlipPlan untargeted_bfa(const MultiExitModel& model, std::span<const nn::Tensor> inputs,
                        std::span<const std::size_t> labels, const UntargetedConfig& cfg,
                        const AttackBudget& budget, const AccuracyFn& accuracy) {
  budget.validate();
  if (inputs.empty() || inputs.size() != labels.size())
    throw std::invalid_argument("untargeted_bfa: bad sample set");
  if (!accuracy) throw std::invalid_argument("untargeted_bfa: missing accuracy callback");
  for (std::size_t id : budget.scope)
    if (id >= model.param_layer_count()) throw std::invalid_argument("untargeted_bfa: scope out of range");
  const double goal = cfg.target_acc < 0.0 ? 100.0 / static_cast<double>(model.class_count()) : cfg.target_acc;
  const auto xs = head(inputs, cfg.batch);
  const auto ys = labels.first(xs.size());

  FlipPlan plan;
  plan.attack = budget.include_ics ? "untargeted_adaptive" : "untargeted";
  plan.complete = false;
  MultiExitModel work = model;
  std::set<BitLocation> flipped;
  for (;;) {
    if (accuracy(work) <= goal) {
      plan.complete = true;
      break;
    }
    if (plan.flips.size() >= budget.n_b_max) break;
    ModelGrads grads(work);
    double loss = 0.0;
    for (std::size_t s = 0; s < xs.size(); ++s) {
      const std::size_t y = ys[s];
      const auto ce_y = [y](const nn::Tensor& z) { return nn::cross_entropy_loss(z, y); };
      std::vector<ExitLossFn> losses(work.exit_count());
      losses[work.final_exit()] = ce_y;
      if (budget.include_ics)
        for (std::size_t i = 0; i < work.ics().size(); ++i) losses[i] = ce_y;
      loss += exit_backward(work, xs[s], losses, &grads).loss;
    }
    grads.scale(1.0 / static_cast<double>(xs.size()));
    plan.achieved_loss = loss / static_cast<double>(xs.size());
    std::vector<quant::GradView> views;
    for (std::size_t id : budget.scope) views.push_back({id, &work.codes(id), &grads.weight(work, id)});
    const auto ranked = quant::rank_bits(views, flipped.size() + 1);
    const auto it = std::find_if(ranked.begin(), ranked.end(),
                                 [&](const quant::BitScore& s) { return !flipped.contains(s.location); });
    if (it == ranked.end()) break;
    work.flip(it->location);
    flipped.insert(it->location);
    plan.flips.push_back(it->location);
  }
  check_plan(plan, budget);
  return plan;
}

}  // namespace aegis::attacks
