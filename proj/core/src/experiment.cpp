#include "aegis/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <map>
#include <set>

#include "aegis/checkpoint.hpp"
#include "aegis/desk.hpp"
#include "aegis/image.hpp"
#include "aegis/optim.hpp"
#include "aegis/rob.hpp"
#include "json.hpp"

namespace aegis {

using nlohmann::ordered_json;

namespace {

template <class F> auto in_stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

Dataset head_of(const Dataset& d, std::size_t n) {
  std::vector<std::size_t> idx(std::min(n, d.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return d.subset(idx);
}

Dataset tail_of(const Dataset& d, std::size_t from) {
  std::vector<std::size_t> idx;
  for (std::size_t i = from; i < d.size(); ++i) idx.push_back(i);
  return d.subset(idx);
}

IcTrainConfig ic_config(const IcConfig& c) {
  IcTrainConfig out;
  out.epochs = c.epochs;
  out.batch = c.batch;
  out.lr = c.lr;
  out.momentum = c.momentum;
  out.clip_norm = c.clip_norm;
  return out;
}

std::vector<std::size_t> ic_positions(const ExperimentConfig& cfg, const MultiExitModel& base) {
  if (!cfg.model.ic_positions.empty()) return cfg.model.ic_positions;
  return base.backbone().exit_points();
}

std::size_t hamming(const MultiExitModel& a, const MultiExitModel& b) {
  return io::checkpoint_hamming(io::serialize_model(a), io::serialize_model(b));
}

/// Copies the backbone codes of `source` into a model sharing its backbone.
MultiExitModel with_backbone_of(const MultiExitModel& target, const MultiExitModel& source) {
  MultiExitModel out = target;
  for (std::size_t id = 0; id < source.backbone_param_layers(); ++id) {
    const auto& src = source.codes(id).codes;
    const auto& dst = out.codes(id).codes;
    for (std::size_t i = 0; i < src.size(); ++i)
      if (src[i] != dst[i]) out.set_code(id, i, src[i]);
  }
  return out;
}

attacks::FlipPlan prefix(const attacks::FlipPlan& plan, std::size_t n) {
  attacks::FlipPlan out = plan;
  if (out.flips.size() > n) {
    out.flips.resize(n);
    out.complete = false;
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Stages

ExperimentData load_experiment_data(const DataConfig& cfg, std::uint64_t seed) {
  Dataset train, test;
  if (cfg.source == "cifar10") {
    train = load_cifar10_binary(cfg.train_path, Split::train);
    test = load_cifar10_binary(cfg.test_path, Split::test);
  } else {
    SynthConfig sc;
    sc.seed = seed;
    sc.classes = cfg.classes;
    sc.per_class = cfg.per_class;
    sc.size = cfg.size;
    sc.margin = cfg.margin;
    sc.noise = cfg.noise;
    sc.max_shift = cfg.max_shift;
    auto splits = synth_splits(sc, cfg.test_per_class);
    train = std::move(splits.train);
    test = std::move(splits.test);
  }
  const auto n_att = static_cast<std::size_t>(cfg.attacker_fraction * static_cast<double>(test.size()));
  if (n_att == 0 || n_att >= test.size())
    throw std::invalid_argument("test split too small for the attacker/evaluation division");
  ExperimentData d;
  d.train = std::move(train);
  d.attacker = head_of(test, n_att);
  d.eval = tail_of(test, n_att);
  return d;
}

MultiExitModel train_base_model(const ExperimentConfig& cfg, const Dataset& train) {
  if (train.size() == 0) throw std::invalid_argument("empty training set");
  const auto& shape = train.images.front().shape();
  DeskArch arch;
  arch.channels = shape[0];
  arch.size = shape[1];
  arch.classes = train.classes;
  arch.widths = cfg.model.widths;
  nn::Network net = make_desk_backbone(arch);
  Rng rng(cfg.seeds.backbone);
  net.init_he(rng);
  nn::TrainConfig tc;
  tc.epochs = cfg.model.epochs;
  tc.batch = cfg.model.batch;
  tc.lr = cfg.model.lr;
  tc.momentum = cfg.model.momentum;
  nn::fit(net, train.images, train.labels, tc, rng);
  return MultiExitModel::from_backbone(std::move(net));
}

MultiExitModel train_sdn_model(const ExperimentConfig& cfg, const MultiExitModel& base,
                               const Dataset& train) {
  const auto pos = ic_positions(cfg, base);
  Rng rng(cfg.seeds.ics);
  return train_ics(attach_ics(base, pos, rng), train.images, train.labels, ic_config(cfg.ics), rng);
}

MultiExitModel train_aegis_model(const ExperimentConfig& cfg, const MultiExitModel& base,
                                 const MultiExitModel& sdn, const Dataset& train) {
  const Dataset vpa_set = head_of(train, cfg.rob.samples);
  rob::VpaConfig vc;
  vc.k_per_iter = cfg.rob.k_per_iter;
  vc.n_vpa = cfg.rob.n_vpa;
  vc.batch = cfg.rob.batch;
  Rng vr(cfg.seeds.vpa);
  const auto surrogate = rob::vpa(sdn, vpa_set.images, vpa_set.labels, vc, vr);
  const auto pos = ic_positions(cfg, base);
  Rng rng(cfg.seeds.ics);
  return rob::rob_train_ics(attach_ics(base, pos, rng), surrogate, train.images, train.labels,
                            ic_config(cfg.ics), cfg.rob.mix, rng);
}

TuneResult select_policy(const ExperimentConfig& cfg, const MultiExitModel& aegis,
                         const Dataset& train) {
  if (cfg.policy.tune)
    return tune_policy(aegis, train.images, train.labels, cfg.policy.taus, cfg.policy.qs,
                       cfg.policy.max_acc_drop, cfg.seeds.policy);
  TuneResult r;
  r.policy = ExitPolicy{cfg.policy.tau, cfg.policy.q, cfg.seeds.policy, {}};
  r.policy.validate(aegis.exit_count());
  return r;
}

// ---------------------------------------------------------------------------
// Experiment

Experiment::Experiment(ExperimentConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

const ExperimentData& Experiment::data() {
  if (!data_) data_ = in_stage("data", [&] { return load_experiment_data(cfg_.data, cfg_.seeds.data); });
  return *data_;
}

const MultiExitModel& Experiment::base() {
  if (!base_) {
    if (!cfg_.checkpoints.base.empty())
      base_ = in_stage("train", [&] { return io::load_checkpoint(cfg_.checkpoints.base); });
    else {
      const auto& d = data();
      base_ = in_stage("train", [&] { return train_base_model(cfg_, d.train); });
    }
  }
  return *base_;
}

const MultiExitModel& Experiment::sdn() {
  if (!sdn_) {
    if (!cfg_.checkpoints.sdn.empty())
      sdn_ = in_stage("attach-ics", [&] { return io::load_checkpoint(cfg_.checkpoints.sdn); });
    else {
      const auto& b = base();
      const auto& d = data();
      sdn_ = in_stage("attach-ics", [&] { return train_sdn_model(cfg_, b, d.train); });
    }
  }
  return *sdn_;
}

const MultiExitModel& Experiment::aegis() {
  if (!aegis_) {
    if (!cfg_.checkpoints.aegis.empty())
      aegis_ = in_stage("rob", [&] { return io::load_checkpoint(cfg_.checkpoints.aegis); });
    else {
      const auto& b = base();
      const auto& s = sdn();
      const auto& d = data();
      aegis_ = in_stage("rob", [&] { return train_aegis_model(cfg_, b, s, d.train); });
    }
  }
  return *aegis_;
}

const ExitPolicy& Experiment::policy() {
  if (!policy_) {
    const auto& a = aegis();
    const auto& d = data();
    policy_ = in_stage("policy", [&] { return select_policy(cfg_, a, d.train); });
  }
  return policy_->policy;
}

const std::vector<PolicyScore>& Experiment::policy_grid() {
  policy();
  return policy_->grid;
}

const MultiExitModel& Experiment::model_for(Defense d) {
  switch (d) {
    case Defense::base:
      return base();
    case Defense::sdn:
    case Defense::desdn:
      return sdn();
    case Defense::aegis:
      return aegis();
  }
  throw std::logic_error("unknown defense");
}

std::vector<Defense> Experiment::defenses() const {
  std::vector<Defense> out;
  for (const auto& name : cfg_.eval.defenses) out.push_back(defense_from_string(name));
  return out;
}

struct Experiment::AttackOutcome {
  std::string name;
  /// plans[d][s]: defense d, attacked sample s (one entry unless sample-wise).
  std::vector<std::vector<attacks::FlipPlan>> plans;
  std::vector<std::size_t> samples;  // evaluation-set indices (sample-wise)
  std::vector<std::size_t> targets;
};

Experiment::AttackOutcome Experiment::attack(std::size_t n_b_max, const ExitPolicy& pol,
                                             std::span<const Defense> defs) {
  const auto& d = data();
  for (Defense def : defs) model_for(def);
  const AttackConfig& ac = cfg_.attack;
  const std::uint64_t seed = cfg_.seeds.attack;

  return in_stage("attack", [&] {
    AttackOutcome out;
    out.name = ac.name;
    if (ac.name == "talbf") {
      const auto& b = base();
      for (std::size_t k = 0; k < d.eval.size() && out.samples.size() < ac.talbf.samples; ++k) {
        const std::size_t y = d.eval.labels[k];
        if (ic_predict(b, b.final_exit(), d.eval.images[k]).label != y) continue;
        out.samples.push_back(k);
        out.targets.push_back((y + 1 + k % (d.eval.classes - 1)) % d.eval.classes);
      }
    }

    // Plans depend on the model attacked; identical models share them.
    std::map<const MultiExitModel*, std::vector<attacks::FlipPlan>> cache;
    const auto plans_on = [&](const MultiExitModel& m, bool adaptive) {
      std::vector<attacks::FlipPlan> plans;
      attacks::AttackBudget budget;
      budget.n_b_max = n_b_max;
      budget.include_ics = adaptive;
      if (ac.name == "tbt") {
        attacks::TbtConfig c;
        c.target = ac.target;
        c.w_b = ac.tbt.w_b;
        c.tap = ac.tbt.tap;
        c.trigger_lr = ac.tbt.trigger_lr;
        c.trigger_iters = ac.tbt.trigger_iters;
        c.trigger_batch = ac.tbt.trigger_batch;
        c.activation_goal = ac.tbt.activation_goal;
        c.weight_steps = ac.tbt.weight_steps;
        c.weight_lr = ac.tbt.weight_lr;
        c.samples = ac.tbt.samples;
        c.seed = seed;
        budget.scope = attacks::final_layer_scope(m, adaptive);
        plans.push_back(attacks::tbt(m, d.attacker.images, d.attacker.labels, c, budget));
      } else if (ac.name == "proflip") {
        attacks::ProflipConfig c;
        c.target = ac.target;
        c.k_points = ac.proflip.k_points;
        c.tap = ac.proflip.tap;
        c.n_salient = ac.proflip.n_salient;
        c.trigger_lr = ac.proflip.trigger_lr;
        c.trigger_iters = ac.proflip.trigger_iters;
        c.trigger_batch = ac.proflip.trigger_batch;
        c.activation_goal = ac.proflip.activation_goal;
        c.salient_weight = ac.proflip.salient_weight;
        c.candidates = ac.proflip.candidates;
        c.samples = ac.proflip.samples;
        c.max_iters = ac.proflip.max_iters;
        c.plateau_window = ac.proflip.plateau_window;
        c.plateau_gain = ac.proflip.plateau_gain;
        c.seed = seed;
        if (ac.proflip.shallow) {
          plans.push_back(attacks::shallow_proflip(m, d.attacker.images, d.attacker.labels, c, n_b_max));
        } else {
          budget.scope = attacks::backbone_scope(m, adaptive);
          plans.push_back(attacks::proflip(m, d.attacker.images, d.attacker.labels, c, budget));
        }
      } else if (ac.name == "talbf") {
        attacks::TalbfConfig c;
        c.aux_n = ac.talbf.aux_n;
        c.k_init = ac.talbf.k_init;
        c.k_searches = ac.talbf.k_searches;
        c.lambda_init = ac.talbf.lambda_init;
        c.lambda_searches = ac.talbf.lambda_searches;
        c.margin = ac.talbf.margin;
        budget.scope = attacks::final_layer_scope(m, adaptive);
        for (std::size_t s = 0; s < out.samples.size(); ++s) {
          const std::size_t k = out.samples[s];
          plans.push_back(attacks::talbf(m, d.eval.images[k], d.eval.labels[k], out.targets[s],
                                         d.attacker.images, c, budget));
        }
      } else {
        attacks::FlipPlan none;
        none.attack = "none";
        plans.push_back(none);
      }
      return plans;
    };

    for (Defense def : defs) {
      const MultiExitModel& m = model_for(def);
      if (ac.name == "untargeted") {
        // The stopping rule reads accuracy under the defense itself.
        const MultiExitModel& attacked = ac.adaptive ? m : base();
        attacks::UntargetedConfig uc;
        uc.batch = ac.untargeted.batch;
        uc.target_acc = ac.untargeted.target_acc;
        attacks::AttackBudget budget;
        budget.n_b_max = n_b_max;
        budget.include_ics = ac.adaptive;
        budget.scope = attacks::backbone_scope(attacked, ac.adaptive);
        const auto accuracy = [&](const MultiExitModel& cand) {
          const MultiExitModel served = ac.adaptive ? cand : with_backbone_of(m, cand);
          return defended_accuracy(served, def, d.eval.images, d.eval.labels, pol, 1);
        };
        out.plans.push_back(
            {attacks::untargeted_bfa(attacked, d.attacker.images, d.attacker.labels, uc, budget, accuracy)});
        continue;
      }
      const MultiExitModel& attacked = ac.adaptive ? m : base();
      auto it = cache.find(&attacked);
      if (it == cache.end()) it = cache.emplace(&attacked, plans_on(attacked, ac.adaptive)).first;
      out.plans.push_back(it->second);
    }
    return out;
  });
}

std::vector<DefenseReport> Experiment::evaluate(const AttackOutcome& outcome, const ExitPolicy& pol,
                                                std::span<const Defense> defs, bool usage) {
  const auto& d = data();
  const std::size_t reps = cfg_.eval.reps;
  const std::size_t acc_reps = cfg_.eval.acc_reps;
  const std::size_t target = cfg_.attack.target;

  return in_stage("evaluate", [&] {
    std::vector<DefenseReport> reports;
    for (std::size_t i = 0; i < defs.size(); ++i) {
      const Defense def = defs[i];
      const MultiExitModel& m = model_for(def);
      const auto& plans = outcome.plans[i];
      DefenseReport r;
      r.defense = std::string(to_string(def));
      r.acc_clean_before = defended_accuracy(m, def, d.eval.images, d.eval.labels, pol, acc_reps);
      r.model_bytes = m.model_bytes();
      if (usage) {
        const auto u = defended_exit_usage(m, def, d.eval.images, pol, acc_reps);
        r.exit_histogram = u.histogram;
        r.mean_layers = u.mean_layers;
        r.layer_ratio = u.mean_layers / static_cast<double>(m.backbone().size());
      }

      if (!outcome.samples.empty()) {
        const std::size_t n = d.eval.size();
        const std::size_t er = effective_reps(def, reps);
        double hits = 0.0, acc = 0.0, nb = 0.0;
        for (std::size_t s = 0; s < plans.size(); ++s) {
          const MultiExitModel attacked = attacks::apply_plan(m, plans[s]);
          const std::size_t k = outcome.samples[s];
          for (std::size_t rep = 0; rep < er; ++rep)
            hits += defended_predict(attacked, def, d.eval.images[k], pol, rep * n + k).label ==
                    outcome.targets[s];
          acc += defended_accuracy(attacked, def, d.eval.images, d.eval.labels, pol, acc_reps);
          const std::size_t h = hamming(m, attacked);
          r.n_b_samples.push_back(h);
          nb += static_cast<double>(h);
          r.complete = r.complete && plans[s].complete;
        }
        const double count = static_cast<double>(plans.size());
        r.asr = plans.empty() ? 0.0 : 100.0 * hits / (count * static_cast<double>(er));
        r.acc_clean_after = plans.empty() ? r.acc_clean_before : acc / count;
        r.n_b = plans.empty() ? 0.0 : nb / count;
      } else if (outcome.name == "talbf") {
        r.acc_clean_after = r.acc_clean_before;
      } else {
        const auto& plan = plans.front();
        const MultiExitModel attacked = attacks::apply_plan(m, plan);
        r.acc_clean_after = defended_accuracy(attacked, def, d.eval.images, d.eval.labels, pol, acc_reps);
        if (outcome.name == "untargeted") {
          r.asr = 100.0 - r.acc_clean_after;
        } else {
          const auto xs = plan.trigger ? attacks::apply_trigger(d.eval.images, *plan.trigger) : d.eval.images;
          r.asr = defended_asr(attacked, def, xs, d.eval.labels, target, pol, reps);
        }
        r.n_b = static_cast<double>(hamming(m, attacked));
        r.complete = plan.complete;
      }
      reports.push_back(std::move(r));
    }
    return reports;
  });
}

std::vector<attacks::FlipPlan> Experiment::plans_against(Defense d) {
  const ExitPolicy pol = policy();
  const Defense defs[] = {d};
  return attack(cfg_.attack.n_b_max, pol, defs).plans.front();
}

AttackReport Experiment::run(bool write_artifacts) {
  const auto start = std::chrono::steady_clock::now();
  AttackReport report;
  report.attack = cfg_.attack.name;
  report.adaptive = cfg_.attack.adaptive;
  report.n_b_max = cfg_.attack.n_b_max;
  report.target = cfg_.attack.target;

  const ExitPolicy pol = policy();
  const auto defs = defenses();
  report.tau = pol.tau;
  report.q = pol.q;
  const auto outcome = attack(cfg_.attack.n_b_max, pol, defs);
  report.defenses = evaluate(outcome, pol, defs, true);

  for (std::size_t b : cfg_.eval.curve_budgets) {
    CurvePoint cp;
    cp.n_b_max = b;
    if (outcome.name == "untargeted") {
      // Greedy runs with a smaller budget are prefixes of the full run.
      AttackOutcome cut = outcome;
      for (auto& plans : cut.plans)
        for (auto& p : plans) p = prefix(p, b);
      for (const auto& r : evaluate(cut, pol, defs, false)) cp.asr.push_back(r.asr);
    } else {
      for (const auto& r : evaluate(attack(b, pol, defs), pol, defs, false)) cp.asr.push_back(r.asr);
    }
    report.curve.push_back(std::move(cp));
  }

  if (write_artifacts) {
    in_stage("evaluate", [&] {
      const std::filesystem::path dir = cfg_.output.dir;
      std::map<const attacks::FlipPlan*, std::string> written;
      for (std::size_t i = 0; i < report.defenses.size(); ++i) {
        const auto& plans = outcome.plans[i];
        std::string names;
        for (std::size_t s = 0; s < plans.size(); ++s) {
          std::string file = "plan";
          if (cfg_.attack.adaptive || outcome.name == "untargeted") file += "_" + report.defenses[i].defense;
          if (plans.size() > 1) file += "_" + std::to_string(s);
          file += ".json";
          const std::string text = flips_to_json(plans[s].flips);
          io::write_file(dir / file, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
          if (s == 0) names = file;
          if (plans[s].trigger && report.trigger_file.empty()) {
            report.trigger_file = "trigger.ppm";
            io::write_ppm(dir / report.trigger_file, plans[s].trigger->patch);
          }
        }
        report.defenses[i].plan_file = names;
      }
      return 0;
    });
  }

  if (cfg_.output.include_runtime)
    report.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

SweepTable Experiment::sweep(std::span<const double> taus, std::span<const std::size_t> qs) {
  if (taus.empty() || qs.empty()) throw std::invalid_argument("sweep: empty grid");
  SweepTable table;
  const auto& a = aegis();
  const auto& d = data();
  const double final_acc = exit_accuracy(a, a.final_exit(), d.eval.images, d.eval.labels);
  const bool per_policy = cfg_.attack.name == "untargeted";
  const auto defs = defenses();
  std::optional<AttackOutcome> shared;
  double lo = 0.0, hi = 0.0;
  std::size_t admissible = 0;
  for (double tau : taus)
    for (std::size_t q : qs) {
      ExitPolicy pol{tau, q, cfg_.seeds.policy, {}};
      pol.validate(a.exit_count());
      if (!per_policy && !shared) shared = attack(cfg_.attack.n_b_max, pol, defs);
      const AttackOutcome outcome = per_policy ? attack(cfg_.attack.n_b_max, pol, defs) : *shared;
      SweepCell cell;
      cell.tau = tau;
      cell.q = q;
      cell.defenses = evaluate(outcome, pol, defs, true);
      const auto it = std::find_if(cell.defenses.begin(), cell.defenses.end(),
                                   [](const DefenseReport& r) { return r.defense == "aegis"; });
      if (it != cell.defenses.end() && it->acc_clean_before >= final_acc - cfg_.policy.max_acc_drop) {
        cell.admissible = true;
        lo = admissible == 0 ? it->asr : std::min(lo, it->asr);
        hi = admissible == 0 ? it->asr : std::max(hi, it->asr);
        ++admissible;
      }
      table.cells.push_back(std::move(cell));
    }
  table.asr_spread = admissible >= 2 ? hi - lo : 0.0;
  return table;
}

AttackReport run_experiment(const ExperimentConfig& cfg) {
  AttackReport report;
  report.attack = cfg.attack.name;
  report.adaptive = cfg.attack.adaptive;
  report.n_b_max = cfg.attack.n_b_max;
  report.target = cfg.attack.target;
  try {
    try {
      cfg.validate();
    } catch (const std::exception& e) {
      throw StageError("config", e.what());
    }
    Experiment ex(cfg);
    report = ex.run(true);
  } catch (const StageError& e) {
    report.status = "failed";
    report.failed_stage = e.stage();
    report.error = e.what();
    report.defenses.clear();
    report.curve.clear();
  }
  const std::filesystem::path dir = cfg.output.dir;
  const auto put = [&](const char* name, const std::string& text) {
    io::write_file(dir / name, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  };
  put("report.json", report_to_json(report));
  if (!report.curve.empty()) put("curve.csv", curve_to_csv(report));
  return report;
}

// ---------------------------------------------------------------------------
// Serialization

const DefenseReport* AttackReport::find(std::string_view defense) const {
  for (const auto& d : defenses)
    if (d.defense == defense) return &d;
  return nullptr;
}

std::string report_to_json(const AttackReport& r) {
  ordered_json j;
  j["status"] = r.status;
  if (r.status != "ok") {
    j["failed_stage"] = r.failed_stage;
    j["error"] = r.error;
  }
  j["attack"] = r.attack;
  j["adaptive"] = r.adaptive;
  j["n_b_max"] = r.n_b_max;
  j["target"] = r.target;
  j["policy"] = {{"tau", r.tau}, {"q", r.q}};
  ordered_json defs = ordered_json::array();
  for (const auto& d : r.defenses) {
    ordered_json e;
    e["defense"] = d.defense;
    e["acc_clean_before"] = d.acc_clean_before;
    e["acc_clean_after"] = d.acc_clean_after;
    e["asr"] = d.asr;
    e["n_b"] = d.n_b;
    if (!d.n_b_samples.empty()) e["n_b_samples"] = d.n_b_samples;
    e["complete"] = d.complete;
    e["exit_histogram"] = d.exit_histogram;
    e["mean_layers"] = d.mean_layers;
    e["layer_ratio"] = d.layer_ratio;
    e["model_bytes"] = d.model_bytes;
    e["plan_file"] = d.plan_file;
    defs.push_back(std::move(e));
  }
  j["defenses"] = std::move(defs);
  ordered_json curve = ordered_json::array();
  for (const auto& p : r.curve) {
    ordered_json asr;
    for (std::size_t i = 0; i < p.asr.size() && i < r.defenses.size(); ++i) asr[r.defenses[i].defense] = p.asr[i];
    curve.push_back({{"n_b_max", p.n_b_max}, {"asr", asr}});
  }
  j["curve"] = std::move(curve);
  j["trigger_file"] = r.trigger_file;
  if (r.runtime_seconds) j["runtime_seconds"] = *r.runtime_seconds;
  return j.dump(2) + "\n";
}

namespace {

std::vector<std::size_t> column_order(const std::vector<DefenseReport>& defs) {
  std::vector<std::size_t> order;
  for (const char* lead : {"base", "aegis"})
    for (std::size_t i = 0; i < defs.size(); ++i)
      if (defs[i].defense == lead) order.push_back(i);
  for (std::size_t i = 0; i < defs.size(); ++i)
    if (defs[i].defense != "base" && defs[i].defense != "aegis") order.push_back(i);
  return order;
}

// Shortest text that parses back to v.
std::string number(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

std::string curve_to_csv(const AttackReport& r) {
  const auto order = column_order(r.defenses);
  std::string out = "n_b";
  for (std::size_t i : order) out += ",asr_" + r.defenses[i].defense;
  out += "\n";
  for (const auto& p : r.curve) {
    out += std::to_string(p.n_b_max);
    for (std::size_t i : order) out += "," + number(p.asr.at(i));
    out += "\n";
  }
  return out;
}

std::string sweep_to_csv(const SweepTable& t) {
  std::string out = "tau,q,admissible";
  if (t.cells.empty()) return out + "\n";
  const auto order = column_order(t.cells.front().defenses);
  for (std::size_t i : order) {
    const auto& name = t.cells.front().defenses[i].defense;
    out += ",acc_" + name + ",asr_" + name;
  }
  out += "\n";
  for (const auto& c : t.cells) {
    out += number(c.tau) + "," + std::to_string(c.q) + "," + (c.admissible ? "1" : "0");
    for (std::size_t i : order)
      out += "," + number(c.defenses[i].acc_clean_before) + "," + number(c.defenses[i].asr);
    out += "\n";
  }
  return out;
}

std::string flips_to_json(std::span<const quant::BitLocation> flips) {
  ordered_json j = ordered_json::array();
  for (const auto& f : flips) j.push_back({{"layer", f.layer_id}, {"index", f.flat_index}, {"bit", f.bit}});
  return j.dump(2) + "\n";
}

std::vector<quant::BitLocation> flips_from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const ordered_json::parse_error& e) {
    throw std::invalid_argument(std::string("flip plan: ") + e.what());
  }
  if (!j.is_array()) throw std::invalid_argument("flip plan: expected an array");
  std::vector<quant::BitLocation> out;
  std::set<quant::BitLocation> seen;
  for (const auto& e : j) {
    if (!e.is_object() || e.size() != 3 || !e.contains("layer") || !e.contains("index") || !e.contains("bit"))
      throw std::invalid_argument("flip plan: entries need exactly layer, index and bit");
    for (const char* k : {"layer", "index", "bit"})
      if (!e[k].is_number_unsigned()) throw std::invalid_argument(std::string("flip plan: bad ") + k);
    quant::BitLocation loc{e["layer"].get<std::size_t>(), e["index"].get<std::size_t>(), e["bit"].get<unsigned>()};
    if (loc.bit > 7) throw std::invalid_argument("flip plan: bit out of range");
    if (!seen.insert(loc).second) throw std::invalid_argument("flip plan: repeated bit");
    out.push_back(loc);
  }
  return out;
}

}  // namespace aegis
