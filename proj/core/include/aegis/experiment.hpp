#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "aegis/attacks.hpp"
#include "aegis/config.hpp"
#include "aegis/dataset.hpp"
#include "aegis/desdn.hpp"
#include "aegis/metrics.hpp"
#include "aegis/multiexit.hpp"

namespace aegis {

/// Pipeline stage names, in execution order.
inline constexpr const char* kStages[] = {"config", "data",   "train",   "attach-ics",
                                          "rob",    "policy", "attack", "evaluate"};

/// Failure inside one pipeline stage.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct ExperimentData {
  Dataset train;
  Dataset attacker;  // leading share of the test split
  Dataset eval;      // remaining test samples
};

ExperimentData load_experiment_data(const DataConfig& cfg, std::uint64_t seed);

MultiExitModel train_base_model(const ExperimentConfig& cfg, const Dataset& train);
/// Backbone with normally trained ICs; shared by the SDN and DESDN defenses.
MultiExitModel train_sdn_model(const ExperimentConfig& cfg, const MultiExitModel& base,
                               const Dataset& train);
/// Backbone with ROB-trained ICs. The VPA surrogate is built from `sdn`.
MultiExitModel train_aegis_model(const ExperimentConfig& cfg, const MultiExitModel& base,
                                 const MultiExitModel& sdn, const Dataset& train);
/// Tuned policy when cfg.policy.tune, else the fixed (tau, q).
TuneResult select_policy(const ExperimentConfig& cfg, const MultiExitModel& aegis,
                         const Dataset& train);

struct DefenseReport {
  std::string defense;
  double acc_clean_before = 0.0;  // percent
  double acc_clean_after = 0.0;
  /// Targeted attacks: success rate. Untargeted: error rate after the attack.
  double asr = 0.0;
  /// Flipped bits recounted from checkpoint bytes; the mean over attacked
  /// samples for sample-wise attacks.
  double n_b = 0.0;
  std::vector<std::size_t> n_b_samples;  // sample-wise attacks only
  bool complete = true;
  std::vector<double> exit_histogram;  // clean evaluation set
  double mean_layers = 0.0;
  double layer_ratio = 0.0;  // mean_layers / backbone depth
  std::size_t model_bytes = 0;
  std::string plan_file;
};

struct CurvePoint {
  std::size_t n_b_max = 0;
  std::vector<double> asr;  // aligned with AttackReport::defenses
};

struct AttackReport {
  std::string status = "ok";  // "ok" or "failed"
  std::string failed_stage;
  std::string error;
  std::string attack;
  bool adaptive = false;
  std::size_t n_b_max = 0;
  std::size_t target = 0;
  double tau = 0.0;
  std::size_t q = 0;
  std::vector<DefenseReport> defenses;
  std::vector<CurvePoint> curve;
  std::string trigger_file;
  std::optional<double> runtime_seconds;

  const DefenseReport* find(std::string_view defense) const;
};

std::string report_to_json(const AttackReport& report);
/// Columns n_b, asr_<defense>...; base and aegis lead when present.
std::string curve_to_csv(const AttackReport& report);

/// FlipPlan file: a JSON array of {"layer", "index", "bit"} objects.
std::string flips_to_json(std::span<const quant::BitLocation> flips);
std::vector<quant::BitLocation> flips_from_json(const std::string& text);

struct SweepCell {
  double tau = 0.0;
  std::size_t q = 0;
  bool admissible = false;  // Aegis clean ACC within policy.max_acc_drop
  std::vector<DefenseReport> defenses;
};

struct SweepTable {
  std::vector<SweepCell> cells;
  /// max - min Aegis ASR over admissible cells; 0 when fewer than two.
  double asr_spread = 0.0;
};

std::string sweep_to_csv(const SweepTable& table);

/// Lazily executed pipeline. Each stage runs at most once; checkpoint paths
/// in the config replace the corresponding training stage.
class Experiment {
 public:
  explicit Experiment(ExperimentConfig cfg);

  const ExperimentConfig& config() const { return cfg_; }
  const ExperimentData& data();
  const MultiExitModel& base();
  const MultiExitModel& sdn();
  const MultiExitModel& aegis();
  const ExitPolicy& policy();
  const std::vector<PolicyScore>& policy_grid();

  /// Model serving a defense: base, sdn (for sdn and desdn) or aegis.
  const MultiExitModel& model_for(Defense d);

  /// Plans of the configured attack against one defense; several for
  /// sample-wise attacks.
  std::vector<attacks::FlipPlan> plans_against(Defense d);

  /// Attack and evaluation under the selected policy. Plan files and the
  /// trigger image go to the output directory when `write_artifacts`.
  AttackReport run(bool write_artifacts = false);
  /// Evaluation of the same attack under every (tau, q); a singleton grid
  /// reproduces run() with that fixed policy.
  SweepTable sweep(std::span<const double> taus, std::span<const std::size_t> qs);

 private:
  struct AttackOutcome;
  AttackOutcome attack(std::size_t n_b_max, const ExitPolicy& policy,
                       std::span<const Defense> defs);
  std::vector<DefenseReport> evaluate(const AttackOutcome& outcome, const ExitPolicy& policy,
                                      std::span<const Defense> defs, bool usage);
  std::vector<Defense> defenses() const;

  ExperimentConfig cfg_;
  std::optional<ExperimentData> data_;
  std::optional<MultiExitModel> base_, sdn_, aegis_;
  std::optional<TuneResult> policy_;
};

/// Runs every stage; a failing stage yields a report naming it.
AttackReport run_experiment(const ExperimentConfig& cfg);

}  // namespace aegis
