#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace aegis {

struct DataConfig {
  std::string source = "synthetic";  // "synthetic" or "cifar10"
  std::string train_path;            // CIFAR-10 binary batches
  std::string test_path;
  std::size_t classes = 10;
  std::size_t per_class = 100;
  std::size_t test_per_class = 50;
  std::size_t size = 16;
  double margin = 1.5;
  double noise = 0.15;
  std::size_t max_shift = 2;
  /// Leading share of the test split given to the attacker; the rest is the
  /// evaluation set.
  double attacker_fraction = 0.5;
};

struct ModelConfig {
  std::vector<std::size_t> widths = {6, 12, 12, 16, 16, 16};
  std::size_t epochs = 30;
  std::size_t batch = 32;
  double lr = 0.05;
  double momentum = 0.9;
  /// Exit points receiving an IC; empty selects every exit point.
  std::vector<std::size_t> ic_positions;
};

struct IcConfig {
  std::size_t epochs = 20;
  std::size_t batch = 32;
  double lr = 0.01;
  double momentum = 0.9;
  double clip_norm = 5.0;
};

struct RobConfig {
  std::size_t k_per_iter = 1;
  std::size_t n_vpa = 25;
  std::size_t batch = 128;
  std::size_t samples = 512;  // leading training samples seen by VPA
  double mix = 0.5;
};

struct PolicyConfig {
  bool tune = true;
  double tau = 0.9;
  std::size_t q = 3;
  std::vector<double> taus = {0.7, 0.8, 0.9, 0.95};
  std::vector<std::size_t> qs = {1, 2, 3, 4};
  double max_acc_drop = 2.0;
};

struct TbtParams {
  std::size_t w_b = 10;
  double tap = 0.0976;
  double trigger_lr = 0.5;
  std::size_t trigger_iters = 200;
  std::size_t trigger_batch = 32;
  double activation_goal = 10.0;
  std::size_t weight_steps = 200;
  double weight_lr = 2.0;
  std::size_t samples = 256;
};

struct TalbfParams {
  std::size_t aux_n = 128;
  std::size_t k_init = 5;
  std::size_t k_searches = 6;
  double lambda_init = 100.0;
  std::size_t lambda_searches = 8;
  double margin = 3.0;
  std::size_t samples = 20;  // attacked samples
};

struct ProflipParams {
  std::size_t k_points = 20;
  double tap = 0.0976;
  std::size_t n_salient = 10;
  double trigger_lr = 0.5;
  std::size_t trigger_iters = 200;
  std::size_t trigger_batch = 32;
  double activation_goal = 10.0;
  double salient_weight = 1.0;
  std::size_t candidates = 10;
  std::size_t samples = 64;
  std::size_t max_iters = 100;
  std::size_t plateau_window = 3;
  double plateau_gain = 1.0;
  bool shallow = false;
};

struct UntargetedParams {
  std::size_t batch = 128;
  double target_acc = -1.0;  // negative: 100 / classes
};

struct AttackConfig {
  std::string name = "tbt";  // tbt | talbf | proflip | untargeted | none
  bool adaptive = false;
  std::size_t n_b_max = 50;
  std::size_t target = 2;
  TbtParams tbt;
  TalbfParams talbf;
  ProflipParams proflip;
  UntargetedParams untargeted;
};

struct EvalConfig {
  std::size_t reps = 10;
  std::size_t acc_reps = 3;
  std::vector<std::string> defenses = {"base", "sdn", "desdn", "aegis"};
  /// Budgets of the ASR-vs-N_b curve; empty skips the curve.
  std::vector<std::size_t> curve_budgets;
};

struct SeedConfig {
  std::uint64_t data = 1;
  std::uint64_t backbone = 1;
  std::uint64_t ics = 2;
  std::uint64_t vpa = 3;
  std::uint64_t policy = 7;
  std::uint64_t attack = 11;
};

/// Checkpoints loaded instead of training; empty strings train in memory.
struct CheckpointPaths {
  std::string base;
  std::string sdn;
  std::string aegis;
};

struct OutputConfig {
  std::string dir = "out";
  bool include_runtime = false;
};

struct ExperimentConfig {
  DataConfig data;
  ModelConfig model;
  IcConfig ics;
  RobConfig rob;
  PolicyConfig policy;
  AttackConfig attack;
  EvalConfig eval;
  SeedConfig seeds;
  CheckpointPaths checkpoints;
  OutputConfig output;

  /// Throws ConfigError on out-of-range values.
  void validate() const;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parses a JSON document; missing keys keep their defaults and unknown keys
/// are rejected with their JSON path.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical JSON with every key present.
std::string config_to_json(const ExperimentConfig& cfg);
/// JSON Schema (draft 2020-12) describing the accepted documents.
std::string config_schema();

/// Derives every seed from one master seed.
void apply_master_seed(ExperimentConfig& cfg, std::uint64_t seed);

}  // namespace aegis
