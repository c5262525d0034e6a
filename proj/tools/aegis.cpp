// Command-line front end for the experiment pipeline.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "aegis/checkpoint.hpp"
#include "aegis/config.hpp"
#include "aegis/experiment.hpp"
#include "aegis/image.hpp"

namespace fs = std::filesystem;
using namespace aegis;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Experiment configuration (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Master seed; derives every stage seed");
  cmd->add_option("--out", c.out, "Output directory");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  if (c.seed) apply_master_seed(cfg, *c.seed);
  if (!c.out.empty()) cfg.output.dir = c.out;
  cfg.validate();
  return cfg;
}

// Earlier stages' checkpoints in the output directory stand in for training.
void reuse_checkpoints(ExperimentConfig& cfg, const fs::path& out, std::string_view producing) {
  const std::pair<std::string*, const char*> slots[] = {
      {&cfg.checkpoints.base, "base"}, {&cfg.checkpoints.sdn, "sdn"}, {&cfg.checkpoints.aegis, "aegis"}};
  for (const auto& [slot, name] : slots) {
    if (name == producing) break;
    const fs::path p = out / (std::string(name) + ".aegs");
    if (slot->empty() && fs::exists(p)) {
      *slot = p.string();
      std::cout << "using " << p.string() << "\n";
    }
  }
}

void write_text(const fs::path& path, const std::string& text) {
  io::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  std::cout << "wrote " << path.string() << "\n";
}

void save(const MultiExitModel& m, const fs::path& path) {
  io::save_checkpoint(m, path);
  std::cout << "wrote " << path.string() << "\n";
}

std::string number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"aegis: multi-exit defense against bit-flip attacks"};
  app.require_subcommand(1);

  Common c;
  std::string defense = "aegis";
  std::vector<double> taus;
  std::vector<std::size_t> qs;
  bool print_schema = false;

  auto* train = app.add_subcommand("train", "Train and quantize the backbone");
  auto* attach = app.add_subcommand("attach-ics", "Attach and train internal classifiers");
  auto* rob = app.add_subcommand("rob", "Train internal classifiers with flipped features");
  auto* attack = app.add_subcommand("attack", "Plan an attack against one defense");
  auto* evaluate = app.add_subcommand("evaluate", "Full protocol: attack every defense and report");
  auto* exits = app.add_subcommand("exits", "Exit-usage histogram of a defense");
  auto* sweep = app.add_subcommand("sweep", "Sensitivity of the exit policy over (tau, q)");
  for (auto* cmd : {train, attach, rob, attack, evaluate, exits, sweep}) add_common(cmd, c);
  for (auto* cmd : {attack, exits})
    cmd->add_option("--defense", defense, "base, sdn, desdn or aegis")->capture_default_str();
  sweep->add_option("--taus", taus, "Threshold grid (default: policy.taus)")->delimiter(',');
  sweep->add_option("--qs", qs, "Candidate-count grid (default: policy.qs)")->delimiter(',');
  app.add_flag("--schema", print_schema, "Print the configuration schema and exit");
  app.require_subcommand(0, 1);

  CLI11_PARSE(app, argc, argv);

  if (print_schema) {
    std::cout << config_schema();
    return 0;
  }
  if (app.get_subcommands().empty()) {
    std::cerr << app.help();
    return 2;
  }

  ExperimentConfig cfg;
  try {
    cfg = resolve(c);
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }
  const fs::path out = cfg.output.dir;
  reuse_checkpoints(cfg, out, *train ? "base" : *attach ? "sdn" : *rob ? "aegis" : "");

  try {
    if (*evaluate) {
      const auto report = run_experiment(cfg);
      std::cout << "wrote " << (out / "report.json").string() << "\n";
      if (report.status != "ok") {
        std::cerr << "failed at stage " << report.failed_stage << ": " << report.error << "\n";
        return 1;
      }
      for (const auto& d : report.defenses)
        std::cout << d.defense << ": asr " << number(d.asr) << " acc " << number(d.acc_clean_before)
                  << " -> " << number(d.acc_clean_after) << " n_b " << number(d.n_b) << "\n";
      return 0;
    }

    Experiment ex(cfg);
    if (*train) {
      save(ex.base(), out / "base.aegs");
    } else if (*attach) {
      save(ex.sdn(), out / "sdn.aegs");
    } else if (*rob) {
      save(ex.aegis(), out / "aegis.aegs");
    } else if (*attack) {
      const Defense d = defense_from_string(defense);
      const auto plans = ex.plans_against(d);
      for (std::size_t i = 0; i < plans.size(); ++i) {
        const std::string suffix = plans.size() > 1 ? "_" + std::to_string(i) : "";
        write_text(out / ("plan" + suffix + ".json"), flips_to_json(plans[i].flips));
        save(attacks::apply_plan(ex.model_for(d), plans[i]), out / ("attacked" + suffix + ".aegs"));
      }
      if (!plans.empty() && plans.front().trigger) {
        io::write_ppm(out / "trigger.ppm", plans.front().trigger->patch);
        std::cout << "wrote " << (out / "trigger.ppm").string() << "\n";
      }
    } else if (*exits) {
      const Defense d = defense_from_string(defense);
      const auto usage = defended_exit_usage(ex.model_for(d), d, ex.data().eval.images, ex.policy(),
                                             cfg.eval.acc_reps);
      std::string csv = "exit_index,proportion\n";
      for (std::size_t i = 0; i < usage.histogram.size(); ++i)
        csv += std::to_string(i) + "," + number(usage.histogram[i]) + "\n";
      write_text(out / "exits.csv", csv);
    } else if (*sweep) {
      if (taus.empty()) taus = cfg.policy.taus;
      if (qs.empty()) qs = cfg.policy.qs;
      const auto table = ex.sweep(taus, qs);
      write_text(out / "sweep.csv", sweep_to_csv(table));
      std::cout << "aegis asr spread over admissible settings: " << number(table.asr_spread) << "\n";
    }
  } catch (const StageError& e) {
    std::cerr << "failed at stage " << e.stage() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
  return 0;
}
