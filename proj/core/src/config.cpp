#include "aegis/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <type_traits>

#include "json.hpp"

namespace aegis {

using nlohmann::json;

namespace {

template <class F> void fields(F&& f, DataConfig& c) {
  f("source", c.source);
  f("train_path", c.train_path);
  f("test_path", c.test_path);
  f("classes", c.classes);
  f("per_class", c.per_class);
  f("test_per_class", c.test_per_class);
  f("size", c.size);
  f("margin", c.margin);
  f("noise", c.noise);
  f("max_shift", c.max_shift);
  f("attacker_fraction", c.attacker_fraction);
}
template <class F> void fields(F&& f, ModelConfig& c) {
  f("widths", c.widths);
  f("epochs", c.epochs);
  f("batch", c.batch);
  f("lr", c.lr);
  f("momentum", c.momentum);
  f("ic_positions", c.ic_positions);
}
template <class F> void fields(F&& f, IcConfig& c) {
  f("epochs", c.epochs);
  f("batch", c.batch);
  f("lr", c.lr);
  f("momentum", c.momentum);
  f("clip_norm", c.clip_norm);
}
template <class F> void fields(F&& f, RobConfig& c) {
  f("k_per_iter", c.k_per_iter);
  f("n_vpa", c.n_vpa);
  f("batch", c.batch);
  f("samples", c.samples);
  f("mix", c.mix);
}
template <class F> void fields(F&& f, PolicyConfig& c) {
  f("tune", c.tune);
  f("tau", c.tau);
  f("q", c.q);
  f("taus", c.taus);
  f("qs", c.qs);
  f("max_acc_drop", c.max_acc_drop);
}
template <class F> void fields(F&& f, TbtParams& c) {
  f("w_b", c.w_b);
  f("tap", c.tap);
  f("trigger_lr", c.trigger_lr);
  f("trigger_iters", c.trigger_iters);
  f("trigger_batch", c.trigger_batch);
  f("activation_goal", c.activation_goal);
  f("weight_steps", c.weight_steps);
  f("weight_lr", c.weight_lr);
  f("samples", c.samples);
}
template <class F> void fields(F&& f, TalbfParams& c) {
  f("aux_n", c.aux_n);
  f("k_init", c.k_init);
  f("k_searches", c.k_searches);
  f("lambda_init", c.lambda_init);
  f("lambda_searches", c.lambda_searches);
  f("margin", c.margin);
  f("samples", c.samples);
}
template <class F> void fields(F&& f, ProflipParams& c) {
  f("k_points", c.k_points);
  f("tap", c.tap);
  f("n_salient", c.n_salient);
  f("trigger_lr", c.trigger_lr);
  f("trigger_iters", c.trigger_iters);
  f("trigger_batch", c.trigger_batch);
  f("activation_goal", c.activation_goal);
  f("salient_weight", c.salient_weight);
  f("candidates", c.candidates);
  f("samples", c.samples);
  f("max_iters", c.max_iters);
  f("plateau_window", c.plateau_window);
  f("plateau_gain", c.plateau_gain);
  f("shallow", c.shallow);
}
template <class F> void fields(F&& f, UntargetedParams& c) {
  f("batch", c.batch);
  f("target_acc", c.target_acc);
}
template <class F> void fields(F&& f, AttackConfig& c) {
  f("name", c.name);
  f("adaptive", c.adaptive);
  f("n_b_max", c.n_b_max);
  f("target", c.target);
  f("tbt", c.tbt);
  f("talbf", c.talbf);
  f("proflip", c.proflip);
  f("untargeted", c.untargeted);
}
template <class F> void fields(F&& f, EvalConfig& c) {
  f("reps", c.reps);
  f("acc_reps", c.acc_reps);
  f("defenses", c.defenses);
  f("curve_budgets", c.curve_budgets);
}
template <class F> void fields(F&& f, SeedConfig& c) {
  f("data", c.data);
  f("backbone", c.backbone);
  f("ics", c.ics);
  f("vpa", c.vpa);
  f("policy", c.policy);
  f("attack", c.attack);
}
template <class F> void fields(F&& f, CheckpointPaths& c) {
  f("base", c.base);
  f("sdn", c.sdn);
  f("aegis", c.aegis);
}
template <class F> void fields(F&& f, OutputConfig& c) {
  f("dir", c.dir);
  f("include_runtime", c.include_runtime);
}
template <class F> void fields(F&& f, ExperimentConfig& c) {
  f("data", c.data);
  f("model", c.model);
  f("ics", c.ics);
  f("rob", c.rob);
  f("policy", c.policy);
  f("attack", c.attack);
  f("eval", c.eval);
  f("seeds", c.seeds);
  f("checkpoints", c.checkpoints);
  f("output", c.output);
}

struct Probe {
  template <class T> void operator()(const char*, T&) {}
};
template <class T>
concept Section = std::is_class_v<T> && requires(T& t) { fields(Probe{}, t); };

template <class T> struct is_vector : std::false_type {};
template <class T> struct is_vector<std::vector<T>> : std::true_type {};

[[noreturn]] void type_error(const std::string& path, const char* want) {
  throw ConfigError("config: " + path + " must be " + want);
}

template <class T> void read(const json& j, const std::string& path, T& v) {
  if constexpr (Section<T>) {
    if (!j.is_object()) type_error(path, "an object");
    std::set<std::string> known;
    fields(
        [&](const char* key, auto& field) {
          known.insert(key);
          if (j.contains(key)) read(j.at(key), path.empty() ? key : path + "." + key, field);
        },
        v);
    for (const auto& item : j.items())
      if (!known.contains(item.key()))
        throw ConfigError("config: unknown key " + (path.empty() ? item.key() : path + "." + item.key()));
  } else if constexpr (std::is_same_v<T, bool>) {
    if (!j.is_boolean()) type_error(path, "a boolean");
    v = j.get<bool>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!j.is_string()) type_error(path, "a string");
    v = j.get<std::string>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!j.is_number_unsigned()) type_error(path, "a non-negative integer");
    v = j.get<T>();
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!j.is_number()) type_error(path, "a number");
    v = j.get<T>();
  } else if constexpr (is_vector<T>::value) {
    if (!j.is_array()) type_error(path, "an array");
    v.clear();
    for (std::size_t i = 0; i < j.size(); ++i) {
      typename T::value_type e{};
      read(j[i], path + "[" + std::to_string(i) + "]", e);
      v.push_back(std::move(e));
    }
  } else {
    static_assert(sizeof(T) == 0, "unsupported config field type");
  }
}

template <class T> json write(T& v) {
  if constexpr (Section<T>) {
    json out = json::object();
    fields([&](const char* key, auto& field) { out[key] = write(field); }, v);
    return out;
  } else if constexpr (is_vector<T>::value) {
    json out = json::array();
    for (auto& e : v) out.push_back(write(e));
    return out;
  } else {
    return json(v);
  }
}

template <class T> json schema(T& v) {
  if constexpr (Section<T>) {
    json props = json::object();
    fields([&](const char* key, auto& field) { props[key] = schema(field); }, v);
    return json{{"type", "object"}, {"additionalProperties", false}, {"properties", props}};
  } else if constexpr (std::is_same_v<T, bool>) {
    return json{{"type", "boolean"}, {"default", v}};
  } else if constexpr (std::is_same_v<T, std::string>) {
    return json{{"type", "string"}, {"default", v}};
  } else if constexpr (std::is_integral_v<T>) {
    return json{{"type", "integer"}, {"minimum", 0}, {"default", v}};
  } else if constexpr (std::is_floating_point_v<T>) {
    return json{{"type", "number"}, {"default", v}};
  } else {
    typename T::value_type e{};
    json item = schema(e);
    item.erase("default");
    return json{{"type", "array"}, {"items", item}, {"default", write(v)}};
  }
}

void check(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("config: " + what);
}

}  // namespace

void ExperimentConfig::validate() const {
  check(data.source == "synthetic" || data.source == "cifar10",
        "data.source must be \"synthetic\" or \"cifar10\"");
  if (data.source == "cifar10")
    check(!data.train_path.empty() && !data.test_path.empty(),
          "cifar10 needs data.train_path and data.test_path");
  check(data.classes >= 2, "data.classes must be at least 2");
  check(data.per_class >= 1 && data.test_per_class >= 1, "per-class counts must be positive");
  check(data.size >= 8 && data.size % 8 == 0, "data.size must be a positive multiple of 8");
  check(data.margin > 0.0 && data.noise >= 0.0, "data.margin > 0 and data.noise >= 0");
  check(data.attacker_fraction > 0.0 && data.attacker_fraction < 1.0,
        "data.attacker_fraction must lie in (0, 1)");
  check(model.widths.size() == 6, "model.widths needs six entries");
  for (std::size_t w : model.widths) check(w >= 1, "model.widths must be positive");
  check(model.epochs >= 1 && model.batch >= 1, "model.epochs and model.batch must be positive");
  check(model.lr > 0.0 && model.momentum >= 0.0 && model.momentum < 1.0,
        "model.lr > 0 and model.momentum in [0, 1)");
  check(ics.epochs >= 1 && ics.batch >= 1, "ics.epochs and ics.batch must be positive");
  check(ics.lr > 0.0 && ics.momentum >= 0.0 && ics.momentum < 1.0 && ics.clip_norm >= 0.0,
        "ics.lr > 0, ics.momentum in [0, 1), ics.clip_norm >= 0");
  check(rob.k_per_iter >= 1 && rob.n_vpa >= 1 && rob.batch >= 1 && rob.samples >= 1, "rob counts must be positive");
  check(rob.mix >= 0.0 && rob.mix < 1.0, "rob.mix must lie in [0, 1)");
  check(policy.tau > 0.0 && policy.tau < 1.0 && policy.q >= 1, "policy.tau in (0, 1), policy.q >= 1");
  if (policy.tune) check(!policy.taus.empty() && !policy.qs.empty(), "policy grid must be nonempty");
  for (double t : policy.taus) check(t > 0.0 && t < 1.0, "policy.taus must lie in (0, 1)");
  for (std::size_t q : policy.qs) check(q >= 1, "policy.qs must be positive");
  const std::set<std::string> names{"tbt", "talbf", "proflip", "untargeted", "none"};
  check(names.contains(attack.name), "attack.name must be one of tbt, talbf, proflip, untargeted, none");
  check(attack.target < data.classes, "attack.target must be a class index");
  check(attack.tbt.tap > 0.0 && attack.tbt.tap < 1.0 && attack.proflip.tap > 0.0 &&
            attack.proflip.tap < 1.0,
        "trigger tap must lie in (0, 1)");
  check(attack.tbt.w_b >= 1 && attack.tbt.samples >= 1, "attack.tbt counts must be positive");
  check(attack.talbf.k_init >= 1 && attack.talbf.samples >= 1 && attack.talbf.lambda_init > 0.0,
        "attack.talbf k_init, samples and lambda_init must be positive");
  check(attack.proflip.k_points >= 2 && attack.proflip.samples >= 1 && attack.proflip.candidates >= 1,
        "attack.proflip needs k_points >= 2 and positive counts");
  check(attack.untargeted.batch >= 1, "attack.untargeted.batch must be positive");
  check(eval.reps >= 1 && eval.acc_reps >= 1, "eval reps must be positive");
  check(!eval.defenses.empty(), "eval.defenses must be nonempty");
  const std::set<std::string> defs{"base", "sdn", "desdn", "aegis"};
  for (const auto& d : eval.defenses) check(defs.contains(d), "unknown defense " + d);
  check(!output.dir.empty(), "output.dir must be nonempty");
}

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  read(j, "", cfg);
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_json(const ExperimentConfig& cfg) {
  ExperimentConfig copy = cfg;
  return write(copy).dump(2) + "\n";
}

std::string config_schema() {
  ExperimentConfig defaults;
  json s = schema(defaults);
  s["$schema"] = "https://json-schema.org/draft/2020-12/schema";
  s["title"] = "aegis experiment configuration";
  return s.dump(2) + "\n";
}

void apply_master_seed(ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.seeds.data = seed;
  cfg.seeds.backbone = seed + 1;
  cfg.seeds.ics = seed + 2;
  cfg.seeds.vpa = seed + 3;
  cfg.seeds.policy = seed + 4;
  cfg.seeds.attack = seed + 5;
}

}  // namespace aegis
