#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <nlohmann/json.hpp>

#include "aegis/attacks.hpp"
#include "aegis/checkpoint.hpp"
#include "aegis/config.hpp"
#include "aegis/dataset.hpp"
#include "aegis/experiment.hpp"
#include "aegis/image.hpp"
#include "aegis/metrics.hpp"
#include "unit/support.hpp"

namespace aegis {
namespace {

std::vector<std::uint8_t> cifar_records(std::initializer_list<std::uint8_t> labels) {
  std::vector<std::uint8_t> bytes;
  std::uint8_t px = 0;
  for (std::uint8_t l : labels) {
    bytes.push_back(l);
    for (std::size_t k = 0; k < 3072; ++k) bytes.push_back(px++);
  }
  return bytes;
}

std::uint64_t fnv1a(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

template <class T>
void append_le(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(v) >> (8 * i)));
}

TEST(Cifar, ParsesRecords) {
  const auto bytes = cifar_records({3, 9});
  const Dataset d = parse_cifar10_binary(bytes, Split::test);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d.labels, (std::vector<std::size_t>{3, 9}));
  EXPECT_EQ(d.images[0].shape(), (nn::Shape{3, 32, 32}));
  EXPECT_EQ(d.images[0].at(0, 0, 1), 1.0 / 255.0);
  EXPECT_EQ(d.images[1].at(0, 0, 0), static_cast<double>(3072 % 256) / 255.0);
  EXPECT_EQ(d.split, Split::test);
}

TEST(Cifar, RejectsTruncatedAndPaddedFiles) {
  auto bytes = cifar_records({1});
  bytes.push_back(0);
  try {
    parse_cifar10_binary(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 3073u);
  }
  bytes.resize(3072);
  EXPECT_THROW(parse_cifar10_binary(bytes), FormatError);
  EXPECT_THROW(parse_cifar10_binary({}), FormatError);
}

TEST(Cifar, RejectsLabelAboveNine) {
  const auto bytes = cifar_records({2, 10});
  try {
    parse_cifar10_binary(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 3073u);
  }
}

TEST(Cifar, DigestIsFnvOverLabelsAndPixels) {
  const Dataset d = parse_cifar10_binary(cifar_records({4, 0}));
  std::vector<std::uint8_t> stream;
  for (std::size_t i = 0; i < d.size(); ++i) {
    append_le<std::uint64_t>(stream, d.labels[i]);
    for (double v : d.images[i].values()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      append_le(stream, bits);
    }
  }
  EXPECT_EQ(dataset_digest(d), fnv1a(stream));
}

TEST(Synth, DeterministicPerSeedWithBalancedClasses) {
  const Dataset a = synth_dataset(7, 4, 5, 8), b = synth_dataset(7, 4, 5, 8), c = synth_dataset(8, 4, 5, 8);
  EXPECT_EQ(dataset_digest(a), dataset_digest(b));
  EXPECT_NE(dataset_digest(a), dataset_digest(c));
  ASSERT_EQ(a.size(), 20u);
  std::vector<std::size_t> count(4, 0);
  for (std::size_t l : a.labels) ++count[l];
  EXPECT_EQ(count, (std::vector<std::size_t>(4, 5)));
  for (const auto& img : a.images)
    for (double v : img.values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  EXPECT_NO_THROW(a.validate());
}

TEST(Synth, SplitsAreDisjointStreams) {
  SynthConfig cfg;
  cfg.classes = 3;
  cfg.per_class = 4;
  cfg.size = 8;
  const auto s = synth_splits(cfg, 2);
  EXPECT_EQ(s.train.size(), 12u);
  EXPECT_EQ(s.test.size(), 6u);
  EXPECT_EQ(s.test.split, Split::test);
  EXPECT_NE(s.train.images[0], s.test.images[0]);
}

class Checkpoint : public ::testing::Test {
 protected:
  MultiExitModel m = testing::tiny_model(61);
  std::vector<std::uint8_t> bytes = io::serialize_model(m);
};

TEST_F(Checkpoint, RoundTripIsByteIdentical) {
  const MultiExitModel back = io::deserialize_model(bytes);
  EXPECT_TRUE(back == m);
  EXPECT_EQ(io::serialize_model(back), bytes);
  const auto path = std::filesystem::temp_directory_path() / "aegis_ckpt_roundtrip.aegs";
  io::save_checkpoint(m, path);
  EXPECT_EQ(io::read_file(path), bytes);
  EXPECT_TRUE(io::load_checkpoint(path) == m);
  std::filesystem::remove(path);
}

TEST_F(Checkpoint, HeaderLayout) {
  ASSERT_GE(bytes.size(), 10u);
  EXPECT_EQ(std::memcmp(bytes.data(), "AEGS", 4), 0);
  EXPECT_EQ(bytes[4] | bytes[5] << 8, io::kCheckpointVersion);
  const std::uint32_t sections = bytes[6] | bytes[7] << 8 | bytes[8] << 16 | static_cast<std::uint32_t>(bytes[9]) << 24;
  EXPECT_EQ(sections, 2u + m.ics().size());
}

TEST_F(Checkpoint, RejectsCorruption) {
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(io::deserialize_model(bad), io::CheckpointError);
  bad = bytes;
  bad[4] = 9;
  EXPECT_THROW(io::deserialize_model(bad), io::CheckpointError);
  for (std::size_t off : {std::size_t{30}, bytes.size() / 2, bytes.size() - 6}) {
    bad = bytes;
    bad[off] ^= 0x10;
    EXPECT_THROW(io::deserialize_model(bad), io::CheckpointError) << "offset " << off;
  }
  bad.assign(bytes.begin(), bytes.end() - 3);
  EXPECT_THROW(io::deserialize_model(bad), io::CheckpointError);
}

TEST_F(Checkpoint, AttackedCheckpointEqualsAppliedPlan) {
  attacks::FlipPlan plan;
  plan.flips = {{0, 1, 7}, {2, 5, 0}, {2, 6, 3}};
  const MultiExitModel attacked = attacks::apply_plan(m, plan);
  const auto abytes = io::serialize_model(attacked);
  EXPECT_TRUE(io::deserialize_model(abytes) == attacked);
  EXPECT_EQ(io::checkpoint_hamming(bytes, abytes), plan.flips.size());
}

TEST(Asr, Examples) {
  EXPECT_EQ(compute_asr(std::vector<std::size_t>{2, 2, 1, 2}, 2), 75.0);
  EXPECT_EQ(compute_asr(std::vector<std::size_t>{0}, 2), 0.0);
  EXPECT_THROW(compute_asr(std::vector<std::size_t>{}, 2), std::invalid_argument);
}

TEST(Defenses, NamesRoundTrip) {
  for (Defense d : {Defense::base, Defense::sdn, Defense::desdn, Defense::aegis})
    EXPECT_EQ(defense_from_string(to_string(d)), d);
  EXPECT_THROW(defense_from_string("bogus"), std::invalid_argument);
  EXPECT_EQ(effective_reps(Defense::base, 10), 1u);
  EXPECT_EQ(effective_reps(Defense::desdn, 10), 10u);
}

TEST(Config, DefaultsRoundTrip) {
  const ExperimentConfig cfg = parse_config("{}");
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(config_to_json(parse_config(config_to_json(cfg))), config_to_json(cfg));
}

TEST(Config, UnknownKeyNamesItsPath) {
  try {
    parse_config(R"({"rob": {"n_vpa": 3, "nvpa": 4}})");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("rob.nvpa"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_config(R"({"extra": 1})"), ConfigError);
}

TEST(Config, TypeAndRangeErrors) {
  EXPECT_THROW(parse_config(R"({"attack": {"n_b_max": "many"}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"attack": {"n_b_max": -3}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"attack": {"name": "rowhammer"}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"rob": {"mix": 1.0}})"), ConfigError);
  EXPECT_THROW(parse_config("[1, 2"), ConfigError);
}

TEST(Config, ValuesAreApplied) {
  const auto cfg = parse_config(R"({"policy": {"tau": 0.8, "q": 2}, "eval": {"defenses": ["base"]}})");
  EXPECT_EQ(cfg.policy.tau, 0.8);
  EXPECT_EQ(cfg.policy.q, 2u);
  EXPECT_EQ(cfg.eval.defenses, (std::vector<std::string>{"base"}));
  EXPECT_EQ(cfg.rob.n_vpa, 25u);
}

TEST(Config, SchemaDescribesEverySection) {
  const auto schema = nlohmann::json::parse(config_schema());
  EXPECT_EQ(schema["additionalProperties"], false);
  for (const char* key : {"data", "model", "ics", "rob", "policy", "attack", "eval", "seeds", "checkpoints", "output"}) {
    ASSERT_TRUE(schema["properties"].contains(key)) << key;
    EXPECT_EQ(schema["properties"][key]["additionalProperties"], false) << key;
  }
}

TEST(Config, MasterSeedDerivesDistinctSeeds) {
  ExperimentConfig cfg;
  apply_master_seed(cfg, 100);
  const std::set<std::uint64_t> seeds{cfg.seeds.data, cfg.seeds.backbone, cfg.seeds.ics,
                                      cfg.seeds.vpa, cfg.seeds.policy, cfg.seeds.attack};
  EXPECT_EQ(seeds.size(), 6u);
}

TEST(FlipJson, RoundTrip) {
  const std::vector<quant::BitLocation> flips{{3, 17, 7}, {0, 0, 0}};
  const std::string text = flips_to_json(flips);
  EXPECT_EQ(flips_from_json(text), flips);
  const auto j = nlohmann::json::parse(text);
  EXPECT_EQ(j[0]["layer"], 3);
  EXPECT_EQ(j[0]["index"], 17);
  EXPECT_EQ(j[0]["bit"], 7);
}

TEST(FlipJson, RejectsMalformedEntries) {
  EXPECT_THROW(flips_from_json(R"([{"layer": 0, "index": 1}])"), std::exception);
  EXPECT_THROW(flips_from_json(R"([{"layer": 0, "index": 1, "bit": 8}])"), std::exception);
  EXPECT_THROW(flips_from_json(R"({"layer": 0})"), std::exception);
}

TEST(Ppm, HeaderAndPixels) {
  nn::Tensor img({1, 2, 3});
  img.at(0, 1, 2) = 1.0;
  const auto bytes = io::encode_ppm(img);
  const std::string header = "P6\n3 2\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 18);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + static_cast<long>(header.size())), header);
  EXPECT_EQ(bytes.back(), 255);
  EXPECT_EQ(bytes[header.size()], 0);
  EXPECT_THROW(io::encode_ppm(nn::Tensor({2, 2, 2})), std::invalid_argument);
}

TEST(CurveCsv, Header) {
  AttackReport r;
  r.defenses.resize(2);
  r.defenses[0].defense = "base";
  r.defenses[1].defense = "aegis";
  r.curve = {{10, {50.0, 5.0}}, {20, {90.0, 7.5}}};
  const std::string csv = curve_to_csv(r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "n_b,asr_base,asr_aegis");
  EXPECT_NE(csv.find("\n10,"), std::string::npos);
}

}  // namespace
}  // namespace aegis
