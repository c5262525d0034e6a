#include "aegis/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "aegis/rng.hpp"

namespace aegis {

void Dataset::validate() const {
  if (images.size() != labels.size())
    throw std::invalid_argument("Dataset: image and label counts differ");
  for (std::size_t l : labels)
    if (l >= classes)
      throw std::invalid_argument("Dataset: label " + std::to_string(l) +
                                  " >= class count " + std::to_string(classes));
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset d;
  d.classes = classes;
  d.split = split;
  for (std::size_t i : indices) {
    d.images.push_back(images.at(i));
    d.labels.push_back(labels.at(i));
  }
  return d;
}

Dataset parse_cifar10_binary(std::span<const std::uint8_t> bytes, Split split) {
  if (bytes.empty()) throw FormatError("CIFAR-10: empty file", 0);
  if (bytes.size() % kCifarRecordBytes != 0)
    throw FormatError("CIFAR-10: truncated record (file size " +
                          std::to_string(bytes.size()) +
                          " is not a multiple of 3073)",
                      bytes.size() - bytes.size() % kCifarRecordBytes);
  Dataset d;
  d.classes = 10;
  d.split = split;
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t off = r * kCifarRecordBytes;
    const std::uint8_t label = bytes[off];
    if (label > 9)
      throw FormatError("CIFAR-10: label " + std::to_string(label) + " > 9",
                        off);
    nn::Tensor img(nn::Shape{3, 32, 32});
    for (std::size_t k = 0; k < 3072; ++k)
      img[k] = static_cast<double>(bytes[off + 1 + k]) / 255.0;
    d.images.push_back(std::move(img));
    d.labels.push_back(label);
  }
  return d;
}

Dataset load_cifar10_binary(const std::filesystem::path& path, Split split) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return parse_cifar10_binary(bytes, split);
}

namespace {

struct Blob {
  double cy, cx, sigma;
  std::vector<double> color;
};

std::vector<std::vector<Blob>> make_prototypes(const SynthConfig& cfg) {
  Rng rng = Rng(cfg.seed).split(0);
  const double side = static_cast<double>(cfg.size);
  std::vector<std::vector<Blob>> protos(cfg.classes);
  for (auto& p : protos) {
    for (int b = 0; b < 3; ++b) {
      Blob blob;
      blob.cy = side * (0.15 + 0.7 * rng.uniform());
      blob.cx = side * (0.15 + 0.7 * rng.uniform());
      blob.sigma = side * (0.08 + 0.12 * rng.uniform());
      for (std::size_t c = 0; c < cfg.channels; ++c)
        blob.color.push_back(2.0 * rng.uniform() - 1.0);
      p.push_back(std::move(blob));
    }
  }
  return protos;
}

nn::Tensor render(const SynthConfig& cfg, const std::vector<Blob>& proto,
                  Rng& rng) {
  const double dy = static_cast<double>(rng.below(2 * cfg.max_shift + 1)) -
                    static_cast<double>(cfg.max_shift);
  const double dx = static_cast<double>(rng.below(2 * cfg.max_shift + 1)) -
                    static_cast<double>(cfg.max_shift);
  const double gain = 0.8 + 0.4 * rng.uniform();
  nn::Tensor img(nn::Shape{cfg.channels, cfg.size, cfg.size});
  for (std::size_t c = 0; c < cfg.channels; ++c)
    for (std::size_t y = 0; y < cfg.size; ++y)
      for (std::size_t x = 0; x < cfg.size; ++x) {
        double v = 0.0;
        for (const auto& b : proto) {
          const double ry = static_cast<double>(y) - b.cy - dy;
          const double rx = static_cast<double>(x) - b.cx - dx;
          v += b.color[c] *
               std::exp(-(ry * ry + rx * rx) / (2.0 * b.sigma * b.sigma));
        }
        const double pix = 0.5 + 0.25 * cfg.margin * gain * v +
                           cfg.noise * rng.normal();
        img.at(c, y, x) = std::clamp(pix, 0.0, 1.0);
      }
  return img;
}

Dataset draw(const SynthConfig& cfg, const std::vector<std::vector<Blob>>& protos,
             std::size_t per_class, std::uint64_t stream, Split split) {
  Rng rng = Rng(cfg.seed).split(stream);
  Dataset d;
  d.classes = cfg.classes;
  d.split = split;
  for (std::size_t k = 0; k < per_class; ++k)
    for (std::size_t c = 0; c < cfg.classes; ++c) {
      d.images.push_back(render(cfg, protos[c], rng));
      d.labels.push_back(c);
    }
  return d;
}

void check(const SynthConfig& cfg) {
  if (cfg.classes == 0 || cfg.per_class == 0 || cfg.size == 0 ||
      cfg.channels == 0)
    throw std::invalid_argument("synth_dataset: sizes must be positive");
}

}  // namespace

Dataset synth_dataset(const SynthConfig& cfg, Split split) {
  check(cfg);
  return draw(cfg, make_prototypes(cfg), cfg.per_class,
              split == Split::train ? 1 : 2, split);
}

Dataset synth_dataset(std::uint64_t seed, std::size_t classes,
                      std::size_t per_class, std::size_t size) {
  SynthConfig cfg;
  cfg.seed = seed;
  cfg.classes = classes;
  cfg.per_class = per_class;
  cfg.size = size;
  return synth_dataset(cfg);
}

DataSplits synth_splits(const SynthConfig& cfg, std::size_t test_per_class) {
  check(cfg);
  const auto protos = make_prototypes(cfg);
  return {draw(cfg, protos, cfg.per_class, 1, Split::train),
          draw(cfg, protos, test_per_class, 2, Split::test)};
}

std::uint64_t dataset_digest(const Dataset& d) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto eat = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (std::size_t i = 0; i < d.size(); ++i) {
    const std::uint64_t l = d.labels[i];
    eat(&l, sizeof l);
    for (double v : d.images[i].values()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      eat(&bits, sizeof bits);
    }
  }
  return h;
}

}  // namespace aegis
