#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "aegis/tensor.hpp"

namespace aegis {

enum class Split { train, test };

struct Dataset {
  std::vector<nn::Tensor> images;  // (C, H, W), pixels in [0, 1]
  std::vector<std::size_t> labels;
  std::size_t classes = 0;
  Split split = Split::train;

  std::size_t size() const { return images.size(); }
  /// Throws std::invalid_argument on count or label violations.
  void validate() const;
  /// Samples at `indices`, same class count and split.
  Dataset subset(std::span<const std::size_t> indices) const;
};

/// Raised by loaders on malformed files; carries the byte offset.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " at byte " + std::to_string(offset)),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

inline constexpr std::size_t kCifarRecordBytes = 3073;

/// CIFAR-10 binary batch: records of 1 label byte followed by 3072
/// channel-major pixel bytes.
Dataset load_cifar10_binary(const std::filesystem::path& path,
                            Split split = Split::train);
Dataset parse_cifar10_binary(std::span<const std::uint8_t> bytes,
                             Split split = Split::train);

struct SynthConfig {
  std::uint64_t seed = 1;
  std::size_t classes = 10;
  std::size_t per_class = 100;
  std::size_t size = 16;      // image side
  std::size_t channels = 3;
  double margin = 1.0;        // prototype contrast; larger is easier
  double noise = 0.15;        // per-pixel Gaussian noise
  std::size_t max_shift = 2;  // random translation in pixels
};

/// Gaussian class-blob images: each class owns a prototype built from a few
/// colored Gaussian blobs; samples are shifted, scaled copies with pixel
/// noise, clipped to [0, 1]. Deterministic per seed.
Dataset synth_dataset(const SynthConfig& cfg, Split split = Split::train);
Dataset synth_dataset(std::uint64_t seed, std::size_t classes,
                      std::size_t per_class, std::size_t size);

/// Train and test sets that share class prototypes but draw samples from
/// disjoint generator streams.
struct DataSplits {
  Dataset train;
  Dataset test;
};
DataSplits synth_splits(const SynthConfig& cfg, std::size_t test_per_class);

/// Order-sensitive FNV-1a digest over labels and pixel bytes.
std::uint64_t dataset_digest(const Dataset& d);

}  // namespace aegis
