#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "aegis/multiexit.hpp"

namespace aegis::io {

// Layout, all integers little-endian:
//   "AEGS" | u16 version | u32 section count | sections...
//   section: u32 type | u64 payload length | payload | u32 CRC-32
// The CRC covers type, length and payload.
inline constexpr char kMagic[4] = {'A', 'E', 'G', 'S'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

enum class SectionType : std::uint32_t {
  network = 1,  // backbone layer table
  params = 2,   // backbone scales, codes, biases
  ic = 3,       // position, head layer table, head params
};

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(const std::string& what, std::uint64_t offset)
      : std::runtime_error("checkpoint: " + what + " at byte " +
                           std::to_string(offset)),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

std::vector<std::uint8_t> serialize_model(const MultiExitModel& model);
MultiExitModel deserialize_model(std::span<const std::uint8_t> bytes);

void save_checkpoint(const MultiExitModel& model,
                     const std::filesystem::path& path);
MultiExitModel load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path,
                std::span<const std::uint8_t> bytes);

/// Serialized backbone sections (layer table and parameters) alone.
std::vector<std::uint8_t> backbone_section_bytes(const MultiExitModel& model);

/// Differing code bits between two checkpoints of the same architecture,
/// read directly from their code bytes.
std::size_t checkpoint_hamming(std::span<const std::uint8_t> a,
                               std::span<const std::uint8_t> b);

}  // namespace aegis::io
