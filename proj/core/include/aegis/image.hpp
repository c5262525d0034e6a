#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "aegis/tensor.hpp"

namespace aegis::io {

/// Binary PPM (P6) of a (3, H, W) or (1, H, W) tensor with values in [0, 1];
/// one-channel images are replicated to gray.
std::vector<std::uint8_t> encode_ppm(const nn::Tensor& image);
void write_ppm(const std::filesystem::path& path, const nn::Tensor& image);

}  // namespace aegis::io
