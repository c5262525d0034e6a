#include "aegis/image.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "aegis/checkpoint.hpp"

namespace aegis::io {

std::vector<std::uint8_t> encode_ppm(const nn::Tensor& image) {
  const auto& s = image.shape();
  if (s.size() != 3 || (s[0] != 1 && s[0] != 3))
    throw std::invalid_argument("encode_ppm: expected (1|3, H, W), got " + nn::to_string(s));
  const std::size_t h = s[1], w = s[2];
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + 3 * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = image.at(s[0] == 3 ? c : 0, y, x);
        out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
      }
  return out;
}

void write_ppm(const std::filesystem::path& path, const nn::Tensor& image) {
  write_file(path, encode_ppm(image));
}

}  // namespace aegis::io
