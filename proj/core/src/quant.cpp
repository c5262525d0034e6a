#include "aegis/quant.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <stdexcept>

namespace aegis::quant {

namespace {

void check_bits(int bits) {
  if (bits < 2 || bits > 8)
    throw std::invalid_argument("quantization width must be 2..8 bits");
}

void check_location(const QuantizedTensor& q, std::size_t flat_index,
                    unsigned bit) {
  if (flat_index >= q.codes.size() || bit >= static_cast<unsigned>(q.bits))
    throw std::out_of_range("bit location out of bounds");
}

}  // namespace

double round_half_away(double v) {
  return v < 0.0 ? -std::floor(-v + 0.5) : std::floor(v + 0.5);
}

double round_scale_up(double s) {
  int e = 0;
  const double m = std::frexp(s, &e);
  return std::ldexp(std::ceil(std::ldexp(m, 45)), e - 45);
}

std::uint8_t QuantizedTensor::pattern(std::size_t i) const {
  const auto mask = static_cast<std::uint8_t>((1u << bits) - 1u);
  return static_cast<std::uint8_t>(static_cast<std::uint8_t>(codes[i]) & mask);
}

nn::Tensor QuantizedTensor::dequantize() const {
  nn::Tensor t(shape);
  for (std::size_t i = 0; i < codes.size(); ++i) t[i] = value(i);
  return t;
}

QuantizedTensor quantize_layer(const nn::Tensor& w, int bits) {
  check_bits(bits);
  if (w.empty()) throw std::invalid_argument("quantize_layer: empty tensor");
  if (!w.all_finite())
    throw std::invalid_argument("quantize_layer: non-finite weight");
  const int qmax = (1 << (bits - 1)) - 1;
  const int qmin = -(1 << (bits - 1));
  double max_abs = 0.0;
  for (double v : w.values()) max_abs = std::max(max_abs, std::abs(v));

  QuantizedTensor q;
  q.shape = w.shape();
  q.bits = bits;
  q.scale = max_abs == 0.0 ? 1.0 : round_scale_up(max_abs / qmax);
  q.codes.resize(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double c = std::clamp(round_half_away(w[i] / q.scale),
                                static_cast<double>(qmin),
                                static_cast<double>(qmax));
    q.codes[i] = static_cast<std::int8_t>(c);
  }
  return q;
}

std::int8_t code_from_pattern(std::uint8_t pattern, int bits) {
  check_bits(bits);
  int v = pattern & ((1 << bits) - 1);
  if (v & (1 << (bits - 1))) v -= 1 << bits;
  return static_cast<std::int8_t>(v);
}

bool bit_is_set(const QuantizedTensor& q, std::size_t flat_index,
                unsigned bit) {
  check_location(q, flat_index, bit);
  return (q.pattern(flat_index) >> bit) & 1u;
}

void flip_bit_inplace(QuantizedTensor& q, std::size_t flat_index,
                      unsigned bit) {
  check_location(q, flat_index, bit);
  const auto p = static_cast<std::uint8_t>(q.pattern(flat_index) ^ (1u << bit));
  q.codes[flat_index] = code_from_pattern(p, q.bits);
}

QuantizedTensor flip_bit(const QuantizedTensor& q, const BitLocation& loc) {
  QuantizedTensor out = q;
  flip_bit_inplace(out, loc.flat_index, loc.bit);
  return out;
}

double bit_toggle_delta(const QuantizedTensor& q, std::size_t flat_index,
                        unsigned bit) {
  const double s = bit_is_set(q, flat_index, bit) ? -1.0 : 1.0;
  const double place = std::ldexp(1.0, static_cast<int>(bit));
  const bool sign_bit = bit + 1 == static_cast<unsigned>(q.bits);
  return (sign_bit ? -s : s) * place * q.scale;
}

std::size_t hamming_distance(const QuantizedTensor& a,
                             const QuantizedTensor& b) {
  if (a.codes.size() != b.codes.size() || a.bits != b.bits)
    throw std::invalid_argument("hamming_distance: incompatible tensors");
  std::size_t d = 0;
  for (std::size_t i = 0; i < a.codes.size(); ++i)
    d += static_cast<std::size_t>(
        std::popcount(static_cast<unsigned>(a.pattern(i) ^ b.pattern(i))));
  return d;
}

std::vector<BitScore> rank_bits(std::span<const GradView> layers,
                                std::size_t top_k) {
  if (top_k == 0) throw std::invalid_argument("rank_bits: top_k must be >= 1");
  std::vector<BitScore> all;
  for (const auto& view : layers) {
    const auto& q = *view.codes;
    if (view.weight_grad->size() != q.size())
      throw std::invalid_argument("rank_bits: gradient shape mismatch");
    for (std::size_t i = 0; i < q.size(); ++i) {
      const double g = (*view.weight_grad)[i];
      for (unsigned b = 0; b < static_cast<unsigned>(q.bits); ++b)
        all.push_back({{view.layer_id, i, b}, g * bit_toggle_delta(q, i, b)});
    }
  }
  auto better = [](const BitScore& a, const BitScore& b) {
    if (a.predicted_delta != b.predicted_delta)
      return a.predicted_delta > b.predicted_delta;
    return a.location < b.location;
  };
  const std::size_t k = std::min(top_k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<long>(k), all.end(),
                    better);
  all.resize(k);
  return all;
}

}  // namespace aegis::quant
