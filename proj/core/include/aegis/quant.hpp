#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "aegis/tensor.hpp"

namespace aegis::quant {

/// Symmetric per-layer quantization with two's-complement codes.
///
/// The scale keeps at most 45 significant bits (rounded up from
/// max|w| / (2^(bits-1) - 1)), so code * scale and every toggle delta are
/// exactly representable doubles for codes of up to 8 bits.
struct QuantizedTensor {
  std::vector<std::int8_t> codes;
  double scale = 1.0;
  nn::Shape shape;
  int bits = 8;

  std::size_t size() const { return codes.size(); }
  double value(std::size_t i) const { return codes[i] * scale; }
  /// Raw bit pattern of code i in the low `bits` bits.
  std::uint8_t pattern(std::size_t i) const;
  nn::Tensor dequantize() const;

  friend bool operator==(const QuantizedTensor&, const QuantizedTensor&) =
      default;
};

/// Address of one stored bit. Bit 0 is the least significant; bit 7 is the
/// sign bit of an 8-bit code.
struct BitLocation {
  std::size_t layer_id = 0;
  std::size_t flat_index = 0;
  unsigned bit = 0;

  friend auto operator<=>(const BitLocation&, const BitLocation&) = default;
};

struct BitScore {
  BitLocation location;
  double predicted_delta = 0.0;
};

double round_half_away(double v);
/// Smallest 45-significant-bit double >= s.
double round_scale_up(double s);

QuantizedTensor quantize_layer(const nn::Tensor& w, int bits = 8);

/// Code represented by the low `bits` bits of `pattern`.
std::int8_t code_from_pattern(std::uint8_t pattern, int bits);

void flip_bit_inplace(QuantizedTensor& q, std::size_t flat_index, unsigned bit);
QuantizedTensor flip_bit(const QuantizedTensor& q, const BitLocation& loc);

bool bit_is_set(const QuantizedTensor& q, std::size_t flat_index, unsigned bit);

/// Weight change caused by toggling the bit: +2^bit * scale when the bit is
/// clear, -2^bit * scale when set; the sign bit carries weight -2^(bits-1).
double bit_toggle_delta(const QuantizedTensor& q, std::size_t flat_index,
                        unsigned bit);
inline double bit_toggle_delta(const QuantizedTensor& q,
                               const BitLocation& loc) {
  return bit_toggle_delta(q, loc.flat_index, loc.bit);
}

/// Number of differing code bits.
std::size_t hamming_distance(const QuantizedTensor& a, const QuantizedTensor& b);

/// One quantized layer and the loss gradient w.r.t. its dequantized weights.
struct GradView {
  std::size_t layer_id;
  const QuantizedTensor* codes;
  const nn::Tensor* weight_grad;
};

/// First-order loss change of every bit toggle, grad * toggle delta; returns
/// the top_k most loss-increasing, ties broken by location ascending.
std::vector<BitScore> rank_bits(std::span<const GradView> layers,
                                std::size_t top_k);

}  // namespace aegis::quant
