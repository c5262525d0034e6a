#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "aegis/tensor.hpp"

namespace aegis::attacks {

/// Square patch pasted over the input at (top, left).
struct TriggerSpec {
  nn::Tensor patch;  // (C, side, side), values in [0, 1]
  std::size_t top = 0;
  std::size_t left = 0;
  double tap = 0.0;  // realized patch area / image area
  std::size_t target = 0;

  std::size_t side() const { return patch.empty() ? 0 : patch.shape()[1]; }
};

/// Bottom-right square whose side is round(sqrt(tap * H * W)), filled with
/// `fill`.
TriggerSpec bottom_right_trigger(const nn::Shape& image, double tap,
                                 std::size_t target, double fill = 0.5);

/// Input with the patch region replaced by the trigger.
nn::Tensor apply_trigger(const nn::Tensor& x, const TriggerSpec& trigger);
std::vector<nn::Tensor> apply_trigger(std::span<const nn::Tensor> xs,
                                      const TriggerSpec& trigger);

/// Sums the patch-region entries of an input gradient into patch shape.
nn::Tensor patch_gradient(const nn::Tensor& input_grad,
                          const TriggerSpec& trigger);

}  // namespace aegis::attacks
