#pragma once

#include <cstddef>
#include <vector>

#include "aegis/network.hpp"

namespace aegis {

/// Desk-scale convolutional backbone with six exit points, one after each
/// conv stage:
///
///   conv-relu-pool | conv-relu | conv-relu-pool | conv-relu |
///   conv-relu-pool | conv-relu | gap | dense
struct DeskArch {
  std::size_t channels = 3;
  std::size_t size = 16;
  std::size_t classes = 10;
  std::vector<std::size_t> widths = {6, 12, 12, 16, 16, 16};
};

nn::Network make_desk_backbone(const DeskArch& arch);

/// conv-relu-conv-relu-flatten-dense, used for gradient checks.
nn::Network make_two_conv_net(std::size_t channels, std::size_t size,
                              std::size_t classes);

}  // namespace aegis
