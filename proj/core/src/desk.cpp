#include "aegis/desk.hpp"

#include <stdexcept>

namespace aegis {

using nn::LayerSpec;

nn::Network make_desk_backbone(const DeskArch& arch) {
  if (arch.widths.size() != 6)
    throw std::invalid_argument("desk backbone needs six stage widths");
  const auto& w = arch.widths;
  std::vector<LayerSpec> specs = {
      LayerSpec::conv2d(arch.channels, w[0], 3, 1, 1), LayerSpec::relu(),
      LayerSpec::maxpool2d(2),                                    // 2
      LayerSpec::conv2d(w[0], w[1], 3, 1, 1), LayerSpec::relu(),  // 4
      LayerSpec::conv2d(w[1], w[2], 3, 1, 1), LayerSpec::relu(),
      LayerSpec::maxpool2d(2),                                    // 7
      LayerSpec::conv2d(w[2], w[3], 3, 1, 1), LayerSpec::relu(),  // 9
      LayerSpec::conv2d(w[3], w[4], 3, 1, 1), LayerSpec::relu(),
      LayerSpec::maxpool2d(2),                                    // 12
      LayerSpec::conv2d(w[4], w[5], 3, 1, 1), LayerSpec::relu(),  // 14
      LayerSpec::globalavgpool(), LayerSpec::dense(w[5], arch.classes)};
  return nn::Network({arch.channels, arch.size, arch.size}, std::move(specs),
                     {2, 4, 7, 9, 12, 14});
}

nn::Network make_two_conv_net(std::size_t channels, std::size_t size,
                              std::size_t classes) {
  std::vector<LayerSpec> specs = {LayerSpec::conv2d(channels, 4, 3, 1, 1),
                                  LayerSpec::relu(),
                                  LayerSpec::conv2d(4, 4, 3, 2, 0),
                                  LayerSpec::relu(), LayerSpec::flatten()};
  const std::size_t out = (size - 3) / 2 + 1;
  specs.push_back(LayerSpec::dense(4 * out * out, classes));
  return nn::Network({channels, size, size}, std::move(specs), {1, 3});
}

}  // namespace aegis
