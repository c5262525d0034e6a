#include "aegis/trigger.hpp"

#include <cmath>
#include <stdexcept>

namespace aegis::attacks {

TriggerSpec bottom_right_trigger(const nn::Shape& image, double tap,
                                 std::size_t target, double fill) {
  if (image.size() != 3) throw std::invalid_argument("trigger: image must be (C, H, W)");
  if (!(tap > 0.0 && tap < 1.0))
    throw std::invalid_argument("trigger: tap must lie in (0, 1)");
  const std::size_t h = image[1], w = image[2];
  auto side = static_cast<std::size_t>(
      std::lround(std::sqrt(tap * static_cast<double>(h * w))));
  side = std::max<std::size_t>(1, std::min({side, h, w}));
  TriggerSpec t;
  t.patch = nn::Tensor(nn::Shape{image[0], side, side}, fill);
  t.top = h - side;
  t.left = w - side;
  t.tap = static_cast<double>(side * side) / static_cast<double>(h * w);
  t.target = target;
  return t;
}

nn::Tensor apply_trigger(const nn::Tensor& x, const TriggerSpec& t) {
  nn::Tensor y = x;
  const std::size_t side = t.side();
  for (std::size_t c = 0; c < t.patch.shape()[0]; ++c)
    for (std::size_t dy = 0; dy < side; ++dy)
      for (std::size_t dx = 0; dx < side; ++dx)
        y.at(c, t.top + dy, t.left + dx) = t.patch.at(c, dy, dx);
  return y;
}

std::vector<nn::Tensor> apply_trigger(std::span<const nn::Tensor> xs,
                                      const TriggerSpec& t) {
  std::vector<nn::Tensor> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back(apply_trigger(x, t));
  return out;
}

nn::Tensor patch_gradient(const nn::Tensor& g, const TriggerSpec& t) {
  nn::Tensor out(t.patch.shape());
  const std::size_t side = t.side();
  for (std::size_t c = 0; c < t.patch.shape()[0]; ++c)
    for (std::size_t dy = 0; dy < side; ++dy)
      for (std::size_t dx = 0; dx < side; ++dx)
        out.at(c, dy, dx) = g.at(c, t.top + dy, t.left + dx);
  return out;
}

}  // namespace aegis::attacks
