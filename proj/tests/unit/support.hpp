#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "aegis/dataset.hpp"
#include "aegis/desk.hpp"
#include "aegis/multiexit.hpp"
#include "aegis/rng.hpp"
#include "aegis/tensor.hpp"

namespace aegis::testing {

inline nn::Tensor random_tensor(const nn::Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  nn::Tensor t(shape);
  for (double& v : t.values()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

inline std::vector<nn::Tensor> random_inputs(std::size_t n, const nn::Shape& shape, Rng& rng) {
  std::vector<nn::Tensor> xs;
  for (std::size_t i = 0; i < n; ++i) xs.push_back(random_tensor(shape, rng, 0.0, 1.0));
  return xs;
}

inline std::vector<std::size_t> random_labels(std::size_t n, std::size_t classes, Rng& rng) {
  std::vector<std::size_t> ys;
  for (std::size_t i = 0; i < n; ++i) ys.push_back(static_cast<std::size_t>(rng.below(classes)));
  return ys;
}

/// 228 weights (1824 bits): small enough for brute-force bit oracles.
inline nn::Network tiny_net(std::uint64_t seed = 5, std::size_t classes = 3) {
  nn::Network net = make_two_conv_net(1, 5, classes);
  Rng rng(seed);
  net.init_he(rng);
  for (std::size_t i : net.param_layers())
    for (double& b : net.layer(i).bias.values()) b = 0.1 * rng.normal();
  return net;
}

inline MultiExitModel tiny_model(std::uint64_t seed = 5, bool with_ics = true) {
  MultiExitModel m = MultiExitModel::from_backbone(tiny_net(seed));
  if (!with_ics) return m;
  Rng rng(seed + 100);
  const std::vector<std::size_t> pos = m.backbone().exit_points();
  return attach_ics(m, pos, rng);
}

/// Untrained desk backbone on 16x16 inputs, quantized, with all six ICs.
inline MultiExitModel desk_model(std::uint64_t seed = 3) {
  DeskArch arch;
  nn::Network net = make_desk_backbone(arch);
  Rng rng(seed);
  net.init_he(rng);
  MultiExitModel m = MultiExitModel::from_backbone(std::move(net));
  const std::vector<std::size_t> pos = m.backbone().exit_points();
  return attach_ics(m, pos, rng);
}

/// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j) + 1.0;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += ra[i], mb += rb[i];
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace aegis::testing
