#include "aegis/network.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace aegis::nn {

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::dense: return "dense";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::globalavgpool: return "globalavgpool";
    case LayerKind::flatten: return "flatten";
  }
  return "unknown";
}

LayerSpec LayerSpec::conv2d(std::size_t in, std::size_t out, std::size_t kernel,
                            std::size_t stride, std::size_t padding) {
  LayerSpec s;
  s.kind = LayerKind::conv2d;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel = kernel;
  s.stride = stride;
  s.padding = padding;
  s.validate();
  return s;
}

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out) {
  LayerSpec s;
  s.kind = LayerKind::dense;
  s.in_features = in;
  s.out_features = out;
  s.validate();
  return s;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::maxpool2d(std::size_t window) {
  LayerSpec s;
  s.kind = LayerKind::maxpool2d;
  s.kernel = window;
  s.stride = window;
  s.validate();
  return s;
}

LayerSpec LayerSpec::globalavgpool() {
  LayerSpec s;
  s.kind = LayerKind::globalavgpool;
  return s;
}

LayerSpec LayerSpec::flatten() {
  LayerSpec s;
  s.kind = LayerKind::flatten;
  return s;
}

Shape LayerSpec::weight_shape() const {
  if (kind == LayerKind::conv2d)
    return {out_channels, in_channels, kernel, kernel};
  if (kind == LayerKind::dense) return {out_features, in_features};
  return {};
}

Shape LayerSpec::bias_shape() const {
  if (kind == LayerKind::conv2d) return {out_channels};
  if (kind == LayerKind::dense) return {out_features};
  return {};
}

void LayerSpec::validate() const {
  switch (kind) {
    case LayerKind::conv2d:
      if (in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0)
        throw std::invalid_argument(
            "conv2d: channels, kernel and stride must be positive");
      break;
    case LayerKind::dense:
      if (in_features == 0 || out_features == 0)
        throw std::invalid_argument("dense: in/out features must be positive");
      break;
    case LayerKind::maxpool2d:
      if (kernel == 0 || stride == 0)
        throw std::invalid_argument("maxpool2d: window must be positive");
      break;
    default:
      break;
  }
}

Shape output_shape(const LayerSpec& spec, const Shape& in) {
  spec.validate();
  auto fail = [&](const std::string& why) {
    throw std::invalid_argument(std::string(to_string(spec.kind)) + " on " +
                                to_string(in) + ": " + why);
  };
  switch (spec.kind) {
    case LayerKind::conv2d: {
      if (in.size() != 3) fail("expects (C, H, W)");
      if (in[0] != spec.in_channels) fail("channel mismatch");
      const std::size_t h = in[1] + 2 * spec.padding;
      const std::size_t w = in[2] + 2 * spec.padding;
      if (h < spec.kernel || w < spec.kernel) fail("kernel larger than input");
      return {spec.out_channels, (h - spec.kernel) / spec.stride + 1,
              (w - spec.kernel) / spec.stride + 1};
    }
    case LayerKind::dense:
      if (numel(in) != spec.in_features) fail("feature count mismatch");
      return {spec.out_features};
    case LayerKind::relu:
      return in;
    case LayerKind::maxpool2d:
      if (in.size() != 3) fail("expects (C, H, W)");
      if (in[1] < spec.kernel || in[2] < spec.kernel) fail("window too large");
      return {in[0], (in[1] - spec.kernel) / spec.stride + 1,
              (in[2] - spec.kernel) / spec.stride + 1};
    case LayerKind::globalavgpool:
      if (in.size() != 3) fail("expects (C, H, W)");
      return {in[0]};
    case LayerKind::flatten:
      return {numel(in)};
  }
  fail("unknown layer kind");
  return {};
}

Network::Network(Shape input_shape, std::vector<LayerSpec> specs,
                 std::vector<std::size_t> exit_points)
    : input_shape_(std::move(input_shape)),
      exit_points_(std::move(exit_points)) {
  if (specs.empty()) throw std::invalid_argument("Network: no layers");
  Shape cur = input_shape_;
  for (auto& spec : specs) {
    cur = output_shape(spec, cur);
    shapes_.push_back(cur);
    Layer layer{spec, {}, {}};
    if (spec.has_params()) {
      layer.weight = Tensor(spec.weight_shape());
      layer.bias = Tensor(spec.bias_shape());
    }
    layers_.push_back(std::move(layer));
  }
  if (shapes_.back().size() != 1)
    throw std::invalid_argument("Network: output must be a logit vector");
  for (std::size_t i = 0; i < exit_points_.size(); ++i) {
    if (exit_points_[i] + 1 >= layers_.size())
      throw std::invalid_argument("Network: exit point beyond last layer");
    if (i > 0 && exit_points_[i] <= exit_points_[i - 1])
      throw std::invalid_argument("Network: exit points must increase");
  }
}

std::size_t Network::class_count() const { return shapes_.back()[0]; }

std::vector<std::size_t> Network::param_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (layers_[i].spec.has_params()) out.push_back(i);
  return out;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
  return n;
}

void Network::init_he(Rng& rng) {
  for (auto& l : layers_) {
    if (!l.spec.has_params()) continue;
    const std::size_t fan_in = l.spec.kind == LayerKind::conv2d
                                   ? l.spec.in_channels * l.spec.kernel *
                                         l.spec.kernel
                                   : l.spec.in_features;
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& w : l.weight.values()) w = sd * rng.normal();
    l.bias.fill(0.0);
  }
}

namespace {

// Inclusive range of output coordinates whose receptive tap `k_off` lands
// inside an input axis of length `in`. Empty when lo > hi.
struct Span {
  long lo;
  long hi;
};

Span valid_outputs(long in, long out, long k_off, long stride, long pad) {
  long lo = 0;
  if (pad - k_off > 0) lo = (pad - k_off + stride - 1) / stride;
  const long top = in - 1 + pad - k_off;
  if (top < 0) return {1, 0};
  return {lo, std::min(top / stride, out - 1)};
}

Tensor conv_forward(const Layer& layer, const Tensor& x, const Shape& out_shape) {
  const auto& s = layer.spec;
  const long C = static_cast<long>(s.in_channels);
  const long H = static_cast<long>(x.shape()[1]);
  const long W = static_cast<long>(x.shape()[2]);
  const long O = static_cast<long>(s.out_channels);
  const long Ho = static_cast<long>(out_shape[1]);
  const long Wo = static_cast<long>(out_shape[2]);
  const long K = static_cast<long>(s.kernel);
  const long st = static_cast<long>(s.stride);
  const long pad = static_cast<long>(s.padding);

  Tensor y(out_shape);
  const double* in = x.data();
  const double* wt = layer.weight.data();
  double* out = y.data();
  for (long o = 0; o < O; ++o) {
    double* plane = out + o * Ho * Wo;
    std::fill(plane, plane + Ho * Wo, layer.bias[static_cast<std::size_t>(o)]);
    for (long c = 0; c < C; ++c) {
      const double* src = in + c * H * W;
      for (long ky = 0; ky < K; ++ky) {
        const Span ry = valid_outputs(H, Ho, ky, st, pad);
        for (long kx = 0; kx < K; ++kx) {
          const Span rx = valid_outputs(W, Wo, kx, st, pad);
          const double w = wt[((o * C + c) * K + ky) * K + kx];
          for (long oy = ry.lo; oy <= ry.hi; ++oy) {
            const double* row = src + (oy * st + ky - pad) * W;
            double* dst = plane + oy * Wo;
            for (long ox = rx.lo; ox <= rx.hi; ++ox)
              dst[ox] += w * row[ox * st + kx - pad];
          }
        }
      }
    }
  }
  return y;
}

Tensor conv_backward(const Layer& layer, const Tensor& x, const Tensor& g,
                     Tensor* gw, Tensor* gb, bool need_input) {
  const auto& s = layer.spec;
  const long C = static_cast<long>(s.in_channels);
  const long H = static_cast<long>(x.shape()[1]);
  const long W = static_cast<long>(x.shape()[2]);
  const long O = static_cast<long>(s.out_channels);
  const long Ho = static_cast<long>(g.shape()[1]);
  const long Wo = static_cast<long>(g.shape()[2]);
  const long K = static_cast<long>(s.kernel);
  const long st = static_cast<long>(s.stride);
  const long pad = static_cast<long>(s.padding);

  Tensor gx;
  if (need_input) gx = Tensor(x.shape());
  const double* in = x.data();
  const double* wt = layer.weight.data();
  const double* go = g.data();
  for (long o = 0; o < O; ++o) {
    const double* gplane = go + o * Ho * Wo;
    if (gb) {
      double acc = 0.0;
      for (long i = 0; i < Ho * Wo; ++i) acc += gplane[i];
      (*gb)[static_cast<std::size_t>(o)] += acc;
    }
    for (long c = 0; c < C; ++c) {
      const double* src = in + c * H * W;
      double* gsrc = need_input ? gx.data() + c * H * W : nullptr;
      for (long ky = 0; ky < K; ++ky) {
        const Span ry = valid_outputs(H, Ho, ky, st, pad);
        for (long kx = 0; kx < K; ++kx) {
          const Span rx = valid_outputs(W, Wo, kx, st, pad);
          const std::size_t widx =
              static_cast<std::size_t>(((o * C + c) * K + ky) * K + kx);
          const double w = wt[widx];
          double acc = 0.0;
          for (long oy = ry.lo; oy <= ry.hi; ++oy) {
            const long base = (oy * st + ky - pad) * W;
            const double* grow = gplane + oy * Wo;
            for (long ox = rx.lo; ox <= rx.hi; ++ox) {
              const long xi = base + ox * st + kx - pad;
              acc += grow[ox] * src[xi];
              if (gsrc) gsrc[xi] += w * grow[ox];
            }
          }
          if (gw) (*gw)[widx] += acc;
        }
      }
    }
  }
  return gx;
}

Tensor dense_forward(const Layer& layer, const Tensor& x) {
  const auto& s = layer.spec;
  Tensor y(Shape{s.out_features});
  const double* w = layer.weight.data();
  const double* in = x.data();
  for (std::size_t o = 0; o < s.out_features; ++o) {
    double acc = layer.bias[o];
    const double* row = w + o * s.in_features;
    for (std::size_t i = 0; i < s.in_features; ++i) acc += row[i] * in[i];
    y[o] = acc;
  }
  return y;
}

Tensor dense_backward(const Layer& layer, const Tensor& x, const Tensor& g,
                      Tensor* gw, Tensor* gb, bool need_input) {
  const auto& s = layer.spec;
  Tensor gx;
  if (need_input) gx = Tensor(x.shape());
  const double* w = layer.weight.data();
  const double* in = x.data();
  for (std::size_t o = 0; o < s.out_features; ++o) {
    const double go = g[o];
    if (gb) (*gb)[o] += go;
    if (go == 0.0) continue;
    const double* row = w + o * s.in_features;
    if (gw) {
      double* grow = gw->data() + o * s.in_features;
      for (std::size_t i = 0; i < s.in_features; ++i) grow[i] += go * in[i];
    }
    if (need_input) {
      double* gi = gx.data();
      for (std::size_t i = 0; i < s.in_features; ++i) gi[i] += row[i] * go;
    }
  }
  return gx;
}

Tensor maxpool_forward(const LayerSpec& s, const Tensor& x,
                       const Shape& out_shape) {
  Tensor y(out_shape);
  const std::size_t C = out_shape[0], Ho = out_shape[1], Wo = out_shape[2];
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        double m = x.at(c, oy * s.stride, ox * s.stride);
        for (std::size_t ky = 0; ky < s.kernel; ++ky)
          for (std::size_t kx = 0; kx < s.kernel; ++kx)
            m = std::max(m, x.at(c, oy * s.stride + ky, ox * s.stride + kx));
        y.at(c, oy, ox) = m;
      }
  return y;
}

Tensor maxpool_backward(const LayerSpec& s, const Tensor& x, const Tensor& g) {
  Tensor gx(x.shape());
  const std::size_t C = g.shape()[0], Ho = g.shape()[1], Wo = g.shape()[2];
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        // first maximum in scan order receives the gradient
        std::size_t by = oy * s.stride, bx = ox * s.stride;
        double m = x.at(c, by, bx);
        for (std::size_t ky = 0; ky < s.kernel; ++ky)
          for (std::size_t kx = 0; kx < s.kernel; ++kx) {
            const std::size_t iy = oy * s.stride + ky, ix = ox * s.stride + kx;
            if (x.at(c, iy, ix) > m) {
              m = x.at(c, iy, ix);
              by = iy;
              bx = ix;
            }
          }
        gx.at(c, by, bx) += g.at(c, oy, ox);
      }
  return gx;
}

}  // namespace

Tensor apply_layer(const Layer& layer, const Tensor& x) {
  const Shape out_shape = output_shape(layer.spec, x.shape());
  switch (layer.spec.kind) {
    case LayerKind::conv2d:
      return conv_forward(layer, x, out_shape);
    case LayerKind::dense:
      return dense_forward(layer, x);
    case LayerKind::relu: {
      Tensor y = x;
      for (auto& v : y.values()) v = v > 0.0 ? v : 0.0;
      return y;
    }
    case LayerKind::maxpool2d:
      return maxpool_forward(layer.spec, x, out_shape);
    case LayerKind::globalavgpool: {
      Tensor y(out_shape);
      const std::size_t hw = x.shape()[1] * x.shape()[2];
      for (std::size_t c = 0; c < out_shape[0]; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < hw; ++i) acc += x[c * hw + i];
        y[c] = acc / static_cast<double>(hw);
      }
      return y;
    }
    case LayerKind::flatten:
      return x.reshaped(out_shape);
  }
  throw std::logic_error("apply_layer: unknown kind");
}

ForwardResult forward(const Network& net, const Tensor& x, bool record) {
  if (x.shape() != net.input_shape())
    throw std::invalid_argument("forward: input shape " + to_string(x.shape()) +
                                " expected " + to_string(net.input_shape()));
  ForwardResult r;
  const auto& exits = net.exit_points();
  std::size_t next_exit = 0;
  Tensor cur = x;
  for (std::size_t i = 0; i < net.size(); ++i) {
    cur = apply_layer(net.layer(i), cur);
    if (record && next_exit < exits.size() && exits[next_exit] == i) {
      r.activations.push_back(cur);
      ++next_exit;
    }
  }
  r.logits = std::move(cur);
  return r;
}

Trace forward_trace(const Network& net, const Tensor& x, std::size_t begin,
                    std::size_t end) {
  end = std::min(end, net.size());
  if (begin > end) throw std::invalid_argument("forward_trace: bad range");
  const Shape& expect = begin == 0 ? net.input_shape()
                                   : net.activation_shape(begin - 1);
  if (x.shape() != expect)
    throw std::invalid_argument("forward_trace: input shape " +
                                to_string(x.shape()) + " expected " +
                                to_string(expect));
  Trace t;
  t.begin = begin;
  t.values.reserve(end - begin + 1);
  t.values.push_back(x);
  for (std::size_t i = begin; i < end; ++i)
    t.values.push_back(apply_layer(net.layer(i), t.values.back()));
  return t;
}

Tensor forward_range(const Network& net, Tensor x, std::size_t begin,
                     std::size_t end) {
  end = std::min(end, net.size());
  for (std::size_t i = begin; i < end; ++i) x = apply_layer(net.layer(i), x);
  return x;
}

ParamGrads::ParamGrads(const Network& net) {
  for (const auto& l : net.layers()) {
    weight.push_back(l.spec.has_params() ? Tensor(l.weight.shape()) : Tensor());
    bias.push_back(l.spec.has_params() ? Tensor(l.bias.shape()) : Tensor());
  }
}

void ParamGrads::zero() {
  for (auto& t : weight) t.fill(0.0);
  for (auto& t : bias) t.fill(0.0);
}

void ParamGrads::scale(double s) {
  for (auto& t : weight) t *= s;
  for (auto& t : bias) t *= s;
}

ParamGrads& ParamGrads::operator+=(const ParamGrads& other) {
  for (std::size_t i = 0; i < weight.size(); ++i) {
    if (!weight[i].empty()) weight[i] += other.weight[i];
    if (!bias[i].empty()) bias[i] += other.bias[i];
  }
  return *this;
}

Tensor backward(const Network& net, const Trace& trace,
                const Tensor& grad_output, const BackwardOptions& opts) {
  const std::size_t begin = trace.begin;
  std::size_t top = trace.end();
  Tensor g;
  if (grad_output.empty()) {
    // Start at the deepest injection; layers above it carry no gradient.
    std::size_t deepest = begin;
    bool any = false;
    for (const auto& inj : opts.injections)
      if (inj.layer >= begin && inj.layer < top) {
        deepest = std::max(deepest, inj.layer + 1);
        any = true;
      }
    if (!any) return Tensor(trace.values.front().shape());
    top = deepest;
    g = Tensor(trace.values[top - begin].shape());
  } else {
    if (grad_output.shape() != trace.output().shape())
      throw std::invalid_argument("backward: gradient shape mismatch");
    g = grad_output;
  }
  if (opts.activation_grads) opts.activation_grads->assign(net.size(), Tensor());

  for (std::size_t i = top; i-- > begin;) {
    for (const auto& inj : opts.injections)
      if (inj.layer == i) g += *inj.grad;
    if (opts.activation_grads) (*opts.activation_grads)[i] = g;
    if (i == begin && opts.skip_input_grad && !opts.grads) return Tensor();

    const Layer& layer = net.layer(i);
    const Tensor& x = trace.values[i - begin];
    const bool need_input = i > begin || !opts.skip_input_grad;
    Tensor* gw = opts.grads ? &opts.grads->weight[i] : nullptr;
    Tensor* gb = opts.grads ? &opts.grads->bias[i] : nullptr;
    switch (layer.spec.kind) {
      case LayerKind::conv2d:
        g = conv_backward(layer, x, g, gw, gb, need_input);
        break;
      case LayerKind::dense:
        g = dense_backward(layer, x, g, gw, gb, need_input);
        if (need_input) g = g.reshaped(x.shape());
        break;
      case LayerKind::relu:
        for (std::size_t k = 0; k < g.size(); ++k)
          if (!(x[k] > 0.0)) g[k] = 0.0;
        break;
      case LayerKind::maxpool2d:
        g = maxpool_backward(layer.spec, x, g);
        break;
      case LayerKind::globalavgpool: {
        Tensor gx(x.shape());
        const std::size_t hw = x.shape()[1] * x.shape()[2];
        const double inv = 1.0 / static_cast<double>(hw);
        for (std::size_t c = 0; c < x.shape()[0]; ++c)
          for (std::size_t k = 0; k < hw; ++k) gx[c * hw + k] = g[c] * inv;
        g = std::move(gx);
        break;
      }
      case LayerKind::flatten:
        g = g.reshaped(x.shape());
        break;
    }
  }
  return g;
}

}  // namespace aegis::nn
