#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string_view>
#include <vector>

#include "aegis/rng.hpp"
#include "aegis/tensor.hpp"

namespace aegis::nn {

enum class LayerKind : std::uint8_t {
  conv2d = 0,
  dense = 1,
  relu = 2,
  maxpool2d = 3,
  globalavgpool = 4,
  flatten = 5,
};

std::string_view to_string(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  // conv2d; maxpool2d uses kernel as window and stride
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  // dense
  std::size_t in_features = 0;
  std::size_t out_features = 0;

  static LayerSpec conv2d(std::size_t in, std::size_t out, std::size_t kernel,
                          std::size_t stride = 1, std::size_t padding = 0);
  static LayerSpec dense(std::size_t in, std::size_t out);
  static LayerSpec relu();
  static LayerSpec maxpool2d(std::size_t window);
  static LayerSpec globalavgpool();
  static LayerSpec flatten();

  bool has_params() const {
    return kind == LayerKind::conv2d || kind == LayerKind::dense;
  }
  Shape weight_shape() const;
  Shape bias_shape() const;
  void validate() const;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Output shape of `spec` applied to `in`; throws std::invalid_argument when
/// the shapes do not compose.
Shape output_shape(const LayerSpec& spec, const Shape& in);

struct Layer {
  LayerSpec spec;
  Tensor weight;  // empty for parameter-free layers
  Tensor bias;
};

/// Feed-forward network. An exit point e names the activation produced by
/// layer e, i.e. F_e(x).
class Network {
 public:
  Network() = default;
  Network(Shape input_shape, std::vector<LayerSpec> specs,
          std::vector<std::size_t> exit_points = {});

  const Shape& input_shape() const { return input_shape_; }
  /// Shape of the activation produced by layer i.
  const Shape& activation_shape(std::size_t i) const { return shapes_[i]; }
  std::size_t class_count() const;
  std::size_t size() const { return layers_.size(); }

  std::span<const Layer> layers() const { return layers_; }
  const Layer& layer(std::size_t i) const { return layers_[i]; }
  Layer& layer(std::size_t i) { return layers_[i]; }

  const std::vector<std::size_t>& exit_points() const { return exit_points_; }
  /// Indices of conv2d/dense layers in order.
  std::vector<std::size_t> param_layers() const;
  std::size_t parameter_count() const;

  /// He-normal weights, zero biases.
  void init_he(Rng& rng);

 private:
  Shape input_shape_;
  std::vector<Layer> layers_;
  std::vector<Shape> shapes_;
  std::vector<std::size_t> exit_points_;
};

inline constexpr std::size_t kToEnd = std::numeric_limits<std::size_t>::max();

/// Activations recorded by a forward pass over layers [begin, end).
/// values[0] is the input to layer `begin`; values[k + 1] is the output of
/// layer begin + k.
struct Trace {
  std::size_t begin = 0;
  std::vector<Tensor> values;

  std::size_t end() const { return begin + values.size() - 1; }
  const Tensor& output() const { return values.back(); }
  /// Output of layer i, begin <= i < end().
  const Tensor& after(std::size_t i) const { return values[i - begin + 1]; }
};

struct ForwardResult {
  Tensor logits;
  std::vector<Tensor> activations;  // one per exit point when recorded
};

/// Runs one layer on one sample.
Tensor apply_layer(const Layer& layer, const Tensor& x);

ForwardResult forward(const Network& net, const Tensor& x, bool record = false);
Trace forward_trace(const Network& net, const Tensor& x, std::size_t begin = 0,
                    std::size_t end = kToEnd);
/// Output of layers [begin, end) without keeping intermediates.
Tensor forward_range(const Network& net, Tensor x, std::size_t begin,
                     std::size_t end = kToEnd);

struct ParamGrads {
  std::vector<Tensor> weight;
  std::vector<Tensor> bias;

  ParamGrads() = default;
  explicit ParamGrads(const Network& net);
  void zero();
  void scale(double s);
  ParamGrads& operator+=(const ParamGrads& other);
};

/// Extra gradient flowing into the output of `layer`, e.g. from a head
/// attached at an exit point.
struct Injection {
  std::size_t layer;
  const Tensor* grad;
};

struct BackwardOptions {
  ParamGrads* grads = nullptr;  // accumulated into, not overwritten
  std::span<const Injection> injections = {};
  /// When set, receives dLoss/d(output of layer i) for every traced layer,
  /// indexed by layer.
  std::vector<Tensor>* activation_grads = nullptr;
  /// Skip the input gradient of the first traced layer (returns empty).
  bool skip_input_grad = false;
};

/// Reverse-mode pass over a trace. `grad_output` is dLoss/d(trace output);
/// pass an empty tensor when only injections carry gradient. Returns
/// dLoss/d(trace input).
Tensor backward(const Network& net, const Trace& trace,
                const Tensor& grad_output, const BackwardOptions& opts = {});

}  // namespace aegis::nn
