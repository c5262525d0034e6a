#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "aegis/loss.hpp"
#include "aegis/network.hpp"
#include "aegis/quant.hpp"
#include "aegis/rng.hpp"

namespace aegis {

/// Early-exit head: conv -> relu -> global average pool -> dense.
struct InternalClassifier {
  std::size_t position = 0;  // backbone exit point (layer index)
  nn::Network head;
};

/// Input of an IC attached after a layer with activation shape `in`.
nn::Network make_ic_head(const nn::Shape& in, std::size_t classes);

/// Owner of one flat parameter layer id.
struct ParamSlot {
  static constexpr std::size_t kBackbone = static_cast<std::size_t>(-1);
  std::size_t ic = kBackbone;  // IC index, or kBackbone
  std::size_t layer = 0;       // layer index inside that network
  bool is_backbone() const { return ic == kBackbone; }
};

/// Deployed 8-bit model: quantized backbone, final classifier and ICs.
///
/// Exits are numbered 0..N-1 for the ICs in depth order and N for the
/// final layer. Parameter layer ids enumerate backbone conv/dense layers in
/// order, then each IC's conv and dense layer. Network weights always equal
/// the dequantized codes.
class MultiExitModel {
 public:
  MultiExitModel() = default;

  /// Quantizes a trained backbone.
  static MultiExitModel from_backbone(nn::Network backbone);
  /// Rebuilds a model from stored codes; weights are set from the codes.
  static MultiExitModel assemble(nn::Network backbone,
                                 std::vector<quant::QuantizedTensor> codes,
                                 std::vector<InternalClassifier> ics);

  const nn::Network& backbone() const { return backbone_; }
  std::span<const InternalClassifier> ics() const { return ics_; }
  const InternalClassifier& ic(std::size_t i) const { return ics_[i]; }
  std::size_t exit_count() const { return ics_.size() + 1; }
  std::size_t final_exit() const { return ics_.size(); }
  std::size_t class_count() const { return backbone_.class_count(); }

  std::size_t param_layer_count() const { return slots_.size(); }
  std::size_t backbone_param_layers() const { return backbone_layers_; }
  ParamSlot slot(std::size_t layer_id) const { return slots_.at(layer_id); }
  std::size_t layer_id(ParamSlot slot) const;
  const quant::QuantizedTensor& codes(std::size_t layer_id) const {
    return codes_.at(layer_id);
  }
  const nn::Layer& param_layer(std::size_t layer_id) const;
  /// Layer id of the backbone's final dense layer.
  std::size_t final_layer_id() const { return backbone_layers_ - 1; }
  /// Layer id of IC i's dense layer.
  std::size_t ic_dense_layer_id(std::size_t i) const;

  /// Toggles one stored bit and refreshes the dequantized weight.
  void flip(const quant::BitLocation& loc);
  /// Overwrites a code and refreshes the dequantized weight.
  void set_code(std::size_t layer_id, std::size_t index, std::int8_t code);

  /// Replaces IC i's head with float weights and re-quantizes it.
  void set_ic_head(std::size_t i, nn::Network head);
  /// Appends an IC; its weights are quantized.
  void add_ic(InternalClassifier ic);

  /// Quantized weight bytes plus scales; stored bytes of all parameters.
  std::size_t model_bytes() const;
  std::size_t backbone_bytes() const;

  friend bool operator==(const MultiExitModel& a, const MultiExitModel& b);

 private:
  nn::Layer& mutable_layer(ParamSlot s);
  void rebuild_slots();

  nn::Network backbone_;
  std::vector<InternalClassifier> ics_;
  std::vector<quant::QuantizedTensor> codes_;
  std::vector<ParamSlot> slots_;
  std::size_t backbone_layers_ = 0;
};

/// Attaches one freshly initialized IC per position; positions must be
/// backbone exit points. Existing ICs are dropped.
MultiExitModel attach_ics(const MultiExitModel& model,
                          std::span<const std::size_t> positions, Rng& rng);

/// Activations F_i(x) at each IC position, indexed [ic][sample].
using ExitFeatures = std::vector<std::vector<nn::Tensor>>;
ExitFeatures compute_exit_features(const MultiExitModel& model,
                                   std::span<const nn::Tensor> inputs);

struct IcTrainConfig {
  std::size_t epochs = 20;
  std::size_t batch = 32;
  double lr = 0.01;
  double momentum = 0.9;
  /// Minibatch gradients are rescaled to at most this global l2 norm; 0
  /// disables clipping.
  double clip_norm = 5.0;
};

/// Trains every IC with cross-entropy on (F_i(x), label); the backbone is
/// not touched. Returns the trained model.
MultiExitModel train_ics(MultiExitModel model,
                         std::span<const nn::Tensor> inputs,
                         std::span<const std::size_t> labels,
                         const IcTrainConfig& cfg, Rng& rng);

namespace detail {
/// Shared IC training loop. When `flipped` is set, minibatch b draws its
/// features from it iff floor((b + 1) * mix) > floor(b * mix).
MultiExitModel train_heads(MultiExitModel model, const ExitFeatures& clean,
                           const ExitFeatures* flipped,
                           std::span<const std::size_t> labels,
                           const IcTrainConfig& cfg, double mix, Rng& rng);
}  // namespace detail

struct Prediction {
  std::size_t label = 0;
  double confidence = 0.0;  // max softmax probability
};

Prediction predict_from_logits(const nn::Tensor& logits);

/// Prediction of exit i (i == final_exit() gives the backbone output).
Prediction ic_predict(const MultiExitModel& model, std::size_t exit,
                      const nn::Tensor& x);

/// Logits of every exit, ICs first and the final layer last.
std::vector<nn::Tensor> all_exit_logits(const MultiExitModel& model,
                                        const nn::Tensor& x);

/// Gradients of a multi-exit loss.
struct ModelGrads {
  nn::ParamGrads backbone;
  std::vector<nn::ParamGrads> ics;

  ModelGrads() = default;
  explicit ModelGrads(const MultiExitModel& model);
  void scale(double s);
  /// dLoss/dw of a flat parameter layer.
  const nn::Tensor& weight(const MultiExitModel& model,
                           std::size_t layer_id) const;
};

/// Loss attached to one exit; empty functions exclude that exit.
using ExitLossFn = std::function<nn::LossValue(const nn::Tensor& logits)>;

struct ExitBackward {
  double loss = 0.0;
  nn::Tensor input_grad;                     // when requested
  std::vector<nn::Tensor> activation_grads;  // backbone, when requested
};

/// Loss on the output of a backbone layer.
struct ActivationLoss {
  std::size_t layer;
  std::function<nn::LossValue(const nn::Tensor& activation)> fn;
};

struct ExitBackwardOptions {
  bool input_grad = false;
  bool activation_grads = false;
  std::span<const ActivationLoss> activation_losses = {};
};

/// Evaluates sum_e loss_e(exit_e(x)) plus any activation losses for one
/// sample and accumulates parameter gradients into `grads` (may be null).
ExitBackward exit_backward(const MultiExitModel& model, const nn::Tensor& x,
                           std::span<const ExitLossFn> losses,
                           ModelGrads* grads,
                           const ExitBackwardOptions& opts = {});

/// Accuracy (percent) of a single exit over a labeled set.
double exit_accuracy(const MultiExitModel& model, std::size_t exit,
                     std::span<const nn::Tensor> inputs,
                     std::span<const std::size_t> labels);

}  // namespace aegis
