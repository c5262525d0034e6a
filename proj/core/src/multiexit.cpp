#include "aegis/multiexit.hpp"

#include <cmath>
#include <algorithm>
#include <stdexcept>

#include "aegis/optim.hpp"

namespace aegis {

nn::Network make_ic_head(const nn::Shape& in, std::size_t classes) {
  if (in.size() != 3)
    throw std::invalid_argument("IC heads attach to (C, H, W) activations");
  const std::size_t channels = std::min<std::size_t>(2 * in[0], 128);
  return nn::Network(in, {nn::LayerSpec::conv2d(in[0], channels, 3, 1, 1),
                          nn::LayerSpec::relu(), nn::LayerSpec::globalavgpool(),
                          nn::LayerSpec::dense(channels, classes)});
}

MultiExitModel MultiExitModel::from_backbone(nn::Network backbone) {
  MultiExitModel m;
  m.backbone_ = std::move(backbone);
  for (std::size_t i : m.backbone_.param_layers()) {
    auto& layer = m.backbone_.layer(i);
    m.codes_.push_back(quant::quantize_layer(layer.weight));
    layer.weight = m.codes_.back().dequantize();
  }
  m.rebuild_slots();
  return m;
}

MultiExitModel MultiExitModel::assemble(nn::Network backbone,
                                        std::vector<quant::QuantizedTensor> codes,
                                        std::vector<InternalClassifier> ics) {
  MultiExitModel m;
  m.backbone_ = std::move(backbone);
  m.ics_ = std::move(ics);
  m.codes_ = std::move(codes);
  m.rebuild_slots();
  if (m.slots_.size() != m.codes_.size())
    throw std::invalid_argument("assemble: code table does not match layers");
  for (std::size_t id = 0; id < m.slots_.size(); ++id) {
    auto& layer = m.mutable_layer(m.slots_[id]);
    if (layer.weight.shape() != m.codes_[id].shape)
      throw std::invalid_argument("assemble: code shape mismatch");
    layer.weight = m.codes_[id].dequantize();
  }
  return m;
}

void MultiExitModel::rebuild_slots() {
  slots_.clear();
  for (std::size_t i : backbone_.param_layers()) slots_.push_back({ParamSlot::kBackbone, i});
  backbone_layers_ = slots_.size();
  for (std::size_t j = 0; j < ics_.size(); ++j)
    for (std::size_t i : ics_[j].head.param_layers()) slots_.push_back({j, i});
}

std::size_t MultiExitModel::layer_id(ParamSlot s) const {
  for (std::size_t id = 0; id < slots_.size(); ++id)
    if (slots_[id].ic == s.ic && slots_[id].layer == s.layer) return id;
  throw std::out_of_range("layer_id: no such parameter layer");
}

std::size_t MultiExitModel::ic_dense_layer_id(std::size_t i) const {
  return layer_id({i, ics_.at(i).head.size() - 1});
}

const nn::Layer& MultiExitModel::param_layer(std::size_t layer_id) const {
  const ParamSlot s = slots_.at(layer_id);
  return s.is_backbone() ? backbone_.layer(s.layer) : ics_[s.ic].head.layer(s.layer);
}

nn::Layer& MultiExitModel::mutable_layer(ParamSlot s) {
  return s.is_backbone() ? backbone_.layer(s.layer) : ics_[s.ic].head.layer(s.layer);
}

void MultiExitModel::flip(const quant::BitLocation& loc) {
  auto& q = codes_.at(loc.layer_id);
  quant::flip_bit_inplace(q, loc.flat_index, loc.bit);
  mutable_layer(slots_[loc.layer_id]).weight[loc.flat_index] =
      q.value(loc.flat_index);
}

void MultiExitModel::set_code(std::size_t layer_id, std::size_t index,
                              std::int8_t code) {
  auto& q = codes_.at(layer_id);
  q.codes.at(index) = code;
  mutable_layer(slots_[layer_id]).weight[index] = q.value(index);
}

void MultiExitModel::set_ic_head(std::size_t i, nn::Network head) {
  auto& ic = ics_.at(i);
  if (head.size() != ic.head.size())
    throw std::invalid_argument("set_ic_head: architecture mismatch");
  ic.head = std::move(head);
  for (std::size_t l : ic.head.param_layers()) {
    const std::size_t id = layer_id({i, l});
    auto& layer = ic.head.layer(l);
    codes_[id] = quant::quantize_layer(layer.weight);
    layer.weight = codes_[id].dequantize();
  }
}

void MultiExitModel::add_ic(InternalClassifier ic) {
  if (!ics_.empty() && ic.position <= ics_.back().position)
    throw std::invalid_argument("add_ic: positions must increase");
  for (std::size_t l : ic.head.param_layers()) {
    auto& layer = ic.head.layer(l);
    codes_.push_back(quant::quantize_layer(layer.weight));
    layer.weight = codes_.back().dequantize();
  }
  ics_.push_back(std::move(ic));
  rebuild_slots();
}

std::size_t MultiExitModel::model_bytes() const {
  std::size_t n = 0;
  for (std::size_t id = 0; id < slots_.size(); ++id)
    n += codes_[id].size() + sizeof(double) +
         param_layer(id).bias.size() * sizeof(double);
  return n;
}

std::size_t MultiExitModel::backbone_bytes() const {
  std::size_t n = 0;
  for (std::size_t id = 0; id < backbone_layers_; ++id)
    n += codes_[id].size() + sizeof(double) +
         param_layer(id).bias.size() * sizeof(double);
  return n;
}

bool operator==(const MultiExitModel& a, const MultiExitModel& b) {
  if (a.codes_ != b.codes_ || a.ics_.size() != b.ics_.size()) return false;
  for (std::size_t i = 0; i < a.ics_.size(); ++i)
    if (a.ics_[i].position != b.ics_[i].position) return false;
  for (std::size_t id = 0; id < a.slots_.size(); ++id)
    if (a.param_layer(id).bias != b.param_layer(id).bias) return false;
  return true;
}

MultiExitModel attach_ics(const MultiExitModel& model,
                          std::span<const std::size_t> positions, Rng& rng) {
  const auto& exits = model.backbone().exit_points();
  MultiExitModel out = model;
  // drop existing heads by rebuilding from the backbone codes
  std::vector<quant::QuantizedTensor> codes;
  for (std::size_t id = 0; id < model.backbone_param_layers(); ++id)
    codes.push_back(model.codes(id));
  out = MultiExitModel::assemble(model.backbone(), std::move(codes), {});
  for (std::size_t k = 0; k < positions.size(); ++k) {
    const std::size_t p = positions[k];
    if (std::find(exits.begin(), exits.end(), p) == exits.end())
      throw std::invalid_argument("attach_ics: layer " + std::to_string(p) +
                                  " is not an exit point");
    if (k > 0 && p <= positions[k - 1])
      throw std::invalid_argument("attach_ics: positions must increase");
    InternalClassifier ic{p, make_ic_head(model.backbone().activation_shape(p),
                                          model.class_count())};
    ic.head.init_he(rng);
    out.add_ic(std::move(ic));
  }
  return out;
}

ExitFeatures compute_exit_features(const MultiExitModel& model,
                                   std::span<const nn::Tensor> inputs) {
  ExitFeatures f(model.ics().size());
  if (model.ics().empty()) return f;
  const std::size_t deepest = model.ics().back().position + 1;
  for (const auto& x : inputs) {
    const nn::Trace t = nn::forward_trace(model.backbone(), x, 0, deepest);
    for (std::size_t j = 0; j < model.ics().size(); ++j)
      f[j].push_back(t.after(model.ic(j).position));
  }
  return f;
}

MultiExitModel train_ics(MultiExitModel model,
                         std::span<const nn::Tensor> inputs,
                         std::span<const std::size_t> labels,
                         const IcTrainConfig& cfg, Rng& rng) {
  const ExitFeatures clean = compute_exit_features(model, inputs);
  return detail::train_heads(std::move(model), clean, nullptr, labels, cfg, 0.0,
                             rng);
}

namespace detail {

void clip_grad_norm(nn::ParamGrads& g, double max_norm) {
  double sq = 0.0;
  for (const auto* part : {&g.weight, &g.bias})
    for (const auto& t : *part)
      for (double v : t.values()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) g.scale(max_norm / norm);
}

MultiExitModel train_heads(MultiExitModel model, const ExitFeatures& clean,
                           const ExitFeatures* flipped,
                           std::span<const std::size_t> labels,
                           const IcTrainConfig& cfg, double mix, Rng& rng) {
  if (cfg.epochs == 0) throw std::invalid_argument("IC training: epochs >= 1");
  const std::size_t n = labels.size();
  if (n == 0) throw std::invalid_argument("IC training: empty dataset");
  const std::size_t ics = model.ics().size();
  std::vector<nn::Network> heads;
  std::vector<nn::MomentumSgd> opts;
  for (std::size_t j = 0; j < ics; ++j) {
    heads.push_back(model.ic(j).head);
    opts.emplace_back(heads.back(), cfg.momentum);
  }
  const std::size_t steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
  const std::size_t total = steps_per_epoch * cfg.epochs;
  std::size_t step = 0;
  std::vector<nn::Tensor> bx;
  std::vector<std::size_t> by;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto order = shuffled_indices(n, rng);
    for (std::size_t s = 0; s < n; s += cfg.batch, ++step) {
      // batch b is drawn from the flipped model when floor((b+1)mix) > floor(b mix)
      const bool use_flipped =
          flipped && static_cast<std::size_t>((step + 1) * mix) >
                         static_cast<std::size_t>(step * mix);
      const ExitFeatures& src = use_flipped ? *flipped : clean;
      const double lr = nn::cosine_lr(cfg.lr, step, total);
      by.clear();
      for (std::size_t k = s; k < std::min(n, s + cfg.batch); ++k)
        by.push_back(labels[order[k]]);
      for (std::size_t j = 0; j < ics; ++j) {
        bx.clear();
        for (std::size_t k = s; k < std::min(n, s + cfg.batch); ++k)
          bx.push_back(src[j][order[k]]);
        auto r = nn::grad_params(heads[j], bx, nn::cross_entropy_fn(by));
        if (cfg.clip_norm > 0.0) clip_grad_norm(r.grads, cfg.clip_norm);
        if (lr > 0.0) opts[j].step(heads[j], r.grads, lr);
      }
    }
  }
  for (std::size_t j = 0; j < ics; ++j) model.set_ic_head(j, std::move(heads[j]));
  return model;
}

}  // namespace detail

Prediction predict_from_logits(const nn::Tensor& logits) {
  const nn::Tensor p = nn::softmax(logits);
  const std::size_t k = nn::argmax(p.values());
  return {k, p[k]};
}

Prediction ic_predict(const MultiExitModel& model, std::size_t exit,
                      const nn::Tensor& x) {
  if (exit > model.final_exit())
    throw std::out_of_range("ic_predict: no such exit");
  if (exit == model.final_exit())
    return predict_from_logits(nn::forward(model.backbone(), x).logits);
  const auto& ic = model.ic(exit);
  const nn::Tensor f =
      nn::forward_range(model.backbone(), x, 0, ic.position + 1);
  return predict_from_logits(nn::forward(ic.head, f).logits);
}

std::vector<nn::Tensor> all_exit_logits(const MultiExitModel& model,
                                        const nn::Tensor& x) {
  const nn::Trace t = nn::forward_trace(model.backbone(), x);
  std::vector<nn::Tensor> out;
  for (const auto& ic : model.ics())
    out.push_back(nn::forward(ic.head, t.after(ic.position)).logits);
  out.push_back(t.output());
  return out;
}

ModelGrads::ModelGrads(const MultiExitModel& model)
    : backbone(model.backbone()) {
  for (const auto& ic : model.ics()) ics.emplace_back(ic.head);
}

void ModelGrads::scale(double s) {
  backbone.scale(s);
  for (auto& g : ics) g.scale(s);
}

const nn::Tensor& ModelGrads::weight(const MultiExitModel& model,
                                     std::size_t layer_id) const {
  const ParamSlot s = model.slot(layer_id);
  return s.is_backbone() ? backbone.weight[s.layer] : ics[s.ic].weight[s.layer];
}

ExitBackward exit_backward(const MultiExitModel& model, const nn::Tensor& x,
                           std::span<const ExitLossFn> losses,
                           ModelGrads* grads, const ExitBackwardOptions& opts) {
  if (losses.size() != model.exit_count())
    throw std::invalid_argument("exit_backward: one loss slot per exit");
  ExitBackward out;
  const bool final_loss = static_cast<bool>(losses[model.final_exit()]);
  std::size_t depth = final_loss ? model.backbone().size() : 0;
  for (std::size_t j = 0; j < model.ics().size(); ++j)
    if (losses[j]) depth = std::max(depth, model.ic(j).position + 1);
  for (const auto& al : opts.activation_losses)
    depth = std::max(depth, al.layer + 1);
  if (depth == 0) return out;

  const nn::Trace trace = nn::forward_trace(model.backbone(), x, 0, depth);
  std::vector<nn::Tensor> injected;
  injected.reserve(model.ics().size() + opts.activation_losses.size());
  std::vector<nn::Injection> injections;
  for (std::size_t j = 0; j < model.ics().size(); ++j) {
    if (!losses[j]) continue;
    const auto& ic = model.ic(j);
    const nn::Trace ht = nn::forward_trace(ic.head, trace.after(ic.position));
    nn::LossValue lv = losses[j](ht.output());
    out.loss += lv.value;
    nn::BackwardOptions ho;
    ho.grads = grads ? &grads->ics[j] : nullptr;
    injected.push_back(nn::backward(ic.head, ht, lv.grad, ho));
    injections.push_back({ic.position, &injected.back()});
  }
  for (const auto& al : opts.activation_losses) {
    nn::LossValue lv = al.fn(trace.after(al.layer));
    out.loss += lv.value;
    injected.push_back(std::move(lv.grad));
    injections.push_back({al.layer, &injected.back()});
  }
  nn::Tensor top;
  if (final_loss) {
    nn::LossValue lv = losses[model.final_exit()](trace.output());
    out.loss += lv.value;
    top = std::move(lv.grad);
  }
  nn::BackwardOptions bo;
  bo.grads = grads ? &grads->backbone : nullptr;
  bo.injections = injections;
  bo.skip_input_grad = !opts.input_grad;
  bo.activation_grads = opts.activation_grads ? &out.activation_grads : nullptr;
  out.input_grad = nn::backward(model.backbone(), trace, top, bo);
  return out;
}

double exit_accuracy(const MultiExitModel& model, std::size_t exit,
                     std::span<const nn::Tensor> inputs,
                     std::span<const std::size_t> labels) {
  if (inputs.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    hit += ic_predict(model, exit, inputs[i]).label == labels[i];
  return 100.0 * static_cast<double>(hit) / static_cast<double>(inputs.size());
}

}  // namespace aegis
