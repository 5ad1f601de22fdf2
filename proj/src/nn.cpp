#include "uapdfl/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

#include "uapdfl/errors.hpp"

namespace uapdfl::nn {

namespace {

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

void check_chain(std::span<const DenseLayer> layers) {
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& layer = layers[k];
    if (layer.out_dim() == 0 || layer.in_dim() == 0) {
      throw ShapeError("layer " + std::to_string(k) + " has an empty weight matrix");
    }
    if (layer.bias.size() != layer.out_dim()) {
      throw ShapeError("layer " + std::to_string(k) + " bias length " +
                       std::to_string(layer.bias.size()) + " != out_dim " +
                       std::to_string(layer.out_dim()));
    }
    if (k + 1 < layers.size() && layer.out_dim() != layers[k + 1].in_dim()) {
      throw ShapeError("layer " + std::to_string(k) + " out_dim " +
                       std::to_string(layer.out_dim()) + " != layer " + std::to_string(k + 1) +
                       " in_dim " + std::to_string(layers[k + 1].in_dim()));
    }
  }
}

// z = a W^T + b, then the activation in place.
Matrix apply_layer(const DenseLayer& layer, const Matrix& a, Matrix* pre_activation) {
  const std::size_t batch = a.rows();
  Matrix z(batch, layer.out_dim());
  for (std::size_t n = 0; n < batch; ++n) {
    const auto x = a.row(n);
    for (std::size_t o = 0; o < layer.out_dim(); ++o) {
      const auto w = layer.weights.row(o);
      double acc = layer.bias[o];
      for (std::size_t i = 0; i < w.size(); ++i) acc += w[i] * x[i];
      z(n, o) = acc;
    }
  }
  if (pre_activation != nullptr) *pre_activation = z;
  if (layer.activation == Activation::relu) {
    for (double& v : z.values()) v = v > 0.0 ? v : 0.0;
  }
  return z;
}

Matrix run_layers(std::span<const DenseLayer> layers, const Matrix& inputs) {
  if (inputs.cols() != layers.front().in_dim()) {
    throw ShapeError("input width " + std::to_string(inputs.cols()) + " != model input_dim " +
                     std::to_string(layers.front().in_dim()));
  }
  Matrix a = inputs;
  for (const auto& layer : layers) a = apply_layer(layer, a, nullptr);
  return a;
}

// Forward pass that keeps every layer's input and pre-activation.
struct Trace {
  std::vector<Matrix> inputs;          // inputs[k] feeds layer k
  std::vector<Matrix> pre_activations;  // z_k
  Matrix output;
};

Trace traced_forward(std::span<const DenseLayer> layers, const Matrix& inputs) {
  Trace t;
  t.inputs.reserve(layers.size());
  t.pre_activations.resize(layers.size());
  Matrix a = inputs;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    t.inputs.push_back(a);
    a = apply_layer(layers[k], a, &t.pre_activations[k]);
  }
  t.output = std::move(a);
  return t;
}

// Accumulates dL/dW, dL/db for layers [0, upto) given dL/d(output of layer upto-1).
void backprop(std::span<const DenseLayer> layers, const Trace& trace, Matrix upstream,
              std::size_t upto, std::vector<LayerGradient>& grads) {
  for (std::size_t k = upto; k-- > 0;) {
    const auto& layer = layers[k];
    const Matrix& z = trace.pre_activations[k];
    if (layer.activation == Activation::relu) {
      for (std::size_t i = 0; i < upstream.size(); ++i) {
        if (z.values()[i] <= 0.0) upstream.values()[i] = 0.0;
      }
    }
    const Matrix& a_in = trace.inputs[k];
    auto& g = grads[k];
    for (std::size_t n = 0; n < upstream.rows(); ++n) {
      const auto dz = upstream.row(n);
      const auto x = a_in.row(n);
      for (std::size_t o = 0; o < layer.out_dim(); ++o) {
        if (dz[o] == 0.0) continue;
        auto gw = g.weights.row(o);
        for (std::size_t i = 0; i < x.size(); ++i) gw[i] += dz[o] * x[i];
        g.bias[o] += dz[o];
      }
    }
    if (k == 0) break;
    Matrix down(upstream.rows(), layer.in_dim());
    for (std::size_t n = 0; n < upstream.rows(); ++n) {
      const auto dz = upstream.row(n);
      auto da = down.row(n);
      for (std::size_t o = 0; o < layer.out_dim(); ++o) {
        if (dz[o] == 0.0) continue;
        const auto w = layer.weights.row(o);
        for (std::size_t i = 0; i < w.size(); ++i) da[i] += dz[o] * w[i];
      }
    }
    upstream = std::move(down);
  }
}

std::vector<LayerGradient> zero_grads(std::span<const DenseLayer> layers) {
  std::vector<LayerGradient> out;
  out.reserve(layers.size());
  for (const auto& l : layers) {
    out.push_back({Matrix(l.out_dim(), l.in_dim()), std::vector<double>(l.out_dim(), 0.0)});
  }
  return out;
}

std::vector<DenseLayer> make_layers(std::span<const std::size_t> widths) {
  if (widths.size() < 3) throw ShapeError("an MLP with a g|h split needs at least 2 layers");
  std::vector<DenseLayer> layers;
  for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
    const bool last = k + 2 == widths.size();
    layers.push_back({Matrix(widths[k + 1], widths[k]), std::vector<double>(widths[k + 1], 0.0),
                      last ? Activation::identity : Activation::relu});
  }
  return layers;
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), values_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  if (values_.size() != rows * cols) {
    throw ShapeError("matrix " + std::to_string(rows) + "x" + std::to_string(cols) + " given " +
                     std::to_string(values_.size()) + " values");
  }
}

Matrix Matrix::from_row(std::span<const double> row) {
  return Matrix(1, row.size(), std::vector<double>(row.begin(), row.end()));
}

std::size_t ModelPart::input_dim() const {
  if (layers.empty()) throw ShapeError("empty model part");
  return layers.front().in_dim();
}

std::size_t ModelPart::output_dim() const {
  if (layers.empty()) throw ShapeError("empty model part");
  return layers.back().out_dim();
}

std::size_t ModelPart::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.parameter_count();
  return n;
}

LayeredModel::LayeredModel(std::vector<DenseLayer> layers, std::size_t split_index)
    : layers_(std::move(layers)), split_index_(split_index) {
  if (layers_.size() < 2) throw ShapeError("model needs at least two layers");
  if (split_index_ < 1 || split_index_ >= layers_.size()) {
    throw ShapeError("split_index " + std::to_string(split_index_) + " outside [1, " +
                     std::to_string(layers_.size() - 1) + "]");
  }
  check_chain(layers_);
  for (const auto& l : layers_) {
    if (!all_finite(l.weights.values()) || !all_finite(l.bias)) {
      throw ShapeError("model contains non-finite parameters");
    }
  }
}

LayeredModel LayeredModel::mlp(std::span<const std::size_t> widths, std::size_t split_index,
                               std::uint64_t seed) {
  auto layers = make_layers(widths);
  std::mt19937_64 rng(seed);
  for (auto& l : layers) {
    const double limit = std::sqrt(6.0 / static_cast<double>(l.in_dim() + l.out_dim()));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (double& w : l.weights.values()) w = dist(rng);
  }
  return LayeredModel(std::move(layers), split_index);
}

LayeredModel LayeredModel::zeros(std::span<const std::size_t> widths, std::size_t split_index) {
  return LayeredModel(make_layers(widths), split_index);
}

std::size_t LayeredModel::parameter_count() const noexcept {
  return feature_parameter_count() + classifier_parameter_count();
}

std::size_t LayeredModel::feature_parameter_count() const noexcept {
  std::size_t n = 0;
  for (std::size_t k = 0; k < split_index_; ++k) n += layers_[k].parameter_count();
  return n;
}

std::size_t LayeredModel::classifier_parameter_count() const noexcept {
  std::size_t n = 0;
  for (std::size_t k = split_index_; k < layers_.size(); ++k) n += layers_[k].parameter_count();
  return n;
}

bool LayeredModel::same_architecture(const LayeredModel& other) const noexcept {
  if (split_index_ != other.split_index_ || layers_.size() != other.layers_.size()) return false;
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const auto& a = layers_[k];
    const auto& b = other.layers_[k];
    if (a.in_dim() != b.in_dim() || a.out_dim() != b.out_dim() || a.activation != b.activation) {
      return false;
    }
  }
  return true;
}

std::pair<ModelPart, ModelPart> split(const LayeredModel& model) {
  const auto layers = model.layers();
  const auto mid = layers.begin() + static_cast<std::ptrdiff_t>(model.split_index());
  return {ModelPart{{layers.begin(), mid}}, ModelPart{{mid, layers.end()}}};
}

LayeredModel combine(ModelPart feature_extractor, ModelPart classifier) {
  if (feature_extractor.layers.empty() || classifier.layers.empty()) {
    throw ShapeError("combine needs non-empty feature extractor and classifier");
  }
  if (feature_extractor.output_dim() != classifier.input_dim()) {
    throw ShapeError("feature extractor output " + std::to_string(feature_extractor.output_dim()) +
                     " != classifier input " + std::to_string(classifier.input_dim()));
  }
  const std::size_t split_index = feature_extractor.layers.size();
  auto layers = std::move(feature_extractor.layers);
  layers.insert(layers.end(), std::make_move_iterator(classifier.layers.begin()),
                std::make_move_iterator(classifier.layers.end()));
  return LayeredModel(std::move(layers), split_index);
}

Matrix forward(const LayeredModel& model, const Matrix& inputs) {
  return run_layers(model.layers(), inputs);
}

Matrix feature_forward(const LayeredModel& model, const Matrix& inputs) {
  return run_layers(model.layers().first(model.split_index()), inputs);
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw ShapeError("softmax of an empty vector");
  if (!all_finite(logits)) throw NumericError("softmax input contains non-finite values");
  const double peak = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - peak);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t n = 0; n < logits.rows(); ++n) {
    const auto p = softmax(logits.row(n));
    std::copy(p.begin(), p.end(), out.row(n).begin());
  }
  return out;
}

double cross_entropy(const Matrix& probs, std::span<const std::size_t> labels) {
  if (labels.size() != probs.rows()) {
    throw ShapeError("labels " + std::to_string(labels.size()) + " != rows " +
                     std::to_string(probs.rows()));
  }
  if (labels.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels[n] >= probs.cols()) {
      throw std::out_of_range("label " + std::to_string(labels[n]) + " >= " +
                              std::to_string(probs.cols()) + " classes");
    }
    total -= std::log(probs(n, labels[n]));
  }
  return total / static_cast<double>(labels.size());
}

GradientBundle GradientBundle::zeros_like(const LayeredModel& model) {
  return {zero_grads(model.layers()), 0.0, 0.0};
}

GradientBundle backward(const LayeredModel& model, const Matrix& inputs,
                        std::span<const std::size_t> labels, std::span<const double> unit_input,
                        std::optional<std::span<const double>> aux_target, double mu) {
  if (mu < 0.0) throw std::invalid_argument("mu must be non-negative");
  if (labels.size() != inputs.rows()) {
    throw ShapeError("labels " + std::to_string(labels.size()) + " != batch rows " +
                     std::to_string(inputs.rows()));
  }
  if (inputs.cols() != model.input_dim()) {
    throw ShapeError("input width " + std::to_string(inputs.cols()) + " != model input_dim " +
                     std::to_string(model.input_dim()));
  }
  const bool proximal = aux_target.has_value() && mu > 0.0;
  if (aux_target && aux_target->size() != model.feature_dim()) {
    throw ShapeError("aux target length " + std::to_string(aux_target->size()) +
                     " != feature dim " + std::to_string(model.feature_dim()));
  }
  if (proximal && unit_input.size() != model.input_dim()) {
    throw ShapeError("unit tensor length " + std::to_string(unit_input.size()) +
                     " != model input_dim " + std::to_string(model.input_dim()));
  }

  const auto layers = model.layers();
  GradientBundle out = GradientBundle::zeros_like(model);
  const std::size_t batch = inputs.rows();

  if (batch > 0) {
    Trace trace = traced_forward(layers, inputs);
    const Matrix& logits = trace.output;
    Matrix upstream(batch, logits.cols());
    double data_loss = 0.0;
    const double inv_batch = 1.0 / static_cast<double>(batch);
    for (std::size_t n = 0; n < batch; ++n) {
      if (labels[n] >= logits.cols()) {
        throw std::out_of_range("label " + std::to_string(labels[n]) + " >= " +
                                std::to_string(logits.cols()) + " classes");
      }
      const auto z = logits.row(n);
      const double peak = *std::max_element(z.begin(), z.end());
      double total = 0.0;
      for (double v : z) total += std::exp(v - peak);
      const double log_norm = peak + std::log(total);
      data_loss += log_norm - z[labels[n]];
      for (std::size_t c = 0; c < z.size(); ++c) {
        const double p = std::exp(z[c] - log_norm);
        upstream(n, c) = (p - (c == labels[n] ? 1.0 : 0.0)) * inv_batch;
      }
    }
    out.data_loss = data_loss * inv_batch;
    backprop(layers, trace, std::move(upstream), layers.size(), out.layers);
  }

  out.loss = out.data_loss;
  if (proximal) {
    const auto g_layers = layers.first(model.split_index());
    Trace trace = traced_forward(g_layers, Matrix::from_row(unit_input));
    const auto features = trace.output.row(0);
    Matrix upstream(1, features.size());
    double sq = 0.0;
    for (std::size_t i = 0; i < features.size(); ++i) {
      const double diff = features[i] - (*aux_target)[i];
      sq += diff * diff;
      upstream(0, i) = 2.0 * mu * diff;
    }
    out.loss += mu * sq;
    backprop(g_layers, trace, std::move(upstream), g_layers.size(), out.layers);
  }
  return out;
}

OptimizerState OptimizerState::for_model(const LayeredModel& model, double learning_rate,
                                         double momentum, double decay) {
  if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be >= 0", "lr");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0,1)", "momentum");
  if (decay <= 0.0 || decay > 1.0) throw ConfigError("decay must be in (0,1]", "lr_decay");
  return {zero_grads(model.layers()), learning_rate, momentum, decay};
}

void OptimizerState::reset_buffers() {
  for (auto& b : momentum_buffers) {
    std::fill(b.weights.values().begin(), b.weights.values().end(), 0.0);
    std::fill(b.bias.begin(), b.bias.end(), 0.0);
  }
}

void sgd_step(LayeredModel& model, const GradientBundle& grads, OptimizerState& opt) {
  auto layers = model.mutable_layers();
  if (grads.layers.size() != layers.size() || opt.momentum_buffers.size() != layers.size()) {
    throw ShapeError("gradient / optimizer layer count does not match model");
  }
  for (std::size_t k = 0; k < layers.size(); ++k) {
    auto& layer = layers[k];
    const auto& g = grads.layers[k];
    auto& buf = opt.momentum_buffers[k];
    if (g.weights.rows() != layer.out_dim() || g.weights.cols() != layer.in_dim() ||
        g.bias.size() != layer.bias.size() || buf.weights.size() != layer.weights.size() ||
        buf.bias.size() != layer.bias.size()) {
      throw ShapeError("gradient shape mismatch at layer " + std::to_string(k));
    }
    auto w = layer.weights.values();
    auto gw = g.weights.values();
    auto bw = buf.weights.values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      bw[i] = opt.momentum * bw[i] + gw[i];
      w[i] -= opt.learning_rate * bw[i];
    }
    for (std::size_t i = 0; i < layer.bias.size(); ++i) {
      buf.bias[i] = opt.momentum * buf.bias[i] + g.bias[i];
      layer.bias[i] -= opt.learning_rate * buf.bias[i];
    }
  }
}

}  // namespace uapdfl::nn
