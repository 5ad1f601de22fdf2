#pragma once

// Dense MLP with hand-derived backpropagation, momentum SGD and a
// feature-extractor / classifier split.
//
// A LayeredModel is an ordered stack of dense layers. The first
// `split_index` layers form the feature extractor g, the rest form the
// classifier h; `split` and `combine` move between the whole model and the
// two blocks without touching any value.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace uapdfl::nn {

enum class Activation { relu, identity };

// Row-major dense matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return values_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }

  static Matrix from_row(std::span<const double> row);

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

struct DenseLayer {
  Matrix weights;  // out_dim x in_dim
  std::vector<double> bias;
  Activation activation = Activation::identity;

  std::size_t in_dim() const noexcept { return weights.cols(); }
  std::size_t out_dim() const noexcept { return weights.rows(); }
  std::size_t parameter_count() const noexcept { return weights.size() + bias.size(); }

  bool operator==(const DenseLayer&) const = default;
};

// A contiguous run of layers: either the feature extractor or the classifier.
struct ModelPart {
  std::vector<DenseLayer> layers;

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t parameter_count() const noexcept;

  bool operator==(const ModelPart&) const = default;
};

class LayeredModel {
 public:
  // Throws ShapeError unless 1 <= split_index < layers.size(), dimensions
  // chain, and every entry is finite.
  LayeredModel(std::vector<DenseLayer> layers, std::size_t split_index);

  // ReLU on every hidden layer, identity on the output layer, weights uniform
  // in +-sqrt(6 / (fan_in + fan_out)) and zero biases.
  static LayeredModel mlp(std::span<const std::size_t> widths, std::size_t split_index,
                          std::uint64_t seed);

  // All weights and biases zero.
  static LayeredModel zeros(std::span<const std::size_t> widths, std::size_t split_index);

  std::span<const DenseLayer> layers() const noexcept { return layers_; }
  // Values may change through this view; shapes must not.
  std::span<DenseLayer> mutable_layers() noexcept { return layers_; }

  std::size_t split_index() const noexcept { return split_index_; }
  std::size_t input_dim() const noexcept { return layers_.front().in_dim(); }
  std::size_t output_dim() const noexcept { return layers_.back().out_dim(); }
  std::size_t feature_dim() const noexcept { return layers_[split_index_ - 1].out_dim(); }

  std::size_t parameter_count() const noexcept;
  std::size_t feature_parameter_count() const noexcept;
  std::size_t classifier_parameter_count() const noexcept;

  bool same_architecture(const LayeredModel& other) const noexcept;

  bool operator==(const LayeredModel&) const = default;

 private:
  std::vector<DenseLayer> layers_;
  std::size_t split_index_ = 1;
};

std::pair<ModelPart, ModelPart> split(const LayeredModel& model);

// Throws ShapeError when g's output width differs from h's input width.
LayeredModel combine(ModelPart feature_extractor, ModelPart classifier);

// One row per sample.
Matrix forward(const LayeredModel& model, const Matrix& inputs);
Matrix feature_forward(const LayeredModel& model, const Matrix& inputs);

// Max-subtracted softmax. Throws NumericError on non-finite input.
std::vector<double> softmax(std::span<const double> logits);
Matrix softmax_rows(const Matrix& logits);

// Mean negative log-probability of the true class.
double cross_entropy(const Matrix& probs, std::span<const std::size_t> labels);

struct LayerGradient {
  Matrix weights;
  std::vector<double> bias;

  bool operator==(const LayerGradient&) const = default;
};

struct GradientBundle {
  std::vector<LayerGradient> layers;
  double loss = 0.0;       // full objective: data loss + proximal term
  double data_loss = 0.0;  // cross-entropy part only

  static GradientBundle zeros_like(const LayeredModel& model);
};

// Gradient of   CE(model; batch) + mu * || g(unit_input) - aux_target ||^2.
// The proximal part backpropagates through the feature extractor only. When
// `aux_target` is empty or mu == 0 the result is plain cross-entropy backprop.
GradientBundle backward(const LayeredModel& model, const Matrix& inputs,
                        std::span<const std::size_t> labels, std::span<const double> unit_input,
                        std::optional<std::span<const double>> aux_target, double mu);

struct OptimizerState {
  std::vector<LayerGradient> momentum_buffers;
  double learning_rate = 0.05;
  double momentum = 0.5;
  double decay = 0.95;

  static OptimizerState for_model(const LayeredModel& model, double learning_rate = 0.05,
                                   double momentum = 0.5, double decay = 0.95);
  void reset_buffers();
};

// buffer <- momentum * buffer + grad;  param <- param - lr * buffer.
void sgd_step(LayeredModel& model, const GradientBundle& grads, OptimizerState& opt);

}  // namespace uapdfl::nn
