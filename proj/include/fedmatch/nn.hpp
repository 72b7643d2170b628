#pragma once

// Minimal differentiable model substrate: a fully-connected network stored as
// one flat parameter vector, its softmax forward pass, the losses the
// training steps need, analytic backprop and the plateau learning-rate
// schedule.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <variant>
#include <vector>

namespace fedmatch {

inline constexpr double kProbFloor = 1e-12;

enum class Activation { kRelu, kTanh };

Activation parse_activation(std::string_view name);
std::string_view to_string(Activation act);

/// Layer widths from input to class count, plus the hidden nonlinearity.
struct ModelArch {
  std::vector<std::size_t> layer_dims;
  Activation activation = Activation::kRelu;

  ModelArch() = default;
  ModelArch(std::vector<std::size_t> dims, Activation act);

  std::size_t input_dim() const { return layer_dims.front(); }
  std::size_t num_classes() const { return layer_dims.back(); }
  std::size_t num_layers() const { return layer_dims.size() - 1; }
  std::size_t param_count() const;

  bool operator==(const ModelArch&) const = default;
};

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return rows_ == 0; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  /// Rows at the given positions, in order.
  Matrix select_rows(std::span<const std::size_t> idx) const;

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Flat model weights. Layout per layer: W (out x in, row-major) then b (out).
class ParamVector {
 public:
  ParamVector() = default;
  /// All-zero parameters for `arch`.
  explicit ParamVector(ModelArch arch);
  ParamVector(ModelArch arch, std::vector<double> values);

  const ModelArch& arch() const { return arch_; }
  std::size_t size() const { return values_.size(); }

  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

  bool operator==(const ParamVector&) const = default;

 private:
  ModelArch arch_;
  std::vector<double> values_;
};

/// Per-row categorical distributions. Rows sum to 1 within 1e-9.
class ProbDist {
 public:
  ProbDist() = default;
  /// Validates every row; throws InvalidInput otherwise.
  static ProbDist from_matrix(Matrix m);

  std::size_t rows() const { return m_.rows(); }
  std::size_t classes() const { return m_.cols(); }
  double operator()(std::size_t r, std::size_t c) const { return m_(r, c); }
  std::span<const double> row(std::size_t r) const { return m_.row(r); }
  const Matrix& matrix() const { return m_; }

  bool operator==(const ProbDist&) const = default;

 private:
  friend ProbDist softmax_rows(Matrix logits);
  explicit ProbDist(Matrix m) : m_(std::move(m)) {}
  Matrix m_;
};

ProbDist softmax_rows(Matrix logits);

/// Intermediate values of one forward pass, kept for backprop.
struct ForwardTrace {
  std::vector<Matrix> layer_inputs;  // input to each layer (post-activation)
  std::vector<Matrix> pre_activations;  // hidden layers only
  ProbDist probs;
};

ForwardTrace forward_trace(const ParamVector& params, const Matrix& batch);
ProbDist forward(const ParamVector& params, const Matrix& batch);

/// Gradient wrt params given dL/dlogits for every row of the traced batch.
ParamVector backward(const ParamVector& params, const ForwardTrace& trace, const Matrix& dlogits);

double cross_entropy(const Matrix& targets, const ProbDist& preds);
/// Mean over rows of KL(p_row || q_row).
double kl_divergence(const ProbDist& p, const ProbDist& q);

/// One-hot of the row argmax; ties go to the lowest column.
Matrix one_hot(const ProbDist& dist);
std::size_t argmax(std::span<const double> row);
Matrix one_hot_labels(std::span<const int> labels, std::size_t num_classes);

double accuracy(const ParamVector& params, const Matrix& features, std::span<const int> labels);

// Differentiable objectives accepted by gradient().

struct CrossEntropyLoss {
  std::reference_wrapper<const Matrix> features;
  std::reference_wrapper<const Matrix> targets;
};
/// KL(reference || p_params(features)).
struct KlToReferenceLoss {
  std::reference_wrapper<const Matrix> features;
  std::reference_wrapper<const ProbDist> reference;
};
/// ||x||_1 over the whole vector.
struct L1Loss {};
/// ||anchor - x||^2 with the anchor held fixed.
struct SquaredL2Loss {
  std::span<const double> anchor;
};

using LossSpec = std::variant<CrossEntropyLoss, KlToReferenceLoss, L1Loss, SquaredL2Loss>;

enum class LossKind { kCrossEntropy, kKlToReference, kL1, kSquaredL2 };
LossKind parse_loss_kind(std::string_view name);

double loss_value(const LossSpec& spec, const ParamVector& params);
ParamVector gradient(const LossSpec& spec, const ParamVector& params);

struct LrSchedule {
  int patience = 5;
  double factor = 3.0;
};

struct OptimState {
  double lr = 1e-3;
  int patience_counter = 0;
  std::optional<double> best_val_loss;
};

/// Divide the rate by `factor` after `patience` consecutive non-improving losses.
OptimState lr_step(OptimState state, double val_loss, const LrSchedule& schedule = {});

/// Variance-scaling init (fan-in normal); biases start at zero.
ParamVector init_params(const ModelArch& arch, std::uint64_t seed);

}  // namespace fedmatch
