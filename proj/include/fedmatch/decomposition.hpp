#pragma once

// Additive split of the model into a supervised half (sigma) and an
// unsupervised half (psi). Each training step updates exactly one half and
// leaves the other bit-identical.

#include "fedmatch/nn.hpp"
#include "fedmatch/ssl.hpp"

namespace fedmatch {

struct DecomposedModel {
  ParamVector sigma;
  ParamVector psi;

  /// sigma from `init`, psi all zero.
  static DecomposedModel from_init(ParamVector init);
};

struct LossConfig {
  double lambda_s = 10.0;
  double lambda_iccs = 1e-2;
  double lambda_l1 = 1e-4;
  double lambda_l2 = 10.0;
  double tau = 0.85;

  void validate() const;
};

ParamVector compose(const DecomposedModel& model);

struct LabeledBatch {
  const Matrix& features;
  const Matrix* targets;  // one-hot; null means the batch carries no labels
};

struct StepStats {
  double loss = 0.0;
};

/// One SGD step on sigma for lambda_s * CE evaluated at sigma + psi (psi frozen).
/// `extra_grad`, when given, is added to the composed-parameter gradient.
StepStats supervised_step(DecomposedModel& model, const LabeledBatch& batch, const LossConfig& cfg,
                          const OptimState& opt, const ParamVector* extra_grad = nullptr);

/// One step on psi for lambda_iccs * Phi + lambda_l2 * ||sigma - psi||^2,
/// followed by soft-thresholding at lr * lambda_l1 (sigma frozen).
StepStats unsupervised_step(DecomposedModel& model, const Matrix& unlabeled, const HelperSet& helpers,
                            const LossConfig& cfg, const OptimState& opt, const AugmentConfig& aug, Rng& rng);

/// Shrink every entry toward zero by `amount`, landing exactly on zero when it would cross.
void soft_threshold(std::span<double> values, double amount);

/// Fraction of non-zero entries.
double nnz_fraction(const ParamVector& v);

}  // namespace fedmatch
