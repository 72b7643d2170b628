#include "fedmatch/decomposition.hpp"

#include <algorithm>
#include <cmath>

#include "fedmatch/error.hpp"

namespace fedmatch {

DecomposedModel DecomposedModel::from_init(ParamVector init) {
  ParamVector zero(init.arch());
  return {std::move(init), std::move(zero)};
}

void LossConfig::validate() const {
  if (lambda_s < 0 || lambda_iccs < 0 || lambda_l1 < 0 || lambda_l2 < 0) {
    throw ConfigError("loss weights must be non-negative");
  }
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in [0, 1]");
}

ParamVector compose(const DecomposedModel& model) {
  if (model.sigma.arch() != model.psi.arch() || model.sigma.size() != model.psi.size()) {
    throw InvalidInput("compose: sigma and psi disagree on architecture");
  }
  std::vector<double> theta(model.sigma.size());
  for (std::size_t i = 0; i < theta.size(); ++i) theta[i] = model.sigma[i] + model.psi[i];
  return ParamVector(model.sigma.arch(), std::move(theta));
}

StepStats supervised_step(DecomposedModel& model, const LabeledBatch& batch, const LossConfig& cfg,
                          const OptimState& opt, const ParamVector* extra_grad) {
  if (batch.targets == nullptr) throw InvalidInput("supervised_step requires a labeled batch");
  const ParamVector theta = compose(model);
  const CrossEntropyLoss ce{batch.features, *batch.targets};
  StepStats stats{cfg.lambda_s * loss_value(ce, theta)};
  if (cfg.lambda_s == 0.0 && extra_grad == nullptr) return stats;
  const ParamVector g = gradient(ce, theta);
  auto sigma = model.sigma.values();
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    double gi = cfg.lambda_s * g[i];
    if (extra_grad) gi += (*extra_grad)[i];
    sigma[i] -= opt.lr * gi;
  }
  return stats;
}

void soft_threshold(std::span<double> values, double amount) {
  if (amount <= 0.0) return;
  for (double& v : values) {
    if (v > amount) {
      v -= amount;
    } else if (v < -amount) {
      v += amount;
    } else {
      v = 0.0;
    }
  }
}

StepStats unsupervised_step(DecomposedModel& model, const Matrix& unlabeled, const HelperSet& helpers,
                            const LossConfig& cfg, const OptimState& opt, const AugmentConfig& aug, Rng& rng) {
  const std::size_t n = model.psi.size();
  std::vector<double> grad(n, 0.0);
  double loss = 0.0;

  if (cfg.lambda_iccs != 0.0) {
    const PhiResult phi = phi_loss(compose(model), unlabeled, helpers, cfg.tau, aug, rng);
    loss += cfg.lambda_iccs * phi.value;
    for (std::size_t i = 0; i < n; ++i) grad[i] += cfg.lambda_iccs * phi.grad[i];
  }
  double l2 = 0.0, l1 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = model.sigma[i] - model.psi[i];
    l2 += d * d;
    l1 += std::abs(model.psi[i]);
    grad[i] += cfg.lambda_l2 * -2.0 * d;
  }
  loss += cfg.lambda_l2 * l2 + cfg.lambda_l1 * l1;

  auto psi = model.psi.values();
  for (std::size_t i = 0; i < n; ++i) psi[i] -= opt.lr * grad[i];
  soft_threshold(psi, opt.lr * cfg.lambda_l1);
  return {loss};
}

double nnz_fraction(const ParamVector& v) {
  if (v.size() == 0) return 0.0;
  const auto nz = std::count_if(v.values().begin(), v.values().end(), [](double x) { return x != 0.0; });
  return static_cast<double>(nz) / static_cast<double>(v.size());
}

}  // namespace fedmatch
