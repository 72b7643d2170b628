#include "fedmatch/ssl.hpp"

#include <algorithm>

#include "fedmatch/error.hpp"

namespace fedmatch {

Matrix augment(const AugmentConfig& cfg, const Matrix& batch, Rng& rng) {
  Matrix out = batch;
  if (cfg.noise_sigma == 0.0 && cfg.mask_prob == 0.0) return out;
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  for (double& v : out.data()) {
    if (cfg.noise_sigma > 0.0) v += cfg.noise_sigma * noise(rng);
    if (cfg.mask_prob > 0.0 && coin(rng) < cfg.mask_prob) v = 0.0;
  }
  return out;
}

std::size_t PseudoBatch::kept() const { return static_cast<std::size_t>(std::count(keep_mask.begin(), keep_mask.end(), true)); }

PseudoBatch agreement_pseudo_label(const ProbDist& local, std::span<const ProbDist> helpers, double tau) {
  for (const auto& h : helpers) {
    if (h.rows() != local.rows() || h.classes() != local.classes()) {
      throw InvalidInput("agreement_pseudo_label: helper prediction shape mismatch");
    }
  }
  const std::size_t n = local.rows(), c = local.classes();
  PseudoBatch out{Matrix(n, c), std::vector<bool>(n, false)};
  std::vector<int> votes(c);
  for (std::size_t r = 0; r < n; ++r) {
    std::fill(votes.begin(), votes.end(), 0);
    const auto local_row = local.row(r);
    ++votes[argmax(local_row)];
    for (const auto& h : helpers) ++votes[argmax(h.row(r))];
    const auto winner = static_cast<std::size_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
    out.labels(r, winner) = 1.0;
    out.keep_mask[r] = *std::max_element(local_row.begin(), local_row.end()) >= tau;
  }
  return out;
}

std::optional<double> inter_client_consistency(const ProbDist& local, std::span<const ProbDist> helpers) {
  if (helpers.empty()) return std::nullopt;
  double total = 0.0;
  for (const auto& h : helpers) total += kl_divergence(h, local);
  return total / static_cast<double>(helpers.size());
}

PhiResult phi_loss(const ParamVector& theta, const Matrix& unlabeled, const HelperSet& helpers, double tau,
                   const AugmentConfig& aug, Rng& rng) {
  if (unlabeled.rows() == 0) return PhiResult{0.0, ParamVector(theta.arch()), 0};
  const ForwardTrace clean = forward_trace(theta, unlabeled);
  std::vector<ProbDist> helper_preds;
  helper_preds.reserve(helpers.size());
  for (const auto& h : helpers.members) helper_preds.push_back(forward(h, unlabeled));

  const PseudoBatch pseudo = agreement_pseudo_label(clean.probs, helper_preds, tau);
  const Matrix perturbed = augment(aug, unlabeled, rng);

  PhiResult res;
  res.grad = ParamVector(theta.arch());
  res.kept_rows = pseudo.kept();
  const std::size_t n = unlabeled.rows(), c = theta.arch().num_classes();

  if (res.kept_rows > 0) {
    std::vector<std::size_t> kept_idx;
    for (std::size_t r = 0; r < n; ++r) {
      if (pseudo.keep_mask[r]) kept_idx.push_back(r);
    }
    const Matrix targets = pseudo.labels.select_rows(kept_idx);
    const ForwardTrace strong = forward_trace(theta, perturbed.select_rows(kept_idx));
    res.value += cross_entropy(targets, strong.probs);
    Matrix d(kept_idx.size(), c);
    const double inv = 1.0 / static_cast<double>(kept_idx.size());
    for (std::size_t r = 0; r < kept_idx.size(); ++r) {
      for (std::size_t k = 0; k < c; ++k) d(r, k) = (strong.probs(r, k) - targets(r, k)) * inv;
    }
    res.grad = backward(theta, strong, d);
  }

  if (auto icc = inter_client_consistency(clean.probs, helper_preds)) {
    res.value += *icc;
    // d/dz of mean_j KL(p_j || softmax(z)) = q - mean_j p_j, averaged over rows
    Matrix d(n, c);
    const double inv = 1.0 / (static_cast<double>(n) * static_cast<double>(helper_preds.size()));
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t k = 0; k < c; ++k) {
        double acc = 0.0;
        for (const auto& p : helper_preds) acc += clean.probs(r, k) - p(r, k);
        d(r, k) = acc * inv;
      }
    }
    const ParamVector g = backward(theta, clean, d);
    for (std::size_t i = 0; i < g.size(); ++i) res.grad[i] += g[i];
  }
  return res;
}

}  // namespace fedmatch
