#pragma once

// Unlabeled-data objectives: agreement-based pseudo-labels, inter-client
// consistency against frozen helper models, and their combination.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "fedmatch/nn.hpp"

namespace fedmatch {

using Rng = std::mt19937_64;

/// Frozen peer models (already composed as sigma + psi_helper).
struct HelperSet {
  std::vector<ParamVector> members;
  std::vector<int> source_ids;

  bool empty() const { return members.empty(); }
  std::size_t size() const { return members.size(); }
};

/// Strong perturbation: additive Gaussian noise, then each feature is zeroed
/// with probability mask_prob.
struct AugmentConfig {
  double noise_sigma = 0.1;
  double mask_prob = 0.1;
  std::uint64_t rng_seed = 0;
};

Matrix augment(const AugmentConfig& cfg, const Matrix& batch, Rng& rng);

struct PseudoBatch {
  Matrix labels;
  std::vector<bool> keep_mask;

  std::size_t kept() const;
};

/// Majority vote over one-hot argmaxes of the local model and every helper.
/// Rows whose local max probability is below tau are not kept.
PseudoBatch agreement_pseudo_label(const ProbDist& local, std::span<const ProbDist> helpers, double tau);

/// Mean over helpers of KL(helper || local). nullopt when there are no helpers.
std::optional<double> inter_client_consistency(const ProbDist& local, std::span<const ProbDist> helpers);

struct PhiResult {
  double value = 0.0;
  ParamVector grad;  // wrt the composed parameters
  std::size_t kept_rows = 0;
};

/// Pseudo-label cross-entropy on the perturbed batch plus inter-client
/// consistency on the clean batch. Gradient flows only through `theta`.
PhiResult phi_loss(const ParamVector& theta, const Matrix& unlabeled, const HelperSet& helpers, double tau,
                   const AugmentConfig& aug, Rng& rng);

}  // namespace fedmatch
