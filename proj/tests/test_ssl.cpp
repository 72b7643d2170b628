#include <doctest.h>

#include <cmath>

#include "fedmatch/error.hpp"
#include "fedmatch/ssl.hpp"
#include "support.hpp"

using namespace fedmatch;

namespace {

ProbDist rows(std::initializer_list<std::vector<double>> r) {
  const std::size_t c = r.begin()->size();
  Matrix m(r.size(), c);
  std::size_t i = 0;
  for (const auto& row : r) {
    for (std::size_t k = 0; k < c; ++k) m(i, k) = row[k];
    ++i;
  }
  return ProbDist::from_matrix(std::move(m));
}

// A row with its mass peaked on `cls`, either above or below tau = 0.85.
std::vector<double> peaked(std::size_t cls, bool confident) {
  std::vector<double> r(3, confident ? 0.05 : 0.2);
  r[cls] = confident ? 0.9 : 0.6;
  return r;
}

}  // namespace

TEST_CASE("augment: identity config, determinism and noise scale") {
  std::mt19937_64 rng(1);
  const auto x = fmtest::random_matrix(20, 5, rng);
  Rng a(3);
  CHECK(augment({0.0, 0.0, 0}, x, a) == x);

  Rng r1(9), r2(9);
  const AugmentConfig cfg{0.1, 0.2, 0};
  CHECK(augment(cfg, x, r1) == augment(cfg, x, r2));

  Matrix zeros(10000, 1);
  Rng r3(4);
  const auto noisy = augment({0.1, 0.0, 0}, zeros, r3);
  double ss = 0.0;
  for (double v : noisy.data()) ss += v * v;
  CHECK(std::sqrt(ss / 10000.0) == doctest::Approx(0.1).epsilon(0.1));

  Rng r4(5);
  const auto masked = augment({0.0, 1.0, 0}, x, r4);
  for (double v : masked.data()) CHECK(v == 0.0);
}

TEST_CASE("pseudo-label hand examples") {
  const auto local = rows({{0.9, 0.05, 0.05}});
  std::vector<ProbDist> helpers{rows({{0.2, 0.7, 0.1}}), rows({{0.6, 0.3, 0.1}})};
  auto pb = agreement_pseudo_label(local, helpers, 0.85);
  CHECK(pb.labels(0, 0) == 1.0);
  CHECK(pb.keep_mask[0]);

  const auto unsure = rows({{0.4, 0.3, 0.3}});
  pb = agreement_pseudo_label(unsure, helpers, 0.85);
  CHECK_FALSE(pb.keep_mask[0]);

  std::vector<ProbDist> split{rows({{0.1, 0.8, 0.1}}), rows({{0.1, 0.1, 0.8}})};
  pb = agreement_pseudo_label(local, split, 0.85);
  CHECK(pb.labels(0, 0) == 1.0);
}

TEST_CASE("pseudo-label matches the vote oracle over every argmax pattern") {
  int cases = 0;
  for (std::size_t h = 0; h <= 2; ++h) {
    std::size_t patterns = 1;
    for (std::size_t i = 0; i <= h; ++i) patterns *= 3;
    for (std::size_t code = 0; code < patterns; ++code) {
      for (bool confident : {true, false}) {
        std::vector<std::size_t> am;
        std::size_t rest = code;
        for (std::size_t i = 0; i <= h; ++i) {
          am.push_back(rest % 3);
          rest /= 3;
        }
        const auto local = rows({peaked(am[0], confident)});
        std::vector<ProbDist> helpers;
        for (std::size_t i = 1; i <= h; ++i) helpers.push_back(rows({peaked(am[i], true)}));
        const auto pb = agreement_pseudo_label(local, helpers, 0.85);
        const auto want = fmtest::vote_oracle(3, am);
        double sum = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
          CHECK(pb.labels(0, c) == (c == want ? 1.0 : 0.0));
          sum += pb.labels(0, c);
        }
        CHECK(sum == 1.0);
        CHECK(pb.keep_mask[0] == confident);
        ++cases;
      }
    }
  }
  CHECK(cases == 2 * (3 + 9 + 27));
}

TEST_CASE("pseudo-label rejects helpers of another shape") {
  const auto local = rows({{0.9, 0.05, 0.05}});
  std::vector<ProbDist> helpers{rows({{0.5, 0.5}})};
  CHECK_THROWS_AS(agreement_pseudo_label(local, helpers, 0.85), InvalidInput);
}

TEST_CASE("inter-client consistency") {
  const auto local = rows({{0.5, 0.5}});
  CHECK_FALSE(inter_client_consistency(local, {}).has_value());
  std::vector<ProbDist> same{local};
  CHECK(*inter_client_consistency(local, same) == doctest::Approx(0.0).epsilon(1e-12));
  std::vector<ProbDist> one{rows({{1.0, 0.0}})};
  CHECK(*inter_client_consistency(local, one) == doctest::Approx(std::log(2.0)));
  std::vector<ProbDist> two{rows({{1.0, 0.0}}), rows({{0.25, 0.75}})};
  const double a = std::log(2.0);
  const double b = 0.25 * std::log(0.25 / 0.5) + 0.75 * std::log(0.75 / 0.5);
  CHECK(*inter_client_consistency(local, two) == doctest::Approx((a + b) / 2.0));
}

TEST_CASE("KL is non-negative on random distributions") {
  std::mt19937_64 rng(21);
  for (int t = 0; t < 200; ++t) {
    const auto p = softmax_rows(fmtest::random_matrix(4, 5, rng, 3.0));
    const auto q = softmax_rows(fmtest::random_matrix(4, 5, rng, 3.0));
    CHECK(kl_divergence(p, q) >= 0.0);
  }
}

TEST_CASE("phi is zero with no helpers and no confident rows") {
  ModelArch arch({3, 2}, Activation::kRelu);
  std::mt19937_64 g(2);
  const auto x = fmtest::random_matrix(5, 3, g);
  Rng rng(1);
  const auto r = phi_loss(ParamVector(arch), x, HelperSet{}, 0.85, {}, rng);
  CHECK(r.value == 0.0);
  CHECK(r.kept_rows == 0);
  for (double v : r.grad.values()) CHECK(v == 0.0);
}

TEST_CASE("phi with one identical helper and identity augmentation is self-labelled CE") {
  ModelArch arch({2, 2}, Activation::kRelu);
  ParamVector theta(arch, {5.0, 0.0, 0.0, 5.0, 0.0, 0.0});
  Matrix x(3, 2);
  x(0, 0) = 1.0;
  x(1, 1) = 1.0;
  x(2, 0) = -1.0;
  const HelperSet helpers{{theta}, {7}};
  Rng rng(1);
  const auto r = phi_loss(theta, x, helpers, 0.85, {0.0, 0.0, 0}, rng);
  CHECK(r.kept_rows == 3);
  const auto probs = fmtest::naive_forward(theta, x);
  double ce = 0.0;
  for (const auto& row : probs) ce -= std::log(*std::max_element(row.begin(), row.end()));
  CHECK(r.value == doctest::Approx(ce / 3.0).epsilon(1e-12));
}

// Weights stay moderate so no probability reaches the 1e-12 log floor, where
// the loss flattens but the analytic gradient does not.
TEST_CASE("phi gradient agrees with central differences") {
  std::mt19937_64 g(31);
  std::size_t kept = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto act = trial % 2 ? Activation::kTanh : Activation::kRelu;
    ModelArch arch({4, 5, trial % 3 == 0 ? 2u : 3u}, act);
    const auto theta = fmtest::random_params(arch, g, 0.8);
    const auto x = fmtest::random_matrix(12, 4, g);
    HelperSet helpers;
    for (int h = 0; h < trial % 3; ++h) {
      helpers.members.push_back(fmtest::random_params(arch, g, 0.8));
      helpers.source_ids.push_back(h);
    }
    const AugmentConfig aug{0.3, 0.2, 0};
    const double tau = 0.5;
    Rng base(100 + trial);
    Rng r0 = base;
    const auto res = phi_loss(theta, x, helpers, tau, aug, r0);
    const auto numeric = fmtest::numeric_gradient(
        [&](const std::vector<double>& v) {
          Rng r = base;
          return phi_loss(ParamVector(arch, v), x, helpers, tau, aug, r).value;
        },
        std::vector<double>(theta.values().begin(), theta.values().end()));
    kept += res.kept_rows;
    CHECK(fmtest::max_rel_error(res.grad.values(), numeric, 1e-6) < 1e-3);
  }
  CHECK(kept > 0);
}
