// Acceptance checks: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <fmt/core.h>

#include "fedmatch/comm.hpp"
#include "fedmatch/decomposition.hpp"
#include "fedmatch/federation.hpp"
#include "fedmatch/helper_selection.hpp"
#include "fedmatch/runner.hpp"
#include "fedmatch/ssl.hpp"
#include "support.hpp"

using namespace fedmatch;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

bool same_bits(const ParamVector& a, const ParamVector& b) {
  return a.size() == b.size() && std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(double)) == 0;
}

std::vector<double> as_vec(const ParamVector& p) { return {p.values().begin(), p.values().end()}; }

// 1. Each half of the decomposition is frozen while the other half trains.
Outcome freeze() {
  std::mt19937_64 g(11);
  const ModelArch arch({6, 10, 4}, Activation::kRelu);
  DecomposedModel m{fmtest::random_params(arch, g), fmtest::random_params(arch, g, 0.1)};
  LossConfig cfg;
  OptimState opt;
  opt.lr = 0.01;
  std::size_t broken = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto x = fmtest::random_matrix(8, 6, g);
    const auto y = fmtest::random_one_hot(8, 4, g);
    const auto psi = m.psi;
    const auto extra = fmtest::random_params(arch, g, 0.01);
    supervised_step(m, {x, &y}, cfg, opt, i % 2 ? &extra : nullptr);
    if (!same_bits(psi, m.psi)) ++broken;
  }
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const auto x = fmtest::random_matrix(8, 6, g);
    HelperSet helpers;
    for (int h = 0; h < i % 3; ++h) {
      helpers.members.push_back(fmtest::random_params(arch, g));
      helpers.source_ids.push_back(h);
    }
    const auto sigma = m.sigma;
    unsupervised_step(m, x, helpers, cfg, opt, {}, rng);
    if (!same_bits(sigma, m.sigma)) ++broken;
  }
  return {broken == 0, fmt::format("{} of 2000 steps touched the frozen half", broken)};
}

// 2. Analytic gradients against central differences. Weights are drawn at a
// moderate scale so no probability falls under the 1e-12 log floor.
Outcome gradients() {
  std::mt19937_64 g(22);
  double worst_ce = 0, worst_kl = 0, worst_l1 = 0, worst_l2 = 0, worst_phi = 0;
  std::size_t phi_kept = 0;
  for (int t = 0; t < 20; ++t) {
    const std::size_t in = 2 + g() % 5, hid = 2 + g() % 7, out = 2 + g() % 4;
    const ModelArch arch({in, hid, out}, t % 2 ? Activation::kTanh : Activation::kRelu);
    const auto p = fmtest::random_params(arch, g);
    const auto x = fmtest::random_matrix(6, in, g);
    const auto y = fmtest::random_one_hot(6, out, g);
    const auto ref = softmax_rows(fmtest::random_matrix(6, out, g));
    const auto anchor = as_vec(fmtest::random_params(arch, g));

    auto check = [&](const LossSpec& spec, double& worst) {
      const auto numeric = fmtest::numeric_gradient(
          [&](const std::vector<double>& v) { return loss_value(spec, ParamVector(arch, v)); }, as_vec(p));
      worst = std::max(worst, fmtest::max_rel_error(gradient(spec, p).values(), numeric, 1e-6));
    };
    check(CrossEntropyLoss{x, y}, worst_ce);
    check(KlToReferenceLoss{x, ref}, worst_kl);
    check(SquaredL2Loss{anchor}, worst_l2);

    const auto l1 = gradient(L1Loss{}, p);
    const auto l1_fd = fmtest::numeric_gradient(
        [&](const std::vector<double>& v) { return loss_value(L1Loss{}, ParamVector(arch, v)); }, as_vec(p));
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (std::abs(p[i]) > 1e-3) worst_l1 = std::max(worst_l1, fmtest::rel_error(l1[i], l1_fd[i]));
    }

    HelperSet helpers;
    for (int h = 0; h < t % 3; ++h) {
      helpers.members.push_back(fmtest::random_params(arch, g));
      helpers.source_ids.push_back(h);
    }
    const AugmentConfig aug{0.3, 0.2, 0};
    const double tau = 1.0 / static_cast<double>(out) + 0.1;
    const Rng base(500 + t);
    Rng r0 = base;
    const auto phi = phi_loss(p, x, helpers, tau, aug, r0);
    phi_kept += phi.kept_rows;
    const auto numeric = fmtest::numeric_gradient(
        [&](const std::vector<double>& v) {
          Rng r = base;
          return phi_loss(ParamVector(arch, v), x, helpers, tau, aug, r).value;
        },
        as_vec(p));
    worst_phi = std::max(worst_phi, fmtest::max_rel_error(phi.grad.values(), numeric, 1e-6));
  }
  const double worst = std::max({worst_ce, worst_kl, worst_l1, worst_l2, worst_phi});
  return {worst < 1e-3 && phi_kept > 0,
          fmt::format("max rel err CE {:.1e} KL {:.1e} L1 {:.1e} L2 {:.1e} phi {:.1e} ({} pseudo-labelled rows)",
                      worst_ce, worst_kl, worst_l1, worst_l2, worst_phi, phi_kept)};
}

// 3. Sparse delta codec round trips.
Outcome codec() {
  std::mt19937_64 g(33);
  std::uniform_real_distribution<double> thr(1e-5, 5e-5), small(-1e-4, 1e-4);
  std::normal_distribution<double> nd;
  std::size_t bad = 0;
  double worst_ratio = 0.0;
  for (int t = 0; t < 500; ++t) {
    const std::size_t n = 1 + g() % 2000;
    std::vector<double> ref(n), local(n);
    for (std::size_t i = 0; i < n; ++i) {
      ref[i] = nd(g);
      local[i] = ref[i] + (g() % 2 ? small(g) : nd(g) * 1e-3);
    }
    const double th = thr(g);
    const auto d = diff(local, ref, th);
    const auto back = fedmatch::apply(ref, d);
    for (std::size_t i = 0; i < n; ++i) worst_ratio = std::max(worst_ratio, std::abs(back[i] - local[i]) / th);
    if (fedmatch::apply(ref, diff(local, ref, 0.0)) != local) ++bad;
    const auto wire = serialize(d);
    if (serialize(deserialize(wire)) != wire) ++bad;
  }
  return {bad == 0 && worst_ratio <= 1.0,
          fmt::format("worst error/threshold {:.3f}, {} lossless or wire mismatches", worst_ratio, bad)};
}

// 4. KD-tree queries against brute force, a third of the sets on an integer lattice to force ties.
Outcome kdtree() {
  std::mt19937_64 g(44);
  std::normal_distribution<double> nd;
  std::size_t queries = 0, mismatches = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + g() % 200, dim = 1 + g() % 64;
    const bool lattice = t % 3 == 0;
    std::vector<ModelEmbedding> emb;
    std::vector<std::vector<double>> pts;
    std::vector<int> ids;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> v(dim);
      for (double& x : v) x = lattice ? static_cast<double>(g() % 3) : nd(g);
      const int id = static_cast<int>(i * 7 % 1009);
      emb.push_back({v, id, 0});
      pts.push_back(v);
      ids.push_back(id);
    }
    const auto index = build_index(emb);
    for (std::size_t q = 0; q < std::min<std::size_t>(n, 10); ++q) {
      const std::size_t who = g() % n;
      const std::size_t k = 1 + g() % 5;
      ++queries;
      const auto got = index.query_helpers(ids[who], k);
      if (!got || *got != fmtest::brute_knn(pts, ids, pts[who], k, ids[who])) ++mismatches;
    }
    std::vector<double> free_point(dim);
    for (double& x : free_point) x = lattice ? static_cast<double>(g() % 3) : nd(g);
    ++queries;
    if (index.nearest(free_point, 3) != fmtest::brute_knn(pts, ids, free_point, 3, std::nullopt)) ++mismatches;
  }
  return {mismatches == 0, fmt::format("{} of {} queries differ from brute force", mismatches, queries)};
}

// 5. Agreement pseudo-labels for every argmax pattern with C=3.
Outcome pseudo_labels() {
  auto dist = [](std::size_t cls, bool confident) {
    Matrix m(1, 3);
    for (std::size_t c = 0; c < 3; ++c) m(0, c) = c == cls ? (confident ? 0.9 : 0.6) : (confident ? 0.05 : 0.2);
    return ProbDist::from_matrix(std::move(m));
  };
  std::size_t cases = 0, wrong = 0, full = 0;
  for (std::size_t h = 0; h <= 2; ++h) {
    std::size_t patterns = 1;
    for (std::size_t i = 0; i <= h; ++i) patterns *= 3;
    for (std::size_t code = 0; code < patterns; ++code) {
      for (bool confident : {true, false}) {
        std::vector<std::size_t> am;
        for (std::size_t i = 0, rest = code; i <= h; ++i, rest /= 3) am.push_back(rest % 3);
        std::vector<ProbDist> helpers;
        for (std::size_t i = 1; i <= h; ++i) helpers.push_back(dist(am[i], true));
        const auto pb = agreement_pseudo_label(dist(am[0], confident), helpers, 0.85);
        const auto want = fmtest::vote_oracle(3, am);
        bool ok = pb.keep_mask[0] == confident;
        for (std::size_t c = 0; c < 3; ++c) ok = ok && pb.labels(0, c) == (c == want ? 1.0 : 0.0);
        wrong += ok ? 0 : 1;
        ++cases;
        full += h == 2 ? 1 : 0;
      }
    }
  }
  return {wrong == 0 && full == 54,
          fmt::format("{} mismatches over {} cases ({} with two helpers)", wrong, cases, full)};
}

// 6. Labels-at-server runs never read a client's labels.
Outcome label_hygiene() {
  ExperimentConfig cfg;
  cfg.round.scenario = Scenario::kLabelsAtServer;
  cfg.round.rounds = 50;
  cfg.round.loss.lambda_l1 = 1e-5;
  cfg.round.helper_period = 5;
  cfg.round.sl_data = SupervisedData::kLabeledOnly;
  std::string detail;
  bool pass = true;
  for (auto m : {Method::kFedMatch, Method::kFedAvgFixMatch, Method::kFedProxFixMatch, Method::kFedAvgSl}) {
    const auto reads = run_experiment(cfg, m).client_label_reads;
    pass = pass && reads == 0;
    detail += fmt::format("{} {} ", to_string(m), reads);
  }
  return {pass, "client label reads: " + detail};
}

double max_drop(const std::vector<RoundMetrics>& metrics) {
  double best = 0.0, drop = 0.0;
  for (const auto& m : metrics) {
    best = std::max(best, m.labeled_acc);
    drop = std::max(drop, best - m.labeled_acc);
  }
  return drop;
}

// 7. Labeled-set accuracy over a run: FedMatch keeps it, shared-parameter FixMatch forgets.
Outcome forgetting() {
  ExperimentConfig cfg;
  cfg.round.scenario = Scenario::kLabelsAtServer;
  cfg.round.rounds = 100;
  cfg.round.lr = 0.02;
  cfg.round.local_epochs = 10;
  cfg.round.batch_unlabeled = 10;
  cfg.round.lr_schedule.patience = 1000;
  cfg.round.loss.lambda_l1 = 1e-5;
  cfg.round.loss.lambda_l2 = 0.0;
  cfg.round.augment = {0.1, 0.5, 0};
  cfg.data.input_dim = 16;
  cfg.data.spread = 2.5;
  cfg.data.labels_per_class = 5;
  cfg.data.unlabeled_limit = 400;
  std::string fm, fx;
  bool fm_ok = true;
  int fx_forgets = 0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    cfg.round.seed = seed;
    const double a = max_drop(run_experiment(cfg, Method::kFedMatch).metrics);
    const double b = max_drop(run_experiment(cfg, Method::kFedAvgFixMatch).metrics);
    fm_ok = fm_ok && a <= 0.05;
    fx_forgets += b > 0.10 ? 1 : 0;
    fm += fmt::format(" {:.2f}", a);
    fx += fmt::format(" {:.2f}", b);
  }
  return {fm_ok && fx_forgets >= 2, fmt::format("max drop FedMatch{} FixMatch{}", fm, fx)};
}

// 8. FedMatch beats the labeled-only federated baseline in both scenarios.
Outcome ssl_benefit() {
  ExperimentConfig cfg;
  cfg.round.num_clients = 10;
  cfg.round.fraction = 1.0;
  cfg.round.lr = 0.05;
  cfg.round.loss.lambda_l2 = 0.0;
  cfg.round.loss.lambda_iccs = 10.0;
  cfg.round.sl_data = SupervisedData::kLabeledOnly;
  cfg.data.input_dim = 64;
  cfg.data.spread = 2.5;
  cfg.data.samples_per_class = 1000;
  cfg.data.labels_per_class = 5;
  bool pass = true;
  std::string detail;
  for (auto scenario : {Scenario::kLabelsAtClient, Scenario::kLabelsAtServer}) {
    cfg.round.scenario = scenario;
    cfg.round.loss.lambda_l1 = scenario == Scenario::kLabelsAtServer ? 1e-5 : 1e-4;
    double fm = 0.0, sl = 0.0;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      cfg.round.seed = seed;
      fm += run_experiment(cfg, Method::kFedMatch).metrics.back().test_acc / 3.0;
      sl += run_experiment(cfg, Method::kFedAvgSl).metrics.back().test_acc / 3.0;
    }
    pass = pass && fm >= sl + 0.03;
    detail += fmt::format("{}: FedMatch {:.1f}% vs labeled-only {:.1f}%  ", to_string(scenario), 100 * fm, 100 * sl);
  }
  return {pass, detail};
}

// Converging labels-at-client run shared by the cost and sparsity checks.
ExperimentConfig converging(std::uint64_t seed) {
  ExperimentConfig cfg;
  cfg.round.seed = seed;
  cfg.round.rounds = 100;
  cfg.round.lr = 0.15;
  cfg.round.local_epochs = 5;
  cfg.round.loss.lambda_iccs = 5e-3;
  cfg.round.loss.lambda_l2 = 0.0;
  cfg.data.input_dim = 16;
  cfg.data.spread = 1.0;
  cfg.data.samples_per_class = 1000;
  return cfg;
}

std::vector<double> moving_average(const std::vector<RoundMetrics>& m, double RoundMetrics::*field) {
  std::vector<double> out;
  for (std::size_t r = 9; r < m.size(); ++r) {
    double s = 0.0;
    for (std::size_t k = r - 9; k <= r; ++k) s += m[k].*field;
    out.push_back(s / 10.0);
  }
  return out;
}

// 9. Communication cost trend over the last 50 rounds.
Outcome cost_trend(const std::vector<ExperimentResult>& runs) {
  bool pass = true;
  std::string detail;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& m = runs[i].metrics;
    double peak = 0.0, rise = 0.0;
    for (auto field : {&RoundMetrics::s2c_pct, &RoundMetrics::c2s_pct}) {
      const auto ma = moving_average(m, field);
      // ma[j] covers rounds j+1..j+10; the final 50 rounds are 51..100
      for (std::size_t j = ma.size() - 50; j < ma.size(); ++j) {
        rise = std::max(rise, ma[j] - ma[j - 1]);
        peak = std::max(peak, ma[j]);
      }
    }
    const bool ok = rise <= 1e-9 && peak < 100.0;
    pass = pass && ok;
    const auto s2c = moving_average(m, &RoundMetrics::s2c_pct), c2s = moving_average(m, &RoundMetrics::c2s_pct);
    detail += fmt::format("seed {}: MA s2c {:.1f}->{:.1f}%, c2s {:.1f}->{:.1f}%, largest rise {:.2g}  ", i + 1,
                          s2c[41], s2c.back(), c2s[41], c2s.back(), rise);
  }
  return {pass, detail};
}

// 10. Psi density at round 100 below 0.9 and below round 1.
Outcome sparsity(const std::vector<ExperimentResult>& runs) {
  bool pass = true;
  std::string detail;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const double first = runs[i].metrics.front().nnz_psi_frac, last = runs[i].metrics.back().nnz_psi_frac;
    pass = pass && last < 0.9 && last < first;
    detail += fmt::format("seed {}: {:.3f}->{:.3f}  ", i + 1, first, last);
  }
  return {pass, "nnz(psi)/len " + detail};
}

// 11. Metric CSVs are identical across reruns and thread counts.
Outcome determinism() {
  bool pass = true;
  std::string detail;
  for (auto scenario : {Scenario::kLabelsAtClient, Scenario::kLabelsAtServer}) {
    for (auto method : {Method::kFedMatch, Method::kFedProxFixMatch}) {
      ExperimentConfig cfg;
      cfg.round.scenario = scenario;
      cfg.round.rounds = 20;
      cfg.round.fraction = 0.5;
      cfg.round.dropout_prob = 0.2;
      cfg.round.helper_period = 3;
      cfg.round.lr = 0.05;
      cfg.round.seed = 77;
      cfg.round.threads = 1;
      const auto a = metrics_csv(run_experiment(cfg, method).metrics);
      const auto b = metrics_csv(run_experiment(cfg, method).metrics);
      cfg.round.threads = 4;
      const auto c = metrics_csv(run_experiment(cfg, method).metrics);
      cfg.round.threads = 7;
      const auto d = metrics_csv(run_experiment(cfg, method).metrics);
      const bool ok = a == b && a == c && a == d;
      pass = pass && ok;
      detail += fmt::format("{}/{} {}  ", to_string(scenario), to_string(method), ok ? "identical" : "DIFFERS");
    }
  }
  return {pass, detail};
}

bool report(int id, const char* name, double limit_s, const std::function<Outcome()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  auto out = fn();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (limit_s > 0 && secs >= limit_s) {
    out.pass = false;
    out.detail += fmt::format(" over the {:.0f} s budget", limit_s);
  }
  fmt::print("{} {:>2} {}: {} [{:.1f} s]\n", out.pass ? "PASS" : "FAIL", id, name, out.detail, secs);
  std::fflush(stdout);
  return out.pass;
}

}  // namespace

int main() {
  int failed = 0;
  auto tally = [&](bool ok) { failed += ok ? 0 : 1; };
  tally(report(1, "decomposition freeze", 10, freeze));
  tally(report(2, "gradient fidelity", 0, gradients));
  tally(report(3, "delta codec", 0, codec));
  tally(report(4, "kd-tree oracle", 0, kdtree));
  tally(report(5, "pseudo-label oracle", 0, pseudo_labels));
  tally(report(6, "label hygiene", 0, label_hygiene));
  tally(report(7, "forgetting probe", 120, forgetting));
  tally(report(8, "ssl benefit", 300, ssl_benefit));

  std::vector<ExperimentResult> runs;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::uint64_t seed = 1; seed <= 3; ++seed) runs.push_back(run_experiment(converging(seed), Method::kFedMatch));
  fmt::print("     converging runs for 9 and 10 took {:.1f} s\n",
             std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  tally(report(9, "cost trend", 0, [&] { return cost_trend(runs); }));
  tally(report(10, "sparsity", 0, [&] { return sparsity(runs); }));
  tally(report(11, "determinism", 0, determinism));
  fmt::print("{} of 11 criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
