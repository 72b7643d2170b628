#include "fedmatch/federation.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <numeric>
#include <string>
#include <thread>

#include <spdlog/spdlog.h>

#include "fedmatch/error.hpp"

namespace fedmatch {

Method parse_method(std::string_view name) {
  if (name == "fedmatch") return Method::kFedMatch;
  if (name == "fedavg_sl") return Method::kFedAvgSl;
  if (name == "fedprox_sl") return Method::kFedProxSl;
  if (name == "fedavg_fixmatch") return Method::kFedAvgFixMatch;
  if (name == "fedprox_fixmatch") return Method::kFedProxFixMatch;
  throw ConfigError("unknown method '" + std::string(name) + "'");
}

std::string_view to_string(Method m) {
  switch (m) {
    case Method::kFedMatch: return "fedmatch";
    case Method::kFedAvgSl: return "fedavg_sl";
    case Method::kFedProxSl: return "fedprox_sl";
    case Method::kFedAvgFixMatch: return "fedavg_fixmatch";
    case Method::kFedProxFixMatch: return "fedprox_fixmatch";
  }
  return "fedmatch";
}

bool uses_prox(Method m) { return m == Method::kFedProxSl || m == Method::kFedProxFixMatch; }

namespace {

bool is_supervised_baseline(Method m) { return m == Method::kFedAvgSl || m == Method::kFedProxSl; }
bool is_fixmatch(Method m) { return m == Method::kFedAvgFixMatch || m == Method::kFedProxFixMatch; }

}  // namespace

SupervisedData parse_supervised_data(std::string_view s) {
  if (s == "full") return SupervisedData::kFull;
  if (s == "labeled_only") return SupervisedData::kLabeledOnly;
  throw ConfigError("unknown supervised data mode '" + std::string(s) + "'");
}

std::string_view to_string(SupervisedData s) { return s == SupervisedData::kFull ? "full" : "labeled_only"; }

std::size_t RoundConfig::active_clients() const {
  return static_cast<std::size_t>(std::llround(fraction * static_cast<double>(num_clients)));
}

void RoundConfig::validate() const {
  if (num_clients == 0) throw ConfigError("num_clients must be at least 1");
  if (!(fraction > 0.0)) throw ConfigError("fraction must exceed 0");
  if (fraction > 1.0) throw ConfigError("fraction must not exceed 1");
  if (active_clients() < 1) throw ConfigError("fraction * num_clients rounds to zero active clients");
  if (rounds < 1) throw ConfigError("rounds must be at least 1");
  if (local_epochs < 0 || server_epochs < 0) throw ConfigError("epoch counts must be non-negative");
  if (helper_period < 1) throw ConfigError("helper_period must be at least 1");
  loss.validate();
  if (lambda_u < 0 || mu < 0) throw ConfigError("lambda_u and mu must be non-negative");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (lr_schedule.patience < 1 || !(lr_schedule.factor >= 1.0)) throw ConfigError("invalid learning-rate schedule");
  if (batch_labeled == 0 || batch_unlabeled == 0 || batch_server == 0) throw ConfigError("batch sizes must be positive");
  if (!(comm_threshold >= 0.0)) throw ConfigError("comm_threshold must be non-negative");
  if (augment.noise_sigma < 0.0 || !(augment.mask_prob >= 0.0 && augment.mask_prob <= 1.0)) {
    throw ConfigError("augmentation needs noise_sigma >= 0 and mask_prob in [0, 1]");
  }
  if (probe_rows == 0) throw ConfigError("probe_rows must be positive");
  if (!(dropout_prob >= 0.0 && dropout_prob < 1.0)) throw ConfigError("dropout_prob must lie in [0, 1)");
  if (threads == 0) throw ConfigError("threads must be at least 1");
}

void DataConfig::validate() const {
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (input_dim == 0) throw ConfigError("input_dim must be positive");
  if (samples_per_class == 0) throw ConfigError("samples_per_class must be positive");
  if (!(spread >= 0.0)) throw ConfigError("spread must be non-negative");
  if (!(dirichlet_alpha > 0.0)) throw ConfigError("dirichlet_alpha must be positive");
  if (stream_steps < 1 || rounds_per_stream_step < 1) throw ConfigError("stream settings must be positive");
}

ModelArch ModelConfig::arch(const DataConfig& data) const {
  std::vector<std::size_t> dims{data.input_dim};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(data.num_classes);
  return ModelArch(std::move(dims), activation);
}

void ExperimentConfig::validate(Method method) const {
  round.validate();
  data.validate();
  for (auto h : model.hidden) {
    if (h == 0) throw ConfigError("hidden layer widths must be positive");
  }
  if (round.scenario == Scenario::kLabelsAtServer && is_supervised_baseline(method) &&
      round.sl_data == SupervisedData::kFull) {
    throw ConfigError(std::string(to_string(method)) +
                      " with sl_data=full needs client labels; use sl_data=labeled_only under labels_at_server");
  }
}

std::vector<int> select_clients(std::size_t num_clients, double fraction, Rng& rng) {
  const auto a = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(num_clients)));
  if (a < 1 || a > num_clients) throw ConfigError("fraction must select between 1 and K clients");
  std::vector<int> ids(num_clients);
  std::iota(ids.begin(), ids.end(), 0);
  // partial Fisher-Yates
  for (std::size_t i = 0; i < a; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, num_clients - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(a);
  std::sort(ids.begin(), ids.end());
  return ids;
}

ParamVector aggregate_mean(std::span<const ParamVector> vectors) {
  if (vectors.empty()) throw InvalidInput("aggregate_mean: no vectors");
  const std::size_t n = vectors.front().size();
  std::vector<double> acc(n, 0.0);
  for (const auto& v : vectors) {
    if (v.size() != n || v.arch() != vectors.front().arch()) throw InvalidInput("aggregate_mean: length mismatch");
    for (std::size_t i = 0; i < n; ++i) acc[i] += v[i];
  }
  const double count = static_cast<double>(vectors.size());
  for (double& x : acc) x /= count;
  return ParamVector(vectors.front().arch(), std::move(acc));
}

ParamVector aggregate_weighted(std::span<const ParamVector> vectors, std::span<const std::size_t> sizes) {
  if (vectors.empty()) throw InvalidInput("aggregate_weighted: no vectors");
  if (vectors.size() != sizes.size()) throw InvalidInput("aggregate_weighted: one size per vector required");
  const double total = static_cast<double>(std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}));
  if (total <= 0.0) throw InvalidInput("aggregate_weighted: sizes must be positive");
  const std::size_t n = vectors.front().size();
  std::vector<double> acc(n, 0.0);
  for (std::size_t k = 0; k < vectors.size(); ++k) {
    if (sizes[k] == 0) throw InvalidInput("aggregate_weighted: sizes must be positive");
    if (vectors[k].size() != n) throw InvalidInput("aggregate_weighted: length mismatch");
    const double w = static_cast<double>(sizes[k]) / total;
    for (std::size_t i = 0; i < n; ++i) acc[i] += w * vectors[k][i];
  }
  return ParamVector(vectors.front().arch(), std::move(acc));
}

ParamVector fedprox_gradient_term(const ParamVector& theta, const ParamVector& theta_global, double mu) {
  if (theta.size() != theta_global.size()) throw InvalidInput("fedprox: length mismatch");
  std::vector<double> g(theta.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = mu * (theta[i] - theta_global[i]);
  return ParamVector(theta.arch(), std::move(g));
}

Rng client_rng(std::uint64_t seed, int client_id, int round) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0xC11E47u,
                    static_cast<std::uint32_t>(client_id), static_cast<std::uint32_t>(round)};
  return Rng(seq);
}

namespace {

Rng derived_rng(std::uint64_t seed, std::uint32_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), salt};
  return Rng(seq);
}

constexpr std::uint32_t kSaltServer = 0x5E57Eu;
constexpr std::uint32_t kSaltInit = 0x1417u;
constexpr std::uint32_t kSaltProbe = 0x9B0Eu;
constexpr std::uint32_t kSaltDropout = 0xD509u;

template <class F>
void parallel_for(std::size_t n, unsigned threads, F&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  const auto workers = std::min<std::size_t>(threads, n);
  pool.reserve(workers);
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t pos = 0; pos < n; pos += batch) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(pos),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, pos + batch)));
  }
  return out;
}

struct LossTally {
  double s_sum = 0.0;
  std::size_t s_count = 0;
  double u_sum = 0.0;
  std::size_t u_count = 0;

  void sup(double v) {
    s_sum += v;
    ++s_count;
  }
  void unsup(double v) {
    u_sum += v;
    ++u_count;
  }
};

// One shared-parameter FixMatch step: sigma carries theta, psi stays zero.
double shared_unsupervised_step(DecomposedModel& model, const Matrix& unlabeled, const RoundConfig& cfg,
                                const OptimState& opt, const ParamVector* prox_anchor, Rng& rng) {
  const ParamVector theta = compose(model);
  const PhiResult phi = phi_loss(theta, unlabeled, HelperSet{}, cfg.loss.tau, cfg.augment, rng);
  std::optional<ParamVector> prox;
  if (prox_anchor) prox = fedprox_gradient_term(theta, *prox_anchor, cfg.mu);
  auto sigma = model.sigma.values();
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    double g = cfg.lambda_u * phi.grad[i];
    if (prox) g += (*prox)[i];
    sigma[i] -= opt.lr * g;
  }
  return cfg.lambda_u * phi.value;
}

double supervised_on(DecomposedModel& model, const LabeledData& data, std::span<const std::size_t> idx,
                     const RoundConfig& cfg, const OptimState& opt, const ParamVector* prox_anchor) {
  const Matrix x = data.features.select_rows(idx);
  const Matrix t = data.targets.select_rows(idx);
  std::optional<ParamVector> prox;
  if (prox_anchor) prox = fedprox_gradient_term(compose(model), *prox_anchor, cfg.mu);
  return supervised_step(model, LabeledBatch{x, &t}, cfg.loss, opt, prox ? &*prox : nullptr).loss;
}

// Interleave one labeled and one unlabeled minibatch per step, cycling the
// shorter loader, for `epochs` passes.
template <class SupFn, class UnsupFn>
void interleave(std::size_t n_labeled, std::size_t n_unlabeled, const RoundConfig& cfg, Rng& rng, SupFn&& sup,
                UnsupFn&& unsup) {
  for (int e = 0; e < cfg.local_epochs; ++e) {
    const auto sb = make_batches(n_labeled, cfg.batch_labeled, rng);
    const auto ub = make_batches(n_unlabeled, cfg.batch_unlabeled, rng);
    const std::size_t steps = std::max(sb.size(), ub.size());
    for (std::size_t i = 0; i < steps; ++i) {
      if (!sb.empty()) sup(sb[i % sb.size()]);
      if (!ub.empty()) unsup(ub[i % ub.size()]);
    }
  }
}

struct ClientJob {
  std::size_t slot = 0;  // index into clients
  bool dropped = false;
  bool ok = false;
  DecomposedModel received;
  HelperSet helpers;
  LossTally tally;
  SparseDelta sigma_up;
  SparseDelta psi_up;
  std::size_t weight = 0;
};

HelperSet compose_helpers(const ClientState& c) {
  HelperSet hs;
  for (std::size_t j = 0; j < c.helper_psi.size(); ++j) {
    hs.members.push_back(compose(DecomposedModel{c.model.sigma, c.helper_psi[j]}));
    hs.source_ids.push_back(c.helper_ids[j]);
  }
  return hs;
}

// Serial broadcast: server-to-client deltas, helper payloads, cost records.
std::vector<ClientJob> broadcast(ServerState& server, std::vector<ClientState>& clients, const RoundContext& ctx,
                                 int round, std::span<const int> selected) {
  const RoundConfig& cfg = ctx.cfg;
  const bool fedmatch = ctx.method == Method::kFedMatch;
  const std::uint64_t p = server.global.sigma.size();
  const bool helpers_now = fedmatch && cfg.helpers > 0 && server.index && helper_due(round, cfg.helper_period);

  std::vector<ClientJob> jobs;
  for (int id : selected) {
    ClientJob job;
    job.slot = static_cast<std::size_t>(id);
    ClientState& c = clients[job.slot];
    if (cfg.dropout_prob > 0.0) {
      Rng drop = client_rng(cfg.seed ^ kSaltDropout, id, round);
      if (std::uniform_real_distribution<double>(0.0, 1.0)(drop) < cfg.dropout_prob) {
        job.dropped = true;
        jobs.push_back(std::move(job));
        continue;
      }
    }
    c.opt.lr = server.opt.lr;
    if (fedmatch) {
      DecomposedModel& mirror = server.mirrors[job.slot];
      const std::array<SparseDelta, 2> down{diff(server.global.sigma, mirror.sigma, cfg.comm_threshold),
                                            diff(server.global.psi, mirror.psi, cfg.comm_threshold)};
      mirror.sigma = apply(mirror.sigma, down[0]);
      mirror.psi = apply(mirror.psi, down[1]);
      c.model.sigma = apply(c.model.sigma, down[0]);
      c.model.psi = apply(c.model.psi, down[1]);

      std::vector<SparseDelta> helper_payload;
      if (helpers_now) {
        if (auto ids = server.index->query_helpers(id, cfg.helpers)) {
          c.helper_psi.clear();
          c.helper_ids.clear();
          for (int h : *ids) {
            const ParamVector& src = server.uploaded_psi.at(h);
            helper_payload.push_back(diff(src, c.model.psi, cfg.comm_threshold));
            c.helper_psi.push_back(apply(c.model.psi, helper_payload.back()));
            c.helper_ids.push_back(h);
          }
        }
      }
      server.ledger.record(Direction::kServerToClient, down, 2 * p, helper_payload);
      job.helpers = compose_helpers(c);
    } else {
      c.model = server.global;
      server.ledger.record_dense(Direction::kServerToClient, p);
    }
    job.received = c.model;
    jobs.push_back(std::move(job));
  }
  return jobs;
}

void train_clients(std::vector<ClientJob>& jobs, std::vector<ClientState>& clients, const ServerState& server,
                   const RoundContext& ctx, int round) {
  const RoundConfig& cfg = ctx.cfg;
  const bool at_server = cfg.scenario == Scenario::kLabelsAtServer;
  const ParamVector global_theta = compose(server.global);

  parallel_for(jobs.size(), cfg.threads, [&](std::size_t j) {
    ClientJob& job = jobs[j];
    if (job.dropped) return;
    ClientState& c = clients[job.slot];
    try {
      Rng rng = client_rng(cfg.seed, c.id, round);
      const OptimState& opt = c.opt;
      const Matrix& unlabeled = c.data.unlabeled(round);
      const ParamVector* prox = uses_prox(ctx.method) ? &global_theta : nullptr;

      if (ctx.method == Method::kFedMatch) {
        if (at_server) {
          job.weight = unlabeled.rows();
          interleave(0, unlabeled.rows(), cfg, rng, [](auto&&) {}, [&](const std::vector<std::size_t>& b) {
            job.tally.unsup(
                unsupervised_step(c.model, unlabeled.select_rows(b), job.helpers, cfg.loss, opt, cfg.augment, rng)
                    .loss);
          });
        } else {
          const LabeledData* lab = c.data.labeled();
          if (lab == nullptr) throw InvalidInput("labels-at-client training needs a labeled handle");
          job.weight = lab->labels.size() + unlabeled.rows();
          interleave(
              lab->labels.size(), unlabeled.rows(), cfg, rng,
              [&](const std::vector<std::size_t>& b) { job.tally.sup(supervised_on(c.model, *lab, b, cfg, opt, nullptr)); },
              [&](const std::vector<std::size_t>& b) {
                job.tally.unsup(
                    unsupervised_step(c.model, unlabeled.select_rows(b), job.helpers, cfg.loss, opt, cfg.augment, rng)
                        .loss);
              });
        }
      } else if (is_fixmatch(ctx.method)) {
        auto unsup = [&](const std::vector<std::size_t>& b) {
          job.tally.unsup(shared_unsupervised_step(c.model, unlabeled.select_rows(b), cfg, opt, prox, rng));
        };
        if (at_server) {
          job.weight = unlabeled.rows();
          interleave(0, unlabeled.rows(), cfg, rng, [](auto&&) {}, unsup);
        } else {
          const LabeledData* lab = c.data.labeled();
          if (lab == nullptr) throw InvalidInput("labels-at-client training needs a labeled handle");
          job.weight = lab->labels.size() + unlabeled.rows();
          interleave(
              lab->labels.size(), unlabeled.rows(), cfg, rng,
              [&](const std::vector<std::size_t>& b) { job.tally.sup(supervised_on(c.model, *lab, b, cfg, opt, prox)); },
              unsup);
        }
      } else {
        const LabeledData* lab = c.data.labeled();
        if (lab == nullptr) throw InvalidInput("supervised baseline needs a labeled handle");
        auto sup_lab = [&](const std::vector<std::size_t>& b) {
          job.tally.sup(supervised_on(c.model, *lab, b, cfg, opt, prox));
        };
        if (cfg.sl_data == SupervisedData::kFull) {
          const auto truth = c.data.unlabeled_truth(round);
          if (!truth) throw InvalidInput("full supervised baseline needs ground truth for the unlabeled pool");
          job.weight = lab->labels.size() + truth->labels.size();
          interleave(lab->labels.size(), truth->labels.size(), cfg, rng, sup_lab,
                     [&](const std::vector<std::size_t>& b) {
                       job.tally.sup(supervised_on(c.model, *truth, b, cfg, opt, prox));
                     });
        } else {
          job.weight = lab->labels.size();
          interleave(lab->labels.size(), 0, cfg, rng, sup_lab, [](auto&&) {});
        }
      }

      if (ctx.method == Method::kFedMatch) {
        // the client adopts exactly what the server will reconstruct
        if (!at_server) job.sigma_up = diff(c.model.sigma, job.received.sigma, cfg.comm_threshold);
        job.psi_up = diff(c.model.psi, job.received.psi, cfg.comm_threshold);
        if (!at_server) c.model.sigma = apply(job.received.sigma, job.sigma_up);
        c.model.psi = apply(job.received.psi, job.psi_up);
      }
      job.weight = std::max<std::size_t>(job.weight, 1);
      job.ok = true;
    } catch (const std::exception& e) {
      spdlog::warn("round {}: client {} failed and is skipped: {}", round, c.id, e.what());
      c.model = job.received;
      job.ok = false;
    }
  });
}

// Barrier: fold uploads in ascending client order, aggregate, re-index.
RoundStats gather(ServerState& server, std::vector<ClientState>& clients, std::vector<ClientJob>& jobs,
                  const RoundContext& ctx, int round) {
  const RoundConfig& cfg = ctx.cfg;
  const bool at_server = cfg.scenario == Scenario::kLabelsAtServer;
  const std::uint64_t p = server.global.sigma.size();
  RoundStats stats;
  std::vector<ParamVector> sigmas, psis, thetas;
  std::vector<std::size_t> weights;

  for (auto& job : jobs) {
    ClientState& c = clients[job.slot];
    if (job.dropped || !job.ok) {
      stats.skipped.push_back(c.id);
      continue;
    }
    stats.trained.push_back(c.id);
    stats.loss_s_sum += job.tally.s_sum;
    stats.loss_s_count += job.tally.s_count;
    stats.loss_u_sum += job.tally.u_sum;
    stats.loss_u_count += job.tally.u_count;
    c.last_update_round = round;

    if (ctx.method == Method::kFedMatch) {
      DecomposedModel& mirror = server.mirrors[job.slot];
      if (at_server) {
        const std::array<SparseDelta, 1> up{job.psi_up};
        mirror.psi = apply(mirror.psi, job.psi_up);
        server.ledger.record(Direction::kClientToServer, up, p);
      } else {
        const std::array<SparseDelta, 2> up{job.sigma_up, job.psi_up};
        mirror.sigma = apply(mirror.sigma, job.sigma_up);
        mirror.psi = apply(mirror.psi, job.psi_up);
        server.ledger.record(Direction::kClientToServer, up, 2 * p);
      }
      server.uploaded_psi.insert_or_assign(c.id, mirror.psi);
      server.embeddings.insert_or_assign(c.id, embed_model(compose(mirror), server.probe, c.id, round));
      sigmas.push_back(mirror.sigma);
      psis.push_back(mirror.psi);
    } else {
      server.ledger.record_dense(Direction::kClientToServer, p);
      thetas.push_back(c.model.sigma);
      weights.push_back(job.weight);
    }
  }

  if (ctx.method == Method::kFedMatch) {
    if (!psis.empty()) {
      if (!at_server) server.global.sigma = aggregate_mean(sigmas);
      server.global.psi = aggregate_mean(psis);
    }
    if (!server.embeddings.empty()) {
      std::vector<ModelEmbedding> all;
      for (const auto& [id, e] : server.embeddings) all.push_back(e);
      server.index = build_index(std::move(all));
    }
  } else if (!thetas.empty()) {
    server.global.sigma = aggregate_weighted(thetas, weights);
  }
  return stats;
}

RoundStats run_round(ServerState& server, std::vector<ClientState>& clients, const RoundContext& ctx, int round) {
  const RoundConfig& cfg = ctx.cfg;
  const bool at_server = cfg.scenario == Scenario::kLabelsAtServer;
  RoundStats server_phase;

  if (at_server) {
    if (!server.labeled) throw InvalidInput("labels-at-server round without a server labeled set");
    Rng rng = client_rng(cfg.seed, -1, round);
    for (int e = 0; e < cfg.server_epochs; ++e) {
      for (const auto& b : make_batches(server.labeled->labels.size(), cfg.batch_server, rng)) {
        server_phase.loss_s_sum += supervised_on(server.global, *server.labeled, b, cfg, server.opt, nullptr);
        ++server_phase.loss_s_count;
      }
    }
    // supervised baselines learn from the server's labels alone here
    if (is_supervised_baseline(ctx.method)) return server_phase;
  }

  const auto selected = select_clients(cfg.num_clients, cfg.fraction, server.rng);
  auto jobs = broadcast(server, clients, ctx, round, selected);
  train_clients(jobs, clients, server, ctx, round);
  RoundStats stats = gather(server, clients, jobs, ctx, round);
  stats.loss_s_sum += server_phase.loss_s_sum;
  stats.loss_s_count += server_phase.loss_s_count;
  return stats;
}

}  // namespace

RoundStats run_round_labels_at_client(ServerState& server, std::vector<ClientState>& clients, const RoundContext& ctx,
                                      int round) {
  if (ctx.cfg.scenario != Scenario::kLabelsAtClient) throw InvalidInput("round function does not match scenario");
  return run_round(server, clients, ctx, round);
}

RoundStats run_round_labels_at_server(ServerState& server, std::vector<ClientState>& clients, const RoundContext& ctx,
                                      int round) {
  if (ctx.cfg.scenario != Scenario::kLabelsAtServer) throw InvalidInput("round function does not match scenario");
  return run_round(server, clients, ctx, round);
}

Dataset build_dataset(const ExperimentConfig& cfg) {
  return make_blobs(cfg.data.num_classes, cfg.data.input_dim, cfg.data.samples_per_class, cfg.data.spread,
                    cfg.round.seed);
}

PartitionPlan build_plan(const ExperimentConfig& cfg, const Dataset& ds) {
  PartitionOptions opts;
  opts.num_clients = cfg.round.num_clients;
  opts.labels_per_class = cfg.data.labels_per_class;
  opts.scenario = cfg.round.scenario;
  opts.seed = cfg.round.seed;
  opts.unlabeled_limit = cfg.data.unlabeled_limit;
  opts.dirichlet_alpha = cfg.data.dirichlet_alpha;
  switch (cfg.data.partition) {
    case PartitionMode::kIid: return split_iid(ds, opts);
    case PartitionMode::kNonIid: return split_noniid(ds, opts);
    case PartitionMode::kStreaming:
      return split_streaming(split_noniid(ds, opts), cfg.data.stream_steps, cfg.data.rounds_per_stream_step);
  }
  return split_iid(ds, opts);
}

Simulation::Simulation(ExperimentConfig cfg, Method method)
    : Simulation(cfg, method, build_dataset(cfg), PartitionPlan{}) {}

Simulation::Simulation(ExperimentConfig cfg, Method method, Dataset dataset, PartitionPlan plan)
    : cfg_(std::move(cfg)), method_(method), dataset_(std::move(dataset)), plan_(std::move(plan)) {
  cfg_.validate(method_);
  if (plan_.clients.empty()) plan_ = build_plan(cfg_, dataset_);
  if (plan_.clients.size() != cfg_.round.num_clients) throw ConfigError("partition plan does not match num_clients");
  if (plan_.scenario != cfg_.round.scenario) throw ConfigError("partition plan scenario does not match config");

  const ModelArch arch = cfg_.model.arch(cfg_.data);
  if (dataset_.features.cols() != arch.input_dim() || dataset_.num_classes != arch.num_classes()) {
    throw ConfigError("dataset shape does not match the model configuration");
  }
  Rng init_rng = derived_rng(cfg_.round.seed, kSaltInit);
  server_.global = DecomposedModel::from_init(init_params(arch, init_rng()));
  server_.opt.lr = cfg_.round.lr;
  server_.probe = ProbeInput::generate(cfg_.round.probe_rows, arch.input_dim(), derived_rng(cfg_.round.seed, kSaltProbe)());
  server_.rng = derived_rng(cfg_.round.seed, kSaltServer);
  server_.mirrors.assign(cfg_.round.num_clients, server_.global);

  const bool at_server = cfg_.round.scenario == Scenario::kLabelsAtServer;
  if (at_server) server_.labeled = make_labeled(dataset_, plan_.server_labeled);

  const bool truth = is_supervised_baseline(method_) && cfg_.round.sl_data == SupervisedData::kFull;
  clients_.reserve(cfg_.round.num_clients);
  std::vector<std::size_t> labeled_union;
  for (std::size_t k = 0; k < cfg_.round.num_clients; ++k) {
    ClientDataHandle handle = at_server ? ClientDataHandle::unlabeled_only(dataset_, plan_, k)
                                        : ClientDataHandle::with_labels(dataset_, plan_, k, truth);
    clients_.push_back(ClientState{static_cast<int>(k), server_.global, OptimState{cfg_.round.lr, 0, {}},
                                   std::move(handle), std::nullopt, {}, {}});
    labeled_union.insert(labeled_union.end(), plan_.clients[k].labeled.begin(), plan_.clients[k].labeled.end());
  }
  const auto test_idx = dataset_.indices(Split::kTest);
  const auto valid_idx = dataset_.indices(Split::kValid);
  test_ = make_labeled(dataset_, test_idx);
  valid_ = make_labeled(dataset_, valid_idx);
  labeled_probe_ = make_labeled(dataset_, at_server ? plan_.server_labeled : labeled_union);
}

std::uint64_t Simulation::client_label_reads() const {
  std::uint64_t n = 0;
  for (const auto& c : clients_) n += c.data.label_reads();
  return n;
}

RoundMetrics Simulation::step() {
  ++round_;
  server_.ledger.begin_round(round_);
  const RoundContext ctx{cfg_.round, method_};
  const RoundStats stats = cfg_.round.scenario == Scenario::kLabelsAtClient
                               ? run_round_labels_at_client(server_, clients_, ctx, round_)
                               : run_round_labels_at_server(server_, clients_, ctx, round_);
  skipped_ += stats.skipped.size();
  return evaluate(stats);
}

RoundMetrics Simulation::evaluate(const RoundStats& stats) {
  const ParamVector theta = compose(server_.global);
  RoundMetrics m;
  m.round = round_;
  m.test_acc = accuracy(theta, test_.features, test_.labels);
  m.labeled_acc = accuracy(theta, labeled_probe_.features, labeled_probe_.labels);
  m.loss_s = stats.loss_s_count ? stats.loss_s_sum / static_cast<double>(stats.loss_s_count) : 0.0;
  m.loss_u = stats.loss_u_count ? stats.loss_u_sum / static_cast<double>(stats.loss_u_count) : 0.0;
  const CostRecord& cost = server_.ledger.current();
  m.s2c_pct = cost.s2c_pct();
  m.c2s_pct = cost.c2s_pct();
  m.nnz_psi_frac = nnz_fraction(server_.global.psi);
  if (valid_.labels.size() > 0) {
    const double val_loss = cross_entropy(valid_.targets, forward(theta, valid_.features));
    server_.opt = lr_step(server_.opt, val_loss, cfg_.round.lr_schedule);
  }
  return m;
}

ExperimentResult Simulation::run() {
  ExperimentResult res;
  while (round_ < cfg_.round.rounds) res.metrics.push_back(step());
  res.client_label_reads = client_label_reads();
  res.costs = server_.ledger.rounds();
  res.skipped_client_rounds = skipped_;
  return res;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, Method method) {
  Simulation sim(cfg, method);
  return sim.run();
}

}  // namespace fedmatch
