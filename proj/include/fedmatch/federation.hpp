#pragma once

// Round orchestration. Each round is bulk-synchronous: the server publishes
// an immutable snapshot, selected clients train independently on private
// copies (possibly on worker threads), and the server folds their sparse
// updates back in at the barrier in ascending client-id order.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "fedmatch/comm.hpp"
#include "fedmatch/data.hpp"
#include "fedmatch/decomposition.hpp"
#include "fedmatch/helper_selection.hpp"
#include "fedmatch/nn.hpp"
#include "fedmatch/ssl.hpp"

namespace fedmatch {

enum class Method { kFedMatch, kFedAvgSl, kFedProxSl, kFedAvgFixMatch, kFedProxFixMatch };

Method parse_method(std::string_view name);
std::string_view to_string(Method m);
bool uses_prox(Method m);

/// Which data the supervised baselines learn from: the labeled split only, or
/// every client instance with its true label (an upper bound).
enum class SupervisedData { kFull, kLabeledOnly };

SupervisedData parse_supervised_data(std::string_view s);
std::string_view to_string(SupervisedData s);

struct RoundConfig {
  Scenario scenario = Scenario::kLabelsAtClient;
  std::size_t num_clients = 10;
  double fraction = 1.0;
  int rounds = 100;
  int local_epochs = 1;
  int server_epochs = 1;
  std::size_t helpers = 2;
  int helper_period = kDefaultHelperPeriod;
  LossConfig loss;
  double lambda_u = 1.0;
  double mu = 1e-2;
  double lr = 1e-3;
  LrSchedule lr_schedule;
  std::size_t batch_labeled = 10;
  std::size_t batch_unlabeled = 100;
  std::size_t batch_server = 100;
  double comm_threshold = kDefaultCommThreshold;
  AugmentConfig augment;
  std::size_t probe_rows = kDefaultProbeRows;
  SupervisedData sl_data = SupervisedData::kFull;
  /// Probability that a selected client drops out of a round.
  double dropout_prob = 0.0;
  unsigned threads = 1;
  std::uint64_t seed = 1;

  /// A = round(F * K).
  std::size_t active_clients() const;
  void validate() const;
};

struct DataConfig {
  std::size_t num_classes = 4;
  std::size_t input_dim = 16;
  std::size_t samples_per_class = 200;
  double spread = 1.0;
  PartitionMode partition = PartitionMode::kIid;
  std::size_t labels_per_class = 5;
  std::size_t unlabeled_limit = 0;
  double dirichlet_alpha = 0.5;
  int stream_steps = 10;
  int rounds_per_stream_step = 10;

  void validate() const;
};

struct ModelConfig {
  std::vector<std::size_t> hidden = {32};
  Activation activation = Activation::kRelu;

  ModelArch arch(const DataConfig& data) const;
};

struct ExperimentConfig {
  RoundConfig round;
  DataConfig data;
  ModelConfig model;

  /// Also rejects method/scenario combinations that cannot run.
  void validate(Method method) const;
};

struct RoundMetrics {
  int round = 0;
  double test_acc = 0.0;
  double labeled_acc = 0.0;
  double loss_s = 0.0;
  double loss_u = 0.0;
  double s2c_pct = 0.0;
  double c2s_pct = 0.0;
  double nnz_psi_frac = 0.0;

  bool operator==(const RoundMetrics&) const = default;
};

std::vector<int> select_clients(std::size_t num_clients, double fraction, Rng& rng);

ParamVector aggregate_mean(std::span<const ParamVector> vectors);
/// Size-weighted mean, normalised over the selected clients' total.
ParamVector aggregate_weighted(std::span<const ParamVector> vectors, std::span<const std::size_t> sizes);
/// mu * (theta - theta_global), the proximal addend to a local gradient.
ParamVector fedprox_gradient_term(const ParamVector& theta, const ParamVector& theta_global, double mu);

/// Independent stream for (seed, client, round); scheduling cannot change it.
Rng client_rng(std::uint64_t seed, int client_id, int round);

struct ClientState {
  int id = 0;
  DecomposedModel model;
  OptimState opt;
  ClientDataHandle data;
  std::optional<int> last_update_round;
  /// Most recent helper payloads (psi halves) and their owners.
  std::vector<ParamVector> helper_psi;
  std::vector<int> helper_ids;
};

struct ServerState {
  DecomposedModel global;
  OptimState opt;
  ProbeInput probe;
  std::map<int, ModelEmbedding> embeddings;  // latest per client
  std::optional<EmbeddingIndex> index;
  std::vector<DecomposedModel> mirrors;  // server-side reconstruction of every client
  std::map<int, ParamVector> uploaded_psi;  // latest psi each client shipped
  CostLedger ledger;
  std::optional<LabeledData> labeled;  // S_G, labels-at-server only
  Rng rng;
};

struct RoundContext {
  const RoundConfig& cfg;
  Method method = Method::kFedMatch;
};

struct RoundStats {
  double loss_s_sum = 0.0;
  std::size_t loss_s_count = 0;
  double loss_u_sum = 0.0;
  std::size_t loss_u_count = 0;
  std::vector<int> trained;
  std::vector<int> skipped;
};

/// Sampled clients train sigma and psi on their own labeled and unlabeled
/// data; the server averages each half separately.
RoundStats run_round_labels_at_client(ServerState& server, std::vector<ClientState>& clients, const RoundContext& ctx,
                                      int round);

/// The server trains sigma on its labeled set, then sampled clients train psi
/// on unlabeled data only and ship psi back.
RoundStats run_round_labels_at_server(ServerState& server, std::vector<ClientState>& clients, const RoundContext& ctx,
                                      int round);

struct ExperimentResult {
  std::vector<RoundMetrics> metrics;
  std::uint64_t client_label_reads = 0;
  std::vector<CostRecord> costs;
  std::size_t skipped_client_rounds = 0;
};

/// Owns the dataset, the partition and every participant for one run.
class Simulation {
 public:
  Simulation(ExperimentConfig cfg, Method method);
  Simulation(ExperimentConfig cfg, Method method, Dataset dataset, PartitionPlan plan);

  RoundMetrics step();
  ExperimentResult run();

  int round() const { return round_; }
  const ServerState& server() const { return server_; }
  ServerState& server() { return server_; }
  const std::vector<ClientState>& clients() const { return clients_; }
  std::vector<ClientState>& clients() { return clients_; }
  const Dataset& dataset() const { return dataset_; }
  const PartitionPlan& plan() const { return plan_; }
  std::uint64_t client_label_reads() const;

 private:
  RoundMetrics evaluate(const RoundStats& stats);

  ExperimentConfig cfg_;
  Method method_;
  Dataset dataset_;
  PartitionPlan plan_;
  ServerState server_;
  std::vector<ClientState> clients_;
  LabeledData test_;
  LabeledData valid_;
  LabeledData labeled_probe_;
  int round_ = 0;
  std::size_t skipped_ = 0;
};

Dataset build_dataset(const ExperimentConfig& cfg);
PartitionPlan build_plan(const ExperimentConfig& cfg, const Dataset& ds);

ExperimentResult run_experiment(const ExperimentConfig& cfg, Method method);

}  // namespace fedmatch
