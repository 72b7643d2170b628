#pragma once

// Synthetic datasets and how they are carved up among clients.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "fedmatch/nn.hpp"

namespace fedmatch {

enum class Split : std::uint8_t { kTrain, kValid, kTest };

std::string_view to_string(Split s);
Split parse_split(std::string_view s);

struct Dataset {
  Matrix features;
  std::vector<int> labels;
  std::vector<Split> splits;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::vector<std::size_t> indices(Split s) const;
  Matrix features_of(std::span<const std::size_t> idx) const { return features.select_rows(idx); }
  std::vector<int> labels_of(std::span<const std::size_t> idx) const;
};

/// One Gaussian cluster per class around a standard-normal center, split
/// 90/5/5 into train/valid/test within every class.
Dataset make_blobs(std::size_t num_classes, std::size_t dim, std::size_t per_class, double spread, std::uint64_t seed);

void write_dataset_csv(const std::filesystem::path& path, const Dataset& ds);
Dataset read_dataset_csv(const std::filesystem::path& path);

enum class Scenario { kLabelsAtClient, kLabelsAtServer };
enum class PartitionMode { kIid, kNonIid, kStreaming };

std::string_view to_string(Scenario s);
Scenario parse_scenario(std::string_view s);
std::string_view to_string(PartitionMode m);
PartitionMode parse_partition_mode(std::string_view s);

struct ClientPartition {
  std::vector<std::size_t> labeled;
  std::vector<std::size_t> unlabeled;
  /// Ordered slices of `unlabeled`; one slice per stream step (one slice in batch modes).
  std::vector<std::vector<std::size_t>> chunks;
  /// Target class mix of the unlabeled pool (non-IID only).
  std::vector<double> class_proportions;
};

struct PartitionPlan {
  PartitionMode mode = PartitionMode::kIid;
  Scenario scenario = Scenario::kLabelsAtClient;
  std::vector<ClientPartition> clients;
  std::vector<std::size_t> server_labeled;  // labels-at-server only
  int stream_steps = 1;
  int rounds_per_step = 10;

  /// 1-based stream step active in `round`; the last step persists past the schedule.
  int stream_step(int round) const;
  std::span<const std::size_t> visible_unlabeled(std::size_t client, int round) const;
};

struct PartitionOptions {
  std::size_t num_clients = 10;
  std::size_t labels_per_class = 5;
  Scenario scenario = Scenario::kLabelsAtClient;
  std::uint64_t seed = 0;
  /// Cap on the total unlabeled pool; 0 keeps every remaining train instance.
  std::size_t unlabeled_limit = 0;
  double dirichlet_alpha = 0.5;
};

/// labels_per_class labeled instances per class for every client (or once,
/// for the server), the unlabeled remainder dealt out evenly.
PartitionPlan split_iid(const Dataset& ds, const PartitionOptions& opts);

/// As split_iid, but each client's unlabeled class mix follows its own
/// symmetric Dirichlet(alpha) draw.
PartitionPlan split_noniid(const Dataset& ds, const PartitionOptions& opts);

/// Slices each client's unlabeled indices into `steps` near-equal ordered chunks.
PartitionPlan split_streaming(PartitionPlan plan, int steps, int rounds_per_step = 10);

void write_plan(const std::filesystem::path& path, const PartitionPlan& plan);
PartitionPlan read_plan(const std::filesystem::path& path);

struct LabeledData {
  Matrix features;
  std::vector<int> labels;
  Matrix targets;  // one-hot of labels
};

/// What a client is allowed to see. Handles built with `unlabeled_only` hold
/// no labels at all; every call to a label accessor is counted.
class ClientDataHandle {
 public:
  static ClientDataHandle with_labels(const Dataset& ds, const PartitionPlan& plan, std::size_t client,
                                      bool expose_unlabeled_truth = false);
  static ClientDataHandle unlabeled_only(const Dataset& ds, const PartitionPlan& plan, std::size_t client);

  int id() const { return id_; }
  bool has_labels() const { return labeled_.has_value(); }

  /// The client's labeled set, or null. Counted.
  const LabeledData* labeled() const;
  /// Ground truth for the visible unlabeled pool (fully supervised baselines only), or null. Counted.
  std::optional<LabeledData> unlabeled_truth(int round) const;

  /// Features of the unlabeled pool visible in `round`.
  const Matrix& unlabeled(int round) const;
  std::size_t unlabeled_size(int round) const { return unlabeled(round).rows(); }
  std::size_t labeled_size() const { return labeled_ ? labeled_->labels.size() : 0; }

  std::uint64_t label_reads() const { return label_reads_->load(); }

 private:
  ClientDataHandle() = default;

  int id_ = 0;
  std::optional<LabeledData> labeled_;
  std::vector<Matrix> chunks_;
  std::vector<std::vector<int>> chunk_truth_;
  int stream_steps_ = 1;
  int rounds_per_step_ = 10;
  std::shared_ptr<std::atomic<std::uint64_t>> label_reads_ = std::make_shared<std::atomic<std::uint64_t>>(0);
};

LabeledData make_labeled(const Dataset& ds, std::span<const std::size_t> idx);

}  // namespace fedmatch
