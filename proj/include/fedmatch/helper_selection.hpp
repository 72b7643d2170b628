#pragma once

// Model similarity search: every client model is embedded by its softmax
// output on a fixed Gaussian probe, and a KD-tree over those embeddings
// answers "which H peers are closest to client k".

#include <cstdint>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "fedmatch/nn.hpp"

namespace fedmatch {

inline constexpr std::size_t kDefaultProbeRows = 8;
inline constexpr int kDefaultHelperPeriod = 10;

struct ProbeInput {
  Matrix rows;
  std::uint64_t seed = 0;

  /// Standard-normal probe of shape (num_rows x input_dim).
  static ProbeInput generate(std::size_t num_rows, std::size_t input_dim, std::uint64_t seed);
};

struct ModelEmbedding {
  std::vector<double> vector;
  int client_id = 0;
  int round_tag = 0;
};

/// Row-major concatenation of forward(params, probe).
ModelEmbedding embed_model(const ParamVector& params, const ProbeInput& probe, int client_id = 0, int round_tag = 0);

/// Exact Euclidean k-NN over client embeddings. Distance ties resolve to the
/// lower client id.
class EmbeddingIndex {
 public:
  std::size_t size() const { return points_.size(); }
  std::size_t dim() const { return dim_; }
  bool contains(int client_id) const { return by_id_.count(client_id) != 0; }

  /// The k closest ids to `point`, nearest first, optionally skipping one id.
  std::vector<int> nearest(std::span<const double> point, std::size_t k, std::optional<int> exclude = {}) const;

  /// Up to h nearest peers of `requester`, excluding itself. nullopt when the
  /// requester has no embedding yet.
  std::optional<std::vector<int>> query_helpers(int requester, std::size_t h) const;

  friend EmbeddingIndex build_index(std::vector<ModelEmbedding> embeddings);

 private:
  struct Node {
    std::size_t point = 0;
    std::size_t axis = 0;
    int left = -1;
    int right = -1;
  };
  struct Candidate {
    double dist2;
    int id;
    bool operator<(const Candidate& o) const { return dist2 < o.dist2 || (dist2 == o.dist2 && id < o.id); }
  };

  int build(std::vector<std::size_t>& idx, std::size_t lo, std::size_t hi);
  void search(int node, std::span<const double> q, std::size_t k, std::optional<int> exclude,
              std::vector<Candidate>& heap) const;

  std::vector<ModelEmbedding> points_;
  std::vector<Node> nodes_;
  int root_ = -1;
  std::size_t dim_ = 0;
  std::unordered_map<int, std::size_t> by_id_;
};

/// Throws NoEmbeddings on empty input. When a client id repeats, the entry
/// with the highest round_tag (then the later one) wins.
EmbeddingIndex build_index(std::vector<ModelEmbedding> embeddings);

double squared_distance(std::span<const double> a, std::span<const double> b);

bool helper_due(int round, int period = kDefaultHelperPeriod);

}  // namespace fedmatch
