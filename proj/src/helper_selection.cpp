#include "fedmatch/helper_selection.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "fedmatch/error.hpp"

namespace fedmatch {

ProbeInput ProbeInput::generate(std::size_t num_rows, std::size_t input_dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(num_rows, input_dim);
  for (double& v : m.data()) v = dist(rng);
  return {std::move(m), seed};
}

ModelEmbedding embed_model(const ParamVector& params, const ProbeInput& probe, int client_id, int round_tag) {
  const ProbDist p = forward(params, probe.rows);
  const auto flat = p.matrix().data();
  return {std::vector<double>(flat.begin(), flat.end()), client_id, round_tag};
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

EmbeddingIndex build_index(std::vector<ModelEmbedding> embeddings) {
  if (embeddings.empty()) throw NoEmbeddings();
  EmbeddingIndex index;
  index.dim_ = embeddings.front().vector.size();
  for (auto& e : embeddings) {
    if (e.vector.size() != index.dim_) throw InvalidInput("embeddings differ in length");
    auto it = index.by_id_.find(e.client_id);
    if (it == index.by_id_.end()) {
      index.by_id_.emplace(e.client_id, index.points_.size());
      index.points_.push_back(std::move(e));
    } else if (e.round_tag >= index.points_[it->second].round_tag) {
      index.points_[it->second] = std::move(e);
    }
  }
  std::vector<std::size_t> idx(index.points_.size());
  std::iota(idx.begin(), idx.end(), 0);
  index.nodes_.reserve(idx.size());
  index.root_ = index.build(idx, 0, idx.size());
  return index;
}

int EmbeddingIndex::build(std::vector<std::size_t>& idx, std::size_t lo, std::size_t hi) {
  if (lo >= hi) return -1;
  // split on the axis of widest spread
  std::size_t axis = 0;
  double best_spread = -1.0;
  for (std::size_t d = 0; d < dim_; ++d) {
    double mn = points_[idx[lo]].vector[d], mx = mn;
    for (std::size_t i = lo + 1; i < hi; ++i) {
      const double v = points_[idx[i]].vector[d];
      mn = std::min(mn, v);
      mx = std::max(mx, v);
    }
    if (mx - mn > best_spread) {
      best_spread = mx - mn;
      axis = d;
    }
  }
  const std::size_t mid = lo + (hi - lo) / 2;
  std::nth_element(idx.begin() + static_cast<std::ptrdiff_t>(lo), idx.begin() + static_cast<std::ptrdiff_t>(mid),
                   idx.begin() + static_cast<std::ptrdiff_t>(hi), [&](std::size_t a, std::size_t b) {
                     return points_[a].vector[axis] < points_[b].vector[axis];
                   });
  const int node = static_cast<int>(nodes_.size());
  nodes_.push_back({idx[mid], axis, -1, -1});
  const int left = build(idx, lo, mid);
  const int right = build(idx, mid + 1, hi);
  nodes_[static_cast<std::size_t>(node)].left = left;
  nodes_[static_cast<std::size_t>(node)].right = right;
  return node;
}

void EmbeddingIndex::search(int node, std::span<const double> q, std::size_t k, std::optional<int> exclude,
                            std::vector<Candidate>& heap) const {
  if (node < 0) return;
  const Node& n = nodes_[static_cast<std::size_t>(node)];
  const ModelEmbedding& p = points_[n.point];
  if (!exclude || p.client_id != *exclude) {
    Candidate c{squared_distance(q, p.vector), p.client_id};
    if (heap.size() < k) {
      heap.push_back(c);
      std::push_heap(heap.begin(), heap.end());
    } else if (c < heap.front()) {
      std::pop_heap(heap.begin(), heap.end());
      heap.back() = c;
      std::push_heap(heap.begin(), heap.end());
    }
  }
  const double diff = q[n.axis] - p.vector[n.axis];
  const int near = diff < 0.0 ? n.left : n.right;
  const int far = diff < 0.0 ? n.right : n.left;
  search(near, q, k, exclude, heap);
  // a far-side point is at least diff^2 away; equal distances are still visited for the id tie-break
  if (heap.size() < k || diff * diff <= heap.front().dist2) search(far, q, k, exclude, heap);
}

std::vector<int> EmbeddingIndex::nearest(std::span<const double> point, std::size_t k,
                                         std::optional<int> exclude) const {
  if (point.size() != dim_) throw InvalidInput("query dimension does not match index");
  std::vector<Candidate> heap;
  if (k == 0) return {};
  heap.reserve(k + 1);
  search(root_, point, k, exclude, heap);
  std::sort_heap(heap.begin(), heap.end());
  std::vector<int> ids;
  ids.reserve(heap.size());
  for (const auto& c : heap) ids.push_back(c.id);
  return ids;
}

std::optional<std::vector<int>> EmbeddingIndex::query_helpers(int requester, std::size_t h) const {
  auto it = by_id_.find(requester);
  if (it == by_id_.end()) return std::nullopt;
  return nearest(points_[it->second].vector, h, requester);
}

bool helper_due(int round, int period) {
  if (round < 1) throw InvalidInput("rounds are numbered from 1");
  if (period < 1) throw InvalidInput("helper period must be positive");
  return round % period == 0;
}

}  // namespace fedmatch
