#pragma once

// Thresholded sparse parameter deltas and the per-round transmission ledger.
//
// Wire record (little-endian): dense_len u64, count u64, then count pairs of
// (index u64, value f64).

#include <cstdint>
#include <span>
#include <vector>

#include "fedmatch/nn.hpp"

namespace fedmatch {

inline constexpr double kDefaultCommThreshold = 2e-5;

struct SparseDelta {
  std::vector<std::uint64_t> indices;  // strictly increasing
  std::vector<double> values;
  std::uint64_t dense_len = 0;
  double threshold = 0.0;

  std::size_t nnz() const { return indices.size(); }
  bool operator==(const SparseDelta&) const = default;
};

/// Entries where |local - reference| >= threshold, carrying the exact difference.
/// A zero threshold keeps every differing entry.
SparseDelta diff(std::span<const double> local, std::span<const double> reference, double threshold);
SparseDelta diff(const ParamVector& local, const ParamVector& reference, double threshold);

/// reference + delta; throws CorruptDelta on a length or index violation.
std::vector<double> apply(std::span<const double> reference, const SparseDelta& delta);
ParamVector apply(const ParamVector& reference, const SparseDelta& delta);

std::vector<std::uint8_t> serialize(const SparseDelta& delta);
/// Throws CorruptDelta on truncated or inconsistent input. The threshold is
/// not part of the wire record and comes back as 0.
SparseDelta deserialize(std::span<const std::uint8_t> bytes);

enum class Direction { kServerToClient, kClientToServer };

struct CostRecord {
  int round = 0;
  std::uint64_t s2c_entries = 0;  // includes helper_entries
  std::uint64_t c2s_entries = 0;
  std::uint64_t s2c_dense = 0;
  std::uint64_t c2s_dense = 0;
  std::uint64_t helper_entries = 0;

  double s2c_pct() const;
  double c2s_pct() const;
};

/// Transmitted entries per round and direction, against what a dense
/// FedAvg-style exchange would have sent.
class CostLedger {
 public:
  void begin_round(int round);

  /// Adds the entries of `deltas` (and of `helper_deltas`, counted into s2c
  /// only) plus `dense_entries` to the current round's baseline.
  void record(Direction dir, std::span<const SparseDelta> deltas, std::uint64_t dense_entries,
              std::span<const SparseDelta> helper_deltas = {});

  /// A dense transfer of `entries` values: sent count equals the baseline.
  void record_dense(Direction dir, std::uint64_t entries);

  const std::vector<CostRecord>& rounds() const { return rounds_; }
  const CostRecord& current() const;

 private:
  std::vector<CostRecord> rounds_;
};

}  // namespace fedmatch
