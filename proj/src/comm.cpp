#include "fedmatch/comm.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <string>

#include "fedmatch/error.hpp"

namespace fedmatch {

namespace {

// Nudge the rounded difference by a few ulps so that reference + d lands
// exactly on local whenever some f64 d can do that.
double exact_difference(double local, double reference) {
  double d = local - reference;
  for (int step = 0; step < 4 && reference + d != local; ++step) {
    d = std::nextafter(d, reference + d < local ? INFINITY : -INFINITY);
  }
  return reference + d == local ? d : local - reference;
}

}  // namespace

SparseDelta diff(std::span<const double> local, std::span<const double> reference, double threshold) {
  if (local.size() != reference.size()) throw InvalidInput("diff: length mismatch");
  if (!(threshold >= 0.0)) throw InvalidInput("diff: threshold must be non-negative");
  SparseDelta out;
  out.dense_len = local.size();
  out.threshold = threshold;
  for (std::size_t i = 0; i < local.size(); ++i) {
    const double d = local[i] - reference[i];
    const bool keep = threshold == 0.0 ? local[i] != reference[i] : std::abs(d) >= threshold;
    if (keep) {
      out.indices.push_back(i);
      out.values.push_back(exact_difference(local[i], reference[i]));
    }
  }
  return out;
}

SparseDelta diff(const ParamVector& local, const ParamVector& reference, double threshold) {
  return diff(local.values(), reference.values(), threshold);
}

std::vector<double> apply(std::span<const double> reference, const SparseDelta& delta) {
  if (delta.dense_len != reference.size()) {
    throw CorruptDelta("delta dense length " + std::to_string(delta.dense_len) + " does not match reference (" +
                       std::to_string(reference.size()) + ")");
  }
  if (delta.indices.size() != delta.values.size()) throw CorruptDelta("delta index/value count mismatch");
  std::vector<double> out(reference.begin(), reference.end());
  for (std::size_t k = 0; k < delta.indices.size(); ++k) {
    const auto i = delta.indices[k];
    if (i >= out.size()) throw CorruptDelta("delta index " + std::to_string(i) + " out of range");
    out[i] += delta.values[k];
  }
  return out;
}

ParamVector apply(const ParamVector& reference, const SparseDelta& delta) {
  return ParamVector(reference.arch(), apply(reference.values(), delta));
}

namespace {

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

std::uint64_t get_u64(std::span<const std::uint8_t> in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(in[pos + static_cast<std::size_t>(b)]) << (8 * b);
  return v;
}

}  // namespace

std::vector<std::uint8_t> serialize(const SparseDelta& delta) {
  std::vector<std::uint8_t> out;
  out.reserve(16 + 16 * delta.indices.size());
  put_u64(out, delta.dense_len);
  put_u64(out, delta.indices.size());
  for (std::size_t k = 0; k < delta.indices.size(); ++k) {
    put_u64(out, delta.indices[k]);
    put_u64(out, std::bit_cast<std::uint64_t>(delta.values[k]));
  }
  return out;
}

SparseDelta deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16) throw CorruptDelta("delta record shorter than its header");
  SparseDelta out;
  out.dense_len = get_u64(bytes, 0);
  const std::uint64_t count = get_u64(bytes, 8);
  if (count > (bytes.size() - 16) / 16 || bytes.size() != 16 + 16 * count) {
    throw CorruptDelta("delta record length does not match its entry count");
  }
  out.indices.reserve(count);
  out.values.reserve(count);
  for (std::uint64_t k = 0; k < count; ++k) {
    const std::size_t pos = 16 + 16 * static_cast<std::size_t>(k);
    const std::uint64_t idx = get_u64(bytes, pos);
    if (idx >= out.dense_len || (!out.indices.empty() && idx <= out.indices.back())) {
      throw CorruptDelta("delta indices must be increasing and below dense_len");
    }
    out.indices.push_back(idx);
    out.values.push_back(std::bit_cast<double>(get_u64(bytes, pos + 8)));
  }
  return out;
}

double CostRecord::s2c_pct() const {
  return s2c_dense == 0 ? 0.0 : 100.0 * static_cast<double>(s2c_entries) / static_cast<double>(s2c_dense);
}

double CostRecord::c2s_pct() const {
  return c2s_dense == 0 ? 0.0 : 100.0 * static_cast<double>(c2s_entries) / static_cast<double>(c2s_dense);
}

void CostLedger::begin_round(int round) { rounds_.push_back(CostRecord{round}); }

const CostRecord& CostLedger::current() const {
  if (rounds_.empty()) throw InvalidInput("cost ledger has no open round");
  return rounds_.back();
}

void CostLedger::record(Direction dir, std::span<const SparseDelta> deltas, std::uint64_t dense_entries,
                        std::span<const SparseDelta> helper_deltas) {
  if (rounds_.empty()) begin_round(0);
  CostRecord& rec = rounds_.back();
  std::uint64_t n = 0;
  for (const auto& d : deltas) n += d.nnz();
  if (dir == Direction::kServerToClient) {
    std::uint64_t h = 0;
    for (const auto& d : helper_deltas) h += d.nnz();
    rec.helper_entries += h;
    rec.s2c_entries += n + h;
    rec.s2c_dense += dense_entries;
  } else {
    rec.c2s_entries += n;
    rec.c2s_dense += dense_entries;
  }
}

void CostLedger::record_dense(Direction dir, std::uint64_t entries) {
  if (rounds_.empty()) begin_round(0);
  CostRecord& rec = rounds_.back();
  if (dir == Direction::kServerToClient) {
    rec.s2c_entries += entries;
    rec.s2c_dense += entries;
  } else {
    rec.c2s_entries += entries;
    rec.c2s_dense += entries;
  }
}

}  // namespace fedmatch
