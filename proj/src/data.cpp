#include "fedmatch/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include <spdlog/spdlog.h>

#include "fedmatch/error.hpp"

namespace fedmatch {

std::string_view to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "valid") return Split::kValid;
  if (s == "test") return Split::kTest;
  throw InvalidInput("unknown split '" + std::string(s) + "'");
}

std::string_view to_string(Scenario s) {
  return s == Scenario::kLabelsAtClient ? "labels_at_client" : "labels_at_server";
}

Scenario parse_scenario(std::string_view s) {
  if (s == "labels_at_client") return Scenario::kLabelsAtClient;
  if (s == "labels_at_server") return Scenario::kLabelsAtServer;
  throw InvalidInput("unknown scenario '" + std::string(s) + "'");
}

std::string_view to_string(PartitionMode m) {
  switch (m) {
    case PartitionMode::kIid: return "iid";
    case PartitionMode::kNonIid: return "noniid";
    case PartitionMode::kStreaming: return "streaming";
  }
  return "iid";
}

PartitionMode parse_partition_mode(std::string_view s) {
  if (s == "iid") return PartitionMode::kIid;
  if (s == "noniid") return PartitionMode::kNonIid;
  if (s == "streaming") return PartitionMode::kStreaming;
  throw InvalidInput("unknown partition mode '" + std::string(s) + "'");
}

std::vector<std::size_t> Dataset::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    if (splits[i] == s) out.push_back(i);
  }
  return out;
}

std::vector<int> Dataset::labels_of(std::span<const std::size_t> idx) const {
  std::vector<int> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(labels.at(i));
  return out;
}

Dataset make_blobs(std::size_t num_classes, std::size_t dim, std::size_t per_class, double spread,
                   std::uint64_t seed) {
  if (num_classes < 2) throw InvalidInput("make_blobs needs at least two classes");
  if (dim == 0) throw InvalidInput("make_blobs needs a positive dimension");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  Matrix centers(num_classes, dim);
  for (double& v : centers.data()) v = normal(rng);

  const std::size_t n = num_classes * per_class;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  Dataset ds;
  ds.num_classes = num_classes;
  ds.features = Matrix(n, dim);
  ds.labels.resize(n);
  ds.splits.resize(n);
  const auto n_valid = static_cast<std::size_t>(std::llround(0.05 * static_cast<double>(per_class)));
  const auto n_test = n_valid;
  // sample k of class c lands at row order[c * per_class + k]
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t k = 0; k < per_class; ++k) {
      const std::size_t row = order[c * per_class + k];
      for (std::size_t d = 0; d < dim; ++d) ds.features(row, d) = centers(c, d) + spread * normal(rng);
      ds.labels[row] = static_cast<int>(c);
      ds.splits[row] = k < n_valid ? Split::kValid : (k < n_valid + n_test ? Split::kTest : Split::kTrain);
    }
  }
  return ds;
}

void write_dataset_csv(const std::filesystem::path& path, const Dataset& ds) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(17);
  for (std::size_t d = 0; d < ds.features.cols(); ++d) out << "feature_" << d << ',';
  out << "label,split\n";
  for (std::size_t r = 0; r < ds.size(); ++r) {
    for (double v : ds.features.row(r)) out << v << ',';
    out << ds.labels[r] << ',' << to_string(ds.splits[r]) << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

Dataset read_dataset_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError(path.string() + ": empty file");
  const auto cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  if (cols < 2) throw IoError(path.string() + ": header needs at least one feature, label and split");
  const std::size_t dim = cols - 1;

  std::vector<double> feats;
  Dataset ds;
  int max_label = -1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    for (std::size_t d = 0; d < dim; ++d) {
      if (!std::getline(ss, cell, ',')) throw IoError(path.string() + ": short row");
      feats.push_back(std::stod(cell));
    }
    if (!std::getline(ss, cell, ',')) throw IoError(path.string() + ": missing label");
    const int label = std::stoi(cell);
    if (label < 0) throw IoError(path.string() + ": negative label");
    max_label = std::max(max_label, label);
    ds.labels.push_back(label);
    if (!std::getline(ss, cell, ',')) throw IoError(path.string() + ": missing split");
    ds.splits.push_back(parse_split(cell));
  }
  ds.features = Matrix(ds.labels.size(), dim, std::move(feats));
  ds.num_classes = static_cast<std::size_t>(max_label + 1);
  return ds;
}

int PartitionPlan::stream_step(int round) const {
  if (stream_steps <= 1) return 1;
  const int step = (std::max(round, 1) - 1) / std::max(rounds_per_step, 1) + 1;
  return std::min(step, stream_steps);
}

std::span<const std::size_t> PartitionPlan::visible_unlabeled(std::size_t client, int round) const {
  const ClientPartition& cp = clients.at(client);
  if (cp.chunks.empty()) return cp.unlabeled;
  return cp.chunks[static_cast<std::size_t>(stream_step(round) - 1) % cp.chunks.size()];
}

namespace {

struct Pools {
  std::vector<std::vector<std::size_t>> by_class;  // shuffled train indices per class
};

Pools shuffled_train_by_class(const Dataset& ds, std::mt19937_64& rng) {
  Pools p;
  p.by_class.resize(ds.num_classes);
  for (auto i : ds.indices(Split::kTrain)) p.by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  for (auto& v : p.by_class) std::shuffle(v.begin(), v.end(), rng);
  return p;
}

// Takes the labeled instances off the front of every class pool.
PartitionPlan carve_labeled(const Dataset& ds, const PartitionOptions& opts, Pools& pools) {
  if (opts.num_clients == 0) throw ConfigError("need at least one client");
  PartitionPlan plan;
  plan.scenario = opts.scenario;
  plan.clients.resize(opts.num_clients);
  const std::size_t owners = opts.scenario == Scenario::kLabelsAtClient ? opts.num_clients : 1;
  const std::size_t need = owners * opts.labels_per_class;
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    auto& pool = pools.by_class[c];
    if (pool.size() < need) {
      throw ConfigError("class " + std::to_string(c) + " has " + std::to_string(pool.size()) +
                        " train instances, need " + std::to_string(need) + " labeled");
    }
    for (std::size_t o = 0; o < owners; ++o) {
      auto first = pool.begin() + static_cast<std::ptrdiff_t>(o * opts.labels_per_class);
      auto& dst = opts.scenario == Scenario::kLabelsAtClient ? plan.clients[o].labeled : plan.server_labeled;
      dst.insert(dst.end(), first, first + static_cast<std::ptrdiff_t>(opts.labels_per_class));
    }
    pool.erase(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(need));
  }
  return plan;
}

std::vector<std::size_t> even_sizes(std::size_t total, std::size_t parts) {
  std::vector<std::size_t> sizes(parts, total / parts);
  for (std::size_t i = 0; i < total % parts; ++i) ++sizes[i];
  return sizes;
}

// Integer split of `total` proportional to `weights` (largest remainder).
std::vector<std::size_t> apportion(std::size_t total, std::span<const double> weights) {
  const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<std::size_t> out(weights.size(), 0);
  if (total == 0 || wsum <= 0.0) return out;
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t used = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = static_cast<double>(total) * weights[i] / wsum;
    out[i] = static_cast<std::size_t>(std::floor(exact));
    used += out[i];
    rem.emplace_back(exact - std::floor(exact), i);
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; used < total; ++k, ++used) ++out[rem[k % rem.size()].second];
  return out;
}

void finish_batch(PartitionPlan& plan) {
  for (auto& cp : plan.clients) cp.chunks = {cp.unlabeled};
}

void apply_unlabeled_limit(Pools& pools, std::size_t limit) {
  if (limit == 0) return;
  std::size_t total = 0;
  for (const auto& v : pools.by_class) total += v.size();
  if (total <= limit) return;
  std::vector<double> w;
  for (const auto& v : pools.by_class) w.push_back(static_cast<double>(v.size()));
  const auto keep = apportion(limit, w);
  for (std::size_t c = 0; c < pools.by_class.size(); ++c) pools.by_class[c].resize(keep[c]);
}

}  // namespace

PartitionPlan split_iid(const Dataset& ds, const PartitionOptions& opts) {
  std::mt19937_64 rng(opts.seed);
  Pools pools = shuffled_train_by_class(ds, rng);
  PartitionPlan plan = carve_labeled(ds, opts, pools);
  plan.mode = PartitionMode::kIid;
  apply_unlabeled_limit(pools, opts.unlabeled_limit);

  std::vector<std::size_t> rest;
  for (const auto& v : pools.by_class) rest.insert(rest.end(), v.begin(), v.end());
  std::shuffle(rest.begin(), rest.end(), rng);
  const auto sizes = even_sizes(rest.size(), opts.num_clients);
  std::size_t pos = 0;
  for (std::size_t k = 0; k < opts.num_clients; ++k) {
    plan.clients[k].unlabeled.assign(rest.begin() + static_cast<std::ptrdiff_t>(pos),
                                     rest.begin() + static_cast<std::ptrdiff_t>(pos + sizes[k]));
    pos += sizes[k];
  }
  finish_batch(plan);
  return plan;
}

PartitionPlan split_noniid(const Dataset& ds, const PartitionOptions& opts) {
  if (!(opts.dirichlet_alpha > 0.0)) throw ConfigError("dirichlet alpha must be positive");
  std::mt19937_64 rng(opts.seed);
  Pools pools = shuffled_train_by_class(ds, rng);
  PartitionPlan plan = carve_labeled(ds, opts, pools);
  plan.mode = PartitionMode::kNonIid;
  apply_unlabeled_limit(pools, opts.unlabeled_limit);

  const std::size_t num_classes = ds.num_classes;
  std::size_t total = 0;
  for (const auto& v : pools.by_class) total += v.size();
  const auto client_sizes = even_sizes(total, opts.num_clients);

  std::gamma_distribution<double> gamma(opts.dirichlet_alpha, 1.0);
  std::vector<std::size_t> cursor(num_classes, 0);
  auto supply = [&](std::size_t c) { return pools.by_class[c].size() - cursor[c]; };

  for (std::size_t k = 0; k < opts.num_clients; ++k) {
    auto& cp = plan.clients[k];
    cp.class_proportions.resize(num_classes);
    double sum = 0.0;
    for (auto& p : cp.class_proportions) sum += (p = gamma(rng));
    if (sum <= 0.0) {
      std::fill(cp.class_proportions.begin(), cp.class_proportions.end(), 1.0 / static_cast<double>(num_classes));
    } else {
      for (auto& p : cp.class_proportions) p /= sum;
    }

    std::size_t remaining = client_sizes[k];
    std::vector<double> weights = cp.class_proportions;
    bool redistributed = false;
    while (remaining > 0) {
      // only classes with supply left can absorb demand
      std::vector<double> w(num_classes, 0.0);
      bool any = false;
      for (std::size_t c = 0; c < num_classes; ++c) {
        if (supply(c) > 0 && weights[c] > 0.0) {
          w[c] = weights[c];
          any = true;
        }
      }
      if (!any) {
        for (std::size_t c = 0; c < num_classes; ++c) w[c] = static_cast<double>(supply(c));
      }
      const auto demand = apportion(remaining, w);
      std::size_t taken_now = 0;
      for (std::size_t c = 0; c < num_classes; ++c) {
        const std::size_t take = std::min(demand[c], supply(c));
        if (take < demand[c]) redistributed = true;
        auto first = pools.by_class[c].begin() + static_cast<std::ptrdiff_t>(cursor[c]);
        cp.unlabeled.insert(cp.unlabeled.end(), first, first + static_cast<std::ptrdiff_t>(take));
        cursor[c] += take;
        taken_now += take;
      }
      remaining -= taken_now;
      if (taken_now == 0) break;
    }
    if (redistributed) {
      spdlog::debug("client {}: exhausted classes, demand redistributed proportionally", k);
    }
    std::shuffle(cp.unlabeled.begin(), cp.unlabeled.end(), rng);
  }
  finish_batch(plan);
  return plan;
}

PartitionPlan split_streaming(PartitionPlan plan, int steps, int rounds_per_step) {
  if (steps < 1) throw ConfigError("stream steps must be at least 1");
  if (rounds_per_step < 1) throw ConfigError("rounds per stream step must be at least 1");
  plan.stream_steps = steps;
  plan.rounds_per_step = rounds_per_step;
  if (steps > 1) plan.mode = PartitionMode::kStreaming;
  for (auto& cp : plan.clients) {
    const auto sizes = even_sizes(cp.unlabeled.size(), static_cast<std::size_t>(steps));
    cp.chunks.clear();
    std::size_t pos = 0;
    for (auto sz : sizes) {
      cp.chunks.emplace_back(cp.unlabeled.begin() + static_cast<std::ptrdiff_t>(pos),
                             cp.unlabeled.begin() + static_cast<std::ptrdiff_t>(pos + sz));
      pos += sz;
    }
  }
  return plan;
}

namespace {

void write_list(std::ostream& out, std::span<const std::size_t> v) {
  out << v.size();
  for (auto i : v) out << ' ' << i;
  out << '\n';
}

std::vector<std::size_t> read_list(std::istream& in) {
  std::size_t n = 0;
  if (!(in >> n)) throw IoError("partition plan: expected a list length");
  std::vector<std::size_t> v(n);
  for (auto& x : v) {
    if (!(in >> x)) throw IoError("partition plan: truncated index list");
  }
  return v;
}

void expect(std::istream& in, std::string_view word) {
  std::string tok;
  if (!(in >> tok) || tok != word) throw IoError("partition plan: expected '" + std::string(word) + "'");
}

}  // namespace

void write_plan(const std::filesystem::path& path, const PartitionPlan& plan) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "fedmatch-partition 1\n";
  out << "mode " << to_string(plan.mode) << '\n';
  out << "scenario " << to_string(plan.scenario) << '\n';
  out << "stream_steps " << plan.stream_steps << '\n';
  out << "rounds_per_step " << plan.rounds_per_step << '\n';
  out << "clients " << plan.clients.size() << '\n';
  out << "server_labeled ";
  write_list(out, plan.server_labeled);
  for (std::size_t k = 0; k < plan.clients.size(); ++k) {
    const auto& cp = plan.clients[k];
    out << "client " << k << " labeled ";
    write_list(out, cp.labeled);
    out << "client " << k << " unlabeled ";
    write_list(out, cp.unlabeled);
    out << "client " << k << " chunks " << cp.chunks.size();
    for (const auto& ch : cp.chunks) out << ' ' << ch.size();
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

PartitionPlan read_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  PartitionPlan plan;
  std::string tok;
  expect(in, "fedmatch-partition");
  int version = 0;
  if (!(in >> version) || version != 1) throw IoError("partition plan: unsupported version");
  expect(in, "mode");
  in >> tok;
  plan.mode = parse_partition_mode(tok);
  expect(in, "scenario");
  in >> tok;
  plan.scenario = parse_scenario(tok);
  expect(in, "stream_steps");
  in >> plan.stream_steps;
  expect(in, "rounds_per_step");
  in >> plan.rounds_per_step;
  expect(in, "clients");
  std::size_t n = 0;
  in >> n;
  expect(in, "server_labeled");
  plan.server_labeled = read_list(in);
  plan.clients.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    auto& cp = plan.clients[k];
    std::size_t id = 0;
    expect(in, "client");
    in >> id;
    expect(in, "labeled");
    cp.labeled = read_list(in);
    expect(in, "client");
    in >> id;
    expect(in, "unlabeled");
    cp.unlabeled = read_list(in);
    expect(in, "client");
    in >> id;
    expect(in, "chunks");
    std::size_t nchunks = 0;
    in >> nchunks;
    std::size_t pos = 0;
    for (std::size_t c = 0; c < nchunks; ++c) {
      std::size_t sz = 0;
      if (!(in >> sz) || pos + sz > cp.unlabeled.size()) throw IoError("partition plan: bad chunk sizes");
      cp.chunks.emplace_back(cp.unlabeled.begin() + static_cast<std::ptrdiff_t>(pos),
                             cp.unlabeled.begin() + static_cast<std::ptrdiff_t>(pos + sz));
      pos += sz;
    }
    if (id != k) throw IoError("partition plan: clients out of order");
  }
  if (in.fail()) throw IoError("partition plan: malformed file " + path.string());
  return plan;
}

LabeledData make_labeled(const Dataset& ds, std::span<const std::size_t> idx) {
  LabeledData out;
  out.features = ds.features_of(idx);
  out.labels = ds.labels_of(idx);
  out.targets = one_hot_labels(out.labels, ds.num_classes);
  return out;
}

ClientDataHandle ClientDataHandle::with_labels(const Dataset& ds, const PartitionPlan& plan, std::size_t client,
                                               bool expose_unlabeled_truth) {
  ClientDataHandle h = unlabeled_only(ds, plan, client);
  h.labeled_ = make_labeled(ds, plan.clients.at(client).labeled);
  if (expose_unlabeled_truth) {
    for (const auto& ch : plan.clients[client].chunks) h.chunk_truth_.push_back(ds.labels_of(ch));
  }
  return h;
}

ClientDataHandle ClientDataHandle::unlabeled_only(const Dataset& ds, const PartitionPlan& plan, std::size_t client) {
  ClientDataHandle h;
  h.id_ = static_cast<int>(client);
  h.stream_steps_ = plan.stream_steps;
  h.rounds_per_step_ = plan.rounds_per_step;
  const auto& cp = plan.clients.at(client);
  if (cp.chunks.empty()) {
    h.chunks_.push_back(ds.features_of(cp.unlabeled));
  } else {
    for (const auto& ch : cp.chunks) h.chunks_.push_back(ds.features_of(ch));
  }
  return h;
}

const LabeledData* ClientDataHandle::labeled() const {
  label_reads_->fetch_add(1);
  return labeled_ ? &*labeled_ : nullptr;
}

namespace {

std::size_t chunk_for(int round, int steps, int rounds_per_step, std::size_t nchunks) {
  if (nchunks <= 1 || steps <= 1) return 0;
  const int step = std::min((std::max(round, 1) - 1) / std::max(rounds_per_step, 1), steps - 1);
  return static_cast<std::size_t>(step) % nchunks;
}

}  // namespace

const Matrix& ClientDataHandle::unlabeled(int round) const {
  return chunks_[chunk_for(round, stream_steps_, rounds_per_step_, chunks_.size())];
}

std::optional<LabeledData> ClientDataHandle::unlabeled_truth(int round) const {
  label_reads_->fetch_add(1);
  if (chunk_truth_.empty()) return std::nullopt;
  const std::size_t c = chunk_for(round, stream_steps_, rounds_per_step_, chunks_.size());
  LabeledData out;
  out.features = chunks_[c];
  out.labels = chunk_truth_[c];
  const std::size_t num_classes = labeled_ ? labeled_->targets.cols() : 0;
  out.targets = one_hot_labels(out.labels, num_classes);
  return out;
}

}  // namespace fedmatch
