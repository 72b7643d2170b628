#include "fedmatch/runner.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "fedmatch/error.hpp"

namespace fedmatch {

namespace {

using Json = nlohmann::ordered_json;

double as_real(const Json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError("'" + key + "' must be a number");
  return v.get<double>();
}

std::uint64_t as_count(const Json& v, const std::string& key) {
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
    throw ConfigError("'" + key + "' must be a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

int as_int(const Json& v, const std::string& key) {
  if (!v.is_number_integer()) throw ConfigError("'" + key + "' must be an integer");
  const auto x = v.get<std::int64_t>();
  if (x < -1000000000 || x > 1000000000) throw ConfigError("'" + key + "' is out of range");
  return static_cast<int>(x);
}

std::string as_text(const Json& v, const std::string& key) {
  if (!v.is_string()) throw ConfigError("'" + key + "' must be a string");
  return v.get<std::string>();
}

struct Field {
  std::string key;
  std::function<void(RunSpec&, const Json&)> read;
  std::function<Json(const RunSpec&)> write;
};

// Table of every accepted key. Order is the order of the resolved config.
const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    auto real = [&f](std::string key, std::function<double&(RunSpec&)> ref) {
      f.push_back({key, [key, ref](RunSpec& s, const Json& v) { ref(s) = as_real(v, key); },
                   [ref](const RunSpec& s) {
                     RunSpec copy = s;
                     return Json(ref(copy));
                   }});
    };
    auto count = [&f](std::string key, std::function<std::size_t&(RunSpec&)> ref) {
      f.push_back({key, [key, ref](RunSpec& s, const Json& v) { ref(s) = static_cast<std::size_t>(as_count(v, key)); },
                   [ref](const RunSpec& s) {
                     RunSpec copy = s;
                     return Json(ref(copy));
                   }});
    };
    auto integer = [&f](std::string key, std::function<int&(RunSpec&)> ref) {
      f.push_back({key, [key, ref](RunSpec& s, const Json& v) { ref(s) = as_int(v, key); },
                   [ref](const RunSpec& s) {
                     RunSpec copy = s;
                     return Json(ref(copy));
                   }});
    };

    f.push_back({"method", [](RunSpec& s, const Json& v) { s.method = parse_method(as_text(v, "method")); },
                 [](const RunSpec& s) { return Json(std::string(to_string(s.method))); }});
    f.push_back({"scenario",
                 [](RunSpec& s, const Json& v) {
                   try {
                     s.exp.round.scenario = parse_scenario(as_text(v, "scenario"));
                   } catch (const InvalidInput& e) {
                     throw ConfigError(e.what());
                   }
                 },
                 [](const RunSpec& s) { return Json(std::string(to_string(s.exp.round.scenario))); }});
    count("num_clients", [](RunSpec& s) -> std::size_t& { return s.exp.round.num_clients; });
    real("fraction", [](RunSpec& s) -> double& { return s.exp.round.fraction; });
    integer("rounds", [](RunSpec& s) -> int& { return s.exp.round.rounds; });
    integer("local_epochs", [](RunSpec& s) -> int& { return s.exp.round.local_epochs; });
    integer("server_epochs", [](RunSpec& s) -> int& { return s.exp.round.server_epochs; });
    count("helpers", [](RunSpec& s) -> std::size_t& { return s.exp.round.helpers; });
    integer("helper_period", [](RunSpec& s) -> int& { return s.exp.round.helper_period; });
    real("lr", [](RunSpec& s) -> double& { return s.exp.round.lr; });
    integer("lr_patience", [](RunSpec& s) -> int& { return s.exp.round.lr_schedule.patience; });
    real("lr_factor", [](RunSpec& s) -> double& { return s.exp.round.lr_schedule.factor; });
    real("lambda_s", [](RunSpec& s) -> double& { return s.exp.round.loss.lambda_s; });
    real("lambda_u", [](RunSpec& s) -> double& { return s.exp.round.lambda_u; });
    real("lambda_iccs", [](RunSpec& s) -> double& { return s.exp.round.loss.lambda_iccs; });
    real("lambda_l1", [](RunSpec& s) -> double& { return s.exp.round.loss.lambda_l1; });
    real("lambda_l2", [](RunSpec& s) -> double& { return s.exp.round.loss.lambda_l2; });
    real("tau", [](RunSpec& s) -> double& { return s.exp.round.loss.tau; });
    real("mu", [](RunSpec& s) -> double& { return s.exp.round.mu; });
    count("batch_labeled", [](RunSpec& s) -> std::size_t& { return s.exp.round.batch_labeled; });
    count("batch_unlabeled", [](RunSpec& s) -> std::size_t& { return s.exp.round.batch_unlabeled; });
    count("batch_server", [](RunSpec& s) -> std::size_t& { return s.exp.round.batch_server; });
    real("comm_threshold", [](RunSpec& s) -> double& { return s.exp.round.comm_threshold; });
    real("noise_sigma", [](RunSpec& s) -> double& { return s.exp.round.augment.noise_sigma; });
    real("mask_prob", [](RunSpec& s) -> double& { return s.exp.round.augment.mask_prob; });
    count("probe_rows", [](RunSpec& s) -> std::size_t& { return s.exp.round.probe_rows; });
    f.push_back({"sl_data", [](RunSpec& s, const Json& v) { s.exp.round.sl_data = parse_supervised_data(as_text(v, "sl_data")); },
                 [](const RunSpec& s) { return Json(std::string(to_string(s.exp.round.sl_data))); }});
    real("dropout_prob", [](RunSpec& s) -> double& { return s.exp.round.dropout_prob; });
    f.push_back({"threads",
                 [](RunSpec& s, const Json& v) {
                   const auto n = as_count(v, "threads");
                   if (n > 1024) throw ConfigError("'threads' is out of range");
                   s.exp.round.threads = static_cast<unsigned>(n);
                 },
                 [](const RunSpec& s) { return Json(s.exp.round.threads); }});
    f.push_back({"seed", [](RunSpec& s, const Json& v) { s.exp.round.seed = as_count(v, "seed"); },
                 [](const RunSpec& s) { return Json(s.exp.round.seed); }});
    integer("repetitions", [](RunSpec& s) -> int& { return s.repetitions; });
    f.push_back({"output_dir", [](RunSpec& s, const Json& v) { s.output_dir = as_text(v, "output_dir"); },
                 [](const RunSpec& s) { return Json(s.output_dir); }});

    count("num_classes", [](RunSpec& s) -> std::size_t& { return s.exp.data.num_classes; });
    count("input_dim", [](RunSpec& s) -> std::size_t& { return s.exp.data.input_dim; });
    count("samples_per_class", [](RunSpec& s) -> std::size_t& { return s.exp.data.samples_per_class; });
    real("spread", [](RunSpec& s) -> double& { return s.exp.data.spread; });
    f.push_back({"partition",
                 [](RunSpec& s, const Json& v) {
                   try {
                     s.exp.data.partition = parse_partition_mode(as_text(v, "partition"));
                   } catch (const InvalidInput& e) {
                     throw ConfigError(e.what());
                   }
                 },
                 [](const RunSpec& s) { return Json(std::string(to_string(s.exp.data.partition))); }});
    count("labels_per_class", [](RunSpec& s) -> std::size_t& { return s.exp.data.labels_per_class; });
    count("unlabeled_limit", [](RunSpec& s) -> std::size_t& { return s.exp.data.unlabeled_limit; });
    real("dirichlet_alpha", [](RunSpec& s) -> double& { return s.exp.data.dirichlet_alpha; });
    integer("stream_steps", [](RunSpec& s) -> int& { return s.exp.data.stream_steps; });
    integer("rounds_per_stream_step", [](RunSpec& s) -> int& { return s.exp.data.rounds_per_stream_step; });
    f.push_back({"hidden",
                 [](RunSpec& s, const Json& v) {
                   if (!v.is_array()) throw ConfigError("'hidden' must be an array of layer widths");
                   std::vector<std::size_t> h;
                   for (const auto& w : v) h.push_back(static_cast<std::size_t>(as_count(w, "hidden")));
                   s.exp.model.hidden = std::move(h);
                 },
                 [](const RunSpec& s) { return Json(s.exp.model.hidden); }});
    f.push_back({"activation",
                 [](RunSpec& s, const Json& v) {
                   try {
                     s.exp.model.activation = parse_activation(as_text(v, "activation"));
                   } catch (const InvalidInput& e) {
                     throw ConfigError(e.what());
                   }
                 },
                 [](const RunSpec& s) { return Json(std::string(to_string(s.exp.model.activation))); }});
    return f;
  }();
  return table;
}

constexpr double kLambdaL1AtClient = 1e-4;
constexpr double kLambdaL1AtServer = 1e-5;

std::string fmt_real(double x) { return fmt::format("{}", x); }

struct Stat {
  double mean = 0.0;
  double std = 0.0;
};

// Sample standard deviation; zero for a single repetition.
Stat mean_std(const std::vector<double>& xs) {
  Stat s;
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return s;
}

std::string costs_csv(const std::vector<CostRecord>& costs) {
  std::string out = "round,s2c_entries,c2s_entries,s2c_dense,c2s_dense,helper_entries\n";
  for (const auto& c : costs) {
    out += fmt::format("{},{},{},{},{},{}\n", c.round, c.s2c_entries, c.c2s_entries, c.s2c_dense, c.c2s_dense,
                       c.helper_entries);
  }
  return out;
}

std::string summary_json(const RunSpec& spec, const RunOutput& out) {
  Json j;
  j["method"] = std::string(to_string(spec.method));
  j["scenario"] = std::string(to_string(spec.exp.round.scenario));
  j["repetitions"] = out.repetitions.size();
  Json seeds = Json::array();
  for (std::size_t i = 0; i < out.repetitions.size(); ++i) seeds.push_back(spec.exp.round.seed + i);
  j["seeds"] = seeds;

  using Getter = double (*)(const RoundMetrics&);
  const std::vector<std::pair<const char*, Getter>> cols = {
      {"test_acc", [](const RoundMetrics& m) { return m.test_acc; }},
      {"labeled_acc", [](const RoundMetrics& m) { return m.labeled_acc; }},
      {"loss_s", [](const RoundMetrics& m) { return m.loss_s; }},
      {"loss_u", [](const RoundMetrics& m) { return m.loss_u; }},
      {"s2c_pct", [](const RoundMetrics& m) { return m.s2c_pct; }},
      {"c2s_pct", [](const RoundMetrics& m) { return m.c2s_pct; }},
      {"nnz_psi_frac", [](const RoundMetrics& m) { return m.nnz_psi_frac; }},
  };
  Json final_round, over_rounds;
  for (const auto& [name, get] : cols) {
    std::vector<double> last, avg;
    for (const auto& rep : out.repetitions) {
      if (rep.metrics.empty()) continue;
      last.push_back(get(rep.metrics.back()));
      double acc = 0.0;
      for (const auto& m : rep.metrics) acc += get(m);
      avg.push_back(acc / static_cast<double>(rep.metrics.size()));
    }
    const Stat a = mean_std(last), b = mean_std(avg);
    final_round[name] = {{"mean", a.mean}, {"std", a.std}};
    over_rounds[name] = {{"mean", b.mean}, {"std", b.std}};
  }
  j["final_round"] = final_round;
  j["mean_over_rounds"] = over_rounds;
  std::uint64_t skipped = 0;
  for (const auto& rep : out.repetitions) skipped += rep.skipped_client_rounds;
  j["skipped_client_rounds"] = skipped;
  return j.dump(2) + "\n";
}

}  // namespace

void RunSpec::validate() const {
  exp.validate(method);
  if (repetitions < 1) throw ConfigError("repetitions must be at least 1");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

bool RunSpec::operator==(const RunSpec& other) const { return to_json(*this) == to_json(other); }

RunSpec parse_run_spec(std::string_view json_text) {
  Json j;
  try {
    j = Json::parse(json_text.begin(), json_text.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  if (j.is_null()) j = Json::object();
  if (!j.is_object()) throw ConfigError("config must be a JSON object");

  std::set<std::string> known;
  for (const auto& f : fields()) known.insert(f.key);
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
  }

  RunSpec spec;
  for (const auto& f : fields()) {
    if (j.contains(f.key)) f.read(spec, j.at(f.key));
  }
  if (!j.contains("lambda_l1")) {
    spec.exp.round.loss.lambda_l1 =
        spec.exp.round.scenario == Scenario::kLabelsAtServer ? kLambdaL1AtServer : kLambdaL1AtClient;
  }
  spec.validate();
  return spec;
}

RunSpec load_run_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_run_spec(buf.str());
}

std::string to_json(const RunSpec& spec) {
  Json j = Json::object();
  for (const auto& f : fields()) j[f.key] = f.write(spec);
  return j.dump(2) + "\n";
}

std::string metrics_csv(const std::vector<RoundMetrics>& metrics) {
  std::string out(kMetricsHeader);
  out += '\n';
  for (const auto& m : metrics) {
    out += fmt::format("{},{},{},{},{},{},{},{}\n", m.round, fmt_real(m.test_acc), fmt_real(m.labeled_acc),
                       fmt_real(m.loss_s), fmt_real(m.loss_u), fmt_real(m.s2c_pct), fmt_real(m.c2s_pct),
                       fmt_real(m.nnz_psi_frac));
  }
  return out;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
}

RunOutput run(const RunSpec& spec) {
  spec.validate();
  const std::filesystem::path root(spec.output_dir);
  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  if (ec) throw IoError("cannot create " + root.string() + ": " + ec.message());
  write_file_atomic(root / "config.json", to_json(spec));

  RunOutput out;
  for (int rep = 0; rep < spec.repetitions; ++rep) {
    ExperimentConfig cfg = spec.exp;
    cfg.round.seed = spec.exp.round.seed + static_cast<std::uint64_t>(rep);
    spdlog::info("{}: repetition {} (seed {})", to_string(spec.method), rep, cfg.round.seed);
    ExperimentResult res = run_experiment(cfg, spec.method);
    const auto dir = root / fmt::format("rep_{}", rep);
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    write_file_atomic(dir / "metrics.csv", metrics_csv(res.metrics));
    write_file_atomic(dir / "costs.csv", costs_csv(res.costs));
    if (!res.metrics.empty()) {
      spdlog::info("  final test_acc {:.4f}, s2c {:.1f}%, c2s {:.1f}%", res.metrics.back().test_acc,
                   res.metrics.back().s2c_pct, res.metrics.back().c2s_pct);
    }
    out.repetitions.push_back(std::move(res));
  }
  write_file_atomic(root / "summary.json", summary_json(spec, out));
  return out;
}

void compare(const RunSpec& spec, const std::vector<Method>& methods) {
  if (methods.empty()) throw ConfigError("compare needs at least one method");
  const std::filesystem::path root(spec.output_dir);
  std::string merged = "method,rep,seed," + std::string(kMetricsHeader) + "\n";
  for (Method m : methods) {
    RunSpec one = spec;
    one.method = m;
    one.output_dir = (root / std::string(to_string(m))).string();
    const RunOutput out = run(one);
    for (std::size_t rep = 0; rep < out.repetitions.size(); ++rep) {
      const std::string csv = metrics_csv(out.repetitions[rep].metrics);
      std::istringstream lines(csv);
      std::string line;
      std::getline(lines, line);  // header
      while (std::getline(lines, line)) {
        merged += fmt::format("{},{},{},{}\n", to_string(m), rep, spec.exp.round.seed + rep, line);
      }
    }
  }
  write_file_atomic(root / "compare.csv", merged);
}

}  // namespace fedmatch
