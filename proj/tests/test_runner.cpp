#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include <json.hpp>

#include "fedmatch/error.hpp"
#include "fedmatch/runner.hpp"

using namespace fedmatch;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("fedmatch_test_runner_" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kTiny = R"({"num_clients": 2, "rounds": 3, "num_classes": 3, "input_dim": 4,
  "samples_per_class": 60, "labels_per_class": 2, "hidden": [6], "repetitions": 2, "lr": 0.05})";

}  // namespace

TEST_CASE("an empty config resolves to the documented defaults") {
  const auto s = parse_run_spec("{}");
  CHECK(s.method == Method::kFedMatch);
  CHECK(s.exp.round.lr == 1e-3);
  CHECK(s.exp.round.loss.lambda_s == 10.0);
  CHECK(s.exp.round.loss.tau == 0.85);
  CHECK(s.exp.round.batch_labeled == 10);
  CHECK(s.exp.round.batch_unlabeled == 100);
  CHECK(s.exp.round.loss.lambda_l1 == 1e-4);
  CHECK(s.repetitions == 3);
  CHECK(parse_run_spec(R"({"scenario": "labels_at_server", "sl_data": "labeled_only"})").exp.round.loss.lambda_l1 ==
        1e-5);
}

TEST_CASE("resolved configs round-trip") {
  const auto s = parse_run_spec(R"({"method": "fedprox_fixmatch", "lambda_l2": 0, "hidden": [12, 7],
    "partition": "streaming", "dropout_prob": 0.25, "seed": 12345678901, "activation": "tanh"})");
  const auto text = to_json(s);
  const auto back = parse_run_spec(text);
  CHECK(back == s);
  CHECK(to_json(back) == text);
  CHECK(back.exp.round.seed == 12345678901ULL);
  CHECK(back.exp.model.hidden == std::vector<std::size_t>{12, 7});
}

TEST_CASE("config errors are descriptive") {
  CHECK_THROWS_WITH_AS(parse_run_spec(R"({"fraction": 0})"), doctest::Contains("fraction must exceed 0"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_spec(R"({"learning_rate": 0.1})"), doctest::Contains("learning_rate"), ConfigError);
  CHECK_THROWS_AS(parse_run_spec("{not json"), ConfigError);
  CHECK_THROWS_AS(parse_run_spec("[1, 2]"), ConfigError);
  CHECK_THROWS_AS(parse_run_spec(R"({"rounds": "ten"})"), ConfigError);
  CHECK_THROWS_AS(parse_run_spec(R"({"num_clients": -1})"), ConfigError);
  CHECK_THROWS_AS(parse_run_spec(R"({"method": "nope"})"), ConfigError);
  CHECK_THROWS_AS(parse_run_spec(R"({"scenario": "labels_at_server", "method": "fedavg_sl"})"), ConfigError);
  CHECK_THROWS_AS(load_run_spec("/nonexistent/fedmatch.json"), IoError);
}

TEST_CASE("metrics CSV has a header plus one row per round") {
  std::vector<RoundMetrics> rows(7);
  for (int i = 0; i < 7; ++i) rows[static_cast<std::size_t>(i)].round = i + 1;
  const auto csv = metrics_csv(rows);
  CHECK(csv.rfind(std::string(kMetricsHeader) + "\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 8);
}

TEST_CASE("atomic writes replace the file and leave no temporary behind") {
  const auto dir = scratch_dir("atomic");
  write_file_atomic(dir / "a.txt", "first");
  write_file_atomic(dir / "a.txt", "second");
  CHECK(slurp(dir / "a.txt") == "second");
  CHECK_FALSE(fs::exists(dir / "a.txt.tmp"));
  CHECK_THROWS_AS(write_file_atomic(dir / "missing" / "b.txt", "x"), IoError);
}

TEST_CASE("run writes config, per-repetition metrics and a summary; reruns are identical") {
  auto spec = parse_run_spec(kTiny);
  const auto dir = scratch_dir("run");
  spec.output_dir = (dir / "a").string();
  const auto out = run(spec);
  CHECK(out.repetitions.size() == 2);
  CHECK(parse_run_spec(slurp(dir / "a" / "config.json")) == spec);
  for (int rep = 0; rep < 2; ++rep) {
    const auto m = slurp(dir / "a" / ("rep_" + std::to_string(rep)) / "metrics.csv");
    CHECK(std::count(m.begin(), m.end(), '\n') == 4);
    CHECK(fs::exists(dir / "a" / ("rep_" + std::to_string(rep)) / "costs.csv"));
  }
  const auto summary = nlohmann::json::parse(slurp(dir / "a" / "summary.json"));
  CHECK(summary["repetitions"] == 2);
  CHECK(summary["seeds"] == nlohmann::json::array({1, 2}));
  CHECK(summary["final_round"]["test_acc"].contains("std"));

  spec.output_dir = (dir / "b").string();
  run(spec);
  for (const char* f : {"rep_0/metrics.csv", "rep_1/metrics.csv", "summary.json"}) {
    CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
  }
}

TEST_CASE("compare merges every method into one CSV") {
  auto spec = parse_run_spec(kTiny);
  spec.repetitions = 1;
  const auto dir = scratch_dir("compare");
  spec.output_dir = dir.string();
  compare(spec, {Method::kFedMatch, Method::kFedAvgSl});
  const auto csv = slurp(dir / "compare.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 * 3);
  CHECK(csv.find("fedavg_sl,") != std::string::npos);
  CHECK(fs::exists(dir / "fedmatch" / "summary.json"));
  fs::remove_all(dir.parent_path());
}
