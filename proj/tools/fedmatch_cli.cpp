// fedmatch: run, compare and validate experiment configs.

#include <cstdio>
#include <cstdlib>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedmatch/fedmatch.h"

namespace {

struct Options {
  std::string config;
  std::string method;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int report(fm_status s) {
  std::fprintf(stderr, "fedmatch: %s: %s\n", fm_status_name(s), fm_last_error());
  return 1;
}

// Loads the config (or defaults) and applies the command-line overrides.
fm_status load(const Options& o, fm_spec** spec) {
  fm_status s = o.config.empty() ? fm_spec_from_json("{}", spec) : fm_spec_from_file(o.config.c_str(), spec);
  if (s != FM_OK) return s;
  if (!o.method.empty() && (s = fm_spec_set_method(*spec, o.method.c_str())) != FM_OK) return s;
  if (o.seed && (s = fm_spec_set_seed(*spec, *o.seed)) != FM_OK) return s;
  if (!o.out.empty() && (s = fm_spec_set_output_dir(*spec, o.out.c_str())) != FM_OK) return s;
  return fm_spec_validate(*spec);
}

void add_common(CLI::App* cmd, Options& o, bool with_method) {
  cmd->add_option("--config", o.config, "JSON run config (defaults when omitted)");
  if (with_method) cmd->add_option("--method", o.method, "fedmatch, fedavg_sl, fedprox_sl, fedavg_fixmatch, fedprox_fixmatch");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--seed", o.seed, "base seed; repetition i uses seed + i");
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* level = std::getenv("FEDMATCH_LOG")) {
    if (fm_set_log_level(level) != FM_OK) return report(FM_INVALID_ARGUMENT);
  } else {
    fm_set_log_level("info");
  }

  CLI::App app{"FedMatch federated semi-supervised learning simulator"};
  app.require_subcommand(1);
  Options o;
  std::vector<std::string> methods;

  auto* run = app.add_subcommand("run", "run every repetition and write metrics, costs and a summary");
  add_common(run, o, true);
  auto* cmp = app.add_subcommand("compare", "run several methods and merge their metrics into compare.csv");
  add_common(cmp, o, false);
  cmp->add_option("--methods", methods, "methods to compare")
      ->delimiter(',')
      ->default_val(std::vector<std::string>{"fedmatch", "fedavg_sl", "fedprox_sl", "fedavg_fixmatch", "fedprox_fixmatch"});
  auto* val = app.add_subcommand("validate", "check a config and print it fully resolved");
  add_common(val, o, true);

  CLI11_PARSE(app, argc, argv);

  fm_spec* spec = nullptr;
  fm_status s = load(o, &spec);
  if (s != FM_OK) {
    fm_spec_free(spec);
    return report(s);
  }

  if (*val) {
    char* json = nullptr;
    s = fm_spec_to_json(spec, &json);
    if (s == FM_OK) std::fputs(json, stdout);
    fm_string_free(json);
  } else if (*run) {
    s = fm_run(spec, nullptr);
  } else {
    std::vector<const char*> names;
    for (const auto& m : methods) names.push_back(m.c_str());
    s = fm_compare(spec, names.data(), names.size());
  }
  fm_spec_free(spec);
  return s == FM_OK ? 0 : report(s);
}
