#include "fedmatch/fedmatch.h"

#include <cstdlib>
#include <cstring>
#include <new>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "fedmatch/comm.hpp"
#include "fedmatch/error.hpp"
#include "fedmatch/runner.hpp"

struct fm_spec {
  fedmatch::RunSpec spec;
};

struct fm_result {
  std::vector<fedmatch::ExperimentResult> reps;
};

namespace {

thread_local std::string last_error;

fm_status fail(fm_status s, const std::string& msg) {
  last_error = msg;
  return s;
}

// Maps every exception the core can throw onto a status code.
template <class F>
fm_status guarded(F&& fn) {
  try {
    fn();
    last_error.clear();
    return FM_OK;
  } catch (const fedmatch::ConfigError& e) {
    return fail(FM_CONFIG_ERROR, e.what());
  } catch (const fedmatch::CorruptDelta& e) {
    return fail(FM_CORRUPT_DELTA, e.what());
  } catch (const fedmatch::IoError& e) {
    return fail(FM_IO_ERROR, e.what());
  } catch (const fedmatch::InvalidInput& e) {
    return fail(FM_INVALID_ARGUMENT, e.what());
  } catch (const std::bad_alloc&) {
    return fail(FM_RUNTIME_ERROR, "out of memory");
  } catch (const std::exception& e) {
    return fail(FM_RUNTIME_ERROR, e.what());
  } catch (...) {
    return fail(FM_RUNTIME_ERROR, "unknown error");
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

}  // namespace

extern "C" {

const char* fm_version(void) { return "0.1.0"; }

const char* fm_last_error(void) { return last_error.c_str(); }

const char* fm_status_name(fm_status status) {
  switch (status) {
    case FM_OK: return "ok";
    case FM_INVALID_ARGUMENT: return "invalid argument";
    case FM_CONFIG_ERROR: return "config error";
    case FM_IO_ERROR: return "io error";
    case FM_CORRUPT_DELTA: return "corrupt delta";
    case FM_RUNTIME_ERROR: return "runtime error";
  }
  return "unknown";
}

fm_status fm_set_log_level(const char* level) {
  if (!level) return fail(FM_INVALID_ARGUMENT, "log level is null");
  const std::string l(level);
  if (l == "error") {
    spdlog::set_level(spdlog::level::err);
  } else if (l == "info") {
    spdlog::set_level(spdlog::level::info);
  } else if (l == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else {
    return fail(FM_INVALID_ARGUMENT, "log level must be error, info or debug, got '" + l + "'");
  }
  return FM_OK;
}

fm_status fm_spec_from_file(const char* path, fm_spec** out) {
  if (!path || !out) return fail(FM_INVALID_ARGUMENT, "null argument");
  *out = nullptr;
  return guarded([&] { *out = new fm_spec{fedmatch::load_run_spec(path)}; });
}

fm_status fm_spec_from_json(const char* json, fm_spec** out) {
  if (!json || !out) return fail(FM_INVALID_ARGUMENT, "null argument");
  *out = nullptr;
  return guarded([&] { *out = new fm_spec{fedmatch::parse_run_spec(json)}; });
}

void fm_spec_free(fm_spec* spec) { delete spec; }

fm_status fm_spec_set_method(fm_spec* spec, const char* method) {
  if (!spec || !method) return fail(FM_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    fedmatch::RunSpec next = spec->spec;
    next.method = fedmatch::parse_method(method);
    next.validate();
    spec->spec = std::move(next);
  });
}

fm_status fm_spec_set_seed(fm_spec* spec, uint64_t seed) {
  if (!spec) return fail(FM_INVALID_ARGUMENT, "null argument");
  spec->spec.exp.round.seed = seed;
  return FM_OK;
}

fm_status fm_spec_set_output_dir(fm_spec* spec, const char* dir) {
  if (!spec || !dir) return fail(FM_INVALID_ARGUMENT, "null argument");
  if (*dir == '\0') return fail(FM_CONFIG_ERROR, "output_dir must not be empty");
  spec->spec.output_dir = dir;
  return FM_OK;
}

fm_status fm_spec_validate(const fm_spec* spec) {
  if (!spec) return fail(FM_INVALID_ARGUMENT, "null argument");
  return guarded([&] { spec->spec.validate(); });
}

fm_status fm_spec_to_json(const fm_spec* spec, char** out) {
  if (!spec || !out) return fail(FM_INVALID_ARGUMENT, "null argument");
  *out = nullptr;
  return guarded([&] { *out = dup_string(fedmatch::to_json(spec->spec)); });
}

void fm_string_free(char* s) { std::free(s); }

fm_status fm_run(const fm_spec* spec, fm_result** out) {
  if (!spec) return fail(FM_INVALID_ARGUMENT, "null argument");
  if (out) *out = nullptr;
  return guarded([&] {
    auto res = fedmatch::run(spec->spec);
    if (out) *out = new fm_result{std::move(res.repetitions)};
  });
}

fm_status fm_simulate(const fm_spec* spec, fm_result** out) {
  if (!spec || !out) return fail(FM_INVALID_ARGUMENT, "null argument");
  *out = nullptr;
  return guarded([&] {
    spec->spec.validate();
    auto res = fedmatch::run_experiment(spec->spec.exp, spec->spec.method);
    *out = new fm_result{{std::move(res)}};
  });
}

fm_status fm_compare(const fm_spec* spec, const char* const* methods, size_t num_methods) {
  if (!spec || (!methods && num_methods > 0)) return fail(FM_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    std::vector<fedmatch::Method> ms;
    for (size_t i = 0; i < num_methods; ++i) {
      if (!methods[i]) throw fedmatch::InvalidInput("null method name");
      ms.push_back(fedmatch::parse_method(methods[i]));
    }
    fedmatch::compare(spec->spec, ms);
  });
}

size_t fm_result_repetitions(const fm_result* result) { return result ? result->reps.size() : 0; }

size_t fm_result_rounds(const fm_result* result, size_t rep) {
  if (!result || rep >= result->reps.size()) return 0;
  return result->reps[rep].metrics.size();
}

fm_status fm_result_metrics(const fm_result* result, size_t rep, size_t index, fm_round_metrics* out) {
  if (!result || !out) return fail(FM_INVALID_ARGUMENT, "null argument");
  if (rep >= result->reps.size() || index >= result->reps[rep].metrics.size()) {
    return fail(FM_INVALID_ARGUMENT, "metrics index out of range");
  }
  const auto& m = result->reps[rep].metrics[index];
  *out = fm_round_metrics{m.round, m.test_acc, m.labeled_acc, m.loss_s, m.loss_u, m.s2c_pct, m.c2s_pct, m.nnz_psi_frac};
  return FM_OK;
}

fm_status fm_result_label_reads(const fm_result* result, size_t rep, uint64_t* out) {
  if (!result || !out) return fail(FM_INVALID_ARGUMENT, "null argument");
  if (rep >= result->reps.size()) return fail(FM_INVALID_ARGUMENT, "repetition out of range");
  *out = result->reps[rep].client_label_reads;
  return FM_OK;
}

void fm_result_free(fm_result* result) { delete result; }

fm_status fm_delta_encode(const double* local, const double* reference, size_t len, double threshold, uint8_t** bytes,
                          size_t* num_bytes) {
  if ((len > 0 && (!local || !reference)) || !bytes || !num_bytes) return fail(FM_INVALID_ARGUMENT, "null argument");
  *bytes = nullptr;
  *num_bytes = 0;
  if (!(threshold >= 0.0)) return fail(FM_INVALID_ARGUMENT, "threshold must be non-negative");
  return guarded([&] {
    const auto delta = fedmatch::diff(std::span<const double>(local, len), std::span<const double>(reference, len),
                                      threshold);
    const auto wire = fedmatch::serialize(delta);
    auto* buf = static_cast<uint8_t*>(std::malloc(wire.empty() ? 1 : wire.size()));
    if (!buf) throw std::bad_alloc();
    std::memcpy(buf, wire.data(), wire.size());
    *bytes = buf;
    *num_bytes = wire.size();
  });
}

fm_status fm_delta_apply(const double* reference, size_t len, const uint8_t* bytes, size_t num_bytes, double* out) {
  if ((len > 0 && (!reference || !out)) || (!bytes && num_bytes > 0)) {
    return fail(FM_INVALID_ARGUMENT, "null argument");
  }
  return guarded([&] {
    const auto delta = fedmatch::deserialize(std::span<const uint8_t>(bytes, num_bytes));
    const auto result = fedmatch::apply(std::span<const double>(reference, len), delta);
    std::memcpy(out, result.data(), result.size() * sizeof(double));
  });
}

void fm_bytes_free(uint8_t* bytes) { std::free(bytes); }

}  // extern "C"
