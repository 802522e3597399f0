#include "topiq.h"

#include <cstdlib>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "config.hpp"
#include "corpus.hpp"
#include "errors.hpp"
#include "trainer.hpp"

namespace {

thread_local std::string g_last_error;

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) return nullptr;
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

int run_guarded(const std::function<void()>& fn) {
  try {
    fn();
    g_last_error.clear();
    return TOPIQ_OK;
  } catch (const topiq::UsageError& e) {
    g_last_error = e.what();
    return TOPIQ_USAGE_ERROR;
  } catch (const topiq::NumericError& e) {
    g_last_error = e.what();
    return TOPIQ_NUMERIC_ERROR;
  } catch (const topiq::DataError& e) {
    g_last_error = e.what();
    return TOPIQ_DATA_ERROR;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return TOPIQ_DATA_ERROR;
  }
}

topiq::RunConfig config_from_args(const char* config_path, const char* const* overrides,
                                  size_t n_overrides) {
  std::vector<std::string> ov;
  ov.reserve(n_overrides);
  for (size_t i = 0; i < n_overrides; ++i) {
    if (!overrides || !overrides[i]) throw topiq::UsageError("null override string");
    ov.emplace_back(overrides[i]);
  }
  return topiq::load_config(config_path ? config_path : "", ov);
}

void give_string(char** slot, const std::string& value) {
  if (!slot) return;
  *slot = dup_string(value);
  if (!*slot) throw std::bad_alloc();
}

int run_stage(const char* config_path, const char* const* overrides, size_t n_overrides,
              char** metrics_json,
              topiq::StageResult (*stage)(const topiq::RunConfig&)) {
  return run_guarded([&] {
    topiq::RunConfig cfg = config_from_args(config_path, overrides, n_overrides);
    topiq::StageResult res = stage(cfg);
    give_string(metrics_json, res.report.dump(2) + "\n");
  });
}

}  // namespace

extern "C" {

const char* topiq_last_error(void) { return g_last_error.c_str(); }

void topiq_string_free(char* s) { std::free(s); }

char* topiq_default_config(void) {
  return dup_string(topiq::default_config_json().dump(2) + "\n");
}

int topiq_synth(int topics, int vocab_per_topic, int pairs, uint64_t seed,
                const char* out_dir) {
  return run_guarded([&] {
    if (!out_dir || !*out_dir) throw topiq::UsageError("synth: out_dir is required");
    topiq::write_synth(topiq::synth_generate(topics, vocab_per_topic, pairs, seed),
                       out_dir);
  });
}

int topiq_train_ntm(const char* config_path, const char* const* overrides,
                    size_t n_overrides, char** metrics_json) {
  return run_stage(config_path, overrides, n_overrides, metrics_json, topiq::run_train_ntm);
}

int topiq_train_joint(const char* config_path, const char* const* overrides,
                      size_t n_overrides, char** metrics_json) {
  return run_stage(config_path, overrides, n_overrides, metrics_json, topiq::run_train_joint);
}

int topiq_train_sts(const char* config_path, const char* const* overrides,
                    size_t n_overrides, char** metrics_json) {
  return run_stage(config_path, overrides, n_overrides, metrics_json, topiq::run_train_sts);
}

int topiq_eval(const char* config_path, const char* const* overrides,
               size_t n_overrides, char** metrics_json) {
  return run_stage(config_path, overrides, n_overrides, metrics_json, topiq::run_eval);
}

int topiq_inspect_topics(const char* config_path, const char* const* overrides,
                         size_t n_overrides, char** out) {
  return run_guarded([&] {
    topiq::RunConfig cfg = config_from_args(config_path, overrides, n_overrides);
    give_string(out, topiq::run_inspect_topics(cfg));
  });
}

int topiq_inspect_codebook(const char* config_path, const char* const* overrides,
                           size_t n_overrides, char** out) {
  return run_guarded([&] {
    topiq::RunConfig cfg = config_from_args(config_path, overrides, n_overrides);
    give_string(out, topiq::run_inspect_codebook(cfg));
  });
}

int topiq_dump_attention(const char* config_path, const char* const* overrides,
                         size_t n_overrides, const char* pair_id, char** files_json) {
  return run_guarded([&] {
    if (!pair_id || !*pair_id) throw topiq::UsageError("dump-attention: pair id is required");
    topiq::RunConfig cfg = config_from_args(config_path, overrides, n_overrides);
    auto files = topiq::run_dump_attention(cfg, pair_id);
    topiq::ordered_json arr = topiq::ordered_json::array();
    for (const auto& f : files) arr.push_back(f);
    give_string(files_json, arr.dump(2) + "\n");
  });
}

struct topiq_model {
  topiq::TensorMap tensors;
};

int topiq_model_load(const char* checkpoint_path, topiq_model** out) {
  return run_guarded([&] {
    if (!checkpoint_path || !*checkpoint_path)
      throw topiq::UsageError("model_load: checkpoint path is required");
    if (!out) throw topiq::UsageError("model_load: out handle is required");
    *out = new topiq_model{topiq::load_tensors(checkpoint_path)};
  });
}

void topiq_model_free(topiq_model* m) { delete m; }

char* topiq_model_params_json(const topiq_model* m) {
  if (!m) return nullptr;
  topiq::ordered_json j = topiq::ordered_json::object();
  for (const auto& [name, t] : m->tensors) {
    topiq::ordered_json shape = topiq::ordered_json::array();
    for (int64_t d : t.shape) shape.push_back(d);
    j[name] = shape;
  }
  return dup_string(j.dump(2) + "\n");
}

}  // extern "C"
