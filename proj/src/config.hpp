#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"

namespace topiq {

using ordered_json = nlohmann::ordered_json;

struct StageConfig {
  double lr = 1e-3;
  int epochs = 1;
  int batch = 1;
  int patience = 0;  // 0 = no early stopping
};

struct AblationFlags {
  bool no_topic_model = false;       // plain VQ-VAE: no topic model at all
  bool no_topic_encoder = false;     // drop the topical rows from the encoder input
  bool no_topical_codebook = false;  // random codebook instead of sharing phi
  bool no_semantic_attention = false;
  bool no_output_enhanced = false;
};

struct RunConfig {
  uint64_t seed = 7;
  std::string dataset;
  std::string output_dir;
  std::string checkpoint;
  std::string mode = "joint";  // or "multistage"

  // model
  int topics = 16;       // K
  int code_dim = 64;     // E
  int hidden = 100;      // NTM encoder width
  double lambda = 1e-4;  // commitment weight
  double gamma = 1.0;    // joint trade-off
  int min_count = 3;
  std::string stopwords_path;  // empty = builtin list
  bool bow_concat_pairs = false;
  int max_len = 24;    // L
  int vq_ffn_mult = 4;
  int layers = 2;      // pair transformer depth
  int heads = 4;       // n; model width = heads * code_dim
  std::vector<int> semantics_layers = {-1};  // -1 = last layer
  int ffn_mult = 1;    // pair transformer FFN multiplier
  int head_hidden = 64;
  double clip_norm = 5.0;

  StageConfig ntm{1e-3, 100, 64, 0};
  StageConfig joint{1e-3, 20, 16, 0};
  StageConfig sts{1e-3, 10, 16, 3};

  AblationFlags ablations;

  ordered_json resolved;  // defaults merged with user document, echo-ready

  uint64_t hash() const;  // FNV-1a of the resolved document
  std::string hash_hex() const;
  // -1 mapped to layers-1, validated against [0, layers), sorted, deduped
  std::vector<int> resolved_semantics_layers() const;
};

// Defaults document (single source of the schema).
ordered_json default_config_json();
RunConfig default_config();

// Parse + validate a full document against the schema; unknown keys rejected.
RunConfig config_from_json(const ordered_json& doc);
// Read file (optional), apply dotted key=value overrides, resolve defaults.
RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides);
// Write resolved config to dir/config.json (byte-stable).
void echo_config(const RunConfig& cfg, const std::string& dir);

}  // namespace topiq
