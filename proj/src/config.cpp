#include "config.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace topiq {

ordered_json default_config_json() {
  ordered_json j;
  j["seed"] = 7;
  j["dataset"] = "";
  j["output_dir"] = "";
  j["checkpoint"] = "";
  j["mode"] = "joint";
  j["model"] = {{"topics", 16},
                {"code_dim", 64},
                {"hidden", 100},
                {"lambda", 1e-4},
                {"gamma", 1.0},
                {"min_count", 3},
                {"stopwords_path", ""},
                {"bow_concat_pairs", false},
                {"max_len", 24},
                {"vq_ffn_mult", 4},
                {"layers", 2},
                {"heads", 4},
                {"semantics_layers", ordered_json::array({-1})},
                {"ffn_mult", 1},
                {"head_hidden", 64},
                {"clip_norm", 5.0}};
  j["ntm"] = {{"lr", 1e-3}, {"epochs", 100}, {"batch", 64}};
  j["joint"] = {{"lr", 1e-3}, {"epochs", 20}, {"batch", 16}};
  j["sts"] = {{"lr", 1e-3}, {"epochs", 10}, {"batch", 16}, {"patience", 3}};
  j["ablations"] = {{"no_topic_model", false},
                    {"no_topic_encoder", false},
                    {"no_topical_codebook", false},
                    {"no_semantic_attention", false},
                    {"no_output_enhanced", false}};
  return j;
}

namespace {

// Recursively merge user onto defaults; any key absent from the defaults
// document at the same path is unknown and rejected.
void merge_checked(ordered_json& base, const ordered_json& user, const std::string& prefix) {
  if (!user.is_object())
    throw UsageError("config: expected an object at '" + (prefix.empty() ? "." : prefix) + "'");
  for (auto it = user.begin(); it != user.end(); ++it) {
    std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw UsageError("config: unknown key '" + path + "'");
    ordered_json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_checked(slot, it.value(), path);
    } else {
      // scalar/array leaf: type family must match
      const ordered_json& v = it.value();
      bool ok = (slot.is_boolean() && v.is_boolean()) ||
                (slot.is_string() && v.is_string()) ||
                (slot.is_number() && v.is_number()) ||
                (slot.is_array() && v.is_array());
      if (!ok)
        throw UsageError("config: wrong type for '" + path + "' (expected " +
                         std::string(slot.type_name()) + ")");
      slot = v;
    }
  }
}

double get_num(const ordered_json& j, const char* key) { return j.at(key).get<double>(); }

int get_int(const ordered_json& j, const char* key) {
  double v = j.at(key).get<double>();
  int i = static_cast<int>(v);
  if (static_cast<double>(i) != v)
    throw UsageError(std::string("config: '") + key + "' must be an integer");
  return i;
}

StageConfig get_stage(const ordered_json& j, bool with_patience) {
  StageConfig s;
  s.lr = get_num(j, "lr");
  s.epochs = get_int(j, "epochs");
  s.batch = get_int(j, "batch");
  s.patience = with_patience ? get_int(j, "patience") : 0;
  if (s.lr <= 0.0) throw UsageError("config: lr must be > 0");
  if (s.epochs < 1 || s.batch < 1)
    throw UsageError("config: epochs and batch must be >= 1");
  if (s.patience < 0) throw UsageError("config: patience must be >= 0");
  return s;
}

}  // namespace

RunConfig config_from_json(const ordered_json& doc) {
  ordered_json resolved = default_config_json();
  merge_checked(resolved, doc, "");

  RunConfig c;
  c.resolved = resolved;
  c.seed = resolved.at("seed").get<uint64_t>();
  c.dataset = resolved.at("dataset").get<std::string>();
  c.output_dir = resolved.at("output_dir").get<std::string>();
  c.checkpoint = resolved.at("checkpoint").get<std::string>();
  c.mode = resolved.at("mode").get<std::string>();
  if (c.mode != "joint" && c.mode != "multistage")
    throw UsageError("config: mode must be 'joint' or 'multistage'");

  const ordered_json& m = resolved.at("model");
  c.topics = get_int(m, "topics");
  c.code_dim = get_int(m, "code_dim");
  c.hidden = get_int(m, "hidden");
  c.lambda = get_num(m, "lambda");
  c.gamma = get_num(m, "gamma");
  c.min_count = get_int(m, "min_count");
  c.stopwords_path = m.at("stopwords_path").get<std::string>();
  c.bow_concat_pairs = m.at("bow_concat_pairs").get<bool>();
  c.max_len = get_int(m, "max_len");
  c.vq_ffn_mult = get_int(m, "vq_ffn_mult");
  c.layers = get_int(m, "layers");
  c.heads = get_int(m, "heads");
  c.semantics_layers.clear();
  for (const auto& v : m.at("semantics_layers")) {
    if (!v.is_number()) throw UsageError("config: semantics_layers must hold integers");
    c.semantics_layers.push_back(v.get<int>());
  }
  c.ffn_mult = get_int(m, "ffn_mult");
  c.head_hidden = get_int(m, "head_hidden");
  c.clip_norm = get_num(m, "clip_norm");

  if (c.topics < 1 || c.code_dim < 1 || c.hidden < 1)
    throw UsageError("config: topics, code_dim, hidden must be >= 1");
  if (c.lambda < 0.0) throw UsageError("config: lambda must be >= 0");
  if (c.gamma < 0.0) throw UsageError("config: gamma must be >= 0");
  if (c.min_count < 1) throw UsageError("config: min_count must be >= 1");
  if (c.max_len < 4) throw UsageError("config: max_len must be >= 4");
  if (c.layers < 1 || c.heads < 1 || c.vq_ffn_mult < 1 || c.ffn_mult < 1 ||
      c.head_hidden < 1)
    throw UsageError("config: layer/head/ffn sizes must be >= 1");
  if (c.clip_norm <= 0.0) throw UsageError("config: clip_norm must be > 0");

  c.ntm = get_stage(resolved.at("ntm"), false);
  c.joint = get_stage(resolved.at("joint"), false);
  c.sts = get_stage(resolved.at("sts"), true);

  const ordered_json& a = resolved.at("ablations");
  c.ablations.no_topic_model = a.at("no_topic_model").get<bool>();
  c.ablations.no_topic_encoder = a.at("no_topic_encoder").get<bool>();
  c.ablations.no_topical_codebook = a.at("no_topical_codebook").get<bool>();
  c.ablations.no_semantic_attention = a.at("no_semantic_attention").get<bool>();
  c.ablations.no_output_enhanced = a.at("no_output_enhanced").get<bool>();

  c.resolved_semantics_layers();  // validate eagerly
  return c;
}

RunConfig default_config() { return config_from_json(ordered_json::object()); }

std::vector<int> RunConfig::resolved_semantics_layers() const {
  std::vector<int> out;
  for (int v : semantics_layers) {
    int idx = v == -1 ? layers - 1 : v;
    if (idx < 0 || idx >= layers)
      throw UsageError("config: semantics_layers entry " + std::to_string(v) +
                       " outside [0, layers)");
    if (std::find(out.begin(), out.end(), idx) == out.end()) out.push_back(idx);
  }
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

ordered_json parse_override_value(const std::string& raw) {
  // numbers, booleans, arrays, objects parse as JSON; anything else is a string
  ordered_json v = ordered_json::parse(raw, nullptr, false);
  if (!v.is_discarded()) return v;
  return ordered_json(raw);
}

void apply_override(ordered_json& doc, const std::string& spec) {
  size_t eq = spec.find('=');
  if (eq == std::string::npos || eq == 0)
    throw UsageError("override must look like key.path=value: '" + spec + "'");
  std::string path = spec.substr(0, eq);
  ordered_json value = parse_override_value(spec.substr(eq + 1));
  ordered_json* slot = &doc;
  size_t start = 0;
  while (true) {
    size_t dot = path.find('.', start);
    std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty()) throw UsageError("override has an empty key segment: '" + spec + "'");
    if (dot == std::string::npos) {
      (*slot)[key] = value;
      break;
    }
    slot = &(*slot)[key];
    start = dot + 1;
  }
}

}  // namespace

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  ordered_json doc = ordered_json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file " + path);
    try {
      doc = ordered_json::parse(in);
    } catch (const ordered_json::parse_error& e) {
      throw UsageError("config " + path + ": " + e.what());
    }
  }
  for (const std::string& o : overrides) apply_override(doc, o);
  return config_from_json(doc);
}

uint64_t RunConfig::hash() const {
  std::string s = resolved.dump();
  uint64_t h = 1469598103934665603ULL;  // FNV-1a 64
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string RunConfig::hash_hex() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash()));
  return buf;
}

void echo_config(const RunConfig& cfg, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir + "/config.json", std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + dir + "/config.json");
  out << cfg.resolved.dump(2) << '\n';
}

}  // namespace topiq
