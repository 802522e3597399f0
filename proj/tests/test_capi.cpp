#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "corpus.hpp"
#include "doctest.h"
#include "topiq.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fresh_dir(const std::string& tag) {
  static int counter = 0;
  std::string d = "/tmp/topiq_capi_" + std::to_string(::getpid()) + "_" + tag + "_" +
                  std::to_string(counter++);
  fs::remove_all(d);
  return d;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Overrides shared by every stage call in this file.
std::vector<std::string> small_overrides(const std::string& dataset,
                                         const std::string& outdir) {
  return {
      "dataset=" + dataset,   "output_dir=" + outdir, "model.topics=4",
      "model.code_dim=8",     "model.hidden=16",      "model.heads=2",
      "model.layers=1",       "model.max_len=12",     "model.min_count=1",
      "model.head_hidden=8",  "ntm.epochs=2",         "ntm.batch=16",
      "joint.epochs=2",       "joint.batch=8",        "sts.epochs=2",
      "sts.batch=8",
  };
}

struct OverrideView {
  std::vector<const char*> raw;
  explicit OverrideView(const std::vector<std::string>& ov) {
    for (const auto& s : ov) raw.push_back(s.c_str());
  }
  const char* const* data() const { return raw.empty() ? nullptr : raw.data(); }
  size_t size() const { return raw.size(); }
};

std::string take(char* s) {
  REQUIRE(s != nullptr);
  std::string out = s;
  topiq_string_free(s);
  return out;
}

// One fitted pipeline shared by the handle/inspection cases.
struct Fitted {
  std::string ds = fresh_dir("ds");
  std::string run = fresh_dir("run");
  std::vector<std::string> ov;

  Fitted() {
    REQUIRE(topiq_synth(3, 6, 60, 21, ds.c_str()) == TOPIQ_OK);
    ov = small_overrides(ds, run);
    OverrideView v(ov);
    char* m = nullptr;
    REQUIRE(topiq_train_ntm("", v.data(), v.size(), &m) == TOPIQ_OK);
    topiq_string_free(m);
    REQUIRE(topiq_train_joint("", v.data(), v.size(), nullptr) == TOPIQ_OK);
    REQUIRE(topiq_train_sts("", v.data(), v.size(), nullptr) == TOPIQ_OK);
  }
};

const Fitted& fitted() {
  static Fitted f;
  return f;
}

}  // namespace

TEST_CASE("default config document is valid JSON with the documented keys") {
  std::string doc = take(topiq_default_config());
  json j = json::parse(doc);
  CHECK(j["seed"] == 7);
  CHECK(j["mode"] == "joint");
  CHECK(j["model"]["topics"] == 16);
  CHECK(j["model"]["code_dim"] == 64);
  CHECK(j["ntm"]["epochs"] == 100);
  CHECK(j["sts"]["patience"] == 3);
  CHECK(j["ablations"]["no_semantic_attention"] == false);
  topiq_string_free(nullptr);  // NULL is a documented no-op
}

TEST_CASE("synthetic corpus: split arithmetic, sidecar consistency, determinism") {
  std::string a = fresh_dir("syntha");
  std::string b = fresh_dir("synthb");
  REQUIRE(topiq_synth(4, 12, 1000, 7, a.c_str()) == TOPIQ_OK);
  REQUIRE(topiq_synth(4, 12, 1000, 7, b.c_str()) == TOPIQ_OK);

  topiq::Dataset ds = topiq::load_dataset(a);
  CHECK(ds.train.size() == 800);
  CHECK(ds.dev.size() == 100);
  CHECK(ds.test.size() == 100);

  for (const char* f : {"train.tsv", "dev.tsv", "test.tsv", "topics.tsv"})
    CHECK(slurp(a + "/" + f) == slurp(b + "/" + f));

  // Sidecar cross-check: label == (topic_a == topic_b) for every row.
  std::map<std::string, double> label_by_id;
  for (const auto* split : {&ds.train, &ds.dev, &ds.test})
    for (const auto& p : *split) label_by_id[p.id] = p.label;
  std::ifstream side(a + "/topics.tsv");
  std::string line;
  std::getline(side, line);  // header: id  split  topic_a  topic_b
  int checked = 0;
  while (std::getline(side, line)) {
    std::istringstream in(line);
    std::string id, split;
    int ta, tb;
    in >> id >> split >> ta >> tb;
    REQUIRE(label_by_id.count(id) == 1);
    CHECK(label_by_id[id] == (ta == tb ? 1.0 : 0.0));
    ++checked;
  }
  CHECK(checked == 1000);

  CHECK(topiq_synth(1, 12, 10, 7, fresh_dir("badsynth").c_str()) == TOPIQ_USAGE_ERROR);
  CHECK(std::string(topiq_last_error()).find("n_topics") != std::string::npos);
}

TEST_CASE("pipeline stages run through the C interface and report metrics") {
  const Fitted& f = fitted();
  OverrideView v(f.ov);

  char* m = nullptr;
  REQUIRE(topiq_eval("", v.data(), v.size(), &m) == TOPIQ_OK);
  json ev = json::parse(take(m));
  CHECK(ev["stage"] == "eval");
  CHECK(ev["metrics"]["test"]["accuracy"].is_number());
  CHECK(fs::exists(f.run + "/sts_metrics.json"));
  CHECK(fs::exists(f.run + "/eval_metrics.json"));
}

TEST_CASE("inspections and attention dumps through the C interface") {
  const Fitted& f = fitted();
  OverrideView v(f.ov);

  char* tsv = nullptr;
  REQUIRE(topiq_inspect_topics("", v.data(), v.size(), &tsv) == TOPIQ_OK);
  std::string topics = take(tsv);
  CHECK(std::count(topics.begin(), topics.end(), '\n') == 4);

  tsv = nullptr;
  REQUIRE(topiq_inspect_codebook("", v.data(), v.size(), &tsv) == TOPIQ_OK);
  std::string cb = take(tsv);
  CHECK(std::count(cb.begin(), cb.end(), '\n') == 4);

  topiq::Dataset ds = topiq::load_dataset(f.ds);
  char* files = nullptr;
  REQUIRE(topiq_dump_attention("", v.data(), v.size(), ds.train[0].id.c_str(), &files) ==
          TOPIQ_OK);
  json arr = json::parse(take(files));
  REQUIRE(arr.is_array());
  CHECK(arr.size() == 2);  // layers=1, heads=2
  for (const auto& p : arr) CHECK(fs::exists(p.get<std::string>()));

  CHECK(topiq_dump_attention("", v.data(), v.size(), "nope", &files) == TOPIQ_DATA_ERROR);
  CHECK(topiq_dump_attention("", v.data(), v.size(), nullptr, &files) == TOPIQ_USAGE_ERROR);
}

TEST_CASE("status codes map the error taxonomy") {
  std::string empty_run = fresh_dir("empty");
  const Fitted& f = fitted();

  std::vector<std::string> ov = small_overrides(f.ds, empty_run);
  OverrideView v(ov);
  CHECK(topiq_train_joint("", v.data(), v.size(), nullptr) == TOPIQ_USAGE_ERROR);
  CHECK(std::string(topiq_last_error()).find("ntm") != std::string::npos);

  std::vector<std::string> bad_ds = {"dataset=/nonexistent_dir", "output_dir=" + empty_run};
  OverrideView v2(bad_ds);
  CHECK(topiq_train_ntm("", v2.data(), v2.size(), nullptr) == TOPIQ_DATA_ERROR);

  std::vector<std::string> bad_key = {"bogus=1"};
  OverrideView v3(bad_key);
  CHECK(topiq_train_ntm("", v3.data(), v3.size(), nullptr) == TOPIQ_USAGE_ERROR);

  CHECK(topiq_train_ntm("/no/such/config.json", nullptr, 0, nullptr) == TOPIQ_USAGE_ERROR);

  // Non-finite loss surfaces as the numeric code.
  std::vector<std::string> blow_up = small_overrides(f.ds, fresh_dir("blowup"));
  blow_up.push_back("ntm.lr=1e18");
  blow_up.push_back("ntm.epochs=3");
  OverrideView v4(blow_up);
  CHECK(topiq_train_ntm("", v4.data(), v4.size(), nullptr) == TOPIQ_NUMERIC_ERROR);
  CHECK(topiq_last_error()[0] != '\0');
}

TEST_CASE("model handles expose checkpoint parameters") {
  const Fitted& f = fitted();

  topiq_model* m = nullptr;
  REQUIRE(topiq_model_load((f.run + "/sts.tqt").c_str(), &m) == TOPIQ_OK);
  REQUIRE(m != nullptr);
  json params = json::parse(take(topiq_model_params_json(m)));
  CHECK(params.contains("attn.tok_emb"));
  CHECK(params.contains("ntm.phi"));
  CHECK(params.contains("vq.tok_emb"));
  CHECK(params["ntm.phi"].size() == 2);  // rank-2 shape
  CHECK(params["ntm.phi"][0] == 4);
  CHECK(params["ntm.phi"][1] == 8);
  topiq_model_free(m);
  topiq_model_free(nullptr);  // no-op

  topiq_model* missing = nullptr;
  CHECK(topiq_model_load("/no/such.tqt", &missing) == TOPIQ_DATA_ERROR);
  CHECK(topiq_model_load(nullptr, &missing) == TOPIQ_USAGE_ERROR);
  CHECK(topiq_model_params_json(nullptr) == nullptr);
}

TEST_CASE("config echo fed back reproduces the run byte-for-byte") {
  const Fitted& f = fitted();
  std::string echo = f.run + "/config.json";
  REQUIRE(fs::exists(echo));

  std::string rerun = fresh_dir("echo");
  std::vector<std::string> redirect = {"output_dir=" + rerun};
  OverrideView v(redirect);
  char* m = nullptr;
  REQUIRE(topiq_train_ntm(echo.c_str(), v.data(), v.size(), &m) == TOPIQ_OK);
  topiq_string_free(m);
  REQUIRE(topiq_train_joint(echo.c_str(), v.data(), v.size(), nullptr) == TOPIQ_OK);
  REQUIRE(topiq_train_sts(echo.c_str(), v.data(), v.size(), nullptr) == TOPIQ_OK);

  for (const char* file : {"ntm.tqt", "joint.tqt", "sts.tqt"})
    CHECK(slurp(f.run + "/" + file) == slurp(rerun + "/" + file));
}

TEST_CASE("last error is empty after a successful call") {
  std::string doc = take(topiq_default_config());
  (void)doc;
  std::vector<std::string> bad = {"bogus=1"};
  OverrideView v(bad);
  CHECK(topiq_train_ntm("", v.data(), v.size(), nullptr) == TOPIQ_USAGE_ERROR);
  CHECK(topiq_last_error()[0] != '\0');
  CHECK(topiq_synth(3, 6, 20, 1, fresh_dir("clear").c_str()) == TOPIQ_OK);
  CHECK(topiq_last_error()[0] == '\0');
}
