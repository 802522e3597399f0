#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "trainer.hpp"

using namespace topiq;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& tag) {
  static int counter = 0;
  std::string d = "/tmp/topiq_trainer_" + std::to_string(::getpid()) + "_" + tag + "_" +
                  std::to_string(counter++);
  fs::remove_all(d);
  return d;
}

// One small, balanced binary dataset shared by most cases.
const std::string& shared_dataset() {
  static std::string dir = [] {
    std::string d = fresh_dir("ds");
    write_synth(synth_generate(3, 6, 60, 123), d);
    return d;
  }();
  return dir;
}

RunConfig small_cfg(const std::string& outdir,
                    const std::vector<std::string>& extra = {}) {
  std::vector<std::string> ov = {
      "dataset=" + shared_dataset(),
      "output_dir=" + outdir,
      "seed=11",
      "model.topics=4",
      "model.code_dim=8",
      "model.hidden=16",
      "model.heads=2",
      "model.layers=1",
      "model.max_len=12",
      "model.min_count=1",
      "model.head_hidden=8",
      "ntm.epochs=3",
      "ntm.batch=16",
      "ntm.lr=0.01",
      "joint.epochs=2",
      "joint.batch=8",
      "joint.lr=0.005",
      "sts.epochs=4",
      "sts.batch=8",
      "sts.lr=0.005",
      "sts.patience=2",
  };
  ov.insert(ov.end(), extra.begin(), extra.end());
  return load_config("", ov);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape && a.values == b.values;
}

std::vector<std::string> split_lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

int count_fields(const std::string& line, char sep) {
  return static_cast<int>(std::count(line.begin(), line.end(), sep)) + 1;
}

}  // namespace

TEST_CASE("topic stage writes artifacts and selects the best dev epoch") {
  std::string dir = fresh_dir("ntm");
  RunConfig cfg = small_cfg(dir);
  StageResult r = run_train_ntm(cfg);

  CHECK(fs::exists(dir + "/ntm.tqt"));
  CHECK(fs::exists(dir + "/ntm_metrics.json"));
  CHECK(fs::exists(dir + "/config.json"));
  CHECK(r.report["stage"] == "ntm");
  CHECK(r.report["config_hash"] == cfg.hash_hex());

  auto train_curve = r.report["curves"]["train_loss"].get<std::vector<double>>();
  auto ppl_curve = r.report["curves"]["dev_perplexity"].get<std::vector<double>>();
  REQUIRE(train_curve.size() == 3);
  REQUIRE(ppl_curve.size() == 3);
  CHECK(train_curve.back() < train_curve.front());

  double best = r.report["metrics"]["dev_perplexity"].get<double>();
  int best_epoch = r.report["metrics"]["best_epoch"].get<int>();
  CHECK(best == *std::min_element(ppl_curve.begin(), ppl_curve.end()));
  CHECK(ppl_curve[best_epoch] == best);
  for (int e = 0; e < best_epoch; ++e) CHECK(ppl_curve[e] > best);

  TensorMap ckpt = load_tensors(dir + "/ntm.tqt");
  for (const auto& [name, t] : ckpt) CHECK(name.rfind("ntm.", 0) == 0);
  CHECK(ckpt.count("ntm.phi") == 1);
}

TEST_CASE("stage prerequisites are reported by stage name") {
  std::string dir = fresh_dir("prereq");
  RunConfig cfg = small_cfg(dir);
  CHECK_THROWS_WITH_AS(run_train_joint(cfg), doctest::Contains("ntm"), UsageError);
  CHECK_THROWS_WITH_AS(run_train_sts(cfg), doctest::Contains("joint"), UsageError);
  CHECK_THROWS_WITH_AS(run_eval(cfg), doctest::Contains("sts"), UsageError);
  CHECK_THROWS_AS(run_dump_attention(cfg, "s000000"), UsageError);

  RunConfig bad = small_cfg(dir, {"checkpoint=/nonexistent/x.tqt"});
  CHECK_THROWS_AS(run_train_joint(bad), DataError);
}

TEST_CASE("combined stage trains topic and quantizer parameters with a shared codebook") {
  std::string dir = fresh_dir("joint");
  RunConfig cfg = small_cfg(dir);
  run_train_ntm(cfg);
  StageResult r = run_train_joint(cfg);

  TensorMap ntm = load_tensors(dir + "/ntm.tqt");
  TensorMap joint = load_tensors(dir + "/joint.tqt");
  for (const auto& [name, t] : ntm) REQUIRE(joint.count(name) == 1);
  CHECK(joint.count("vq.tok_emb") == 1);
  CHECK(joint.count("vq.in_proj.w") == 1);
  CHECK(joint.count("vq.codebook") == 0);  // default: quantize against the topic embeddings
  CHECK_FALSE(bitwise_equal(ntm.at("ntm.phi"), joint.at("ntm.phi")));

  double util = r.report["metrics"]["utilization"].get<double>();
  CHECK(util > 0.0);
  CHECK(util <= 1.0);
  CHECK(r.report["metrics"]["usage_entropy"].get<double>() >= 0.0);
  CHECK(r.report["curves"]["train_loss"].size() == 2);
  CHECK(r.report["curves"]["usage_entropy"].size() == 2);
  CHECK(r.report["metrics"].contains("dev_perplexity"));
}

TEST_CASE("multistage freezes every topic parameter bitwise") {
  std::string dir = fresh_dir("multi");
  RunConfig cfg = small_cfg(dir, {"mode=multistage", "joint.epochs=3"});
  run_train_ntm(cfg);
  run_train_joint(cfg);

  TensorMap ntm = load_tensors(dir + "/ntm.tqt");
  TensorMap joint = load_tensors(dir + "/joint.tqt");
  for (const auto& [name, t] : ntm) {
    REQUIRE(joint.count(name) == 1);
    CHECK_MESSAGE(bitwise_equal(t, joint.at(name)), name);
  }
  CHECK(joint.count("vq.tok_emb") == 1);
}

TEST_CASE("zero trade-off with topical rows dropped trains only the quantizer side") {
  std::string dir = fresh_dir("gamma0");
  RunConfig cfg = small_cfg(dir, {"model.gamma=0.0", "ablations.no_topic_encoder=true"});
  run_train_ntm(cfg);
  run_train_joint(cfg);

  TensorMap ntm = load_tensors(dir + "/ntm.tqt");
  TensorMap joint = load_tensors(dir + "/joint.tqt");
  // Nothing reaches the topic encoder or word embeddings: the objective
  // weights their loss by zero and the topical input rows are gone.
  for (const char* frozen : {"ntm.enc1.w", "ntm.enc1.b", "ntm.enc2.w", "ntm.mu.w",
                             "ntm.logvar.w", "ntm.omega"})
    CHECK_MESSAGE(bitwise_equal(ntm.at(frozen), joint.at(frozen)), frozen);
  // ...but the topic embeddings still train: they are the codebook.
  CHECK_FALSE(bitwise_equal(ntm.at("ntm.phi"), joint.at("ntm.phi")));
  CHECK(joint.count("vq.in_proj.w") == 0);
}

TEST_CASE("zero trade-off with topical rows present still trains the topic encoder") {
  std::string dir = fresh_dir("gamma0t");
  RunConfig cfg = small_cfg(dir, {"model.gamma=0.0"});
  run_train_ntm(cfg);
  run_train_joint(cfg);
  TensorMap ntm = load_tensors(dir + "/ntm.tqt");
  TensorMap joint = load_tensors(dir + "/joint.tqt");
  CHECK_FALSE(bitwise_equal(ntm.at("ntm.mu.w"), joint.at("ntm.mu.w")));
}

TEST_CASE("pair stage selects the best dev epoch and reports test metrics") {
  std::string dir = fresh_dir("sts");
  RunConfig cfg = small_cfg(dir);
  run_train_ntm(cfg);
  run_train_joint(cfg);
  StageResult r = run_train_sts(cfg);

  auto dev_curve = r.report["curves"]["dev_metric"].get<std::vector<double>>();
  int epochs_run = r.report["metrics"]["epochs_run"].get<int>();
  int best_epoch = r.report["metrics"]["best_epoch"].get<int>();
  double best = r.report["metrics"]["dev_metric"].get<double>();

  REQUIRE(static_cast<int>(dev_curve.size()) == epochs_run);
  CHECK(epochs_run <= 4);
  CHECK(best == *std::max_element(dev_curve.begin(), dev_curve.end()));
  CHECK(dev_curve[best_epoch] == best);
  for (int e = 0; e < best_epoch; ++e) CHECK(dev_curve[e] < best);
  if (epochs_run < 4) CHECK(epochs_run == best_epoch + 1 + 2);  // patience 2

  CHECK(r.report["metrics"].contains("test_accuracy"));
  CHECK(r.report["metrics"]["test_f1"].is_number());

  TensorMap joint = load_tensors(dir + "/joint.tqt");
  TensorMap sts = load_tensors(dir + "/sts.tqt");
  for (const auto& [name, t] : joint) REQUIRE(sts.count(name) == 1);
  CHECK(sts.count("attn.tok_emb") == 1);

  // Frozen upstream parameters pass through the pair stage untouched.
  for (const auto& [name, t] : joint) CHECK_MESSAGE(bitwise_equal(t, sts.at(name)), name);
}

TEST_CASE("frozen evaluation reproduces the fine-tune test metrics") {
  std::string dir = fresh_dir("eval");
  RunConfig cfg = small_cfg(dir);
  run_train_ntm(cfg);
  run_train_joint(cfg);
  StageResult sts = run_train_sts(cfg);
  StageResult ev = run_eval(cfg);

  CHECK(ev.report["stage"] == "eval");
  REQUIRE(ev.report["metrics"]["test"].is_object());
  CHECK(ev.report["metrics"]["test"]["accuracy"].get<double>() ==
        sts.report["metrics"]["test_accuracy"].get<double>());
  CHECK(ev.report["metrics"]["test"]["f1"].get<double>() ==
        sts.report["metrics"]["test_f1"].get<double>());
  CHECK(ev.report["metrics"]["train"].is_object());
  CHECK(ev.report["metrics"]["dev"].is_object());
  CHECK(fs::exists(dir + "/eval_metrics.json"));
}

TEST_CASE("reruns into a clean directory are byte-identical") {
  std::string dir = fresh_dir("det");
  RunConfig cfg = small_cfg(dir, {"sts.epochs=2"});
  run_train_ntm(cfg);
  run_train_joint(cfg);
  run_train_sts(cfg);

  const std::vector<std::string> files = {
      "ntm.tqt",  "joint.tqt",         "sts.tqt",           "config.json",
      "ntm_metrics.json", "joint_metrics.json", "sts_metrics.json",
  };
  std::vector<std::string> first;
  for (const auto& f : files) first.push_back(slurp(dir + "/" + f));

  fs::remove_all(dir);
  run_train_ntm(cfg);
  run_train_joint(cfg);
  run_train_sts(cfg);
  for (size_t i = 0; i < files.size(); ++i)
    CHECK_MESSAGE(first[i] == slurp(dir + "/" + files[i]), files[i]);
}

TEST_CASE("quantizer-only ablation runs without a topic stage") {
  std::string dir = fresh_dir("notm");
  RunConfig cfg = small_cfg(dir, {"ablations.no_topic_model=true"});
  CHECK_THROWS_AS(run_train_ntm(cfg), UsageError);

  run_train_joint(cfg);  // no ntm.tqt needed
  TensorMap joint = load_tensors(dir + "/joint.tqt");
  CHECK(joint.count("vq.codebook") == 1);
  CHECK(joint.count("vq.in_proj.w") == 0);
  for (const auto& [name, t] : joint) CHECK(name.rfind("ntm.", 0) != 0);

  run_train_sts(cfg);
  StageResult ev = run_eval(cfg);
  CHECK(ev.report["metrics"]["test"]["accuracy"].is_number());

  CHECK_THROWS_AS(run_inspect_topics(cfg), UsageError);
  std::string cb = run_inspect_codebook(cfg);
  CHECK(static_cast<int>(split_lines(cb).size()) == cfg.topics);
}

TEST_CASE("inspections emit one line per topic and per code") {
  std::string dir = fresh_dir("inspect");
  RunConfig cfg = small_cfg(dir);
  run_train_ntm(cfg);
  run_train_joint(cfg);
  run_train_sts(cfg);

  std::string topics = run_inspect_topics(cfg);
  auto tl = split_lines(topics);
  REQUIRE(static_cast<int>(tl.size()) == cfg.topics);
  for (const auto& line : tl) {
    CHECK(count_fields(line, '\t') == 2);
    std::string words = line.substr(line.find('\t') + 1);
    CHECK(count_fields(words, ',') == 10);
  }
  CHECK(fs::exists(dir + "/topics.tsv"));

  std::string cb = run_inspect_codebook(cfg);
  auto cl = split_lines(cb);
  REQUIRE(static_cast<int>(cl.size()) == cfg.topics);
  int64_t total_usage = 0;
  for (const auto& line : cl) {
    CHECK(count_fields(line, '\t') == 3);
    std::istringstream in(line);
    int code;
    int64_t usage;
    in >> code >> usage;
    total_usage += usage;
  }
  CHECK(total_usage > 0);
  CHECK(fs::exists(dir + "/codebook.tsv"));

  Dataset ds = load_dataset(shared_dataset());
  auto files = run_dump_attention(cfg, ds.train[0].id);
  REQUIRE(static_cast<int>(files.size()) == cfg.layers * cfg.heads);
  auto lines = split_lines(slurp(files[0]));
  REQUIRE(static_cast<int>(lines.size()) == cfg.max_len + 1);
  CHECK(count_fields(lines[0], ',') == cfg.max_len);
  CHECK(count_fields(lines[1], ',') == cfg.max_len);

  CHECK_THROWS_AS(run_dump_attention(cfg, "no-such-id"), DataError);
}
