#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "config.hpp"

using namespace topiq;
namespace fs = std::filesystem;

TEST_CASE("defaults resolve and validate") {
  RunConfig c = default_config();
  CHECK(c.topics == 16);
  CHECK(c.code_dim == 64);
  CHECK(c.lambda == doctest::Approx(1e-4));
  CHECK(c.gamma == doctest::Approx(1.0));
  CHECK(c.mode == "joint");
  CHECK(c.ntm.epochs == 100);
  CHECK(c.joint.epochs == 20);
  CHECK(c.sts.epochs == 10);
  CHECK(c.sts.patience == 3);
  CHECK(c.resolved_semantics_layers() == std::vector<int>{1});  // -1 -> last
}

TEST_CASE("unknown keys and wrong types are rejected") {
  CHECK_THROWS_AS(config_from_json({{"topics", 4}}), UsageError);  // wrong level
  CHECK_THROWS_AS(config_from_json({{"model", {{"topicz", 4}}}}), UsageError);
  CHECK_THROWS_AS(config_from_json({{"model", {{"topics", "four"}}}}), UsageError);
  CHECK_THROWS_AS(config_from_json({{"mode", "both"}}), UsageError);
  CHECK_THROWS_AS(config_from_json({{"model", {{"gamma", -1.0}}}}), UsageError);
  CHECK_THROWS_AS(config_from_json({{"model", {{"lambda", -0.5}}}}), UsageError);
  CHECK_THROWS_AS(config_from_json({{"model", {{"semantics_layers", {5}}}}}), UsageError);
  CHECK_THROWS_AS(config_from_json({{"sts", {{"lr", 0.0}}}}), UsageError);
}

TEST_CASE("dotted overrides") {
  RunConfig c = load_config("", {"model.topics=32", "sts.lr=0.01", "mode=multistage",
                                 "ablations.no_semantic_attention=true",
                                 "model.semantics_layers=[0,1]", "dataset=/tmp/x"});
  CHECK(c.topics == 32);
  CHECK(c.sts.lr == doctest::Approx(0.01));
  CHECK(c.mode == "multistage");
  CHECK(c.ablations.no_semantic_attention);
  CHECK(c.resolved_semantics_layers() == std::vector<int>{0, 1});
  CHECK(c.dataset == "/tmp/x");

  CHECK_THROWS_AS(load_config("", {"model.nope=1"}), UsageError);
  CHECK_THROWS_AS(load_config("", {"noequals"}), UsageError);
}

TEST_CASE("echoed config reloads byte-identically") {
  fs::path dir = fs::temp_directory_path() / "topiq_cfg_echo";
  fs::remove_all(dir);
  RunConfig c = load_config("", {"model.topics=8", "seed=123"});
  echo_config(c, dir.string());
  RunConfig c2 = load_config((dir / "config.json").string(), {});
  CHECK(c.resolved.dump() == c2.resolved.dump());
  CHECK(c.hash_hex() == c2.hash_hex());
  CHECK(c2.topics == 8);
  CHECK(c2.seed == 123);

  // different config, different hash
  RunConfig c3 = load_config("", {"model.topics=9", "seed=123"});
  CHECK(c3.hash_hex() != c.hash_hex());
}

TEST_CASE("config file parse errors are usage errors") {
  fs::path p = fs::temp_directory_path() / "topiq_bad.json";
  std::ofstream(p) << "{ not json";
  CHECK_THROWS_AS(load_config(p.string(), {}), UsageError);
  CHECK_THROWS_AS(load_config("/nonexistent/config.json", {}), UsageError);
}
