// Command-line front end. Links only the public C interface so the binary
// exercises exactly what library consumers get.
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "topiq.h"

namespace {

struct StageArgs {
  std::string config;
  std::vector<std::string> sets;
  std::string dataset, output_dir, checkpoint;

  // Explicit path flags win over --set entries, which win over the file.
  std::vector<std::string> overrides() const {
    std::vector<std::string> ov = sets;
    if (!dataset.empty()) ov.push_back("dataset=" + dataset);
    if (!output_dir.empty()) ov.push_back("output_dir=" + output_dir);
    if (!checkpoint.empty()) ov.push_back("checkpoint=" + checkpoint);
    return ov;
  }
};

void add_stage_options(CLI::App* cmd, StageArgs& args) {
  cmd->add_option("--config", args.config, "JSON config file; omitted keys take defaults");
  cmd->add_option("--set", args.sets, "dotted config override key=value (repeatable)");
  cmd->add_option("--dataset", args.dataset, "dataset directory (overrides the config)");
  cmd->add_option("--output-dir", args.output_dir, "artifact directory (overrides the config)");
  cmd->add_option("--checkpoint", args.checkpoint, "checkpoint file (overrides the config)");
}

int finish(int rc, char* out) {
  if (rc != TOPIQ_OK) {
    std::fprintf(stderr, "error: %s\n", topiq_last_error());
    return rc;
  }
  if (out) {
    std::fputs(out, stdout);
    topiq_string_free(out);
  }
  return TOPIQ_OK;
}

using StageFn = int (*)(const char*, const char* const*, size_t, char**);

int run_stage(StageFn fn, const StageArgs& args) {
  std::vector<std::string> ov = args.overrides();
  std::vector<const char*> raw;
  raw.reserve(ov.size());
  for (const auto& s : ov) raw.push_back(s.c_str());
  char* out = nullptr;
  int rc = fn(args.config.c_str(), raw.empty() ? nullptr : raw.data(), raw.size(), &out);
  return finish(rc, out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"topic-enhanced quantized sentence-pair similarity"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "generate a synthetic benchmark corpus");
  int topics = 4, pairs = 1000, vocab_per_topic = 12;
  uint64_t seed = 7;
  std::string synth_out;
  synth->add_option("--topics", topics, "number of latent topics")->required();
  synth->add_option("--pairs", pairs, "total sentence pairs")->required();
  synth->add_option("--seed", seed, "generator seed (default 7)");
  synth->add_option("--vocab-per-topic", vocab_per_topic,
                    "words per topic block (default 12)");
  synth->add_option("--out", synth_out, "output directory")->required();

  StageArgs a_ntm, a_joint, a_sts, a_eval, a_topics, a_codebook, a_dump;
  auto* t_ntm = app.add_subcommand("train-ntm", "pretrain the topic model");
  add_stage_options(t_ntm, a_ntm);
  auto* t_joint = app.add_subcommand("train-joint", "train the quantizer (joint or multistage)");
  add_stage_options(t_joint, a_joint);
  auto* t_sts = app.add_subcommand("train-sts", "fine-tune the pair scorer");
  add_stage_options(t_sts, a_sts);
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on all dataset splits");
  add_stage_options(ev, a_eval);
  auto* it = app.add_subcommand("inspect-topics", "top words per topic (TSV)");
  add_stage_options(it, a_topics);
  auto* ic = app.add_subcommand("inspect-codebook", "usage and top words per code (TSV)");
  add_stage_options(ic, a_codebook);
  auto* da = app.add_subcommand("dump-attention", "attention matrices for one pair (CSV files)");
  add_stage_options(da, a_dump);
  std::string pair_id;
  da->add_option("--pair-id", pair_id, "pair id to visualize")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? TOPIQ_OK : TOPIQ_USAGE_ERROR;
  }

  if (synth->parsed())
    return finish(topiq_synth(topics, vocab_per_topic, pairs, seed, synth_out.c_str()),
                  nullptr);
  if (t_ntm->parsed()) return run_stage(&topiq_train_ntm, a_ntm);
  if (t_joint->parsed()) return run_stage(&topiq_train_joint, a_joint);
  if (t_sts->parsed()) return run_stage(&topiq_train_sts, a_sts);
  if (ev->parsed()) return run_stage(&topiq_eval, a_eval);
  if (it->parsed()) return run_stage(&topiq_inspect_topics, a_topics);
  if (ic->parsed()) return run_stage(&topiq_inspect_codebook, a_codebook);
  if (da->parsed()) {
    std::vector<std::string> ov = a_dump.overrides();
    std::vector<const char*> raw;
    for (const auto& s : ov) raw.push_back(s.c_str());
    char* out = nullptr;
    int rc = topiq_dump_attention(a_dump.config.c_str(),
                                  raw.empty() ? nullptr : raw.data(), raw.size(),
                                  pair_id.c_str(), &out);
    return finish(rc, out);
  }
  return TOPIQ_USAGE_ERROR;
}
