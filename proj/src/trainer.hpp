#pragma once

#include <string>
#include <vector>

#include "attn.hpp"
#include "config.hpp"
#include "metrics.hpp"
#include "ntm.hpp"
#include "vq.hpp"

namespace topiq {

struct StageResult {
  ordered_json report;          // the document written to <stage>_metrics.json
  std::string checkpoint_path;  // empty for eval
  std::string metrics_path;
};

// Topic-model pretraining with dev-perplexity model selection. Writes
// ntm.tqt + ntm_metrics.json into output_dir.
StageResult run_train_ntm(const RunConfig& cfg);

// Combined topic+quantizer training (mode "joint") or quantizer-only training
// over frozen topic parameters (mode "multistage"). Requires the ntm stage
// unless the no_topic_model ablation is on. Writes joint.tqt +
// joint_metrics.json.
StageResult run_train_joint(const RunConfig& cfg);

// Pair-similarity fine-tuning over frozen upstream parameters with dev-metric
// early stopping. Requires the joint stage. Writes sts.tqt + sts_metrics.json.
StageResult run_train_sts(const RunConfig& cfg);

// Frozen evaluation of a fine-tuned checkpoint over all three dataset splits.
// Writes eval_metrics.json.
StageResult run_eval(const RunConfig& cfg);

// Topic id -> top-10 words by row mass, TSV. Writes topics.tsv; returns the
// file content.
std::string run_inspect_topics(const RunConfig& cfg);

// code_id \t usage \t word1,...,word10 over the dataset's training sentences,
// one line per code. Writes codebook.tsv; returns the file content.
std::string run_inspect_codebook(const RunConfig& cfg);

// One CSV per layer/head for the requested pair: a header row of pair tokens,
// then the L x L attention matrix. Returns the written file paths.
std::vector<std::string> run_dump_attention(const RunConfig& cfg,
                                            const std::string& pair_id);

}  // namespace topiq
