#pragma once

#include <vector>

#include "corpus.hpp"
#include "params.hpp"
#include "transformer.hpp"

namespace topiq {

// Pair-encoder geometry and feature switches. Width is heads * E with E the
// per-head size, matching the quantized-code width so the extra score term
// and the output enhancement line up without extra projections.
struct AttnDims {
  int V_seq = 0;
  int E = 64;
  int heads = 4;
  int layers = 2;
  int L = 0;          // padded pair length
  int ffn_mult = 1;   // pair-block FFN hidden = ffn_mult * width
  int head_hidden = 64;
  std::vector<int> semantics_layers;  // resolved, ascending, unique
  bool semantic_attention = true;     // false: never add the extra score term
  bool output_enhanced = true;        // false: plain CLS-row head

  int width() const { return heads * E; }
  bool uses_fuse() const { return semantic_attention && !semantics_layers.empty(); }
};

void attn_init(ParamStore& store, const AttnDims& d, Rng& rng);

// Geometry recovered from a parameter snapshot. E (the code width) must be
// supplied because width factors as heads * E.
AttnDims attn_dims_from(const ParamStore& store, int E);

// Quantized rows of the two sentences placed at their positions inside the
// pair layout; CLS/SEP/PAD rows are zero. zq_a/zq_b: (a_len x E)/(b_len x E).
Tensor attn_align_quantized(const TokenSequence& seq, const Tensor& zq_a,
                            const Tensor& zq_b, int E);

struct PairBatchOut {
  VarId h_final = kNoVar;  // [B*L, width], after the final norm
  VarId logits = kNoVar;   // [B, 1] raw head outputs
  std::vector<RowGroup> groups;
};

// Full pair-encoder forward: embeddings, `layers` pre-norm blocks with the
// extra score term at the configured layers, final norm, CLS head. z_raw is
// the stacked [B*L, E] aligned quantized input (empty only if unused).
// collect, when given, is resized to `layers` and receives every attention
// map.
PairBatchOut attn_forward(Tape& tape, TapeBinding& bind, const AttnDims& d,
                          const std::vector<TokenSequence>& pairs,
                          const Tensor& z_raw,
                          std::vector<AttnCollector>* collect = nullptr);

// Mean losses over the batch; labels are 0/1 in binary mode and pre-scaled
// to [0,1] in regression mode.
VarId attn_loss(Tape& tape, VarId logits, const std::vector<double>& targets,
                bool binary);

// Reported prediction: sigmoid probability in binary mode, 5x the raw score
// clamped to [0,5] in regression mode.
double attn_report_score(double raw, bool binary);

}  // namespace topiq
