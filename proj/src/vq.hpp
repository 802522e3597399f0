#pragma once

#include <string>
#include <utility>
#include <vector>

#include "corpus.hpp"
#include "params.hpp"
#include "transformer.hpp"

namespace topiq {

struct VqDims {
  int V_seq = 0;
  int E = 0;
  int K = 0;        // codebook size = topic count
  int max_len = 0;  // positional table size
  int ffn_mult = 4;
  bool with_topics = true;  // false drops the topical-embedding input path
};

constexpr int kVqHeads = 1;  // single-layer encoder/decoder, one head

// Registers vq.* parameters. own_codebook=true adds an independent random
// vq.codebook (the random-codebook ablation); otherwise quantization runs
// against ntm.phi, the shared storage.
void vq_init(ParamStore& store, const VqDims& dims, Rng& rng, bool own_codebook);
std::string vq_codebook_name(const ParamStore& store);
VqDims vq_dims_from(const ParamStore& store, int K);

// A batch of true-length sentences stacked into one row block.
struct VqBatch {
  std::vector<RowGroup> groups;
  std::vector<int> all_ids;   // sequence-vocab ids, concatenated
  std::vector<int> all_pos;   // 0..m-1 per sentence
  std::vector<int> ntm_ids;   // NTM-vocab id per token, -1 = not in NTM vocab
  int64_t rows = 0;
};

VqBatch make_vq_batch(const std::vector<std::vector<int>>& ids,
                      const std::vector<std::vector<int>>& ntm_ids);

// x_t rows for the whole batch: theta(sentence) ⊙ beta[:, w] per token,
// exactly uniform 1/K rows for NTM-OOV tokens. theta: B x K with row s for
// sentence s; beta: K x V.
VarId vq_topical_embedding(Tape& tape, const VqBatch& batch, VarId theta, VarId beta);

// Nearest codebook row per input row, L2, ties to the lowest index.
std::vector<int> vq_nearest_codes(const Tensor& z_e, const Tensor& codebook);

struct VqEncoded {
  VarId z_e = kNoVar;   // rows x E
  VarId z_q = kNoVar;   // codebook rows gathered by codes
  std::vector<int> codes;
};

// Encoder + quantization. theta/beta are kNoVar when with_topics is false.
VqEncoded vq_encode_quantize(Tape& tape, TapeBinding& bind, const VqBatch& batch,
                             VarId theta, VarId beta, bool with_topics,
                             std::vector<double>* usage);

struct VqLossOut {
  VarId logits = kNoVar;  // rows x V_seq
  VarId recon_sum = kNoVar;
  VarId codebook_term = kNoVar;
  VarId commitment_term = kNoVar;
  VarId total = kNoVar;  // recon + codebook + lambda * commitment
};

// Straight-through decode and the three-term objective.
VqLossOut vq_loss_terms(Tape& tape, TapeBinding& bind, const VqBatch& batch,
                        const VqEncoded& enc, double lambda);

// Frozen-parameter quantized rows for downstream stages: values of z_q plus
// codes, batched. theta: B x K or empty when with_topics is false.
std::pair<Tensor, std::vector<int>> vq_quantized_rows(ParamStore& store,
                                                      const VqBatch& batch,
                                                      const Tensor& theta,
                                                      bool with_topics);

// code -> (usage, words ranked by assignment count); each observed word lands
// in the cluster of its modal code (lowest code on ties).
struct WordClusters {
  std::vector<int64_t> usage;
  std::vector<std::vector<std::pair<std::string, int64_t>>> words;
};

WordClusters vq_word_clusters(ParamStore& store, const std::vector<std::string>& texts,
                              const Vocabulary& seq_vocab, const Vocabulary& ntm_vocab,
                              int max_len, bool with_topics);

}  // namespace topiq
