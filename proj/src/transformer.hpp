#pragma once

#include <string>
#include <vector>

#include "params.hpp"

namespace topiq {

// A contiguous block of rows in a stacked [N, width] activation matrix; each
// group is one sequence attending only within itself.
struct RowGroup {
  int64_t offset = 0;
  int64_t len = 0;
};

// Copies of row-softmax attention matrices: maps[group][head] is len x len.
struct AttnCollector {
  std::vector<std::vector<Tensor>> maps;
};

// Pre-norm block: x + MHA(LN(x)), then + FFN(LN(.)). Linear projections run
// batched over all rows; score/softmax/apply run per group.
void transformer_layer_init(ParamStore& store, const std::string& prefix, int width,
                            int heads, int ffn_hidden, Rng& rng);

// masks: per-group column masks (1 = attendable), nullptr or null entry = all
// attendable. extra_scores: per-group additive pre-scale score matrices
// (len x len), kNoVar entry = none; the sum is scaled by 1/sqrt(d_k) with
// d_k = width / heads.
VarId transformer_layer(Tape& tape, TapeBinding& bind, const std::string& prefix,
                        int heads, VarId x, const std::vector<RowGroup>& groups,
                        const std::vector<const std::vector<uint8_t>*>* masks,
                        const std::vector<VarId>* extra_scores,
                        AttnCollector* collect = nullptr);

}  // namespace topiq
