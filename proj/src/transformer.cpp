#include "transformer.hpp"

#include <cmath>

namespace topiq {

namespace {

Tensor linear_init(int64_t in, int64_t out, Rng& rng) {
  return Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
}

}  // namespace

void transformer_layer_init(ParamStore& store, const std::string& prefix, int width,
                            int heads, int ffn_hidden, Rng& rng) {
  if (width % heads != 0)
    throw UsageError("transformer_layer_init: width not divisible by heads");
  int dk = width / heads;
  store.add(prefix + ".ln1.g", Tensor::full({width}, 1.0));
  store.add(prefix + ".ln1.b", Tensor::zeros({width}));
  for (int h = 0; h < heads; ++h) {
    std::string hp = prefix + ".h" + std::to_string(h);
    store.add(hp + ".wq", linear_init(width, dk, rng));
    store.add(hp + ".bq", Tensor::zeros({dk}));
    store.add(hp + ".wk", linear_init(width, dk, rng));
    store.add(hp + ".bk", Tensor::zeros({dk}));
    store.add(hp + ".wv", linear_init(width, dk, rng));
    store.add(hp + ".bv", Tensor::zeros({dk}));
  }
  store.add(prefix + ".out.w", linear_init(width, width, rng));
  store.add(prefix + ".out.b", Tensor::zeros({width}));
  store.add(prefix + ".ln2.g", Tensor::full({width}, 1.0));
  store.add(prefix + ".ln2.b", Tensor::zeros({width}));
  store.add(prefix + ".ffn1.w", linear_init(width, ffn_hidden, rng));
  store.add(prefix + ".ffn1.b", Tensor::zeros({ffn_hidden}));
  store.add(prefix + ".ffn2.w", linear_init(ffn_hidden, width, rng));
  store.add(prefix + ".ffn2.b", Tensor::zeros({width}));
}

VarId transformer_layer(Tape& tape, TapeBinding& bind, const std::string& prefix,
                        int heads, VarId x, const std::vector<RowGroup>& groups,
                        const std::vector<const std::vector<uint8_t>*>* masks,
                        const std::vector<VarId>* extra_scores,
                        AttnCollector* collect) {
  const Tensor& xv = tape.val(x);
  int64_t width = xv.cols();
  if (width % heads != 0) throw UsageError("transformer_layer: width % heads != 0");
  int64_t dk = width / heads;
  double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  // groups must tile the stacked rows in order so per-head outputs rebuild by
  // plain concatenation
  int64_t cursor = 0;
  for (const RowGroup& g : groups) {
    if (g.offset != cursor || g.len <= 0)
      throw UsageError("transformer_layer: groups must partition the rows in order");
    cursor += g.len;
  }
  if (cursor != xv.rows())
    throw UsageError("transformer_layer: groups do not cover all rows");

  if (masks && static_cast<int64_t>(masks->size()) != static_cast<int64_t>(groups.size()))
    throw UsageError("transformer_layer: one mask per group required");
  if (extra_scores &&
      static_cast<int64_t>(extra_scores->size()) != static_cast<int64_t>(groups.size()))
    throw UsageError("transformer_layer: one extra score block per group required");

  if (collect) collect->maps.assign(groups.size(), {});

  VarId ln1 = tape.layer_norm(x, bind(prefix + ".ln1.g"), bind(prefix + ".ln1.b"));

  std::vector<VarId> head_cols;
  head_cols.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    std::string hp = prefix + ".h" + std::to_string(h);
    VarId q = tape.bias_add(tape.matmul(ln1, bind(hp + ".wq")), bind(hp + ".bq"));
    VarId k = tape.bias_add(tape.matmul(ln1, bind(hp + ".wk")), bind(hp + ".bk"));
    VarId v = tape.bias_add(tape.matmul(ln1, bind(hp + ".wv")), bind(hp + ".bv"));
    std::vector<VarId> outs;
    outs.reserve(groups.size());
    for (size_t g = 0; g < groups.size(); ++g) {
      const RowGroup& grp = groups[g];
      VarId qg = tape.slice_rows(q, grp.offset, grp.len);
      VarId kg = tape.slice_rows(k, grp.offset, grp.len);
      VarId vg = tape.slice_rows(v, grp.offset, grp.len);
      VarId scores = tape.matmul_nt(qg, kg);
      if (extra_scores && (*extra_scores)[g] != kNoVar)
        scores = tape.add(scores, (*extra_scores)[g]);
      scores = tape.scale(scores, inv_sqrt_dk);
      const std::vector<uint8_t>* m = masks ? (*masks)[g] : nullptr;
      VarId attn = m ? tape.masked_softmax_rows(scores, *m) : tape.softmax_rows(scores);
      if (collect) (*collect).maps[g].push_back(tape.val(attn));
      outs.push_back(tape.matmul(attn, vg));
    }
    head_cols.push_back(outs.size() == 1 ? outs[0] : tape.concat(0, outs));
  }
  VarId concat_heads = heads == 1 ? head_cols[0] : tape.concat(1, head_cols);
  VarId attn_out =
      tape.bias_add(tape.matmul(concat_heads, bind(prefix + ".out.w")), bind(prefix + ".out.b"));
  VarId x1 = tape.add(x, attn_out);

  VarId ln2 = tape.layer_norm(x1, bind(prefix + ".ln2.g"), bind(prefix + ".ln2.b"));
  VarId f1 = tape.gelu(tape.bias_add(tape.matmul(ln2, bind(prefix + ".ffn1.w")),
                                     bind(prefix + ".ffn1.b")));
  VarId f2 = tape.bias_add(tape.matmul(f1, bind(prefix + ".ffn2.w")),
                           bind(prefix + ".ffn2.b"));
  return tape.add(x1, f2);
}

}  // namespace topiq
