#include "attn.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace topiq {

namespace {

Tensor linear_init(int64_t in, int64_t out, Rng& rng) {
  return Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
}

std::string layer_prefix(int i) { return "attn.l" + std::to_string(i); }

bool is_semantics_layer(const AttnDims& d, int layer) {
  return d.semantic_attention &&
         std::find(d.semantics_layers.begin(), d.semantics_layers.end(), layer) !=
             d.semantics_layers.end();
}

}  // namespace

void attn_init(ParamStore& store, const AttnDims& d, Rng& rng) {
  if (d.V_seq <= 0 || d.E <= 0 || d.heads <= 0 || d.layers <= 0 || d.L <= 0)
    throw UsageError("attn_init: dimensions must be positive");
  for (int s : d.semantics_layers)
    if (s < 0 || s >= d.layers)
      throw UsageError("attn_init: semantics layer index out of range");
  const int W = d.width();
  store.add("attn.tok_emb", Tensor::randn({d.V_seq, W}, rng, 0.1));
  store.add("attn.pos_emb", Tensor::randn({d.L, W}, rng, 0.1));
  for (int i = 0; i < d.layers; ++i) {
    transformer_layer_init(store, layer_prefix(i), W, d.heads, d.ffn_mult * W, rng);
    if (is_semantics_layer(d, i)) {
      store.add(layer_prefix(i) + ".sem.wq", linear_init(d.E, d.E, rng));
      store.add(layer_prefix(i) + ".sem.wk", linear_init(d.E, d.E, rng));
    }
  }
  if (d.uses_fuse()) {
    store.add("attn.fuse.w1", linear_init(d.E, d.E, rng));
    store.add("attn.fuse.b1", Tensor::zeros({d.E}));
    store.add("attn.fuse.w2", linear_init(d.E, d.E, rng));
    store.add("attn.fuse.b2", Tensor::zeros({d.E}));
  }
  store.add("attn.final_ln.g", Tensor::full({W}, 1.0));
  store.add("attn.final_ln.b", Tensor::zeros({W}));
  const int head_in = d.output_enhanced ? W + d.E : W;
  store.add("attn.head.w1", linear_init(head_in, d.head_hidden, rng));
  store.add("attn.head.b1", Tensor::zeros({d.head_hidden}));
  store.add("attn.head.w2", linear_init(d.head_hidden, 1, rng));
  store.add("attn.head.b2", Tensor::zeros({1}));
}

AttnDims attn_dims_from(const ParamStore& store, int E) {
  if (E <= 0 || !store.has("attn.tok_emb"))
    throw UsageError("attn_dims_from: no pair-encoder parameters in the store");
  const Tensor& tok = store.at("attn.tok_emb");
  const int W = static_cast<int>(tok.cols());
  if (W % E != 0)
    throw UsageError("attn_dims_from: embedding width is not a multiple of the code width");
  AttnDims d;
  d.V_seq = static_cast<int>(tok.rows());
  d.E = E;
  d.heads = W / E;
  d.L = static_cast<int>(store.at("attn.pos_emb").rows());
  d.layers = 0;
  while (store.has(layer_prefix(d.layers) + ".ln1.g")) ++d.layers;
  if (d.layers == 0) throw UsageError("attn_dims_from: no transformer layers found");
  d.ffn_mult = static_cast<int>(store.at("attn.l0.ffn1.w").cols()) / W;
  d.head_hidden = static_cast<int>(store.at("attn.head.w1").cols());
  d.semantics_layers.clear();
  for (int i = 0; i < d.layers; ++i)
    if (store.has(layer_prefix(i) + ".sem.wq")) d.semantics_layers.push_back(i);
  d.semantic_attention = !d.semantics_layers.empty();
  d.output_enhanced = store.at("attn.head.w1").rows() == W + E;
  return d;
}

Tensor attn_align_quantized(const TokenSequence& seq, const Tensor& zq_a,
                            const Tensor& zq_b, int E) {
  if (zq_a.rows() != seq.a_len || zq_b.rows() != seq.b_len)
    throw UsageError("align_quantized: quantized row counts do not match the pair layout");
  if ((seq.a_len > 0 && zq_a.cols() != E) || (seq.b_len > 0 && zq_b.cols() != E))
    throw UsageError("align_quantized: quantized width mismatch");
  const int64_t L = static_cast<int64_t>(seq.ids.size());
  Tensor out = Tensor::zeros({L, E});
  for (int i = 0; i < seq.a_len; ++i)
    for (int e = 0; e < E; ++e) out.at(seq.a_start + i, e) = zq_a.at(i, e);
  for (int i = 0; i < seq.b_len; ++i)
    for (int e = 0; e < E; ++e) out.at(seq.b_start + i, e) = zq_b.at(i, e);
  return out;
}

PairBatchOut attn_forward(Tape& tape, TapeBinding& bind, const AttnDims& d,
                          const std::vector<TokenSequence>& pairs,
                          const Tensor& z_raw,
                          std::vector<AttnCollector>* collect) {
  if (pairs.empty()) throw UsageError("attn_forward: empty batch");
  const int64_t B = static_cast<int64_t>(pairs.size());
  const int64_t L = d.L;
  const bool need_z = d.uses_fuse() || d.output_enhanced;
  if (need_z && (z_raw.rows() != B * L || z_raw.cols() != d.E))
    throw UsageError("attn_forward: aligned quantized input has the wrong shape");

  PairBatchOut out;
  std::vector<int> all_ids, all_pos;
  std::vector<const std::vector<uint8_t>*> masks;
  all_ids.reserve(static_cast<size_t>(B * L));
  all_pos.reserve(static_cast<size_t>(B * L));
  for (const TokenSequence& seq : pairs) {
    if (static_cast<int64_t>(seq.ids.size()) != L)
      throw UsageError("attn_forward: pair length differs from the configured length");
    out.groups.push_back({static_cast<int64_t>(all_ids.size()), L});
    for (int64_t p = 0; p < L; ++p) {
      all_ids.push_back(seq.ids[static_cast<size_t>(p)]);
      all_pos.push_back(static_cast<int>(p));
    }
    masks.push_back(&seq.mask);
  }

  VarId x = tape.add(tape.embedding(bind("attn.tok_emb"), all_ids),
                     tape.embedding(bind("attn.pos_emb"), all_pos));

  // per-group extra score matrices, built once per semantics layer from the
  // shared fused input
  VarId z_fused = kNoVar;
  if (d.uses_fuse()) {
    VarId z_const = tape.constant(z_raw);
    VarId h1 = tape.gelu(
        tape.bias_add(tape.matmul(z_const, bind("attn.fuse.w1")), bind("attn.fuse.b1")));
    z_fused = tape.bias_add(tape.matmul(h1, bind("attn.fuse.w2")), bind("attn.fuse.b2"));
  }

  if (collect) {
    collect->clear();
    collect->resize(static_cast<size_t>(d.layers));
  }
  VarId h = x;
  for (int i = 0; i < d.layers; ++i) {
    const std::vector<VarId>* extra_ptr = nullptr;
    std::vector<VarId> extra;
    if (is_semantics_layer(d, i)) {
      VarId qq = tape.matmul(z_fused, bind(layer_prefix(i) + ".sem.wq"));
      VarId kq = tape.matmul(z_fused, bind(layer_prefix(i) + ".sem.wk"));
      for (const RowGroup& g : out.groups)
        extra.push_back(tape.matmul_nt(tape.slice_rows(qq, g.offset, g.len),
                                       tape.slice_rows(kq, g.offset, g.len)));
      extra_ptr = &extra;
    }
    h = transformer_layer(tape, bind, layer_prefix(i), d.heads, h, out.groups, &masks,
                          extra_ptr, collect ? &(*collect)[static_cast<size_t>(i)]
                                             : nullptr);
  }
  out.h_final = tape.layer_norm(h, bind("attn.final_ln.g"), bind("attn.final_ln.b"));

  // CLS rows ([CLS] is position 0 of every pair)
  std::vector<VarId> cls_rows;
  for (const RowGroup& g : out.groups)
    cls_rows.push_back(tape.slice_rows(out.h_final, g.offset, 1));
  VarId cls = cls_rows.size() == 1 ? cls_rows[0] : tape.concat(0, cls_rows);
  VarId head_in = cls;
  if (d.output_enhanced) {
    // the aligned quantized rows at the CLS positions (zero by construction,
    // kept to realize the stated feature concatenation)
    Tensor z_cls = Tensor::zeros({B, d.E});
    for (int64_t s = 0; s < B; ++s)
      for (int e = 0; e < d.E; ++e) z_cls.at(s, e) = z_raw.at(s * L, e);
    head_in = tape.concat(1, {cls, tape.constant(z_cls)});
  }
  VarId hh = tape.gelu(
      tape.bias_add(tape.matmul(head_in, bind("attn.head.w1")), bind("attn.head.b1")));
  out.logits = tape.bias_add(tape.matmul(hh, bind("attn.head.w2")), bind("attn.head.b2"));
  return out;
}

VarId attn_loss(Tape& tape, VarId logits, const std::vector<double>& targets,
                bool binary) {
  if (tape.val(logits).rows() != static_cast<int64_t>(targets.size()))
    throw UsageError("attn_loss: label count differs from the batch");
  if (binary) return tape.bce_logits(logits, targets);
  Tensor t({static_cast<int64_t>(targets.size()), 1}, targets);
  return tape.mse(logits, tape.constant(t));
}

double attn_report_score(double raw, bool binary) {
  if (binary) return 1.0 / (1.0 + std::exp(-raw));
  return std::clamp(5.0 * raw, 0.0, 5.0);
}

}  // namespace topiq
