#include "vq.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "ntm.hpp"

namespace topiq {

namespace {

Tensor linear_init(int64_t in, int64_t out, Rng& rng) {
  return Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
}

}  // namespace

void vq_init(ParamStore& store, const VqDims& d, Rng& rng, bool own_codebook) {
  store.add("vq.tok_emb", Tensor::randn({d.V_seq, d.E}, rng, 0.1));
  store.add("vq.pos_emb", Tensor::randn({d.max_len, d.E}, rng, 0.1));
  if (d.with_topics) {
    store.add("vq.in_proj.w", linear_init(d.E + d.K, d.E, rng));
    store.add("vq.in_proj.b", Tensor::zeros({d.E}));
  }
  transformer_layer_init(store, "vq.enc", d.E, kVqHeads, d.E * d.ffn_mult, rng);
  transformer_layer_init(store, "vq.dec", d.E, kVqHeads, d.E * d.ffn_mult, rng);
  store.add("vq.out.w", linear_init(d.E, d.V_seq, rng));
  store.add("vq.out.b", Tensor::zeros({d.V_seq}));
  if (own_codebook)
    store.add("vq.codebook", Tensor::randn({d.K, d.E}, rng, 1.0 / std::sqrt(d.E)));
}

std::string vq_codebook_name(const ParamStore& store) {
  return store.has("vq.codebook") ? "vq.codebook" : "ntm.phi";
}

VqDims vq_dims_from(const ParamStore& store, int K) {
  VqDims d;
  d.V_seq = static_cast<int>(store.at("vq.tok_emb").rows());
  d.E = static_cast<int>(store.at("vq.tok_emb").cols());
  d.max_len = static_cast<int>(store.at("vq.pos_emb").rows());
  d.K = K;
  d.ffn_mult = static_cast<int>(store.at("vq.enc.ffn1.w").cols() / d.E);
  d.with_topics = store.has("vq.in_proj.w");
  return d;
}

VqBatch make_vq_batch(const std::vector<std::vector<int>>& ids,
                      const std::vector<std::vector<int>>& ntm_ids) {
  if (ids.size() != ntm_ids.size())
    throw UsageError("make_vq_batch: ids and ntm_ids differ in sentence count");
  VqBatch b;
  for (size_t s = 0; s < ids.size(); ++s) {
    if (ids[s].empty()) throw UsageError("make_vq_batch: empty sentence");
    if (ids[s].size() != ntm_ids[s].size())
      throw UsageError("make_vq_batch: token count mismatch in sentence");
    b.groups.push_back({b.rows, static_cast<int64_t>(ids[s].size())});
    for (size_t i = 0; i < ids[s].size(); ++i) {
      b.all_ids.push_back(ids[s][i]);
      b.all_pos.push_back(static_cast<int>(i));
      b.ntm_ids.push_back(ntm_ids[s][i]);
    }
    b.rows += static_cast<int64_t>(ids[s].size());
  }
  return b;
}

VarId vq_topical_embedding(Tape& tape, const VqBatch& batch, VarId theta, VarId beta) {
  int64_t K = tape.val(theta).cols();
  int64_t N = batch.rows;

  VarId beta_t = tape.transpose(beta);  // V x K
  std::vector<int> sentinel(batch.ntm_ids.size());
  for (size_t i = 0; i < batch.ntm_ids.size(); ++i)
    sentinel[i] = std::max(0, batch.ntm_ids[i]);
  VarId word_cols = tape.embedding(beta_t, sentinel);  // N x K rows beta[:, w]

  std::vector<VarId> theta_rows;
  theta_rows.reserve(batch.groups.size());
  for (size_t s = 0; s < batch.groups.size(); ++s)
    theta_rows.push_back(tape.repeat_rows(
        tape.slice_rows(theta, static_cast<int64_t>(s), 1), batch.groups[s].len));
  VarId theta_full =
      theta_rows.size() == 1 ? theta_rows[0] : tape.concat(0, theta_rows);

  VarId prod = tape.mul(theta_full, word_cols);

  // blend masks: in-vocabulary rows keep the product, OOV rows become exactly
  // uniform 1/K and carry no gradient
  Tensor keep = Tensor::zeros({N, K});
  Tensor fill = Tensor::zeros({N, K});
  for (int64_t r = 0; r < N; ++r) {
    bool in_vocab = batch.ntm_ids[static_cast<size_t>(r)] >= 0;
    for (int64_t k = 0; k < K; ++k) {
      if (in_vocab)
        keep.at(r, k) = 1.0;
      else
        fill.at(r, k) = 1.0 / static_cast<double>(K);
    }
  }
  return tape.add(tape.mul(prod, tape.constant(keep)), tape.constant(fill));
}

std::vector<int> vq_nearest_codes(const Tensor& z_e, const Tensor& codebook) {
  if (!z_e.all_finite()) throw NumericError("quantize: non-finite encoder output");
  int64_t n = z_e.rows(), K = codebook.rows(), E = codebook.cols();
  if (z_e.cols() != E) throw UsageError("quantize: width mismatch");
  if (K < 1) throw UsageError("quantize: empty codebook");
  std::vector<int> codes(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (int64_t j = 0; j < K; ++j) {
      double d = 0.0;
      for (int64_t e = 0; e < E; ++e) {
        double diff = z_e.at(i, e) - codebook.at(j, e);
        d += diff * diff;
      }
      if (d < best) {  // strict: ties keep the lowest index
        best = d;
        arg = static_cast<int>(j);
      }
    }
    codes[static_cast<size_t>(i)] = arg;
  }
  return codes;
}

VqEncoded vq_encode_quantize(Tape& tape, TapeBinding& bind, const VqBatch& batch,
                             VarId theta, VarId beta, bool with_topics,
                             std::vector<double>* usage) {
  VarId x_seq = tape.add(tape.embedding(bind("vq.tok_emb"), batch.all_ids),
                         tape.embedding(bind("vq.pos_emb"), batch.all_pos));
  VarId xin;
  if (with_topics) {
    if (theta == kNoVar || beta == kNoVar)
      throw UsageError("vq_encode_quantize: topical path needs theta and beta");
    VarId xt = vq_topical_embedding(tape, batch, theta, beta);
    VarId xcat = tape.concat(1, {x_seq, xt});
    xin = tape.bias_add(tape.matmul(xcat, bind("vq.in_proj.w")), bind("vq.in_proj.b"));
  } else {
    xin = x_seq;
  }

  VqEncoded enc;
  enc.z_e = transformer_layer(tape, bind, "vq.enc", kVqHeads, xin, batch.groups,
                              nullptr, nullptr);
  VarId cb = bind(vq_codebook_name(bind.store()));
  enc.codes = vq_nearest_codes(tape.val(enc.z_e), tape.val(cb));
  enc.z_q = tape.embedding(cb, enc.codes);
  if (usage) {
    for (int c : enc.codes) {
      if (c < 0 || c >= static_cast<int>(usage->size()))
        throw UsageError("vq_encode_quantize: usage vector too small");
      (*usage)[static_cast<size_t>(c)] += 1.0;
    }
  }
  return enc;
}

VqLossOut vq_loss_terms(Tape& tape, TapeBinding& bind, const VqBatch& batch,
                        const VqEncoded& enc, double lambda) {
  if (lambda < 0.0) throw UsageError("vq_loss_terms: lambda must be >= 0");
  VarId st = tape.straight_through(enc.z_q, enc.z_e);
  VarId dec_in = tape.add(st, tape.embedding(bind("vq.pos_emb"), batch.all_pos));
  VarId h = transformer_layer(tape, bind, "vq.dec", kVqHeads, dec_in, batch.groups,
                              nullptr, nullptr);
  VqLossOut out;
  out.logits = tape.bias_add(tape.matmul(h, bind("vq.out.w")), bind("vq.out.b"));
  // cross_entropy_logits averages over rows; the objective sums per position
  out.recon_sum = tape.scale(tape.cross_entropy_logits(out.logits, batch.all_ids),
                             static_cast<double>(batch.rows));
  out.codebook_term = tape.sum_squares(tape.sub(tape.stop_gradient(enc.z_e), enc.z_q));
  out.commitment_term = tape.sum_squares(tape.sub(enc.z_e, tape.stop_gradient(enc.z_q)));
  out.total = tape.add(tape.add(out.recon_sum, out.codebook_term),
                       tape.scale(out.commitment_term, lambda));
  return out;
}

std::pair<Tensor, std::vector<int>> vq_quantized_rows(ParamStore& store,
                                                      const VqBatch& batch,
                                                      const Tensor& theta,
                                                      bool with_topics) {
  Tape tape;
  TapeBinding bind(tape, store, [](const std::string&) { return false; });
  VarId theta_v = kNoVar, beta_v = kNoVar;
  if (with_topics) {
    theta_v = tape.constant(theta);
    beta_v = ntm_compute_beta(tape, bind);
  }
  VqEncoded enc =
      vq_encode_quantize(tape, bind, batch, theta_v, beta_v, with_topics, nullptr);
  return {tape.val(enc.z_q), enc.codes};
}

WordClusters vq_word_clusters(ParamStore& store, const std::vector<std::string>& texts,
                              const Vocabulary& seq_vocab, const Vocabulary& ntm_vocab,
                              int max_len, bool with_topics) {
  int64_t K = store.at(vq_codebook_name(store)).rows();
  // word -> per-code assignment counts
  std::map<std::string, std::map<int, int64_t>> tallies;
  WordClusters result;
  result.usage.assign(static_cast<size_t>(K), 0);
  result.words.resize(static_cast<size_t>(K));

  constexpr size_t kChunk = 128;
  for (size_t begin = 0; begin < texts.size(); begin += kChunk) {
    size_t end = std::min(texts.size(), begin + kChunk);
    std::vector<std::vector<int>> ids, nids;
    std::vector<std::vector<std::string>> toks;
    std::vector<BoWVector> bows;
    for (size_t i = begin; i < end; ++i) {
      std::vector<std::string> t = tokenize(texts[i]);
      if (t.size() > static_cast<size_t>(max_len)) t.resize(static_cast<size_t>(max_len));
      if (t.empty()) continue;
      std::vector<int> sid, nid;
      for (const std::string& tok : t) {
        int s = seq_vocab.id_of(tok);
        sid.push_back(s < 0 ? kUnkId : s);
        nid.push_back(ntm_vocab.id_of(tok));
      }
      ids.push_back(std::move(sid));
      nids.push_back(std::move(nid));
      toks.push_back(std::move(t));
      bows.push_back(to_bow(texts[i], ntm_vocab));
    }
    if (ids.empty()) continue;
    VqBatch batch = make_vq_batch(ids, nids);
    Tensor theta;
    if (with_topics) {
      Tape tape;
      TapeBinding bind(tape, store, [](const std::string&) { return false; });
      NtmForwardOut ntm = ntm_forward(
          tape, bind, bow_to_dense(bows, static_cast<int>(ntm_vocab.size())), nullptr);
      theta = tape.val(ntm.theta);
    }
    auto [zq, codes] = vq_quantized_rows(store, batch, theta, with_topics);
    size_t r = 0;
    for (size_t s = 0; s < toks.size(); ++s)
      for (const std::string& tok : toks[s]) {
        ++tallies[tok][codes[r]];
        ++result.usage[static_cast<size_t>(codes[r])];
        ++r;
      }
  }

  // modal code per word, lowest code on ties; rank by count, then lexicographic
  for (const auto& [word, per_code] : tallies) {
    int best_code = -1;
    int64_t best_count = -1;
    for (const auto& [code, count] : per_code)
      if (count > best_count) {  // map iterates codes ascending
        best_count = count;
        best_code = code;
      }
    result.words[static_cast<size_t>(best_code)].push_back({word, best_count});
  }
  for (auto& cluster : result.words)
    std::sort(cluster.begin(), cluster.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
  return result;
}

}  // namespace topiq
