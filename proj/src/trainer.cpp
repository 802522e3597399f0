#include "trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "checkpoint.hpp"
#include "errors.hpp"
#include "rng.hpp"

namespace fs = std::filesystem;

namespace topiq {
namespace {

// ---------------------------------------------------------------------------
// Small shared helpers
// ---------------------------------------------------------------------------

// Stage-distinct RNG stream ids; fork() advances the parent, so the draw
// order below is part of the reproducibility contract.
enum StreamId : uint64_t {
  kNtmInit = 1, kNtmNoise = 2, kNtmShuffle = 3,
  kJointInit = 4, kJointNoise = 5, kJointShuffle = 6,
  kStsInit = 7, kStsNoise = 8, kStsShuffle = 9,
};

void require_dirs(const RunConfig& cfg) {
  if (cfg.dataset.empty()) throw UsageError("dataset directory is required");
  if (cfg.output_dir.empty()) throw UsageError("output_dir is required");
}

void check_stage(const StageConfig& s, const char* name) {
  if (s.epochs < 1) throw UsageError(std::string(name) + ".epochs must be >= 1");
  if (s.batch < 1) throw UsageError(std::string(name) + ".batch must be >= 1");
  if (!(s.lr > 0.0)) throw UsageError(std::string(name) + ".lr must be > 0");
}

void check_finite_loss(double v, const char* stage, int epoch) {
  if (!std::isfinite(v))
    throw NumericError(std::string(stage) + " training loss is not finite at epoch " +
                       std::to_string(epoch));
}

std::string write_json(const ordered_json& j, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write " + path);
  out << j.dump(2) << "\n";
  if (!out) throw UsageError("failed writing " + path);
  return path;
}

ordered_json make_report(const RunConfig& cfg, const char* stage) {
  ordered_json j;
  j["config_hash"] = cfg.hash_hex();
  j["seed"] = cfg.seed;
  j["stage"] = stage;
  j["metrics"] = ordered_json::object();
  j["curves"] = ordered_json::object();
  return j;
}

ordered_json json_opt(const std::optional<double>& v) {
  return v ? ordered_json(*v) : ordered_json(nullptr);
}

ordered_json eval_report_json(const EvalReport& r) {
  ordered_json j;
  j["accuracy"] = r.accuracy;
  j["f1"] = r.f1;
  j["pearson"] = json_opt(r.pearson);
  j["spearman"] = json_opt(r.spearman);
  return j;
}

void shuffle_indices(std::vector<int>& idx, Rng& rng) {
  for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i) {
    int j = rng.uniform_int(i + 1);
    std::swap(idx[i], idx[j]);
  }
}

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Checkpoint resolution: explicit --checkpoint wins; otherwise the newest
// stage file available in output_dir from `files` (listed most-trained
// first).
std::string resolve_checkpoint(const RunConfig& cfg,
                               std::initializer_list<const char*> files,
                               const std::string& needed_stage) {
  if (!cfg.checkpoint.empty()) {
    if (!fs::exists(cfg.checkpoint))
      throw DataError("checkpoint not found: " + cfg.checkpoint);
    return cfg.checkpoint;
  }
  if (cfg.output_dir.empty())
    throw UsageError("either output_dir or checkpoint is required");
  for (const char* f : files) {
    fs::path p = fs::path(cfg.output_dir) / f;
    if (fs::exists(p)) return p.string();
  }
  throw UsageError("no checkpoint found in " + cfg.output_dir + "; run the " +
                   needed_stage + " stage first or pass --checkpoint");
}

ParamStore store_from(const TensorMap& m) {
  ParamStore s;
  for (const auto& [name, t] : m) s.add(name, t);
  return s;
}

std::vector<std::string> all_names(const ParamStore& s) {
  return s.names_with_prefix("");
}

// ---------------------------------------------------------------------------
// Corpus assembly
// ---------------------------------------------------------------------------

struct Corpora {
  Dataset ds;
  std::vector<std::string> train_sents;  // a, b per train pair, in order
  Vocabulary seq_vocab;
  Vocabulary ntm_vocab;  // empty unless requested
};

Corpora load_corpora(const RunConfig& cfg, bool need_ntm_vocab) {
  Corpora c;
  c.ds = load_dataset(cfg.dataset);
  if (c.ds.train.empty()) throw DataError("train split is empty in " + cfg.dataset);
  c.train_sents.reserve(c.ds.train.size() * 2);
  for (const auto& p : c.ds.train) {
    c.train_sents.push_back(p.text_a);
    c.train_sents.push_back(p.text_b);
  }
  c.seq_vocab = build_sequence_vocabulary(c.train_sents);
  if (need_ntm_vocab) {
    auto stop = cfg.stopwords_path.empty() ? default_stopwords()
                                           : load_stopwords(cfg.stopwords_path);
    c.ntm_vocab = build_vocabulary(c.train_sents, cfg.min_count, stop);
  }
  return c;
}

// Topic-model documents for one split: per sentence, or per pair when the
// concatenation switch is on.
std::vector<std::string> topic_documents(const std::vector<SentencePair>& split,
                                         bool concat) {
  std::vector<std::string> out;
  out.reserve(concat ? split.size() : split.size() * 2);
  for (const auto& p : split) {
    if (concat) {
      out.push_back(p.text_a + " " + p.text_b);
    } else {
      out.push_back(p.text_a);
      out.push_back(p.text_b);
    }
  }
  return out;
}

std::vector<BoWVector> to_bows(const std::vector<std::string>& docs,
                               const Vocabulary& vocab) {
  std::vector<BoWVector> out;
  out.reserve(docs.size());
  for (const auto& d : docs) out.push_back(to_bow(d, vocab));
  return out;
}

// ---------------------------------------------------------------------------
// Structural flags shared by the joint and downstream stages
// ---------------------------------------------------------------------------

struct ModelShape {
  bool has_ntm = true;      // false under no_topic_model
  bool with_topics = true;  // topical rows feed the quantizer encoder
  bool own_codebook = false;
};

ModelShape shape_from_config(const RunConfig& cfg) {
  ModelShape s;
  s.has_ntm = !cfg.ablations.no_topic_model;
  s.with_topics = s.has_ntm && !cfg.ablations.no_topic_encoder;
  s.own_codebook = !s.has_ntm || cfg.ablations.no_topical_codebook;
  return s;
}

ModelShape shape_from_store(const ParamStore& store) {
  ModelShape s;
  s.has_ntm = store.has("ntm.phi");
  s.with_topics = store.has("vq.in_proj.w");
  s.own_codebook = store.has("vq.codebook");
  return s;
}

void check_vocab_match(const char* which, int ckpt, int built) {
  if (ckpt != built)
    throw DataError(std::string(which) + " vocabulary size " + std::to_string(built) +
                    " does not match the checkpoint (" + std::to_string(ckpt) +
                    "); use the dataset the model was trained on");
}

// ---------------------------------------------------------------------------
// Quantized-row cache for the pair stages: one entry per distinct
// (sentence text, kept length). Lengths come from the pair layout, and the
// encoder must see exactly the kept prefix.
// ---------------------------------------------------------------------------

struct ZqCache {
  std::map<std::string, Tensor> rows;  // key -> len x E values

  static std::string key(const std::string& text, int len) {
    return text + '\x1f' + std::to_string(len);
  }
  const Tensor& get(const std::string& text, int len) const {
    auto it = rows.find(key(text, len));
    if (it == rows.end()) throw UsageError("internal: missing quantized-row cache entry");
    return it->second;
  }
};

struct CacheEntry {
  std::string text;
  int len = 0;
};

// Encode every queued (text, len) prefix in deterministic first-seen order,
// batched; theta comes from the full-sentence BoW with zero noise.
ZqCache build_zq_cache(ParamStore& store, const ModelShape& shape,
                       const Vocabulary& seq_vocab, const Vocabulary& ntm_vocab,
                       const std::vector<const std::vector<SentencePair>*>& splits,
                       const std::vector<std::vector<TokenSequence>>& split_seqs,
                       int E) {
  ZqCache cache;
  std::vector<CacheEntry> queue;
  auto enqueue = [&](const std::string& text, int len) {
    std::string k = ZqCache::key(text, len);
    if (cache.rows.count(k)) return;
    if (len == 0) {
      cache.rows.emplace(k, Tensor::zeros({0, E}));
      return;
    }
    cache.rows.emplace(k, Tensor());  // placeholder, filled below
    queue.push_back({text, len});
  };
  for (size_t s = 0; s < splits.size(); ++s) {
    const auto& pairs = *splits[s];
    const auto& seqs = split_seqs[s];
    for (size_t i = 0; i < pairs.size(); ++i) {
      enqueue(pairs[i].text_a, seqs[i].a_len);
      enqueue(pairs[i].text_b, seqs[i].b_len);
    }
  }

  const int V = shape.with_topics ? ntm_vocab.size() : 0;
  const int K = static_cast<int>(store.at(vq_codebook_name(store)).rows());
  constexpr size_t kChunk = 64;
  for (size_t start = 0; start < queue.size(); start += kChunk) {
    size_t end = std::min(queue.size(), start + kChunk);
    std::vector<std::vector<int>> ids, nids;
    Tensor theta;
    if (shape.with_topics)
      theta = Tensor::zeros({static_cast<int64_t>(end - start), K});
    for (size_t q = start; q < end; ++q) {
      const CacheEntry& e = queue[q];
      ids.push_back(encode_sentence(e.text, seq_vocab, e.len));
      std::vector<int> ni(e.len, -1);
      if (shape.with_topics) {
        auto toks = tokenize(e.text);
        for (int t = 0; t < e.len; ++t) ni[t] = ntm_vocab.id_of(toks[t]);
        Tensor th = ntm_theta_vector(store, to_bow(e.text, ntm_vocab), V);
        for (int k = 0; k < K; ++k) theta.at(q - start, k) = th.values[k];
      }
      nids.push_back(std::move(ni));
    }
    VqBatch vb = make_vq_batch(ids, nids);
    auto [zq, codes] = vq_quantized_rows(store, vb, theta, shape.with_topics);
    for (size_t q = start; q < end; ++q) {
      const RowGroup& g = vb.groups[q - start];
      Tensor part = Tensor::zeros({g.len, zq.cols()});
      std::copy(zq.values.begin() + g.offset * zq.cols(),
                zq.values.begin() + (g.offset + g.len) * zq.cols(),
                part.values.begin());
      cache.rows[ZqCache::key(queue[q].text, queue[q].len)] = std::move(part);
    }
  }
  return cache;
}

Tensor stack_aligned(const std::vector<TokenSequence>& seqs,
                     const std::vector<const Tensor*>& za,
                     const std::vector<const Tensor*>& zb, int E) {
  const int64_t L = seqs.empty() ? 0 : static_cast<int64_t>(seqs[0].ids.size());
  Tensor out = Tensor::zeros({static_cast<int64_t>(seqs.size()) * L, E});
  for (size_t b = 0; b < seqs.size(); ++b) {
    Tensor al = attn_align_quantized(seqs[b], *za[b], *zb[b], E);
    std::copy(al.values.begin(), al.values.end(), out.values.begin() + b * L * E);
  }
  return out;
}

// Reported prediction per pair over frozen parameters, batched.
std::vector<double> predict_scores(ParamStore& store, const AttnDims& d,
                                   const std::vector<SentencePair>& pairs,
                                   const std::vector<TokenSequence>& seqs,
                                   const ZqCache& cache, bool binary, int batch) {
  std::vector<double> out;
  out.reserve(pairs.size());
  for (size_t start = 0; start < pairs.size(); start += batch) {
    size_t end = std::min(pairs.size(), start + static_cast<size_t>(batch));
    std::vector<TokenSequence> bs(seqs.begin() + start, seqs.begin() + end);
    std::vector<const Tensor*> za, zb;
    for (size_t i = start; i < end; ++i) {
      za.push_back(&cache.get(pairs[i].text_a, seqs[i].a_len));
      zb.push_back(&cache.get(pairs[i].text_b, seqs[i].b_len));
    }
    Tensor z = stack_aligned(bs, za, zb, d.E);
    Tape tape;
    TapeBinding bind(tape, store, [](const std::string&) { return false; });
    PairBatchOut fw = attn_forward(tape, bind, d, bs, z);
    const Tensor& lg = tape.val(fw.logits);
    for (int64_t r = 0; r < lg.rows(); ++r)
      out.push_back(attn_report_score(lg.values[r], binary));
  }
  return out;
}

std::vector<double> labels_of(const std::vector<SentencePair>& pairs) {
  std::vector<double> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(p.label);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Stage 1: topic-model pretraining
// ---------------------------------------------------------------------------

StageResult run_train_ntm(const RunConfig& cfg) {
  require_dirs(cfg);
  check_stage(cfg.ntm, "ntm");
  if (cfg.ablations.no_topic_model)
    throw UsageError("train-ntm conflicts with the no_topic_model ablation");

  Corpora C = load_corpora(cfg, /*need_ntm_vocab=*/true);
  if (C.ds.dev.empty()) throw DataError("dev split is empty in " + cfg.dataset);
  const int V = C.ntm_vocab.size();
  const int K = cfg.topics;

  auto train_bows = to_bows(topic_documents(C.ds.train, cfg.bow_concat_pairs), C.ntm_vocab);
  auto dev_bows = to_bows(topic_documents(C.ds.dev, cfg.bow_concat_pairs), C.ntm_vocab);
  if (bow_total_tokens(dev_bows) <= 0.0)
    throw DataError("dev split has no in-vocabulary tokens");

  Rng root(cfg.seed);
  Rng init_rng = root.fork(kNtmInit);
  Rng noise_rng = root.fork(kNtmNoise);
  Rng shuffle_rng = root.fork(kNtmShuffle);

  ParamStore store;
  ntm_init(store, NtmDims{V, cfg.hidden, K, cfg.code_dim}, init_rng);
  const std::vector<std::string> trainable = all_names(store);
  Adam opt(cfg.ntm.lr);

  fs::create_directories(cfg.output_dir);
  echo_config(cfg, cfg.output_dir);

  std::vector<int> order(train_bows.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  ordered_json train_curve = ordered_json::array();
  ordered_json ppl_curve = ordered_json::array();
  double best_ppl = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  TensorMap best;

  for (int epoch = 0; epoch < cfg.ntm.epochs; ++epoch) {
    shuffle_indices(order, shuffle_rng);
    double loss_sum = 0.0;
    for (size_t start = 0; start < order.size(); start += cfg.ntm.batch) {
      size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.ntm.batch));
      std::vector<BoWVector> batch;
      batch.reserve(end - start);
      for (size_t i = start; i < end; ++i) batch.push_back(train_bows[order[i]]);
      const int64_t B = static_cast<int64_t>(batch.size());

      Tensor counts = bow_to_dense(batch, V);
      Tensor noise = Tensor::zeros({B, K});
      for (auto& v : noise.values) v = noise_rng.normal();

      Tape tape;
      TapeBinding bind(tape, store);
      NtmForwardOut out = ntm_forward(tape, bind, counts, &noise);
      double loss = tape.scalar_val(out.loss_mean);
      check_finite_loss(loss, "ntm", epoch);
      tape.backward(out.loss_mean);
      bind.harvest();
      opt.step(store, trainable, cfg.clip_norm);
      loss_sum += loss * static_cast<double>(B);
    }
    train_curve.push_back(loss_sum / static_cast<double>(train_bows.size()));

    double ppl = ntm_perplexity(store, dev_bows, V);
    ppl_curve.push_back(ppl);
    if (ppl < best_ppl) {
      best_ppl = ppl;
      best_epoch = epoch;
      best = store.snapshot();
    }
  }

  StageResult res;
  res.checkpoint_path = (fs::path(cfg.output_dir) / "ntm.tqt").string();
  save_tensors(best, res.checkpoint_path);

  res.report = make_report(cfg, "ntm");
  res.report["metrics"]["dev_perplexity"] = best_ppl;
  res.report["metrics"]["best_epoch"] = best_epoch;
  res.report["metrics"]["final_train_loss"] = train_curve.back();
  res.report["curves"]["train_loss"] = train_curve;
  res.report["curves"]["dev_perplexity"] = ppl_curve;
  res.metrics_path = write_json(res.report, (fs::path(cfg.output_dir) / "ntm_metrics.json").string());
  return res;
}

// ---------------------------------------------------------------------------
// Stage 2: quantizer training (joint or multistage)
// ---------------------------------------------------------------------------

StageResult run_train_joint(const RunConfig& cfg) {
  require_dirs(cfg);
  check_stage(cfg.joint, "joint");
  if (cfg.mode != "joint" && cfg.mode != "multistage")
    throw UsageError("mode must be \"joint\" or \"multistage\", got \"" + cfg.mode + "\"");

  const ModelShape shape = shape_from_config(cfg);
  const bool combined = shape.has_ntm && cfg.mode == "joint";

  // Resolve the prerequisite before any heavy work so misuse fails fast.
  std::string ntm_path;
  if (shape.has_ntm) ntm_path = resolve_checkpoint(cfg, {"ntm.tqt"}, "ntm");

  Corpora C = load_corpora(cfg, shape.has_ntm);
  const int V = shape.has_ntm ? C.ntm_vocab.size() : 0;
  const int K = cfg.topics;

  Rng root(cfg.seed);
  Rng init_rng = root.fork(kJointInit);
  Rng noise_rng = root.fork(kJointNoise);
  Rng shuffle_rng = root.fork(kJointShuffle);

  ParamStore store;
  if (shape.has_ntm) {
    ntm_init(store, NtmDims{V, cfg.hidden, K, cfg.code_dim}, init_rng);
    store.load(load_tensors(ntm_path));  // shape mismatch -> DataError
  }
  vq_init(store,
          VqDims{C.seq_vocab.size(), cfg.code_dim, K, cfg.max_len, cfg.vq_ffn_mult,
                 shape.with_topics},
          init_rng, shape.own_codebook);

  const std::vector<std::string> trainable =
      combined ? all_names(store) : store.names_with_prefix("vq.");
  auto is_trainable = [&](const std::string& name) {
    return combined || name.rfind("vq.", 0) == 0;
  };
  Adam opt(cfg.joint.lr);

  fs::create_directories(cfg.output_dir);
  echo_config(cfg, cfg.output_dir);

  // Per-sentence inputs: kept token ids, parallel topic-vocab ids, and the
  // full-sentence BoW for theta. Empty sentences are skipped.
  struct JointSent {
    std::vector<int> ids, ntm_ids;
    BoWVector bow;
  };
  std::vector<JointSent> sents;
  for (const auto& text : C.train_sents) {
    JointSent s;
    s.ids = encode_sentence(text, C.seq_vocab, cfg.max_len);
    if (s.ids.empty()) continue;
    s.ntm_ids.assign(s.ids.size(), -1);
    if (shape.with_topics) {
      auto toks = tokenize(text);
      for (size_t t = 0; t < s.ids.size(); ++t) s.ntm_ids[t] = C.ntm_vocab.id_of(toks[t]);
    }
    if (shape.has_ntm) s.bow = to_bow(text, C.ntm_vocab);
    sents.push_back(std::move(s));
  }
  if (sents.empty()) throw DataError("no non-empty training sentences in " + cfg.dataset);

  // The topic forward is needed for the combined objective and for the
  // topical encoder rows; a frozen topic model without either is skipped.
  const bool need_ntm_fwd = shape.has_ntm && (combined || shape.with_topics);

  std::vector<int> order(sents.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  ordered_json train_curve = ordered_json::array();
  ordered_json entropy_curve = ordered_json::array();
  std::vector<double> usage(K, 0.0);

  for (int epoch = 0; epoch < cfg.joint.epochs; ++epoch) {
    shuffle_indices(order, shuffle_rng);
    usage.assign(K, 0.0);
    double loss_sum = 0.0;
    int64_t n_sent = 0;
    for (size_t start = 0; start < order.size(); start += cfg.joint.batch) {
      size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.joint.batch));
      std::vector<std::vector<int>> ids, nids;
      std::vector<BoWVector> bows;
      for (size_t i = start; i < end; ++i) {
        ids.push_back(sents[order[i]].ids);
        nids.push_back(sents[order[i]].ntm_ids);
        if (need_ntm_fwd) bows.push_back(sents[order[i]].bow);
      }
      const int64_t B = static_cast<int64_t>(ids.size());
      VqBatch vb = make_vq_batch(ids, nids);

      Tape tape;
      TapeBinding bind(tape, store, is_trainable);
      VarId theta = kNoVar, beta = kNoVar;
      NtmForwardOut nout{};
      if (need_ntm_fwd) {
        Tensor counts = bow_to_dense(bows, V);
        Tensor noise = Tensor::zeros({B, K});
        for (auto& v : noise.values) v = noise_rng.normal();
        nout = ntm_forward(tape, bind, counts, &noise);
        theta = nout.theta;
        beta = nout.beta;
      }
      VqEncoded enc = vq_encode_quantize(tape, bind, vb, theta, beta,
                                         shape.with_topics, &usage);
      VqLossOut lt = vq_loss_terms(tape, bind, vb, enc, cfg.lambda);
      VarId total = lt.total;
      if (combined)
        total = tape.add(total, tape.scale(tape.add(nout.recon_sum, nout.kl_sum), cfg.gamma));

      double loss = tape.scalar_val(total);
      check_finite_loss(loss, "joint", epoch);
      tape.backward(total);
      bind.harvest();
      opt.step(store, trainable, cfg.clip_norm);
      loss_sum += loss;
      n_sent += B;
    }
    train_curve.push_back(loss_sum / static_cast<double>(n_sent));
    entropy_curve.push_back(codebook_diagnostics(usage).usage_entropy);
  }

  CodebookDiagnostics diag = codebook_diagnostics(usage);

  StageResult res;
  res.checkpoint_path = (fs::path(cfg.output_dir) / "joint.tqt").string();
  save_tensors(store.snapshot(), res.checkpoint_path);

  res.report = make_report(cfg, "joint");
  res.report["metrics"]["final_train_loss"] = train_curve.back();
  res.report["metrics"]["utilization"] = diag.utilization;
  res.report["metrics"]["usage_entropy"] = diag.usage_entropy;
  if (shape.has_ntm) {
    auto dev_bows = to_bows(topic_documents(C.ds.dev, cfg.bow_concat_pairs), C.ntm_vocab);
    res.report["metrics"]["dev_perplexity"] =
        bow_total_tokens(dev_bows) > 0.0 ? ordered_json(ntm_perplexity(store, dev_bows, V))
                                         : ordered_json(nullptr);
  }
  res.report["curves"]["train_loss"] = train_curve;
  res.report["curves"]["usage_entropy"] = entropy_curve;
  res.metrics_path = write_json(res.report, (fs::path(cfg.output_dir) / "joint_metrics.json").string());
  return res;
}

// ---------------------------------------------------------------------------
// Stage 3: pair-similarity fine-tuning
// ---------------------------------------------------------------------------

StageResult run_train_sts(const RunConfig& cfg) {
  require_dirs(cfg);
  check_stage(cfg.sts, "sts");

  std::string joint_path = resolve_checkpoint(cfg, {"joint.tqt"}, "joint");
  ParamStore store = store_from(load_tensors(joint_path));
  const ModelShape shape = shape_from_store(store);
  const int K = static_cast<int>(store.at(vq_codebook_name(store)).rows());
  const VqDims vdims = vq_dims_from(store, K);

  Corpora C = load_corpora(cfg, shape.with_topics);
  check_vocab_match("sequence", vdims.V_seq, C.seq_vocab.size());
  if (shape.with_topics)
    check_vocab_match("topic", ntm_dims_from(store).V, C.ntm_vocab.size());
  if (C.ds.dev.empty()) throw DataError("dev split is empty in " + cfg.dataset);
  if (vdims.E != cfg.code_dim)
    throw UsageError("code_dim " + std::to_string(cfg.code_dim) +
                     " does not match the checkpoint (" + std::to_string(vdims.E) + ")");
  if (cfg.max_len - 3 > vdims.max_len)
    throw UsageError("max_len exceeds what the quantizer was trained for");

  const bool binary = C.ds.label_kind == LabelKind::binary;

  Rng root(cfg.seed);
  Rng init_rng = root.fork(kStsInit);
  (void)root.fork(kStsNoise);  // reserved stream, keeps numbering stable
  Rng shuffle_rng = root.fork(kStsShuffle);

  AttnDims adims;
  adims.V_seq = C.seq_vocab.size();
  adims.E = cfg.code_dim;
  adims.heads = cfg.heads;
  adims.layers = cfg.layers;
  adims.L = cfg.max_len;
  adims.ffn_mult = cfg.ffn_mult;
  adims.head_hidden = cfg.head_hidden;
  adims.semantics_layers = cfg.resolved_semantics_layers();
  adims.semantic_attention = !cfg.ablations.no_semantic_attention;
  adims.output_enhanced = !cfg.ablations.no_output_enhanced;
  attn_init(store, adims, init_rng);

  const std::vector<std::string> trainable = store.names_with_prefix("attn.");
  auto is_trainable = [](const std::string& name) { return name.rfind("attn.", 0) == 0; };
  Adam opt(cfg.sts.lr);

  fs::create_directories(cfg.output_dir);
  echo_config(cfg, cfg.output_dir);

  // Pair layouts and the quantized-row cache over all splits.
  std::vector<const std::vector<SentencePair>*> splits{&C.ds.train, &C.ds.dev, &C.ds.test};
  std::vector<std::vector<TokenSequence>> seqs(splits.size());
  for (size_t s = 0; s < splits.size(); ++s) {
    seqs[s].reserve(splits[s]->size());
    for (const auto& p : *splits[s]) seqs[s].push_back(to_sequence(p, C.seq_vocab, cfg.max_len));
  }
  ZqCache cache = build_zq_cache(store, shape, C.seq_vocab, C.ntm_vocab, splits, seqs, adims.E);

  const auto& train = C.ds.train;
  const auto& train_seqs = seqs[0];
  std::vector<int> order(train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  ordered_json train_curve = ordered_json::array();
  ordered_json dev_curve = ordered_json::array();
  double best_metric = -std::numeric_limits<double>::infinity();
  int best_epoch = -1, since_best = 0, epochs_run = 0;
  TensorMap best_attn;

  std::vector<double> dev_labels = labels_of(C.ds.dev);

  for (int epoch = 0; epoch < cfg.sts.epochs; ++epoch) {
    ++epochs_run;
    shuffle_indices(order, shuffle_rng);
    double loss_sum = 0.0;
    int64_t n_pairs = 0;
    for (size_t start = 0; start < order.size(); start += cfg.sts.batch) {
      size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.sts.batch));
      std::vector<TokenSequence> bs;
      std::vector<const Tensor*> za, zb;
      std::vector<double> targets;
      for (size_t i = start; i < end; ++i) {
        const SentencePair& p = train[order[i]];
        const TokenSequence& q = train_seqs[order[i]];
        bs.push_back(q);
        za.push_back(&cache.get(p.text_a, q.a_len));
        zb.push_back(&cache.get(p.text_b, q.b_len));
        targets.push_back(binary ? p.label : p.label / 5.0);
      }
      Tensor z = stack_aligned(bs, za, zb, adims.E);
      Tape tape;
      TapeBinding bind(tape, store, is_trainable);
      PairBatchOut fw = attn_forward(tape, bind, adims, bs, z);
      VarId loss = attn_loss(tape, fw.logits, targets, binary);
      double lv = tape.scalar_val(loss);
      check_finite_loss(lv, "sts", epoch);
      tape.backward(loss);
      bind.harvest();
      opt.step(store, trainable, cfg.clip_norm);
      loss_sum += lv * static_cast<double>(bs.size());
      n_pairs += static_cast<int64_t>(bs.size());
    }
    train_curve.push_back(loss_sum / static_cast<double>(n_pairs));

    auto dev_preds = predict_scores(store, adims, C.ds.dev, seqs[1], cache, binary, cfg.sts.batch);
    EvalReport dev_rep = evaluate(dev_preds, dev_labels, binary);
    double metric = binary ? dev_rep.f1 : dev_rep.spearman.value_or(-1.0);
    dev_curve.push_back(metric);

    if (metric > best_metric) {
      best_metric = metric;
      best_epoch = epoch;
      since_best = 0;
      best_attn.clear();
      for (const auto& name : trainable) best_attn.emplace(name, store.at(name));
    } else if (cfg.sts.patience > 0 && ++since_best >= cfg.sts.patience) {
      break;
    }
  }

  store.load(best_attn);  // restore the selected pair-encoder parameters

  StageResult res;
  res.checkpoint_path = (fs::path(cfg.output_dir) / "sts.tqt").string();
  save_tensors(store.snapshot(), res.checkpoint_path);

  res.report = make_report(cfg, "sts");
  res.report["metrics"]["best_epoch"] = best_epoch;
  res.report["metrics"]["epochs_run"] = epochs_run;
  res.report["metrics"]["dev_metric"] = best_metric;
  if (!C.ds.test.empty()) {
    auto test_preds = predict_scores(store, adims, C.ds.test, seqs[2], cache, binary, cfg.sts.batch);
    EvalReport t = evaluate(test_preds, labels_of(C.ds.test), binary);
    res.report["metrics"]["test_accuracy"] = t.accuracy;
    res.report["metrics"]["test_f1"] = t.f1;
    res.report["metrics"]["test_pearson"] = json_opt(t.pearson);
    res.report["metrics"]["test_spearman"] = json_opt(t.spearman);
  }
  res.report["curves"]["train_loss"] = train_curve;
  res.report["curves"]["dev_metric"] = dev_curve;
  res.metrics_path = write_json(res.report, (fs::path(cfg.output_dir) / "sts_metrics.json").string());
  return res;
}

// ---------------------------------------------------------------------------
// Frozen evaluation over all splits
// ---------------------------------------------------------------------------

StageResult run_eval(const RunConfig& cfg) {
  if (cfg.dataset.empty()) throw UsageError("dataset directory is required");
  std::string path = resolve_checkpoint(cfg, {"sts.tqt"}, "sts");
  ParamStore store = store_from(load_tensors(path));
  if (!store.has("attn.tok_emb"))
    throw UsageError("checkpoint has no pair-encoder parameters; run train-sts first");

  const ModelShape shape = shape_from_store(store);
  const int K = static_cast<int>(store.at(vq_codebook_name(store)).rows());
  const VqDims vdims = vq_dims_from(store, K);
  const AttnDims adims = attn_dims_from(store, vdims.E);

  Corpora C = load_corpora(cfg, shape.with_topics);
  check_vocab_match("sequence", vdims.V_seq, C.seq_vocab.size());
  if (shape.with_topics)
    check_vocab_match("topic", ntm_dims_from(store).V, C.ntm_vocab.size());

  const bool binary = C.ds.label_kind == LabelKind::binary;

  std::vector<const std::vector<SentencePair>*> splits{&C.ds.train, &C.ds.dev, &C.ds.test};
  std::vector<std::vector<TokenSequence>> seqs(splits.size());
  for (size_t s = 0; s < splits.size(); ++s)
    for (const auto& p : *splits[s]) seqs[s].push_back(to_sequence(p, C.seq_vocab, adims.L));
  ZqCache cache = build_zq_cache(store, shape, C.seq_vocab, C.ntm_vocab, splits, seqs, adims.E);

  StageResult res;
  res.report = make_report(cfg, "eval");
  const char* split_names[3] = {"train", "dev", "test"};
  for (size_t s = 0; s < splits.size(); ++s) {
    if (splits[s]->empty()) {
      res.report["metrics"][split_names[s]] = nullptr;
      continue;
    }
    auto preds = predict_scores(store, adims, *splits[s], seqs[s], cache, binary,
                                std::max(1, cfg.sts.batch));
    res.report["metrics"][split_names[s]] =
        eval_report_json(evaluate(preds, labels_of(*splits[s]), binary));
  }

  if (!cfg.output_dir.empty()) {
    fs::create_directories(cfg.output_dir);
    res.metrics_path =
        write_json(res.report, (fs::path(cfg.output_dir) / "eval_metrics.json").string());
  }
  return res;
}

// ---------------------------------------------------------------------------
// Inspections
// ---------------------------------------------------------------------------

std::string run_inspect_topics(const RunConfig& cfg) {
  if (cfg.dataset.empty()) throw UsageError("dataset directory is required");
  std::string path = resolve_checkpoint(cfg, {"sts.tqt", "joint.tqt", "ntm.tqt"}, "ntm");
  ParamStore store = store_from(load_tensors(path));
  if (!store.has("ntm.phi"))
    throw UsageError("checkpoint has no topic parameters (trained with no_topic_model?)");

  Corpora C = load_corpora(cfg, /*need_ntm_vocab=*/true);
  check_vocab_match("topic", ntm_dims_from(store).V, C.ntm_vocab.size());

  Tensor beta = ntm_beta_matrix(store);
  const int K = static_cast<int>(beta.rows());
  const int V = static_cast<int>(beta.cols());
  std::string out;
  for (int k = 0; k < K; ++k) {
    std::vector<int> idx(V);
    for (int v = 0; v < V; ++v) idx[v] = v;
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
      double ma = beta.at(k, a), mb = beta.at(k, b);
      if (ma != mb) return ma > mb;
      return a < b;
    });
    out += std::to_string(k);
    out += '\t';
    const int top = std::min(V, 10);
    for (int i = 0; i < top; ++i) {
      if (i) out += ',';
      out += C.ntm_vocab.id_to_token[idx[i]];
    }
    out += '\n';
  }
  if (!cfg.output_dir.empty()) {
    fs::create_directories(cfg.output_dir);
    std::ofstream f(fs::path(cfg.output_dir) / "topics.tsv", std::ios::binary);
    f << out;
  }
  return out;
}

std::string run_inspect_codebook(const RunConfig& cfg) {
  if (cfg.dataset.empty()) throw UsageError("dataset directory is required");
  std::string path = resolve_checkpoint(cfg, {"sts.tqt", "joint.tqt"}, "joint");
  ParamStore store = store_from(load_tensors(path));
  if (!store.has("vq.tok_emb"))
    throw UsageError("checkpoint has no quantizer parameters; run train-joint first");

  const ModelShape shape = shape_from_store(store);
  Corpora C = load_corpora(cfg, shape.with_topics);
  const int K = static_cast<int>(store.at(vq_codebook_name(store)).rows());
  const VqDims vdims = vq_dims_from(store, K);
  check_vocab_match("sequence", vdims.V_seq, C.seq_vocab.size());
  if (shape.with_topics)
    check_vocab_match("topic", ntm_dims_from(store).V, C.ntm_vocab.size());

  WordClusters wc = vq_word_clusters(store, C.train_sents, C.seq_vocab, C.ntm_vocab,
                                     vdims.max_len, shape.with_topics);
  std::string out;
  for (int k = 0; k < K; ++k) {
    out += std::to_string(k);
    out += '\t';
    out += std::to_string(wc.usage[k]);
    out += '\t';
    const size_t top = std::min<size_t>(wc.words[k].size(), 10);
    for (size_t i = 0; i < top; ++i) {
      if (i) out += ',';
      out += wc.words[k][i].first;
    }
    out += '\n';
  }
  if (!cfg.output_dir.empty()) {
    fs::create_directories(cfg.output_dir);
    std::ofstream f(fs::path(cfg.output_dir) / "codebook.tsv", std::ios::binary);
    f << out;
  }
  return out;
}

std::vector<std::string> run_dump_attention(const RunConfig& cfg,
                                            const std::string& pair_id) {
  if (cfg.dataset.empty()) throw UsageError("dataset directory is required");
  if (cfg.output_dir.empty()) throw UsageError("output_dir is required");
  std::string path = resolve_checkpoint(cfg, {"sts.tqt"}, "sts");
  ParamStore store = store_from(load_tensors(path));
  if (!store.has("attn.tok_emb"))
    throw UsageError("checkpoint has no pair-encoder parameters; run train-sts first");

  const ModelShape shape = shape_from_store(store);
  const int K = static_cast<int>(store.at(vq_codebook_name(store)).rows());
  const VqDims vdims = vq_dims_from(store, K);
  const AttnDims adims = attn_dims_from(store, vdims.E);

  Corpora C = load_corpora(cfg, shape.with_topics);
  check_vocab_match("sequence", vdims.V_seq, C.seq_vocab.size());
  if (shape.with_topics)
    check_vocab_match("topic", ntm_dims_from(store).V, C.ntm_vocab.size());

  const SentencePair* pair = nullptr;
  for (const auto* split : {&C.ds.train, &C.ds.dev, &C.ds.test}) {
    for (const auto& p : *split)
      if (p.id == pair_id) {
        pair = &p;
        break;
      }
    if (pair) break;
  }
  if (!pair) throw DataError("pair id not found in the dataset: " + pair_id);

  std::vector<const std::vector<SentencePair>*> one{nullptr};
  std::vector<SentencePair> only{*pair};
  one[0] = &only;
  std::vector<std::vector<TokenSequence>> seqs(1);
  seqs[0].push_back(to_sequence(*pair, C.seq_vocab, adims.L));
  ZqCache cache = build_zq_cache(store, shape, C.seq_vocab, C.ntm_vocab, one, seqs, adims.E);

  const TokenSequence& q = seqs[0][0];
  std::vector<const Tensor*> za{&cache.get(pair->text_a, q.a_len)};
  std::vector<const Tensor*> zb{&cache.get(pair->text_b, q.b_len)};
  Tensor z = stack_aligned(seqs[0], za, zb, adims.E);

  Tape tape;
  TapeBinding bind(tape, store, [](const std::string&) { return false; });
  std::vector<AttnCollector> collect;
  attn_forward(tape, bind, adims, seqs[0], z, &collect);

  std::string header;
  for (size_t i = 0; i < q.ids.size(); ++i) {
    if (i) header += ',';
    header += C.seq_vocab.id_to_token[q.ids[i]];
  }

  fs::create_directories(cfg.output_dir);
  std::vector<std::string> files;
  for (size_t l = 0; l < collect.size(); ++l) {
    for (size_t h = 0; h < collect[l].maps[0].size(); ++h) {
      const Tensor& m = collect[l].maps[0][h];
      std::string body = header + '\n';
      for (int64_t r = 0; r < m.rows(); ++r) {
        for (int64_t c = 0; c < m.cols(); ++c) {
          if (c) body += ',';
          body += fmt_g(m.at(r, c));
        }
        body += '\n';
      }
      fs::path fp = fs::path(cfg.output_dir) /
                    ("attention_l" + std::to_string(l) + "_h" + std::to_string(h) + ".csv");
      std::ofstream f(fp, std::ios::binary);
      if (!f) throw UsageError("cannot write " + fp.string());
      f << body;
      files.push_back(fp.string());
    }
  }
  return files;
}

}  // namespace topiq
