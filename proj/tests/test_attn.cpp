#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "attn.hpp"
#include "doctest.h"

using namespace topiq;

namespace {

// [CLS] a0 a1 [SEP] b0 b1 [SEP] pad... with given total length
TokenSequence make_pair_seq(int L, const std::vector<int>& a, const std::vector<int>& b) {
  TokenSequence s;
  s.ids.assign(static_cast<size_t>(L), kPadId);
  size_t p = 0;
  s.ids[p++] = kClsId;
  s.a_start = static_cast<int>(p);
  s.a_len = static_cast<int>(a.size());
  for (int id : a) s.ids[p++] = id;
  s.ids[p++] = kSepId;
  s.b_start = static_cast<int>(p);
  s.b_len = static_cast<int>(b.size());
  for (int id : b) s.ids[p++] = id;
  s.ids[p++] = kSepId;
  s.length = static_cast<int>(p);
  s.mask.assign(static_cast<size_t>(L), 0);
  for (size_t i = 0; i < p; ++i) s.mask[i] = 1;
  return s;
}

Tensor stack_aligned(const std::vector<TokenSequence>& pairs,
                     const std::vector<Tensor>& aligned, int E) {
  int64_t L = static_cast<int64_t>(pairs[0].ids.size());
  Tensor out = Tensor::zeros({static_cast<int64_t>(pairs.size()) * L, E});
  for (size_t s = 0; s < pairs.size(); ++s)
    for (int64_t r = 0; r < L; ++r)
      for (int e = 0; e < E; ++e)
        out.at(static_cast<int64_t>(s) * L + r, e) = aligned[s].at(r, e);
  return out;
}

AttnDims small_dims() {
  AttnDims d;
  d.V_seq = 12;
  d.E = 3;
  d.heads = 2;
  d.layers = 2;
  d.L = 8;
  d.ffn_mult = 1;
  d.head_hidden = 4;
  d.semantics_layers = {1};
  return d;
}

}  // namespace

TEST_CASE("aligned quantized rows: placement, zeros, and swap behavior") {
  TokenSequence seq = make_pair_seq(8, {5, 6}, {7, 8});
  Tensor zq_a({2, 2}, {1.0, 2.0, 3.0, 4.0});
  Tensor zq_b({2, 2}, {5.0, 6.0, 7.0, 8.0});
  Tensor z = attn_align_quantized(seq, zq_a, zq_b, 2);
  REQUIRE(z.rows() == 8);
  REQUIRE(z.cols() == 2);
  // CLS, both SEPs, and the PAD tail are zero rows
  for (int64_t r : {0L, 3L, 6L, 7L})
    for (int64_t e = 0; e < 2; ++e) CHECK(z.at(r, e) == 0.0);
  CHECK(z.at(1, 0) == 1.0);
  CHECK(z.at(2, 1) == 4.0);
  CHECK(z.at(4, 0) == 5.0);
  CHECK(z.at(5, 1) == 8.0);

  // swapping the sentences moves the blocks with them
  TokenSequence swapped = make_pair_seq(8, {7, 8}, {5, 6});
  Tensor zs = attn_align_quantized(swapped, zq_b, zq_a, 2);
  for (int i = 0; i < 2; ++i)
    for (int e = 0; e < 2; ++e) {
      CHECK(zs.at(swapped.a_start + i, e) == z.at(seq.b_start + i, e));
      CHECK(zs.at(swapped.b_start + i, e) == z.at(seq.a_start + i, e));
    }

  // row-count mismatch is rejected
  Tensor bad({1, 2}, {9.0, 9.0});
  CHECK_THROWS_AS(attn_align_quantized(seq, bad, zq_b, 2), UsageError);
}

TEST_CASE("score composition matches a hand-evaluated 2x2 case") {
  // scores = (Q K^T + Qq Kq^T) / sqrt(d_k), d_k = 1
  Tape tape;
  VarId q = tape.constant(Tensor({2, 1}, {1.0, 0.0}));
  VarId k = tape.constant(Tensor({2, 1}, {2.0, -1.0}));
  VarId v = tape.constant(Tensor({2, 1}, {3.0, 5.0}));
  VarId qq = tape.constant(Tensor({2, 1}, {0.5, 1.0}));
  VarId kq = tape.constant(Tensor({2, 1}, {-1.0, 2.0}));
  VarId scores = tape.scale(tape.add(tape.matmul_nt(q, k), tape.matmul_nt(qq, kq)), 1.0);
  VarId attn = tape.softmax_rows(scores);
  VarId out = tape.matmul(attn, v);

  // independent arithmetic: summed scores [[1.5, 0], [-1, 2]]
  auto soft2 = [](double x0, double x1, double* p0, double* p1) {
    double m = std::max(x0, x1);
    double e0 = std::exp(x0 - m), e1 = std::exp(x1 - m);
    *p0 = e0 / (e0 + e1);
    *p1 = e1 / (e0 + e1);
  };
  double a00, a01, a10, a11;
  soft2(1.5, 0.0, &a00, &a01);
  soft2(-1.0, 2.0, &a10, &a11);
  CHECK(tape.val(out).at(0, 0) == doctest::Approx(a00 * 3.0 + a01 * 5.0).epsilon(1e-15));
  CHECK(tape.val(out).at(1, 0) == doctest::Approx(a10 * 3.0 + a11 * 5.0).epsilon(1e-15));
}

TEST_CASE("zero extra projections reduce bitwise to the plain encoder") {
  for (uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL, 5ULL}) {
    AttnDims d = small_dims();
    ParamStore enhanced;
    Rng rng(seed);
    attn_init(enhanced, d, rng);
    for (const char* name : {"attn.l1.sem.wq", "attn.l1.sem.wk"})
      for (double& x : enhanced.at(name).values) x = 0.0;

    AttnDims plain_d = d;
    plain_d.semantic_attention = false;
    ParamStore plain;
    Rng rng2(seed + 99);  // values are overwritten below; draws are irrelevant
    attn_init(plain, plain_d, rng2);
    plain.load(enhanced.snapshot());

    std::vector<TokenSequence> pairs = {make_pair_seq(8, {5, 6}, {7, 8}),
                                        make_pair_seq(8, {9, 10, 11}, {4})};
    Rng zrng(seed + 7);
    std::vector<Tensor> aligned;
    aligned.push_back(attn_align_quantized(
        pairs[0], Tensor::randn({2, 3}, zrng), Tensor::randn({2, 3}, zrng), 3));
    aligned.push_back(attn_align_quantized(
        pairs[1], Tensor::randn({3, 3}, zrng), Tensor::randn({1, 3}, zrng), 3));
    Tensor z_raw = stack_aligned(pairs, aligned, 3);

    Tape t1, t2;
    TapeBinding b1(t1, enhanced), b2(t2, plain);
    PairBatchOut o1 = attn_forward(t1, b1, d, pairs, z_raw, nullptr);
    PairBatchOut o2 = attn_forward(t2, b2, plain_d, pairs, z_raw, nullptr);
    CHECK(t1.val(o1.h_final).values == t2.val(o2.h_final).values);
    CHECK(t1.val(o1.logits).values == t2.val(o2.logits).values);
  }
}

TEST_CASE("empty semantics set equals the disabled-attention switch bitwise") {
  AttnDims d = small_dims();
  d.semantics_layers = {};
  AttnDims d2 = small_dims();
  d2.semantic_attention = false;
  ParamStore s1, s2;
  Rng r1(42), r2(42);
  attn_init(s1, d, r1);
  attn_init(s2, d2, r2);  // same draw sequence: neither registers extra tensors
  std::vector<TokenSequence> pairs = {make_pair_seq(8, {5}, {6, 7})};
  Tensor z_raw = stack_aligned(
      pairs,
      {attn_align_quantized(pairs[0], Tensor::full({1, 3}, 0.5),
                            Tensor::full({2, 3}, -0.25), 3)},
      3);
  Tape t1, t2;
  TapeBinding b1(t1, s1), b2(t2, s2);
  PairBatchOut o1 = attn_forward(t1, b1, d, pairs, z_raw, nullptr);
  PairBatchOut o2 = attn_forward(t2, b2, d2, pairs, z_raw, nullptr);
  CHECK(t1.val(o1.logits).values == t2.val(o2.logits).values);
}

TEST_CASE("attention rows are stochastic over real tokens and zero on padding") {
  AttnDims d = small_dims();
  ParamStore store;
  Rng rng(11);
  attn_init(store, d, rng);
  std::vector<TokenSequence> pairs = {make_pair_seq(8, {5, 6}, {7}),
                                      make_pair_seq(8, {4}, {9})};
  Rng zrng(13);
  std::vector<Tensor> aligned = {
      attn_align_quantized(pairs[0], Tensor::randn({2, 3}, zrng),
                           Tensor::randn({1, 3}, zrng), 3),
      attn_align_quantized(pairs[1], Tensor::randn({1, 3}, zrng),
                           Tensor::randn({1, 3}, zrng), 3)};
  Tensor z_raw = stack_aligned(pairs, aligned, 3);
  Tape tape;
  TapeBinding bind(tape, store);
  std::vector<AttnCollector> maps;
  attn_forward(tape, bind, d, pairs, z_raw, &maps);
  REQUIRE(maps.size() == 2);
  for (const AttnCollector& layer : maps) {
    REQUIRE(layer.maps.size() == 2);  // one entry per pair
    for (size_t g = 0; g < layer.maps.size(); ++g) {
      REQUIRE(layer.maps[g].size() == static_cast<size_t>(d.heads));
      for (const Tensor& m : layer.maps[g]) {
        REQUIRE(m.rows() == d.L);
        REQUIRE(m.cols() == d.L);
        for (int64_t r = 0; r < d.L; ++r) {
          double s = 0.0;
          for (int64_t c = 0; c < d.L; ++c) {
            if (!pairs[g].mask[static_cast<size_t>(c)])
              CHECK(m.at(r, c) == 0.0);
            else
              CHECK(m.at(r, c) >= 0.0);
            s += m.at(r, c);
          }
          CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("padding content never reaches the CLS logit") {
  AttnDims d = small_dims();
  ParamStore store;
  Rng rng(17);
  attn_init(store, d, rng);
  std::vector<TokenSequence> pairs = {make_pair_seq(8, {5}, {6})};  // 3 PAD slots
  Tensor z_raw = stack_aligned(
      pairs,
      {attn_align_quantized(pairs[0], Tensor::full({1, 3}, 1.0),
                            Tensor::full({1, 3}, 2.0), 3)},
      3);
  auto run = [&](const std::vector<TokenSequence>& ps) {
    Tape tape;
    TapeBinding bind(tape, store);
    return tape.val(attn_forward(tape, bind, d, ps, z_raw, nullptr).logits).values;
  };
  std::vector<double> base = run(pairs);
  std::vector<TokenSequence> scrambled = pairs;
  scrambled[0].ids[5] = 11;  // rewrite the masked tail
  scrambled[0].ids[6] = 4;
  scrambled[0].ids[7] = 9;
  CHECK(run(scrambled) == base);
}

TEST_CASE("zeroed head weights give probability one half") {
  AttnDims d = small_dims();
  ParamStore store;
  Rng rng(19);
  attn_init(store, d, rng);
  for (const char* name : {"attn.head.w1", "attn.head.b1", "attn.head.w2",
                           "attn.head.b2"})
    for (double& x : store.at(name).values) x = 0.0;
  std::vector<TokenSequence> pairs = {make_pair_seq(8, {5, 6}, {7, 8})};
  Tensor z_raw = stack_aligned(
      pairs,
      {attn_align_quantized(pairs[0], Tensor::full({2, 3}, 0.3),
                            Tensor::full({2, 3}, 0.6), 3)},
      3);
  Tape tape;
  TapeBinding bind(tape, store);
  PairBatchOut out = attn_forward(tape, bind, d, pairs, z_raw, nullptr);
  CHECK(tape.val(out.logits).at(0, 0) == 0.0);
  CHECK(attn_report_score(0.0, true) == 0.5);
}

TEST_CASE("raising a final weight on a positive activation raises the logit") {
  AttnDims d = small_dims();
  ParamStore store;
  Rng rng(23);
  attn_init(store, d, rng);
  // force every hidden head activation to gelu(1) > 0
  for (double& x : store.at("attn.head.w1").values) x = 0.0;
  for (double& x : store.at("attn.head.b1").values) x = 1.0;
  std::vector<TokenSequence> pairs = {make_pair_seq(8, {5}, {6})};
  Tensor z_raw = stack_aligned(
      pairs,
      {attn_align_quantized(pairs[0], Tensor::full({1, 3}, 0.2),
                            Tensor::full({1, 3}, 0.4), 3)},
      3);
  auto logit_with = [&](double w) {
    store.at("attn.head.w2").values.assign(static_cast<size_t>(d.head_hidden), w);
    Tape tape;
    TapeBinding bind(tape, store);
    return tape.val(attn_forward(tape, bind, d, pairs, z_raw, nullptr).logits).at(0, 0);
  };
  CHECK(logit_with(0.2) > logit_with(0.1));
}

TEST_CASE("pair losses and reported scores follow the stated forms") {
  Tape tape;
  VarId logits = tape.constant(Tensor({2, 1}, {0.0, std::log(3.0)}));
  double bce = tape.scalar_val(attn_loss(tape, logits, {0.0, 1.0}, true));
  double expect = 0.5 * (-std::log(0.5) - std::log(0.75));
  CHECK(bce == doctest::Approx(expect).epsilon(1e-12));

  VarId scores = tape.constant(Tensor({2, 1}, {0.2, 0.8}));
  double m = tape.scalar_val(attn_loss(tape, scores, {0.1, 0.5}, false));
  CHECK(m == doctest::Approx(0.5 * (0.01 + 0.09)).epsilon(1e-12));

  CHECK(attn_report_score(0.0, true) == doctest::Approx(0.5));
  CHECK(attn_report_score(0.3, false) == doctest::Approx(1.5));
  CHECK(attn_report_score(-0.1, false) == 0.0);
  CHECK(attn_report_score(1.2, false) == 5.0);
  CHECK_THROWS_AS(attn_loss(tape, logits, {1.0}, true), UsageError);
}

TEST_CASE("binary objective passes finite differences over every parameter") {
  AttnDims d = small_dims();
  ParamStore store;
  Rng rng(29);
  attn_init(store, d, rng);
  std::vector<TokenSequence> pairs = {make_pair_seq(8, {5, 6}, {7, 8}),
                                      make_pair_seq(8, {9, 10}, {11})};
  Rng zrng(31);
  std::vector<Tensor> aligned = {
      attn_align_quantized(pairs[0], Tensor::randn({2, 3}, zrng),
                           Tensor::randn({2, 3}, zrng), 3),
      attn_align_quantized(pairs[1], Tensor::randn({2, 3}, zrng),
                           Tensor::randn({1, 3}, zrng), 3)};
  Tensor z_raw = stack_aligned(pairs, aligned, 3);
  std::vector<double> labels = {1.0, 0.0};

  auto run = [&](bool with_back) {
    Tape tape;
    TapeBinding bind(tape, store);
    PairBatchOut out = attn_forward(tape, bind, d, pairs, z_raw, nullptr);
    VarId loss = attn_loss(tape, out.logits, labels, true);
    if (with_back) {
      tape.backward(loss);
      bind.harvest();
    }
    return tape.scalar_val(loss);
  };
  store.zero_grads();
  run(true);
  std::vector<std::pair<std::string, Tensor*>> plist;
  for (auto& [name, t] : store.params) plist.push_back({name, &t});
  FdReport rep = finite_diff_check([&] { return run(false); }, plist, 1e-5, 1e-4);
  INFO("max rel err ", rep.max_rel_err);
  for (size_t i = 0; i < rep.failures.size() && i < 5; ++i)
    MESSAGE("fd mismatch at ", rep.failures[i].param, "[", rep.failures[i].index,
            "] analytic=", rep.failures[i].analytic,
            " numeric=", rep.failures[i].numeric);
  CHECK(rep.pass());
  CHECK(rep.coords_checked > 0);
}

TEST_CASE("regression objective passes finite differences") {
  AttnDims d = small_dims();
  d.semantics_layers = {0, 1};
  ParamStore store;
  Rng rng(37);
  attn_init(store, d, rng);
  std::vector<TokenSequence> pairs = {make_pair_seq(8, {4, 5, 6}, {7})};
  Rng zrng(41);
  Tensor z_raw = stack_aligned(
      pairs,
      {attn_align_quantized(pairs[0], Tensor::randn({3, 3}, zrng),
                            Tensor::randn({1, 3}, zrng), 3)},
      3);
  std::vector<double> targets = {0.64};

  auto run = [&](bool with_back) {
    Tape tape;
    TapeBinding bind(tape, store);
    PairBatchOut out = attn_forward(tape, bind, d, pairs, z_raw, nullptr);
    VarId loss = attn_loss(tape, out.logits, targets, false);
    if (with_back) {
      tape.backward(loss);
      bind.harvest();
    }
    return tape.scalar_val(loss);
  };
  store.zero_grads();
  run(true);
  std::vector<std::pair<std::string, Tensor*>> plist;
  for (auto& [name, t] : store.params) plist.push_back({name, &t});
  FdReport rep = finite_diff_check([&] { return run(false); }, plist, 1e-5, 1e-4);
  INFO("max rel err ", rep.max_rel_err);
  CHECK(rep.pass());
}

TEST_CASE("ablated head widths differ as specified") {
  AttnDims d = small_dims();
  ParamStore full;
  Rng r1(43);
  attn_init(full, d, r1);
  CHECK(full.at("attn.head.w1").rows() == d.width() + d.E);

  AttnDims d2 = small_dims();
  d2.output_enhanced = false;
  ParamStore plain;
  Rng r2(43);
  attn_init(plain, d2, r2);
  CHECK(plain.at("attn.head.w1").rows() == d2.width());
}
