#include "ntm.hpp"

#include <cmath>

namespace topiq {

namespace {

constexpr double kLogFloor = 1e-12;

Tensor linear_init(int64_t in, int64_t out, Rng& rng) {
  return Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
}

}  // namespace

void ntm_init(ParamStore& store, const NtmDims& d, Rng& rng) {
  store.add("ntm.enc1.w", linear_init(d.V, d.H, rng));
  store.add("ntm.enc1.b", Tensor::zeros({d.H}));
  store.add("ntm.enc2.w", linear_init(d.H, d.H, rng));
  store.add("ntm.enc2.b", Tensor::zeros({d.H}));
  store.add("ntm.mu.w", linear_init(d.H, d.K, rng));
  store.add("ntm.mu.b", Tensor::zeros({d.K}));
  store.add("ntm.logvar.w", linear_init(d.H, d.K, rng));
  store.add("ntm.logvar.b", Tensor::zeros({d.K}));
  store.add("ntm.omega", Tensor::randn({d.V, d.E}, rng, 1.0 / std::sqrt(d.E)));
  store.add("ntm.phi", Tensor::randn({d.K, d.E}, rng, 1.0 / std::sqrt(d.E)));
}

NtmDims ntm_dims_from(const ParamStore& store) {
  NtmDims d;
  d.V = static_cast<int>(store.at("ntm.omega").rows());
  d.E = static_cast<int>(store.at("ntm.omega").cols());
  d.K = static_cast<int>(store.at("ntm.phi").rows());
  d.H = static_cast<int>(store.at("ntm.enc1.w").cols());
  return d;
}

Tensor bow_to_dense(const std::vector<BoWVector>& docs, int V) {
  Tensor t = Tensor::zeros({static_cast<int64_t>(docs.size()), V});
  for (size_t i = 0; i < docs.size(); ++i)
    for (auto& [id, c] : docs[i].counts) t.at(static_cast<int64_t>(i), id) = c;
  return t;
}

double bow_total_tokens(const std::vector<BoWVector>& docs) {
  double n = 0.0;
  for (const BoWVector& d : docs) n += d.total;
  return n;
}

void ntm_encode(Tape& tape, TapeBinding& bind, VarId counts, VarId* mu, VarId* logvar) {
  VarId h1 = tape.gelu(tape.bias_add(tape.matmul(counts, bind("ntm.enc1.w")), bind("ntm.enc1.b")));
  VarId h2 = tape.gelu(tape.bias_add(tape.matmul(h1, bind("ntm.enc2.w")), bind("ntm.enc2.b")));
  *mu = tape.bias_add(tape.matmul(h2, bind("ntm.mu.w")), bind("ntm.mu.b"));
  *logvar = tape.bias_add(tape.matmul(h2, bind("ntm.logvar.w")), bind("ntm.logvar.b"));
}

VarId ntm_sample_theta(Tape& tape, VarId mu, VarId logvar, const Tensor& noise) {
  VarId sigma = tape.exp(tape.scale(logvar, 0.5));
  VarId jitter = tape.mul(sigma, tape.constant(noise));
  return tape.softmax_rows(tape.add(mu, jitter));
}

VarId ntm_compute_beta(Tape& tape, TapeBinding& bind) {
  return tape.softmax_rows(tape.matmul_nt(bind("ntm.phi"), bind("ntm.omega")));
}

NtmElboParts ntm_elbo(Tape& tape, VarId counts, VarId theta, VarId beta, VarId mu,
                      VarId logvar) {
  // mixture likelihood p(w|theta) = theta^T beta[:, w]
  VarId p = tape.matmul(theta, beta);  // B x V
  VarId weighted = tape.mul(tape.log_floored(p, kLogFloor), counts);
  NtmElboParts parts;
  parts.recon_sum = tape.scale(tape.sum(weighted), -1.0);

  const Tensor& m = tape.val(mu);
  VarId ones = tape.constant(Tensor::full(m.shape, 1.0));
  VarId inner = tape.sub(tape.add(tape.mul(mu, mu), tape.exp(logvar)),
                         tape.add(logvar, ones));
  parts.kl_sum = tape.scale(tape.sum(inner), 0.5);
  return parts;
}

NtmForwardOut ntm_forward(Tape& tape, TapeBinding& bind, const Tensor& counts,
                          const Tensor* noise) {
  NtmForwardOut out;
  int64_t B = counts.rows();
  VarId c = tape.constant(counts);
  ntm_encode(tape, bind, c, &out.mu, &out.logvar);
  Tensor z = noise ? *noise : Tensor::zeros(tape.val(out.mu).shape);
  out.theta = ntm_sample_theta(tape, out.mu, out.logvar, z);
  out.beta = ntm_compute_beta(tape, bind);
  NtmElboParts parts = ntm_elbo(tape, c, out.theta, out.beta, out.mu, out.logvar);
  out.recon_sum = parts.recon_sum;
  out.kl_sum = parts.kl_sum;
  out.loss_mean = tape.scale(tape.add(out.recon_sum, out.kl_sum),
                             1.0 / static_cast<double>(B));
  return out;
}

double ntm_perplexity(ParamStore& store, const std::vector<BoWVector>& docs, int V) {
  if (docs.empty()) throw UsageError("ntm_perplexity: empty dataset");
  double tokens = bow_total_tokens(docs);
  if (tokens <= 0.0) throw DataError("ntm_perplexity: zero total tokens");
  Tape tape;
  TapeBinding bind(tape, store, [](const std::string&) { return false; });
  NtmForwardOut out = ntm_forward(tape, bind, bow_to_dense(docs, V), nullptr);
  return std::exp(tape.scalar_val(out.recon_sum) / tokens);
}

Tensor ntm_beta_matrix(ParamStore& store) {
  Tape tape;
  TapeBinding bind(tape, store, [](const std::string&) { return false; });
  return tape.val(ntm_compute_beta(tape, bind));
}

Tensor ntm_theta_vector(ParamStore& store, const BoWVector& d, int V) {
  Tape tape;
  TapeBinding bind(tape, store, [](const std::string&) { return false; });
  VarId mu, logvar;
  VarId c = tape.constant(bow_to_dense({d}, V));
  ntm_encode(tape, bind, c, &mu, &logvar);
  VarId theta = ntm_sample_theta(tape, mu, logvar, Tensor::zeros({1, tape.val(mu).cols()}));
  return tape.val(theta);
}

}  // namespace topiq
