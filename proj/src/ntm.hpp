#pragma once

#include <vector>

#include "corpus.hpp"
#include "params.hpp"

namespace topiq {

struct NtmDims {
  int V = 0;  // BoW vocabulary
  int H = 0;  // encoder width
  int K = 0;  // topics
  int E = 0;  // embedding width (shared with the code width)
};

// Registers ntm.* parameters; two GELU encoder layers, mu/logvar heads, word
// embeddings omega (V x E) and topic embeddings phi (K x E).
void ntm_init(ParamStore& store, const NtmDims& dims, Rng& rng);
NtmDims ntm_dims_from(const ParamStore& store);

// B x V dense count matrix from sparse BoW rows.
Tensor bow_to_dense(const std::vector<BoWVector>& docs, int V);
double bow_total_tokens(const std::vector<BoWVector>& docs);

// Encoder: counts (B x V) -> mu, logvar (B x K each).
void ntm_encode(Tape& tape, TapeBinding& bind, VarId counts, VarId* mu, VarId* logvar);

// theta = softmax(mu + exp(logvar / 2) * noise); noise B x K, zeros for the
// deterministic path.
VarId ntm_sample_theta(Tape& tape, VarId mu, VarId logvar, const Tensor& noise);

// beta = row softmax of phi . omega^T (K x V).
VarId ntm_compute_beta(Tape& tape, TapeBinding& bind);

struct NtmElboParts {
  VarId recon_sum;  // -sum_d sum_w counts log(theta^T beta[:,w]), floored logs
  VarId kl_sum;     // 0.5 sum (mu^2 + sigma^2 - logvar - 1)
};

NtmElboParts ntm_elbo(Tape& tape, VarId counts, VarId theta, VarId beta, VarId mu,
                      VarId logvar);

struct NtmForwardOut {
  VarId mu, logvar, theta, beta;
  VarId recon_sum, kl_sum;
  VarId loss_mean;  // (recon_sum + kl_sum) / B
};

// noise == nullptr -> zero noise (deterministic theta)
NtmForwardOut ntm_forward(Tape& tape, TapeBinding& bind, const Tensor& counts,
                          const Tensor* noise);

// exp(total recon / total tokens) over the dataset, noise = 0.
double ntm_perplexity(ParamStore& store, const std::vector<BoWVector>& docs, int V);

// Evaluation helpers over frozen parameters.
Tensor ntm_beta_matrix(ParamStore& store);                       // K x V
Tensor ntm_theta_vector(ParamStore& store, const BoWVector& d, int V);  // 1 x K

}  // namespace topiq
