#pragma once

// Scaled forward recursion for the pair log-likelihood and forward-backward
// smoothing for the E-step posteriors, both on the augmented pair chain.
// Each forward step renormalizes the state vector to sum 1 and accumulates
// the log of the scale factor, so long panels cannot underflow.

#include "nhmm/chain.hpp"
#include "nhmm/types.hpp"

#include <array>
#include <cmath>
#include <vector>

namespace nhmm {

// Posterior expectations of the latent-state indicators for one pair:
// gammas[t] is E[d^(t)(w)] and xis[t-1] is E[d^(t)(wbar, w)] for t >= 2.
struct PairPosterior {
  double loglik = 0.0;
  std::vector<Vector> gammas;  // T vectors of length k
  std::vector<Matrix> xis;     // T-1 matrices, k x k
};

namespace detail {

// Shared forward pass; posteriors() reuses it so its loglik matches
// forward_loglik bit for bit. alphas/scales may be null.
inline double forward_pass(const AugmentedChain& chain, const std::vector<Vector>& emissions,
                           std::vector<Vector>* alphas, std::vector<double>* scales) {
  const int T = static_cast<int>(emissions.size());
  if (T == 0) throw Error("internal_error", "empty emission sequence");
  double loglik = 0.0;
  Vector q = chain.phi.cwiseProduct(emissions[0]);
  for (int t = 0; t < T; ++t) {
    if (t > 0) q = (chain.Phi.transpose() * q).cwiseProduct(emissions[t]).eval();
    const double scale = q.sum();
    if (!(scale > 0.0)) throw ZeroLikelihoodError(t + 1);
    q /= scale;
    loglik += std::log(scale);
    if (alphas) (*alphas)[t] = q;
    if (scales) (*scales)[t] = scale;
  }
  return loglik;
}

}  // namespace detail

inline double forward_loglik(const AugmentedChain& chain, const std::vector<Vector>& emissions) {
  return detail::forward_pass(chain, emissions, nullptr, nullptr);
}

inline PairPosterior posteriors(const AugmentedChain& chain, const std::vector<Vector>& emissions) {
  const int T = static_cast<int>(emissions.size());
  std::vector<Vector> alphas(T);
  std::vector<double> scales(T);
  PairPosterior post;
  post.loglik = detail::forward_pass(chain, emissions, &alphas, &scales);

  std::vector<Vector> betas(T);
  betas[T - 1] = Vector::Ones(chain.k);
  for (int t = T - 2; t >= 0; --t)
    betas[t] = (chain.Phi * emissions[t + 1].cwiseProduct(betas[t + 1])) / scales[t + 1];

  post.gammas.resize(T);
  for (int t = 0; t < T; ++t) post.gammas[t] = alphas[t].cwiseProduct(betas[t]);
  post.xis.resize(T - 1);
  for (int t = 1; t < T; ++t) {
    const Vector mb = emissions[t].cwiseProduct(betas[t]);
    post.xis[t - 1] = (alphas[t - 1] * mb.transpose()).cwiseProduct(chain.Phi) / scales[t];
  }
  return post;
}

// Expected counts of one pair collapsed from the augmented states onto the
// component chains: cluster occupancies/transitions, per-member unit
// occupancies/transitions, and the per-occasion joint (u, v) mass per
// member that drives the regression update.
struct CollapsedCounts {
  std::vector<Vector> cluster_occ;                    // T x k1
  Matrix cluster_trans;                               // k1 x k1, summed over t
  std::array<std::vector<Vector>, 2> unit_occ;        // per member: T x k2
  std::array<Matrix, 2> unit_trans;                   // per member: k2 x k2, summed
  std::array<std::vector<Matrix>, 2> joint_occ;       // per member: T x (k1 x k2)
};

inline CollapsedCounts collapse_posteriors(const PairPosterior& post, int k1, int k2) {
  const int T = static_cast<int>(post.gammas.size());
  CollapsedCounts c;
  c.cluster_occ.assign(T, Vector::Zero(k1));
  c.cluster_trans = Matrix::Zero(k1, k1);
  for (int m = 0; m < 2; ++m) {
    c.unit_occ[m].assign(T, Vector::Zero(k2));
    c.unit_trans[m] = Matrix::Zero(k2, k2);
    c.joint_occ[m].assign(T, Matrix::Zero(k1, k2));
  }

  for (int t = 0; t < T; ++t) {
    const Vector& g = post.gammas[t];
    for (int u = 0; u < k1; ++u)
      for (int v1 = 0; v1 < k2; ++v1)
        for (int v2 = 0; v2 < k2; ++v2) {
          const double p = g[AugmentedChain::flat_index(u, v1, v2, k2)];
          c.cluster_occ[t][u] += p;
          c.unit_occ[0][t][v1] += p;
          c.unit_occ[1][t][v2] += p;
          c.joint_occ[0][t](u, v1) += p;
          c.joint_occ[1][t](u, v2) += p;
        }
  }

  for (const Matrix& xi : post.xis) {
    for (int u0 = 0; u0 < k1; ++u0)
      for (int a0 = 0; a0 < k2; ++a0)
        for (int b0 = 0; b0 < k2; ++b0) {
          const int r = AugmentedChain::flat_index(u0, a0, b0, k2);
          for (int u = 0; u < k1; ++u)
            for (int a = 0; a < k2; ++a)
              for (int b = 0; b < k2; ++b) {
                const double p = xi(r, AugmentedChain::flat_index(u, a, b, k2));
                c.cluster_trans(u0, u) += p;
                c.unit_trans[0](a0, a) += p;
                c.unit_trans[1](b0, b) += p;
              }
        }
  }
  return c;
}

}  // namespace nhmm
