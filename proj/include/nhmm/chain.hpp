#pragma once

// Constrained transition matrices and the augmented pair-level chain: two
// units of one cluster evolve jointly on states w = (u, v1, v2), a Markov
// chain with k1*k2*k2 states whose probabilities factorize over the
// cluster chain and the two unit chains.

#include "nhmm/types.hpp"

#include <cmath>

namespace nhmm {

// Band matrix with a single off-diagonal parameter: boundary rows keep
// 1-rho on the diagonal, interior rows 1-2*rho flanked by rho on both
// sides. Rows sum to 1 by construction.
inline Matrix build_tridiagonal(int k, double rho) {
  if (k < 2) throw Error("config_error", "tridiagonal transition needs k >= 2");
  if (!(rho > 0.0 && rho < 0.5))
    throw Error("config_error", "rho must lie in (0, 0.5), got " + std::to_string(rho));
  Matrix M = Matrix::Zero(k, k);
  M(0, 0) = 1.0 - rho;
  M(0, 1) = rho;
  for (int i = 1; i + 1 < k; ++i) {
    M(i, i - 1) = rho;
    M(i, i) = 1.0 - 2.0 * rho;
    M(i, i + 1) = rho;
  }
  M(k - 1, k - 2) = rho;
  M(k - 1, k - 1) = 1.0 - rho;
  return M;
}

struct AugmentedChain {
  int k1 = 1, k2 = 1;
  int k = 1;    // k1 * k2 * k2
  Vector phi;   // initial probabilities, length k
  Matrix Phi;   // k x k transition matrix

  // w = (u, v1, v2), u-major then v1 then v2, zero-based
  static int flat_index(int u, int v1, int v2, int k2) { return (u * k2 + v1) * k2 + v2; }
  int index(int u, int v1, int v2) const { return flat_index(u, v1, v2, k2); }
};

inline AugmentedChain compose_augmented(const Vector& lambda, const Matrix& Lambda,
                                        const Vector& pi, const Matrix& Pi) {
  const int k1 = static_cast<int>(lambda.size());
  const int k2 = static_cast<int>(pi.size());
  if (Lambda.rows() != k1 || Lambda.cols() != k1 || Pi.rows() != k2 || Pi.cols() != k2)
    throw Error("parameter_error", "chain dimension mismatch in compose_augmented");

  AugmentedChain ch;
  ch.k1 = k1;
  ch.k2 = k2;
  ch.k = k1 * k2 * k2;
  ch.phi.resize(ch.k);
  ch.Phi.resize(ch.k, ch.k);

  for (int u = 0; u < k1; ++u)
    for (int v1 = 0; v1 < k2; ++v1)
      for (int v2 = 0; v2 < k2; ++v2)
        ch.phi[ch.index(u, v1, v2)] = lambda[u] * pi[v1] * pi[v2];

  for (int u0 = 0; u0 < k1; ++u0)
    for (int a0 = 0; a0 < k2; ++a0)
      for (int b0 = 0; b0 < k2; ++b0) {
        const int r = ch.index(u0, a0, b0);
        for (int u = 0; u < k1; ++u)
          for (int a = 0; a < k2; ++a)
            for (int b = 0; b < k2; ++b)
              ch.Phi(r, ch.index(u, a, b)) = Lambda(u0, u) * Pi(a0, a) * Pi(b0, b);
      }
  return ch;
}

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double linear_predictor(const ParameterSet& th, int u, int v, const Vector& x,
                               const Vector& z) {
  double lp = th.intercept + th.alpha[u] + th.beta[v];
  if (x.size() > 0) lp += x.dot(th.gamma);
  if (z.size() > 0) lp += z.dot(th.delta);
  return lp;
}

// p(y | u, v, x, z): Bernoulli probability or Gaussian density.
inline double measurement_prob(double y, const ParameterSet& th, const ModelSpec& spec, int u,
                               int v, const Vector& x, const Vector& z) {
  const double lp = linear_predictor(th, u, v, x, z);
  if (spec.family == MeasurementFamily::Bernoulli) {
    const double p = logistic(lp);
    return y != 0.0 ? p : 1.0 - p;
  }
  const double r = y - lp;
  return std::exp(-0.5 * r * r / th.sigma2) / std::sqrt(2.0 * M_PI * th.sigma2);
}

// k1 x k2 table of p(y | u, v) for one unit at one occasion; all ones when
// the occasion is masked out of the likelihood.
inline Matrix unit_measurement_table(double y, bool measured, const ParameterSet& th,
                                     const ModelSpec& spec, const Vector& x, const Vector& z) {
  const int k1 = static_cast<int>(th.alpha.size());
  const int k2 = static_cast<int>(th.beta.size());
  if (!measured) return Matrix::Ones(k1, k2);
  Matrix tab(k1, k2);
  for (int u = 0; u < k1; ++u)
    for (int v = 0; v < k2; ++v) tab(u, v) = measurement_prob(y, th, spec, u, v, x, z);
  return tab;
}

// Emission vector of the augmented chain: element at w = (u, v1, v2) is the
// product of the two per-unit conditional densities.
inline Vector pair_emission_vector(const Matrix& table_i, const Matrix& table_j) {
  const int k1 = static_cast<int>(table_i.rows());
  const int k2 = static_cast<int>(table_i.cols());
  Vector m(k1 * k2 * k2);
  for (int u = 0; u < k1; ++u)
    for (int v1 = 0; v1 < k2; ++v1)
      for (int v2 = 0; v2 < k2; ++v2)
        m[AugmentedChain::flat_index(u, v1, v2, k2)] = table_i(u, v1) * table_j(u, v2);
  return m;
}

inline Vector pair_emission_vector(double y_i, bool measured_i, const Vector& z_i, double y_j,
                                   bool measured_j, const Vector& z_j, const Vector& x,
                                   const ParameterSet& th, const ModelSpec& spec) {
  return pair_emission_vector(unit_measurement_table(y_i, measured_i, th, spec, x, z_i),
                              unit_measurement_table(y_j, measured_j, th, spec, x, z_j));
}

}  // namespace nhmm
