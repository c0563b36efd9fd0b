#pragma once

// Seeded random model instances and panels shared across the test suites.

#include <nhmm/chain.hpp>
#include <nhmm/parameters.hpp>
#include <nhmm/rng.hpp>
#include <nhmm/types.hpp>

#include <string>
#include <vector>

namespace testutil {

using nhmm::Matrix;
using nhmm::Vector;

inline Vector random_simplex(int k, nhmm::SeqRng& rng) {
  Vector v(k);
  for (int i = 0; i < k; ++i) v[i] = 0.15 + rng.u01();
  return v / v.sum();
}

inline Matrix random_transition(nhmm::TransitionKind kind, int k, nhmm::SeqRng& rng) {
  if (k == 1) return Matrix::Ones(1, 1);
  switch (kind) {
    case nhmm::TransitionKind::Unconstrained: {
      Matrix M(k, k);
      for (int r = 0; r < k; ++r) M.row(r) = random_simplex(k, rng).transpose();
      return M;
    }
    case nhmm::TransitionKind::TridiagonalConstant:
      return nhmm::build_tridiagonal(k, rng.uniform(0.05, 0.45));
    case nhmm::TransitionKind::Diagonal:
      return Matrix::Identity(k, k);
  }
  return Matrix::Identity(k, k);
}

inline nhmm::ParameterSet random_theta(const nhmm::ModelSpec& spec, nhmm::SeqRng& rng) {
  nhmm::ParameterSet th;
  th.lambda = random_simplex(spec.k1, rng);
  th.Lambda = random_transition(spec.cluster_transition, spec.k1, rng);
  th.pi = random_simplex(spec.k2, rng);
  th.Pi = random_transition(spec.unit_transition, spec.k2, rng);
  th.intercept = rng.uniform(-1.0, 1.0);
  th.alpha = Vector::Zero(spec.k1);
  for (int u = 1; u < spec.k1; ++u) th.alpha[u] = rng.uniform(-1.5, 1.5);
  th.beta = Vector::Zero(spec.k2);
  for (int v = 1; v < spec.k2; ++v) th.beta[v] = rng.uniform(-1.5, 1.5);
  th.gamma = Vector::Zero(static_cast<int>(spec.cluster_covariates.size()));
  for (int j = 0; j < th.gamma.size(); ++j) th.gamma[j] = rng.uniform(-1.0, 1.0);
  th.delta = Vector::Zero(static_cast<int>(spec.unit_covariates.size()));
  for (int j = 0; j < th.delta.size(); ++j) th.delta[j] = rng.uniform(-1.0, 1.0);
  th.sigma2 = spec.family == nhmm::MeasurementFamily::Gaussian ? rng.uniform(0.5, 2.0) : 1.0;
  return th;
}

// Arbitrary well-formed panel; responses need not follow any model.
inline nhmm::PanelDataset random_panel(int H, int min_size, int max_size, int T, int q1, int q2,
                                       bool bernoulli, nhmm::SeqRng& rng) {
  nhmm::PanelDataset data;
  data.T = T;
  for (int j = 0; j < q1; ++j) data.cluster_covariate_names.push_back("x" + std::to_string(j + 1));
  for (int j = 0; j < q2; ++j) data.unit_covariate_names.push_back("z" + std::to_string(j + 1));
  for (int h = 0; h < H; ++h) {
    nhmm::ClusterData cl;
    cl.cluster_id = "c" + std::to_string(h + 1);
    for (int t = 0; t < T; ++t) {
      std::vector<double> row;
      for (int j = 0; j < q1; ++j) row.push_back(rng.uniform(-1.0, 1.0));
      cl.cluster_covariates.push_back(row);
    }
    const int n = min_size + static_cast<int>(rng.u01() * (max_size - min_size + 1));
    for (int i = 0; i < std::max(1, std::min(n, max_size)); ++i) {
      nhmm::UnitData un;
      un.unit_id = "u" + std::to_string(i + 1);
      for (int t = 0; t < T; ++t) {
        un.responses.push_back(bernoulli ? (rng.u01() < 0.5 ? 0.0 : 1.0) : rng.uniform(-2.0, 2.0));
        std::vector<double> row;
        for (int j = 0; j < q2; ++j) row.push_back(rng.uniform(-1.0, 1.0));
        un.unit_covariates.push_back(row);
        un.measurement_mask.push_back(true);
      }
      cl.units.push_back(std::move(un));
    }
    data.clusters.push_back(std::move(cl));
  }
  return data;
}

}  // namespace testutil
