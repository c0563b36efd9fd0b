#pragma once

// Panel simulator: draws cluster- and unit-level latent paths from their
// chains, then responses conditionally on states and covariates. Every
// draw is keyed by (seed, purpose, cluster, unit, occasion) through a
// counter RNG, so generation is order-independent and clusters could be
// produced in parallel without changing the output.

#include "nhmm/chain.hpp"
#include "nhmm/parameters.hpp"
#include "nhmm/rng.hpp"
#include "nhmm/types.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace nhmm {

enum class CovariateKind { Constant, Uniform, Binary, LaggedResponse };

struct CovariateGenerator {
  std::string name;
  CovariateKind kind = CovariateKind::Constant;
  double a = 0.0;  // Constant: value; Uniform: lower; Binary: success rate
  double b = 0.0;  // Uniform: upper
};

struct SimDesign {
  int H = 1;
  int size_min = 1, size_max = 1;  // cluster sizes, uniform on the range
  int T = 1;
  ModelSpec spec;
  ParameterSet theta;
  std::vector<CovariateGenerator> cluster_covariates;
  std::vector<CovariateGenerator> unit_covariates;  // at most one LaggedResponse
  std::uint64_t seed = 1;

  void validate() const {
    spec.validate();
    if (H < 1 || T < 1 || size_min < 1 || size_max < size_min)
      throw Error("config_error", "invalid simulation shape");
    int lagged = 0;
    for (const auto& g : cluster_covariates)
      if (g.kind == CovariateKind::LaggedResponse)
        throw Error("config_error", "lagged-response column must be a unit covariate");
    for (const auto& g : unit_covariates)
      if (g.kind == CovariateKind::LaggedResponse) ++lagged;
    if (lagged > 1)
      throw Error("config_error", "at most one covariate may be the lagged response");
    check_parameter_set_or_throw(theta, spec);
  }
};

// True latent paths, emitted separately from the dataset so a fit can
// never ingest them by accident.
struct LatentRecord {
  std::vector<std::vector<int>> cluster_states;               // [h][t], zero-based
  std::vector<std::vector<std::vector<int>>> unit_states;     // [h][i][t]
};

struct SimResult {
  PanelDataset data;
  LatentRecord latent;
};

namespace detail {

enum : std::uint64_t {
  kSimSize = 1,
  kSimClusterChain = 2,
  kSimUnitChain = 3,
  kSimResponse = 4,
  kSimResponseAux = 5,
  kSimClusterCov = 6,
  kSimUnitCov = 7
};

inline int draw_categorical(const Vector& p, double u) {
  double acc = 0.0;
  for (int i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return i;
  }
  return static_cast<int>(p.size()) - 1;
}

inline double generate_covariate(const CovariateGenerator& g, double u) {
  switch (g.kind) {
    case CovariateKind::Constant: return g.a;
    case CovariateKind::Uniform: return g.a + (g.b - g.a) * u;
    case CovariateKind::Binary: return u < g.a ? 1.0 : 0.0;
    case CovariateKind::LaggedResponse: return 0.0;  // filled by the caller
  }
  return 0.0;
}

}  // namespace detail

inline SimResult simulate(const SimDesign& d) {
  d.validate();
  const std::uint64_t seed = d.seed;
  const int T = d.T;

  int lag_col = -1;
  for (std::size_t j = 0; j < d.unit_covariates.size(); ++j)
    if (d.unit_covariates[j].kind == CovariateKind::LaggedResponse) lag_col = static_cast<int>(j);

  SimResult out;
  out.data.T = T;
  for (const auto& g : d.unit_covariates) out.data.unit_covariate_names.push_back(g.name);
  for (const auto& g : d.cluster_covariates) out.data.cluster_covariate_names.push_back(g.name);
  out.latent.cluster_states.resize(d.H);
  out.latent.unit_states.resize(d.H);

  for (int h = 0; h < d.H; ++h) {
    ClusterData cl;
    cl.cluster_id = "c" + std::to_string(h + 1);

    int nh = d.size_min;
    if (d.size_max > d.size_min) {
      const double u = keyed_u01(seed, detail::kSimSize, h, 0, 0);
      nh = d.size_min + static_cast<int>(u * (d.size_max - d.size_min + 1));
      nh = std::min(nh, d.size_max);
    }

    auto& upath = out.latent.cluster_states[h];
    upath.resize(T);
    upath[0] = detail::draw_categorical(d.theta.lambda,
                                        keyed_u01(seed, detail::kSimClusterChain, h, 0, 1));
    for (int t = 1; t < T; ++t)
      upath[t] = detail::draw_categorical(d.theta.Lambda.row(upath[t - 1]).transpose(),
                                          keyed_u01(seed, detail::kSimClusterChain, h, 0, t + 1));

    cl.cluster_covariates.assign(T, std::vector<double>(d.cluster_covariates.size(), 0.0));
    for (int t = 0; t < T; ++t)
      for (std::size_t j = 0; j < d.cluster_covariates.size(); ++j)
        cl.cluster_covariates[t][j] = detail::generate_covariate(
            d.cluster_covariates[j], keyed_u01(seed, detail::kSimClusterCov, h, j, t + 1));

    out.latent.unit_states[h].resize(nh);
    for (int i = 0; i < nh; ++i) {
      UnitData un;
      un.unit_id = "u" + std::to_string(i + 1);

      auto& vpath = out.latent.unit_states[h][i];
      vpath.resize(T);
      vpath[0] = detail::draw_categorical(d.theta.pi,
                                          keyed_u01(seed, detail::kSimUnitChain, h, i + 1, 1));
      for (int t = 1; t < T; ++t)
        vpath[t] = detail::draw_categorical(d.theta.Pi.row(vpath[t - 1]).transpose(),
                                            keyed_u01(seed, detail::kSimUnitChain, h, i + 1, t + 1));

      un.responses.resize(T);
      un.unit_covariates.assign(T, std::vector<double>(d.unit_covariates.size(), 0.0));
      un.measurement_mask.assign(T, true);

      for (int t = 0; t < T; ++t) {
        for (std::size_t j = 0; j < d.unit_covariates.size(); ++j) {
          if (static_cast<int>(j) == lag_col) {
            // y^(t-1) for t >= 2; the first occasion takes 0, which is
            // inert under condition-on-first masking
            un.unit_covariates[t][j] = t > 0 ? un.responses[t - 1] : 0.0;
          } else {
            un.unit_covariates[t][j] = detail::generate_covariate(
                d.unit_covariates[j],
                keyed_u01(seed, detail::kSimUnitCov, h, (static_cast<std::uint64_t>(i + 1) << 20) + j,
                          t + 1));
          }
        }
        Vector xv(d.cluster_covariates.size()), zv(d.unit_covariates.size());
        for (std::size_t j = 0; j < d.cluster_covariates.size(); ++j)
          xv[static_cast<int>(j)] = cl.cluster_covariates[t][j];
        for (std::size_t j = 0; j < d.unit_covariates.size(); ++j)
          zv[static_cast<int>(j)] = un.unit_covariates[t][j];

        const double lp = linear_predictor(d.theta, upath[t], vpath[t], xv, zv);
        if (d.spec.family == MeasurementFamily::Bernoulli) {
          const double u = keyed_u01(seed, detail::kSimResponse, h, i + 1, t + 1);
          un.responses[t] = u < logistic(lp) ? 1.0 : 0.0;
        } else {
          const double u1 = keyed_u01(seed, detail::kSimResponse, h, i + 1, t + 1);
          const double u2 = keyed_u01(seed, detail::kSimResponseAux, h, i + 1, t + 1);
          const double n01 = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
          un.responses[t] = lp + std::sqrt(d.theta.sigma2) * n01;
        }
      }
      cl.units.push_back(std::move(un));
    }
    out.data.clusters.push_back(std::move(cl));
  }
  return out;
}

}  // namespace nhmm
