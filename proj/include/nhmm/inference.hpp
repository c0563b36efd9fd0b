#pragma once

// Sandwich inference for the pairwise-likelihood estimator. Per-cluster
// score vectors come out of the E-step machinery through the Fisher
// identity: the gradient of a cluster's pairwise log-likelihood equals the
// gradient of its expected complete-data pairwise log-likelihood evaluated
// at the same parameter point. The bread matrix is obtained by central
// differences of the analytic total score; the covariance is J^-1 K J^-1
// on the unconstrained parameter scale, with delta-method transforms back
// to the natural scale.

#include "nhmm/em.hpp"
#include "nhmm/parameters.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace nhmm {

struct NaturalEstimate {
  std::string name;
  double estimate = 0.0;
  double std_error = std::numeric_limits<double>::quiet_NaN();
};

struct InferenceReport {
  std::vector<std::string> names;  // unconstrained coordinates
  Vector estimates;                // theta-hat, flattened
  Matrix J_hat, K_hat;
  Matrix covariance;               // J^-1 K J^-1, empty when covariance_ok == false
  Vector std_errors, z_values, p_values;
  double ploglik = 0.0;
  double clic = std::numeric_limits<double>::quiet_NaN();
  double clic_penalty = std::numeric_limits<double>::quiet_NaN();
  double j_rcond = 0.0;       // reciprocal condition number of J_hat
  double j_asymmetry = 0.0;   // relative asymmetry before symmetrization
  bool covariance_ok = false;
  std::string failure;        // set when covariance_ok == false
  std::vector<NaturalEstimate> natural;
};

namespace detail {

inline void add_simplex_score(Vector& s, int off, const Vector& p, const Vector& counts) {
  const int k = static_cast<int>(p.size());
  if (k <= 1) return;
  const double tot = counts.sum();
  for (int c = 1; c < k; ++c) s[off + c - 1] += counts[c] - p[c] * tot;
}

inline void add_transition_score(Vector& s, int off, TransitionKind kind, const Matrix& M,
                                 const Matrix& counts) {
  const int k = static_cast<int>(M.rows());
  if (k <= 1) return;
  switch (kind) {
    case TransitionKind::Unconstrained: {
      for (int r = 0; r < k; ++r) {
        const double rs = counts.row(r).sum();
        for (int c = 1; c < k; ++c) s[off + r * (k - 1) + c - 1] += counts(r, c) - M(r, c) * rs;
      }
      break;
    }
    case TransitionKind::TridiagonalConstant: {
      const double rho = tridiagonal_rho(M);
      double A = 0.0, B = counts(0, 0) + counts(k - 1, k - 1), C = 0.0;
      for (int i = 0; i + 1 < k; ++i) A += counts(i, i + 1) + counts(i + 1, i);
      for (int i = 1; i + 1 < k; ++i) C += counts(i, i);
      const double fprime = A / rho - B / (1.0 - rho) - 2.0 * C / (1.0 - 2.0 * rho);
      s[off] += fprime * rho * (1.0 - 2.0 * rho);  // chain rule through logit(2*rho)
      break;
    }
    case TransitionKind::Diagonal:
      break;
  }
}

// Per-cluster gradients of the pairwise log-likelihood at theta, plus the
// total pairwise log-likelihood from the same forward passes.
inline std::pair<Matrix, double> cluster_scores_view(const PanelView& v, const ModelSpec& spec,
                                                     const ParameterSet& th, int threads) {
  const FlatLayout L = FlatLayout::make(spec);
  const auto tabs = measurement_tables(v, spec, th);
  const ChainTables ct = ChainTables::make(th.lambda, th.Lambda, th.pi, th.Pi);
  const int k1 = spec.k1, k2 = spec.k2;

  // pairs are emitted cluster by cluster
  std::vector<std::pair<int, int>> range(v.H, {0, 0});
  for (int h = 0, i = 0; h < v.H; ++h) {
    range[h].first = i;
    while (i < static_cast<int>(v.pairs.size()) && v.pairs[i].cluster == h) ++i;
    range[h].second = i;
  }

  struct Acc {
    Matrix S;
    double ll = 0.0;
    PairWorkspace ws;
  };
  Acc result = parallel_reduce(
      static_cast<std::size_t>(v.H), threads,
      [&] { return Acc{Matrix::Zero(v.H, L.size), 0.0, {}}; },
      [&](Acc& acc, std::size_t hs) {
        const int h = static_cast<int>(hs);
        const int ub = v.cluster_begin[h], ue = v.cluster_begin[h + 1];
        ExpectedCounts local = ExpectedCounts::zero(k1, k2, ue - ub, v.T);

        for (int ip = range[h].first; ip < range[h].second; ++ip) {
          const PairTerm& pr = v.pairs[ip];
          decorate_pair_error(
              v, pr, [&] { accumulate_pair(v, tabs, ct, pr, local, acc.ws, ub); });
        }
        acc.ll += local.ploglik;

        Vector s = Vector::Zero(L.size);
        add_simplex_score(s, L.lambda_off, th.lambda, local.lambda_counts);
        add_transition_score(s, L.Lambda_off, spec.cluster_transition, th.Lambda,
                             local.Lambda_counts);
        add_simplex_score(s, L.pi_off, th.pi, local.pi_counts);
        add_transition_score(s, L.Pi_off, spec.unit_transition, th.Pi, local.Pi_counts);

        for (int g = ub; g < ue; ++g) {
          for (int t = 0; t < v.T; ++t) {
            if (!v.measured[g][t]) continue;
            const Vector xv = v.x[h].row(t).transpose();
            const Vector zv = v.z[g].row(t).transpose();
            for (int u = 0; u < k1; ++u)
              for (int vv = 0; vv < k2; ++vv) {
                const double w = local.unit_weights[g - ub][t](u, vv);
                if (w <= 0.0) continue;
                const double lp = linear_predictor(th, u, vv, xv, zv);
                const double y = v.y[g][t];
                double resid;
                if (spec.family == MeasurementFamily::Bernoulli) {
                  resid = w * (y - logistic(lp));
                } else {
                  const double r = y - lp;
                  resid = w * r / th.sigma2;
                  s[L.sigma_off] += w * (r * r / (2.0 * th.sigma2) - 0.5);
                }
                s[L.intercept_off] += resid;
                if (u >= 1) s[L.alpha_off + u - 1] += resid;
                if (vv >= 1) s[L.beta_off + vv - 1] += resid;
                for (int j = 0; j < v.q1; ++j) s[L.gamma_off + j] += resid * xv[j];
                for (int j = 0; j < v.q2; ++j) s[L.delta_off + j] += resid * zv[j];
              }
          }
        }
        acc.S.row(h) = s;
      },
      [](Acc& a, const Acc& b) {
        a.S += b.S;
        a.ll += b.ll;
      });
  return {std::move(result.S), result.ll};
}

inline Vector total_score_at(const PanelView& v, const ModelSpec& spec, const Vector& flat,
                             int threads) {
  const ParameterSet th = unflatten_parameters(flat, spec);
  auto sc = cluster_scores_view(v, spec, th, threads);
  return sc.first.colwise().sum().transpose();
}

}  // namespace detail

inline Matrix cluster_scores(const PanelDataset& data, const ModelSpec& spec,
                             const ParameterSet& th, const EmConfig& cfg = {}) {
  check_parameter_set_or_throw(th, spec);
  const PanelView v = PanelView::build(data, spec, cfg.strict_pairs);
  return detail::cluster_scores_view(v, spec, th, cfg.threads).first;
}

inline InferenceReport sandwich(const PanelDataset& data, const ModelSpec& spec,
                                const ParameterSet& theta_hat, const EmConfig& cfg = {}) {
  check_parameter_set_or_throw(theta_hat, spec);
  const PanelView v = PanelView::build(data, spec, cfg.strict_pairs);
  const FlatLayout L = FlatLayout::make(spec);
  const Vector flat = flatten_parameters(theta_hat, spec);
  const int p = L.size;

  InferenceReport rep;
  rep.names = L.names;
  rep.estimates = flat;

  auto sc = detail::cluster_scores_view(v, spec, theta_hat, cfg.threads);
  rep.ploglik = sc.second;
  rep.K_hat = sc.first.transpose() * sc.first;

  // bread: central differences of the analytic score
  Matrix J(p, p);
  for (int j = 0; j < p; ++j) {
    const double step = std::max(1e-5, 1e-5 * std::abs(flat[j]));
    Vector hi = flat, lo = flat;
    hi[j] += step;
    lo[j] -= step;
    const Vector ghi = detail::total_score_at(v, spec, hi, cfg.threads);
    const Vector glo = detail::total_score_at(v, spec, lo, cfg.threads);
    J.col(j) = -(ghi - glo) / (2.0 * step);
  }
  const double jnorm = J.cwiseAbs().maxCoeff();
  rep.j_asymmetry = jnorm > 0.0 ? (J - J.transpose()).cwiseAbs().maxCoeff() / jnorm : 0.0;
  rep.J_hat = 0.5 * (J + J.transpose());

  Eigen::JacobiSVD<Matrix> svd(rep.J_hat, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const double smax = svd.singularValues()[0];
  const double smin = svd.singularValues()[p - 1];
  rep.j_rcond = smax > 0.0 ? smin / smax : 0.0;

  const auto nat = natural_parameters(theta_hat, spec);
  rep.natural.resize(nat.size());
  for (std::size_t i = 0; i < nat.size(); ++i)
    rep.natural[i] = {nat[i].name, nat[i].value, std::numeric_limits<double>::quiet_NaN()};

  if (rep.j_rcond < 1e-12) {
    rep.failure = "J_hat is numerically singular (rcond " + std::to_string(rep.j_rcond) + ")";
    const double nan = std::numeric_limits<double>::quiet_NaN();
    rep.std_errors = Vector::Constant(p, nan);
    rep.z_values = Vector::Constant(p, nan);
    rep.p_values = Vector::Constant(p, nan);
    return rep;
  }

  const Matrix Jinv = rep.J_hat.fullPivLu().inverse();
  Matrix Sigma = Jinv * rep.K_hat * Jinv;
  Sigma = 0.5 * (Sigma + Sigma.transpose()).eval();
  rep.covariance = Sigma;
  rep.covariance_ok = true;

  rep.std_errors.resize(p);
  rep.z_values.resize(p);
  rep.p_values.resize(p);
  for (int j = 0; j < p; ++j) {
    rep.std_errors[j] = std::sqrt(std::max(Sigma(j, j), 0.0));
    rep.z_values[j] = rep.std_errors[j] > 0.0 ? flat[j] / rep.std_errors[j]
                                              : std::numeric_limits<double>::quiet_NaN();
    rep.p_values[j] = std::erfc(std::abs(rep.z_values[j]) / std::sqrt(2.0));
  }

  rep.clic_penalty = (rep.K_hat * Jinv).trace();
  rep.clic = rep.ploglik - rep.clic_penalty;

  const Matrix G = natural_jacobian(theta_hat, spec);
  const Matrix nat_cov = G * Sigma * G.transpose();
  for (std::size_t i = 0; i < rep.natural.size(); ++i)
    rep.natural[i].std_error = std::sqrt(std::max(nat_cov(static_cast<int>(i),
                                                          static_cast<int>(i)), 0.0));
  return rep;
}

inline double clic(const PanelDataset& data, const ModelSpec& spec, const ParameterSet& theta_hat,
                   const EmConfig& cfg = {}) {
  const InferenceReport rep = sandwich(data, spec, theta_hat, cfg);
  if (!rep.covariance_ok) throw Error("singular_hessian", rep.failure);
  return rep.clic;
}

// ---- model selection over a (k1, k2) grid ----

struct GridCell {
  int k1 = 1, k2 = 1;
  bool ok = false;
  std::string error;
  double ploglik = std::numeric_limits<double>::quiet_NaN();
  double clic = std::numeric_limits<double>::quiet_NaN();
  double worst_ascent_step = 0.0;
  bool converged = false;
  bool best = false;
};

struct GridResult {
  std::vector<int> k1_values, k2_values;
  std::vector<GridCell> cells;  // k1-major
  int best_index = -1;

  const GridCell* best() const { return best_index >= 0 ? &cells[best_index] : nullptr; }
};

// Fits every (k1, k2) cell independently and flags the CLIC argmax.
// A transition constraint that needs k >= 2 silently becomes moot on the
// k == 1 margin of the grid (the 1 x 1 transition matrix is fixed anyway).
inline GridResult select_grid(const PanelDataset& data, int k1_lo, int k1_hi, int k2_lo,
                              int k2_hi, const ModelSpec& tmpl, const EmConfig& cfg = {}) {
  if (k1_lo < 1 || k2_lo < 1 || k1_hi < k1_lo || k2_hi < k2_lo)
    throw Error("config_error", "invalid state-count ranges for model selection");

  GridResult grid;
  for (int a = k1_lo; a <= k1_hi; ++a) grid.k1_values.push_back(a);
  for (int b = k2_lo; b <= k2_hi; ++b) grid.k2_values.push_back(b);

  double best_clic = -std::numeric_limits<double>::infinity();
  for (int a = k1_lo; a <= k1_hi; ++a) {
    for (int b = k2_lo; b <= k2_hi; ++b) {
      GridCell cell;
      cell.k1 = a;
      cell.k2 = b;
      ModelSpec spec = tmpl;
      spec.k1 = a;
      spec.k2 = b;
      if (a == 1) spec.cluster_transition = TransitionKind::Unconstrained;
      if (b == 1) spec.unit_transition = TransitionKind::Unconstrained;
      try {
        const FitResult f = fit(data, spec, cfg);
        const InferenceReport rep = sandwich(data, spec, f.theta_hat, cfg);
        cell.ploglik = f.ploglik;
        cell.worst_ascent_step = f.worst_ascent_step;
        cell.converged = f.converged;
        if (!rep.covariance_ok) {
          cell.error = rep.failure;
        } else {
          cell.clic = rep.clic;
          cell.ok = true;
          if (rep.clic > best_clic) {
            best_clic = rep.clic;
            grid.best_index = static_cast<int>(grid.cells.size());
          }
        }
      } catch (const Error& e) {
        cell.error = e.what();
      }
      grid.cells.push_back(std::move(cell));
    }
  }
  if (grid.best_index >= 0) grid.cells[grid.best_index].best = true;
  return grid;
}

}  // namespace nhmm
