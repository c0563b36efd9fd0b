#pragma once

// Pairwise-likelihood EM. The objective is the sum over all unordered
// within-cluster unit pairs of the log joint manifest probability of the
// pair, computed on the augmented chain. The E-step aggregates collapsed
// pair posteriors; the M-step updates the two chains in closed form (or by
// a 1-D Newton under the tridiagonal constraint) and the measurement
// parameters by weighted Newton-Raphson / weighted least squares.

#include "nhmm/chain.hpp"
#include "nhmm/forward_backward.hpp"
#include "nhmm/parallel.hpp"
#include "nhmm/parameters.hpp"
#include "nhmm/rng.hpp"
#include "nhmm/types.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

namespace nhmm {

struct EmConfig {
  int max_iterations = 5000;
  double rel_tolerance = 1e-8;  // on |delta pl| / (|pl| + 1)
  int n_random_starts = 10;
  std::uint64_t random_seed = 1;
  int newton_max_steps = 100;      // inner regression Newton
  double newton_grad_tol = 1e-8;
  bool strict_pairs = false;  // true = singleton clusters are skipped entirely
  int threads = 0;            // 0 = all hardware threads; 1 = sequential reduction

  void validate() const {
    if (max_iterations < 1 || n_random_starts < 0 || newton_max_steps < 1 ||
        !(rel_tolerance > 0.0) || !(newton_grad_tol > 0.0) || threads < 0)
      throw Error("config_error", "invalid EM configuration");
  }
};

// One term of the pairwise objective. gj == -1 marks the unit-marginal term
// of a singleton cluster, handled as a degenerate pair whose second member
// is fully masked.
struct PairTerm {
  int cluster = 0;
  int gi = 0;
  int gj = -1;
};

// Fitting view of a validated panel: covariates reduced to the selected
// columns, units flattened to a global index, pair terms enumerated.
struct PanelView {
  int H = 0, T = 0, q1 = 0, q2 = 0, n_units = 0;
  std::vector<int> cluster_begin;          // size H+1, global unit ranges
  std::vector<Matrix> x;                   // per cluster: T x q1
  std::vector<Matrix> z;                   // per unit: T x q2
  std::vector<Vector> y;                   // per unit: T
  std::vector<std::vector<bool>> measured; // per unit: T
  std::vector<std::string> cluster_ids, unit_ids;
  std::vector<PairTerm> pairs;

  int cluster_of(int g) const {
    const int H_ = H;
    for (int h = 0; h < H_; ++h)
      if (g < cluster_begin[h + 1]) return h;
    return H_ - 1;
  }

  static PanelView build(const PanelDataset& input, const ModelSpec& spec, bool strict_pairs) {
    PanelDataset data = input;  // masks are (re)derived here
    validate_dataset_or_throw(data, spec);

    PanelView v;
    v.H = data.n_clusters();
    v.T = data.T;
    v.q1 = static_cast<int>(spec.cluster_covariates.size());
    v.q2 = static_cast<int>(spec.unit_covariates.size());

    auto col_index = [](const std::vector<std::string>& names, const std::string& n) {
      for (std::size_t j = 0; j < names.size(); ++j)
        if (names[j] == n) return static_cast<int>(j);
      return -1;
    };
    std::vector<int> xcols, zcols;
    for (const auto& n : spec.cluster_covariates)
      xcols.push_back(col_index(data.cluster_covariate_names, n));
    for (const auto& n : spec.unit_covariates)
      zcols.push_back(col_index(data.unit_covariate_names, n));

    v.cluster_begin.push_back(0);
    for (int h = 0; h < v.H; ++h) {
      const auto& cl = data.clusters[h];
      v.cluster_ids.push_back(cl.cluster_id);
      Matrix xm(v.T, v.q1);
      for (int t = 0; t < v.T; ++t)
        for (int j = 0; j < v.q1; ++j) xm(t, j) = cl.cluster_covariates[t][xcols[j]];
      v.x.push_back(std::move(xm));

      for (const auto& un : cl.units) {
        v.unit_ids.push_back(un.unit_id);
        Matrix zm(v.T, v.q2);
        Vector ym(v.T);
        std::vector<bool> mm(v.T);
        for (int t = 0; t < v.T; ++t) {
          for (int j = 0; j < v.q2; ++j) zm(t, j) = un.unit_covariates[t][zcols[j]];
          ym[t] = un.responses[t];
          mm[t] = un.measurement_mask[t];
        }
        v.z.push_back(std::move(zm));
        v.y.push_back(std::move(ym));
        v.measured.push_back(std::move(mm));
      }
      v.cluster_begin.push_back(static_cast<int>(v.unit_ids.size()));
    }
    v.n_units = static_cast<int>(v.unit_ids.size());

    for (int h = 0; h < v.H; ++h) {
      const int b = v.cluster_begin[h], e = v.cluster_begin[h + 1];
      if (e - b == 1) {
        if (!strict_pairs) v.pairs.push_back({h, b, -1});
        continue;
      }
      for (int i = b; i < e; ++i)
        for (int j = i + 1; j < e; ++j) v.pairs.push_back({h, i, j});
    }
    return v;
  }
};

inline std::vector<PairTerm> enumerate_pairs(const PanelDataset& data, const ModelSpec& spec,
                                             bool strict_pairs = false) {
  return PanelView::build(data, spec, strict_pairs).pairs;
}

// E-step output aggregated over pair terms. Chain counts feed the chain
// M-step; unit_weights[g][t] is the k1 x k2 posterior mass that weights the
// regression pseudo-observations of unit g at occasion t. A unit
// accumulates once per pair containing it; the phantom member of a
// singleton term contributes no counts.
struct ExpectedCounts {
  Vector lambda_counts;
  Matrix Lambda_counts;
  Vector pi_counts;
  Matrix Pi_counts;
  std::vector<std::vector<Matrix>> unit_weights;
  double ploglik = 0.0;
  long n_pair_terms = 0;

  static ExpectedCounts zero(int k1, int k2, int n_units, int T) {
    ExpectedCounts c;
    c.lambda_counts = Vector::Zero(k1);
    c.Lambda_counts = Matrix::Zero(k1, k1);
    c.pi_counts = Vector::Zero(k2);
    c.Pi_counts = Matrix::Zero(k2, k2);
    c.unit_weights.assign(n_units, std::vector<Matrix>(T, Matrix::Zero(k1, k2)));
    return c;
  }

  void add(const ExpectedCounts& o) {
    lambda_counts += o.lambda_counts;
    Lambda_counts += o.Lambda_counts;
    pi_counts += o.pi_counts;
    Pi_counts += o.Pi_counts;
    for (std::size_t g = 0; g < unit_weights.size(); ++g)
      for (std::size_t t = 0; t < unit_weights[g].size(); ++t)
        unit_weights[g][t] += o.unit_weights[g][t];
    ploglik += o.ploglik;
    n_pair_terms += o.n_pair_terms;
  }
};

namespace detail {

// Sparse row view of the augmented transition matrix. The factorized
// transitions are banded under the tridiagonal constraint and diagonal
// under the identity constraint, so iterating structural nonzeros saves a
// large factor on the k1*k2^2 state space; dense matrices degrade
// gracefully to full rows.
struct ChainTables {
  int k1 = 1, k2 = 1, k = 1;
  Vector phi;
  std::vector<int> row_ptr, col;
  std::vector<double> val;
  std::vector<std::array<int, 3>> decode;  // flat w -> (u, v1, v2)

  static ChainTables make(const Vector& lambda, const Matrix& Lambda, const Vector& pi,
                          const Matrix& Pi) {
    ChainTables ct;
    ct.k1 = static_cast<int>(lambda.size());
    ct.k2 = static_cast<int>(pi.size());
    ct.k = ct.k1 * ct.k2 * ct.k2;
    ct.phi.resize(ct.k);
    ct.decode.resize(ct.k);
    for (int u = 0; u < ct.k1; ++u)
      for (int v1 = 0; v1 < ct.k2; ++v1)
        for (int v2 = 0; v2 < ct.k2; ++v2) {
          const int w = AugmentedChain::flat_index(u, v1, v2, ct.k2);
          ct.phi[w] = lambda[u] * pi[v1] * pi[v2];
          ct.decode[w] = {u, v1, v2};
        }

    ct.row_ptr.reserve(ct.k + 1);
    ct.row_ptr.push_back(0);
    for (int u0 = 0; u0 < ct.k1; ++u0)
      for (int a0 = 0; a0 < ct.k2; ++a0)
        for (int b0 = 0; b0 < ct.k2; ++b0) {
          for (int u = 0; u < ct.k1; ++u) {
            const double pu = Lambda(u0, u);
            if (pu == 0.0) continue;
            for (int a = 0; a < ct.k2; ++a) {
              const double pa = pu * Pi(a0, a);
              if (pa == 0.0) continue;
              for (int b = 0; b < ct.k2; ++b) {
                const double p = pa * Pi(b0, b);
                if (p == 0.0) continue;
                ct.col.push_back(AugmentedChain::flat_index(u, a, b, ct.k2));
                ct.val.push_back(p);
              }
            }
          }
          ct.row_ptr.push_back(static_cast<int>(ct.col.size()));
        }
    return ct;
  }
};

// Reusable per-thread scratch for the pair recursions.
struct PairWorkspace {
  std::vector<Vector> emis, alphas, betas;
  std::vector<double> scales;
  Vector qnext, mb;

  void ensure(int T, int k) {
    if (static_cast<int>(emis.size()) < T) {
      emis.resize(T);
      alphas.resize(T);
      betas.resize(T);
      scales.resize(T);
    }
    for (int t = 0; t < T; ++t) {
      if (emis[t].size() != k) {
        emis[t].resize(k);
        alphas[t].resize(k);
        betas[t].resize(k);
      }
    }
    if (qnext.size() != k) {
      qnext.resize(k);
      mb.resize(k);
    }
  }
};

// Per-(unit, occasion) measurement tables at theta; masked occasions get
// all-ones tables so they drop out of every product.
inline std::vector<std::vector<Matrix>> measurement_tables(const PanelView& v,
                                                           const ModelSpec& spec,
                                                           const ParameterSet& th) {
  std::vector<std::vector<Matrix>> tabs(v.n_units);
  for (int h = 0; h < v.H; ++h) {
    for (int g = v.cluster_begin[h]; g < v.cluster_begin[h + 1]; ++g) {
      tabs[g].resize(v.T);
      for (int t = 0; t < v.T; ++t)
        tabs[g][t] = unit_measurement_table(v.y[g][t], v.measured[g][t], th, spec,
                                            v.x[h].row(t).transpose(), v.z[g].row(t).transpose());
    }
  }
  return tabs;
}

inline std::vector<Vector> pair_emissions(const std::vector<std::vector<Matrix>>& tabs,
                                          const PairTerm& pr, int T, int k1, int k2) {
  std::vector<Vector> m(T);
  const int k = k1 * k2 * k2;
  for (int t = 0; t < T; ++t) {
    const Matrix& ti = tabs[pr.gi][t];
    if (pr.gj >= 0) {
      m[t] = pair_emission_vector(ti, tabs[pr.gj][t]);
    } else {
      Vector e(k);
      for (int u = 0; u < k1; ++u)
        for (int v1 = 0; v1 < k2; ++v1)
          for (int v2 = 0; v2 < k2; ++v2)
            e[AugmentedChain::flat_index(u, v1, v2, k2)] = ti(u, v1);
      m[t] = std::move(e);
    }
  }
  return m;
}

inline void fill_pair_emissions(const std::vector<std::vector<Matrix>>& tabs, const PairTerm& pr,
                                const ChainTables& ct, int T, PairWorkspace& ws) {
  for (int t = 0; t < T; ++t) {
    const Matrix& ti = tabs[pr.gi][t];
    Vector& m = ws.emis[t];
    if (pr.gj >= 0) {
      const Matrix& tj = tabs[pr.gj][t];
      for (int w = 0; w < ct.k; ++w) {
        const auto& d = ct.decode[w];
        m[w] = ti(d[0], d[1]) * tj(d[0], d[2]);
      }
    } else {
      for (int w = 0; w < ct.k; ++w) {
        const auto& d = ct.decode[w];
        m[w] = ti(d[0], d[1]);
      }
    }
  }
}

// Scaled forward over the sparse transition rows; fills ws.alphas/scales.
inline double forward_sparse(const ChainTables& ct, int T, PairWorkspace& ws) {
  const int k = ct.k;
  double loglik = 0.0;
  for (int t = 0; t < T; ++t) {
    Vector& a = ws.alphas[t];
    if (t == 0) {
      a = ct.phi.cwiseProduct(ws.emis[0]);
    } else {
      ws.qnext.setZero();
      const Vector& prev = ws.alphas[t - 1];
      for (int w0 = 0; w0 < k; ++w0) {
        const double aw = prev[w0];
        if (aw == 0.0) continue;
        for (int idx = ct.row_ptr[w0]; idx < ct.row_ptr[w0 + 1]; ++idx)
          ws.qnext[ct.col[idx]] += aw * ct.val[idx];
      }
      a = ws.qnext.cwiseProduct(ws.emis[t]);
    }
    const double scale = a.sum();
    if (!(scale > 0.0)) throw ZeroLikelihoodError(t + 1);
    a /= scale;
    ws.scales[t] = scale;
    loglik += std::log(scale);
  }
  return loglik;
}

// One pair term, fused: forward-backward smoothing with the expected counts
// collapsed on the fly into `acc`, never materializing the k x k posterior
// transition matrices. unit_base shifts the unit index when `acc` covers a
// single cluster. The phantom member of a singleton term (gj < 0)
// contributes no counts.
inline double accumulate_pair(const PanelView& v, const std::vector<std::vector<Matrix>>& tabs,
                              const ChainTables& ct, const PairTerm& pr, ExpectedCounts& acc,
                              PairWorkspace& ws, int unit_base = 0) {
  const int T = v.T, k = ct.k;
  ws.ensure(T, k);
  fill_pair_emissions(tabs, pr, ct, T, ws);
  const double loglik = forward_sparse(ct, T, ws);

  ws.betas[T - 1].setOnes();
  for (int t = T - 2; t >= 0; --t) {
    ws.mb = ws.emis[t + 1].cwiseProduct(ws.betas[t + 1]);
    const double inv_c = 1.0 / ws.scales[t + 1];
    Vector& b = ws.betas[t];
    for (int w0 = 0; w0 < k; ++w0) {
      double s = 0.0;
      for (int idx = ct.row_ptr[w0]; idx < ct.row_ptr[w0 + 1]; ++idx)
        s += ct.val[idx] * ws.mb[ct.col[idx]];
      b[w0] = s * inv_c;
    }
  }

  const bool pair_real = pr.gj >= 0;
  auto& wt_i = acc.unit_weights[pr.gi - unit_base];
  auto* wt_j = pair_real ? &acc.unit_weights[pr.gj - unit_base] : nullptr;
  for (int t = 0; t < T; ++t) {
    const Vector& a = ws.alphas[t];
    const Vector& b = ws.betas[t];
    Matrix& wi = wt_i[t];
    Matrix* wj = wt_j ? &(*wt_j)[t] : nullptr;
    for (int w = 0; w < k; ++w) {
      const double g = a[w] * b[w];
      const auto& d = ct.decode[w];
      if (t == 0) {
        acc.lambda_counts[d[0]] += g;
        acc.pi_counts[d[1]] += g;
        if (pair_real) acc.pi_counts[d[2]] += g;
      }
      wi(d[0], d[1]) += g;
      if (wj) (*wj)(d[0], d[2]) += g;
    }
  }

  for (int t = 1; t < T; ++t) {
    ws.mb = ws.emis[t].cwiseProduct(ws.betas[t]);
    const double inv_c = 1.0 / ws.scales[t];
    const Vector& prev = ws.alphas[t - 1];
    for (int w0 = 0; w0 < k; ++w0) {
      const double aw = prev[w0] * inv_c;
      if (aw == 0.0) continue;
      const auto& d0 = ct.decode[w0];
      for (int idx = ct.row_ptr[w0]; idx < ct.row_ptr[w0 + 1]; ++idx) {
        const double x = aw * ct.val[idx] * ws.mb[ct.col[idx]];
        const auto& d = ct.decode[ct.col[idx]];
        acc.Lambda_counts(d0[0], d[0]) += x;
        acc.Pi_counts(d0[1], d[1]) += x;
        if (pair_real) acc.Pi_counts(d0[2], d[2]) += x;
      }
    }
  }

  acc.ploglik += loglik;
  acc.n_pair_terms += 1;
  return loglik;
}

}  // namespace detail

namespace detail {

template <class PairFn>
void decorate_pair_error(const PanelView& v, const PairTerm& pr, PairFn&& fn) {
  try {
    fn();
  } catch (ZeroLikelihoodError& e) {
    e.cluster_id = v.cluster_ids[pr.cluster];
    e.unit_i = v.unit_ids[pr.gi];
    if (pr.gj >= 0) e.unit_j = v.unit_ids[pr.gj];
    throw;
  }
}

inline ExpectedCounts e_step_view(const PanelView& v, const ModelSpec& spec,
                                  const ParameterSet& th, int threads) {
  const auto tabs = measurement_tables(v, spec, th);
  const ChainTables ct = ChainTables::make(th.lambda, th.Lambda, th.pi, th.Pi);

  struct Acc {
    ExpectedCounts counts;
    PairWorkspace ws;
  };
  Acc res = parallel_reduce(
      v.pairs.size(), threads,
      [&] { return Acc{ExpectedCounts::zero(spec.k1, spec.k2, v.n_units, v.T), {}}; },
      [&](Acc& acc, std::size_t idx) {
        const PairTerm& pr = v.pairs[idx];
        decorate_pair_error(v, pr, [&] { accumulate_pair(v, tabs, ct, pr, acc.counts, acc.ws); });
      },
      [](Acc& a, const Acc& b) { a.counts.add(b.counts); });
  return std::move(res.counts);
}

inline double pairwise_loglik_view(const PanelView& v, const ModelSpec& spec,
                                   const ParameterSet& th, int threads) {
  const auto tabs = measurement_tables(v, spec, th);
  const ChainTables ct = ChainTables::make(th.lambda, th.Lambda, th.pi, th.Pi);

  struct Acc {
    double ll = 0.0;
    PairWorkspace ws;
  };
  Acc res = parallel_reduce(
      v.pairs.size(), threads, [] { return Acc{}; },
      [&](Acc& acc, std::size_t idx) {
        const PairTerm& pr = v.pairs[idx];
        decorate_pair_error(v, pr, [&] {
          acc.ws.ensure(v.T, ct.k);
          fill_pair_emissions(tabs, pr, ct, v.T, acc.ws);
          acc.ll += forward_sparse(ct, v.T, acc.ws);
        });
      },
      [](Acc& a, const Acc& b) { a.ll += b.ll; });
  return res.ll;
}

}  // namespace detail

inline double pairwise_loglik(const PanelDataset& data, const ModelSpec& spec,
                              const ParameterSet& th, const EmConfig& cfg = {}) {
  check_parameter_set_or_throw(th, spec);
  const PanelView v = PanelView::build(data, spec, cfg.strict_pairs);
  return detail::pairwise_loglik_view(v, spec, th, cfg.threads);
}

inline ExpectedCounts e_step(const PanelDataset& data, const ModelSpec& spec,
                             const ParameterSet& th, const EmConfig& cfg = {}) {
  check_parameter_set_or_throw(th, spec);
  const PanelView v = PanelView::build(data, spec, cfg.strict_pairs);
  return detail::e_step_view(v, spec, th, cfg.threads);
}

// Maximizer of f(rho) = A log(rho) + B log(1-rho) + C log(1-2*rho) over
// (0, 0.5): A = expected in-band off-diagonal transitions, B = expected
// diagonal transitions in the two boundary rows, C = expected diagonal
// transitions in interior rows. Safeguarded Newton; exact closed form
// A/(A+B) when C == 0.
inline double solve_tridiagonal_rho(double A, double B, double C) {
  const double lo = 1e-8, hi = 0.5 - 1e-8;
  if (!(A >= 0.0 && B >= 0.0 && C >= 0.0))
    throw Error("internal_error", "negative expected counts in tridiagonal update");
  if (A <= 0.0) return lo;
  if (B <= 0.0 && C <= 0.0) return hi;

  auto fp = [&](double r) { return A / r - B / (1.0 - r) - 2.0 * C / (1.0 - 2.0 * r); };
  auto fpp = [&](double r) {
    return -A / (r * r) - B / ((1.0 - r) * (1.0 - r)) -
           4.0 * C / ((1.0 - 2.0 * r) * (1.0 - 2.0 * r));
  };

  double a = lo, b = hi;
  double r = std::clamp(A / (A + B + 2.0 * C), lo, hi);
  const double gtol = 1e-10 * std::max(1.0, A + B + C);
  for (int it = 0; it < 200; ++it) {
    const double g = fp(r);
    if (std::abs(g) <= gtol || (b - a) <= 1e-15) break;
    if (g > 0.0)  // f' is decreasing, root lies to the right
      a = r;
    else
      b = r;
    double rn = r - g / fpp(r);
    if (!(rn > a && rn < b)) rn = 0.5 * (a + b);
    r = rn;
  }
  return r;
}

struct ChainUpdate {
  Vector init;
  Matrix trans;
  bool degenerate = false;  // some row had no expected visits; previous value kept
};

inline ChainUpdate m_step_chain(const Vector& init_counts, const Matrix& trans_counts,
                                TransitionKind kind, const Matrix& prev_trans) {
  const int k = static_cast<int>(init_counts.size());
  ChainUpdate up;
  const double tot = init_counts.sum();
  if (tot > 0.0) {
    up.init = init_counts / tot;
  } else {
    up.init = Vector::Constant(k, 1.0 / k);
    up.degenerate = true;
  }
  if (k == 1) {
    up.trans = Matrix::Ones(1, 1);
    return up;
  }

  switch (kind) {
    case TransitionKind::Unconstrained: {
      up.trans = prev_trans;
      for (int r = 0; r < k; ++r) {
        const double rs = trans_counts.row(r).sum();
        if (rs > 0.0)
          up.trans.row(r) = trans_counts.row(r) / rs;
        else
          up.degenerate = true;  // state never left from: keep previous row
      }
      break;
    }
    case TransitionKind::TridiagonalConstant: {
      double A = 0.0, B = trans_counts(0, 0) + trans_counts(k - 1, k - 1), C = 0.0;
      for (int i = 0; i + 1 < k; ++i) A += trans_counts(i, i + 1) + trans_counts(i + 1, i);
      for (int i = 1; i + 1 < k; ++i) C += trans_counts(i, i);
      if (A + B + C > 0.0) {
        up.trans = build_tridiagonal(k, solve_tridiagonal_rho(A, B, C));
      } else {
        up.trans = prev_trans;  // no transition information (T == 1)
        up.degenerate = true;
      }
      break;
    }
    case TransitionKind::Diagonal:
      up.trans = Matrix::Identity(k, k);
      break;
  }
  return up;
}

// ---- weighted GLM solvers for the regression M-step ----

struct GlmResult {
  Vector coef;
  int iterations = 0;
  bool converged = false;
};

namespace detail {

inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

[[noreturn]] inline void throw_singular_design(const Matrix& X, const Vector& w,
                                               const std::vector<std::string>* names) {
  Matrix A = X;
  for (int i = 0; i < A.rows(); ++i) A.row(i) *= std::sqrt(std::max(w[i], 0.0));
  Eigen::ColPivHouseholderQR<Matrix> qr(A);
  qr.setThreshold(1e-10);
  const int rank = static_cast<int>(qr.rank());
  std::string cols;
  for (int j = rank; j < X.cols(); ++j) {
    const int c = static_cast<int>(qr.colsPermutation().indices()[j]);
    if (!cols.empty()) cols += ", ";
    cols += names && c < static_cast<int>(names->size()) ? (*names)[c]
                                                         : "column " + std::to_string(c);
  }
  throw Error("regression_singular",
              "weighted design is rank deficient (separation or collinearity); "
              "deficient columns: " + (cols.empty() ? std::string("<none identified>") : cols));
}

}  // namespace detail

// Weighted logistic Newton-Raphson with step halving; ascent in the
// weighted log-likelihood is guaranteed step by step.
inline GlmResult weighted_logistic_newton(const Matrix& X, const Vector& y, const Vector& w,
                                          Vector coef, int max_steps, double grad_tol,
                                          const std::vector<std::string>* names = nullptr) {
  GlmResult res;
  auto objective = [&](const Vector& b) {
    const Vector eta = X * b;
    double o = 0.0;
    for (int i = 0; i < eta.size(); ++i)
      if (w[i] > 0.0) o += w[i] * (y[i] * eta[i] - detail::softplus(eta[i]));
    return o;
  };

  double obj = objective(coef);
  for (int it = 1; it <= max_steps; ++it) {
    res.iterations = it;
    const Vector eta = X * coef;
    Vector p(eta.size()), wt(eta.size());
    for (int i = 0; i < eta.size(); ++i) {
      p[i] = logistic(eta[i]);
      wt[i] = w[i] * p[i] * (1.0 - p[i]);
    }
    const Vector grad = X.transpose() * (w.cwiseProduct(y - p));
    if (grad.norm() < grad_tol) {
      res.converged = true;
      break;
    }
    const Matrix H = X.transpose() * wt.asDiagonal() * X;
    const Vector dir = H.ldlt().solve(grad);
    if (!dir.allFinite() || (H * dir - grad).norm() > 1e-6 * (grad.norm() + 1.0))
      detail::throw_singular_design(X, w, names);

    double step = 1.0;
    bool improved = false;
    for (int half = 0; half < 30; ++half) {
      const Vector cand = coef + step * dir;
      const double o = objective(cand);
      if (o >= obj - 1e-12) {
        const double gain = o - obj;
        coef = cand;
        obj = o;
        improved = gain > 1e-11 * (std::abs(o) + 1.0);
        break;
      }
      step *= 0.5;
    }
    if (!improved) {
      // the objective cannot move at this precision: converged in value
      // even if the gradient norm has not reached grad_tol
      res.converged = true;
      break;
    }
  }
  res.coef = std::move(coef);
  return res;
}

inline GlmResult weighted_least_squares(const Matrix& X, const Vector& y, const Vector& w,
                                        double* sigma2_out = nullptr,
                                        const std::vector<std::string>* names = nullptr) {
  const Matrix H = X.transpose() * w.asDiagonal() * X;
  const Vector rhs = X.transpose() * w.cwiseProduct(y);
  GlmResult res;
  res.coef = H.ldlt().solve(rhs);
  res.iterations = 1;
  if (!res.coef.allFinite() || (H * res.coef - rhs).norm() > 1e-8 * (rhs.norm() + 1.0))
    detail::throw_singular_design(X, w, names);
  res.converged = true;
  if (sigma2_out) {
    const Vector r = y - X * res.coef;
    const double wsum = w.sum();
    *sigma2_out = wsum > 0.0 ? r.cwiseProduct(r).dot(w) / wsum : 1.0;
  }
  return res;
}

// Static pseudo-observation design for the regression M-step: one row per
// (unit, unmasked occasion, u, v) cell. Columns: intercept, cluster-state
// dummies u >= 2, unit-state dummies v >= 2, cluster covariates, unit
// covariates. Only the weights change across EM iterations.
struct RegressionDesign {
  Matrix X;
  Vector y;
  std::vector<int> unit, occ, u_state, v_state;
  std::vector<std::string> col_names;

  static RegressionDesign build(const PanelView& v, const ModelSpec& spec) {
    RegressionDesign d;
    const int k1 = spec.k1, k2 = spec.k2;
    const int p = 1 + (k1 - 1) + (k2 - 1) + v.q1 + v.q2;

    d.col_names.push_back("intercept");
    for (int u = 1; u < k1; ++u) d.col_names.push_back("alpha" + std::to_string(u + 1));
    for (int vv = 1; vv < k2; ++vv) d.col_names.push_back("beta" + std::to_string(vv + 1));
    for (const auto& n : spec.cluster_covariates) d.col_names.push_back("gamma:" + n);
    for (const auto& n : spec.unit_covariates) d.col_names.push_back("delta:" + n);

    long rows = 0;
    for (int g = 0; g < v.n_units; ++g)
      for (int t = 0; t < v.T; ++t)
        if (v.measured[g][t]) rows += k1 * k2;

    d.X = Matrix::Zero(rows, p);
    d.y = Vector::Zero(rows);
    d.unit.reserve(rows);
    long r = 0;
    for (int h = 0; h < v.H; ++h) {
      for (int g = v.cluster_begin[h]; g < v.cluster_begin[h + 1]; ++g) {
        for (int t = 0; t < v.T; ++t) {
          if (!v.measured[g][t]) continue;
          for (int u = 0; u < k1; ++u)
            for (int vv = 0; vv < k2; ++vv) {
              d.X(r, 0) = 1.0;
              if (u >= 1) d.X(r, u) = 1.0;
              if (vv >= 1) d.X(r, (k1 - 1) + vv) = 1.0;
              for (int j = 0; j < v.q1; ++j) d.X(r, k1 + k2 - 1 + j) = v.x[h](t, j);
              for (int j = 0; j < v.q2; ++j) d.X(r, k1 + k2 - 1 + v.q1 + j) = v.z[g](t, j);
              d.y[r] = v.y[g][t];
              d.unit.push_back(g);
              d.occ.push_back(t);
              d.u_state.push_back(u);
              d.v_state.push_back(vv);
              ++r;
            }
        }
      }
    }
    return d;
  }

  // Posterior weights per row; mass below 1e-12 is treated as zero.
  Vector weights(const ExpectedCounts& counts) const {
    Vector w(X.rows());
    for (long r = 0; r < X.rows(); ++r) {
      const double m = counts.unit_weights[unit[r]][occ[r]](u_state[r], v_state[r]);
      w[r] = m < 1e-12 ? 0.0 : m;
    }
    return w;
  }
};

struct RegressionUpdate {
  double intercept = 0.0;
  Vector alpha, beta, gamma, delta;
  double sigma2 = 1.0;
};

namespace detail {

inline Vector pack_regression(const ParameterSet& th, int k1, int k2, int q1, int q2) {
  Vector b(1 + (k1 - 1) + (k2 - 1) + q1 + q2);
  int j = 0;
  b[j++] = th.intercept;
  for (int u = 1; u < k1; ++u) b[j++] = th.alpha[u];
  for (int v = 1; v < k2; ++v) b[j++] = th.beta[v];
  for (int c = 0; c < q1; ++c) b[j++] = th.gamma[c];
  for (int c = 0; c < q2; ++c) b[j++] = th.delta[c];
  return b;
}

inline RegressionUpdate unpack_regression(const Vector& b, int k1, int k2, int q1, int q2) {
  RegressionUpdate up;
  int j = 0;
  up.intercept = b[j++];
  up.alpha = Vector::Zero(k1);
  for (int u = 1; u < k1; ++u) up.alpha[u] = b[j++];
  up.beta = Vector::Zero(k2);
  for (int v = 1; v < k2; ++v) up.beta[v] = b[j++];
  up.gamma = Vector::Zero(q1);
  for (int c = 0; c < q1; ++c) up.gamma[c] = b[j++];
  up.delta = Vector::Zero(q2);
  for (int c = 0; c < q2; ++c) up.delta[c] = b[j++];
  return up;
}

}  // namespace detail

inline RegressionUpdate m_step_regression(const ExpectedCounts& counts,
                                          const RegressionDesign& design, const ModelSpec& spec,
                                          const ParameterSet& current, const EmConfig& cfg) {
  const int k1 = spec.k1, k2 = spec.k2;
  const int q1 = static_cast<int>(spec.cluster_covariates.size());
  const int q2 = static_cast<int>(spec.unit_covariates.size());
  const Vector w = design.weights(counts);
  const Vector b0 = detail::pack_regression(current, k1, k2, q1, q2);

  if (spec.family == MeasurementFamily::Bernoulli) {
    const GlmResult r = weighted_logistic_newton(design.X, design.y, w, b0, cfg.newton_max_steps,
                                                 cfg.newton_grad_tol, &design.col_names);
    return detail::unpack_regression(r.coef, k1, k2, q1, q2);
  }
  double sigma2 = 1.0;
  const GlmResult r = weighted_least_squares(design.X, design.y, w, &sigma2, &design.col_names);
  RegressionUpdate up = detail::unpack_regression(r.coef, k1, k2, q1, q2);
  up.sigma2 = std::max(sigma2, 1e-12);
  return up;
}

// ---- starting points ----

namespace detail {

inline Matrix start_transition(TransitionKind kind, int k) {
  if (k == 1) return Matrix::Ones(1, 1);
  switch (kind) {
    case TransitionKind::Unconstrained: {
      Matrix M = Matrix::Constant(k, k, 0.1 / (k - 1));
      M.diagonal().setConstant(0.9);
      return M;
    }
    case TransitionKind::TridiagonalConstant:
      return build_tridiagonal(k, 0.05);
    case TransitionKind::Diagonal:
      return Matrix::Identity(k, k);
  }
  return Matrix::Identity(k, k);
}

struct ResponseMoments {
  double mean = 0.5, var = 0.25;
};

inline ResponseMoments response_moments(const PanelView& v) {
  double s = 0.0, s2 = 0.0;
  long n = 0;
  for (int g = 0; g < v.n_units; ++g)
    for (int t = 0; t < v.T; ++t)
      if (v.measured[g][t]) {
        s += v.y[g][t];
        s2 += v.y[g][t] * v.y[g][t];
        ++n;
      }
  ResponseMoments m;
  if (n > 0) {
    m.mean = s / n;
    m.var = std::max(s2 / n - m.mean * m.mean, 1e-6);
  }
  return m;
}

}  // namespace detail

// Deterministic start: uniform initial probabilities, sticky transitions
// (0.9 on the diagonal, rho = 0.05), support points equispaced with spread
// set by the marginal response scale, coefficients zero, intercept at the
// marginal logit (Bernoulli) or mean (Gaussian).
inline ParameterSet deterministic_start(const PanelView& v, const ModelSpec& spec) {
  const auto mom = detail::response_moments(v);
  ParameterSet th;
  th.lambda = Vector::Constant(spec.k1, 1.0 / spec.k1);
  th.Lambda = detail::start_transition(spec.cluster_transition, spec.k1);
  th.pi = Vector::Constant(spec.k2, 1.0 / spec.k2);
  th.Pi = detail::start_transition(spec.unit_transition, spec.k2);

  double level, scale;
  if (spec.family == MeasurementFamily::Bernoulli) {
    const double p = std::clamp(mom.mean, 1e-6, 1.0 - 1e-6);
    level = std::log(p / (1.0 - p));
    scale = std::max(1.0, std::abs(level));
  } else {
    level = mom.mean;
    scale = std::max(std::sqrt(mom.var), 1e-3);
    th.sigma2 = mom.var;
  }
  th.intercept = level;
  th.alpha = Vector::Zero(spec.k1);
  for (int u = 1; u < spec.k1; ++u) th.alpha[u] = 2.0 * scale * u / (spec.k1 - 1);
  th.beta = Vector::Zero(spec.k2);
  for (int vv = 1; vv < spec.k2; ++vv) th.beta[vv] = 2.0 * scale * vv / (spec.k2 - 1);
  th.gamma = Vector::Zero(static_cast<int>(spec.cluster_covariates.size()));
  th.delta = Vector::Zero(static_cast<int>(spec.unit_covariates.size()));
  return th;
}

inline ParameterSet random_start(const PanelView& v, const ModelSpec& spec, std::uint64_t seed,
                                 int index) {
  ParameterSet th = deterministic_start(v, spec);
  SeqRng rng(mix_key(seed, 0x5374617274ULL, static_cast<std::uint64_t>(index), 0, 0));

  auto jitter_simplex = [&](Vector& p) {
    for (int i = 0; i < p.size(); ++i) p[i] *= std::exp(0.6 * rng.normal());
    p /= p.sum();
  };
  auto jitter_transition = [&](Matrix& M, TransitionKind kind, int k) {
    if (k == 1) return;
    switch (kind) {
      case TransitionKind::Unconstrained:
        for (int r = 0; r < k; ++r) {
          for (int c = 0; c < k; ++c) M(r, c) *= std::exp(0.5 * rng.normal());
          M.row(r) /= M.row(r).sum();
        }
        break;
      case TransitionKind::TridiagonalConstant:
        M = build_tridiagonal(k, std::clamp(0.05 * std::exp(rng.normal()), 0.005, 0.45));
        break;
      case TransitionKind::Diagonal:
        break;
    }
  };

  jitter_simplex(th.lambda);
  jitter_transition(th.Lambda, spec.cluster_transition, spec.k1);
  jitter_simplex(th.pi);
  jitter_transition(th.Pi, spec.unit_transition, spec.k2);

  const double scale = spec.family == MeasurementFamily::Bernoulli
                           ? std::max(1.0, std::abs(th.intercept))
                           : std::max(std::sqrt(th.sigma2), 1e-3);
  for (int u = 1; u < spec.k1; ++u) th.alpha[u] += scale * rng.normal();
  for (int vv = 1; vv < spec.k2; ++vv) th.beta[vv] += scale * rng.normal();
  th.intercept += 0.3 * scale * rng.normal();
  if (spec.family == MeasurementFamily::Gaussian) th.sigma2 *= std::exp(0.3 * rng.normal());
  return th;
}

// ---- canonical state ordering ----

namespace detail {

// Admissible relabelings are those that keep the transition constraint
// representable: any permutation for unconstrained/diagonal matrices, only
// {identity, reversal} for the tridiagonal band.
inline std::vector<int> admissible_order(const Vector& support, TransitionKind kind) {
  const int k = static_cast<int>(support.size());
  std::vector<int> id(k);
  std::iota(id.begin(), id.end(), 0);
  if (k <= 1) return id;
  if (kind == TransitionKind::TridiagonalConstant) {
    std::vector<int> rev(id.rbegin(), id.rend());
    for (int i = 0; i < k; ++i) {
      if (support[rev[i]] < support[id[i]]) return rev;
      if (support[rev[i]] > support[id[i]]) return id;
    }
    return id;
  }
  std::stable_sort(id.begin(), id.end(), [&](int a, int b) { return support[a] < support[b]; });
  return id;
}

inline void permute_chain(Vector& init, Matrix& trans, Vector& support,
                          const std::vector<int>& order) {
  const int k = static_cast<int>(order.size());
  Vector i2(k), s2(k);
  Matrix t2(k, k);
  for (int a = 0; a < k; ++a) {
    i2[a] = init[order[a]];
    s2[a] = support[order[a]];
    for (int b = 0; b < k; ++b) t2(a, b) = trans(order[a], order[b]);
  }
  init = i2;
  trans = t2;
  support = s2;
}

}  // namespace detail

// Sorts latent states by ascending support point (restricted to
// structure-preserving relabelings under the tridiagonal constraint),
// re-zeros the first support point and absorbs the shift into the
// intercept. Returns the permutations applied.
inline std::pair<std::vector<int>, std::vector<int>> canonicalize_states(ParameterSet& th,
                                                                         const ModelSpec& spec) {
  const auto uorder = detail::admissible_order(th.alpha, spec.cluster_transition);
  detail::permute_chain(th.lambda, th.Lambda, th.alpha, uorder);
  const auto vorder = detail::admissible_order(th.beta, spec.unit_transition);
  detail::permute_chain(th.pi, th.Pi, th.beta, vorder);

  const double shift = th.alpha[0] + th.beta[0];
  th.alpha.array() -= th.alpha[0];
  th.beta.array() -= th.beta[0];
  th.alpha[0] = 0.0;  // exact zero, not -0.0 leftovers
  th.beta[0] = 0.0;
  th.intercept += shift;
  return {uorder, vorder};
}

// ---- the EM driver ----

struct FitResult {
  ParameterSet theta_hat;
  double ploglik = -std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
  int best_start = 0;
  std::vector<double> start_ploglik;             // final pl per start
  std::vector<std::vector<double>> start_traces; // pl per iteration per start
  std::vector<double> trace;                     // trace of the best start
  double worst_ascent_step = 0.0;                // min over consecutive trace diffs
  std::vector<int> cluster_state_order, unit_state_order;
};

namespace detail {

struct SingleStart {
  ParameterSet theta;
  double ploglik = -std::numeric_limits<double>::infinity();
  bool converged = false;
  std::vector<double> trace;
};

inline SingleStart em_single_start(const PanelView& v, const ModelSpec& spec, const EmConfig& cfg,
                                   ParameterSet th, const RegressionDesign& design) {
  SingleStart out;
  double prev = -std::numeric_limits<double>::infinity();
  for (int it = 0; it < cfg.max_iterations; ++it) {
    const ExpectedCounts counts = e_step_view(v, spec, th, cfg.threads);
    out.trace.push_back(counts.ploglik);
    if (it > 0 &&
        std::abs(counts.ploglik - prev) / (std::abs(counts.ploglik) + 1.0) < cfg.rel_tolerance) {
      out.converged = true;
      break;
    }
    prev = counts.ploglik;
    if (it + 1 == cfg.max_iterations) break;  // keep theta consistent with trace.back()

    const ChainUpdate cu =
        m_step_chain(counts.lambda_counts, counts.Lambda_counts, spec.cluster_transition, th.Lambda);
    th.lambda = cu.init;
    th.Lambda = cu.trans;
    const ChainUpdate uu =
        m_step_chain(counts.pi_counts, counts.Pi_counts, spec.unit_transition, th.Pi);
    th.pi = uu.init;
    th.Pi = uu.trans;
    const RegressionUpdate ru = m_step_regression(counts, design, spec, th, cfg);
    th.intercept = ru.intercept;
    th.alpha = ru.alpha;
    th.beta = ru.beta;
    th.gamma = ru.gamma;
    th.delta = ru.delta;
    if (spec.family == MeasurementFamily::Gaussian) th.sigma2 = ru.sigma2;
  }
  out.theta = std::move(th);
  out.ploglik = out.trace.back();
  return out;
}

}  // namespace detail

// Runs EM from a caller-supplied starting point (no restarts, no
// canonicalization). Exposed mainly so equivalence under state relabeling
// can be exercised directly.
inline FitResult fit_single_start(const PanelDataset& data, const ModelSpec& spec,
                                  const EmConfig& cfg, const ParameterSet& theta0) {
  spec.validate();
  cfg.validate();
  check_parameter_set_or_throw(theta0, spec);
  const PanelView v = PanelView::build(data, spec, cfg.strict_pairs);
  const RegressionDesign design = RegressionDesign::build(v, spec);
  auto s = detail::em_single_start(v, spec, cfg, theta0, design);
  FitResult r;
  r.theta_hat = std::move(s.theta);
  r.ploglik = s.ploglik;
  r.iterations = static_cast<int>(s.trace.size());
  r.converged = s.converged;
  r.start_ploglik = {s.ploglik};
  r.start_traces = {s.trace};
  r.trace = std::move(s.trace);
  r.worst_ascent_step = 0.0;
  for (std::size_t i = 1; i < r.trace.size(); ++i)
    r.worst_ascent_step = std::min(r.worst_ascent_step, r.trace[i] - r.trace[i - 1]);
  return r;
}

inline FitResult fit(const PanelDataset& data, const ModelSpec& spec, const EmConfig& cfg = {}) {
  spec.validate();
  cfg.validate();
  const PanelView v = PanelView::build(data, spec, cfg.strict_pairs);
  if (v.pairs.empty())
    throw Error("validation_error",
                "no pair terms: all clusters are singletons and strict pairs are requested");
  const RegressionDesign design = RegressionDesign::build(v, spec);

  FitResult r;
  for (int s = 0; s <= cfg.n_random_starts; ++s) {
    const ParameterSet th0 = s == 0 ? deterministic_start(v, spec)
                                    : random_start(v, spec, cfg.random_seed, s);
    auto run = detail::em_single_start(v, spec, cfg, th0, design);
    r.start_ploglik.push_back(run.ploglik);
    r.start_traces.push_back(run.trace);
    if (run.ploglik > r.ploglik) {
      r.ploglik = run.ploglik;
      r.theta_hat = std::move(run.theta);
      r.converged = run.converged;
      r.best_start = s;
      r.trace = std::move(run.trace);
    }
  }
  r.iterations = static_cast<int>(r.trace.size());
  r.worst_ascent_step = 0.0;
  for (const auto& tr : r.start_traces)
    for (std::size_t i = 1; i < tr.size(); ++i)
      r.worst_ascent_step = std::min(r.worst_ascent_step, tr[i] - tr[i - 1]);

  auto orders = canonicalize_states(r.theta_hat, spec);
  r.cluster_state_order = std::move(orders.first);
  r.unit_state_order = std::move(orders.second);
  return r;
}

}  // namespace nhmm
