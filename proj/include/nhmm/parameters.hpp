#pragma once

// Full parameter vector of the nested-chain model and its canonical flat
// (unconstrained) representation used for scores, Hessians and the sandwich
// covariance.

#include "nhmm/chain.hpp"
#include "nhmm/types.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace nhmm {

namespace detail {

inline bool is_stochastic_vector(const Vector& v, double tol = 1e-12) {
  if (v.size() == 0) return false;
  double s = 0.0;
  for (int i = 0; i < v.size(); ++i) {
    if (!(v[i] >= 0.0 && v[i] <= 1.0)) return false;
    s += v[i];
  }
  return std::abs(s - 1.0) <= tol;
}

inline bool is_stochastic_matrix(const Matrix& M, double tol = 1e-12) {
  if (M.rows() != M.cols() || M.rows() == 0) return false;
  for (int r = 0; r < M.rows(); ++r)
    if (!is_stochastic_vector(M.row(r).transpose(), tol)) return false;
  return true;
}

inline bool matches_constraint(const Matrix& M, TransitionKind kind, double tol = 1e-12) {
  const int k = static_cast<int>(M.rows());
  switch (kind) {
    case TransitionKind::Unconstrained:
      return true;
    case TransitionKind::Diagonal:
      return (M - Matrix::Identity(k, k)).cwiseAbs().maxCoeff() <= tol;
    case TransitionKind::TridiagonalConstant: {
      if (k < 2) return false;
      const double rho = M(0, 1);
      if (!(rho > 0.0 && rho < 0.5)) return false;
      return (M - build_tridiagonal(k, rho)).cwiseAbs().maxCoeff() <= tol;
    }
  }
  return false;
}

}  // namespace detail

inline std::vector<std::string> check_parameter_set(const ParameterSet& th, const ModelSpec& spec) {
  std::vector<std::string> bad;
  if (th.lambda.size() != spec.k1) bad.push_back("lambda has wrong length");
  if (th.pi.size() != spec.k2) bad.push_back("pi has wrong length");
  if (th.Lambda.rows() != spec.k1 || th.Lambda.cols() != spec.k1)
    bad.push_back("Lambda has wrong shape");
  if (th.Pi.rows() != spec.k2 || th.Pi.cols() != spec.k2) bad.push_back("Pi has wrong shape");
  if (th.alpha.size() != spec.k1) bad.push_back("alpha has wrong length");
  if (th.beta.size() != spec.k2) bad.push_back("beta has wrong length");
  if (!bad.empty()) return bad;

  if (!detail::is_stochastic_vector(th.lambda)) bad.push_back("lambda is not a probability vector");
  if (!detail::is_stochastic_matrix(th.Lambda)) bad.push_back("Lambda rows must sum to 1");
  if (!detail::is_stochastic_vector(th.pi)) bad.push_back("pi is not a probability vector");
  if (!detail::is_stochastic_matrix(th.Pi)) bad.push_back("Pi rows must sum to 1");
  if (th.alpha[0] != 0.0) bad.push_back("alpha[1] must be 0");
  if (th.beta[0] != 0.0) bad.push_back("beta[1] must be 0");
  if (!detail::matches_constraint(th.Lambda, spec.cluster_transition) && spec.k1 > 1)
    bad.push_back("Lambda violates the cluster transition constraint");
  if (!detail::matches_constraint(th.Pi, spec.unit_transition) && spec.k2 > 1)
    bad.push_back("Pi violates the unit transition constraint");
  if (static_cast<std::size_t>(th.gamma.size()) != spec.cluster_covariates.size())
    bad.push_back("gamma length does not match selected cluster covariates");
  if (static_cast<std::size_t>(th.delta.size()) != spec.unit_covariates.size())
    bad.push_back("delta length does not match selected unit covariates");
  if (spec.family == MeasurementFamily::Gaussian && !(th.sigma2 > 0.0))
    bad.push_back("sigma2 must be > 0 under the gaussian family");
  if (!std::isfinite(th.intercept)) bad.push_back("intercept is not finite");
  return bad;
}

inline void check_parameter_set_or_throw(const ParameterSet& th, const ModelSpec& spec) {
  const auto bad = check_parameter_set(th, spec);
  if (bad.empty()) return;
  std::string msg = "invalid parameter set:";
  for (const auto& b : bad) msg += "\n  " + b;
  throw Error("parameter_error", msg);
}

// Layout of the flat unconstrained vector. Order:
//   log(lambda[u]/lambda[1])                u = 2..k1
//   cluster transition block:
//     unconstrained: log(Lambda[r][c]/Lambda[r][1]) row-wise, c = 2..k1
//     tridiagonal:   logit(2*rho)
//     diagonal:      (empty)
//   log(pi[v]/pi[1]), unit transition block (same scheme)
//   intercept, alpha[2..k1], beta[2..k2], gamma, delta,
//   log(sigma2)  (gaussian family only)
struct FlatLayout {
  int k1 = 1, k2 = 1, q1 = 0, q2 = 0;
  TransitionKind ct = TransitionKind::Unconstrained, ut = TransitionKind::Unconstrained;
  bool gaussian = false;
  int lambda_off = 0, Lambda_off = 0, pi_off = 0, Pi_off = 0;
  int intercept_off = 0, alpha_off = 0, beta_off = 0, gamma_off = 0, delta_off = 0;
  int sigma_off = -1;
  int size = 0;
  std::vector<std::string> names;

  static int transition_params(TransitionKind kind, int k) {
    if (k <= 1) return 0;
    switch (kind) {
      case TransitionKind::Unconstrained: return k * (k - 1);
      case TransitionKind::TridiagonalConstant: return 1;
      case TransitionKind::Diagonal: return 0;
    }
    return 0;
  }

  static FlatLayout make(const ModelSpec& spec) {
    FlatLayout L;
    L.k1 = spec.k1;
    L.k2 = spec.k2;
    L.q1 = static_cast<int>(spec.cluster_covariates.size());
    L.q2 = static_cast<int>(spec.unit_covariates.size());
    L.ct = spec.cluster_transition;
    L.ut = spec.unit_transition;
    L.gaussian = spec.family == MeasurementFamily::Gaussian;

    int off = 0;
    auto take = [&](int* slot, int n) { *slot = off; off += n; };
    take(&L.lambda_off, L.k1 - 1);
    take(&L.Lambda_off, transition_params(L.ct, L.k1));
    take(&L.pi_off, L.k2 - 1);
    take(&L.Pi_off, transition_params(L.ut, L.k2));
    take(&L.intercept_off, 1);
    take(&L.alpha_off, L.k1 - 1);
    take(&L.beta_off, L.k2 - 1);
    take(&L.gamma_off, L.q1);
    take(&L.delta_off, L.q2);
    if (L.gaussian) take(&L.sigma_off, 1);
    L.size = off;

    auto idx = [](int i) { return std::to_string(i + 1); };  // 1-based display
    for (int u = 1; u < L.k1; ++u) L.names.push_back("log(lambda" + idx(u) + "/lambda1)");
    if (L.k1 > 1) {
      if (L.ct == TransitionKind::Unconstrained)
        for (int r = 0; r < L.k1; ++r)
          for (int c = 1; c < L.k1; ++c)
            L.names.push_back("log(Lambda" + idx(r) + idx(c) + "/Lambda" + idx(r) + "1)");
      else if (L.ct == TransitionKind::TridiagonalConstant)
        L.names.push_back("logit(2*rho_cluster)");
    }
    for (int v = 1; v < L.k2; ++v) L.names.push_back("log(pi" + idx(v) + "/pi1)");
    if (L.k2 > 1) {
      if (L.ut == TransitionKind::Unconstrained)
        for (int r = 0; r < L.k2; ++r)
          for (int c = 1; c < L.k2; ++c)
            L.names.push_back("log(Pi" + idx(r) + idx(c) + "/Pi" + idx(r) + "1)");
      else if (L.ut == TransitionKind::TridiagonalConstant)
        L.names.push_back("logit(2*rho_unit)");
    }
    L.names.push_back("intercept");
    for (int u = 1; u < L.k1; ++u) L.names.push_back("alpha" + idx(u));
    for (int v = 1; v < L.k2; ++v) L.names.push_back("beta" + idx(v));
    for (const auto& n : spec.cluster_covariates) L.names.push_back("gamma:" + n);
    for (const auto& n : spec.unit_covariates) L.names.push_back("delta:" + n);
    if (L.gaussian) L.names.push_back("log(sigma2)");
    return L;
  }
};

inline int free_parameter_count(const ModelSpec& spec) { return FlatLayout::make(spec).size; }

namespace detail {

inline void flatten_simplex(const Vector& p, int off, Vector& out) {
  for (int i = 1; i < p.size(); ++i) out[off + i - 1] = std::log(p[i] / p[0]);
}

inline Vector unflatten_simplex(const Vector& x, int off, int k) {
  Vector p(k);
  double denom = 1.0;
  for (int i = 1; i < k; ++i) denom += std::exp(x[off + i - 1]);
  p[0] = 1.0 / denom;
  for (int i = 1; i < k; ++i) p[i] = std::exp(x[off + i - 1]) / denom;
  return p;
}

inline void flatten_transition(const Matrix& M, TransitionKind kind, int off, Vector& out) {
  const int k = static_cast<int>(M.rows());
  if (k <= 1) return;
  switch (kind) {
    case TransitionKind::Unconstrained: {
      int j = off;
      for (int r = 0; r < k; ++r)
        for (int c = 1; c < k; ++c) out[j++] = std::log(M(r, c) / M(r, 0));
      break;
    }
    case TransitionKind::TridiagonalConstant: {
      const double rho = tridiagonal_rho(M);
      out[off] = std::log((2.0 * rho) / (1.0 - 2.0 * rho));
      break;
    }
    case TransitionKind::Diagonal:
      break;
  }
}

inline Matrix unflatten_transition(const Vector& x, TransitionKind kind, int off, int k) {
  if (k <= 1) return Matrix::Ones(1, 1);
  switch (kind) {
    case TransitionKind::Unconstrained: {
      Matrix M(k, k);
      int j = off;
      for (int r = 0; r < k; ++r) {
        double denom = 1.0;
        for (int c = 1; c < k; ++c) denom += std::exp(x[j + c - 1]);
        M(r, 0) = 1.0 / denom;
        for (int c = 1; c < k; ++c) M(r, c) = std::exp(x[j + c - 1]) / denom;
        j += k - 1;
      }
      return M;
    }
    case TransitionKind::TridiagonalConstant: {
      const double rho = 0.5 / (1.0 + std::exp(-x[off]));
      return build_tridiagonal(k, rho);
    }
    case TransitionKind::Diagonal:
      return Matrix::Identity(k, k);
  }
  return Matrix::Identity(k, k);
}

}  // namespace detail

inline Vector flatten_parameters(const ParameterSet& th, const ModelSpec& spec) {
  const FlatLayout L = FlatLayout::make(spec);
  Vector x(L.size);
  detail::flatten_simplex(th.lambda, L.lambda_off, x);
  detail::flatten_transition(th.Lambda, L.ct, L.Lambda_off, x);
  detail::flatten_simplex(th.pi, L.pi_off, x);
  detail::flatten_transition(th.Pi, L.ut, L.Pi_off, x);
  x[L.intercept_off] = th.intercept;
  for (int u = 1; u < L.k1; ++u) x[L.alpha_off + u - 1] = th.alpha[u];
  for (int v = 1; v < L.k2; ++v) x[L.beta_off + v - 1] = th.beta[v];
  for (int j = 0; j < L.q1; ++j) x[L.gamma_off + j] = th.gamma[j];
  for (int j = 0; j < L.q2; ++j) x[L.delta_off + j] = th.delta[j];
  if (L.gaussian) x[L.sigma_off] = std::log(th.sigma2);
  return x;
}

inline ParameterSet unflatten_parameters(const Vector& x, const ModelSpec& spec) {
  const FlatLayout L = FlatLayout::make(spec);
  if (x.size() != L.size)
    throw Error("parameter_error", "flat vector has length " + std::to_string(x.size()) +
                                       ", expected " + std::to_string(L.size));
  ParameterSet th;
  th.lambda = detail::unflatten_simplex(x, L.lambda_off, L.k1);
  th.Lambda = detail::unflatten_transition(x, L.ct, L.Lambda_off, L.k1);
  th.pi = detail::unflatten_simplex(x, L.pi_off, L.k2);
  th.Pi = detail::unflatten_transition(x, L.ut, L.Pi_off, L.k2);
  th.intercept = x[L.intercept_off];
  th.alpha = Vector::Zero(L.k1);
  for (int u = 1; u < L.k1; ++u) th.alpha[u] = x[L.alpha_off + u - 1];
  th.beta = Vector::Zero(L.k2);
  for (int v = 1; v < L.k2; ++v) th.beta[v] = x[L.beta_off + v - 1];
  th.gamma = Vector::Zero(L.q1);
  for (int j = 0; j < L.q1; ++j) th.gamma[j] = x[L.gamma_off + j];
  th.delta = Vector::Zero(L.q2);
  for (int j = 0; j < L.q2; ++j) th.delta[j] = x[L.delta_off + j];
  th.sigma2 = L.gaussian ? std::exp(x[L.sigma_off]) : 1.0;
  return th;
}

// Natural-scale view of the parameters, in a fixed order, plus the Jacobian
// d(natural)/d(flat) used for delta-method standard errors.
struct NaturalParameter {
  std::string name;
  double value = 0.0;
};

inline std::vector<NaturalParameter> natural_parameters(const ParameterSet& th,
                                                        const ModelSpec& spec) {
  std::vector<NaturalParameter> out;
  auto idx = [](int i) { return std::to_string(i + 1); };
  for (int u = 0; u < spec.k1; ++u) out.push_back({"lambda" + idx(u), th.lambda[u]});
  if (spec.k1 > 1) {
    if (spec.cluster_transition == TransitionKind::TridiagonalConstant)
      out.push_back({"rho_cluster", tridiagonal_rho(th.Lambda)});
    else if (spec.cluster_transition == TransitionKind::Unconstrained)
      for (int r = 0; r < spec.k1; ++r)
        for (int c = 0; c < spec.k1; ++c)
          out.push_back({"Lambda" + idx(r) + idx(c), th.Lambda(r, c)});
  }
  for (int v = 0; v < spec.k2; ++v) out.push_back({"pi" + idx(v), th.pi[v]});
  if (spec.k2 > 1) {
    if (spec.unit_transition == TransitionKind::TridiagonalConstant)
      out.push_back({"rho_unit", tridiagonal_rho(th.Pi)});
    else if (spec.unit_transition == TransitionKind::Unconstrained)
      for (int r = 0; r < spec.k2; ++r)
        for (int c = 0; c < spec.k2; ++c) out.push_back({"Pi" + idx(r) + idx(c), th.Pi(r, c)});
  }
  out.push_back({"intercept", th.intercept});
  for (int u = 1; u < spec.k1; ++u) out.push_back({"alpha" + idx(u), th.alpha[u]});
  for (int v = 1; v < spec.k2; ++v) out.push_back({"beta" + idx(v), th.beta[v]});
  for (std::size_t j = 0; j < spec.cluster_covariates.size(); ++j)
    out.push_back({"gamma:" + spec.cluster_covariates[j], th.gamma[j]});
  for (std::size_t j = 0; j < spec.unit_covariates.size(); ++j)
    out.push_back({"delta:" + spec.unit_covariates[j], th.delta[j]});
  if (spec.family == MeasurementFamily::Gaussian) out.push_back({"sigma2", th.sigma2});
  return out;
}

inline Matrix natural_jacobian(const ParameterSet& th, const ModelSpec& spec) {
  const FlatLayout L = FlatLayout::make(spec);
  const std::size_t n_nat = natural_parameters(th, spec).size();
  Matrix G = Matrix::Zero(static_cast<int>(n_nat), L.size);
  int row = 0;

  // softmax block: d p[i] / d x[c] = p[i] * (1{i==c} - p[c]), x indexed by category c >= 1
  auto simplex_block = [&](const Vector& p, int off) {
    for (int i = 0; i < p.size(); ++i) {
      for (int c = 1; c < p.size(); ++c)
        G(row, off + c - 1) = p[i] * ((i == c ? 1.0 : 0.0) - p[c]);
      ++row;
    }
  };

  simplex_block(th.lambda, L.lambda_off);
  if (L.k1 > 1) {
    if (L.ct == TransitionKind::TridiagonalConstant) {
      const double rho = tridiagonal_rho(th.Lambda);
      G(row, L.Lambda_off) = rho * (1.0 - 2.0 * rho);
      ++row;
    } else if (L.ct == TransitionKind::Unconstrained) {
      for (int r = 0; r < L.k1; ++r) {
        const int off = L.Lambda_off + r * (L.k1 - 1);
        for (int c = 0; c < L.k1; ++c) {
          for (int cc = 1; cc < L.k1; ++cc)
            G(row, off + cc - 1) = th.Lambda(r, c) * ((c == cc ? 1.0 : 0.0) - th.Lambda(r, cc));
          ++row;
        }
      }
    }
  }
  simplex_block(th.pi, L.pi_off);
  if (L.k2 > 1) {
    if (L.ut == TransitionKind::TridiagonalConstant) {
      const double rho = tridiagonal_rho(th.Pi);
      G(row, L.Pi_off) = rho * (1.0 - 2.0 * rho);
      ++row;
    } else if (L.ut == TransitionKind::Unconstrained) {
      for (int r = 0; r < L.k2; ++r) {
        const int off = L.Pi_off + r * (L.k2 - 1);
        for (int c = 0; c < L.k2; ++c) {
          for (int cc = 1; cc < L.k2; ++cc)
            G(row, off + cc - 1) = th.Pi(r, c) * ((c == cc ? 1.0 : 0.0) - th.Pi(r, cc));
          ++row;
        }
      }
    }
  }
  G(row++, L.intercept_off) = 1.0;
  for (int u = 1; u < L.k1; ++u) G(row++, L.alpha_off + u - 1) = 1.0;
  for (int v = 1; v < L.k2; ++v) G(row++, L.beta_off + v - 1) = 1.0;
  for (int j = 0; j < L.q1; ++j) G(row++, L.gamma_off + j) = 1.0;
  for (int j = 0; j < L.q2; ++j) G(row++, L.delta_off + j) = 1.0;
  if (L.gaussian) G(row++, L.sigma_off) = th.sigma2;
  return G;
}

}  // namespace nhmm
