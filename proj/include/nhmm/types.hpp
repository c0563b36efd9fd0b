#pragma once

// Core types for nested hidden Markov chains on multilevel longitudinal
// panels: clusters of units, each unit observed at T common occasions, with
// a hidden first-order chain per cluster and one per unit.

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace nhmm {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

struct Error : std::runtime_error {
  std::string code;
  Error(std::string code_, const std::string& msg)
      : std::runtime_error(msg), code(std::move(code_)) {}
};

// Thrown when a forward pass meets an observation with probability exactly
// zero under the current parameters. Pair coordinates are filled in by the
// caller that knows them.
struct ZeroLikelihoodError : Error {
  int occasion;  // 1-based
  std::string cluster_id, unit_i, unit_j;
  explicit ZeroLikelihoodError(int occasion_)
      : Error("zero_likelihood",
              "observation has probability zero at occasion " + std::to_string(occasion_)),
        occasion(occasion_) {}
};

enum class MeasurementFamily { Bernoulli, Gaussian };
enum class TransitionKind { Unconstrained, TridiagonalConstant, Diagonal };
enum class LagHandling { None, ZeroFill, ConditionOnFirst };

inline const char* to_string(MeasurementFamily f) {
  return f == MeasurementFamily::Bernoulli ? "bernoulli" : "gaussian";
}
inline const char* to_string(TransitionKind k) {
  switch (k) {
    case TransitionKind::Unconstrained: return "unconstrained";
    case TransitionKind::TridiagonalConstant: return "tridiagonal";
    default: return "diagonal";
  }
}
inline const char* to_string(LagHandling l) {
  switch (l) {
    case LagHandling::None: return "none";
    case LagHandling::ZeroFill: return "zero-fill";
    default: return "condition-on-first";
  }
}

inline MeasurementFamily parse_family(const std::string& s) {
  if (s == "bernoulli") return MeasurementFamily::Bernoulli;
  if (s == "gaussian") return MeasurementFamily::Gaussian;
  throw Error("config_error", "unknown family '" + s + "' (expected bernoulli|gaussian)");
}
inline TransitionKind parse_transition(const std::string& s) {
  if (s == "unconstrained") return TransitionKind::Unconstrained;
  if (s == "tridiagonal") return TransitionKind::TridiagonalConstant;
  if (s == "diagonal") return TransitionKind::Diagonal;
  throw Error("config_error",
              "unknown transition constraint '" + s + "' (expected unconstrained|tridiagonal|diagonal)");
}
inline LagHandling parse_lag_handling(const std::string& s) {
  if (s == "none") return LagHandling::None;
  if (s == "zero-fill") return LagHandling::ZeroFill;
  if (s == "condition-on-first") return LagHandling::ConditionOnFirst;
  throw Error("config_error",
              "unknown lag_handling '" + s + "' (expected none|zero-fill|condition-on-first)");
}

// Model shape: latent state counts, transition constraints, measurement
// family and which covariate columns enter the linear predictor.
struct ModelSpec {
  int k1 = 1;  // cluster-level states
  int k2 = 1;  // unit-level states
  TransitionKind cluster_transition = TransitionKind::Unconstrained;
  TransitionKind unit_transition = TransitionKind::Unconstrained;
  MeasurementFamily family = MeasurementFamily::Bernoulli;
  LagHandling lag_handling = LagHandling::None;
  std::vector<std::string> cluster_covariates;  // x columns
  std::vector<std::string> unit_covariates;     // z columns

  void validate() const {
    if (k1 < 1 || k2 < 1) throw Error("config_error", "state counts must be >= 1");
    if (cluster_transition == TransitionKind::TridiagonalConstant && k1 < 2)
      throw Error("config_error", "tridiagonal constraint requires k1 >= 2");
    if (unit_transition == TransitionKind::TridiagonalConstant && k2 < 2)
      throw Error("config_error", "tridiagonal constraint requires k2 >= 2");
  }
};

// theta. alpha[0] and beta[0] are pinned to zero; the shared intercept
// carries the level. sigma2 is meaningful only under the Gaussian family.
struct ParameterSet {
  Vector lambda;  // k1 initial cluster-state probabilities
  Matrix Lambda;  // k1 x k1 cluster transition matrix
  Vector pi;      // k2 initial unit-state probabilities
  Matrix Pi;      // k2 x k2 unit transition matrix
  double intercept = 0.0;
  Vector alpha;   // k1 cluster support points, alpha[0] == 0
  Vector beta;    // k2 unit support points, beta[0] == 0
  Vector gamma;   // cluster covariate coefficients
  Vector delta;   // unit covariate coefficients
  double sigma2 = 1.0;
};

inline double tridiagonal_rho(const Matrix& M) {
  if (M.rows() < 2) throw Error("config_error", "tridiagonal matrix needs k >= 2");
  return M(0, 1);
}

struct UnitData {
  std::string unit_id;
  std::vector<double> responses;                     // length T
  std::vector<std::vector<double>> unit_covariates;  // T rows
  std::vector<bool> measurement_mask;                // true = contributes to likelihood
};

struct ClusterData {
  std::string cluster_id;
  std::vector<std::vector<double>> cluster_covariates;  // T rows
  std::vector<UnitData> units;
};

struct PanelDataset {
  std::vector<ClusterData> clusters;
  int T = 0;
  std::vector<std::string> unit_covariate_names;
  std::vector<std::string> cluster_covariate_names;

  int n_clusters() const { return static_cast<int>(clusters.size()); }
  int n_units() const {
    int n = 0;
    for (const auto& c : clusters) n += static_cast<int>(c.units.size());
    return n;
  }
};

struct ValidationIssue {
  std::string cluster_id;
  std::string unit_id;   // empty when cluster-level
  int occasion = -1;     // 1-based, -1 when not occasion-specific
  std::string message;

  std::string format() const {
    std::string s;
    if (!cluster_id.empty()) s += "cluster " + cluster_id;
    if (!unit_id.empty()) s += (s.empty() ? "unit " : ", unit ") + unit_id;
    if (occasion >= 1) s += (s.empty() ? "t=" : ", t=") + std::to_string(occasion);
    if (!s.empty()) s += ": ";
    return s + message;
  }
};

// Checks panel invariants against the model spec and sets measurement masks
// from the lag-handling rule (condition-on-first masks t = 1). Returns all
// problems found; an empty list means the dataset is ready to fit.
inline std::vector<ValidationIssue> validate_dataset(PanelDataset& data, const ModelSpec& spec) {
  std::vector<ValidationIssue> issues;
  auto add = [&](std::string cid, std::string uid, int t, std::string msg) {
    issues.push_back({std::move(cid), std::move(uid), t, std::move(msg)});
  };

  spec.validate();
  const int T = data.T;
  if (T < 1) add("", "", -1, "occasion count T must be >= 1");
  if (data.clusters.empty()) add("", "", -1, "dataset has no clusters");
  if (spec.lag_handling == LagHandling::ConditionOnFirst && T == 1)
    add("", "", -1, "condition-on-first lag handling leaves no measured occasion when T = 1");

  auto known = [](const std::vector<std::string>& names, const std::string& n) {
    for (const auto& c : names)
      if (c == n) return true;
    return false;
  };
  for (const auto& n : spec.cluster_covariates)
    if (!known(data.cluster_covariate_names, n))
      add("", "", -1, "unknown cluster covariate '" + n + "'");
  for (const auto& n : spec.unit_covariates)
    if (!known(data.unit_covariate_names, n))
      add("", "", -1, "unknown unit covariate '" + n + "'");

  const std::size_t q1 = data.cluster_covariate_names.size();
  const std::size_t q2 = data.unit_covariate_names.size();

  std::vector<std::string> seen_clusters;
  for (auto& cl : data.clusters) {
    if (known(seen_clusters, cl.cluster_id))
      add(cl.cluster_id, "", -1, "duplicate cluster id");
    seen_clusters.push_back(cl.cluster_id);

    if (cl.units.empty()) add(cl.cluster_id, "", -1, "cluster has no units");
    if (static_cast<int>(cl.cluster_covariates.size()) != T) {
      add(cl.cluster_id, "", -1,
          "expected " + std::to_string(T) + " cluster covariate rows, found " +
              std::to_string(cl.cluster_covariates.size()));
    } else {
      for (int t = 0; t < T; ++t) {
        if (cl.cluster_covariates[t].size() != q1) {
          add(cl.cluster_id, "", t + 1, "ragged cluster covariate row");
          continue;
        }
        for (double v : cl.cluster_covariates[t])
          if (!std::isfinite(v)) add(cl.cluster_id, "", t + 1, "non-finite cluster covariate");
      }
    }

    std::vector<std::string> seen_units;
    for (auto& u : cl.units) {
      if (known(seen_units, u.unit_id))
        add(cl.cluster_id, u.unit_id, -1, "duplicate unit id within cluster");
      seen_units.push_back(u.unit_id);

      if (static_cast<int>(u.responses.size()) != T) {
        add(cl.cluster_id, u.unit_id, -1,
            "expected " + std::to_string(T) + " responses, found " +
                std::to_string(u.responses.size()));
        continue;
      }
      if (static_cast<int>(u.unit_covariates.size()) != T) {
        add(cl.cluster_id, u.unit_id, -1,
            "expected " + std::to_string(T) + " unit covariate rows, found " +
                std::to_string(u.unit_covariates.size()));
        continue;
      }
      for (int t = 0; t < T; ++t) {
        const double y = u.responses[t];
        if (!std::isfinite(y)) {
          add(cl.cluster_id, u.unit_id, t + 1, "missing or non-finite response");
        } else if (spec.family == MeasurementFamily::Bernoulli && y != 0.0 && y != 1.0) {
          add(cl.cluster_id, u.unit_id, t + 1, "response must be 0 or 1 under the bernoulli family");
        }
        if (u.unit_covariates[t].size() != q2) {
          add(cl.cluster_id, u.unit_id, t + 1, "ragged unit covariate row");
        } else {
          for (double v : u.unit_covariates[t])
            if (!std::isfinite(v)) add(cl.cluster_id, u.unit_id, t + 1, "non-finite unit covariate");
        }
      }

      u.measurement_mask.assign(static_cast<std::size_t>(T), true);
      if (spec.lag_handling == LagHandling::ConditionOnFirst && T >= 1)
        u.measurement_mask[0] = false;
    }
  }
  return issues;
}

inline void validate_dataset_or_throw(PanelDataset& data, const ModelSpec& spec) {
  const auto issues = validate_dataset(data, spec);
  if (issues.empty()) return;
  std::string msg = "invalid dataset:";
  const std::size_t shown = issues.size() > 8 ? 8 : issues.size();
  for (std::size_t i = 0; i < shown; ++i) msg += "\n  " + issues[i].format();
  if (issues.size() > shown)
    msg += "\n  ... and " + std::to_string(issues.size() - shown) + " more";
  throw Error("validation_error", msg);
}

}  // namespace nhmm
