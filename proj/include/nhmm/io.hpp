#pragma once

// User surface: long-format CSV panels (one row per unit-occasion), flat
// key = value config files, JSON fit artifacts and the CLIC grid report.
// All numbers are written with shortest round-trip formatting so reloads
// are exact and identical runs produce identical bytes.

#include "nhmm/em.hpp"
#include "nhmm/inference.hpp"
#include "nhmm/simulate.hpp"
#include "nhmm/types.hpp"

#include <json.hpp>

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace nhmm {

using ordered_json = nlohmann::ordered_json;

inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error("parse_error", where + ": cannot parse number '" + s + "'");
  }
}

inline long parse_long(const std::string& s, const std::string& where) {
  try {
    std::size_t pos = 0;
    const long v = std::stol(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error("parse_error", where + ": cannot parse integer '" + s + "'");
  }
}

}  // namespace detail

// ---- long-format panel CSV ----
//
// Header: cluster_id,unit_id,t,y,<covariate columns...>. Occasions must be
// 1..T and contiguous for every unit. Columns named in
// spec.cluster_covariates are stored at cluster level and must be constant
// across the units of a cluster at each occasion; all other covariate
// columns are stored at unit level.

inline PanelDataset load_panel(const std::string& path, const ModelSpec& spec) {
  std::ifstream in(path);
  if (!in) throw Error("io_error", "cannot open '" + path + "'");

  std::string line;
  if (!std::getline(in, line)) throw Error("parse_error", path + ": empty file");
  const auto header = detail::split_csv_line(line);
  const std::vector<std::string> fixed = {"cluster_id", "unit_id", "t", "y"};
  if (header.size() < 4)
    throw Error("parse_error", path + ":1: header must start with cluster_id,unit_id,t,y");
  for (int j = 0; j < 4; ++j)
    if (detail::trim(header[j]) != fixed[j])
      throw Error("parse_error", path + ":1: expected header column '" + fixed[j] +
                                     "' in position " + std::to_string(j + 1) + ", found '" +
                                     header[j] + "'");

  std::vector<std::string> covnames;
  for (std::size_t j = 4; j < header.size(); ++j) covnames.push_back(detail::trim(header[j]));

  std::vector<bool> is_cluster_col(covnames.size(), false);
  for (const auto& n : spec.cluster_covariates) {
    bool found = false;
    for (std::size_t j = 0; j < covnames.size(); ++j)
      if (covnames[j] == n) {
        is_cluster_col[j] = true;
        found = true;
      }
    if (!found)
      throw Error("parse_error",
                  path + ":1: cluster covariate '" + n + "' not present in the header");
  }

  struct Row {
    long line = 0;
    double y = 0.0;
    std::vector<double> cov;
  };
  // cluster order and unit order follow first appearance in the file
  std::vector<std::string> cluster_order;
  std::map<std::string, int> cluster_index;
  std::vector<std::vector<std::string>> unit_order;
  std::vector<std::map<std::string, int>> unit_index;
  std::vector<std::vector<std::map<long, Row>>> rows;  // [cluster][unit][t]

  long line_no = 1;
  long max_t = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv_line(line);
    const std::string where = path + ":" + std::to_string(line_no);
    if (f.size() != header.size())
      throw Error("parse_error", where + ": expected " + std::to_string(header.size()) +
                                     " fields, found " + std::to_string(f.size()));
    const std::string cid = detail::trim(f[0]), uid = detail::trim(f[1]);
    if (cid.empty() || uid.empty())
      throw Error("parse_error", where + ": empty cluster_id or unit_id");
    const long t = detail::parse_long(detail::trim(f[2]), where);
    if (t < 1) throw Error("parse_error", where + ": occasion t must be >= 1");
    max_t = std::max(max_t, t);

    Row r;
    r.line = line_no;
    r.y = detail::parse_double(detail::trim(f[3]), where);
    for (std::size_t j = 0; j < covnames.size(); ++j)
      r.cov.push_back(detail::parse_double(detail::trim(f[4 + j]), where));

    auto ci = cluster_index.find(cid);
    if (ci == cluster_index.end()) {
      ci = cluster_index.emplace(cid, static_cast<int>(cluster_order.size())).first;
      cluster_order.push_back(cid);
      unit_order.emplace_back();
      unit_index.emplace_back();
      rows.emplace_back();
    }
    const int c = ci->second;
    auto ui = unit_index[c].find(uid);
    if (ui == unit_index[c].end()) {
      ui = unit_index[c].emplace(uid, static_cast<int>(unit_order[c].size())).first;
      unit_order[c].push_back(uid);
      rows[c].emplace_back();
    }
    auto [it, inserted] = rows[c][ui->second].emplace(t, std::move(r));
    if (!inserted)
      throw Error("parse_error", where + ": duplicate row for (" + cid + ", " + uid + ", t=" +
                                     std::to_string(t) + "), first seen at line " +
                                     std::to_string(it->second.line));
  }
  if (cluster_order.empty()) throw Error("parse_error", path + ": no data rows");

  const int T = static_cast<int>(max_t);
  PanelDataset data;
  data.T = T;
  for (std::size_t j = 0; j < covnames.size(); ++j)
    (is_cluster_col[j] ? data.cluster_covariate_names : data.unit_covariate_names)
        .push_back(covnames[j]);

  for (std::size_t c = 0; c < cluster_order.size(); ++c) {
    ClusterData cl;
    cl.cluster_id = cluster_order[c];
    cl.cluster_covariates.assign(T, std::vector<double>());

    for (std::size_t u = 0; u < unit_order[c].size(); ++u) {
      UnitData un;
      un.unit_id = unit_order[c][u];
      for (long t = 1; t <= T; ++t) {
        const auto it = rows[c][u].find(t);
        if (it == rows[c][u].end())
          throw Error("parse_error", path + ": unit (" + cl.cluster_id + ", " + un.unit_id +
                                         ") is missing occasion t=" + std::to_string(t) +
                                         " (occasions must be 1.." + std::to_string(T) +
                                         " contiguous)");
        const Row& r = it->second;
        un.responses.push_back(r.y);
        std::vector<double> zrow, xrow;
        for (std::size_t j = 0; j < covnames.size(); ++j)
          (is_cluster_col[j] ? xrow : zrow).push_back(r.cov[j]);
        un.unit_covariates.push_back(std::move(zrow));

        if (u == 0) {
          cl.cluster_covariates[t - 1] = xrow;
        } else {
          for (std::size_t j = 0, cj = 0; j < covnames.size(); ++j) {
            if (!is_cluster_col[j]) continue;
            if (xrow[cj] != cl.cluster_covariates[t - 1][cj])
              throw Error("parse_error",
                          path + ":" + std::to_string(r.line) + ": cluster covariate '" +
                              covnames[j] + "' differs across units of cluster " + cl.cluster_id +
                              " at t=" + std::to_string(t));
            ++cj;
          }
        }
      }
      un.measurement_mask.assign(T, true);
      cl.units.push_back(std::move(un));
    }
    data.clusters.push_back(std::move(cl));
  }
  return data;
}

inline void save_panel(const std::string& path, const PanelDataset& data) {
  std::ofstream out(path);
  if (!out) throw Error("io_error", "cannot write '" + path + "'");
  out << "cluster_id,unit_id,t,y";
  for (const auto& n : data.unit_covariate_names) out << ',' << n;
  for (const auto& n : data.cluster_covariate_names) out << ',' << n;
  out << '\n';
  for (const auto& cl : data.clusters)
    for (const auto& un : cl.units)
      for (int t = 0; t < data.T; ++t) {
        out << cl.cluster_id << ',' << un.unit_id << ',' << (t + 1) << ','
            << format_double(un.responses[t]);
        for (double v : un.unit_covariates[t]) out << ',' << format_double(v);
        for (double v : cl.cluster_covariates[t]) out << ',' << format_double(v);
        out << '\n';
      }
}

// Latent truth sidecar (states are written 1-based).
inline void save_latent(const std::string& path, const SimResult& sim) {
  std::ofstream out(path);
  if (!out) throw Error("io_error", "cannot write '" + path + "'");
  out << "level,cluster_id,unit_id,t,state\n";
  const auto& data = sim.data;
  for (std::size_t h = 0; h < data.clusters.size(); ++h) {
    for (int t = 0; t < data.T; ++t)
      out << "cluster," << data.clusters[h].cluster_id << ",," << (t + 1) << ','
          << (sim.latent.cluster_states[h][t] + 1) << '\n';
    for (std::size_t i = 0; i < data.clusters[h].units.size(); ++i)
      for (int t = 0; t < data.T; ++t)
        out << "unit," << data.clusters[h].cluster_id << ','
            << data.clusters[h].units[i].unit_id << ',' << (t + 1) << ','
            << (sim.latent.unit_states[h][i][t] + 1) << '\n';
  }
}

// ---- flat key = value configuration ----

class KeyValueConfig {
 public:
  static KeyValueConfig parse_string(const std::string& text, const std::string& origin) {
    KeyValueConfig cfg;
    cfg.origin_ = origin;
    std::istringstream in(text);
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const std::string s = detail::trim(line);
      if (s.empty() || s[0] == '#') continue;
      const auto eq = s.find('=');
      if (eq == std::string::npos)
        throw Error("config_error",
                    origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
      const std::string key = detail::trim(s.substr(0, eq));
      const std::string value = detail::trim(s.substr(eq + 1));
      if (key.empty())
        throw Error("config_error", origin + ":" + std::to_string(line_no) + ": empty key");
      if (cfg.index_.count(key))
        throw Error("config_error",
                    origin + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
      cfg.index_[key] = static_cast<int>(cfg.items_.size());
      cfg.items_.emplace_back(key, value);
    }
    return cfg;
  }

  static KeyValueConfig parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("io_error", "cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_string(ss.str(), path);
  }

  bool has(const std::string& key) const { return index_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& dflt) const {
    const auto it = index_.find(key);
    return it == index_.end() ? dflt : items_[it->second].second;
  }
  std::string require_string(const std::string& key) const {
    const auto it = index_.find(key);
    if (it == index_.end())
      throw Error("config_error", origin_ + ": missing required key '" + key + "'");
    return items_[it->second].second;
  }
  double get_double(const std::string& key, double dflt) const {
    return has(key) ? detail::parse_double(require_string(key), origin_ + ": " + key) : dflt;
  }
  double require_double(const std::string& key) const {
    return detail::parse_double(require_string(key), origin_ + ": " + key);
  }
  long get_long(const std::string& key, long dflt) const {
    return has(key) ? detail::parse_long(require_string(key), origin_ + ": " + key) : dflt;
  }
  bool get_bool(const std::string& key, bool dflt) const {
    if (!has(key)) return dflt;
    const std::string v = require_string(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw Error("config_error", origin_ + ": " + key + ": expected a boolean, got '" + v + "'");
  }
  std::vector<std::string> get_string_list(const std::string& key) const {
    std::vector<std::string> out;
    if (!has(key)) return out;
    const std::string v = require_string(key);
    std::string cur;
    for (char c : v + ",") {
      if (c == ',') {
        const std::string item = detail::trim(cur);
        if (!item.empty()) out.push_back(item);
        cur.clear();
      } else {
        cur += c;
      }
    }
    return out;
  }
  std::vector<double> get_double_list(const std::string& key) const {
    std::vector<double> out;
    for (const auto& s : get_string_list(key))
      out.push_back(detail::parse_double(s, origin_ + ": " + key));
    return out;
  }

  // Unknown keys are rejected, not ignored. `prefixes` whitelists key
  // families like "unit_covariate.".
  void require_known(const std::vector<std::string>& allowed,
                     const std::vector<std::string>& prefixes = {}) const {
    std::string unknown;
    for (const auto& [key, value] : items_) {
      bool ok = false;
      for (const auto& a : allowed)
        if (key == a) ok = true;
      for (const auto& p : prefixes)
        if (key.size() > p.size() && key.compare(0, p.size(), p) == 0) ok = true;
      if (!ok) unknown += (unknown.empty() ? "" : ", ") + key;
    }
    if (!unknown.empty())
      throw Error("config_error", origin_ + ": unknown keys: " + unknown);
  }

  const std::vector<std::pair<std::string, std::string>>& items() const { return items_; }
  const std::string& origin() const { return origin_; }

 private:
  std::string origin_ = "<config>";
  std::vector<std::pair<std::string, std::string>> items_;
  std::map<std::string, int> index_;
};

namespace detail {

inline const std::vector<std::string>& model_config_keys() {
  static const std::vector<std::string> keys = {
      "family",        "k1", "k2", "cluster_transition", "unit_transition",
      "lag_handling",  "unit_covariates", "cluster_covariates"};
  return keys;
}

inline const std::vector<std::string>& em_config_keys() {
  static const std::vector<std::string> keys = {
      "max_iterations", "rel_tolerance",   "n_random_starts", "seed",
      "newton_max_steps", "newton_grad_tol", "strict_pairs",  "pair_weighting"};
  return keys;
}

}  // namespace detail

inline ModelSpec model_spec_from_config(const KeyValueConfig& cfg) {
  ModelSpec spec;
  spec.family = parse_family(cfg.get_string("family", "bernoulli"));
  spec.k1 = static_cast<int>(cfg.get_long("k1", 1));
  spec.k2 = static_cast<int>(cfg.get_long("k2", 1));
  spec.cluster_transition = parse_transition(cfg.get_string("cluster_transition", "unconstrained"));
  spec.unit_transition = parse_transition(cfg.get_string("unit_transition", "unconstrained"));
  spec.lag_handling = parse_lag_handling(cfg.get_string("lag_handling", "none"));
  spec.cluster_covariates = cfg.get_string_list("cluster_covariates");
  spec.unit_covariates = cfg.get_string_list("unit_covariates");
  spec.validate();
  return spec;
}

inline EmConfig em_config_from_config(const KeyValueConfig& cfg) {
  if (cfg.has("pair_weighting"))
    throw Error("not_implemented",
                "pair_weighting is reserved for a weighted pairwise likelihood "
                "and is not implemented; remove the key");
  EmConfig em;
  em.max_iterations = static_cast<int>(cfg.get_long("max_iterations", em.max_iterations));
  em.rel_tolerance = cfg.get_double("rel_tolerance", em.rel_tolerance);
  em.n_random_starts = static_cast<int>(cfg.get_long("n_random_starts", em.n_random_starts));
  em.random_seed = static_cast<std::uint64_t>(cfg.get_long("seed", 1));
  em.newton_max_steps = static_cast<int>(cfg.get_long("newton_max_steps", em.newton_max_steps));
  em.newton_grad_tol = cfg.get_double("newton_grad_tol", em.newton_grad_tol);
  em.strict_pairs = cfg.get_bool("strict_pairs", false);
  em.validate();
  return em;
}

inline CovariateGenerator parse_covariate_generator(const std::string& name,
                                                    const std::string& value) {
  CovariateGenerator g;
  g.name = name;
  const auto colon = value.find(':');
  const std::string kind = detail::trim(value.substr(0, colon));
  const std::string args = colon == std::string::npos ? "" : detail::trim(value.substr(colon + 1));
  auto split_args = [&] {
    std::vector<double> out;
    std::string cur;
    for (char c : args + ",") {
      if (c == ',') {
        if (!detail::trim(cur).empty())
          out.push_back(detail::parse_double(detail::trim(cur), "covariate " + name));
        cur.clear();
      } else {
        cur += c;
      }
    }
    return out;
  };
  if (kind == "constant") {
    const auto a = split_args();
    if (a.size() != 1)
      throw Error("config_error", "covariate " + name + ": constant takes one value");
    g.kind = CovariateKind::Constant;
    g.a = a[0];
  } else if (kind == "uniform") {
    const auto a = split_args();
    if (a.size() != 2 || !(a[0] < a[1]))
      throw Error("config_error", "covariate " + name + ": uniform takes 'lo,hi' with lo < hi");
    g.kind = CovariateKind::Uniform;
    g.a = a[0];
    g.b = a[1];
  } else if (kind == "binary") {
    const auto a = split_args();
    if (a.size() != 1 || !(a[0] >= 0.0 && a[0] <= 1.0))
      throw Error("config_error", "covariate " + name + ": binary takes a rate in [0, 1]");
    g.kind = CovariateKind::Binary;
    g.a = a[0];
  } else if (kind == "lagged") {
    g.kind = CovariateKind::LaggedResponse;
  } else {
    throw Error("config_error", "covariate " + name + ": unknown generator '" + kind +
                                    "' (expected constant|uniform|binary|lagged)");
  }
  return g;
}

namespace detail {

inline Matrix parse_matrix(const std::string& text, int k, const std::string& where) {
  Matrix M(k, k);
  std::vector<std::string> rows;
  std::string cur;
  for (char c : text + ";") {
    if (c == ';') {
      rows.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  while (!rows.empty() && detail::trim(rows.back()).empty()) rows.pop_back();
  if (static_cast<int>(rows.size()) != k)
    throw Error("config_error", where + ": expected " + std::to_string(k) + " rows");
  for (int r = 0; r < k; ++r) {
    std::vector<double> vals;
    std::string item;
    for (char c : rows[r] + ",") {
      if (c == ',') {
        if (!detail::trim(item).empty())
          vals.push_back(detail::parse_double(detail::trim(item), where));
        item.clear();
      } else {
        item += c;
      }
    }
    if (static_cast<int>(vals.size()) != k)
      throw Error("config_error", where + ": row " + std::to_string(r + 1) + " needs " +
                                      std::to_string(k) + " entries");
    for (int c = 0; c < k; ++c) M(r, c) = vals[c];
  }
  return M;
}

inline void parse_size_range(const std::string& text, int* lo, int* hi) {
  const auto dots = text.find("..");
  if (dots == std::string::npos) {
    *lo = *hi = static_cast<int>(parse_long(trim(text), "cluster_size"));
  } else {
    *lo = static_cast<int>(parse_long(trim(text.substr(0, dots)), "cluster_size"));
    *hi = static_cast<int>(parse_long(trim(text.substr(dots + 2)), "cluster_size"));
  }
}

}  // namespace detail

inline SimDesign sim_design_from_config(const KeyValueConfig& cfg) {
  std::vector<std::string> allowed = detail::model_config_keys();
  for (const char* k : {"H", "T", "cluster_size", "seed", "lambda", "pi", "rho_cluster",
                        "rho_unit", "Lambda", "Pi", "intercept", "alpha", "beta", "gamma",
                        "delta", "sigma2"})
    allowed.push_back(k);
  cfg.require_known(allowed, {"unit_covariate.", "cluster_covariate."});

  SimDesign d;
  d.spec = model_spec_from_config(cfg);
  d.H = static_cast<int>(cfg.get_long("H", 1));
  d.T = static_cast<int>(cfg.get_long("T", 1));
  detail::parse_size_range(cfg.get_string("cluster_size", "1"), &d.size_min, &d.size_max);
  d.seed = static_cast<std::uint64_t>(cfg.get_long("seed", 1));

  const int k1 = d.spec.k1, k2 = d.spec.k2;
  auto initial_probs = [&](const std::string& key, int k) {
    if (!cfg.has(key)) {
      if (k == 1) return Vector::Ones(1).eval();
      throw Error("config_error", "missing key '" + key + "'");
    }
    const auto vals = cfg.get_double_list(key);
    if (static_cast<int>(vals.size()) != k)
      throw Error("config_error", key + " needs " + std::to_string(k) + " entries");
    Vector v(k);
    for (int i = 0; i < k; ++i) v[i] = vals[i];
    return v.eval();
  };

  d.theta.lambda = initial_probs("lambda", k1);
  d.theta.pi = initial_probs("pi", k2);

  auto transition_from = [&](TransitionKind kind, int k, const std::string& rho_key,
                             const std::string& mat_key) {
    if (k == 1) return Matrix::Ones(1, 1).eval();
    switch (kind) {
      case TransitionKind::TridiagonalConstant:
        return build_tridiagonal(k, cfg.require_double(rho_key)).eval();
      case TransitionKind::Diagonal:
        return Matrix::Identity(k, k).eval();
      case TransitionKind::Unconstrained:
        return detail::parse_matrix(cfg.require_string(mat_key), k, mat_key).eval();
    }
    return Matrix::Identity(k, k).eval();
  };
  d.theta.Lambda = transition_from(d.spec.cluster_transition, k1, "rho_cluster", "Lambda");
  d.theta.Pi = transition_from(d.spec.unit_transition, k2, "rho_unit", "Pi");

  d.theta.intercept = cfg.get_double("intercept", 0.0);
  auto support_or_zero = [&](const std::string& key, int k) {
    if (!cfg.has(key)) return Vector::Zero(k).eval();
    const auto vals = cfg.get_double_list(key);
    if (static_cast<int>(vals.size()) != k)
      throw Error("config_error", key + " needs " + std::to_string(k) + " entries");
    if (vals[0] != 0.0)
      throw Error("config_error", key + "[1] must be 0 (state-1 support point is the reference)");
    Vector v(k);
    for (int i = 0; i < k; ++i) v[i] = vals[i];
    return v.eval();
  };
  d.theta.alpha = support_or_zero("alpha", k1);
  d.theta.beta = support_or_zero("beta", k2);

  auto coefs_or_zero = [&](const std::string& key, std::size_t q) {
    if (!cfg.has(key)) return Vector::Zero(static_cast<int>(q)).eval();
    const auto vals = cfg.get_double_list(key);
    if (vals.size() != q)
      throw Error("config_error", key + " needs " + std::to_string(q) + " entries (one per "
                                      "selected covariate)");
    Vector v(static_cast<int>(q));
    for (std::size_t i = 0; i < q; ++i) v[static_cast<int>(i)] = vals[i];
    return v.eval();
  };
  d.theta.gamma = coefs_or_zero("gamma", d.spec.cluster_covariates.size());
  d.theta.delta = coefs_or_zero("delta", d.spec.unit_covariates.size());
  if (d.spec.family == MeasurementFamily::Gaussian) d.theta.sigma2 = cfg.get_double("sigma2", 1.0);

  for (const auto& n : d.spec.cluster_covariates)
    d.cluster_covariates.push_back(
        parse_covariate_generator(n, cfg.require_string("cluster_covariate." + n)));
  for (const auto& n : d.spec.unit_covariates)
    d.unit_covariates.push_back(
        parse_covariate_generator(n, cfg.require_string("unit_covariate." + n)));

  d.validate();
  return d;
}

// ---- JSON fit artifact ----

namespace detail {

inline ordered_json vector_to_json(const Vector& v) {
  ordered_json a = ordered_json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline ordered_json matrix_to_json(const Matrix& M) {
  ordered_json a = ordered_json::array();
  for (int r = 0; r < M.rows(); ++r) {
    ordered_json row = ordered_json::array();
    for (int c = 0; c < M.cols(); ++c) row.push_back(M(r, c));
    a.push_back(row);
  }
  return a;
}

inline Vector vector_from_json(const nlohmann::json& a) {
  Vector v(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) v[static_cast<int>(i)] = a[i].get<double>();
  return v;
}

}  // namespace detail

inline ordered_json model_spec_to_json(const ModelSpec& spec) {
  ordered_json j;
  j["family"] = to_string(spec.family);
  j["k1"] = spec.k1;
  j["k2"] = spec.k2;
  j["cluster_transition"] = to_string(spec.cluster_transition);
  j["unit_transition"] = to_string(spec.unit_transition);
  j["lag_handling"] = to_string(spec.lag_handling);
  j["cluster_covariates"] = spec.cluster_covariates;
  j["unit_covariates"] = spec.unit_covariates;
  return j;
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec spec;
  spec.family = parse_family(j.at("family").get<std::string>());
  spec.k1 = j.at("k1").get<int>();
  spec.k2 = j.at("k2").get<int>();
  spec.cluster_transition = parse_transition(j.at("cluster_transition").get<std::string>());
  spec.unit_transition = parse_transition(j.at("unit_transition").get<std::string>());
  spec.lag_handling = parse_lag_handling(j.at("lag_handling").get<std::string>());
  spec.cluster_covariates = j.at("cluster_covariates").get<std::vector<std::string>>();
  spec.unit_covariates = j.at("unit_covariates").get<std::vector<std::string>>();
  spec.validate();
  return spec;
}

inline ordered_json parameters_to_json(const ParameterSet& th, const ModelSpec& spec) {
  ordered_json j;
  j["lambda"] = detail::vector_to_json(th.lambda);
  j["Lambda"] = detail::matrix_to_json(th.Lambda);
  if (spec.cluster_transition == TransitionKind::TridiagonalConstant)
    j["rho_cluster"] = tridiagonal_rho(th.Lambda);
  j["pi"] = detail::vector_to_json(th.pi);
  j["Pi"] = detail::matrix_to_json(th.Pi);
  if (spec.unit_transition == TransitionKind::TridiagonalConstant)
    j["rho_unit"] = tridiagonal_rho(th.Pi);
  j["intercept"] = th.intercept;
  j["alpha"] = detail::vector_to_json(th.alpha);
  j["beta"] = detail::vector_to_json(th.beta);
  j["gamma"] = detail::vector_to_json(th.gamma);
  j["delta"] = detail::vector_to_json(th.delta);
  if (spec.family == MeasurementFamily::Gaussian) j["sigma2"] = th.sigma2;
  return j;
}

inline ordered_json inference_to_json(const InferenceReport& rep) {
  ordered_json j;
  j["ploglik"] = rep.ploglik;
  j["j_rcond"] = rep.j_rcond;
  j["j_asymmetry"] = rep.j_asymmetry;
  if (!rep.covariance_ok) {
    j["error"] = rep.failure;
    j["J"] = detail::matrix_to_json(rep.J_hat);
    j["K"] = detail::matrix_to_json(rep.K_hat);
    return j;
  }
  j["clic"] = rep.clic;
  j["clic_penalty"] = rep.clic_penalty;
  j["names"] = rep.names;
  j["estimates"] = detail::vector_to_json(rep.estimates);
  j["std_errors"] = detail::vector_to_json(rep.std_errors);
  j["z_values"] = detail::vector_to_json(rep.z_values);
  j["p_values"] = detail::vector_to_json(rep.p_values);
  ordered_json nat = ordered_json::array();
  for (const auto& n : rep.natural) {
    ordered_json e;
    e["name"] = n.name;
    e["estimate"] = n.estimate;
    if (std::isfinite(n.std_error)) e["se"] = n.std_error;
    nat.push_back(std::move(e));
  }
  j["natural"] = std::move(nat);
  j["covariance"] = detail::matrix_to_json(rep.covariance);
  j["J"] = detail::matrix_to_json(rep.J_hat);
  j["K"] = detail::matrix_to_json(rep.K_hat);
  return j;
}

inline ordered_json fit_to_json(const FitResult& fit, const InferenceReport* rep,
                                const ModelSpec& spec, const ordered_json& resolved_config) {
  ordered_json j;
  j["model"] = model_spec_to_json(spec);
  j["ploglik"] = fit.ploglik;
  j["converged"] = fit.converged;
  j["iterations"] = fit.iterations;
  j["best_start"] = fit.best_start;
  j["start_ploglik"] = fit.start_ploglik;
  j["parameters"] = parameters_to_json(fit.theta_hat, spec);
  const FlatLayout L = FlatLayout::make(spec);
  ordered_json unc;
  unc["names"] = L.names;
  unc["values"] = detail::vector_to_json(flatten_parameters(fit.theta_hat, spec));
  j["parameters_unconstrained"] = std::move(unc);
  ordered_json order;
  order["cluster"] = fit.cluster_state_order;
  order["unit"] = fit.unit_state_order;
  j["state_order"] = std::move(order);
  if (rep) j["inference"] = inference_to_json(*rep);
  j["config"] = resolved_config;
  return j;
}

// Exact reload of a fit artifact: the unconstrained vector round-trips
// bit for bit through JSON.
inline std::pair<ModelSpec, ParameterSet> parameters_from_fit_json(const nlohmann::json& j) {
  const ModelSpec spec = model_spec_from_json(j.at("model"));
  const Vector flat = detail::vector_from_json(j.at("parameters_unconstrained").at("values"));
  return {spec, unflatten_parameters(flat, spec)};
}

inline ordered_json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("io_error", "cannot open '" + path + "'");
  try {
    return ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error("parse_error", path + ": " + e.what());
  }
}

inline void save_json(const std::string& path, const ordered_json& j) {
  std::ofstream out(path);
  if (!out) throw Error("io_error", "cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

// ---- CLIC grid report ----
//
// Rows are k1 values, columns k2 values; failed cells print NA. The final
// line flags the selected cell.
inline void write_grid_csv(const std::string& path, const GridResult& grid) {
  std::ofstream out(path);
  if (!out) throw Error("io_error", "cannot write '" + path + "'");
  out << "k1\\k2";
  for (int b : grid.k2_values) out << ',' << b;
  out << '\n';
  const std::size_t ncols = grid.k2_values.size();
  for (std::size_t r = 0; r < grid.k1_values.size(); ++r) {
    out << grid.k1_values[r];
    for (std::size_t c = 0; c < ncols; ++c) {
      const GridCell& cell = grid.cells[r * ncols + c];
      out << ',' << (cell.ok ? format_double(cell.clic) : "NA");
    }
    out << '\n';
  }
  if (const GridCell* best = grid.best())
    out << "best," << best->k1 << ',' << best->k2 << '\n';
  else
    out << "best,NA,NA\n";
}

}  // namespace nhmm
