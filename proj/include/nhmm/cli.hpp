#pragma once

// Command dispatch for the nhmm tool: simulate | fit | loglik | select.
// Kept in a header so the commands can be exercised in-process by tests;
// the binary's main() only forwards argv.

#include "nhmm/em.hpp"
#include "nhmm/inference.hpp"
#include "nhmm/io.hpp"
#include "nhmm/simulate.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

namespace nhmm::cli {

namespace detail {

inline int threads_from_env() {
  const char* env = std::getenv("NESTED_HMM_THREADS");
  if (!env || !*env) return 0;
  try {
    return std::max(0, std::stoi(env));
  } catch (const std::exception&) {
    throw Error("config_error", std::string("NESTED_HMM_THREADS is not an integer: '") + env + "'");
  }
}

inline void parse_range(const std::string& text, int* lo, int* hi) {
  const auto dots = text.find("..");
  try {
    if (dots == std::string::npos) {
      *lo = *hi = std::stoi(text);
    } else {
      *lo = std::stoi(text.substr(0, dots));
      *hi = std::stoi(text.substr(dots + 2));
    }
  } catch (const std::exception&) {
    throw Error("config_error", "cannot parse range '" + text + "' (expected A..B or K)");
  }
}

inline std::vector<std::string> model_em_keys() {
  std::vector<std::string> allowed = nhmm::detail::model_config_keys();
  for (const auto& k : nhmm::detail::em_config_keys()) allowed.push_back(k);
  return allowed;
}

inline ordered_json resolved_em_json(const EmConfig& em, int threads,
                                     const std::string& data_path) {
  ordered_json j;
  j["data"] = data_path;
  j["max_iterations"] = em.max_iterations;
  j["rel_tolerance"] = em.rel_tolerance;
  j["n_random_starts"] = em.n_random_starts;
  j["seed"] = em.random_seed;
  j["newton_max_steps"] = em.newton_max_steps;
  j["newton_grad_tol"] = em.newton_grad_tol;
  j["strict_pairs"] = em.strict_pairs;
  j["threads"] = threads;
  return j;
}

}  // namespace detail

inline int run_command(const std::vector<std::string>& args, std::ostream& out,
                       std::ostream& err) {
  CLI::App app{"nested hidden Markov chains for multilevel panels, fitted by "
               "pairwise-likelihood EM"};
  app.require_subcommand(1);

  std::string data_path, config_path, out_path, params_path, latent_path;
  std::string k1_range, k2_range;
  long long seed = -1;
  int threads = -1;
  bool strict_pairs = false;

  auto* sim = app.add_subcommand("simulate", "draw a synthetic panel from a full parameter set");
  sim->add_option("--config", config_path, "simulation config file")->required();
  sim->add_option("--out", out_path, "output panel CSV")->required();
  sim->add_option("--latent", latent_path, "optional sidecar CSV with the true latent paths");
  sim->add_option("--seed", seed, "override the config seed");

  auto* fitc = app.add_subcommand("fit", "fit the model to a panel");
  fitc->add_option("--data", data_path, "panel CSV")->required();
  fitc->add_option("--config", config_path, "model/EM config file")->required();
  fitc->add_option("--out", out_path, "output fit JSON")->required();
  fitc->add_option("--seed", seed, "override the config seed");
  fitc->add_option("--threads", threads, "worker threads (1 = bit-reproducible)");
  fitc->add_flag("--strict-pairs", strict_pairs, "drop singleton clusters from the objective");

  auto* llc = app.add_subcommand("loglik", "evaluate the pairwise log-likelihood of saved "
                                           "parameters on a panel");
  llc->add_option("--data", data_path, "panel CSV")->required();
  llc->add_option("--params", params_path, "fit JSON with the parameters")->required();
  llc->add_option("--threads", threads, "worker threads");
  llc->add_flag("--strict-pairs", strict_pairs, "drop singleton clusters from the objective");

  auto* sel = app.add_subcommand("select", "fit a (k1, k2) grid and report CLIC per cell");
  sel->add_option("--data", data_path, "panel CSV")->required();
  sel->add_option("--config", config_path, "model/EM config file")->required();
  sel->add_option("--k1", k1_range, "cluster-state range A..B")->required();
  sel->add_option("--k2", k2_range, "unit-state range C..D")->required();
  sel->add_option("--out", out_path, "output grid CSV")->required();
  sel->add_option("--seed", seed, "override the config seed");
  sel->add_option("--threads", threads, "worker threads");
  sel->add_flag("--strict-pairs", strict_pairs, "drop singleton clusters from the objective");

  std::vector<const char*> argv;
  argv.push_back("nhmm");
  for (const auto& a : args) argv.push_back(a.c_str());

  try {
    try {
      app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
      return app.exit(e, out, err);
    }

    const int resolved_threads = threads >= 0 ? threads : detail::threads_from_env();

    if (sim->parsed()) {
      KeyValueConfig cfg = KeyValueConfig::parse_file(config_path);
      SimDesign design = sim_design_from_config(cfg);
      if (seed >= 0) design.seed = static_cast<std::uint64_t>(seed);
      const SimResult result = simulate(design);
      save_panel(out_path, result.data);
      if (!latent_path.empty()) save_latent(latent_path, result);
      out << "wrote " << out_path << " (" << result.data.n_clusters() << " clusters, "
          << result.data.n_units() << " units, T=" << result.data.T << ")\n";
      return 0;
    }

    if (fitc->parsed()) {
      KeyValueConfig cfg = KeyValueConfig::parse_file(config_path);
      {
        const std::vector<std::string> allowed = detail::model_em_keys();
        cfg.require_known(allowed);
      }
      const ModelSpec spec = model_spec_from_config(cfg);
      EmConfig em = em_config_from_config(cfg);
      if (seed >= 0) em.random_seed = static_cast<std::uint64_t>(seed);
      if (strict_pairs) em.strict_pairs = true;
      em.threads = resolved_threads;

      const PanelDataset data = load_panel(data_path, spec);
      const FitResult fit_res = fit(data, spec, em);
      const InferenceReport rep = sandwich(data, spec, fit_res.theta_hat, em);
      const ordered_json j =
          fit_to_json(fit_res, &rep, spec, detail::resolved_em_json(em, resolved_threads, data_path));
      save_json(out_path, j);
      out << "ploglik " << format_double(fit_res.ploglik) << '\n';
      if (rep.covariance_ok)
        out << "clic " << format_double(rep.clic) << '\n';
      else
        out << "clic NA (" << rep.failure << ")\n";
      out << "converged " << (fit_res.converged ? "true" : "false") << '\n';
      out << "wrote " << out_path << '\n';
      return 0;
    }

    if (llc->parsed()) {
      const ordered_json j = load_json(params_path);
      const auto [spec, theta] = parameters_from_fit_json(j);
      EmConfig em;
      em.strict_pairs = strict_pairs;
      em.threads = resolved_threads;
      const PanelDataset data = load_panel(data_path, spec);
      out << format_double(pairwise_loglik(data, spec, theta, em)) << '\n';
      return 0;
    }

    if (sel->parsed()) {
      KeyValueConfig cfg = KeyValueConfig::parse_file(config_path);
      {
        const std::vector<std::string> allowed = detail::model_em_keys();
        cfg.require_known(allowed);
      }
      const ModelSpec tmpl = model_spec_from_config(cfg);
      EmConfig em = em_config_from_config(cfg);
      if (seed >= 0) em.random_seed = static_cast<std::uint64_t>(seed);
      if (strict_pairs) em.strict_pairs = true;
      em.threads = resolved_threads;

      int k1_lo = 0, k1_hi = 0, k2_lo = 0, k2_hi = 0;
      detail::parse_range(k1_range, &k1_lo, &k1_hi);
      detail::parse_range(k2_range, &k2_lo, &k2_hi);

      const PanelDataset data = load_panel(data_path, tmpl);
      const GridResult grid = select_grid(data, k1_lo, k1_hi, k2_lo, k2_hi, tmpl, em);
      write_grid_csv(out_path, grid);
      if (const GridCell* best = grid.best())
        out << "best k1=" << best->k1 << " k2=" << best->k2 << " clic "
            << format_double(best->clic) << '\n';
      else
        out << "best NA (no cell produced a CLIC value)\n";
      out << "wrote " << out_path << '\n';
      return 0;
    }
    return 1;
  } catch (const Error& e) {
    ordered_json rec;
    rec["error"]["code"] = e.code;
    rec["error"]["message"] = e.what();
    err << rec.dump() << '\n';
    return 2;
  } catch (const std::exception& e) {
    ordered_json rec;
    rec["error"]["code"] = "internal_error";
    rec["error"]["message"] = e.what();
    err << rec.dump() << '\n';
    return 3;
  }
}

}  // namespace nhmm::cli
