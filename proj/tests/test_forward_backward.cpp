#include <nhmm/chain.hpp>
#include <nhmm/forward_backward.hpp>
#include <nhmm/rng.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <numeric>

#include "oracles.hpp"
#include "test_util.hpp"

using namespace nhmm;

namespace {

// random pair instance: chain composed from random component chains,
// emissions from bernoulli tables on random binary responses
struct Instance {
  AugmentedChain chain;
  std::vector<Vector> emissions;
};

Instance random_instance(int k1, int k2, int T, SeqRng& rng) {
  ModelSpec spec;
  spec.k1 = k1;
  spec.k2 = k2;
  const ParameterSet th = testutil::random_theta(spec, rng);
  Instance ins;
  ins.chain = compose_augmented(th.lambda, th.Lambda, th.pi, th.Pi);
  const Vector none = Vector::Zero(0);
  for (int t = 0; t < T; ++t) {
    const double yi = rng.u01() < 0.5 ? 0.0 : 1.0;
    const double yj = rng.u01() < 0.5 ? 0.0 : 1.0;
    ins.emissions.push_back(pair_emission_vector(yi, true, none, yj, true, none, none, th, spec));
  }
  return ins;
}

}  // namespace

TEST_CASE("single-occasion forward sum") {
  AugmentedChain ch;
  ch.k1 = 2;
  ch.k2 = 1;
  ch.k = 2;
  ch.phi = Vector(2);
  ch.phi << 0.5, 0.5;
  ch.Phi = Matrix::Identity(2, 2);
  Vector m(2);
  m << 0.2, 0.4;
  CHECK(forward_loglik(ch, {m}) == Catch::Approx(std::log(0.3)).epsilon(1e-14));
}

TEST_CASE("fully masked pair has log-likelihood zero") {
  SeqRng rng(31);
  const auto ins = random_instance(2, 2, 5, rng);
  std::vector<Vector> ones(5, Vector::Ones(ins.chain.k));
  CHECK(forward_loglik(ins.chain, ones) == 0.0);
}

TEST_CASE("forward recursion matches exhaustive path enumeration") {
  SeqRng rng(32);
  for (int rep = 0; rep < 20; ++rep) {
    const int k1 = 1 + static_cast<int>(rng.u01() * 2);
    const int k2 = 1 + static_cast<int>(rng.u01() * 2);
    const int T = 2 + static_cast<int>(rng.u01() * 3);
    const auto ins = random_instance(k1, k2, T, rng);
    const double ll = forward_loglik(ins.chain, ins.emissions);
    const double brute = std::log(oracle::chain_likelihood(ins.chain.phi, ins.chain.Phi,
                                                           ins.emissions));
    CHECK(std::abs(ll - brute) < 1e-10);
  }
}

TEST_CASE("forward log-likelihood is invariant under state relabeling") {
  SeqRng rng(33);
  const auto ins = random_instance(2, 2, 4, rng);
  const int k = ins.chain.k;

  std::vector<int> perm(k);
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = k - 1; i > 0; --i) std::swap(perm[i], perm[static_cast<int>(rng.u01() * (i + 1))]);

  AugmentedChain pc = ins.chain;
  std::vector<Vector> pm(ins.emissions.size(), Vector(k));
  for (int a = 0; a < k; ++a) {
    pc.phi[a] = ins.chain.phi[perm[a]];
    for (int b = 0; b < k; ++b) pc.Phi(a, b) = ins.chain.Phi(perm[a], perm[b]);
    for (std::size_t t = 0; t < ins.emissions.size(); ++t) pm[t][a] = ins.emissions[t][perm[a]];
  }
  CHECK(std::abs(forward_loglik(pc, pm) - forward_loglik(ins.chain, ins.emissions)) < 1e-10);
}

TEST_CASE("pair outcome probabilities sum to one over all binary outcomes") {
  SeqRng rng(34);
  ModelSpec spec;
  spec.k1 = 2;
  spec.k2 = 2;
  const ParameterSet th = testutil::random_theta(spec, rng);
  const AugmentedChain chain = compose_augmented(th.lambda, th.Lambda, th.pi, th.Pi);
  const Vector none = Vector::Zero(0);

  for (int T : {2, 4}) {
    double total = 0.0;
    for (int code = 0; code < (1 << (2 * T)); ++code) {
      std::vector<Vector> m;
      for (int t = 0; t < T; ++t) {
        const double yi = (code >> (2 * t)) & 1;
        const double yj = (code >> (2 * t + 1)) & 1;
        m.push_back(pair_emission_vector(yi, true, none, yj, true, none, none, th, spec));
      }
      total += std::exp(forward_loglik(chain, m));
    }
    CHECK(std::abs(total - 1.0) < 1e-10);
  }
}

TEST_CASE("exchanging the two units leaves the pair log-likelihood unchanged") {
  SeqRng rng(35);
  ModelSpec spec;
  spec.k1 = 2;
  spec.k2 = 3;
  spec.unit_covariates = {"z1"};
  const ParameterSet th = testutil::random_theta(spec, rng);
  const AugmentedChain chain = compose_augmented(th.lambda, th.Lambda, th.pi, th.Pi);
  const Vector none = Vector::Zero(0);

  std::vector<Vector> m_ij, m_ji;
  for (int t = 0; t < 4; ++t) {
    const double yi = rng.u01() < 0.5, yj = rng.u01() < 0.5;
    Vector zi(1), zj(1);
    zi << rng.uniform(-1, 1);
    zj << rng.uniform(-1, 1);
    m_ij.push_back(pair_emission_vector(yi, true, zi, yj, true, zj, none, th, spec));
    m_ji.push_back(pair_emission_vector(yj, true, zj, yi, true, zi, none, th, spec));
  }
  CHECK(std::abs(forward_loglik(chain, m_ij) - forward_loglik(chain, m_ji)) < 1e-12);
}

TEST_CASE("zero-probability observations raise the zero-likelihood signal") {
  AugmentedChain ch;
  ch.k1 = 2;
  ch.k2 = 1;
  ch.k = 2;
  ch.phi = Vector(2);
  ch.phi << 0.5, 0.5;
  ch.Phi = Matrix::Identity(2, 2);
  Vector m1(2), m2(2);
  m1 << 1.0, 0.0;
  m2 << 0.0, 1.0;
  try {
    forward_loglik(ch, {m1, m2});
    FAIL("expected ZeroLikelihoodError");
  } catch (const ZeroLikelihoodError& e) {
    CHECK(e.occasion == 2);
  }
}

TEST_CASE("single-occasion posterior is the normalized product") {
  SeqRng rng(36);
  const auto ins = random_instance(2, 2, 1, rng);
  const PairPosterior post = posteriors(ins.chain, ins.emissions);
  REQUIRE(post.gammas.size() == 1);
  REQUIRE(post.xis.empty());
  const Vector expected =
      ins.chain.phi.cwiseProduct(ins.emissions[0]) / ins.chain.phi.dot(ins.emissions[0]);
  CHECK((post.gammas[0] - expected).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("identity transitions freeze the smoothed marginals") {
  SeqRng rng(37);
  ModelSpec spec;
  spec.k1 = 2;
  spec.k2 = 2;
  spec.cluster_transition = TransitionKind::Diagonal;
  spec.unit_transition = TransitionKind::Diagonal;
  const ParameterSet th = testutil::random_theta(spec, rng);
  const AugmentedChain chain = compose_augmented(th.lambda, th.Lambda, th.pi, th.Pi);
  // the frozen chain makes the smoothed marginals time-invariant even
  // though the observations differ across occasions
  const Vector none = Vector::Zero(0);
  const Vector m1 = pair_emission_vector(1.0, true, none, 0.0, true, none, none, th, spec);
  const Vector m2 = pair_emission_vector(0.0, true, none, 0.0, true, none, none, th, spec);
  const Vector m3 = pair_emission_vector(1.0, true, none, 1.0, true, none, none, th, spec);
  const PairPosterior post = posteriors(chain, {m1, m2, m3});
  for (int t = 1; t < 3; ++t)
    CHECK((post.gammas[t] - post.gammas[0]).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("smoothed marginals match path enumeration and satisfy the sum rules") {
  SeqRng rng(38);
  for (int rep = 0; rep < 10; ++rep) {
    const int T = 2 + static_cast<int>(rng.u01() * 3);
    const auto ins = random_instance(2, 2, T, rng);
    const PairPosterior post = posteriors(ins.chain, ins.emissions);

    CHECK(post.loglik == forward_loglik(ins.chain, ins.emissions));  // bit-for-bit

    const Matrix brute = oracle::posterior_marginals(ins.chain.phi, ins.chain.Phi, ins.emissions);
    for (int t = 0; t < T; ++t) {
      CHECK(std::abs(post.gammas[t].sum() - 1.0) < 1e-10);
      CHECK((post.gammas[t].transpose() - brute.row(t)).cwiseAbs().maxCoeff() < 1e-10);
    }
    for (int t = 1; t < T; ++t) {
      const Matrix& xi = post.xis[t - 1];
      CHECK(std::abs(xi.sum() - 1.0) < 1e-10);
      CHECK((xi.rowwise().sum() - post.gammas[t - 1]).cwiseAbs().maxCoeff() < 1e-10);
      CHECK((xi.colwise().sum().transpose() - post.gammas[t]).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
}

TEST_CASE("collapsed counts equal direct summation over the augmented grid") {
  SeqRng rng(39);
  const int k1 = 2, k2 = 3, T = 4;
  const auto ins = random_instance(k1, k2, T, rng);
  const PairPosterior post = posteriors(ins.chain, ins.emissions);
  const CollapsedCounts c = collapse_posteriors(post, k1, k2);

  for (int t = 0; t < T; ++t) {
    Vector cocc = Vector::Zero(k1);
    Vector uocc0 = Vector::Zero(k2), uocc1 = Vector::Zero(k2);
    Matrix j0 = Matrix::Zero(k1, k2), j1 = Matrix::Zero(k1, k2);
    for (int u = 0; u < k1; ++u)
      for (int v1 = 0; v1 < k2; ++v1)
        for (int v2 = 0; v2 < k2; ++v2) {
          const double p = post.gammas[t][AugmentedChain::flat_index(u, v1, v2, k2)];
          cocc[u] += p;
          uocc0[v1] += p;
          uocc1[v2] += p;
          j0(u, v1) += p;
          j1(u, v2) += p;
        }
    CHECK((c.cluster_occ[t] - cocc).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((c.unit_occ[0][t] - uocc0).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((c.unit_occ[1][t] - uocc1).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((c.joint_occ[0][t] - j0).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((c.joint_occ[1][t] - j1).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(std::abs(c.unit_occ[0][t].sum() - 1.0) < 1e-10);
  }

  Matrix ct = Matrix::Zero(k1, k1), ut0 = Matrix::Zero(k2, k2), ut1 = Matrix::Zero(k2, k2);
  for (const Matrix& xi : post.xis)
    for (int u0 = 0; u0 < k1; ++u0)
      for (int a0 = 0; a0 < k2; ++a0)
        for (int b0 = 0; b0 < k2; ++b0)
          for (int u = 0; u < k1; ++u)
            for (int a = 0; a < k2; ++a)
              for (int b = 0; b < k2; ++b) {
                const double p = xi(AugmentedChain::flat_index(u0, a0, b0, k2),
                                    AugmentedChain::flat_index(u, a, b, k2));
                ct(u0, u) += p;
                ut0(a0, a) += p;
                ut1(b0, b) += p;
              }
  CHECK((c.cluster_trans - ct).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((c.unit_trans[0] - ut0).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((c.unit_trans[1] - ut1).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("single cluster state collapses to the unit vector") {
  SeqRng rng(40);
  const auto ins = random_instance(1, 2, 3, rng);
  const PairPosterior post = posteriors(ins.chain, ins.emissions);
  const CollapsedCounts c = collapse_posteriors(post, 1, 2);
  for (int t = 0; t < 3; ++t) {
    REQUIRE(c.cluster_occ[t].size() == 1);
    CHECK(c.cluster_occ[t][0] == Catch::Approx(1.0).margin(1e-10));
  }
}
