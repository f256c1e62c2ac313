#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "rex/sem.hpp"

using namespace rex;

namespace {

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Two-sided Kolmogorov-Smirnov p-value against N(0, sigma^2).
double ks_pvalue(Vector column, double sigma) {
  std::sort(column.begin(), column.end());
  const Index n = column.size();
  double d = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double f = normal_cdf(column[i] / sigma);
    d = std::max(d, std::abs(f - static_cast<double>(i) / n));
    d = std::max(d, std::abs(static_cast<double>(i + 1) / n - f));
  }
  const double t = (std::sqrt(static_cast<double>(n)) + 0.12 +
                    0.11 / std::sqrt(static_cast<double>(n))) *
                   d;
  double p = 0.0;
  for (int k = 1; k <= 100; ++k)
    p += 2.0 * std::pow(-1.0, k - 1) * std::exp(-2.0 * k * k * t * t);
  return std::clamp(p, 0.0, 1.0);
}

LinearSem three_chain(double w1, double w2, double s1, double sy, double s2) {
  return chain_to_sem(ChainSem{w1, w2, s1, sy, s2});
}

std::vector<Intervention> full_do_set(Index dim, const std::vector<double>& values) {
  std::vector<Intervention> ivs;
  for (Index v = 1; v < dim; ++v)
    for (double x : values) ivs.push_back(Intervention::do_constant(static_cast<int>(v), x));
  return ivs;
}

// Random acyclic SEM: variable order is a random permutation, each allowed
// edge appears with probability 0.6.
LinearSem random_sem(Index dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<int> order(dim);
  for (Index i = 0; i < dim; ++i) order[static_cast<std::size_t>(i)] = static_cast<int>(i);
  std::shuffle(order.begin(), order.end(), rng);
  LinearSem sem;
  sem.coeffs = Matrix::Zero(dim, dim);
  for (Index a = 0; a < dim; ++a)
    for (Index b = 0; b < a; ++b) {
      if (unit(rng) < 0.6) {
        const int child = order[static_cast<std::size_t>(a)];
        const int parent = order[static_cast<std::size_t>(b)];
        sem.coeffs(child, parent) = 1.5 * gauss(rng);
      }
    }
  sem.noise_std = Vector(dim);
  for (Index i = 0; i < dim; ++i) sem.noise_std[i] = 0.5 + unit(rng);
  return sem;
}

}  // namespace

TEST_CASE("sample: zero-coefficient SEM gives independent Gaussian columns") {
  LinearSem sem;
  sem.coeffs = Matrix::Zero(3, 3);
  sem.noise_std = Vector(3);
  sem.noise_std << 1.0, 0.5, 2.0;
  const Matrix z = sample_raw(sem, std::nullopt, 100000, 42);
  for (Index c = 0; c < 3; ++c) CHECK(ks_pvalue(z.col(c), sem.noise_std[c]) > 0.001);
}

TEST_CASE("sample: do() clamps the column before children are computed") {
  LinearSem sem = three_chain(1.0, 1.0, 1.0, 1.0, 1.0);
  const Matrix z = sample_raw(sem, Intervention::do_constant(1, 5.0), 500, 7);
  CHECK((z.col(1).array() == 5.0).all());
  // Y still follows the mechanism w1 * X1 + noise, so its mean tracks 5.
  CHECK(z.col(0).mean() == doctest::Approx(5.0).epsilon(0.05));
}

TEST_CASE("sample: chain covariance matches the analytic value within 3 SEs") {
  // Y <- X1, X2 <- Y with unit weights: Cov(X1, X2) = sigma1^2.
  const double s1 = 1.3;
  LinearSem sem = three_chain(1.0, 1.0, s1, 1.0, 1.0);
  const Index n = 100000;
  const Matrix z = sample_raw(sem, std::nullopt, n, 11);
  const Vector x1 = z.col(1).array() - z.col(1).mean();
  const Vector x2 = z.col(2).array() - z.col(2).mean();
  const double cov = x1.dot(x2) / static_cast<double>(n);
  const double var1 = x1.squaredNorm() / static_cast<double>(n);
  const double var2 = x2.squaredNorm() / static_cast<double>(n);
  const double se = std::sqrt((var1 * var2 + cov * cov) / static_cast<double>(n));
  CHECK(std::abs(cov - s1 * s1) < 3.0 * se);
}

TEST_CASE("sample: cyclic coefficient graphs are rejected") {
  LinearSem sem;
  sem.coeffs = Matrix::Zero(2, 2);
  sem.coeffs(0, 1) = 1.0;
  sem.coeffs(1, 0) = 1.0;
  sem.noise_std = Vector::Ones(2);
  CHECK_THROWS(sample_raw(sem, std::nullopt, 10, 0));
}

TEST_CASE("population_mse: closed-form special cases") {
  const ChainSem c{1.7, 0.8, 1.1, 0.9, 1.4};
  // Causal model: only the target noise remains.
  CHECK(population_mse(c, c.w1y, 0.0) == doctest::Approx(c.sigmaY * c.sigmaY).epsilon(1e-15));
  // Anticausal model: only the anticausal noise remains, scaled by 1/wy2^2.
  CHECK(population_mse(c, 0.0, 1.0 / c.wy2) ==
        doctest::Approx(c.sigma2 * c.sigma2 / (c.wy2 * c.wy2)).epsilon(1e-15));
}

TEST_CASE("population_mse: matches the empirical risk on a large sample") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.5, 1.5);
  for (int trial = 0; trial < 10; ++trial) {
    const ChainSem c{u(rng), u(rng), 0.5 + std::abs(u(rng)), 0.5 + std::abs(u(rng)),
                     0.5 + std::abs(u(rng))};
    const double alpha = u(rng), beta = u(rng);
    const Index n = 1000000;
    const Matrix z = sample_raw(chain_to_sem(c), std::nullopt, n, 100 + trial);
    Vector sq(n);
    for (Index i = 0; i < n; ++i) {
      const double r = alpha * z(i, 1) + beta * z(i, 2) - z(i, 0);
      sq[i] = r * r;
    }
    const double mean = sq.mean();
    const double se = std::sqrt((sq.array() - mean).square().sum()) / static_cast<double>(n);
    CHECK(std::abs(mean - population_mse(c, alpha, beta)) < 3.0 * se + 1e-12);
  }
}

TEST_CASE("population_moments: agrees with Monte-Carlo risks on random SEMs") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  int checked = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const Index dim = 3 + static_cast<Index>(rng() % 3);
    LinearSem sem = random_sem(dim, 900 + trial);
    std::optional<Intervention> iv;
    if (trial % 3 == 1) iv = Intervention::do_constant(1 + static_cast<int>(rng() % (dim - 1)),
                                                       2.0 * gauss(rng));
    if (trial % 3 == 2)
      iv = Intervention::noise_scale(static_cast<int>(rng() % dim), 0.5 + unit(rng));
    Vector beta(dim - 1);
    for (Index i = 0; i < dim - 1; ++i) beta[i] = gauss(rng);
    const RiskQuadratic q = risk_quadratic(sem, iv);
    const Index n = 100000;
    const Matrix z = sample_raw(sem, iv, n, 4000 + trial);
    Vector sq(n);
    for (Index i = 0; i < n; ++i) {
      double pred = 0.0;
      for (Index j = 0; j < dim - 1; ++j) pred += beta[j] * z(i, 1 + j);
      const double r = pred - z(i, 0);
      sq[i] = r * r;
    }
    const double mean = sq.mean();
    const double se =
        std::sqrt((sq.array() - mean).square().sum()) / static_cast<double>(n);
    CHECK(std::abs(mean - q.eval(beta)) < 3.0 * se + 1e-10);
    ++checked;
  }
  CHECK(checked == 50);
}

TEST_CASE("rex_analytic_solution: anticausal-noise variation recovers the causal model") {
  std::vector<ChainSem> domains = {{1.0, 1.0, 1.0, 1.0, 0.5}, {1.0, 1.0, 1.0, 1.0, 2.0}};
  const RexChainSolution sol = rex_analytic_solution(domains);
  CHECK(sol.variation == ChainVariation::AnticausalNoise);
  CHECK(sol.alpha == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(sol.beta == 0.0);
  // Exact risk equality across domains.
  CHECK(std::abs(population_mse(domains[0], sol.alpha, sol.beta) -
                 population_mse(domains[1], sol.alpha, sol.beta)) < 1e-12);
}

TEST_CASE("rex_analytic_solution: target-noise variation recovers the anticausal model") {
  std::vector<ChainSem> domains = {{1.0, 1.0, 1.0, 0.5, 1.0}, {1.0, 1.0, 1.0, 2.0, 1.0}};
  const RexChainSolution sol = rex_analytic_solution(domains);
  CHECK(sol.variation == ChainVariation::TargetNoise);
  CHECK(sol.alpha == 0.0);
  CHECK(sol.beta == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(std::abs(population_mse(domains[0], sol.alpha, sol.beta) -
                 population_mse(domains[1], sol.alpha, sol.beta)) < 1e-12);

  std::vector<ChainSem> wide = {{1.0, 2.0, 1.0, 0.5, 1.0}, {1.0, 2.0, 1.0, 2.0, 1.0}};
  CHECK(rex_analytic_solution(wide).beta == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("rex_analytic_solution: identical domains are degenerate") {
  std::vector<ChainSem> domains = {{1.0, 1.0, 1.0, 1.0, 1.0}, {1.0, 1.0, 1.0, 1.0, 1.0}};
  CHECK_THROWS(rex_analytic_solution(domains));
  std::vector<ChainSem> both = {{1.0, 1.0, 1.0, 0.5, 0.5}, {1.0, 1.0, 1.0, 2.0, 2.0}};
  CHECK_THROWS(rex_analytic_solution(both));
}

TEST_CASE("theorem1_oracle: 3-variable chain with full do() triples") {
  const double w1 = 1.3;
  LinearSem sem = three_chain(w1, 0.7, 1.0, 0.8, 1.2);
  const Vector beta = theorem1_oracle(sem, full_do_set(3, {-1.0, 0.0, 1.0}));
  CHECK(beta[0] == doctest::Approx(w1).epsilon(1e-8));
  CHECK(std::abs(beta[1]) < 1e-7);

  // Grid-search cross-check: minimize the max pairwise risk gap over
  // (alpha, beta) in [-3,3]^2 at resolution 0.01.
  std::vector<RiskQuadratic> risks;
  for (const auto& iv : full_do_set(3, {-1.0, 0.0, 1.0}))
    risks.push_back(risk_quadratic(sem, iv));
  double best_gap = 1e300;
  Vector best(2);
  for (int a = -300; a <= 300; ++a)
    for (int b = -300; b <= 300; ++b) {
      Vector cand(2);
      cand << a / 100.0, b / 100.0;
      double lo = 1e300, hi = -1e300;
      for (const auto& r : risks) {
        const double v = r.eval(cand);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      if (hi - lo < best_gap) {
        best_gap = hi - lo;
        best = cand;
      }
    }
  CHECK((best - beta).cwiseAbs().maxCoeff() < 0.05);
}

TEST_CASE("theorem1_oracle: random SEMs recover the causal row") {
  for (int trial = 0; trial < 3; ++trial) {
    const Index dim = 3 + trial;
    LinearSem sem = random_sem(dim, 7000 + trial);
    const Vector beta = theorem1_oracle(sem, full_do_set(dim, {-1.0, 0.5, 1.5}));
    const Vector causal = sem.coeffs.row(0).segment(1, dim - 1).transpose();
    CHECK((beta - causal).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("theorem1_oracle: under-identification is reported") {
  LinearSem sem = three_chain(1.0, 1.0, 1.0, 1.0, 2.0);
  // Only two distinct do() values on X2.
  std::vector<Intervention> ivs = {
      Intervention::do_constant(1, -1.0), Intervention::do_constant(1, 0.0),
      Intervention::do_constant(1, 1.0),  Intervention::do_constant(2, -1.0),
      Intervention::do_constant(2, 1.0)};
  CHECK_THROWS_AS(theorem1_oracle(sem, ivs), UnderIdentifiedError);
  // All-equal values: still under-identified.
  std::vector<Intervention> equal_ivs = {
      Intervention::do_constant(1, 2.0), Intervention::do_constant(1, 2.0),
      Intervention::do_constant(1, 2.0), Intervention::do_constant(2, -1.0),
      Intervention::do_constant(2, 0.0), Intervention::do_constant(2, 1.0)};
  CHECK_THROWS_AS(theorem1_oracle(sem, equal_ivs), UnderIdentifiedError);
  // Intervening on the target is rejected.
  CHECK_THROWS(theorem1_oracle(sem, {Intervention::do_constant(0, 1.0)}));
}

TEST_CASE("chain_spurious_solution: the second root of the two-point do() family") {
  // With do(X2 = +-1) the risk difference vanishes for any beta, leaving a
  // quadratic with a nonzero root besides the causal (w1, 0).
  const ChainSem c{1.0, 1.0, 1.0, 1.0, 2.0};
  const auto root = chain_spurious_solution(c, 1.0);
  REQUIRE(root.has_value());
  CHECK(root->first == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(root->second == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  // The spurious root really does equalize the population risks over the
  // under-identified intervention family.
  LinearSem sem = three_chain(c.w1y, c.wy2, c.sigma1, c.sigmaY, c.sigma2);
  std::vector<Intervention> ivs = {
      Intervention::do_constant(1, -1.0), Intervention::do_constant(1, 0.0),
      Intervention::do_constant(1, 1.0),  Intervention::do_constant(2, -1.0),
      Intervention::do_constant(2, 1.0)};
  Vector spurious(2);
  spurious << root->first, root->second;
  double lo = 1e300, hi = -1e300;
  for (const auto& iv : ivs) {
    const double v = risk_quadratic(sem, iv).eval(spurious);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(hi - lo < 1e-12);
  // And it is far from the causal row.
  CHECK(std::abs(root->second - 0.0) > 0.5);
}

TEST_CASE("equal_risk_solve: lands on the spurious root from a nearby start") {
  const ChainSem c{1.0, 1.0, 1.0, 1.0, 2.0};
  LinearSem sem = three_chain(c.w1y, c.wy2, c.sigma1, c.sigmaY, c.sigma2);
  std::vector<RiskQuadratic> risks;
  for (const auto& iv : std::vector<Intervention>{
           Intervention::do_constant(1, -1.0), Intervention::do_constant(1, 0.0),
           Intervention::do_constant(1, 1.0), Intervention::do_constant(2, -1.0),
           Intervention::do_constant(2, 1.0)})
    risks.push_back(risk_quadratic(sem, iv));
  Vector start(2);
  start << 0.3, 0.7;
  const Vector sol = equal_risk_solve(risks, start);
  CHECK(std::abs(sol[0] - 1.0 / 3.0) < 1e-6);
  CHECK(std::abs(sol[1] - 2.0 / 3.0) < 1e-6);
}

TEST_CASE("build_scenario: noise layout per scenario family") {
  SemScenario fou = parse_scenario_code("FOU");
  fou.x_dim = 3;
  fou.n_per_env = 4000;
  const ScenarioData data = build_scenario(fou, 5);
  REQUIRE(data.envs.size() == 3);
  CHECK(data.causal_dim == 3);
  CHECK(data.true_weights.size() == 6);
  // Anticausal noise varies: Var(Y) should be roughly equal across envs
  // while Var(X2) spreads with the multiplier.
  const double vy0 = var_y_baseline(data.envs[0]);
  const double vy2 = var_y_baseline(data.envs[2]);
  CHECK(std::abs(vy0 - vy2) / std::max(vy0, vy2) < 0.2);

  SemScenario feu = parse_scenario_code("FEU");
  feu.x_dim = 3;
  feu.n_per_env = 4000;
  const ScenarioData hetero = build_scenario(feu, 5);
  const double hy0 = var_y_baseline(hetero.envs[0]);
  const double hy2 = var_y_baseline(hetero.envs[2]);
  CHECK(hy2 > 4.0 * hy0);  // multipliers 0.2 vs 5.0 on the target noise
}

TEST_CASE("build_scenario: scramble is orthogonal and unscrambles covariance") {
  SemScenario pes = parse_scenario_code("PES");
  pes.x_dim = 4;
  pes.n_per_env = 2000;
  const ScenarioData data = build_scenario(pes, 9);
  REQUIRE(data.scramble.has_value());
  const Matrix& s = *data.scramble;
  CHECK((s.transpose() * s - Matrix::Identity(8, 8)).cwiseAbs().maxCoeff() < 1e-12);
  // Unscrambling the observations with S^T recovers the raw covariance:
  // cov(x_obs * S) == S^T cov(x_obs) S up to pure linear algebra.
  const Matrix& xo = data.envs[0].x;
  Matrix centered = xo.rowwise() - xo.colwise().mean();
  const Matrix cov_obs = centered.transpose() * centered / double(xo.rows());
  const Matrix unscrambled = centered * s;
  const Matrix cov_un = unscrambled.transpose() * unscrambled / double(xo.rows());
  CHECK((Matrix(s.transpose() * cov_obs * s) - cov_un).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("build_scenario: partially observed keeps the confounder hidden") {
  SemScenario pou = parse_scenario_code("POU");
  pou.x_dim = 2;
  pou.n_per_env = 100;
  const ScenarioData data = build_scenario(pou, 3);
  CHECK(data.envs[0].x.cols() == 4);  // 2k observed columns only
}

TEST_CASE("scenario codes round-trip") {
  for (const char* code : {"FOU", "FOS", "FEU", "FES", "POU", "POS", "PEU", "PES"})
    CHECK(scenario_code(parse_scenario_code(code)) == code);
  CHECK_THROWS(parse_scenario_code("XXX"));
  CHECK_THROWS(parse_scenario_code("FO"));
}

TEST_CASE("weight_error: split causal / non-causal mean squared error") {
  Vector truth(10), est(10);
  truth.setOnes();
  est = truth;
  CHECK(weight_error(est, truth, 5) == std::pair<double, double>{0.0, 0.0});
  est[2] += 0.1;
  const auto [c, nc] = weight_error(est, truth, 10);
  CHECK(c == doctest::Approx(0.001).epsilon(1e-12));
  CHECK(nc == 0.0);
  // Anticausal solution on the unit chain: estimate 1 where truth is 0.
  Vector t2(2), e2(2);
  t2 << 1.0, 0.0;
  e2 << 0.0, 1.0;
  const auto [c2, nc2] = weight_error(e2, t2, 1);
  CHECK(c2 == 1.0);
  CHECK(nc2 == 1.0);
  CHECK_THROWS_AS(weight_error(Vector::Ones(3), Vector::Ones(4), 2), DimensionError);
}

TEST_CASE("var_y_baseline: population variance of the target column") {
  EnvDataset env;
  env.x = Matrix::Zero(2, 1);
  env.y.resize(2, 1);
  env.y << 3.0, 3.0;
  CHECK(var_y_baseline(env) == 0.0);
  env.y << -1.0, 1.0;
  CHECK(var_y_baseline(env) == 1.0);

  std::mt19937_64 rng(31);
  std::normal_distribution<double> gauss(0.0, 2.0);
  EnvDataset big;
  const Index n = 100000;
  big.x = Matrix::Zero(n, 1);
  big.y.resize(n, 1);
  for (Index i = 0; i < n; ++i) big.y(i, 0) = gauss(rng);
  const double se = 4.0 * std::sqrt(2.0 / static_cast<double>(n));
  CHECK(std::abs(var_y_baseline(big) - 4.0) < 3.0 * se);

  EnvDataset empty;
  empty.x = Matrix(0, 1);
  empty.y = Matrix(0, 1);
  CHECK_THROWS_AS(var_y_baseline(empty), EmptyDomainError);
}
