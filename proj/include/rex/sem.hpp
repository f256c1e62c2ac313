#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rex/types.hpp"

namespace rex {

// do(X_var = value) or a per-domain change of one noise scale.
struct Intervention {
  enum class Kind { DoConstant, NoiseScale };
  Kind kind = Kind::DoConstant;
  int var = 0;
  double value = 0.0;

  static Intervention do_constant(int var, double value);
  static Intervention noise_scale(int var, double new_std);
};

// Linear SEM  X_i <- sum_{j != i} coeffs(i,j) X_j + eps_i  with independent
// zero-mean Gaussian noise, eps_i ~ N(0, noise_std[i]^2). Variable 0 is the
// target Y. The nonzero pattern of coeffs must be acyclic. An optional
// orthogonal scramble mixes the observed block (X_1..X_{d-1}).
struct LinearSem {
  Matrix coeffs;
  Vector noise_std;
  std::optional<Matrix> scramble;

  Index dim() const { return coeffs.rows(); }
  void validate() const;
  // Topological order of the coefficient DAG; throws on a cycle.
  std::vector<int> topological_order() const;
};

// Ancestral sampling. DoConstant clamps the variable before its children
// are computed; NoiseScale swaps that variable's noise std.
// sample_raw returns all variables (n x dim, column i = X_i, column 0 = Y);
// sample packages the observed block (scrambled if configured) as a domain.
Matrix sample_raw(const LinearSem& sem, const std::optional<Intervention>& iv, Index n,
                  std::uint64_t seed);
EnvDataset sample(const LinearSem& sem, const std::optional<Intervention>& iv, Index n,
                  std::uint64_t seed);

// Exact first and second moments of the entailed distribution under an
// optional intervention, from (I - B)^-1 algebra.
struct Moments {
  Vector mean;
  Matrix cov;
  Matrix second_moment() const;  // cov + mean mean^T
};
Moments population_moments(const LinearSem& sem, const std::optional<Intervention>& iv);

// ---------------------------------------------------------------------------
// The scalar 3-variable chain  X1 -> Y -> X2  used for the residual-variance
// analysis: X1 = N1, Y = w1y X1 + NY, X2 = wy2 Y + N2.
struct ChainSem {
  double w1y = 1.0;
  double wy2 = 1.0;
  double sigma1 = 1.0;
  double sigmaY = 1.0;
  double sigma2 = 1.0;
};

// Population MSE of Yhat = alpha X1 + beta X2, in closed form:
// (alpha + w1y(beta wy2 - 1))^2 s1^2 + (beta wy2 - 1)^2 sY^2 + beta^2 s2^2.
double population_mse(const ChainSem& c, double alpha, double beta);

LinearSem chain_to_sem(const ChainSem& c);  // Y index 0, X1 index 1, X2 index 2

enum class ChainVariation { AnticausalNoise, TargetNoise };

struct RexChainSolution {
  double alpha = 0.0;
  double beta = 0.0;
  ChainVariation variation = ChainVariation::AnticausalNoise;
};

// The unique minimal-risk model with exactly equal population risks across
// the given chain domains. Domains must share w1y/wy2 and differ in exactly
// one of sigma2 (anticausal noise -> causal solution (w1y, 0)) or sigmaY
// (target noise -> anticausal solution (0, 1/wy2)). Identical domains are
// degenerate (every model equalizes) and rejected.
RexChainSolution rex_analytic_solution(const std::vector<ChainSem>& domains);

// ---------------------------------------------------------------------------
// Population risk of a linear predictor b over the observed variables:
// R(b) = b^T A b - 2 g^T b + c, assembled from the SEM's second moments.
struct RiskQuadratic {
  Matrix A;
  Vector g;
  double c = 0.0;

  double eval(const Vector& b) const;
  Vector grad(const Vector& b) const;  // 2(A b - g)
};
RiskQuadratic risk_quadratic(const LinearSem& sem, const std::optional<Intervention>& iv);

// Minimize the mean of the quadratic risks subject to exact equality of all
// of them: quadratic-penalty continuation on the pairwise gaps followed by a
// Gauss-Newton polish. Returns a point with max pairwise gap < gap_tol.
Vector equal_risk_solve(const std::vector<RiskQuadratic>& risks, const Vector& start,
                        double gap_tol = 1e-11);

// Identification oracle: with >= 3 distinct do() values per non-target
// variable, the only equal-risk model is the causal row coeffs(0, 1..d-1).
// Solves the equality-constrained problem and verifies the result against
// the causal row to 1e-6; fewer than 3 distinct values on some variable is
// an UnderIdentifiedError.
Vector theorem1_oracle(const LinearSem& sem, const std::vector<Intervention>& interventions);

// For a two-point do(X2 = +-x) family combined with >= 3 do() values on X1,
// the equal-risk system keeps a second (non-causal) root; this returns it,
// or nullopt when the family is degenerate. Exhibits why two interventions
// per variable are not enough.
std::optional<std::pair<double, double>> chain_spurious_solution(const ChainSem& c, double x);

// ---------------------------------------------------------------------------
// Multi-domain scenario lab (block chain with optional hidden confounder and
// orthogonal scramble).
enum class Observed { Fully, Partially };
enum class Skedasticity { DomainHomo, DomainHetero };

struct SemScenario {
  Observed observed = Observed::Fully;
  Skedasticity sked = Skedasticity::DomainHomo;
  bool scrambled = false;
  Index x_dim = 10;                             // per block (X1 and X2)
  std::vector<double> env_noise = {0.2, 2.0, 5.0};  // per-domain multiplier
  Index n_per_env = 1000;
};

// Codes FOU..PES: F/P = fully/partially observed, O/E = which noise varies
// across domains (anticausal sigma2 vs target sigmaY), U/S = unscrambled or
// scrambled observations.
SemScenario parse_scenario_code(const std::string& code);
std::string scenario_code(const SemScenario& sc);

struct ScenarioData {
  std::vector<EnvDataset> envs;
  Vector true_weights;  // on the unscrambled (X1, X2) axes; causal block first
  Index causal_dim = 0;
  std::optional<Matrix> scramble;
};
ScenarioData build_scenario(const SemScenario& sc, std::uint64_t seed);

// Mean squared error between estimated and true weights, reported separately
// over the causal block (first causal_dim coords) and the rest.
std::pair<double, double> weight_error(const Vector& estimated, const Vector& truth,
                                       Index causal_dim);

// Sample variance (population convention) of the target column; the optional
// per-domain risk baseline r_e - Var(Y_e).
double var_y_baseline(const EnvDataset& env);

}  // namespace rex
