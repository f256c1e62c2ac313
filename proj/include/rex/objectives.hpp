#pragma once

#include <vector>

#include "rex/loss.hpp"
#include "rex/predictor.hpp"
#include "rex/types.hpp"

namespace rex {

// Hyperparameters of the risk-aggregation objectives.
//   lambda_min: lower bound on the affine coefficients of MM-REx; the
//               feasible set {sum(l)=1, l >= lambda_min} is nonempty only
//               when lambda_min <= 1/m.
//   beta:       weight of the risk-variance penalty (V-REx), >= 0.
//   beta_mae:   weight of the pairwise absolute-difference penalty.
//   irm_weight: weight of the IRMv1 gradient penalty, >= 0.
struct PenaltyConfig {
  double lambda_min = -1.0;
  double beta = 1.0;
  double beta_mae = 1.0;
  double irm_weight = 1.0;
};

enum class Objective { Erm, RiskInterpolation, MmRex, VRex, MaeRex, Irmv1 };

const char* objective_name(Objective obj);
Objective objective_from_name(const std::string& name);

// Size-weighted mean of domain risks.
double erm(const Vector& risks, const Vector& domain_sizes);

// Worst case over convex combinations of the training risks = max risk.
double risk_interpolation(const Vector& risks);

// Worst case over affine combinations with coefficients >= lambda_min:
//   (1 - m*lambda_min) * max_e r_e + lambda_min * sum_e r_e.
double mm_rex(const Vector& risks, double lambda_min);

// sum_e r_e + beta * Var(r) with the population variance (divide by m).
// Only the population convention makes v_rex identical to the pairwise-MSE
// form, so that normalization is load-bearing.
double v_rex(const Vector& risks, double beta);

// sum_e r_e + beta_mae * sum_{i>j} |r_i - r_j|. Equivalent to 2*mm_rex at
// beta_mae = 1 - 2*lambda_min when m = 2, inequivalent for m > 2.
double mae_rex(const Vector& risks, double beta_mae);

// (1/(2 m^2)) * sum_i sum_j (r_i - r_j)^2; equals the population variance.
double pairwise_mse_penalty(const Vector& risks);

// IRMv1 baseline: sum over envs of the squared derivative of the env risk
// w.r.t. a scalar multiplier on the output logits, taken at multiplier 1.
double irmv1_penalty(const Predictor& p, const std::vector<EnvDataset>& envs, LossKind loss);

// Parameter gradient of irmv1_penalty.
Gradients irmv1_penalty_grad(const Predictor& p, const std::vector<EnvDataset>& envs,
                             LossKind loss);

// Derivative of one env risk w.r.t. the scalar logit multiplier at 1:
// mean over examples of dloss/dlogit * logit.
double logit_scale_derivative(const Matrix& logits, const Matrix& target, LossKind loss);

// The scalar objective value that total_gradient differentiates. Erm uses
// equal domain weights here (no sizes are available at this level).
// Irmv1 is not a function of the risk vector alone and is rejected.
double objective_value(Objective obj, const Vector& risks, const PenaltyConfig& cfg);

// Chain rule through the risk aggregation: combines per-env parameter
// gradients into the gradient of objective_value. Max-based objectives use
// the single-argmax subgradient with lowest-index tie breaking.
Gradients total_gradient(Objective obj, const Vector& risks,
                         const std::vector<Gradients>& env_grads, const PenaltyConfig& cfg);

// Coefficient on each env gradient implied by total_gradient; exposed for
// the risk-space vector-field export and for tests.
Vector risk_space_gradient(Objective obj, const Vector& risks, const PenaltyConfig& cfg);

}  // namespace rex
