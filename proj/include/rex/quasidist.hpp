#pragma once

#include <functional>
#include <vector>

#include "rex/loss.hpp"
#include "rex/predictor.hpp"
#include "rex/types.hpp"

namespace rex {

// One support point of a finite (X, Y) measure.
struct Atom {
  Vector x;
  double y = 0.0;
};

bool operator==(const Atom& a, const Atom& b);
bool atom_less(const Atom& a, const Atom& b);  // lexicographic, for canonical ordering

// Finite signed measure with total mass 1. Negative weights are legal;
// they arise from affine combinations with negative coefficients.
struct QuasiDistribution {
  std::vector<Atom> support;
  Vector weights;

  static QuasiDistribution from(std::vector<Atom> support, Vector weights);
  bool is_probability(double tol = 0.0) const;  // all weights >= -tol
};

// Affine combination coefficients: sum exactly 1 (to 1e-12).
struct AffineCombo {
  Vector coeffs;
  explicit AffineCombo(Vector c);
};

// Pointwise affine combination sum_e coeffs_e * P_e. Distributions over
// different supports are first unioned with zero weights so the pointwise
// arithmetic stays exact.
QuasiDistribution combine(const std::vector<QuasiDistribution>& dists, const AffineCombo& combo);

// Risk under a quasi-distribution: sum over atoms of weight * loss. May be
// negative when weights are. The three overloads take a model-output
// function, a fully custom pointwise loss, or a Predictor.
using PointPredictor = std::function<double(const Vector& x)>;
using PointLoss = std::function<double(const Vector& x, double y)>;

double quasi_risk(const QuasiDistribution& d, const PointPredictor& model, LossKind loss);
double quasi_risk(const QuasiDistribution& d, const PointLoss& pointwise_loss);
double quasi_risk(const QuasiDistribution& d, const Predictor& p, LossKind loss);

// The m permuted corners of the MM-REx perturbation set: vertex e puts
// coefficient 1-(m-1)*lambda_min on distribution e and lambda_min on the rest.
std::vector<QuasiDistribution> vertex_distributions(const std::vector<QuasiDistribution>& dists,
                                                    double lambda_min);

// The two-input prediction game: COSTLY inputs appear with probability q,
// predicting COSTLY costs u on a CHEAP input and missing a COSTLY input
// costs v. Expected risk of predicting COSTLY with probability p.
double toy_game_risk(double p, double q, double u, double v);

struct ToyGameReport {
  double u = 0.0, v = 0.0;
  double omega = 0.0;         // minimax-optimal p = u/(u+v)
  double minimax_risk = 0.0;  // u*v/(u+v), attained for every q at p=omega
  double q_bar = 0.0;
  double erm_p = 0.0;
  double ri_p = 0.0;
  double rex_p = 0.0;
  std::vector<double> q_values;
  std::vector<double> erm_risks, ri_risks, rex_risks;  // R_q(p_method) per q
};

// Closed-form ERM / risk-interpolation / REx solutions of the game for the
// given training q values.
ToyGameReport toy_covariate_game(double u, double v, const std::vector<double>& q_values);

}  // namespace rex
