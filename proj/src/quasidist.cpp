#include "rex/quasidist.hpp"

#include <algorithm>
#include <cmath>

namespace rex {

bool operator==(const Atom& a, const Atom& b) {
  if (a.x.size() != b.x.size() || a.y != b.y) return false;
  for (Index i = 0; i < a.x.size(); ++i)
    if (a.x[i] != b.x[i]) return false;
  return true;
}

bool atom_less(const Atom& a, const Atom& b) {
  if (a.x.size() != b.x.size()) return a.x.size() < b.x.size();
  for (Index i = 0; i < a.x.size(); ++i) {
    if (a.x[i] < b.x[i]) return true;
    if (a.x[i] > b.x[i]) return false;
  }
  return a.y < b.y;
}

QuasiDistribution QuasiDistribution::from(std::vector<Atom> support, Vector weights) {
  if (static_cast<Index>(support.size()) != weights.size())
    throw DimensionError("QuasiDistribution: support and weights have different lengths");
  if (support.empty()) throw EmptyDomainError("QuasiDistribution: empty support");
  for (std::size_t i = 0; i < support.size(); ++i)
    for (std::size_t j = i + 1; j < support.size(); ++j)
      if (support[i] == support[j])
        throw std::invalid_argument("QuasiDistribution: duplicate support atom");
  const double mass = weights.sum();
  if (std::abs(mass - 1.0) > 1e-12)
    throw std::invalid_argument("QuasiDistribution: weights must sum to 1 (got " +
                                std::to_string(mass) + ")");
  return QuasiDistribution{std::move(support), std::move(weights)};
}

bool QuasiDistribution::is_probability(double tol) const {
  return (weights.array() >= -tol).all();
}

AffineCombo::AffineCombo(Vector c) : coeffs(std::move(c)) {
  if (coeffs.size() < 1) throw std::invalid_argument("AffineCombo: empty");
  if (std::abs(coeffs.sum() - 1.0) > 1e-12)
    throw std::invalid_argument("AffineCombo: coefficients must sum to 1");
}

namespace {

bool same_support(const QuasiDistribution& a, const QuasiDistribution& b) {
  if (a.support.size() != b.support.size()) return false;
  for (std::size_t i = 0; i < a.support.size(); ++i)
    if (!(a.support[i] == b.support[i])) return false;
  return true;
}

}  // namespace

QuasiDistribution combine(const std::vector<QuasiDistribution>& dists, const AffineCombo& combo) {
  if (dists.empty()) throw std::invalid_argument("combine: no distributions");
  if (combo.coeffs.size() != static_cast<Index>(dists.size()))
    throw DimensionError("combine: coefficient count does not match distribution count");

  bool shared = true;
  for (std::size_t e = 1; e < dists.size() && shared; ++e)
    shared = same_support(dists[0], dists[e]);

  if (shared) {
    Vector w = Vector::Zero(dists[0].weights.size());
    for (std::size_t e = 0; e < dists.size(); ++e) w += combo.coeffs[e] * dists[e].weights;
    QuasiDistribution out;
    out.support = dists[0].support;
    out.weights = std::move(w);
    return out;
  }

  // Union the supports (zero weight where a distribution lacks an atom).
  std::vector<Atom> atoms;
  for (const auto& d : dists)
    for (const auto& a : d.support) {
      bool found = false;
      for (const auto& b : atoms)
        if (a == b) {
          found = true;
          break;
        }
      if (!found) atoms.push_back(a);
    }
  std::sort(atoms.begin(), atoms.end(), atom_less);
  Vector w = Vector::Zero(static_cast<Index>(atoms.size()));
  for (std::size_t e = 0; e < dists.size(); ++e) {
    for (std::size_t k = 0; k < dists[e].support.size(); ++k) {
      const auto it = std::find(atoms.begin(), atoms.end(), dists[e].support[k]);
      w[it - atoms.begin()] += combo.coeffs[e] * dists[e].weights[static_cast<Index>(k)];
    }
  }
  QuasiDistribution out;
  out.support = std::move(atoms);
  out.weights = std::move(w);
  return out;
}

double quasi_risk(const QuasiDistribution& d, const PointLoss& pointwise_loss) {
  double s = 0.0;
  for (std::size_t k = 0; k < d.support.size(); ++k)
    s += d.weights[static_cast<Index>(k)] * pointwise_loss(d.support[k].x, d.support[k].y);
  return s;
}

double quasi_risk(const QuasiDistribution& d, const PointPredictor& model, LossKind loss) {
  return quasi_risk(d, PointLoss([&](const Vector& x, double y) {
                      Matrix pred(1, 1), target(1, 1);
                      pred(0, 0) = model(x);
                      target(0, 0) = y;
                      return mean_loss(pred, target, loss);
                    }));
}

double quasi_risk(const QuasiDistribution& d, const Predictor& p, LossKind loss) {
  return quasi_risk(d, PointPredictor([&](const Vector& x) {
                      Matrix row(1, x.size());
                      row.row(0) = x.transpose();
                      return forward(p, row)(0, 0);
                    }),
                    loss);
}

std::vector<QuasiDistribution> vertex_distributions(const std::vector<QuasiDistribution>& dists,
                                                    double lambda_min) {
  const Index m = static_cast<Index>(dists.size());
  if (m < 1) throw std::invalid_argument("vertex_distributions: no distributions");
  if (lambda_min > 1.0 / static_cast<double>(m))
    throw std::invalid_argument("vertex_distributions: infeasible lambda_min");
  std::vector<QuasiDistribution> out;
  out.reserve(dists.size());
  for (Index e = 0; e < m; ++e) {
    Vector coeffs = Vector::Constant(m, lambda_min);
    coeffs[e] = 1.0 - (static_cast<double>(m) - 1.0) * lambda_min;
    out.push_back(combine(dists, AffineCombo(coeffs)));
  }
  return out;
}

double toy_game_risk(double p, double q, double u, double v) {
  return (1.0 - p) * (1.0 - q) * u + p * q * v;
}

ToyGameReport toy_covariate_game(double u, double v, const std::vector<double>& q_values) {
  if (u <= 0.0 || v <= 0.0) throw std::invalid_argument("toy_covariate_game: u, v must be > 0");
  if (q_values.empty()) throw std::invalid_argument("toy_covariate_game: needs q values");
  for (double q : q_values)
    if (q < 0.0 || q > 1.0) throw std::invalid_argument("toy_covariate_game: q outside [0,1]");

  ToyGameReport rep;
  rep.u = u;
  rep.v = v;
  rep.q_values = q_values;
  rep.omega = u / (u + v);
  rep.minimax_risk = u * v / (u + v);

  double qmin = q_values.front(), qmax = q_values.front(), qsum = 0.0;
  for (double q : q_values) {
    qmin = std::min(qmin, q);
    qmax = std::max(qmax, q);
    qsum += q;
  }
  rep.q_bar = qsum / static_cast<double>(q_values.size());

  // ERM pools the domains: risk slope in p is q*(u+v) - u, so the pooled
  // optimum is p=0 above omega and p=1 below.
  rep.erm_p = rep.q_bar > rep.omega ? 0.0 : 1.0;
  // Risk interpolation: max over the training q's. All above omega -> 0,
  // all below -> 1, straddling -> the saddle point omega.
  if (qmin > rep.omega)
    rep.ri_p = 0.0;
  else if (qmax < rep.omega)
    rep.ri_p = 1.0;
  else
    rep.ri_p = rep.omega;
  // Equality of risks across distinct q's holds only at p=omega.
  rep.rex_p = rep.omega;

  for (double q : q_values) {
    rep.erm_risks.push_back(toy_game_risk(rep.erm_p, q, u, v));
    rep.ri_risks.push_back(toy_game_risk(rep.ri_p, q, u, v));
    rep.rex_risks.push_back(toy_game_risk(rep.rex_p, q, u, v));
  }
  return rep;
}

}  // namespace rex
