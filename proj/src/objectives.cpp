#include "rex/objectives.hpp"

#include <cmath>
#include <sstream>

namespace rex {

namespace {

void require_nonempty(const Vector& risks, const char* who) {
  if (risks.size() < 1) throw std::invalid_argument(std::string(who) + ": needs m >= 1");
}

Index argmax_lowest(const Vector& risks) {
  Index best = 0;
  for (Index i = 1; i < risks.size(); ++i)
    if (risks[i] > risks[best]) best = i;  // strict: ties keep the lowest index
  return best;
}

double population_variance(const Vector& risks) {
  const double m = static_cast<double>(risks.size());
  const double mu = risks.mean();
  return (risks.array() - mu).square().sum() / m;
}

}  // namespace

const char* objective_name(Objective obj) {
  switch (obj) {
    case Objective::Erm: return "erm";
    case Objective::RiskInterpolation: return "ri";
    case Objective::MmRex: return "mmrex";
    case Objective::VRex: return "vrex";
    case Objective::MaeRex: return "maerex";
    case Objective::Irmv1: return "irmv1";
  }
  return "?";
}

Objective objective_from_name(const std::string& name) {
  if (name == "erm") return Objective::Erm;
  if (name == "ri") return Objective::RiskInterpolation;
  if (name == "mmrex") return Objective::MmRex;
  if (name == "vrex") return Objective::VRex;
  if (name == "maerex") return Objective::MaeRex;
  if (name == "irmv1") return Objective::Irmv1;
  throw std::invalid_argument("unknown objective: " + name);
}

double erm(const Vector& risks, const Vector& domain_sizes) {
  require_nonempty(risks, "erm");
  if (domain_sizes.size() != risks.size())
    throw DimensionError("erm: risks and domain sizes have different lengths");
  double total = 0.0;
  for (Index i = 0; i < domain_sizes.size(); ++i) {
    if (domain_sizes[i] < 0.0) throw std::invalid_argument("erm: negative domain size");
    total += domain_sizes[i];
  }
  if (total == 0.0) throw std::invalid_argument("erm: all domain sizes are zero");
  return risks.dot(domain_sizes) / total;
}

double risk_interpolation(const Vector& risks) {
  require_nonempty(risks, "risk_interpolation");
  return risks.maxCoeff();
}

double mm_rex(const Vector& risks, double lambda_min) {
  require_nonempty(risks, "mm_rex");
  const double m = static_cast<double>(risks.size());
  if (lambda_min > 1.0 / m) {
    std::ostringstream os;
    os << "mm_rex: lambda_min=" << lambda_min << " infeasible for m=" << risks.size()
       << " (needs lambda_min <= 1/m)";
    throw std::invalid_argument(os.str());
  }
  return (1.0 - m * lambda_min) * risks.maxCoeff() + lambda_min * risks.sum();
}

double v_rex(const Vector& risks, double beta) {
  require_nonempty(risks, "v_rex");
  if (beta < 0.0) throw std::invalid_argument("v_rex: beta must be >= 0");
  return beta * population_variance(risks) + risks.sum();
}

double mae_rex(const Vector& risks, double beta_mae) {
  if (risks.size() < 2) throw std::invalid_argument("mae_rex: needs m >= 2");
  double pen = 0.0;
  for (Index i = 0; i < risks.size(); ++i)
    for (Index j = 0; j < i; ++j) pen += std::abs(risks[i] - risks[j]);
  return risks.sum() + beta_mae * pen;
}

double pairwise_mse_penalty(const Vector& risks) {
  require_nonempty(risks, "pairwise_mse_penalty");
  const double m = static_cast<double>(risks.size());
  double s = 0.0;
  for (Index i = 0; i < risks.size(); ++i)
    for (Index j = 0; j < risks.size(); ++j) {
      const double d = risks[i] - risks[j];
      s += d * d;
    }
  return s / (2.0 * m * m);
}

double logit_scale_derivative(const Matrix& logits, const Matrix& target, LossKind loss) {
  // d/dw mean loss(w*z, y) at w=1 is mean over examples of dloss/dz * z.
  const Matrix g = mean_loss_grad(logits, target, loss);  // already divided by n
  return (g.array() * logits.array()).sum();
}

double irmv1_penalty(const Predictor& p, const std::vector<EnvDataset>& envs, LossKind loss) {
  if (envs.empty()) throw std::invalid_argument("irmv1_penalty: needs at least one env");
  double pen = 0.0;
  for (const auto& env : envs) {
    if (env.rows() == 0) throw EmptyDomainError("irmv1_penalty: empty domain");
    const Matrix z = forward(p, env.x);
    const double d = logit_scale_derivative(z, env.y, loss);
    pen += d * d;
  }
  return pen;
}

Gradients irmv1_penalty_grad(const Predictor& p, const std::vector<EnvDataset>& envs,
                             LossKind loss) {
  if (envs.empty()) throw std::invalid_argument("irmv1_penalty_grad: needs at least one env");
  Gradients total = p.zeros_like();
  for (const auto& env : envs) {
    if (env.rows() == 0) throw EmptyDomainError("irmv1_penalty_grad: empty domain");
    const ForwardPass fp = forward_pass(p, env.x);
    const Matrix& z = fp.output;
    const double d = logit_scale_derivative(z, env.y, loss);
    // d(D^2)/dtheta = 2 D dD/dtheta with dD/dz_i = (l''(z_i) z_i + l'(z_i)) / n.
    const double n = static_cast<double>(z.rows());
    Matrix delta(z.rows(), z.cols());
    if (loss == LossKind::MeanSquaredError) {
      if (z.cols() != 1) throw DimensionError("irmv1: MSE path expects 1-d output");
      for (Index i = 0; i < z.rows(); ++i) {
        const double zi = z(i, 0), yi = env.y(i, 0);
        delta(i, 0) = (2.0 * zi + 2.0 * (zi - yi)) / n;
      }
    } else {
      for (Index i = 0; i < z.rows(); ++i) {
        const double zi = z(i, 0), yi = env.y(i, 0);
        const double sig = 1.0 / (1.0 + std::exp(-zi));
        delta(i, 0) = (sig * (1.0 - sig) * zi + (sig - yi)) / n;
      }
    }
    Gradients g = backward(p, fp, delta);
    total.axpy(2.0 * d, g);
  }
  return total;
}

double objective_value(Objective obj, const Vector& risks, const PenaltyConfig& cfg) {
  switch (obj) {
    case Objective::Erm:
      require_nonempty(risks, "objective_value");
      return risks.mean();
    case Objective::RiskInterpolation:
      return risk_interpolation(risks);
    case Objective::MmRex:
      return mm_rex(risks, cfg.lambda_min);
    case Objective::VRex:
      return v_rex(risks, cfg.beta);
    case Objective::MaeRex:
      return mae_rex(risks, cfg.beta_mae);
    case Objective::Irmv1:
      throw std::invalid_argument("objective_value: IRMv1 is not a function of the risk vector");
  }
  throw std::invalid_argument("objective_value: unknown objective");
}

Vector risk_space_gradient(Objective obj, const Vector& risks, const PenaltyConfig& cfg) {
  require_nonempty(risks, "risk_space_gradient");
  const Index m = risks.size();
  Vector coeff = Vector::Zero(m);
  switch (obj) {
    case Objective::Erm:
      coeff.setConstant(1.0 / static_cast<double>(m));
      break;
    case Objective::RiskInterpolation:
      coeff[argmax_lowest(risks)] = 1.0;
      break;
    case Objective::MmRex: {
      if (cfg.lambda_min > 1.0 / static_cast<double>(m))
        throw std::invalid_argument("risk_space_gradient: infeasible lambda_min");
      coeff.setConstant(cfg.lambda_min);
      coeff[argmax_lowest(risks)] = 1.0 - (static_cast<double>(m) - 1.0) * cfg.lambda_min;
      break;
    }
    case Objective::VRex: {
      const double mu = risks.mean();
      for (Index e = 0; e < m; ++e)
        coeff[e] = 1.0 + cfg.beta * (2.0 / static_cast<double>(m)) * (risks[e] - mu);
      break;
    }
    case Objective::MaeRex: {
      coeff.setConstant(1.0);
      for (Index i = 0; i < m; ++i)
        for (Index j = 0; j < i; ++j) {
          const double s = risks[i] > risks[j] ? 1.0 : (risks[i] < risks[j] ? -1.0 : 0.0);
          coeff[i] += cfg.beta_mae * s;
          coeff[j] -= cfg.beta_mae * s;
        }
      break;
    }
    case Objective::Irmv1:
      throw std::invalid_argument("risk_space_gradient: IRMv1 has no risk-space form");
  }
  return coeff;
}

Gradients total_gradient(Objective obj, const Vector& risks,
                         const std::vector<Gradients>& env_grads, const PenaltyConfig& cfg) {
  if (static_cast<Index>(env_grads.size()) != risks.size())
    throw DimensionError("total_gradient: risks and gradients are not aligned");
  require_nonempty(risks, "total_gradient");
  const Vector coeff = risk_space_gradient(obj, risks, cfg);
  Gradients total = env_grads.front();
  total.scale(coeff[0]);
  for (Index e = 1; e < risks.size(); ++e) total.axpy(coeff[e], env_grads[e]);
  return total;
}

}  // namespace rex
