#include "rex/sem.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>

namespace rex {

Intervention Intervention::do_constant(int var, double value) {
  Intervention iv;
  iv.kind = Kind::DoConstant;
  iv.var = var;
  iv.value = value;
  return iv;
}

Intervention Intervention::noise_scale(int var, double new_std) {
  if (new_std <= 0.0) throw std::invalid_argument("Intervention: noise std must be > 0");
  Intervention iv;
  iv.kind = Kind::NoiseScale;
  iv.var = var;
  iv.value = new_std;
  return iv;
}

void LinearSem::validate() const {
  if (coeffs.rows() != coeffs.cols()) throw DimensionError("LinearSem: coeffs must be square");
  if (noise_std.size() != coeffs.rows())
    throw DimensionError("LinearSem: noise_std length must equal dim");
  for (Index i = 0; i < noise_std.size(); ++i)
    if (!(noise_std[i] > 0.0)) throw std::invalid_argument("LinearSem: noise std must be > 0");
  for (Index i = 0; i < coeffs.rows(); ++i)
    if (coeffs(i, i) != 0.0) throw std::invalid_argument("LinearSem: self-loop in coeffs");
  topological_order();  // throws on a cycle
  if (scramble) {
    const Index k = dim() - 1;
    if (scramble->rows() != k || scramble->cols() != k)
      throw DimensionError("LinearSem: scramble must match the observed block");
    const double err = (scramble->transpose() * (*scramble) - Matrix::Identity(k, k))
                           .cwiseAbs()
                           .maxCoeff();
    if (err > 1e-10) throw std::invalid_argument("LinearSem: scramble is not orthogonal");
  }
}

std::vector<int> LinearSem::topological_order() const {
  const Index d = dim();
  std::vector<int> indegree(d, 0);
  for (Index i = 0; i < d; ++i)
    for (Index j = 0; j < d; ++j)
      if (i != j && coeffs(i, j) != 0.0) ++indegree[i];
  std::vector<int> order;
  std::vector<bool> placed(d, false);
  for (Index round = 0; round < d; ++round) {
    int next = -1;
    for (Index i = 0; i < d; ++i)
      if (!placed[i] && indegree[i] == 0) {
        next = static_cast<int>(i);
        break;
      }
    if (next < 0) throw std::invalid_argument("LinearSem: coefficient graph has a cycle");
    placed[next] = true;
    order.push_back(next);
    for (Index i = 0; i < d; ++i)
      if (!placed[i] && coeffs(i, next) != 0.0) --indegree[i];
  }
  return order;
}

Matrix sample_raw(const LinearSem& sem, const std::optional<Intervention>& iv, Index n,
                  std::uint64_t seed) {
  sem.validate();
  if (n < 1) throw std::invalid_argument("sample_raw: n must be >= 1");
  const Index d = sem.dim();
  Vector noise = sem.noise_std;
  int clamped = -1;
  double clamp_value = 0.0;
  if (iv) {
    if (iv->var < 0 || iv->var >= d) throw std::invalid_argument("sample_raw: bad var index");
    if (iv->kind == Intervention::Kind::DoConstant) {
      clamped = iv->var;
      clamp_value = iv->value;
    } else {
      noise[iv->var] = iv->value;
    }
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix z(n, d);
  const std::vector<int> order = sem.topological_order();
  for (int var : order) {
    if (var == clamped) {
      z.col(var).setConstant(clamp_value);
      continue;
    }
    Vector col = Vector::Zero(n);
    for (Index j = 0; j < d; ++j)
      if (sem.coeffs(var, j) != 0.0) col += sem.coeffs(var, j) * z.col(j);
    for (Index r = 0; r < n; ++r) col[r] += noise[var] * gauss(rng);
    z.col(var) = col;
  }
  return z;
}

EnvDataset sample(const LinearSem& sem, const std::optional<Intervention>& iv, Index n,
                  std::uint64_t seed) {
  const Matrix z = sample_raw(sem, iv, n, seed);
  EnvDataset env;
  env.y = z.col(0);
  Matrix x = z.rightCols(sem.dim() - 1);
  env.x = sem.scramble ? Matrix(x * sem.scramble->transpose()) : x;
  env.env_id = iv ? (iv->kind == Intervention::Kind::DoConstant
                         ? "do(X" + std::to_string(iv->var) + "=" + std::to_string(iv->value) + ")"
                         : "noise(X" + std::to_string(iv->var) + ")")
                  : "observational";
  return env;
}

Matrix Moments::second_moment() const { return cov + mean * mean.transpose(); }

Moments population_moments(const LinearSem& sem, const std::optional<Intervention>& iv) {
  sem.validate();
  const Index d = sem.dim();
  Matrix b = sem.coeffs;
  Vector noise_var = sem.noise_std.array().square();
  Vector shift = Vector::Zero(d);
  if (iv) {
    if (iv->var < 0 || iv->var >= d)
      throw std::invalid_argument("population_moments: bad var index");
    if (iv->kind == Intervention::Kind::DoConstant) {
      b.row(iv->var).setZero();
      noise_var[iv->var] = 0.0;
      shift[iv->var] = iv->value;
    } else {
      noise_var[iv->var] = iv->value * iv->value;
    }
  }
  const Matrix inv = (Matrix::Identity(d, d) - b).inverse();
  Moments m;
  m.mean = inv * shift;
  m.cov = inv * noise_var.asDiagonal() * inv.transpose();
  return m;
}

// ---------------------------------------------------------------------------

double population_mse(const ChainSem& c, double alpha, double beta) {
  const double a = alpha + c.w1y * (beta * c.wy2 - 1.0);
  const double b = beta * c.wy2 - 1.0;
  return a * a * c.sigma1 * c.sigma1 + b * b * c.sigmaY * c.sigmaY +
         beta * beta * c.sigma2 * c.sigma2;
}

LinearSem chain_to_sem(const ChainSem& c) {
  LinearSem sem;
  sem.coeffs = Matrix::Zero(3, 3);
  sem.coeffs(0, 1) = c.w1y;  // Y <- X1
  sem.coeffs(2, 0) = c.wy2;  // X2 <- Y
  sem.noise_std = Vector(3);
  sem.noise_std << c.sigmaY, c.sigma1, c.sigma2;
  return sem;
}

RexChainSolution rex_analytic_solution(const std::vector<ChainSem>& domains) {
  if (domains.size() < 2)
    throw std::invalid_argument("rex_analytic_solution: needs >= 2 domains");
  const ChainSem& first = domains.front();
  bool vary_2 = false, vary_y = false;
  for (const auto& d : domains) {
    if (d.w1y != first.w1y || d.wy2 != first.wy2)
      throw std::invalid_argument("rex_analytic_solution: domains must share the chain weights");
    if (d.sigma1 != first.sigma1)
      throw std::invalid_argument("rex_analytic_solution: sigma1 must match across domains");
    vary_2 |= d.sigma2 != first.sigma2;
    vary_y |= d.sigmaY != first.sigmaY;
  }
  if (vary_2 && vary_y)
    throw std::invalid_argument(
        "rex_analytic_solution: domains must differ in exactly one of sigma2 or sigmaY");
  if (!vary_2 && !vary_y)
    throw std::invalid_argument(
        "rex_analytic_solution: degenerate domains (identical; any model equalizes risks)");
  RexChainSolution sol;
  if (vary_2) {
    // Only the beta^2 sigma2^2 term depends on the domain; equality forces
    // beta = 0 and the minimal equal risk is at alpha = w1y.
    sol.variation = ChainVariation::AnticausalNoise;
    sol.alpha = first.w1y;
    sol.beta = 0.0;
  } else {
    if (first.wy2 == 0.0)
      throw std::invalid_argument("rex_analytic_solution: wy2 = 0 has no anticausal solution");
    sol.variation = ChainVariation::TargetNoise;
    sol.alpha = 0.0;
    sol.beta = 1.0 / first.wy2;
  }
  return sol;
}

// ---------------------------------------------------------------------------

double RiskQuadratic::eval(const Vector& b) const {
  return b.dot(Vector(A * b)) - 2.0 * g.dot(b) + c;
}

Vector RiskQuadratic::grad(const Vector& b) const { return 2.0 * (A * b - g); }

RiskQuadratic risk_quadratic(const LinearSem& sem, const std::optional<Intervention>& iv) {
  if (sem.scramble)
    throw std::invalid_argument("risk_quadratic: expects an unscrambled SEM");
  const Matrix m = population_moments(sem, iv).second_moment();
  const Index d = sem.dim();
  RiskQuadratic q;
  q.A = m.bottomRightCorner(d - 1, d - 1);
  q.g = m.block(1, 0, d - 1, 1);
  q.c = m(0, 0);
  return q;
}

namespace {

double max_pairwise_gap(const std::vector<RiskQuadratic>& risks, const Vector& b) {
  double lo = risks.front().eval(b), hi = lo;
  for (const auto& r : risks) {
    const double v = r.eval(b);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  return hi - lo;
}

// Damped Newton minimization of mean risk + mu * sum of squared pairwise gaps.
Vector penalty_descend(const std::vector<RiskQuadratic>& risks, Vector b, double mu) {
  const Index d = b.size();
  const Index k = static_cast<Index>(risks.size());
  for (int it = 0; it < 200; ++it) {
    Vector values(k);
    std::vector<Vector> grads(k);
    for (Index e = 0; e < k; ++e) {
      values[e] = risks[e].eval(b);
      grads[e] = risks[e].grad(b);
    }
    Vector grad = Vector::Zero(d);
    Matrix hess = Matrix::Zero(d, d);
    for (Index e = 0; e < k; ++e) {
      grad += grads[e] / static_cast<double>(k);
      hess += 2.0 * risks[e].A / static_cast<double>(k);
    }
    for (Index i = 0; i < k; ++i)
      for (Index j = 0; j < i; ++j) {
        const double gap = values[i] - values[j];
        const Vector dg = grads[i] - grads[j];
        grad += mu * 2.0 * gap * dg;
        hess += mu * 2.0 * (dg * dg.transpose() + gap * 2.0 * (risks[i].A - risks[j].A));
      }
    if (grad.norm() < 1e-13) break;
    double tau = 1e-10;
    Vector step;
    for (;;) {
      const Matrix damped = hess + tau * Matrix::Identity(d, d);
      step = damped.ldlt().solve(-grad);
      if (step.allFinite() && step.dot(grad) < 0.0) break;
      tau *= 10.0;
      if (tau > 1e12) return b;
    }
    auto objective = [&](const Vector& x) {
      double v = 0.0;
      for (const auto& r : risks) v += r.eval(x) / static_cast<double>(k);
      for (Index i = 0; i < k; ++i)
        for (Index j = 0; j < i; ++j) {
          const double gap = risks[i].eval(x) - risks[j].eval(x);
          v += mu * gap * gap;
        }
      return v;
    };
    const double base = objective(b);
    double scale = 1.0;
    bool moved = false;
    for (int ls = 0; ls < 40; ++ls, scale *= 0.5) {
      const Vector cand = b + scale * step;
      if (objective(cand) < base) {
        b = cand;
        moved = true;
        break;
      }
    }
    if (!moved) break;
  }
  return b;
}

// Levenberg-Marquardt on the pairwise-gap residuals; quadratic convergence
// once the continuation lands near the feasible point.
Vector gauss_newton_polish(const std::vector<RiskQuadratic>& risks, Vector b, double tol) {
  const Index d = b.size();
  const Index k = static_cast<Index>(risks.size());
  const Index pairs = k * (k - 1) / 2;
  auto residuals = [&](const Vector& x, Vector& r) {
    Index row = 0;
    for (Index i = 0; i < k; ++i)
      for (Index j = 0; j < i; ++j, ++row) r[row] = risks[i].eval(x) - risks[j].eval(x);
  };
  Vector r(pairs), r_next(pairs);
  residuals(b, r);
  double lm = 1e-10;
  for (int it = 0; it < 200; ++it) {
    if (r.cwiseAbs().maxCoeff() < tol * 1e-2) break;
    Matrix jac(pairs, d);
    Index row = 0;
    for (Index i = 0; i < k; ++i)
      for (Index j = 0; j < i; ++j, ++row)
        jac.row(row) = (risks[i].grad(b) - risks[j].grad(b)).transpose();
    const Matrix jtj = jac.transpose() * jac;
    const Vector jtr = jac.transpose() * r;
    bool accepted = false;
    for (int tries = 0; tries < 40; ++tries) {
      const Matrix damped = jtj + lm * Matrix::Identity(d, d);
      const Vector step = damped.ldlt().solve(-jtr);
      if (step.allFinite()) {
        const Vector cand = b + step;
        residuals(cand, r_next);
        if (r_next.squaredNorm() < r.squaredNorm()) {
          b = cand;
          r = r_next;
          lm = std::max(lm / 4.0, 1e-14);
          accepted = true;
          break;
        }
      }
      lm *= 10.0;
      if (lm > 1e16) break;
    }
    if (!accepted) break;
  }
  return b;
}

}  // namespace

Vector equal_risk_solve(const std::vector<RiskQuadratic>& risks, const Vector& start,
                        double gap_tol) {
  if (risks.size() < 2) throw std::invalid_argument("equal_risk_solve: needs >= 2 risks");
  const Index d = start.size();

  auto attempt = [&](Vector b) {
    for (double mu = 1.0; mu <= 1e8; mu *= 10.0) b = penalty_descend(risks, b, mu);
    return gauss_newton_polish(risks, b, gap_tol);
  };

  Vector best = attempt(start);
  double best_gap = max_pairwise_gap(risks, best);
  if (best_gap < gap_tol) return best;

  // Deterministic restarts around the start and the origin.
  std::mt19937_64 rng(0x5eeded);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int restart = 0; restart < 8 && best_gap >= gap_tol; ++restart) {
    Vector b0(d);
    for (Index i = 0; i < d; ++i) b0[i] = gauss(rng);
    if (restart % 2 == 0) b0 += start;
    const Vector cand = attempt(b0);
    const double gap = max_pairwise_gap(risks, cand);
    if (gap < best_gap) {
      best = cand;
      best_gap = gap;
    }
  }
  if (best_gap >= gap_tol) {
    std::ostringstream os;
    os << "equal_risk_solve: could not reach exact risk equality (best gap " << best_gap << ")";
    throw std::runtime_error(os.str());
  }
  return best;
}

Vector theorem1_oracle(const LinearSem& sem, const std::vector<Intervention>& interventions) {
  sem.validate();
  const Index d = sem.dim();
  std::vector<std::set<double>> values(d);
  for (const auto& iv : interventions) {
    if (iv.kind != Intervention::Kind::DoConstant)
      throw std::invalid_argument("theorem1_oracle: interventions must be do() constants");
    if (iv.var == 0)
      throw std::invalid_argument("theorem1_oracle: the target is never intervened on");
    if (iv.var < 0 || iv.var >= d) throw std::invalid_argument("theorem1_oracle: bad var index");
    values[iv.var].insert(iv.value);
  }
  for (Index v = 1; v < d; ++v)
    if (values[v].size() < 3) {
      std::ostringstream os;
      os << "theorem1_oracle: under-identified, X" << v << " has only " << values[v].size()
         << " distinct do() values (needs 3)";
      throw UnderIdentifiedError(os.str());
    }

  std::vector<RiskQuadratic> risks;
  risks.reserve(interventions.size());
  for (const auto& iv : interventions) risks.push_back(risk_quadratic(sem, iv));

  // ERM start: minimizer of the mean quadratic.
  Matrix mean_a = Matrix::Zero(d - 1, d - 1);
  Vector mean_g = Vector::Zero(d - 1);
  for (const auto& r : risks) {
    mean_a += r.A / static_cast<double>(risks.size());
    mean_g += r.g / static_cast<double>(risks.size());
  }
  const Vector start = mean_a.ldlt().solve(mean_g);

  const Vector beta = equal_risk_solve(risks, start);
  const Vector causal = sem.coeffs.row(0).segment(1, d - 1).transpose();
  if ((beta - causal).cwiseAbs().maxCoeff() > 1e-6)
    throw std::runtime_error(
        "theorem1_oracle: equal-risk solution does not match the causal row");
  return beta;
}

std::optional<std::pair<double, double>> chain_spurious_solution(const ChainSem& c, double x) {
  // For domains {do(X1 = u_i)} u {do(X2 = +-x)} the equal-risk system is
  //   alpha - w1y + beta wy2 w1y = 0
  //   (beta wy2 - 1)^2 sY^2 + beta^2 s2^2 = (alpha - w1y)^2 s1^2 + sY^2 + beta^2 x^2
  // whose nonzero-beta root is returned here.
  const double denom = c.wy2 * c.wy2 * c.sigmaY * c.sigmaY + c.sigma2 * c.sigma2 -
                       c.wy2 * c.wy2 * c.w1y * c.w1y * c.sigma1 * c.sigma1 - x * x;
  if (std::abs(denom) < 1e-12) return std::nullopt;
  const double beta = 2.0 * c.wy2 * c.sigmaY * c.sigmaY / denom;
  if (beta == 0.0) return std::nullopt;
  const double alpha = c.w1y * (1.0 - beta * c.wy2);
  return std::make_pair(alpha, beta);
}

// ---------------------------------------------------------------------------

SemScenario parse_scenario_code(const std::string& code) {
  if (code.size() != 3) throw std::invalid_argument("scenario code must have 3 letters");
  SemScenario sc;
  switch (code[0]) {
    case 'F': sc.observed = Observed::Fully; break;
    case 'P': sc.observed = Observed::Partially; break;
    default: throw std::invalid_argument("scenario code: first letter must be F or P");
  }
  switch (code[1]) {
    case 'O': sc.sked = Skedasticity::DomainHomo; break;
    case 'E': sc.sked = Skedasticity::DomainHetero; break;
    default: throw std::invalid_argument("scenario code: second letter must be O or E");
  }
  switch (code[2]) {
    case 'U': sc.scrambled = false; break;
    case 'S': sc.scrambled = true; break;
    default: throw std::invalid_argument("scenario code: third letter must be U or S");
  }
  return sc;
}

std::string scenario_code(const SemScenario& sc) {
  std::string code;
  code += sc.observed == Observed::Fully ? 'F' : 'P';
  code += sc.sked == Skedasticity::DomainHomo ? 'O' : 'E';
  code += sc.scrambled ? 'S' : 'U';
  return code;
}

ScenarioData build_scenario(const SemScenario& sc, std::uint64_t seed) {
  if (sc.env_noise.size() < 2) throw std::invalid_argument("build_scenario: needs >= 2 domains");
  if (sc.x_dim < 1) throw std::invalid_argument("build_scenario: x_dim must be >= 1");
  const Index k = sc.x_dim;
  const bool hidden = sc.observed == Observed::Partially;
  const Index d = 1 + 2 * k + (hidden ? 1 : 0);  // Y, X1 block, X2 block, [H]

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double w_scale = 1.0 / std::sqrt(static_cast<double>(k));
  Vector w1(k), w2(k);
  for (Index i = 0; i < k; ++i) w1[i] = gauss(rng) * w_scale;
  for (Index i = 0; i < k; ++i) w2[i] = gauss(rng);

  LinearSem sem;
  sem.coeffs = Matrix::Zero(d, d);
  for (Index i = 0; i < k; ++i) sem.coeffs(0, 1 + i) = w1[i];          // Y <- X1
  for (Index i = 0; i < k; ++i) sem.coeffs(1 + k + i, 0) = w2[i];      // X2 <- Y
  if (hidden) {
    const Index h = d - 1;
    sem.coeffs(0, h) = 1.0;                                            // Y <- H
    for (Index i = 0; i < k; ++i) sem.coeffs(1 + k + i, h) = 1.0;      // X2 <- H
  }

  Matrix scramble;
  if (sc.scrambled) {
    Matrix raw(2 * k, 2 * k);
    for (Index i = 0; i < raw.size(); ++i) raw(i / raw.cols(), i % raw.cols()) = gauss(rng);
    const Eigen::HouseholderQR<Eigen::MatrixXd> qr{Eigen::MatrixXd(raw)};
    scramble = Matrix(qr.householderQ() * Eigen::MatrixXd::Identity(2 * k, 2 * k));
  }

  ScenarioData out;
  out.causal_dim = k;
  out.true_weights = Vector::Zero(2 * k);
  out.true_weights.head(k) = w1;
  if (sc.scrambled) out.scramble = scramble;

  for (std::size_t e = 0; e < sc.env_noise.size(); ++e) {
    const double mult = sc.env_noise[e];
    Vector noise = Vector::Ones(d);
    if (sc.sked == Skedasticity::DomainHomo) {
      for (Index i = 0; i < k; ++i) noise[1 + k + i] = mult;  // anticausal noise varies
    } else {
      noise[0] = mult;  // target noise varies
    }
    sem.noise_std = noise;
    const Matrix z = sample_raw(sem, std::nullopt, sc.n_per_env,
                                seed + 101 * static_cast<std::uint64_t>(e + 1));
    EnvDataset env;
    env.y = z.col(0);
    Matrix x = z.middleCols(1, 2 * k);  // hidden confounder stays unobserved
    env.x = sc.scrambled ? Matrix(x * scramble.transpose()) : x;
    env.env_id = "e" + std::to_string(e);
    env.meta["noise_multiplier"] = mult;
    env.meta["n"] = static_cast<double>(sc.n_per_env);
    out.envs.push_back(std::move(env));
  }
  return out;
}

std::pair<double, double> weight_error(const Vector& estimated, const Vector& truth,
                                       Index causal_dim) {
  if (estimated.size() != truth.size())
    throw DimensionError("weight_error: length mismatch");
  if (causal_dim < 0 || causal_dim > estimated.size())
    throw DimensionError("weight_error: bad causal_dim");
  const Vector diff = estimated - truth;
  const Index rest = estimated.size() - causal_dim;
  const double causal =
      causal_dim > 0 ? diff.head(causal_dim).squaredNorm() / static_cast<double>(causal_dim) : 0.0;
  const double noncausal =
      rest > 0 ? diff.tail(rest).squaredNorm() / static_cast<double>(rest) : 0.0;
  return {causal, noncausal};
}

double var_y_baseline(const EnvDataset& env) {
  if (env.rows() == 0) throw EmptyDomainError("var_y_baseline: empty domain");
  const double mu = env.y.col(0).mean();
  return (env.y.col(0).array() - mu).square().sum() / static_cast<double>(env.rows());
}

}  // namespace rex
