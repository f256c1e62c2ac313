#include "rex/trainer.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "rex/loss.hpp"

namespace rex {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct AdamState {
  Gradients m, v;
  Index t = 0;
};

void adam_update(Predictor& p, AdamState& st, const Gradients& g, const TrainConfig& cfg) {
  ++st.t;
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(st.t));
  auto update_block = [&](Matrix& param, Matrix& m, Matrix& v, const Matrix& grad) {
    m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * grad;
    v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * grad.cwiseProduct(grad);
    const Matrix mhat = m / bc1;
    const Matrix vhat = v / bc2;
    param.array() -= cfg.lr * mhat.array() / (vhat.array().sqrt() + cfg.adam_eps);
  };
  for (std::size_t i = 0; i < p.weights().size(); ++i)
    update_block(p.weights()[i], st.m.weights[i], st.v.weights[i], g.weights[i]);
  for (std::size_t i = 0; i < p.biases().size(); ++i)
    update_block(p.biases()[i], st.m.biases[i], st.v.biases[i], g.biases[i]);
}

Index argmax_lowest(const Vector& r) {
  Index best = 0;
  for (Index i = 1; i < r.size(); ++i)
    if (r[i] > r[best]) best = i;
  return best;
}

EnvDataset take_batch(const EnvDataset& env, Index batch, std::mt19937_64& rng) {
  std::uniform_int_distribution<Index> pick(0, env.rows() - 1);
  EnvDataset out;
  out.x.resize(batch, env.x.cols());
  out.y.resize(batch, 1);
  out.env_id = env.env_id;
  for (Index i = 0; i < batch; ++i) {
    const Index r = pick(rng);
    out.x.row(i) = env.x.row(r);
    out.y(i, 0) = env.y(r, 0);
  }
  return out;
}

}  // namespace

std::pair<Predictor, RunRecord> train(const Predictor& init, const std::vector<EnvDataset>& envs,
                                      Objective obj, const PenaltyConfig& pcfg,
                                      const TrainConfig& cfg, LossKind loss, const EvalEnvs& eval,
                                      const Vector& penalty_risk_offsets) {
  if (envs.empty()) throw std::invalid_argument("train: needs at least one env");
  const Index m = static_cast<Index>(envs.size());
  const bool needs_multi = obj == Objective::RiskInterpolation || obj == Objective::MmRex ||
                           obj == Objective::VRex || obj == Objective::MaeRex;
  if (needs_multi && m < 2)
    throw std::invalid_argument("train: RI/REx objectives need at least two envs");
  if (cfg.steps < 1) throw std::invalid_argument("train: steps must be >= 1");
  if (cfg.lr <= 0.0) throw std::invalid_argument("train: lr must be > 0");
  if (cfg.penalty_anneal_step > cfg.steps)
    throw std::invalid_argument("train: penalty_anneal_step must be <= steps");
  if (obj == Objective::MmRex && pcfg.lambda_min > 0.0)
    throw std::invalid_argument("train: MM-REx training expects lambda_min <= 0");
  if (penalty_risk_offsets.size() != 0 && penalty_risk_offsets.size() != m)
    throw DimensionError("train: penalty offsets do not align with envs");
  for (const auto& env : envs)
    if (env.rows() == 0) throw EmptyDomainError("train: empty env");

  Predictor model = init;
  RunRecord rec;
  AdamState adam;
  if (cfg.optimizer == OptimizerKind::Adam) {
    adam.m = model.zeros_like();
    adam.v = model.zeros_like();
  }
  std::mt19937_64 rng(cfg.seed);
  const bool classify = loss == LossKind::BinaryCrossEntropyWithLogits;
  const double inv_m = 1.0 / static_cast<double>(m);

  for (Index step = 0; step < cfg.steps; ++step) {
    const double coeff = step < cfg.penalty_anneal_step ? 1.0 : cfg.penalty_weight;

    Vector risks(m);
    std::vector<Gradients> grads;
    grads.reserve(m);
    double irm_pen = 0.0;
    Gradients irm_grad = model.zeros_like();
    Index train_hits = 0, train_total = 0;
    for (Index e = 0; e < m; ++e) {
      const EnvDataset* env = &envs[e];
      EnvDataset batch;
      if (cfg.batch_size > 0 && cfg.batch_size < env->rows()) {
        batch = take_batch(*env, cfg.batch_size, rng);
        env = &batch;
      }
      const ForwardPass fp = forward_pass(model, env->x);
      risks[e] = mean_loss(fp.output, env->y, loss);
      grads.push_back(backward(model, fp, mean_loss_grad(fp.output, env->y, loss)));
      if (obj == Objective::Irmv1) {
        const double d = logit_scale_derivative(fp.output, env->y, loss);
        irm_pen += d * d;
        const double n = static_cast<double>(fp.output.rows());
        Matrix delta(fp.output.rows(), 1);
        for (Index i = 0; i < fp.output.rows(); ++i) {
          const double zi = fp.output(i, 0), yi = env->y(i, 0);
          if (loss == LossKind::MeanSquaredError) {
            delta(i, 0) = (2.0 * zi + 2.0 * (zi - yi)) / n;
          } else {
            const double sig = 1.0 / (1.0 + std::exp(-zi));
            delta(i, 0) = (sig * (1.0 - sig) * zi + (sig - yi)) / n;
          }
        }
        irm_grad.axpy(2.0 * d, backward(model, fp, delta));
      }
      if (classify) {
        for (Index i = 0; i < fp.output.rows(); ++i)
          train_hits += ((fp.output(i, 0) > 0.0) ? 1.0 : 0.0) == env->y(i, 0);
        train_total += fp.output.rows();
      }
    }

    const Vector penalized =
        penalty_risk_offsets.size() == m ? Vector(risks - penalty_risk_offsets) : risks;

    // Base term (mean of env risks, or the worst case for max-based
    // objectives) plus the waterfall-scaled penalty term.
    double base = 0.0;
    double penalty_term = 0.0;
    Vector env_coeff = Vector::Constant(m, inv_m);
    switch (obj) {
      case Objective::Erm:
        base = risks.mean();
        break;
      case Objective::RiskInterpolation: {
        const Index star = argmax_lowest(penalized);
        base = penalized[star];
        env_coeff.setZero();
        env_coeff[star] = 1.0;
        break;
      }
      case Objective::MmRex: {
        // Effective lambda_min at this step is coeff * lambda_min; the
        // closed form splits into max(r) plus |lambda| * total gap.
        const double lam = coeff * pcfg.lambda_min;
        const Index star = argmax_lowest(penalized);
        base = penalized[star];
        penalty_term =
            -pcfg.lambda_min * (static_cast<double>(m) * penalized[star] - penalized.sum());
        env_coeff.setConstant(lam);
        env_coeff[star] = 1.0 - (static_cast<double>(m) - 1.0) * lam;
        break;
      }
      case Objective::VRex: {
        base = risks.mean();
        const double mu = penalized.mean();
        const double var = (penalized.array() - mu).square().sum() / static_cast<double>(m);
        penalty_term = pcfg.beta * var;
        for (Index e = 0; e < m; ++e)
          env_coeff[e] = inv_m + coeff * pcfg.beta * (2.0 * inv_m) * (penalized[e] - mu);
        break;
      }
      case Objective::MaeRex: {
        base = risks.mean();
        for (Index i = 0; i < m; ++i)
          for (Index j = 0; j < i; ++j) {
            const double d = penalized[i] - penalized[j];
            penalty_term += pcfg.beta_mae * std::abs(d);
            const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
            env_coeff[i] += coeff * pcfg.beta_mae * s * 1.0;
            env_coeff[j] -= coeff * pcfg.beta_mae * s * 1.0;
          }
        break;
      }
      case Objective::Irmv1:
        base = risks.mean();
        break;
    }

    Gradients total = model.zeros_like();
    for (Index e = 0; e < m; ++e) total.axpy(env_coeff[e], grads[e]);

    if (obj == Objective::Irmv1) {
      penalty_term = pcfg.irm_weight * irm_pen;
      total.axpy(coeff * pcfg.irm_weight, irm_grad);
    }

    double loss_value = base + coeff * penalty_term;

    if (cfg.l2_weight != 0.0) {
      double sq = 0.0;
      for (const auto& w : model.weights()) sq += w.squaredNorm();
      for (const auto& b : model.biases()) sq += b.squaredNorm();
      loss_value += cfg.l2_weight * sq;
      for (std::size_t i = 0; i < model.weights().size(); ++i)
        total.weights[i] += 2.0 * cfg.l2_weight * model.weights()[i];
      for (std::size_t i = 0; i < model.biases().size(); ++i)
        total.biases[i] += 2.0 * cfg.l2_weight * model.biases()[i];
    }

    if (cfg.lr_rescale_on_anneal && step >= cfg.penalty_anneal_step && cfg.penalty_weight > 1.0) {
      loss_value /= cfg.penalty_weight;
      total.scale(1.0 / cfg.penalty_weight);
    }

    rec.env_risks.push_back(risks);
    rec.penalty.push_back(penalty_term);
    rec.penalty_coeff.push_back(coeff);
    rec.loss.push_back(loss_value);
    rec.train_acc.push_back(classify && train_total > 0
                                ? static_cast<double>(train_hits) / train_total
                                : kNaN);
    rec.val_acc.push_back(classify && eval.validation ? accuracy(model, *eval.validation) : kNaN);
    rec.test_acc.push_back(classify && eval.test ? accuracy(model, *eval.test) : kNaN);

    if (!std::isfinite(loss_value) || !risks.allFinite() || !total.all_finite()) {
      rec.aborted = true;
      rec.abort_step = step;
      std::ostringstream os;
      os << "non-finite loss at step " << step;
      rec.abort_reason = os.str();
      return {model, rec};
    }

    if (cfg.optimizer == OptimizerKind::Adam) {
      adam_update(model, adam, total, cfg);
    } else {
      model.step(-cfg.lr, total);
    }
  }
  return {model, rec};
}

Index early_stop_select(const RunRecord& record) {
  if (record.val_acc.empty())
    throw std::invalid_argument("early_stop_select: no validation metrics");
  Index best = -1;
  double best_acc = -1.0;
  for (Index i = 0; i < static_cast<Index>(record.val_acc.size()); ++i) {
    const double a = record.val_acc[static_cast<std::size_t>(i)];
    if (std::isnan(a)) continue;
    if (a > best_acc) {
      best_acc = a;
      best = i;
    }
  }
  if (best < 0) throw std::invalid_argument("early_stop_select: no validation metrics");
  return best;
}

std::optional<Index> overfit_onset(const RunRecord& record, Index window, double threshold) {
  if (window < 1) throw std::invalid_argument("overfit_onset: window must be >= 1");
  const Index n = record.steps();
  Index run = 0;
  for (Index i = 0; i < n; ++i) {
    const double train = record.train_acc[static_cast<std::size_t>(i)];
    const double val = record.val_acc[static_cast<std::size_t>(i)];
    const double gap = train - val;
    if (!std::isnan(gap) && gap > threshold) {
      if (++run >= window) return i - window + 1;
    } else {
      run = 0;
    }
  }
  return std::nullopt;
}

SweepResult sweep(const std::map<std::string, SweepRange>& space, const TaskBuilder& builder,
                  int trials, std::uint64_t master_seed) {
  if (trials < 1) throw std::invalid_argument("sweep: needs at least one trial");
  std::mt19937_64 rng(master_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SweepResult out;
  int good = 0;
  for (int t = 0; t < trials; ++t) {
    std::map<std::string, double> config;
    for (const auto& [name, range] : space) {
      const double u = unit(rng);
      double v = range.log10_scale
                     ? std::pow(10.0, range.lo + u * (range.hi - range.lo))
                     : range.lo + u * (range.hi - range.lo);
      if (range.integer) v = std::round(v);
      config[name] = v;
    }
    const std::uint64_t trial_seed = master_seed ^ (0x9e3779b97f4a7c15ULL * (t + 1));
    TrialResult res = builder(config, trial_seed);
    res.config = config;
    good += res.satisfactory() ? 1 : 0;
    out.trials.push_back(std::move(res));
  }
  out.satisfactory_fraction = static_cast<double>(good) / static_cast<double>(trials);
  return out;
}

}  // namespace rex
