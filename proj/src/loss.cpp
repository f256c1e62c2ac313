#include "rex/loss.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace rex {

namespace {

void check_pair(const Matrix& prediction, const Matrix& target, LossKind loss) {
  if (prediction.rows() != target.rows() || prediction.cols() != target.cols())
    throw DimensionError("loss: prediction and target shapes differ");
  if (prediction.rows() == 0) throw EmptyDomainError("loss: empty domain");
  if (loss == LossKind::BinaryCrossEntropyWithLogits) {
    if (prediction.cols() != 1)
      throw DimensionError("BCE requires 1-d logits");
    for (Index i = 0; i < target.rows(); ++i) {
      const double y = target(i, 0);
      if (y != 0.0 && y != 1.0)
        throw std::invalid_argument("BCE requires targets in {0,1}");
    }
  }
}

}  // namespace

Vector per_example_losses(const Matrix& prediction, const Matrix& target, LossKind loss) {
  check_pair(prediction, target, loss);
  const Index n = prediction.rows();
  Vector out(n);
  if (loss == LossKind::MeanSquaredError) {
    const double k = static_cast<double>(prediction.cols());
    for (Index i = 0; i < n; ++i) out[i] = (prediction.row(i) - target.row(i)).squaredNorm() / k;
  } else {
    // Stable logits form: max(z,0) - z*y + log(1 + exp(-|z|)).
    for (Index i = 0; i < n; ++i) {
      const double z = prediction(i, 0);
      const double y = target(i, 0);
      out[i] = std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
  }
  return out;
}

double mean_loss(const Matrix& prediction, const Matrix& target, LossKind loss) {
  return per_example_losses(prediction, target, loss).mean();
}

Matrix mean_loss_grad(const Matrix& prediction, const Matrix& target, LossKind loss) {
  check_pair(prediction, target, loss);
  const double n = static_cast<double>(prediction.rows());
  if (loss == LossKind::MeanSquaredError) {
    const double k = static_cast<double>(prediction.cols());
    return (2.0 / (n * k)) * (prediction - target);
  }
  Matrix g(prediction.rows(), 1);
  for (Index i = 0; i < prediction.rows(); ++i) {
    const double z = prediction(i, 0);
    const double sig = 1.0 / (1.0 + std::exp(-z));
    g(i, 0) = (sig - target(i, 0)) / n;
  }
  return g;
}

double risk(const Predictor& p, const EnvDataset& env, LossKind loss) {
  if (env.rows() == 0) throw EmptyDomainError("risk: empty domain");
  // Summing the per-example losses in sorted order makes the batch mean a
  // function of their multiset, so the risk is exactly invariant under row
  // permutation. Paired with the canonical forward this is an identity the
  // exactness tests rely on.
  Vector losses = per_example_losses(forward_canonical(p, env.x), env.y, loss);
  std::sort(losses.begin(), losses.end());
  double s = 0.0;
  for (Index i = 0; i < losses.size(); ++i) s += losses[i];
  return s / static_cast<double>(losses.size());
}

Gradients grad_risk(const Predictor& p, const EnvDataset& env, LossKind loss) {
  if (env.rows() == 0) throw EmptyDomainError("grad_risk: empty domain");
  ForwardPass fp = forward_pass(p, env.x);
  return backward(p, fp, mean_loss_grad(fp.output, env.y, loss));
}

double grad_check(const Predictor& p, const EnvDataset& env, LossKind loss, double step) {
  if (step <= 0.0) throw std::invalid_argument("grad_check: step must be positive");
  const Gradients g = grad_risk(p, env, loss);
  Predictor probe = p;
  double worst = 0.0;
  Index flat = 0;
  auto check_block = [&](const Matrix& analytic) {
    for (Index k = 0; k < analytic.size(); ++k, ++flat) {
      const double saved = probe.get_parameter(flat);
      probe.set_parameter(flat, saved + step);
      const double up = risk(probe, env, loss);
      probe.set_parameter(flat, saved - step);
      const double down = risk(probe, env, loss);
      probe.set_parameter(flat, saved);
      const double fd = (up - down) / (2.0 * step);
      const double a = analytic(k / analytic.cols(), k % analytic.cols());
      const double denom = std::max({1.0, std::abs(a), std::abs(fd)});
      worst = std::max(worst, std::abs(a - fd) / denom);
    }
  };
  for (const auto& w : g.weights) check_block(w);
  for (const auto& b : g.biases) check_block(b);
  return worst;
}

double accuracy_from_logits(const Matrix& logits, const Matrix& target) {
  if (logits.rows() != target.rows() || logits.cols() != 1 || target.cols() != 1)
    throw DimensionError("accuracy: expects aligned n x 1 logits and targets");
  if (logits.rows() == 0) throw EmptyDomainError("accuracy: empty domain");
  Index hits = 0;
  for (Index i = 0; i < logits.rows(); ++i)
    hits += ((logits(i, 0) > 0.0) ? 1.0 : 0.0) == target(i, 0);
  return static_cast<double>(hits) / static_cast<double>(logits.rows());
}

double accuracy(const Predictor& p, const EnvDataset& env) {
  return accuracy_from_logits(forward(p, env.x), env.y);
}

}  // namespace rex
