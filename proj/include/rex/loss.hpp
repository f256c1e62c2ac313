#pragma once

#include "rex/predictor.hpp"
#include "rex/types.hpp"

namespace rex {

enum class LossKind { MeanSquaredError, BinaryCrossEntropyWithLogits };

// Per-example losses. MSE averages the squared residual over output
// dimensions as well, so the 1-d case is the plain squared error. BCE is
// restricted to 1-d logits with {0,1} targets.
Vector per_example_losses(const Matrix& prediction, const Matrix& target, LossKind loss);

// Mean per-example loss.
double mean_loss(const Matrix& prediction, const Matrix& target, LossKind loss);

// d(mean_loss)/d(prediction), same shape as the prediction.
Matrix mean_loss_grad(const Matrix& prediction, const Matrix& target, LossKind loss);

// Domain risk: mean loss of the predictor over one environment.
double risk(const Predictor& p, const EnvDataset& env, LossKind loss);

// Gradient of the domain risk w.r.t. every parameter.
Gradients grad_risk(const Predictor& p, const EnvDataset& env, LossKind loss);

// Worst relative error between grad_risk and a central finite difference,
// over every parameter coordinate. The denominator is clamped at 1 so
// near-zero coordinates are compared absolutely.
double grad_check(const Predictor& p, const EnvDataset& env, LossKind loss, double step);

// Classification accuracy under the logit>0 decision rule; only meaningful
// for BCE tasks. Requires a 1-d output.
double accuracy(const Predictor& p, const EnvDataset& env);
double accuracy_from_logits(const Matrix& logits, const Matrix& target);

}  // namespace rex
