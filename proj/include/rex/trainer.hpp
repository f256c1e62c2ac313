#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rex/objectives.hpp"
#include "rex/predictor.hpp"
#include "rex/types.hpp"

namespace rex {

enum class OptimizerKind { Sgd, Adam };

struct TrainConfig {
  Index steps = 501;
  double lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double l2_weight = 0.0;
  // Waterfall: the penalty coefficient is exactly 1 before
  // penalty_anneal_step and exactly penalty_weight at and after it; with
  // lr_rescale_on_anneal the whole loss is divided by penalty_weight
  // (> 1) from the anneal step on.
  double penalty_weight = 1.0;
  Index penalty_anneal_step = 0;
  bool lr_rescale_on_anneal = true;
  Index batch_size = 0;  // 0 = full batch
  std::uint64_t seed = 0;
};

struct RunRecord {
  std::vector<Vector> env_risks;      // per step, one risk per train env
  std::vector<double> penalty;        // unweighted penalty term value
  std::vector<double> penalty_coeff;  // waterfall coefficient at that step
  std::vector<double> loss;           // objective actually stepped on
  std::vector<double> train_acc;      // NaN for regression tasks
  std::vector<double> val_acc;
  std::vector<double> test_acc;
  bool aborted = false;
  Index abort_step = -1;
  std::string abort_reason;

  Index steps() const { return static_cast<Index>(loss.size()); }
};

struct EvalEnvs {
  const EnvDataset* validation = nullptr;
  const EnvDataset* test = nullptr;
};

// Minimize the chosen objective over the train envs. The penalty term of
// penalty-form objectives (V-REx, MAE-REx, MM-REx, IRMv1) is multiplied by
// the waterfall coefficient; the PenaltyConfig scales sit inside the term,
// so beta = 0 reduces V-REx to the exact ERM trajectory.
// Offsets, when given, are subtracted from the risks entering the penalty
// (the r_e - Var(Y_e) baseline); they never affect the base term.
std::pair<Predictor, RunRecord> train(const Predictor& init,
                                      const std::vector<EnvDataset>& envs, Objective obj,
                                      const PenaltyConfig& pcfg, const TrainConfig& cfg,
                                      LossKind loss = LossKind::BinaryCrossEntropyWithLogits,
                                      const EvalEnvs& eval = {},
                                      const Vector& penalty_risk_offsets = Vector());

// Step with the best validation accuracy; ties go to the earliest step.
Index early_stop_select(const RunRecord& record);

// First step where train accuracy exceeds validation accuracy by more than
// `threshold` for `window` consecutive steps; a suggested anneal step.
std::optional<Index> overfit_onset(const RunRecord& record, Index window,
                                   double threshold = 0.05);

// ---------------------------------------------------------------------------
// Random-search harness.
struct SweepRange {
  double lo = 0.0;
  double hi = 0.0;
  bool log10_scale = false;
  bool integer = false;
};

struct TrialResult {
  std::map<std::string, double> config;
  double train_acc = 0.0;
  double test_acc = 0.0;
  bool aborted = false;

  // Better than chance on test while not degenerate (train above test).
  bool satisfactory() const { return !aborted && test_acc > 0.5 && train_acc > test_acc; }
};

using TaskBuilder =
    std::function<TrialResult(const std::map<std::string, double>& config, std::uint64_t seed)>;

struct SweepResult {
  std::vector<TrialResult> trials;
  double satisfactory_fraction = 0.0;
};

// Samples `trials` configurations from the ranges (uniform, optionally in
// log10 space) and runs the builder on each; deterministic per master seed.
SweepResult sweep(const std::map<std::string, SweepRange>& space, const TaskBuilder& builder,
                  int trials, std::uint64_t master_seed);

}  // namespace rex
