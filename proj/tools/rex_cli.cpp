// Experiment driver: builds the datasets, runs the training objectives, and
// writes plot-ready CSV plus a meta.json describing the resolved run.
#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rex/cmnist.hpp"
#include "rex/csv.hpp"
#include "rex/loss.hpp"
#include "rex/objectives.hpp"
#include "rex/quasidist.hpp"
#include "rex/sem.hpp"
#include "rex/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rex;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct Out {
  std::string dir = "runs";
  std::string stamp = timestamp_utc();

  std::string path(const std::string& command, const std::string& method,
                   const std::string& suffix = "") const {
    fs::create_directories(dir);
    return (fs::path(dir) / (command + "_" + method + (suffix.empty() ? "" : "_" + suffix) +
                             "_" + stamp + ".csv"))
        .string();
  }
};

void write_meta(const Out& out, const std::string& command, const std::string& method,
                const json& config) {
  fs::create_directories(out.dir);
  json meta;
  meta["command"] = command;
  meta["method"] = method;
  meta["config"] = config;
  meta["version"] = std::string("rex ") + kVersion;
  meta["timestamp"] = out.stamp;
  std::ofstream f(fs::path(out.dir) / "meta.json");
  f << meta.dump(2) << "\n";
}

// "0..6" (inclusive) or "0,3,5" or a single value.
std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  const auto dots = text.find("..");
  if (dots != std::string::npos) {
    const std::uint64_t lo = std::stoull(text.substr(0, dots));
    const std::uint64_t hi = std::stoull(text.substr(dots + 2));
    for (std::uint64_t s = lo; s <= hi; ++s) seeds.push_back(s);
  } else {
    std::size_t pos = 0;
    while (pos < text.size()) {
      const auto comma = text.find(',', pos);
      const std::string tok =
          text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
      if (!tok.empty()) seeds.push_back(std::stoull(tok));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
  }
  if (seeds.empty()) throw CLI::ValidationError("--seeds", "no seeds parsed from '" + text + "'");
  return seeds;
}

std::string resolve_mnist_dir(const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("REX_MNIST_DIR")) return env;
  return "";
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double stderr_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double mu = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - mu) * (x - mu);
  return std::sqrt(s / static_cast<double>(v.size() - 1)) /
         std::sqrt(static_cast<double>(v.size()));
}

// ---------------------------------------------------------------------------

struct ToyArgs {
  double u = 2.0, v = 4.0;
  std::vector<double> qs = {0.1, 0.2};
  Out out;
};

int run_toy(const ToyArgs& a) {
  const ToyGameReport rep = toy_covariate_game(a.u, a.v, a.qs);
  CsvWriter csv(a.out.path("toy", "all"),
                {"u", "v", "omega", "minimax_risk", "q_bar", "erm_p", "ri_p", "rex_p", "q",
                 "erm_risk", "ri_risk", "rex_risk"});
  for (std::size_t i = 0; i < a.qs.size(); ++i) {
    csv.row({CsvWriter::num(rep.u), CsvWriter::num(rep.v), CsvWriter::num(rep.omega),
             CsvWriter::num(rep.minimax_risk), CsvWriter::num(rep.q_bar),
             CsvWriter::num(rep.erm_p), CsvWriter::num(rep.ri_p), CsvWriter::num(rep.rex_p),
             CsvWriter::num(rep.q_values[i]), CsvWriter::num(rep.erm_risks[i]),
             CsvWriter::num(rep.ri_risks[i]), CsvWriter::num(rep.rex_risks[i])});
  }
  json cfg{{"u", a.u}, {"v", a.v}, {"q_values", a.qs}};
  write_meta(a.out, "toy", "all", cfg);
  std::cout << "toy: omega=" << rep.omega << " minimax_risk=" << rep.minimax_risk << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct SemArgs {
  std::string scenario = "FOU";
  std::string method = "vrex";
  std::string seeds = "0..6";
  Index x_dim = 10;
  Index n_per_env = 1000;
  std::vector<double> env_noise = {0.2, 2.0, 5.0};
  bool vary_baseline = false;
  Index steps = 2001;
  double lr = 1e-2;
  double penalty_weight = 1e4;
  Index anneal = 500;
  double lambda_min = -1.0;
  Out out;
};

int run_sem(const SemArgs& a) {
  SemScenario sc = parse_scenario_code(a.scenario);
  sc.x_dim = a.x_dim;
  sc.n_per_env = a.n_per_env;
  sc.env_noise = a.env_noise;
  const Objective obj = objective_from_name(a.method);
  const auto seeds = parse_seeds(a.seeds);

  const std::string method_label = a.method + (a.vary_baseline ? "_varY" : "");
  CsvWriter csv(a.out.path("sem", method_label),
                {"scenario", "method", "seed", "causal_mse", "noncausal_mse"});
  std::vector<double> causal_all, noncausal_all;
  bool aborted = false;
  for (std::uint64_t seed : seeds) {
    const ScenarioData data = build_scenario(sc, seed);
    Predictor init = Predictor::linear(2 * sc.x_dim, 1, /*with_bias=*/false);
    TrainConfig cfg;
    cfg.steps = a.steps;
    cfg.lr = a.lr;
    cfg.penalty_weight = a.penalty_weight;
    cfg.penalty_anneal_step = std::min(a.anneal, a.steps);
    cfg.seed = seed;
    PenaltyConfig pcfg;
    pcfg.lambda_min = a.lambda_min;
    Vector offsets;
    if (a.vary_baseline) {
      offsets.resize(static_cast<Index>(data.envs.size()));
      for (std::size_t e = 0; e < data.envs.size(); ++e)
        offsets[static_cast<Index>(e)] = var_y_baseline(data.envs[e]);
    }
    const auto [model, rec] =
        train(init, data.envs, obj, pcfg, cfg, LossKind::MeanSquaredError, {}, offsets);
    aborted |= rec.aborted;
    Vector w = model.weights()[0].col(0);
    if (data.scramble) w = data.scramble->transpose() * w;
    const auto [causal, noncausal] = weight_error(w, data.true_weights, data.causal_dim);
    causal_all.push_back(causal);
    noncausal_all.push_back(noncausal);
    csv.row({a.scenario, method_label, std::to_string(seed), CsvWriter::num(causal),
             CsvWriter::num(noncausal)});
  }
  csv.row({a.scenario, method_label, "mean+-se",
           CsvWriter::num(mean_of(causal_all)) + "+-" + CsvWriter::num(stderr_of(causal_all)),
           CsvWriter::num(mean_of(noncausal_all)) + "+-" +
               CsvWriter::num(stderr_of(noncausal_all))});

  json cfg{{"scenario", a.scenario},         {"method", method_label},
           {"seeds", a.seeds},               {"x_dim", a.x_dim},
           {"n_per_env", a.n_per_env},       {"env_noise", a.env_noise},
           {"vary_baseline", a.vary_baseline}, {"steps", a.steps},
           {"lr", a.lr},                     {"penalty_weight", a.penalty_weight},
           {"anneal", a.anneal},             {"lambda_min", a.lambda_min}};
  write_meta(a.out, "sem", method_label, cfg);
  std::cout << "sem " << a.scenario << " " << method_label
            << ": causal_mse=" << mean_of(causal_all)
            << " noncausal_mse=" << mean_of(noncausal_all) << "\n";
  return aborted ? kExitNumeric : kExitOk;
}

// ---------------------------------------------------------------------------

struct CmnistArgs {
  std::string mnist_dir;
  std::string method = "vrex";
  std::string variant = "standard";
  double p = 0.5;
  std::string seeds = "0";
  bool grayscale = false;
  Index hidden = 256;
  Index steps = 501;
  double lr = 1e-3;
  double l2 = 1e-3;
  double penalty_weight = 1e4;
  Index anneal = 100;
  double lambda_min = -1.0;
  Index train_per_env = 0;
  Index test_n = 0;
  bool eval_grid = false;
  bool emit_record = false;
  std::string cache_dir;
  bool verify_only = false;
  Out out;
};

CmnistSpec spec_from(const CmnistArgs& a) {
  CmnistSpec spec;
  spec.variant = variant_from_name(a.variant);
  spec.p = a.p;
  spec.grayscale = a.grayscale;
  spec.train_per_env = a.train_per_env;
  spec.test_n = a.test_n;
  return spec;
}

int run_cmnist(const CmnistArgs& a) {
  const std::string dir = resolve_mnist_dir(a.mnist_dir);
  if (a.verify_only) {
    std::cout << "expected files in --mnist-dir (decompressed IDX):\n";
    for (const auto& info : canonical_mnist_files())
      std::cout << "  " << info.name << "  (" << info.bytes << " bytes)\n";
    if (dir.empty()) {
      std::cout << "no directory given (use --mnist-dir or REX_MNIST_DIR)\n";
      return kExitConfig;
    }
    const std::string problem = verify_mnist_dir(dir);
    std::cout << (problem.empty() ? "ok: " + dir : "problem: " + problem) << "\n";
    return problem.empty() ? kExitOk : kExitConfig;
  }
  if (dir.empty()) {
    std::cerr << "cmnist: no MNIST directory (use --mnist-dir or REX_MNIST_DIR)\n";
    return kExitConfig;
  }
  const std::string problem = verify_mnist_dir(dir);
  if (!problem.empty()) {
    std::cerr << "cmnist: " << problem << "\n";
    return kExitConfig;
  }
  const MnistData mnist = load_mnist_pair((fs::path(dir) / "train-images-idx3-ubyte").string(),
                                          (fs::path(dir) / "train-labels-idx1-ubyte").string());
  const CmnistSpec spec = spec_from(a);
  const Objective obj = objective_from_name(a.method);
  const auto seeds = parse_seeds(a.seeds);

  CsvWriter csv(a.out.path("cmnist", a.method),
                {"seed", "train_acc", "test_acc", "early_stop_step", "early_stop_val_acc",
                 "risk_env0", "risk_env1", "penalty_final", "aborted"});
  std::optional<CsvWriter> grid_csv;
  if (a.eval_grid)
    grid_csv.emplace(a.out.path("cmnist", a.method, "grid"),
                     std::vector<std::string>{"seed", "prob_y0_red", "accuracy", "risk"});
  std::optional<CsvWriter> rec_csv;
  if (a.emit_record)
    rec_csv.emplace(a.out.path("cmnist", a.method, "record"),
                    std::vector<std::string>{"seed", "step", "risk_env0", "risk_env1", "penalty",
                                             "penalty_coeff", "loss", "train_acc", "val_acc",
                                             "test_acc"});

  bool aborted_any = false;
  for (std::uint64_t seed : seeds) {
    auto envs = build_cmnist(mnist, spec, seed);
    const EnvDataset test_env = envs.back();
    envs.pop_back();
    // Validation env: same held-out pool, re-colored at the average train
    // correlation (85%); used for diagnostics, never for selection.
    const Index pool = test_env.rows();
    Matrix val_images(pool, 784);
    std::vector<int> val_digits(static_cast<std::size_t>(pool));
    // The test env keeps pooled channels, so rebuild from the tail of the
    // raw data to stay aligned with the construction.
    const Index offset = mnist.images.rows() - pool;
    for (Index i = 0; i < pool; ++i) {
      val_images.row(i) = mnist.images.row(offset + i);
      val_digits[static_cast<std::size_t>(i)] = mnist.labels[static_cast<std::size_t>(offset + i)];
    }
    EnvDataset val_env = make_cmnist_environment(val_images, val_digits, 0.15, spec.label_noise,
                                                 spec.grayscale, seed ^ 0xabcdef, "val");
    if (spec.variant == CmnistVariant::ColorImbalance ||
        spec.variant == CmnistVariant::DigitImbalance) {
      std::vector<EnvDataset> shim = {val_env, val_env, val_env};
      val_env = apply_variant(shim, spec.variant, 0.5, seed ^ 0x123457).back();
    }

    Predictor init = Predictor::mlp(test_env.cols(), a.hidden, 1, 2, Activation::ReLU, seed);
    TrainConfig cfg;
    cfg.steps = a.steps;
    cfg.lr = a.lr;
    cfg.l2_weight = a.l2;
    cfg.penalty_weight = a.penalty_weight;
    cfg.penalty_anneal_step = std::min(a.anneal, a.steps);
    cfg.seed = seed;
    PenaltyConfig pcfg;
    pcfg.lambda_min = a.lambda_min;
    EvalEnvs eval;
    eval.validation = &val_env;
    eval.test = &test_env;
    const auto [model, rec] = train(init, envs, obj, pcfg, cfg,
                                    LossKind::BinaryCrossEntropyWithLogits, eval);
    aborted_any |= rec.aborted;
    const Index stop = rec.aborted ? rec.steps() - 1 : early_stop_select(rec);
    csv.row({std::to_string(seed), CsvWriter::num(rec.train_acc.back()),
             CsvWriter::num(rec.test_acc.back()), std::to_string(stop),
             CsvWriter::num(rec.val_acc[static_cast<std::size_t>(stop)]),
             CsvWriter::num(rec.env_risks.back()[0]), CsvWriter::num(rec.env_risks.back()[1]),
             CsvWriter::num(rec.penalty.back()), rec.aborted ? "1" : "0"});
    if (rec_csv) {
      for (Index t = 0; t < rec.steps(); ++t) {
        const auto ts = static_cast<std::size_t>(t);
        rec_csv->row({std::to_string(seed), std::to_string(t),
                      CsvWriter::num(rec.env_risks[ts][0]), CsvWriter::num(rec.env_risks[ts][1]),
                      CsvWriter::num(rec.penalty[ts]), CsvWriter::num(rec.penalty_coeff[ts]),
                      CsvWriter::num(rec.loss[ts]), CsvWriter::num(rec.train_acc[ts]),
                      CsvWriter::num(rec.val_acc[ts]), CsvWriter::num(rec.test_acc[ts])});
      }
    }
    if (grid_csv) {
      std::vector<double> probs;
      for (int i = 0; i <= 10; ++i) probs.push_back(i / 10.0);
      for (const auto& pt : eval_color_grid(model, probs, mnist, spec, seed + 555)) {
        grid_csv->row({std::to_string(seed), CsvWriter::num(pt.prob_y0_red),
                       CsvWriter::num(pt.accuracy), CsvWriter::num(pt.risk)});
      }
    }
    if (!a.cache_dir.empty()) {
      std::vector<EnvDataset> all = envs;
      all.push_back(test_env);
      save_env_cache(all, a.cache_dir + "/seed" + std::to_string(seed));
    }
  }

  json cfg{{"mnist_dir", dir},     {"method", a.method},       {"variant", a.variant},
           {"p", a.p},             {"seeds", a.seeds},         {"grayscale", a.grayscale},
           {"hidden", a.hidden},   {"steps", a.steps},         {"lr", a.lr},
           {"l2", a.l2},           {"penalty_weight", a.penalty_weight},
           {"anneal", a.anneal},   {"lambda_min", a.lambda_min},
           {"train_per_env", a.train_per_env}, {"test_n", a.test_n},
           {"label_noise", 0.25},  {"env_color_probs", {0.2, 0.1, 0.9}}};
  write_meta(a.out, "cmnist", a.method, cfg);
  return aborted_any ? kExitNumeric : kExitOk;
}

// ---------------------------------------------------------------------------

struct QuasiArgs {
  std::vector<double> lambdas = {-0.5, 0.0, 0.5, 1.0, 1.5};
  bool vector_field = false;
  double lambda_min = -1.0;
  double beta = 1.0;
  Out out;
};

int run_quasi(const QuasiArgs& a) {
  // Interpolation/extrapolation of two discretized bumps in P(x).
  const Index grid_n = 81;
  std::vector<Atom> support;
  for (Index i = 0; i < grid_n; ++i) {
    Atom atom;
    atom.x = Vector(1);
    atom.x << -4.0 + 8.0 * static_cast<double>(i) / (grid_n - 1);
    atom.y = 0.0;
    support.push_back(atom);
  }
  auto bump = [&](double mean) {
    Vector w(grid_n);
    for (Index i = 0; i < grid_n; ++i) {
      const double x = support[static_cast<std::size_t>(i)].x[0];
      w[i] = std::exp(-0.5 * (x - mean) * (x - mean) / 0.25);
    }
    w /= w.sum();
    w[0] += 1.0 - w.sum();
    return QuasiDistribution::from(support, w);
  };
  const std::vector<QuasiDistribution> dists = {bump(-1.0), bump(1.0)};

  CsvWriter csv(a.out.path("quasi", "curves"), {"x", "lambda", "weight"});
  for (double lam : a.lambdas) {
    Vector coeffs(2);
    coeffs << 1.0 - lam, lam;
    const QuasiDistribution mix = combine(dists, AffineCombo(coeffs));
    for (Index i = 0; i < grid_n; ++i)
      csv.row({CsvWriter::num(mix.support[static_cast<std::size_t>(i)].x[0]),
               CsvWriter::num(lam), CsvWriter::num(mix.weights[i])});
  }

  if (a.vector_field) {
    CsvWriter field(a.out.path("quasi", "vectorfield"), {"method", "r1", "r2", "dr1", "dr2"});
    PenaltyConfig pcfg;
    pcfg.lambda_min = a.lambda_min;
    pcfg.beta = a.beta;
    for (int i = 0; i <= 20; ++i)
      for (int j = 0; j <= 20; ++j) {
        Vector r(2);
        r << i / 10.0, j / 10.0;
        const Vector mm = risk_space_gradient(Objective::MmRex, r, pcfg);
        const Vector vr = risk_space_gradient(Objective::VRex, r, pcfg);
        field.row({"mmrex", CsvWriter::num(r[0]), CsvWriter::num(r[1]), CsvWriter::num(mm[0]),
                   CsvWriter::num(mm[1])});
        field.row({"vrex", CsvWriter::num(r[0]), CsvWriter::num(r[1]), CsvWriter::num(vr[0]),
                   CsvWriter::num(vr[1])});
      }
  }
  json cfg{{"lambdas", a.lambdas},
           {"vector_field", a.vector_field},
           {"lambda_min", a.lambda_min},
           {"beta", a.beta}};
  write_meta(a.out, "quasi", "curves", cfg);
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct SweepArgs {
  std::string mnist_dir;
  std::string method = "vrex";
  std::string variant = "standard";
  double p = 0.5;
  int trials = 20;
  std::uint64_t master_seed = 0;
  Index train_per_env = 5000;
  Index test_n = 5000;
  Out out;
};

int run_sweep(const SweepArgs& a) {
  const std::string dir = resolve_mnist_dir(a.mnist_dir);
  if (dir.empty() || !verify_mnist_dir(dir).empty()) {
    std::cerr << "sweep: valid --mnist-dir required\n";
    return kExitConfig;
  }
  const MnistData mnist = load_mnist_pair((fs::path(dir) / "train-images-idx3-ubyte").string(),
                                          (fs::path(dir) / "train-labels-idx1-ubyte").string());
  const Objective obj = objective_from_name(a.method);

  // Uniform random search over the usual schedule/capacity ranges.
  std::map<std::string, SweepRange> space;
  space["hidden"] = {7.0, 12.0, false, true};        // 2^k
  space["l2"] = {-4.0, -2.0, true, false};
  space["lr"] = {-4.3, -2.8, true, false};
  space["anneal"] = {50.0, 250.0, false, true};
  space["penalty_weight"] = {2.0, 6.0, true, false};
  space["steps"] = {201.0, 601.0, false, true};

  CmnistSpec spec;
  spec.variant = variant_from_name(a.variant);
  spec.p = a.p;
  spec.train_per_env = a.train_per_env;
  spec.test_n = a.test_n;

  auto builder = [&](const std::map<std::string, double>& config,
                     std::uint64_t seed) -> TrialResult {
    auto envs = build_cmnist(mnist, spec, seed);
    const EnvDataset test_env = envs.back();
    envs.pop_back();
    Predictor init = Predictor::mlp(test_env.cols(),
                                    static_cast<Index>(std::pow(2.0, config.at("hidden"))), 1, 2,
                                    Activation::ReLU, seed);
    TrainConfig cfg;
    cfg.steps = static_cast<Index>(config.at("steps"));
    cfg.lr = config.at("lr");
    cfg.l2_weight = config.at("l2");
    cfg.penalty_weight = config.at("penalty_weight");
    cfg.penalty_anneal_step =
        std::min<Index>(static_cast<Index>(config.at("anneal")), cfg.steps);
    cfg.seed = seed;
    EvalEnvs eval;
    eval.test = &test_env;
    const auto [model, rec] = train(init, envs, obj, PenaltyConfig{}, cfg,
                                    LossKind::BinaryCrossEntropyWithLogits, eval);
    TrialResult t;
    t.aborted = rec.aborted;
    t.train_acc = rec.train_acc.back();
    t.test_acc = rec.test_acc.back();
    return t;
  };

  const SweepResult res = sweep(space, builder, a.trials, a.master_seed);
  CsvWriter csv(a.out.path("sweep", a.method),
                {"trial", "hidden", "l2", "lr", "anneal", "penalty_weight", "steps",
                 "train_acc", "test_acc", "aborted", "satisfactory"});
  for (std::size_t i = 0; i < res.trials.size(); ++i) {
    const auto& t = res.trials[i];
    csv.row({std::to_string(i), CsvWriter::num(t.config.at("hidden")),
             CsvWriter::num(t.config.at("l2")), CsvWriter::num(t.config.at("lr")),
             CsvWriter::num(t.config.at("anneal")), CsvWriter::num(t.config.at("penalty_weight")),
             CsvWriter::num(t.config.at("steps")), CsvWriter::num(t.train_acc),
             CsvWriter::num(t.test_acc), t.aborted ? "1" : "0", t.satisfactory() ? "1" : "0"});
  }
  csv.row({"satisfactory_fraction", "", "", "", "", "", "", "", "",
           "", CsvWriter::num(res.satisfactory_fraction)});
  json cfg{{"method", a.method},       {"variant", a.variant},
           {"p", a.p},                 {"trials", a.trials},
           {"master_seed", a.master_seed}, {"train_per_env", a.train_per_env},
           {"test_n", a.test_n}};
  write_meta(a.out, "sweep", a.method, cfg);
  std::cout << "sweep: satisfactory fraction " << res.satisfactory_fraction << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  Out out;
};

int run_gradcheck(const GradcheckArgs& a) {
  CsvWriter csv(a.out.path("gradcheck", "all"), {"check", "max_rel_err", "threshold", "pass"});
  bool all_pass = true;
  auto report = [&](const std::string& name, double err, double threshold) {
    const bool pass = err < threshold;
    all_pass &= pass;
    csv.row({name, CsvWriter::num(err), CsvWriter::num(threshold), pass ? "1" : "0"});
    std::cout << (pass ? "[pass] " : "[FAIL] ") << name << " err=" << err << "\n";
  };

  std::mt19937_64 rng(10007);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto random_env = [&](Index n, Index d, bool binary) {
    EnvDataset env;
    env.x.resize(n, d);
    env.y.resize(n, 1);
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < d; ++j) env.x(i, j) = gauss(rng);
      env.y(i, 0) = binary ? static_cast<double>(gauss(rng) > 0.0) : gauss(rng);
    }
    return env;
  };

  // Redraw until every ReLU pre-activation sits clearly away from the kink
  // so the finite-difference probe never crosses it.
  auto kink_safe_env = [&](const Predictor& p, Index n, Index d, bool binary) {
    for (;;) {
      EnvDataset env = random_env(n, d, binary);
      Matrix a = env.x;
      double closest = 1e300;
      for (Index l = 0; l + 1 < p.layer_count(); ++l) {
        Matrix z = a * p.weights()[static_cast<std::size_t>(l)];
        z.rowwise() += p.biases()[static_cast<std::size_t>(l)].row(0);
        closest = std::min(closest, z.cwiseAbs().minCoeff());
        a = z.cwiseMax(0.0);
      }
      if (closest > 1e-3) return env;
    }
  };

  for (LossKind loss : {LossKind::MeanSquaredError, LossKind::BinaryCrossEntropyWithLogits}) {
    const bool binary = loss == LossKind::BinaryCrossEntropyWithLogits;
    const std::string ln = binary ? "bce" : "mse";
    Predictor lin = Predictor::linear(4, 1);
    for (Index i = 0; i < 4; ++i) lin.weights()[0](i, 0) = gauss(rng);
    report("linear_" + ln, grad_check(lin, random_env(16, 4, binary), loss, 1e-5), 1e-4);
    for (Activation act : {Activation::ReLU, Activation::Tanh}) {
      const std::string an = act == Activation::ReLU ? "relu" : "tanh";
      Predictor mlp = Predictor::mlp(4, 6, 1, 2, act, rng());
      const EnvDataset env = act == Activation::ReLU ? kink_safe_env(mlp, 12, 4, binary)
                                                     : random_env(12, 4, binary);
      report("mlp_" + an + "_" + ln, grad_check(mlp, env, loss, 1e-5), 1e-4);
    }
  }

  // Directional checks of the total gradients.
  Predictor model = Predictor::linear(3, 1);
  for (Index i = 0; i < 3; ++i) model.weights()[0](i, 0) = gauss(rng);
  std::vector<EnvDataset> envs;
  for (int e = 0; e < 3; ++e) envs.push_back(random_env(8, 3, false));
  const PenaltyConfig pcfg{-1.2, 4.0, 1.5, 1.0};
  for (Objective obj : {Objective::Erm, Objective::RiskInterpolation, Objective::MmRex,
                        Objective::VRex, Objective::MaeRex}) {
    Gradients dir = model.zeros_like();
    for (Index i = 0; i < 3; ++i) dir.weights[0](i, 0) = gauss(rng);
    dir.biases[0](0, 0) = gauss(rng);
    Vector risks(3);
    std::vector<Gradients> grads;
    for (int e = 0; e < 3; ++e) {
      risks[e] = risk(model, envs[static_cast<std::size_t>(e)], LossKind::MeanSquaredError);
      grads.push_back(grad_risk(model, envs[static_cast<std::size_t>(e)],
                                LossKind::MeanSquaredError));
    }
    const double analytic = total_gradient(obj, risks, grads, pcfg).dot(dir);
    const double h = 1e-6;
    Predictor up = model, down = model;
    up.step(h, dir);
    down.step(-h, dir);
    Vector ru(3), rd(3);
    for (int e = 0; e < 3; ++e) {
      ru[e] = risk(up, envs[static_cast<std::size_t>(e)], LossKind::MeanSquaredError);
      rd[e] = risk(down, envs[static_cast<std::size_t>(e)], LossKind::MeanSquaredError);
    }
    const double numeric =
        (objective_value(obj, ru, pcfg) - objective_value(obj, rd, pcfg)) / (2.0 * h);
    report(std::string("total_gradient_") + objective_name(obj),
           std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)}),
           1e-4);
  }

  write_meta(a.out, "gradcheck", "all", json::object());
  return all_pass ? kExitOk : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-domain risk extrapolation experiments"};
  app.require_subcommand(1);
  app.set_config("--config");

  ToyArgs toy_args;
  auto* toy_cmd = app.add_subcommand("toy", "Two-input covariate-shift game, closed form");
  toy_cmd->add_option("--u", toy_args.u, "cost of predicting COSTLY on a CHEAP input");
  toy_cmd->add_option("--v", toy_args.v, "cost of predicting CHEAP on a COSTLY input");
  toy_cmd->add_option("--q", toy_args.qs, "training COSTLY-input probabilities");
  toy_cmd->add_option("--output-dir", toy_args.out.dir, "output directory");

  SemArgs sem_args;
  auto* sem_cmd = app.add_subcommand("sem", "Structural-equation-model scenario runs");
  sem_cmd->add_option("--scenario", sem_args.scenario, "FOU/FOS/FEU/FES/POU/POS/PEU/PES");
  sem_cmd->add_option("--method", sem_args.method, "erm|ri|mmrex|vrex|maerex|irmv1");
  sem_cmd->add_option("--seeds", sem_args.seeds, "e.g. 0..6 or 0,1,2");
  sem_cmd->add_option("--x-dim", sem_args.x_dim, "per-block feature dimension");
  sem_cmd->add_option("--n-per-env", sem_args.n_per_env, "samples per domain");
  sem_cmd->add_option("--env-noise", sem_args.env_noise, "per-domain noise multipliers");
  sem_cmd->add_flag("--vary-baseline", sem_args.vary_baseline,
                    "subtract Var(Y_e) from risks before the penalty");
  sem_cmd->add_option("--steps", sem_args.steps);
  sem_cmd->add_option("--lr", sem_args.lr);
  sem_cmd->add_option("--penalty-weight", sem_args.penalty_weight);
  sem_cmd->add_option("--anneal", sem_args.anneal);
  sem_cmd->add_option("--lambda-min", sem_args.lambda_min);
  sem_cmd->add_option("--output-dir", sem_args.out.dir);

  CmnistArgs cm_args;
  auto* cm_cmd = app.add_subcommand("cmnist", "Colored-MNIST training runs");
  cm_cmd->add_option("--mnist-dir", cm_args.mnist_dir, "directory with the four IDX files");
  cm_cmd->add_option("--method", cm_args.method, "erm|ri|mmrex|vrex|maerex|irmv1");
  cm_cmd->add_option("--variant", cm_args.variant, "standard|class|digit|color");
  cm_cmd->add_option("--p", cm_args.p, "imbalance parameter in [0, 0.5]");
  cm_cmd->add_option("--seeds", cm_args.seeds, "e.g. 0..2");
  cm_cmd->add_flag("--grayscale", cm_args.grayscale, "grayscale control (both channels)");
  cm_cmd->add_option("--hidden", cm_args.hidden);
  cm_cmd->add_option("--steps", cm_args.steps);
  cm_cmd->add_option("--lr", cm_args.lr);
  cm_cmd->add_option("--l2", cm_args.l2);
  cm_cmd->add_option("--penalty-weight", cm_args.penalty_weight);
  cm_cmd->add_option("--anneal", cm_args.anneal);
  cm_cmd->add_option("--lambda-min", cm_args.lambda_min);
  cm_cmd->add_option("--train-per-env", cm_args.train_per_env, "0 = full pool");
  cm_cmd->add_option("--test-n", cm_args.test_n, "0 = full pool");
  cm_cmd->add_flag("--eval-grid", cm_args.eval_grid, "emit the P(Y=0|red) evaluation grid");
  cm_cmd->add_flag("--emit-record", cm_args.emit_record, "emit the per-step run record");
  cm_cmd->add_option("--cache-dir", cm_args.cache_dir, "write built envs as a binary cache");
  cm_cmd->add_flag("--verify-mnist", cm_args.verify_only,
                   "print canonical file names/sizes and verify the directory");
  cm_cmd->add_option("--output-dir", cm_args.out.dir);

  QuasiArgs q_args;
  auto* q_cmd = app.add_subcommand("quasi", "Quasi-distribution geometry exports");
  q_cmd->add_option("--lambdas", q_args.lambdas, "interpolation/extrapolation coefficients");
  q_cmd->add_flag("--vector-field", q_args.vector_field,
                  "emit the risk-space gradient field of MM-REx and V-REx");
  q_cmd->add_option("--lambda-min", q_args.lambda_min);
  q_cmd->add_option("--beta", q_args.beta);
  q_cmd->add_option("--output-dir", q_args.out.dir);

  SweepArgs sw_args;
  auto* sw_cmd = app.add_subcommand("sweep", "Random hyperparameter search on CMNIST");
  sw_cmd->add_option("--mnist-dir", sw_args.mnist_dir);
  sw_cmd->add_option("--method", sw_args.method);
  sw_cmd->add_option("--variant", sw_args.variant);
  sw_cmd->add_option("--p", sw_args.p);
  sw_cmd->add_option("--trials", sw_args.trials);
  sw_cmd->add_option("--master-seed", sw_args.master_seed);
  sw_cmd->add_option("--train-per-env", sw_args.train_per_env);
  sw_cmd->add_option("--test-n", sw_args.test_n);
  sw_cmd->add_option("--output-dir", sw_args.out.dir);

  GradcheckArgs gc_args;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference validation of all gradients");
  gc_cmd->add_option("--output-dir", gc_args.out.dir);

  if (argc <= 1) {
    std::cout << app.help() << "\n";
    return kExitConfig;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (toy_cmd->parsed()) return run_toy(toy_args);
    if (sem_cmd->parsed()) return run_sem(sem_args);
    if (cm_cmd->parsed()) return run_cmnist(cm_args);
    if (q_cmd->parsed()) return run_quasi(q_args);
    if (sw_cmd->parsed()) return run_sweep(sw_args);
    if (gc_cmd->parsed()) return run_gradcheck(gc_args);
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return kExitConfig;
}
