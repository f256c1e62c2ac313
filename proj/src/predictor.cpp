#include "rex/predictor.hpp"

#include <cmath>
#include <random>
#include <sstream>

namespace rex {

void Gradients::set_zero() {
  for (auto& w : weights) w.setZero();
  for (auto& b : biases) b.setZero();
}

void Gradients::axpy(double alpha, const Gradients& other) {
  for (std::size_t i = 0; i < weights.size(); ++i) weights[i] += alpha * other.weights[i];
  for (std::size_t i = 0; i < biases.size(); ++i) biases[i] += alpha * other.biases[i];
}

void Gradients::scale(double alpha) {
  for (auto& w : weights) w *= alpha;
  for (auto& b : biases) b *= alpha;
}

double Gradients::dot(const Gradients& other) const {
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i)
    s += (weights[i].array() * other.weights[i].array()).sum();
  for (std::size_t i = 0; i < biases.size(); ++i)
    s += (biases[i].array() * other.biases[i].array()).sum();
  return s;
}

double Gradients::squared_norm() const { return dot(*this); }

bool Gradients::all_finite() const {
  for (const auto& w : weights)
    if (!w.allFinite()) return false;
  for (const auto& b : biases)
    if (!b.allFinite()) return false;
  return true;
}

Predictor Predictor::linear(Index in, Index out, bool with_bias) {
  if (in < 1 || out < 1) throw DimensionError("Predictor::linear: dims must be positive");
  Predictor p;
  p.weights_.push_back(Matrix::Zero(in, out));
  if (with_bias) p.biases_.push_back(Matrix::Zero(1, out));
  p.with_bias_ = with_bias;
  return p;
}

Predictor Predictor::mlp(Index in, Index hidden, Index out, Index hidden_layers,
                         Activation act, std::uint64_t seed) {
  if (in < 1 || hidden < 1 || out < 1 || hidden_layers < 1)
    throw DimensionError("Predictor::mlp: dims must be positive");
  Predictor p;
  p.act_ = act;
  p.with_bias_ = true;
  std::mt19937_64 rng(seed);
  auto glorot = [&rng](Index fan_in, Index fan_out) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> u(-a, a);
    Matrix w(fan_in, fan_out);
    for (Index i = 0; i < fan_in; ++i)
      for (Index j = 0; j < fan_out; ++j) w(i, j) = u(rng);
    return w;
  };
  Index fan_in = in;
  for (Index l = 0; l < hidden_layers; ++l) {
    p.weights_.push_back(glorot(fan_in, hidden));
    p.biases_.push_back(Matrix::Zero(1, hidden));
    fan_in = hidden;
  }
  p.weights_.push_back(glorot(fan_in, out));
  p.biases_.push_back(Matrix::Zero(1, out));
  return p;
}

Gradients Predictor::zeros_like() const {
  Gradients g;
  for (const auto& w : weights_) g.weights.push_back(Matrix::Zero(w.rows(), w.cols()));
  for (const auto& b : biases_) g.biases.push_back(Matrix::Zero(b.rows(), b.cols()));
  return g;
}

void Predictor::step(double alpha, const Gradients& direction) {
  for (std::size_t i = 0; i < weights_.size(); ++i) weights_[i] += alpha * direction.weights[i];
  for (std::size_t i = 0; i < biases_.size(); ++i) biases_[i] += alpha * direction.biases[i];
}

Index Predictor::parameter_count() const {
  Index n = 0;
  for (const auto& w : weights_) n += w.size();
  for (const auto& b : biases_) n += b.size();
  return n;
}

double Predictor::get_parameter(Index flat_index) const {
  for (const auto& w : weights_) {
    if (flat_index < w.size()) return w(flat_index / w.cols(), flat_index % w.cols());
    flat_index -= w.size();
  }
  for (const auto& b : biases_) {
    if (flat_index < b.size()) return b(0, flat_index);
    flat_index -= b.size();
  }
  throw DimensionError("Predictor::get_parameter: index out of range");
}

void Predictor::set_parameter(Index flat_index, double value) {
  for (auto& w : weights_) {
    if (flat_index < w.size()) {
      w(flat_index / w.cols(), flat_index % w.cols()) = value;
      return;
    }
    flat_index -= w.size();
  }
  for (auto& b : biases_) {
    if (flat_index < b.size()) {
      b(0, flat_index) = value;
      return;
    }
    flat_index -= b.size();
  }
  throw DimensionError("Predictor::set_parameter: index out of range");
}

namespace {

inline Matrix apply_activation(const Matrix& z, Activation act) {
  // ReLU derivative at exactly 0 is taken as 0. Tanh goes through the
  // scalar libm call: the vectorized path gives position-dependent ulps,
  // which would break the exact row-permutation invariance of risks.
  if (act == Activation::ReLU) return z.cwiseMax(0.0);
  return z.unaryExpr([](double v) { return std::tanh(v); });
}

// Derivative written in terms of the activation value a = act(z):
// ReLU: 1[a > 0] (a = 0 exactly when z <= 0); tanh: 1 - a^2.
inline Matrix derivative_from_activation(const Matrix& a, Activation act) {
  if (act == Activation::ReLU)
    return (a.array() > 0.0).cast<double>().matrix();
  return (1.0 - a.array().square()).matrix();
}

inline void check_input(const Predictor& p, const Matrix& x) {
  if (x.cols() != p.input_dim()) {
    std::ostringstream os;
    os << "forward: input has " << x.cols() << " columns, predictor expects " << p.input_dim();
    throw DimensionError(os.str());
  }
}

}  // namespace

Matrix forward(const Predictor& p, const Matrix& x) {
  check_input(p, x);
  Matrix a = x;
  const Index layers = p.layer_count();
  for (Index l = 0; l < layers; ++l) {
    Matrix z = a * p.weights()[l];
    if (p.has_bias()) z.rowwise() += p.biases()[l].row(0);
    a = (l + 1 < layers) ? apply_activation(z, p.activation()) : std::move(z);
  }
  return a;
}

Matrix forward_canonical(const Predictor& p, const Matrix& x) {
  check_input(p, x);
  Matrix a = x;
  const Index layers = p.layer_count();
  for (Index l = 0; l < layers; ++l) {
    Matrix z(a.rows(), p.weights()[l].cols());
    z.noalias() = a.lazyProduct(p.weights()[l]);
    if (p.has_bias()) z.rowwise() += p.biases()[l].row(0);
    a = (l + 1 < layers) ? apply_activation(z, p.activation()) : std::move(z);
  }
  return a;
}

ForwardPass forward_pass(const Predictor& p, const Matrix& x) {
  check_input(p, x);
  ForwardPass fp;
  fp.input = &x;
  const Index layers = p.layer_count();
  const Matrix* a = &x;
  for (Index l = 0; l < layers; ++l) {
    Matrix z(a->rows(), p.weights()[l].cols());
    z.noalias() = (*a) * p.weights()[l];
    if (p.has_bias()) z.rowwise() += p.biases()[l].row(0);
    if (l + 1 < layers) {
      fp.hidden.push_back(apply_activation(z, p.activation()));
      a = &fp.hidden.back();
    } else {
      fp.output = std::move(z);
    }
  }
  return fp;
}

Gradients backward(const Predictor& p, const ForwardPass& fp, const Matrix& delta) {
  if (delta.rows() != fp.output.rows() || delta.cols() != fp.output.cols())
    throw DimensionError("backward: delta shape does not match output");
  Gradients g = p.zeros_like();
  const Index layers = p.layer_count();
  Matrix d = delta;
  for (Index l = layers - 1; l >= 0; --l) {
    const Matrix& layer_input = l == 0 ? *fp.input : fp.hidden[static_cast<std::size_t>(l - 1)];
    g.weights[static_cast<std::size_t>(l)].noalias() = layer_input.transpose() * d;
    if (p.has_bias()) g.biases[static_cast<std::size_t>(l)] = d.colwise().sum();
    if (l > 0) {
      Matrix dx(d.rows(), p.weights()[static_cast<std::size_t>(l)].rows());
      dx.noalias() = d * p.weights()[static_cast<std::size_t>(l)].transpose();
      d = dx.cwiseProduct(
          derivative_from_activation(fp.hidden[static_cast<std::size_t>(l - 1)], p.activation()));
    }
  }
  return g;
}

}  // namespace rex
