#pragma once

#include <cstdint>
#include <vector>

#include "rex/types.hpp"

namespace rex {

enum class Activation { ReLU, Tanh };

// Parameter-shaped container: one matrix per layer weight, one row vector
// per layer bias. Doubles as the gradient structure and as optimizer state.
struct Gradients {
  std::vector<Matrix> weights;
  std::vector<Matrix> biases;

  void set_zero();
  void axpy(double alpha, const Gradients& other);  // this += alpha * other
  void scale(double alpha);
  double dot(const Gradients& other) const;
  double squared_norm() const;
  bool all_finite() const;
};

// Fixed model zoo: a linear map or an MLP with `hidden_layers` equal-width
// hidden layers and a linear output layer.
class Predictor {
 public:
  static Predictor linear(Index in, Index out, bool with_bias = true);
  static Predictor mlp(Index in, Index hidden, Index out, Index hidden_layers,
                       Activation act, std::uint64_t seed);

  Index input_dim() const { return weights_.front().rows(); }
  Index output_dim() const { return weights_.back().cols(); }
  Index layer_count() const { return static_cast<Index>(weights_.size()); }
  bool is_linear() const { return weights_.size() == 1; }
  bool has_bias() const { return with_bias_; }
  Activation activation() const { return act_; }

  std::vector<Matrix>& weights() { return weights_; }
  std::vector<Matrix>& biases() { return biases_; }
  const std::vector<Matrix>& weights() const { return weights_; }
  const std::vector<Matrix>& biases() const { return biases_; }

  Gradients zeros_like() const;
  void step(double alpha, const Gradients& direction);  // params += alpha * direction
  Index parameter_count() const;

  // Flat parameter access in a fixed order (weights then bias, per layer);
  // used by finite-difference checks.
  double get_parameter(Index flat_index) const;
  void set_parameter(Index flat_index, double value);

 private:
  std::vector<Matrix> weights_;  // layer l: (fan_in x fan_out)
  std::vector<Matrix> biases_;   // layer l: (1 x fan_out); absent rows when bias-free
  Activation act_ = Activation::ReLU;
  bool with_bias_ = true;

  friend struct ForwardCache;
  friend Matrix forward(const Predictor&, const Matrix&);
  friend struct ForwardPass;
};

// Intermediate activations of one forward evaluation, kept for backprop.
// Borrows the input batch: it must outlive the pass. Only post-activation
// values are stored; both ReLU and tanh derivatives are recovered from them.
struct ForwardPass {
  const Matrix* input = nullptr;
  std::vector<Matrix> hidden;  // post-activation per hidden layer
  Matrix output;
};

Matrix forward(const Predictor& p, const Matrix& x);
ForwardPass forward_pass(const Predictor& p, const Matrix& x);

// Per-example-canonical evaluation: every example is computed with the same
// instruction sequence regardless of its row position, so batch statistics
// are exactly invariant under row permutation. Slower than forward(); used
// by the risk paths that promise exact identities.
Matrix forward_canonical(const Predictor& p, const Matrix& x);

// Reverse-mode gradient of sum_i f(output_i) given d f / d output.
// `delta` has the shape of the output (n x out_dim).
Gradients backward(const Predictor& p, const ForwardPass& fp, const Matrix& delta);

}  // namespace rex
