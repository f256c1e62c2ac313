#pragma once

#include <Eigen/Dense>

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace rex {

inline constexpr const char* kVersion = "0.1.0";

// Dense 64-bit storage everywhere; the exact risk identities need the
// full double mantissa. Row-major so a matrix row is one example.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class EmptyDomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class UnderIdentifiedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One training domain: design matrix, targets, and how it was built.
struct EnvDataset {
  Matrix x;            // n x feature_dim
  Matrix y;            // n x 1
  std::string env_id;
  std::map<std::string, double> meta;  // construction parameters
  // CMNIST keeps the source digit per row so covariate-shift variants can
  // regroup examples after binarization. Empty for non-image domains.
  std::vector<int> shape_labels;

  Index rows() const { return x.rows(); }
  Index cols() const { return x.cols(); }
};

}  // namespace rex
