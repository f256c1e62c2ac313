#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "rex/predictor.hpp"
#include "rex/types.hpp"

namespace rex {

// Raw IDX container: big-endian magic (2051 images / 2049 labels), one
// big-endian 32-bit count per dimension, then the payload bytes.
struct IdxFile {
  std::uint32_t magic = 0;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> payload;
};

IdxFile parse_idx(const std::vector<std::uint8_t>& bytes);
IdxFile load_idx(const std::string& path);

struct MnistData {
  Matrix images;            // n x 784, scaled to [0,1]
  std::vector<int> labels;  // digit per row
};
MnistData mnist_from_idx(const IdxFile& images, const IdxFile& labels);
MnistData load_mnist_pair(const std::string& images_path, const std::string& labels_path);

struct MnistFileInfo {
  const char* name;
  std::size_t bytes;
};
// Canonical (decompressed) MNIST file names and sizes.
std::array<MnistFileInfo, 4> canonical_mnist_files();
// Returns an empty string when the directory holds all four files with the
// expected sizes and parseable headers, else a description of the problem.
std::string verify_mnist_dir(const std::string& dir);

enum class CmnistVariant { Standard, ClassImbalance, DigitImbalance, ColorImbalance };
const char* variant_name(CmnistVariant v);
CmnistVariant variant_from_name(const std::string& name);

struct CmnistSpec {
  // P(color bit != label) per environment; the last entry is the test env.
  std::vector<double> env_color_probs = {0.2, 0.1, 0.9};
  double label_noise = 0.25;  // Table-3 optimum of 75 pins this
  CmnistVariant variant = CmnistVariant::Standard;
  double p = 0.5;
  bool grayscale = false;  // control: both channels filled, color uninformative
  Index train_per_env = 0;  // 0 = use the full pool split
  Index test_n = 0;
};

Matrix mean_pool_2x2(const Matrix& images784);

// One colored environment from raw images/digits: binarize (digit >= 5),
// flip the label with prob label_noise, set the color bit to the label
// flipped with prob color_flip_prob, and write the pooled image into the
// channel the color selects.
EnvDataset make_cmnist_environment(const Matrix& images784, const std::vector<int>& digits,
                                   double color_flip_prob, double label_noise, bool grayscale,
                                   std::uint64_t seed, const std::string& env_id);

// Full construction: the last 10k examples form the test pool, the rest are
// split round-robin across the train environments without reuse. Applies
// the covariate-shift variant when the spec selects one.
std::vector<EnvDataset> build_cmnist(const MnistData& mnist, const CmnistSpec& spec,
                                     std::uint64_t seed);

// Covariate-shift variants over already-colored environments. Imbalance p
// goes to the first train env and 1-p to the second; the test env receives
// only the structural transformation (digit removal / channel expansion).
std::vector<EnvDataset> apply_variant(const std::vector<EnvDataset>& envs, CmnistVariant variant,
                                      double p, std::uint64_t seed);

struct GridPoint {
  double prob_y0_red = 0.0;
  double accuracy = 0.0;
  double risk = 0.0;
};

// Evaluation environments sweeping P(Y=0 | color=red); each is built from
// the test pool with color flip probability 1 - prob.
std::vector<GridPoint> eval_color_grid(const Predictor& p, const std::vector<double>& probs,
                                       const MnistData& mnist, const CmnistSpec& base,
                                       std::uint64_t seed);

// Dataset cache: header.json plus one flat binary of 64-bit floats.
void save_env_cache(const std::vector<EnvDataset>& envs, const std::string& dir);
std::vector<EnvDataset> load_env_cache(const std::string& dir);

}  // namespace rex
