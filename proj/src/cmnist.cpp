#include "rex/cmnist.hpp"

#include "rex/loss.hpp"

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

namespace rex {

namespace {

std::uint32_t read_be32(const std::uint8_t* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

}  // namespace

IdxFile parse_idx(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8) throw std::invalid_argument("parse_idx: fewer than 8 bytes");
  IdxFile f;
  f.magic = read_be32(bytes.data());
  if (f.magic != 2049 && f.magic != 2051) {
    std::ostringstream os;
    os << "parse_idx: bad magic " << f.magic << " (expected 2049 or 2051)";
    throw std::invalid_argument(os.str());
  }
  const std::size_t ndims = f.magic & 0xFF;  // low byte of the magic
  if (bytes.size() < 4 + 4 * ndims) throw std::invalid_argument("parse_idx: truncated header");
  std::size_t expect = 1;
  for (std::size_t d = 0; d < ndims; ++d) {
    f.dims.push_back(read_be32(bytes.data() + 4 + 4 * d));
    expect *= f.dims.back();
  }
  const std::size_t have = bytes.size() - 4 - 4 * ndims;
  if (have != expect) {
    std::ostringstream os;
    os << "parse_idx: payload has " << have << " bytes, dims require " << expect;
    throw std::invalid_argument(os.str());
  }
  f.payload.assign(bytes.begin() + 4 + 4 * ndims, bytes.end());
  return f;
}

IdxFile load_idx(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_idx: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return parse_idx(bytes);
}

MnistData mnist_from_idx(const IdxFile& images, const IdxFile& labels) {
  if (images.magic != 2051) throw std::invalid_argument("mnist_from_idx: not an image file");
  if (labels.magic != 2049) throw std::invalid_argument("mnist_from_idx: not a label file");
  if (images.dims.size() != 3 || images.dims[1] != 28 || images.dims[2] != 28)
    throw std::invalid_argument("mnist_from_idx: expected n x 28 x 28 images");
  if (labels.dims[0] != images.dims[0])
    throw DimensionError("mnist_from_idx: image/label counts differ");
  const Index n = static_cast<Index>(images.dims[0]);
  MnistData data;
  data.images.resize(n, 784);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < 784; ++j)
      data.images(i, j) = images.payload[static_cast<std::size_t>(i) * 784 + j] / 255.0;
  data.labels.assign(labels.payload.begin(), labels.payload.end());
  return data;
}

MnistData load_mnist_pair(const std::string& images_path, const std::string& labels_path) {
  return mnist_from_idx(load_idx(images_path), load_idx(labels_path));
}

std::array<MnistFileInfo, 4> canonical_mnist_files() {
  return {{{"train-images-idx3-ubyte", 47040016},
           {"train-labels-idx1-ubyte", 60008},
           {"t10k-images-idx3-ubyte", 7840016},
           {"t10k-labels-idx1-ubyte", 10008}}};
}

std::string verify_mnist_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  for (const auto& info : canonical_mnist_files()) {
    const fs::path path = fs::path(dir) / info.name;
    std::error_code ec;
    if (!fs::exists(path, ec)) return "missing " + path.string();
    const auto size = fs::file_size(path, ec);
    if (ec) return "cannot stat " + path.string();
    if (size != info.bytes) {
      std::ostringstream os;
      os << path.string() << " has " << size << " bytes, expected " << info.bytes
         << " (decompressed IDX)";
      return os.str();
    }
    try {
      load_idx(path.string());
    } catch (const std::exception& e) {
      return path.string() + ": " + e.what();
    }
  }
  return "";
}

const char* variant_name(CmnistVariant v) {
  switch (v) {
    case CmnistVariant::Standard: return "standard";
    case CmnistVariant::ClassImbalance: return "class";
    case CmnistVariant::DigitImbalance: return "digit";
    case CmnistVariant::ColorImbalance: return "color";
  }
  return "?";
}

CmnistVariant variant_from_name(const std::string& name) {
  if (name == "standard") return CmnistVariant::Standard;
  if (name == "class") return CmnistVariant::ClassImbalance;
  if (name == "digit") return CmnistVariant::DigitImbalance;
  if (name == "color") return CmnistVariant::ColorImbalance;
  throw std::invalid_argument("unknown CMNIST variant: " + name);
}

Matrix mean_pool_2x2(const Matrix& images784) {
  if (images784.cols() != 784) throw DimensionError("mean_pool_2x2: expects n x 784");
  Matrix out(images784.rows(), 196);
  for (Index i = 0; i < images784.rows(); ++i)
    for (Index r = 0; r < 14; ++r)
      for (Index c = 0; c < 14; ++c) {
        const Index r0 = 2 * r, c0 = 2 * c;
        out(i, r * 14 + c) = (images784(i, r0 * 28 + c0) + images784(i, r0 * 28 + c0 + 1) +
                              images784(i, (r0 + 1) * 28 + c0) +
                              images784(i, (r0 + 1) * 28 + c0 + 1)) /
                             4.0;
      }
  return out;
}

EnvDataset make_cmnist_environment(const Matrix& images784, const std::vector<int>& digits,
                                   double color_flip_prob, double label_noise, bool grayscale,
                                   std::uint64_t seed, const std::string& env_id) {
  if (images784.rows() == 0) throw EmptyDomainError("make_cmnist_environment: no examples");
  if (static_cast<Index>(digits.size()) != images784.rows())
    throw DimensionError("make_cmnist_environment: image/label counts differ");
  if (color_flip_prob < 0.0 || color_flip_prob > 1.0 || label_noise < 0.0 || label_noise > 1.0)
    throw std::invalid_argument("make_cmnist_environment: probabilities must be in [0,1]");

  const Matrix pooled = mean_pool_2x2(images784);
  const Index n = pooled.rows();
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution flip_label(label_noise);
  std::bernoulli_distribution flip_color(color_flip_prob);

  EnvDataset env;
  env.x = Matrix::Zero(n, 392);
  env.y = Matrix(n, 1);
  env.env_id = env_id;
  env.shape_labels = digits;
  for (Index i = 0; i < n; ++i) {
    const int base = digits[static_cast<std::size_t>(i)] >= 5 ? 1 : 0;
    const int label = flip_label(rng) ? 1 - base : base;
    const int green = flip_color(rng) ? 1 - label : label;
    env.y(i, 0) = label;
    if (grayscale) {
      env.x.block(i, 0, 1, 196) = pooled.row(i);
      env.x.block(i, 196, 1, 196) = pooled.row(i);
    } else {
      env.x.block(i, green ? 196 : 0, 1, 196) = pooled.row(i);
    }
  }
  env.meta["color_flip_prob"] = color_flip_prob;
  env.meta["label_noise"] = label_noise;
  env.meta["grayscale"] = grayscale ? 1.0 : 0.0;
  env.meta["n"] = static_cast<double>(n);
  return env;
}

std::vector<EnvDataset> build_cmnist(const MnistData& mnist, const CmnistSpec& spec,
                                     std::uint64_t seed) {
  const Index n_envs = static_cast<Index>(spec.env_color_probs.size());
  if (n_envs < 2)
    throw std::invalid_argument("build_cmnist: needs at least one train and one test env");
  const Index n = mnist.images.rows();
  if (n < n_envs) throw std::invalid_argument("build_cmnist: not enough examples");
  const Index test_pool = std::min<Index>(10000, n / 6);
  const Index train_pool = n - test_pool;
  const Index n_train_envs = n_envs - 1;

  std::vector<std::vector<Index>> rows(n_envs);
  for (Index i = 0; i < train_pool; ++i) rows[i % n_train_envs].push_back(i);
  for (Index i = train_pool; i < n; ++i) rows[n_train_envs].push_back(i);
  if (spec.train_per_env > 0)
    for (Index e = 0; e < n_train_envs; ++e)
      if (static_cast<Index>(rows[e].size()) > spec.train_per_env)
        rows[e].resize(spec.train_per_env);
  if (spec.test_n > 0 && static_cast<Index>(rows[n_train_envs].size()) > spec.test_n)
    rows[n_train_envs].resize(spec.test_n);

  std::vector<EnvDataset> envs;
  for (Index e = 0; e < n_envs; ++e) {
    const auto& idx = rows[e];
    Matrix images(static_cast<Index>(idx.size()), 784);
    std::vector<int> digits(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      images.row(static_cast<Index>(k)) = mnist.images.row(idx[k]);
      digits[k] = mnist.labels[static_cast<std::size_t>(idx[k])];
    }
    const bool is_test = e == n_train_envs;
    EnvDataset env = make_cmnist_environment(
        images, digits, spec.env_color_probs[static_cast<std::size_t>(e)], spec.label_noise,
        spec.grayscale, seed + 7919 * static_cast<std::uint64_t>(e + 1),
        is_test ? "test" : "train" + std::to_string(e));
    env.meta["is_test"] = is_test ? 1.0 : 0.0;
    envs.push_back(std::move(env));
  }
  if (spec.variant != CmnistVariant::Standard)
    return apply_variant(envs, spec.variant, spec.p, seed ^ 0x9e3779b97f4a7c15ULL);
  return envs;
}

namespace {

// Largest subsample with group-A fraction p, keeping the original row order.
std::vector<Index> imbalance_rows(const std::vector<Index>& group_a,
                                  const std::vector<Index>& group_b, double p,
                                  std::mt19937_64& rng) {
  const auto na = static_cast<double>(group_a.size());
  const auto nb = static_cast<double>(group_b.size());
  std::size_t ka = 0, kb = 0;
  if (p <= 0.0) {
    kb = group_b.size();
  } else if (p >= 1.0) {
    ka = group_a.size();
  } else {
    const double total = std::min(na / p, nb / (1.0 - p));
    ka = static_cast<std::size_t>(std::llround(p * total));
    kb = static_cast<std::size_t>(std::llround((1.0 - p) * total));
    ka = std::min(ka, group_a.size());
    kb = std::min(kb, group_b.size());
  }
  std::vector<Index> a = group_a, b = group_b;
  std::shuffle(a.begin(), a.end(), rng);
  std::shuffle(b.begin(), b.end(), rng);
  a.resize(ka);
  b.resize(kb);
  std::vector<Index> keep;
  keep.reserve(ka + kb);
  keep.insert(keep.end(), a.begin(), a.end());
  keep.insert(keep.end(), b.begin(), b.end());
  std::sort(keep.begin(), keep.end());
  return keep;
}

EnvDataset select_rows(const EnvDataset& env, const std::vector<Index>& keep) {
  if (keep.empty()) throw EmptyDomainError("apply_variant: empty group after filtering");
  EnvDataset out;
  out.x.resize(static_cast<Index>(keep.size()), env.x.cols());
  out.y.resize(static_cast<Index>(keep.size()), 1);
  out.env_id = env.env_id;
  out.meta = env.meta;
  out.shape_labels.reserve(keep.size());
  for (std::size_t k = 0; k < keep.size(); ++k) {
    out.x.row(static_cast<Index>(k)) = env.x.row(keep[k]);
    out.y(static_cast<Index>(k), 0) = env.y(keep[k], 0);
    out.shape_labels.push_back(env.shape_labels[static_cast<std::size_t>(keep[k])]);
  }
  out.meta["n"] = static_cast<double>(keep.size());
  return out;
}

EnvDataset expand_color_channels(const EnvDataset& env, double p_version1,
                                 std::mt19937_64& rng) {
  if (env.x.cols() != 392)
    throw DimensionError("apply_variant: color imbalance expects 2-channel inputs");
  std::bernoulli_distribution pick_v1(p_version1);
  EnvDataset out;
  out.x = Matrix::Zero(env.rows(), 784);
  out.y = env.y;
  out.env_id = env.env_id;
  out.meta = env.meta;
  out.shape_labels = env.shape_labels;
  for (Index i = 0; i < env.rows(); ++i) {
    const bool green = env.x.row(i).head(196).cwiseAbs().sum() == 0.0;
    const bool v1 = pick_v1(rng);
    // Channel layout: R1, R2, G1, G2.
    const Index channel = green ? (v1 ? 2 : 3) : (v1 ? 0 : 1);
    out.x.block(i, channel * 196, 1, 196) = green ? env.x.row(i).tail(196) : env.x.row(i).head(196);
  }
  return out;
}

}  // namespace

std::vector<EnvDataset> apply_variant(const std::vector<EnvDataset>& envs, CmnistVariant variant,
                                      double p, std::uint64_t seed) {
  if (variant == CmnistVariant::Standard) return envs;
  if (p < 0.0 || p > 0.5) throw std::invalid_argument("apply_variant: p must be in [0, 0.5]");
  if (envs.size() < 3)
    throw std::invalid_argument("apply_variant: expects two train envs plus a test env");
  std::vector<EnvDataset> out;

  for (std::size_t e = 0; e < envs.size(); ++e) {
    std::mt19937_64 rng(seed + 31 * (e + 1));
    const bool is_test = e + 1 == envs.size();
    const EnvDataset& env = envs[e];
    if (env.shape_labels.size() != static_cast<std::size_t>(env.rows()))
      throw std::invalid_argument("apply_variant: envs lack per-example digits");

    if (variant == CmnistVariant::ColorImbalance) {
      const double pv = is_test ? 0.5 : (e == 0 ? p : 1.0 - p);
      out.push_back(expand_color_channels(env, pv, rng));
      out.back().meta["variant_p"] = p;
      continue;
    }

    std::vector<Index> group_a, group_b;
    for (Index i = 0; i < env.rows(); ++i) {
      const int digit = env.shape_labels[static_cast<std::size_t>(i)];
      if (variant == CmnistVariant::ClassImbalance) {
        (digit <= 4 ? group_a : group_b).push_back(i);
      } else {  // DigitImbalance: digits 0 and 5 are removed
        if (digit == 0 || digit == 5) continue;
        const bool in_a = digit == 1 || digit == 2 || digit == 6 || digit == 7;
        (in_a ? group_a : group_b).push_back(i);
      }
    }

    if (is_test) {
      if (variant == CmnistVariant::ClassImbalance) {
        out.push_back(env);  // untouched
      } else {
        std::vector<Index> keep = group_a;
        keep.insert(keep.end(), group_b.begin(), group_b.end());
        std::sort(keep.begin(), keep.end());
        out.push_back(select_rows(env, keep));  // digits removed, no rebalance
      }
    } else {
      const double pe = e == 0 ? p : 1.0 - p;
      out.push_back(select_rows(env, imbalance_rows(group_a, group_b, pe, rng)));
    }
    out.back().meta["variant_p"] = p;
  }
  return out;
}

std::vector<GridPoint> eval_color_grid(const Predictor& model, const std::vector<double>& probs,
                                       const MnistData& mnist, const CmnistSpec& base,
                                       std::uint64_t seed) {
  const Index n = mnist.images.rows();
  const Index pool = std::min<Index>(10000, n);
  Matrix images = mnist.images.bottomRows(pool);
  std::vector<int> digits(mnist.labels.end() - pool, mnist.labels.end());

  std::vector<GridPoint> grid;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    const double prob = probs[k];
    if (prob < 0.0 || prob > 1.0)
      throw std::invalid_argument("eval_color_grid: probabilities must be in [0,1]");
    // P(Y=0 | red) = 1 - color flip probability under balanced labels.
    const double e_flip = 1.0 - prob;
    EnvDataset env = make_cmnist_environment(images, digits, e_flip, base.label_noise,
                                             base.grayscale, seed + 127 * (k + 1),
                                             "grid" + std::to_string(k));
    if (base.variant == CmnistVariant::ColorImbalance ||
        base.variant == CmnistVariant::DigitImbalance) {
      // Match the structural transformation the model was trained on.
      std::vector<EnvDataset> shim = {env, env, env};
      env = apply_variant(shim, base.variant, 0.5, seed + 12289 * (k + 1)).back();
    }
    GridPoint pt;
    pt.prob_y0_red = prob;
    const Matrix logits = forward(model, env.x);
    pt.accuracy = accuracy_from_logits(logits, env.y);
    pt.risk = mean_loss(logits, env.y, LossKind::BinaryCrossEntropyWithLogits);
    grid.push_back(pt);
  }
  return grid;
}

void save_env_cache(const std::vector<EnvDataset>& envs, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json header;
  header["envs"] = nlohmann::json::array();
  std::ofstream data(fs::path(dir) / "data.bin", std::ios::binary);
  if (!data) throw std::runtime_error("save_env_cache: cannot open data.bin");
  for (const auto& env : envs) {
    nlohmann::json j;
    j["env_id"] = env.env_id;
    j["rows"] = env.rows();
    j["cols"] = env.cols();
    j["meta"] = env.meta;
    j["shape_labels"] = env.shape_labels;
    header["envs"].push_back(j);
    data.write(reinterpret_cast<const char*>(env.x.data()),
               static_cast<std::streamsize>(sizeof(double) * env.x.size()));
    data.write(reinterpret_cast<const char*>(env.y.data()),
               static_cast<std::streamsize>(sizeof(double) * env.y.size()));
  }
  std::ofstream hout(fs::path(dir) / "header.json");
  hout << header.dump(2) << "\n";
}

std::vector<EnvDataset> load_env_cache(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream hin(fs::path(dir) / "header.json");
  if (!hin) throw std::runtime_error("load_env_cache: missing header.json");
  nlohmann::json header;
  hin >> header;
  std::ifstream data(fs::path(dir) / "data.bin", std::ios::binary);
  if (!data) throw std::runtime_error("load_env_cache: missing data.bin");
  std::vector<EnvDataset> envs;
  for (const auto& j : header.at("envs")) {
    EnvDataset env;
    env.env_id = j.at("env_id").get<std::string>();
    const Index rows = j.at("rows").get<Index>();
    const Index cols = j.at("cols").get<Index>();
    env.meta = j.at("meta").get<std::map<std::string, double>>();
    env.shape_labels = j.at("shape_labels").get<std::vector<int>>();
    env.x.resize(rows, cols);
    env.y.resize(rows, 1);
    data.read(reinterpret_cast<char*>(env.x.data()),
              static_cast<std::streamsize>(sizeof(double) * env.x.size()));
    data.read(reinterpret_cast<char*>(env.y.data()),
              static_cast<std::streamsize>(sizeof(double) * env.y.size()));
    if (!data) throw std::runtime_error("load_env_cache: data.bin truncated");
    envs.push_back(std::move(env));
  }
  return envs;
}

}  // namespace rex
