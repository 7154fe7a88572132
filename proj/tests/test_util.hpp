#pragma once

// Seeded generators for the property tests. Each property loops over a
// fixed seed range and reports the failing seed through SCOPED_TRACE.

#include "spectrum_xai/common.hpp"
#include "spectrum_xai/nn.hpp"
#include "spectrum_xai/spectrum_data.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace testutil {

using spectrum_xai::Matrix;
using spectrum_xai::Rng;

inline constexpr std::uint64_t kPropertyRuns = 40;

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Matrix m(rows, cols);
  for (double& v : m.data) v = rng.uniform(lo, hi);
  return m;
}

inline std::vector<std::vector<double>> to_rows(const Matrix& m) {
  std::vector<std::vector<double>> out;
  for (std::size_t r = 0; r < m.rows; ++r) out.emplace_back(m.row(r).begin(), m.row(r).end());
  return out;
}

// Isotropic Gaussian blobs; labels[i] is the generating centre.
struct Blobs {
  Matrix x;
  std::vector<int> labels;
};

inline Blobs blobs(const std::vector<std::vector<double>>& centres, std::size_t per, double sigma, std::uint64_t seed) {
  Rng rng(seed);
  Blobs b;
  b.x = Matrix(centres.size() * per, centres.front().size());
  std::size_t r = 0;
  for (std::size_t c = 0; c < centres.size(); ++c) {
    for (std::size_t i = 0; i < per; ++i, ++r) {
      for (std::size_t j = 0; j < centres[c].size(); ++j) b.x(r, j) = rng.normal(centres[c][j], sigma);
      b.labels.push_back(static_cast<int>(c));
    }
  }
  return b;
}

inline spectrum_xai::nn::Conv2d conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, std::size_t pad) {
  return {in, out, k, stride, pad, std::vector<double>(out * in * k * k, 0.0), std::vector<double>(out, 0.0)};
}

inline spectrum_xai::nn::Linear linear(std::size_t in, std::size_t out) {
  return {in, out, std::vector<double>(in * out, 0.0), std::vector<double>(out, 0.0)};
}

// Conv(1->2, k3, pad1) -> ReLU -> MaxPool2 -> Flatten -> Linear -> ReLU -> Linear(k).
inline spectrum_xai::nn::CnnModel tiny_cnn(std::size_t side, std::size_t k, std::uint64_t seed) {
  namespace nn = spectrum_xai::nn;
  std::vector<nn::Layer> layers;
  layers.push_back(conv(1, 2, 3, 1, 1));
  layers.push_back(nn::Relu{});
  layers.push_back(nn::MaxPool2d{2, 2});
  layers.push_back(nn::Flatten{});
  const std::size_t flat = 2 * (side / 2) * (side / 2);
  layers.push_back(linear(flat, 6));
  layers.push_back(nn::Relu{});
  layers.push_back(linear(6, k));
  nn::CnnModel m(nn::Shape{1, side, side}, std::move(layers), 4);
  m.init_uniform(seed);
  return m;
}

inline std::vector<std::vector<double>> random_inputs(std::size_t count, std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<double>> out(count, std::vector<double>(size));
  for (auto& v : out) {
    for (double& x : v) x = rng.uniform(0.0, 1.0);
  }
  return out;
}

inline spectrum_xai::nn::Tensor to_batch(const std::vector<std::vector<double>>& inputs, const spectrum_xai::nn::Shape& s) {
  spectrum_xai::nn::Tensor t({inputs.size(), s.c, s.h, s.w});
  for (std::size_t b = 0; b < inputs.size(); ++b) std::copy(inputs[b].begin(), inputs[b].end(), t.data.begin() + b * s.size());
  return t;
}

// Fresh scratch directory under the build tree, removed at destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(std::filesystem::temp_directory_path() / ("sxai_test_" + name)) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::string str(const std::string& leaf = "") const { return leaf.empty() ? path_.string() : (path_ / leaf).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace testutil
