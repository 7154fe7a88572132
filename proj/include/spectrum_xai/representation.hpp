#pragma once

#include "spectrum_xai/common.hpp"

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace spectrum_xai::repr {

// Rows of `components` are orthonormal and sorted by descending eigenvalue.
// evr[i] = eigenvalues[i] / total_variance, where total_variance sums every
// eigenvalue of the covariance (not only the retained ones).
struct PcaModel {
  std::vector<double> mean;
  Matrix components;  // n x D
  std::vector<double> eigenvalues;
  std::vector<double> evr;
  double total_variance = 0.0;
  bool whiten = false;

  std::size_t input_dim() const { return mean.size(); }
  std::size_t output_dim() const { return components.rows; }
};

PcaModel pca_fit(const Matrix& x, std::size_t n_components);

std::vector<double> pca_transform(const PcaModel& model, std::span<const double> x);
Matrix pca_transform(const PcaModel& model, const Matrix& x);

// Keeps the leading n components.
PcaModel pca_truncate(const PcaModel& model, std::size_t n);

// Smallest n with cumulative EVR >= threshold.
std::size_t select_dims(const PcaModel& model, double threshold);

std::vector<double> evr_cumsum(const PcaModel& model);
std::string evr_csv(const PcaModel& model);

void save_pca(const PcaModel& model, std::ostream& os);
PcaModel load_pca(std::istream& is);
void save_pca(const PcaModel& model, const std::string& path);
PcaModel load_pca(const std::string& path);

struct TsneConfig {
  double perplexity = 30.0;
  std::size_t iterations = 1000;
  double learning_rate = 200.0;
  double early_exaggeration = 12.0;
  std::size_t exaggeration_iters = 250;
  std::uint64_t seed = 0;
  std::size_t max_points = 5000;
};

struct TsneTrace {
  std::size_t every = 50;
  std::vector<std::pair<std::size_t, double>> kl;  // (iteration, KL(P||Q)) with unexaggerated P
};

// Exact O(N^2) t-SNE. Intended for verification plots, not for the pipeline.
Matrix tsne_embed(const Matrix& x, const TsneConfig& cfg, TsneTrace* trace = nullptr);

// Rows "id,x,y,cluster".
std::string embedding_csv(const Matrix& embedding, std::span<const int> clusters);

}  // namespace spectrum_xai::repr
