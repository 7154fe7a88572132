#pragma once

#include "spectrum_xai/common.hpp"

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace spectrum_xai::cluster {

enum class KmeansInit { random_points, kmeans_pp };

struct KmeansOptions {
  std::size_t k = 24;
  std::uint64_t seed = 0;
  std::size_t max_iter = 300;
  double tol = 1e-6;  // stop once every centroid moves less than this
  KmeansInit init = KmeansInit::random_points;
  std::size_t restarts = 1;  // best-inertia run is kept
};

struct KmeansModel {
  std::size_t k = 0;
  Matrix centroids;  // k x n
  double inertia = 0.0;
  std::size_t iterations_run = 0;
  std::uint64_t seed = 0;
  // Inertia after every assignment step of the kept run; non-increasing.
  std::vector<double> inertia_trace;
};

struct KmeansResult {
  KmeansModel model;
  std::vector<int> labels;
};

KmeansResult kmeans_fit(const Matrix& x, const KmeansOptions& opts);

// argmin squared distance, ties to the lowest index.
int assign(const KmeansModel& model, std::span<const double> x);

// Normalized mutual information, arithmetic-mean normalisation.
double nmi(std::span<const int> a, std::span<const int> b);

void save_kmeans(const KmeansModel& model, std::ostream& os);
KmeansModel load_kmeans(std::istream& is);
void save_kmeans(const KmeansModel& model, const std::string& path);
KmeansModel load_kmeans(const std::string& path);

std::string centroids_csv(const KmeansModel& model);
std::string labels_csv(std::span<const int> labels);
std::vector<int> read_labels_csv(const std::string& path);

}  // namespace spectrum_xai::cluster
