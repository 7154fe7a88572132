#pragma once

#include "spectrum_xai/common.hpp"

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace spectrum_xai::tree {

// Internal nodes send x[feature] <= threshold to `left`. Every node carries
// the sample and mistake counts of its region; for an internal node the
// mistakes are the sum over the leaves below it.
struct Node {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  int label = -1;  // leaves only
  std::size_t samples = 0;
  std::size_t mistakes = 0;

  bool is_leaf() const { return feature < 0; }
  bool operator==(const Node&) const = default;
};

struct ShallowTree {
  std::vector<Node> nodes;  // root at index 0, children after their parent
  std::size_t n_features = 0;
  std::size_t k = 0;
  double lambda = 0.0;

  std::size_t depth() const;
  std::size_t leaf_count() const;
  // Same features, children and leaf labels; thresholds equal within tol.
  bool same_structure(const ShallowTree& other, double tol = 0.0, bool compare_labels = true) const;
  bool operator==(const ShallowTree&) const = default;
};

// Greedy top-down builder minimising mistakes/N + lambda*depth until k
// leaves exist, then one distinct label per leaf by optimal matching.
ShallowTree build_tree(const Matrix& x, std::span<const int> labels, std::size_t k, double lambda = 0.03);

int infer(const ShallowTree& tree, std::span<const double> x);

// Index of the leaf node reached by x.
std::size_t leaf_of(const ShallowTree& tree, std::span<const double> x);

struct LeafStats {
  std::size_t node = 0;
  int label = -1;
  std::size_t samples = 0;
  std::size_t mistakes = 0;
};

struct Fidelity {
  double agreement = 0.0;
  std::vector<LeafStats> leaves;  // in node order
};

Fidelity fidelity(const ShallowTree& tree, const Matrix& x, std::span<const int> labels);

struct PathStep {
  std::size_t feature = 0;
  double threshold = 0.0;
  bool went_left = true;
};

// Root-to-leaf decisions for the leaf carrying `label`.
std::vector<PathStep> leaf_path(const ShallowTree& tree, int label);

std::string to_json(const ShallowTree& tree);
ShallowTree from_json(const std::string& text);
std::string to_text(const ShallowTree& tree);
std::string leaf_stats_csv(const ShallowTree& tree);

// Hungarian assignment on a square cost matrix; result[row] = column.
std::vector<std::size_t> min_cost_assignment(const std::vector<std::vector<double>>& cost);

}  // namespace spectrum_xai::tree
