#include "spectrum_xai/shallow_tree.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace spectrum_xai::tree {

namespace {

using json = nlohmann::ordered_json;

constexpr int kSchemaVersion = 1;

struct Candidate {
  bool valid = false;
  std::size_t mistakes = 0;  // left + right after the split
  std::size_t depth_bound = 0;  // levels still needed below the split: ceil(log2 distinct labels), larger child
  double purity = 0.0;          // sum_c n_lc^2 / n_l + sum_c n_rc^2 / n_r, i.e. N minus the weighted Gini
  std::size_t feature = 0;
  double threshold = 0.0;
};

struct Region {
  std::vector<std::size_t> idx;
  int node = 0;
  std::size_t depth = 0;
  std::size_t mistakes = 0;
  Candidate best;
};

std::size_t majority_mistakes(const std::vector<std::size_t>& counts, std::size_t total) {
  return total - *std::max_element(counts.begin(), counts.end());
}

std::vector<std::size_t> label_counts(const Region& r, std::span<const int> labels, std::size_t k) {
  std::vector<std::size_t> c(k, 0);
  for (std::size_t i : r.idx) ++c[static_cast<std::size_t>(labels[i])];
  return c;
}

std::size_t levels_for(std::size_t labels) {
  std::size_t d = 0;
  while ((std::size_t{1} << d) < labels) ++d;
  return d;
}

// Majority mistakes are flat across many splits of a balanced multi-label
// region (peeling one label off ties with halving). Equal-mistake candidates
// are ranked by the depth their children still need, then by Gini purity,
// before the feature and threshold tie-breaks.
bool better_split(const Candidate& c, const Candidate& best) {
  if (!best.valid) return true;
  if (c.mistakes != best.mistakes) return c.mistakes < best.mistakes;
  if (c.depth_bound != best.depth_bound) return c.depth_bound < best.depth_bound;
  return c.purity > best.purity;
}

// Best split of one region per feature, reduced in feature order. Within a
// feature the sweep runs over ascending thresholds and keeps the first optimum.
Candidate best_split(const Region& r, const Matrix& x, std::span<const int> labels, std::size_t k) {
  const std::size_t n = r.idx.size();
  std::vector<Candidate> per_feature(x.cols);
  if (n < 2) return {};
  const std::vector<std::size_t> total = label_counts(r, labels, k);
  parallel_for(x.cols, [&](std::size_t f) {
    std::vector<std::size_t> order = r.idx;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const double va = x(a, f), vb = x(b, f);
      return va < vb || (va == vb && a < b);
    });
    std::vector<std::size_t> left(k, 0);
    std::vector<std::size_t> right = total;
    std::size_t left_max = 0;
    std::size_t left_distinct = 0;
    auto right_distinct = static_cast<std::size_t>(std::count_if(total.begin(), total.end(), [](std::size_t c) { return c > 0; }));
    std::uint64_t left_sq = 0, right_sq = 0;
    for (std::size_t c : total) right_sq += static_cast<std::uint64_t>(c) * c;
    Candidate best;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      const auto lab = static_cast<std::size_t>(labels[order[i]]);
      left_sq += 2 * static_cast<std::uint64_t>(left[lab]) + 1;
      right_sq -= 2 * static_cast<std::uint64_t>(right[lab]) - 1;
      if (left[lab] == 0) ++left_distinct;
      if (right[lab] == 1) --right_distinct;
      left_max = std::max(left_max, ++left[lab]);
      --right[lab];
      const double a = x(order[i], f);
      const double b = x(order[i + 1], f);
      if (!(a < b)) continue;
      const std::size_t right_max = *std::max_element(right.begin(), right.end());
      const std::size_t m = (i + 1 - left_max) + (n - i - 1 - right_max);
      const double purity = static_cast<double>(left_sq) / static_cast<double>(i + 1) +
                            static_cast<double>(right_sq) / static_cast<double>(n - i - 1);
      const Candidate c{true, m, levels_for(std::max(left_distinct, right_distinct)), purity, f, 0.0};
      if (better_split(c, best)) {
        best = c;
        best.threshold = a + (b - a) / 2.0;
        if (!(best.threshold < b)) best.threshold = a;  // adjacent doubles
      }
    }
    per_feature[f] = best;
  });
  Candidate out;
  for (const Candidate& c : per_feature) {
    if (c.valid && better_split(c, out)) out = c;
  }
  return out;
}

void fill_internal_counts(ShallowTree& t) {
  for (std::size_t i = t.nodes.size(); i-- > 0;) {
    Node& nd = t.nodes[i];
    if (nd.is_leaf()) continue;
    const Node& l = t.nodes[static_cast<std::size_t>(nd.left)];
    const Node& r = t.nodes[static_cast<std::size_t>(nd.right)];
    nd.samples = l.samples + r.samples;
    nd.mistakes = l.mistakes + r.mistakes;
  }
}

json node_to_json(const ShallowTree& t, std::size_t i) {
  const Node& nd = t.nodes[i];
  json j;
  j["id"] = i;
  if (nd.is_leaf()) {
    j["type"] = "leaf";
    j["label"] = nd.label;
  } else {
    j["type"] = "split";
    j["feature"] = nd.feature;
    j["threshold"] = nd.threshold;
  }
  j["samples"] = nd.samples;
  j["mistakes"] = nd.mistakes;
  if (!nd.is_leaf()) {
    j["left"] = node_to_json(t, static_cast<std::size_t>(nd.left));
    j["right"] = node_to_json(t, static_cast<std::size_t>(nd.right));
  }
  return j;
}

int node_from_json(const json& j, std::vector<Node>& nodes, std::vector<char>& seen) {
  const auto id = j.at("id").get<std::size_t>();
  if (id >= nodes.size() || seen[id]) throw StructuralError("tree json: bad or repeated node id " + std::to_string(id));
  seen[id] = 1;
  Node nd;
  const auto type = j.at("type").get<std::string>();
  nd.samples = j.at("samples").get<std::size_t>();
  nd.mistakes = j.at("mistakes").get<std::size_t>();
  if (type == "leaf") {
    nd.label = j.at("label").get<int>();
  } else if (type == "split") {
    nd.feature = j.at("feature").get<int>();
    nd.threshold = j.at("threshold").get<double>();
    nd.left = node_from_json(j.at("left"), nodes, seen);
    nd.right = node_from_json(j.at("right"), nodes, seen);
  } else {
    throw StructuralError("tree json: unknown node type '" + type + "'");
  }
  nodes[id] = nd;
  return static_cast<int>(id);
}

std::size_t count_nodes(const json& j) {
  if (j.at("type") == "leaf") return 1;
  return 1 + count_nodes(j.at("left")) + count_nodes(j.at("right"));
}

void render(const ShallowTree& t, std::size_t i, std::size_t indent, const char* edge, std::ostringstream& os) {
  const Node& nd = t.nodes[i];
  os << std::string(indent * 2, ' ') << edge;
  if (nd.is_leaf()) {
    os << "leaf cluster=" << nd.label << " samples=" << nd.samples << " mistakes=" << nd.mistakes << '\n';
    return;
  }
  os << "x[" << nd.feature << "] <= " << format_double(nd.threshold) << " samples=" << nd.samples
     << " mistakes=" << nd.mistakes << '\n';
  render(t, static_cast<std::size_t>(nd.left), indent + 1, "yes: ", os);
  render(t, static_cast<std::size_t>(nd.right), indent + 1, "no:  ", os);
}

}  // namespace

std::size_t ShallowTree::depth() const {
  std::vector<std::size_t> d(nodes.size(), 0);
  std::size_t out = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    out = std::max(out, d[i]);
    if (!nodes[i].is_leaf()) {
      d[static_cast<std::size_t>(nodes[i].left)] = d[i] + 1;
      d[static_cast<std::size_t>(nodes[i].right)] = d[i] + 1;
    }
  }
  return out;
}

std::size_t ShallowTree::leaf_count() const {
  return static_cast<std::size_t>(std::count_if(nodes.begin(), nodes.end(), [](const Node& n) { return n.is_leaf(); }));
}

bool ShallowTree::same_structure(const ShallowTree& other, double tol, bool compare_labels) const {
  if (nodes.size() != other.nodes.size()) return false;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Node& a = nodes[i];
    const Node& b = other.nodes[i];
    if (a.feature != b.feature || a.left != b.left || a.right != b.right) return false;
    if (!a.is_leaf() && !(std::abs(a.threshold - b.threshold) <= tol)) return false;
    if (compare_labels && a.label != b.label) return false;
  }
  return true;
}

std::vector<std::size_t> min_cost_assignment(const std::vector<std::vector<double>>& cost) {
  // Shortest augmenting path with potentials, 1-based internally.
  const std::size_t n = cost.size();
  for (const auto& row : cost) {
    if (row.size() != n) throw StructuralError("min_cost_assignment: cost matrix is not square");
  }
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> out(n, 0);
  for (std::size_t j = 1; j <= n; ++j) {
    if (p[j] != 0) out[p[j] - 1] = j - 1;
  }
  return out;
}

ShallowTree build_tree(const Matrix& x, std::span<const int> labels, std::size_t k, double lambda) {
  if (x.rows != labels.size()) throw StructuralError("build_tree: X and labels differ in length");
  if (k < 1) throw InvalidConfig("build_tree: k must be positive");
  if (x.rows < k) throw InvalidConfig("build_tree: fewer samples than clusters");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw InvalidConfig("build_tree: lambda must be finite and >= 0");
  require_finite(x.data, "build_tree input");
  std::vector<char> present(k, 0);
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= k) {
      throw InvalidConfig("build_tree: label " + std::to_string(l) + " outside [0, " + std::to_string(k) + ")");
    }
    present[static_cast<std::size_t>(l)] = 1;
  }
  const auto distinct = static_cast<std::size_t>(std::count(present.begin(), present.end(), 1));
  if (distinct < k) {
    throw InvalidConfig("build_tree: labels contain " + std::to_string(distinct) + " distinct values, need " +
                        std::to_string(k));
  }

  ShallowTree t;
  t.n_features = x.cols;
  t.k = k;
  t.lambda = lambda;
  t.nodes.emplace_back();
  const double n_total = static_cast<double>(x.rows);

  std::vector<Region> regions(1);
  regions[0].idx.resize(x.rows);
  std::iota(regions[0].idx.begin(), regions[0].idx.end(), std::size_t{0});
  regions[0].mistakes = majority_mistakes(label_counts(regions[0], labels, k), x.rows);
  regions[0].best = best_split(regions[0], x, labels, k);
  std::size_t total_mistakes = regions[0].mistakes;
  std::size_t depth = 0;

  while (regions.size() < k) {
    // Mixed regions first; pure ones only when no mixed region can be split.
    std::size_t pick = regions.size();
    double pick_cost = 0.0;
    for (int pass = 0; pass < 2 && pick == regions.size(); ++pass) {
      for (std::size_t i = 0; i < regions.size(); ++i) {
        const Region& r = regions[i];
        if (!r.best.valid || (pass == 0 && r.mistakes == 0)) continue;
        const std::size_t m = total_mistakes - r.mistakes + r.best.mistakes;
        const double cost = static_cast<double>(m) / n_total + lambda * static_cast<double>(std::max(depth, r.depth + 1));
        bool better = pick == regions.size();
        if (!better) {
          const Region& p = regions[pick];
          if (cost != pick_cost) {
            better = cost < pick_cost;
          } else if (r.best.feature != p.best.feature) {
            better = r.best.feature < p.best.feature;
          } else if (r.best.threshold != p.best.threshold) {
            better = r.best.threshold < p.best.threshold;
          } else {
            better = r.node < p.node;
          }
        }
        if (better) {
          pick = i;
          pick_cost = cost;
        }
      }
    }
    if (pick == regions.size()) {
      throw StructuralError("build_tree: no admissible split left before reaching " + std::to_string(k) +
                            " leaves (duplicate feature vectors)");
    }

    Region parent = std::move(regions[pick]);
    Region left, right;
    left.depth = right.depth = parent.depth + 1;
    for (std::size_t i : parent.idx) {
      (x(i, parent.best.feature) <= parent.best.threshold ? left.idx : right.idx).push_back(i);
    }
    Node& pn = t.nodes[static_cast<std::size_t>(parent.node)];
    pn.feature = static_cast<int>(parent.best.feature);
    pn.threshold = parent.best.threshold;
    pn.left = static_cast<int>(t.nodes.size());
    pn.right = static_cast<int>(t.nodes.size() + 1);
    left.node = pn.left;
    right.node = pn.right;
    t.nodes.emplace_back();
    t.nodes.emplace_back();
    left.mistakes = majority_mistakes(label_counts(left, labels, k), left.idx.size());
    right.mistakes = majority_mistakes(label_counts(right, labels, k), right.idx.size());
    total_mistakes = total_mistakes - parent.mistakes + left.mistakes + right.mistakes;
    depth = std::max(depth, left.depth);
    left.best = best_split(left, x, labels, k);
    right.best = best_split(right, x, labels, k);
    regions[pick] = std::move(left);
    regions.push_back(std::move(right));
  }

  std::sort(regions.begin(), regions.end(), [](const Region& a, const Region& b) { return a.node < b.node; });
  std::vector<std::vector<std::size_t>> counts;
  std::vector<int> majority;
  std::vector<char> taken(k, 0);
  bool collision = false;
  for (const Region& r : regions) {
    counts.push_back(label_counts(r, labels, k));
    const auto& c = counts.back();
    const auto m = static_cast<std::size_t>(std::max_element(c.begin(), c.end()) - c.begin());
    majority.push_back(static_cast<int>(m));
    collision = collision || taken[m];
    taken[m] = 1;
  }
  if (collision) {
    std::vector<std::vector<double>> cost(k, std::vector<double>(k));
    for (std::size_t l = 0; l < k; ++l) {
      for (std::size_t c = 0; c < k; ++c) cost[l][c] = static_cast<double>(regions[l].idx.size() - counts[l][c]);
    }
    const auto assignment = min_cost_assignment(cost);
    for (std::size_t l = 0; l < k; ++l) majority[l] = static_cast<int>(assignment[l]);
  }
  for (std::size_t l = 0; l < k; ++l) {
    Node& nd = t.nodes[static_cast<std::size_t>(regions[l].node)];
    nd.label = majority[l];
    nd.samples = regions[l].idx.size();
    nd.mistakes = nd.samples - counts[l][static_cast<std::size_t>(majority[l])];
  }
  fill_internal_counts(t);
  return t;
}

std::size_t leaf_of(const ShallowTree& tree, std::span<const double> x) {
  if (x.size() != tree.n_features) {
    throw StructuralError("infer: input has " + std::to_string(x.size()) + " features, tree expects " +
                          std::to_string(tree.n_features));
  }
  if (tree.nodes.empty()) throw StateError("infer: empty tree");
  std::size_t i = 0;
  while (!tree.nodes[i].is_leaf()) {
    const Node& nd = tree.nodes[i];
    i = static_cast<std::size_t>(x[static_cast<std::size_t>(nd.feature)] <= nd.threshold ? nd.left : nd.right);
  }
  return i;
}

int infer(const ShallowTree& tree, std::span<const double> x) { return tree.nodes[leaf_of(tree, x)].label; }

Fidelity fidelity(const ShallowTree& tree, const Matrix& x, std::span<const int> labels) {
  if (x.rows != labels.size()) throw StructuralError("fidelity: X and labels differ in length");
  std::vector<std::size_t> samples(tree.nodes.size(), 0), mistakes(tree.nodes.size(), 0);
  std::size_t agree = 0;
  for (std::size_t r = 0; r < x.rows; ++r) {
    const std::size_t leaf = leaf_of(tree, x.row(r));
    ++samples[leaf];
    if (tree.nodes[leaf].label == labels[r]) {
      ++agree;
    } else {
      ++mistakes[leaf];
    }
  }
  Fidelity f;
  f.agreement = x.rows ? static_cast<double>(agree) / static_cast<double>(x.rows) : 0.0;
  for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
    if (tree.nodes[i].is_leaf()) f.leaves.push_back({i, tree.nodes[i].label, samples[i], mistakes[i]});
  }
  return f;
}

std::vector<PathStep> leaf_path(const ShallowTree& tree, int label) {
  std::vector<int> parent(tree.nodes.size(), -1);
  std::size_t leaf = tree.nodes.size();
  for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
    const Node& nd = tree.nodes[i];
    if (nd.is_leaf()) {
      if (nd.label == label) leaf = i;
    } else {
      parent[static_cast<std::size_t>(nd.left)] = static_cast<int>(i);
      parent[static_cast<std::size_t>(nd.right)] = static_cast<int>(i);
    }
  }
  if (leaf == tree.nodes.size()) throw InvalidConfig("leaf_path: no leaf carries label " + std::to_string(label));
  std::vector<PathStep> path;
  for (std::size_t cur = leaf; parent[cur] >= 0; cur = static_cast<std::size_t>(parent[cur])) {
    const Node& p = tree.nodes[static_cast<std::size_t>(parent[cur])];
    path.push_back({static_cast<std::size_t>(p.feature), p.threshold, p.left == static_cast<int>(cur)});
  }
  std::reverse(path.begin(), path.end());
  return path;
}

std::string to_json(const ShallowTree& tree) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["k"] = tree.k;
  j["n_features"] = tree.n_features;
  j["lambda"] = tree.lambda;
  j["depth"] = tree.depth();
  j["leaves"] = tree.leaf_count();
  j["root"] = node_to_json(tree, 0);
  return j.dump(2) + "\n";
}

ShallowTree from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("tree json: ") + e.what(), 0, e.byte);
  }
  try {
    if (j.at("schema_version").get<int>() != kSchemaVersion) throw StructuralError("tree json: unsupported schema_version");
    ShallowTree t;
    t.k = j.at("k").get<std::size_t>();
    t.n_features = j.at("n_features").get<std::size_t>();
    t.lambda = j.at("lambda").get<double>();
    const std::size_t n = count_nodes(j.at("root"));
    t.nodes.resize(n);
    std::vector<char> seen(n, 0);
    if (node_from_json(j.at("root"), t.nodes, seen) != 0) throw StructuralError("tree json: root id must be 0");
    for (const Node& nd : t.nodes) {
      if (!nd.is_leaf() && static_cast<std::size_t>(nd.feature) >= t.n_features) {
        throw StructuralError("tree json: feature index out of range");
      }
    }
    return t;
  } catch (const json::exception& e) {
    throw StructuralError(std::string("tree json: ") + e.what());
  }
}

std::string to_text(const ShallowTree& tree) {
  std::ostringstream os;
  os << "shallow tree: k=" << tree.k << " depth=" << tree.depth() << " lambda=" << format_double(tree.lambda) << '\n';
  if (!tree.nodes.empty()) render(tree, 0, 0, "", os);
  return os.str();
}

std::string leaf_stats_csv(const ShallowTree& tree) {
  std::ostringstream os;
  os << "node,cluster,samples,mistakes\n";
  for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
    const Node& nd = tree.nodes[i];
    if (nd.is_leaf()) os << i << ',' << nd.label << ',' << nd.samples << ',' << nd.mistakes << '\n';
  }
  return os.str();
}

}  // namespace spectrum_xai::tree
