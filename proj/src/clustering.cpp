#include "spectrum_xai/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace spectrum_xai::cluster {

namespace {

constexpr char kKmeansMagic[] = "SXAIKMN";
constexpr std::uint32_t kKmeansVersion = 1;

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

int nearest(const Matrix& centroids, std::span<const double> x, double* dist = nullptr) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.rows; ++c) {
    const double d = sq_dist(centroids.row(c), x);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  if (dist) *dist = best_d;
  return best;
}

Matrix init_centroids(const Matrix& x, std::size_t k, KmeansInit init, Rng& rng) {
  Matrix c(k, x.cols);
  if (init == KmeansInit::random_points) {
    const auto picks = rng.sample_without_replacement(x.rows, k);
    for (std::size_t i = 0; i < k; ++i) std::copy(x.row(picks[i]).begin(), x.row(picks[i]).end(), c.row(i).begin());
    return c;
  }
  std::vector<char> chosen(x.rows, 0);
  std::size_t first = rng.index(x.rows);
  chosen[first] = 1;
  std::copy(x.row(first).begin(), x.row(first).end(), c.row(0).begin());
  std::vector<double> d2(x.rows);
  for (std::size_t r = 0; r < x.rows; ++r) d2[r] = sq_dist(x.row(r), c.row(0));
  for (std::size_t i = 1; i < k; ++i) {
    double total = 0.0;
    for (double v : d2) total += v;
    std::size_t pick = 0;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      pick = x.rows - 1;
      for (std::size_t r = 0; r < x.rows; ++r) {
        acc += d2[r];
        if (acc > target && d2[r] > 0.0) {
          pick = r;
          break;
        }
      }
    } else {
      std::vector<std::size_t> free;
      for (std::size_t r = 0; r < x.rows; ++r) {
        if (!chosen[r]) free.push_back(r);
      }
      pick = free[rng.index(free.size())];
    }
    chosen[pick] = 1;
    std::copy(x.row(pick).begin(), x.row(pick).end(), c.row(i).begin());
    for (std::size_t r = 0; r < x.rows; ++r) d2[r] = std::min(d2[r], sq_dist(x.row(r), c.row(i)));
  }
  return c;
}

// Empty clusters take over the point farthest from its own centroid
// (drawn from clusters that keep at least one member).
void repair_empty(const Matrix& x, std::vector<int>& labels, Matrix& centroids) {
  const std::size_t k = centroids.rows;
  std::vector<std::size_t> counts(k, 0);
  for (int l : labels) ++counts[static_cast<std::size_t>(l)];
  for (std::size_t c = 0; c < k; ++c) {
    if (counts[c] != 0) continue;
    std::size_t far = x.rows;
    double far_d = -1.0;
    for (std::size_t r = 0; r < x.rows; ++r) {
      const auto owner = static_cast<std::size_t>(labels[r]);
      if (counts[owner] < 2) continue;
      const double d = sq_dist(x.row(r), centroids.row(owner));
      if (d > far_d) {
        far_d = d;
        far = r;
      }
    }
    if (far == x.rows) throw StateError("kmeans: cannot repair empty cluster");
    --counts[static_cast<std::size_t>(labels[far])];
    labels[far] = static_cast<int>(c);
    ++counts[c];
    std::copy(x.row(far).begin(), x.row(far).end(), centroids.row(c).begin());
  }
}

double inertia_of(const Matrix& x, const std::vector<int>& labels, const Matrix& centroids) {
  double s = 0.0;
  for (std::size_t r = 0; r < x.rows; ++r) s += sq_dist(x.row(r), centroids.row(static_cast<std::size_t>(labels[r])));
  return s;
}

std::vector<int> assign_all(const Matrix& x, const Matrix& centroids) {
  std::vector<int> labels(x.rows);
  parallel_for(x.rows, [&](std::size_t r) { labels[r] = nearest(centroids, x.row(r)); });
  return labels;
}

KmeansResult lloyd(const Matrix& x, const KmeansOptions& opts, std::uint64_t seed) {
  Rng rng(seed);
  KmeansResult res;
  KmeansModel& m = res.model;
  m.k = opts.k;
  m.seed = seed;
  m.centroids = init_centroids(x, opts.k, opts.init, rng);
  std::vector<int> labels = assign_all(x, m.centroids);
  repair_empty(x, labels, m.centroids);
  m.inertia_trace.push_back(inertia_of(x, labels, m.centroids));

  for (std::size_t it = 0; it < opts.max_iter; ++it) {
    Matrix next(opts.k, x.cols);
    std::vector<std::size_t> counts(opts.k, 0);
    for (std::size_t r = 0; r < x.rows; ++r) {
      const auto c = static_cast<std::size_t>(labels[r]);
      ++counts[c];
      auto dst = next.row(c);
      const auto src = x.row(r);
      for (std::size_t j = 0; j < x.cols; ++j) dst[j] += src[j];
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < opts.k; ++c) {
      for (double& v : next.row(c)) v /= static_cast<double>(counts[c]);
      shift = std::max(shift, std::sqrt(sq_dist(next.row(c), m.centroids.row(c))));
    }
    m.centroids = std::move(next);
    std::vector<int> updated = assign_all(x, m.centroids);
    repair_empty(x, updated, m.centroids);
    m.inertia_trace.push_back(inertia_of(x, updated, m.centroids));
    m.iterations_run = it + 1;
    const bool changed = updated != labels;
    labels = std::move(updated);
    if (!changed || shift < opts.tol) break;
  }
  m.inertia = m.inertia_trace.back();
  res.labels = std::move(labels);
  return res;
}

}  // namespace

KmeansResult kmeans_fit(const Matrix& x, const KmeansOptions& opts) {
  if (opts.k == 0) throw InvalidConfig("kmeans_fit: k must be positive");
  if (x.rows < opts.k) {
    throw InvalidConfig("kmeans_fit: " + std::to_string(x.rows) + " points is fewer than k=" + std::to_string(opts.k));
  }
  if (opts.restarts == 0) throw InvalidConfig("kmeans_fit: restarts must be positive");
  require_finite(x.data, "kmeans_fit input");
  KmeansResult best;
  bool have = false;
  for (std::size_t r = 0; r < opts.restarts; ++r) {
    const std::uint64_t seed = opts.restarts == 1 ? opts.seed : derive_seed(opts.seed, r);
    KmeansResult run = lloyd(x, opts, seed);
    if (!have || run.model.inertia < best.model.inertia) {
      best = std::move(run);
      have = true;
    }
  }
  best.model.seed = opts.seed;
  require_finite(best.model.centroids.data, "kmeans centroids");
  return best;
}

int assign(const KmeansModel& model, std::span<const double> x) {
  if (x.size() != model.centroids.cols) {
    throw StructuralError("assign: point has " + std::to_string(x.size()) + " dims, centroids have " +
                          std::to_string(model.centroids.cols));
  }
  return nearest(model.centroids, x);
}

double nmi(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw StructuralError("nmi: labelings differ in length");
  if (a.empty()) throw InvalidConfig("nmi: empty labelings");
  const double n = static_cast<double>(a.size());
  std::map<int, double> ca, cb;
  std::map<std::pair<int, int>, double> joint;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ca[a[i]] += 1.0;
    cb[b[i]] += 1.0;
    joint[{a[i], b[i]}] += 1.0;
  }
  auto entropy = [n](const std::map<int, double>& c) {
    double h = 0.0;
    for (const auto& [_, v] : c) h -= (v / n) * std::log(v / n);
    return h;
  };
  const double ha = entropy(ca);
  const double hb = entropy(cb);
  if (ha == 0.0 && hb == 0.0) return 1.0;
  double mi = 0.0;
  for (const auto& [key, v] : joint) {
    mi += (v / n) * std::log(n * v / (ca[key.first] * cb[key.second]));
  }
  const double denom = 0.5 * (ha + hb);
  return std::clamp(mi / denom, 0.0, 1.0);
}

void save_kmeans(const KmeansModel& model, std::ostream& os) {
  BinaryWriter w(os);
  w.bytes(std::string_view(kKmeansMagic, 8));
  w.u32(kKmeansVersion);
  w.u32(static_cast<std::uint32_t>(model.k));
  w.u32(static_cast<std::uint32_t>(model.centroids.cols));
  w.f64(model.inertia);
  w.u32(static_cast<std::uint32_t>(model.iterations_run));
  w.u64(model.seed);
  w.f64s(model.centroids.data);
}

KmeansModel load_kmeans(std::istream& is) {
  BinaryReader r(is);
  if (r.bytes(8) != std::string_view(kKmeansMagic, 8)) throw ParseError("load_kmeans: bad magic", 0, 0);
  if (r.u32() != kKmeansVersion) throw ParseError("load_kmeans: unsupported version", 0, 8);
  KmeansModel m;
  m.k = r.u32();
  const std::size_t dims = r.u32();
  m.inertia = r.f64();
  m.iterations_run = r.u32();
  m.seed = r.u64();
  m.centroids = Matrix(m.k, dims);
  m.centroids.data = r.f64s(m.k * dims);
  return m;
}

void save_kmeans(const KmeansModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  save_kmeans(model, out);
}

KmeansModel load_kmeans(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return load_kmeans(in);
}

std::string centroids_csv(const KmeansModel& model) {
  std::ostringstream os;
  os << "cluster";
  for (std::size_t j = 0; j < model.centroids.cols; ++j) os << ",f" << j;
  os << '\n';
  for (std::size_t c = 0; c < model.k; ++c) {
    os << c;
    for (double v : model.centroids.row(c)) os << ',' << format_double(v);
    os << '\n';
  }
  return os.str();
}

std::string labels_csv(std::span<const int> labels) {
  std::ostringstream os;
  os << "segment_id,label\n";
  for (std::size_t i = 0; i < labels.size(); ++i) os << i << ',' << labels[i] << '\n';
  return os.str();
}

std::vector<int> read_labels_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  std::vector<int> labels;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 || line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ParseError("read_labels_csv: missing ',' in " + path, line_no, 0);
    const std::size_t id = std::stoull(line.substr(0, comma));
    if (id != labels.size()) throw ParseError("read_labels_csv: non-sequential segment id", line_no, 0);
    labels.push_back(std::stoi(line.substr(comma + 1)));
  }
  return labels;
}

}  // namespace spectrum_xai::cluster
