#include "spectrum_xai/representation.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace spectrum_xai::repr {

namespace {

constexpr char kPcaMagic[] = "SXAIPCA";
constexpr std::uint32_t kPcaVersion = 1;

}  // namespace

PcaModel pca_fit(const Matrix& x, std::size_t n_components) {
  const std::size_t n = x.rows;
  const std::size_t d = x.cols;
  if (n < 2) throw InvalidConfig("pca_fit: need at least 2 samples");
  if (d == 0) throw InvalidConfig("pca_fit: zero-dimensional input");
  if (n_components == 0 || n_components > std::min(n, d)) {
    throw InvalidConfig("pca_fit: n_components must be in [1, " + std::to_string(std::min(n, d)) + "]");
  }
  require_finite(x.data, "pca_fit input");

  PcaModel model;
  model.mean.assign(d, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = x.row(r);
    for (std::size_t c = 0; c < d; ++c) model.mean[c] += row[c];
  }
  for (double& m : model.mean) m /= static_cast<double>(n);

  // Upper triangle of the scatter matrix, accumulated row by row.
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  std::vector<double> centered(d);
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = x.row(r);
    for (std::size_t c = 0; c < d; ++c) centered[c] = row[c] - model.mean[c];
    for (std::size_t i = 0; i < d; ++i) {
      const double ci = centered[i];
      if (ci == 0.0) continue;
      for (std::size_t j = i; j < d; ++j) cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) += ci * centered[j];
    }
  }
  const double denom = static_cast<double>(n - 1);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i; j < d; ++j) {
      const auto ii = static_cast<Eigen::Index>(i);
      const auto jj = static_cast<Eigen::Index>(j);
      cov(ii, jj) /= denom;
      cov(jj, ii) = cov(ii, jj);
    }
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericError("pca_fit: eigendecomposition failed");
  const Eigen::VectorXd& values = solver.eigenvalues();  // ascending
  const Eigen::MatrixXd& vectors = solver.eigenvectors();

  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return values(static_cast<Eigen::Index>(a)) > values(static_cast<Eigen::Index>(b));
  });

  double total = 0.0;
  for (std::size_t i = 0; i < d; ++i) total += std::max(0.0, values(static_cast<Eigen::Index>(i)));
  model.total_variance = total;

  model.components = Matrix(n_components, d);
  model.eigenvalues.resize(n_components);
  model.evr.resize(n_components);
  for (std::size_t k = 0; k < n_components; ++k) {
    const auto col = static_cast<Eigen::Index>(order[k]);
    const double lambda = std::max(0.0, values(col));
    model.eigenvalues[k] = lambda;
    model.evr[k] = total > 0.0 ? lambda / total : 0.0;
    // Sign convention: the largest-magnitude entry is positive (first one on ties).
    std::size_t arg = 0;
    double best = -1.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double a = std::abs(vectors(static_cast<Eigen::Index>(j), col));
      if (a > best) {
        best = a;
        arg = j;
      }
    }
    const double sign = vectors(static_cast<Eigen::Index>(arg), col) < 0.0 ? -1.0 : 1.0;
    for (std::size_t j = 0; j < d; ++j) model.components(k, j) = sign * vectors(static_cast<Eigen::Index>(j), col);
  }
  return model;
}

std::vector<double> pca_transform(const PcaModel& model, std::span<const double> x) {
  const std::size_t d = model.input_dim();
  if (x.size() != d) {
    throw StructuralError("pca_transform: input has " + std::to_string(x.size()) + " dims, model expects " +
                          std::to_string(d));
  }
  std::vector<double> centered(d);
  for (std::size_t j = 0; j < d; ++j) centered[j] = x[j] - model.mean[j];
  std::vector<double> y(model.output_dim(), 0.0);
  for (std::size_t k = 0; k < y.size(); ++k) {
    const auto comp = model.components.row(k);
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += comp[j] * centered[j];
    if (model.whiten && model.eigenvalues[k] > 0.0) s /= std::sqrt(model.eigenvalues[k]);
    y[k] = s;
  }
  return y;
}

Matrix pca_transform(const PcaModel& model, const Matrix& x) {
  if (x.cols != model.input_dim()) {
    throw StructuralError("pca_transform: input has " + std::to_string(x.cols) + " dims, model expects " +
                          std::to_string(model.input_dim()));
  }
  Matrix out(x.rows, model.output_dim());
  for (std::size_t r = 0; r < x.rows; ++r) {
    const auto y = pca_transform(model, x.row(r));
    std::copy(y.begin(), y.end(), out.row(r).begin());
  }
  return out;
}

PcaModel pca_truncate(const PcaModel& model, std::size_t n) {
  if (n == 0 || n > model.output_dim()) throw InvalidConfig("pca_truncate: invalid component count");
  PcaModel out = model;
  out.components = Matrix(n, model.input_dim());
  std::copy(model.components.data.begin(),
            model.components.data.begin() + static_cast<std::ptrdiff_t>(n * model.input_dim()),
            out.components.data.begin());
  out.eigenvalues.resize(n);
  out.evr.resize(n);
  return out;
}

std::vector<double> evr_cumsum(const PcaModel& model) {
  std::vector<double> out(model.evr.size());
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    s += model.evr[i];
    out[i] = std::min(s, 1.0);
  }
  return out;
}

std::size_t select_dims(const PcaModel& model, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw InvalidConfig("select_dims: threshold must be in (0, 1]");
  const auto cum = evr_cumsum(model);
  constexpr double slack = 1e-12;
  for (std::size_t i = 0; i < cum.size(); ++i) {
    if (cum[i] >= threshold - slack) return i + 1;
  }
  const double achievable = cum.empty() ? 0.0 : cum.back();
  throw InvalidConfig("select_dims: threshold " + format_double(threshold) +
                      " exceeds the achievable cumulative EVR " + format_double(achievable));
}

std::string evr_csv(const PcaModel& model) {
  std::ostringstream os;
  os << "index,value\n";
  const auto cum = evr_cumsum(model);
  for (std::size_t i = 0; i < cum.size(); ++i) os << i << ',' << format_double(cum[i]) << '\n';
  return os.str();
}

void save_pca(const PcaModel& model, std::ostream& os) {
  BinaryWriter w(os);
  w.bytes(std::string_view(kPcaMagic, 8));
  w.u32(kPcaVersion);
  w.u32(static_cast<std::uint32_t>(model.input_dim()));
  w.u32(static_cast<std::uint32_t>(model.output_dim()));
  w.u8(model.whiten ? 1 : 0);
  w.f64(model.total_variance);
  w.f64s(model.mean);
  w.f64s(model.components.data);
  w.f64s(model.eigenvalues);
  w.f64s(model.evr);
}

PcaModel load_pca(std::istream& is) {
  BinaryReader r(is);
  if (r.bytes(8) != std::string_view(kPcaMagic, 8)) throw ParseError("load_pca: bad magic", 0, 0);
  if (r.u32() != kPcaVersion) throw ParseError("load_pca: unsupported version", 0, 8);
  PcaModel m;
  const std::size_t d = r.u32();
  const std::size_t n = r.u32();
  m.whiten = r.u8() != 0;
  m.total_variance = r.f64();
  m.mean = r.f64s(d);
  m.components = Matrix(n, d);
  m.components.data = r.f64s(n * d);
  m.eigenvalues = r.f64s(n);
  m.evr = r.f64s(n);
  return m;
}

void save_pca(const PcaModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  save_pca(model, out);
}

PcaModel load_pca(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return load_pca(in);
}

namespace {

// Conditional P(j|i) rows whose perplexity matches the target.
std::vector<double> conditional_affinities(const std::vector<double>& d2, std::size_t n, double perplexity) {
  constexpr int max_steps = 50;
  constexpr double tol = 1e-5;
  const double log_u = std::log(perplexity);
  std::vector<double> p(n * n, 0.0);
  std::vector<double> row(n);
  for (std::size_t i = 0; i < n; ++i) {
    double dmin = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) dmin = std::min(dmin, d2[i * n + j]);
    }
    double beta = 1.0;
    double lo = -std::numeric_limits<double>::infinity();
    double hi = std::numeric_limits<double>::infinity();
    for (int step = 0; step < max_steps; ++step) {
      double sum = 0.0;
      double weighted = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) {
          row[j] = 0.0;
          continue;
        }
        const double shifted = d2[i * n + j] - dmin;
        row[j] = std::exp(-shifted * beta);
        sum += row[j];
        weighted += shifted * row[j];
      }
      const double entropy = std::log(sum) + beta * weighted / sum;
      const double diff = entropy - log_u;
      if (std::abs(diff) < tol) break;
      if (diff > 0.0) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = std::isinf(lo) ? beta * 0.5 : 0.5 * (beta + lo);
      }
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      row[j] = j == i ? 0.0 : std::exp(-(d2[i * n + j] - dmin) * beta);
      sum += row[j];
    }
    for (std::size_t j = 0; j < n; ++j) p[i * n + j] = row[j] / sum;
  }
  return p;
}

}  // namespace

Matrix tsne_embed(const Matrix& x, const TsneConfig& cfg, TsneTrace* trace) {
  const std::size_t n = x.rows;
  if (n > cfg.max_points) {
    throw InvalidConfig("tsne_embed: " + std::to_string(n) + " points exceeds the exact-method cap of " +
                        std::to_string(cfg.max_points));
  }
  if (n < 3 || !(cfg.perplexity > 0.0) || cfg.perplexity >= static_cast<double>(n)) {
    throw InvalidConfig("tsne_embed: need at least 3 points and 0 < perplexity < N");
  }
  if (cfg.iterations == 0) throw InvalidConfig("tsne_embed: iterations must be positive");
  require_finite(x.data, "tsne_embed input");

  std::vector<double> d2(n * n, 0.0);
  double dmax = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < x.cols; ++c) {
        const double diff = x(i, c) - x(j, c);
        s += diff * diff;
      }
      d2[i * n + j] = d2[j * n + i] = s;
      dmax = std::max(dmax, s);
    }
  }
  if (dmax == 0.0) throw InvalidConfig("tsne_embed: all points are identical");

  std::vector<double> p = conditional_affinities(d2, n, cfg.perplexity);
  const double norm = 1.0 / (2.0 * static_cast<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double s = std::max((p[i * n + j] + p[j * n + i]) * norm, 1e-12);
      p[i * n + j] = p[j * n + i] = s;
    }
    p[i * n + i] = 0.0;
  }

  Rng rng(cfg.seed);
  Matrix y(n, 2);
  for (double& v : y.data) v = rng.normal(0.0, 1e-4);
  Matrix update(n, 2, 0.0);
  Matrix gains(n, 2, 1.0);
  Matrix grad(n, 2, 0.0);
  std::vector<double> num(n * n, 0.0);

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const double exag = it < cfg.exaggeration_iters ? cfg.early_exaggeration : 1.0;
    const double momentum = it < cfg.exaggeration_iters ? 0.5 : 0.8;
    double sum_q = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const double dx = y(i, 0) - y(j, 0);
        const double dy = y(i, 1) - y(j, 1);
        const double q = 1.0 / (1.0 + dx * dx + dy * dy);
        num[i * n + j] = num[j * n + i] = q;
        sum_q += 2.0 * q;
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      double gx = 0.0;
      double gy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double q = std::max(num[i * n + j] / sum_q, 1e-12);
        const double mult = (exag * p[i * n + j] - q) * num[i * n + j];
        gx += mult * (y(i, 0) - y(j, 0));
        gy += mult * (y(i, 1) - y(j, 1));
      }
      grad(i, 0) = 4.0 * gx;
      grad(i, 1) = 4.0 * gy;
    }
    for (std::size_t k = 0; k < y.data.size(); ++k) {
      const bool same_sign = (grad.data[k] > 0.0) == (update.data[k] > 0.0);
      gains.data[k] = same_sign ? std::max(gains.data[k] * 0.8, 0.01) : gains.data[k] + 0.2;
      update.data[k] = momentum * update.data[k] - cfg.learning_rate * gains.data[k] * grad.data[k];
      y.data[k] += update.data[k];
    }
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mx += y(i, 0);
      my += y(i, 1);
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      y(i, 0) -= mx;
      y(i, 1) -= my;
    }
    const std::size_t done = it + 1;
    if (trace && trace->every > 0 && (done % trace->every == 0 || done == cfg.iterations)) {
      double zq = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
          const double dx = y(i, 0) - y(j, 0);
          const double dy = y(i, 1) - y(j, 1);
          zq += 2.0 / (1.0 + dx * dx + dy * dy);
        }
      }
      double kl = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          if (i == j) continue;
          const double dx = y(i, 0) - y(j, 0);
          const double dy = y(i, 1) - y(j, 1);
          const double q = std::max(1.0 / (1.0 + dx * dx + dy * dy) / zq, 1e-12);
          kl += p[i * n + j] * std::log(p[i * n + j] / q);
        }
      }
      trace->kl.emplace_back(done, kl);
    }
  }
  require_finite(y.data, "tsne embedding");
  return y;
}

std::string embedding_csv(const Matrix& embedding, std::span<const int> clusters) {
  std::ostringstream os;
  os << "id,x,y,cluster\n";
  for (std::size_t i = 0; i < embedding.rows; ++i) {
    os << i << ',' << format_double(embedding(i, 0)) << ',' << format_double(embedding(i, 1)) << ','
       << (i < clusters.size() ? clusters[i] : -1) << '\n';
  }
  return os.str();
}

}  // namespace spectrum_xai::repr
