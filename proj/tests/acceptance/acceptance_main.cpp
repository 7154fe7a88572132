// Acceptance gate: runs every criterion and prints one PASS/FAIL line each.
// Exit status is 0 only when all selected criteria pass.

#include "spectrum_xai/cli.hpp"
#include "spectrum_xai/clustering.hpp"
#include "spectrum_xai/representation.hpp"
#include "spectrum_xai/shallow_tree.hpp"
#include "spectrum_xai/trainer.hpp"
#include "spectrum_xai/xai_gbp.hpp"

#include "oracles/exhaustive.hpp"
#include "oracles/finite_difference.hpp"
#include "oracles/jacobi.hpp"
#include "oracles/stats.hpp"
#include "test_util.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <sys/wait.h>

using namespace spectrum_xai;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradTol = 1e-4;
constexpr double kGradBudgetS = 30.0;
constexpr double kPcaTol = 1e-8;
constexpr double kSpikeRise = 0.1;
constexpr double kCycleBudgetS = 15 * 60.0;
constexpr double kNmiFloor = 0.9;
constexpr double kEvrThreshold = 0.95;
constexpr double kSmokeBudgetS = 20 * 60.0;
constexpr double kBurstDominance = 0.5;
constexpr double kCoverageFraction = 0.5;

constexpr std::size_t kDeskClusters = 8;
constexpr std::size_t kDeskEpochs = 60;
constexpr double kDeskLr = 0.005;
constexpr std::size_t kDeskWindow = 32;
constexpr std::size_t kDeskDuration = 8000;
constexpr std::uint64_t kDatasetSeed = 1;

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Checker {
 public:
  void expect(bool cond, const std::string& what) {
    if (!cond && first_failure_.empty()) first_failure_ = what;
    ok_ = ok_ && cond;
  }
  Outcome done(const std::string& summary) const {
    return {ok_, ok_ ? summary : first_failure_ + " | " + summary};
  }

 private:
  bool ok_ = true;
  std::string first_failure_;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

std::vector<int> cyc_labels(std::size_t n, std::size_t k) {
  std::vector<int> l;
  for (std::size_t i = 0; i < n; ++i) l.push_back(static_cast<int>(i % k));
  return l;
}

// --- shared desk-scale state -------------------------------------------------

struct Desk {
  data::SynthResult synth;
  std::vector<data::SpectrogramSegment> segments;
  std::optional<train::TrainResult> model;  // seed 1, C = 5
};

std::vector<data::SpectrogramSegment> desk_segments(const data::PsdMatrix& m) {
  const data::SegmentationConfig seg{kDeskWindow, data::ScalingMode::global_minmax};
  return data::scale_segments(data::segment(m, seg), seg);
}

Desk& desk() {
  static Desk d = [] {
    Desk x;
    data::SynthConfig sc = data::SynthConfig::desk_default();
    sc.duration = kDeskDuration;
    sc.window = kDeskWindow;
    sc.seed = kDatasetSeed;
    x.synth = data::synth_generate(sc);
    x.segments = desk_segments(x.synth.matrix);
    return x;
  }();
  return d;
}

train::TrainConfig desk_train_config(std::size_t cycle, std::uint64_t seed) {
  train::TrainConfig c;
  c.epochs = kDeskEpochs;
  c.clustering_cycle = cycle;
  c.clusters = kDeskClusters;
  c.lr = kDeskLr;
  c.seed = seed;
  return c;
}

const train::TrainResult& desk_model() {
  Desk& d = desk();
  if (!d.model) d.model = train::train(d.segments, desk_train_config(5, 1));
  return *d.model;
}

// --- 1. gradients --------------------------------------------------------------

nn::CnnModel strided_conv_model(std::uint64_t seed) {
  std::vector<nn::Layer> layers = {testutil::conv(2, 3, 3, 2, 0), nn::Relu{}, nn::Flatten{}, testutil::linear(27, 5),
                                   nn::Relu{}, testutil::linear(5, 3)};
  nn::CnnModel m(nn::Shape{2, 7, 7}, std::move(layers), 3);
  m.init_uniform(seed);
  return m;
}

nn::CnnModel pool_model(std::uint64_t seed) {
  std::vector<nn::Layer> layers = {nn::MaxPool2d{2, 2}, nn::Flatten{}, testutil::linear(9, 4), testutil::linear(4, 3)};
  nn::CnnModel m(nn::Shape{1, 6, 6}, std::move(layers), 2);
  m.init_uniform(seed);
  return m;
}

nn::CnnModel linear_model(std::uint64_t seed) {
  std::vector<nn::Layer> layers = {nn::Flatten{}, testutil::linear(12, 5), testutil::linear(5, 4)};
  nn::CnnModel m(nn::Shape{3, 2, 2}, std::move(layers), 1);
  m.init_uniform(seed);
  return m;
}

Outcome criterion_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  Checker c;
  nn::ArchitectureConfig arch;
  arch.window = 16;
  arch.base_channels = 2;
  arch.conv_blocks = 2;
  arch.feature_dim = 12;
  arch.classes = 4;
  struct Case {
    std::string name;
    nn::CnnModel model;
  };
  std::vector<Case> cases = {{"conv+relu+pool+linear", testutil::tiny_cnn(6, 4, 11)},
                             {"strided-conv", strided_conv_model(21)},
                             {"maxpool", pool_model(31)},
                             {"linear", linear_model(41)},
                             {"compact", nn::CnnModel::compact(arch, 51)}};
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto& m = cases[i].model;
    const std::size_t k = m.num_classes();
    const auto xs = testutil::random_inputs(3, m.input_shape().size(), 100 + i);
    const auto labels = cyc_labels(xs.size(), k);
    const auto fd = oracle::compare_with_oracle(m, xs, labels);
    const auto lib = nn::gradient_check(m, testutil::to_batch(xs, m.input_shape()), labels);
    c.expect(fd.checked > 0 && fd.max_rel < kGradTol, cases[i].name + " oracle rel err " + fmt(fd.max_rel));
    c.expect(lib.passed(kGradTol), cases[i].name + " gradient_check rel err " + fmt(lib.max_rel_error));
    worst = std::max({worst, fd.max_rel, lib.max_rel_error});
    checked += fd.checked + lib.checked;
  }
  const double secs = seconds_since(t0);
  c.expect(secs < kGradBudgetS, "runtime " + fmt(secs) + " s");
  return c.done("max_rel_err=" + fmt(worst) + " checked=" + std::to_string(checked) + " time=" + fmt(secs, 3) + "s");
}

// --- 2. guided backprop ----------------------------------------------------------

Outcome criterion_guided_rule() {
  Checker c;
  std::size_t elements = 0, relus = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    nn::ArchitectureConfig arch;
    arch.window = 16;
    arch.classes = 6;
    arch.base_channels = 2;
    arch.conv_blocks = 2;
    arch.feature_dim = 10;
    const nn::CnnModel m = nn::CnnModel::compact(arch, seed);
    const auto x = testutil::random_inputs(1, 256, seed + 7).front();
    bool ok = true;
    nn::ReluObserver obs = [&](const nn::ReluTrace& t) {
      ++relus;
      for (std::size_t i = 0; i < t.incoming.size(); ++i) {
        const bool blocked = t.pre_activation[i] <= 0.0 || t.incoming[i] <= 0.0;
        ok = ok && (blocked ? t.outgoing[i] == 0.0 : t.outgoing[i] == t.incoming[i]);
        ++elements;
      }
    };
    xai::guided_backprop(m, x, static_cast<int>(seed % 6), 0, &obs);
    c.expect(ok, "guided rule violated at seed " + std::to_string(seed));
  }
  c.expect(relus == 20 * 3, "expected 3 ReLUs per compact model, saw " + std::to_string(relus));
  // A model without ReLUs: guided and plain input gradients coincide bit for bit.
  std::size_t exact = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::vector<nn::Layer> layers = {testutil::conv(1, 2, 3, 1, 1), nn::MaxPool2d{2, 2}, nn::Flatten{},
                                     testutil::linear(18, 5), testutil::linear(5, 3)};
    nn::CnnModel m(nn::Shape{1, 6, 6}, std::move(layers), 3);
    m.init_uniform(seed);
    const auto x = testutil::random_inputs(1, 36, seed).front();
    for (int t = 0; t < 3; ++t) {
      std::vector<double> g(3, 0.0);
      g[static_cast<std::size_t>(t)] = 1.0;
      const auto plain = nn::backward(m, nn::forward(m, x), g);
      const bool same = xai::guided_backprop(m, x, t).values == plain;
      c.expect(same, "ReLU-free mismatch at seed " + std::to_string(seed));
      exact += same;
    }
  }
  return c.done("relu_elements=" + std::to_string(elements) + " relu_free_exact=" + std::to_string(exact) + "/30");
}

// --- 3. segmentation ---------------------------------------------------------------

Outcome criterion_segmentation() {
  Checker c;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const std::size_t w = 2 + rng.index(20);
    const std::size_t bins = w + rng.index(120);
    const std::size_t t = rng.index(120);
    data::PsdMatrix m(bins, t);
    for (std::size_t b = 0; b < bins; ++b) {
      for (std::size_t s = 0; s < t; ++s) m.at(b, s) = static_cast<float>(b * 1000 + s);
    }
    const auto segs = data::segment(m, {w, data::ScalingMode::global_minmax});
    const bool count_ok = segs.size() == (bins / w) * (t / w);
    c.expect(count_ok, "count mismatch at seed " + std::to_string(seed));
    std::vector<int> seen(bins * t, 0);
    bool placed = true;
    for (const auto& s : segs) {
      for (std::size_t r = 0; r < w; ++r) {
        for (std::size_t col = 0; col < w; ++col) {
          const std::size_t b = s.freq_region * w + r, tt = s.time_index * w + col;
          placed = placed && b < bins && tt < t && s.at(r, col) == m.at(b, tt);
          if (b < bins && tt < t) ++seen[b * t + tt];
        }
      }
    }
    bool partition = true;
    for (std::size_t b = 0; b < bins; ++b) {
      for (std::size_t s = 0; s < t; ++s) {
        const int expect = b < (bins / w) * w && s < (t / w) * w ? 1 : 0;
        partition = partition && seen[b * t + s] == expect;
      }
    }
    c.expect(placed && partition, "tiling is not a partition at seed " + std::to_string(seed));
  }
  const auto ref = data::segment(data::PsdMatrix(1024, 128 * 2), {128, data::ScalingMode::global_minmax});
  std::set<std::size_t> regions;
  for (const auto& s : ref) regions.insert(s.freq_region);
  c.expect(data::region_count(1024, 128) == 8 && regions.size() == 8 && ref.size() == 16, "1024/128 does not give 8 regions");
  return c.done("200 random shapes partitioned; 1024 bins / W=128 -> " + std::to_string(regions.size()) + " regions");
}

// --- 4. PCA --------------------------------------------------------------------------

Outcome criterion_pca() {
  Checker c;
  std::vector<Matrix> inputs = {train::extract_features(desk_model().model, desk().segments)};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Matrix x = testutil::random_matrix(50 + seed * 7, 3 + seed, seed);
    for (std::size_t r = 0; r < x.rows; ++r) x(r, 0) += 3.0 * x(r, 1);
    inputs.push_back(std::move(x));
  }
  double worst_orth = 0.0, worst_trace = 0.0, worst_recon = 0.0, worst_jacobi = 0.0;
  for (const Matrix& x : inputs) {
    const std::size_t d = x.cols;
    const repr::PcaModel m = repr::pca_fit(x, d);
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = 0; b < d; ++b) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += m.components(a, j) * m.components(b, j);
        worst_orth = std::max(worst_orth, std::abs(dot - (a == b ? 1.0 : 0.0)));
      }
    }
    const auto cov = oracle::covariance(testutil::to_rows(x));
    double trace = 0.0, sum = 0.0;
    for (std::size_t j = 0; j < d; ++j) trace += cov[j][j];
    for (double v : m.eigenvalues) sum += v;
    worst_trace = std::max(worst_trace, std::abs(sum - trace) / std::max(1.0, trace));
    const auto jac = oracle::jacobi_eigen(cov);
    for (std::size_t i = 0; i < d; ++i) {
      worst_jacobi = std::max(worst_jacobi, std::abs(jac.values[i] - m.eigenvalues[i]) / std::max(1.0, trace));
    }
    const Matrix z = repr::pca_transform(m, x);
    for (std::size_t r = 0; r < x.rows; ++r) {
      for (std::size_t j = 0; j < d; ++j) {
        double back = m.mean[j];
        for (std::size_t i = 0; i < d; ++i) back += z(r, i) * m.components(i, j);
        worst_recon = std::max(worst_recon, std::abs(back - x(r, j)) / std::max(1.0, std::abs(x(r, j))));
      }
    }
  }
  c.expect(worst_orth < kPcaTol, "orthonormality error " + fmt(worst_orth));
  c.expect(worst_trace < kPcaTol, "trace error " + fmt(worst_trace));
  c.expect(worst_recon < kPcaTol, "reconstruction error " + fmt(worst_recon));
  c.expect(worst_jacobi < kPcaTol, "eigenvalues differ from Jacobi by " + fmt(worst_jacobi));
  repr::PcaModel ref;
  ref.eigenvalues = {4.0, 3.0, 2.0, 1.0};
  ref.total_variance = 10.0;
  ref.evr = {0.4, 0.3, 0.2, 0.1};
  ref.mean.assign(4, 0.0);
  ref.components = Matrix(4, 4);
  for (std::size_t i = 0; i < 4; ++i) ref.components(i, i) = 1.0;
  const std::size_t sel = repr::select_dims(ref, 0.65);
  c.expect(sel == 2, "select_dims({4,3,2,1}, 0.65) = " + std::to_string(sel));
  return c.done("orth=" + fmt(worst_orth) + " trace=" + fmt(worst_trace) + " recon=" + fmt(worst_recon) +
                " jacobi=" + fmt(worst_jacobi) + " select_dims=" + std::to_string(sel));
}

// --- 5. K-means ----------------------------------------------------------------------

Outcome criterion_kmeans() {
  Checker c;
  std::size_t traces = 0;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    const std::size_t k = 2 + rng.index(5);
    const Matrix x = testutil::random_matrix(40 + rng.index(100), 1 + rng.index(4), seed);
    for (auto init : {cluster::KmeansInit::random_points, cluster::KmeansInit::kmeans_pp}) {
      cluster::KmeansOptions o;
      o.k = k;
      o.seed = seed;
      o.init = init;
      o.tol = 0.0;
      const auto r = cluster::kmeans_fit(x, o);
      const auto& tr = r.model.inertia_trace;
      bool mono = !tr.empty();
      for (std::size_t i = 1; i < tr.size(); ++i) mono = mono && tr[i] <= tr[i - 1];
      c.expect(mono, "library inertia trace increased at seed " + std::to_string(seed));
      // Replay the same run one iteration at a time and re-score each partition independently.
      const auto rows = testutil::to_rows(x);
      double prev = std::numeric_limits<double>::infinity();
      for (std::size_t it = 1; it <= r.model.iterations_run; ++it) {
        cluster::KmeansOptions step = o;
        step.max_iter = it;
        const auto s = cluster::kmeans_fit(x, step);
        const double cur = oracle::partition_inertia(rows, s.labels, static_cast<int>(k));
        c.expect(cur <= prev, "re-scored inertia increased at seed " + std::to_string(seed) + " iteration " + std::to_string(it));
        prev = cur;
      }
      ++traces;
    }
  }
  const auto b = testutil::blobs({{0, 0}, {8, 0}, {4, 7}}, 60, 0.7, 3);
  cluster::KmeansOptions o;
  o.k = 3;
  o.seed = 5;
  o.init = cluster::KmeansInit::kmeans_pp;
  o.restarts = 10;
  const auto r = cluster::kmeans_fit(b.x, o);
  const double blob_nmi = oracle::nmi_reference(r.labels, b.labels);
  c.expect(blob_nmi >= 1.0 - 1e-12, "3-blob NMI " + fmt(blob_nmi, 17));

  Matrix line(4, 1);
  line.data = {0.0, 1.0, 9.0, 10.0};
  cluster::KmeansOptions lo;
  lo.k = 2;
  lo.init = cluster::KmeansInit::kmeans_pp;
  lo.restarts = 10;
  const auto lr = cluster::kmeans_fit(line, lo);
  const double best = oracle::exhaustive_kmeans(testutil::to_rows(line), 2);
  c.expect(std::abs(lr.model.inertia - best) < 1e-12 && best == 1.0,
           "1-D inertia " + fmt(lr.model.inertia) + " vs exhaustive " + fmt(best));
  return c.done("monotone_runs=" + std::to_string(traces) + " blob_nmi=" + fmt(blob_nmi) + " line_inertia=" +
                fmt(lr.model.inertia) + " exhaustive=" + fmt(best));
}

// --- 6. clustering cycle ---------------------------------------------------------------

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

Outcome criterion_cycle() {
  const auto t0 = std::chrono::steady_clock::now();
  Checker c;
  Desk& d = desk();
  c.expect(d.segments.size() == 2000, "fixture has " + std::to_string(d.segments.size()) + " segments");
  std::map<std::size_t, std::vector<double>> finals;
  std::string spikes_note;
  std::size_t sign_rises = 0, sign_total = 0;
  for (std::size_t cycle : {5u, 1u}) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      train::TrainResult r = train::train(d.segments, desk_train_config(cycle, seed));
      const auto spikes = train::loss_spikes(r.history, kSpikeRise);
      for (std::size_t e : spikes) {
        if (e % cycle != 0) {
          c.expect(false, "C=" + std::to_string(cycle) + " seed " + std::to_string(seed) + " spike at epoch " + std::to_string(e));
        }
      }
      if (cycle == 5) {
        spikes_note += std::to_string(spikes.size()) + (seed < 3 ? "," : "");
        // Reported only: loss at each clustering epoch e >= C against e - 1.
        const auto& recs = r.history.records;
        for (std::size_t e = cycle; e < recs.size(); e += cycle) {
          ++sign_total;
          sign_rises += recs[e].loss > recs[e - 1].loss;
        }
      }
      finals[cycle].push_back(r.history.records.back().loss);
      std::cerr << "  [6] C=" << cycle << " seed=" << seed << " final loss " << r.history.records.back().loss << '\n';
      if (cycle == 5 && seed == 1 && !d.model) d.model = std::move(r);
    }
  }
  const double m5 = median3(finals[5]), m1 = median3(finals[1]);
  c.expect(m5 < m1, "median final loss C=5 " + fmt(m5) + " is not below C=1 " + fmt(m1));
  const double secs = seconds_since(t0);
  c.expect(secs < kCycleBudgetS, "runtime " + fmt(secs) + " s");
  return c.done("median_final C=5 " + fmt(m5) + " < C=1 " + fmt(m1) + "; C=5 spikes per seed " + spikes_note +
                " all at clustering epochs; loss rose at " + std::to_string(sign_rises) + "/" +
                std::to_string(sign_total) + " clustering epochs; time=" + fmt(secs, 4) + "s");
}

// --- 7. clusterability under PCA -----------------------------------------------------------

Outcome criterion_pca_clusterability() {
  Checker c;
  const Matrix feats = train::extract_features(desk_model().model, desk().segments);
  const repr::PcaModel full = repr::pca_fit(feats, std::min(feats.rows, feats.cols));
  const std::size_t n = repr::select_dims(full, kEvrThreshold);
  const Matrix reduced = repr::pca_transform(repr::pca_truncate(full, n), feats);
  cluster::KmeansOptions o;
  o.k = kDeskClusters;
  o.seed = 11;
  o.init = cluster::KmeansInit::kmeans_pp;
  o.restarts = 10;
  const auto a = cluster::kmeans_fit(feats, o);
  const auto b = cluster::kmeans_fit(reduced, o);
  const double score = oracle::nmi_reference(a.labels, b.labels);
  c.expect(std::abs(score - cluster::nmi(a.labels, b.labels)) < 1e-12, "library NMI disagrees with the oracle");
  c.expect(score >= kNmiFloor, "NMI " + fmt(score) + " below " + fmt(kNmiFloor));
  return c.done("nmi=" + fmt(score) + " dims " + std::to_string(n) + " of " + std::to_string(feats.cols) +
                " at EVR " + fmt(kEvrThreshold));
}

// --- 8. shallow tree ---------------------------------------------------------------------

// Routes every row by walking the node array directly and recounts leaf statistics.
std::map<std::size_t, std::pair<std::size_t, std::size_t>> recount(const tree::ShallowTree& t, const Matrix& x,
                                                                   const std::vector<int>& labels) {
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> out;
  for (std::size_t r = 0; r < x.rows; ++r) {
    std::size_t node = 0;
    while (!t.nodes[node].is_leaf()) {
      const auto& n = t.nodes[node];
      node = static_cast<std::size_t>(x(r, static_cast<std::size_t>(n.feature)) <= n.threshold ? n.left : n.right);
    }
    auto& [samples, mistakes] = out[node];
    ++samples;
    mistakes += labels[r] != t.nodes[node].label;
  }
  return out;
}

Outcome criterion_tree(const fs::path& work) {
  Checker c;
  // Four separated blobs, against the exhaustive optimum.
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto b = testutil::blobs({{0, 0}, {10, 0}, {0, 10}, {10, 10}}, 3, 0.8, seed);
    const auto t = tree::build_tree(b.x, b.labels, 4);
    const auto opt = oracle::exhaustive_tree(testutil::to_rows(b.x), b.labels, 4, 0.03);
    std::size_t m = 0;
    for (const auto& [node, st] : recount(t, b.x, b.labels)) m += st.second;
    c.expect(t.depth() == 2 && m == 0 && opt.depth == 2 && opt.mistakes == 0,
             "four blobs seed " + std::to_string(seed) + ": depth " + std::to_string(t.depth()) + " mistakes " + std::to_string(m));
  }
  const auto big = testutil::blobs({{0, 0}, {10, 0}, {0, 10}, {10, 10}}, 100, 0.8, 9);
  const auto big_tree = tree::build_tree(big.x, big.labels, 4);
  c.expect(big_tree.depth() == 2 && tree::fidelity(big_tree, big.x, big.labels).agreement == 1.0,
           "400-point four-blob tree is not depth 2 with zero mistakes");

  // Trees on learned features of the desk model.
  const train::TrainResult& dm = desk_model();
  const fs::path ckpt = work / "tree_checkpoint";
  train::write_checkpoint(dm, ckpt.string());
  auto rebuild = [&](std::size_t threads, double lambda) {
    set_thread_count(threads);
    const train::TrainResult ck = train::read_checkpoint(ckpt.string());
    const Matrix feats = train::extract_features(ck.model, desk().segments);
    const Matrix red = repr::pca_transform(repr::pca_fit(feats, ck.pca.output_dim()), feats);
    set_thread_count(0);
    return std::make_pair(tree::build_tree(red, ck.labels, ck.kmeans.k, lambda), red);
  };
  const auto [t1, red] = rebuild(1, 0.03);
  const auto [t2, red2] = rebuild(2, 0.03);
  c.expect(tree::to_json(t1) == tree::to_json(t2), "rebuild from the same checkpoint changed the tree");
  const std::size_t k = dm.kmeans.k;
  std::set<int> leaf_labels;
  for (const auto& n : t1.nodes) {
    if (n.is_leaf()) leaf_labels.insert(n.label);
  }
  c.expect(t1.leaf_count() == k && leaf_labels.size() == k, "leaves " + std::to_string(t1.leaf_count()) + " distinct labels " +
                                                                 std::to_string(leaf_labels.size()) + " for k=" + std::to_string(k));
  const auto counts = recount(t1, red, dm.labels);
  const auto fid = tree::fidelity(t1, red, dm.labels);
  std::size_t total_mistakes = 0;
  bool stats_ok = fid.leaves.size() == k;
  for (const auto& ls : fid.leaves) {
    const auto it = counts.find(ls.node);
    const auto want = it == counts.end() ? std::make_pair(std::size_t{0}, std::size_t{0}) : it->second;
    stats_ok = stats_ok && ls.samples == want.first && ls.mistakes == want.second &&
               t1.nodes[ls.node].samples == want.first && t1.nodes[ls.node].mistakes == want.second;
    total_mistakes += want.second;
  }
  c.expect(stats_ok, "leaf counts or mistakes disagree with the recount");
  const double agreement = 1.0 - static_cast<double>(total_mistakes) / static_cast<double>(red.rows);
  c.expect(std::abs(agreement - fid.agreement) < 1e-12, "fidelity " + fmt(fid.agreement) + " vs recount " + fmt(agreement));

  std::size_t prev = std::numeric_limits<std::size_t>::max();
  std::string depths;
  for (double lambda : {0.0, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0}) {
    const auto t = tree::build_tree(red, dm.labels, k, lambda);
    c.expect(t.depth() <= prev, "depth rose to " + std::to_string(t.depth()) + " at lambda " + fmt(lambda));
    prev = t.depth();
    depths += (depths.empty() ? "" : ",") + std::to_string(t.depth());
  }
  return c.done("k=" + std::to_string(k) + " depth=" + std::to_string(t1.depth()) + " fidelity=" + fmt(fid.agreement) +
                " lambda_depths=" + depths + " rebuild identical");
}

// --- 9 and 10. CLI end to end ---------------------------------------------------------------

int run_binary(const std::vector<std::string>& args, const fs::path& log) {
  std::string cmd = SPECTRUM_XAI_CLI_PATH;
  for (const auto& a : args) cmd += " '" + a + "'";
  cmd += " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_text_file(e.path().string());
  }
  return out;
}

std::vector<std::vector<double>> read_csv_numbers(const std::string& path, bool header) {
  std::istringstream in(read_text_file(path));
  std::vector<std::vector<double>> rows;
  std::string line;
  if (header) std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(std::move(row));
  }
  return rows;
}

struct SmokeRun {
  bool ran = false;
  bool ok = false;
  fs::path dir;
  double seconds = 0.0;
  std::string failure;
};

SmokeRun run_smoke(const fs::path& work) {
  SmokeRun s;
  s.ran = true;
  s.dir = work / "e2e";
  fs::remove_all(s.dir);
  fs::create_directories(s.dir);
  const std::string out = s.dir.string();
  const std::string config = std::string(SPECTRUM_XAI_DOCS_DIR) + "/desk_config.json";
  const std::vector<std::pair<std::string, std::vector<std::string>>> steps = {
      {"synth", {"--config", config, "synth", "--out", out}},
      {"segment", {"--config", config, "segment", "--psd", out + "/psd.csv", "--out", out}},
      {"train", {"--config", config, "train", "--segments", out + "/segments.bin", "--out", out}},
      {"explain", {"--config", config, "explain", "--segments", out + "/segments.bin", "--out", out}},
  };
  const auto t0 = std::chrono::steady_clock::now();
  for (const auto& [name, args] : steps) {
    const int code = run_binary(args, s.dir / (name + ".log"));
    std::cerr << "  [10] " << name << " exit " << code << " at " << seconds_since(t0) << " s\n";
    if (code != 0) {
      s.failure = name + " exited " + std::to_string(code) + " (see " + (s.dir / (name + ".log")).string() + ")";
      s.seconds = seconds_since(t0);
      return s;
    }
  }
  s.seconds = seconds_since(t0);
  s.ok = true;
  return s;
}

Outcome criterion_smoke(const SmokeRun& s) {
  Checker c;
  c.expect(s.ok, s.failure.empty() ? "pipeline did not run" : s.failure);
  if (!s.ok) return c.done("time=" + fmt(s.seconds, 4) + "s");
  c.expect(s.seconds < kSmokeBudgetS, "runtime " + fmt(s.seconds) + " s");

  // Generator oracle: per-tile archetype and burst placement.
  const auto truth = read_csv_numbers((s.dir / "labels.csv").string(), true);
  const auto bursts = read_csv_numbers((s.dir / "bursts.csv").string(), true);
  const auto assigned = read_csv_numbers((s.dir / "checkpoint" / "labels.csv").string(), true);
  const auto index = nlohmann::json::parse(read_text_file((s.dir / "report" / "desk" / "index.json").string()));
  const std::size_t regions = index["regions"].get<std::size_t>();
  const std::size_t w = kDeskWindow;
  std::map<std::size_t, std::vector<std::pair<std::size_t, std::size_t>>> tile_bursts;  // tile -> [col begin, end)
  for (const auto& b : bursts) {
    const auto region = static_cast<std::size_t>(b[0]), tw = static_cast<std::size_t>(b[1]);
    const auto start = static_cast<std::size_t>(b[2]) - tw * w, len = static_cast<std::size_t>(b[3]);
    tile_bursts[tw * regions + region].emplace_back(start, start + len);
  }
  const std::size_t k = index["k"].get<std::size_t>();
  std::vector<std::vector<std::size_t>> members(k);
  for (const auto& row : assigned) members[static_cast<std::size_t>(row[1])].push_back(static_cast<std::size_t>(row[0]));

  std::size_t dominated = 0;
  std::string notes;
  for (std::size_t cl = 0; cl < k; ++cl) {
    if (members[cl].empty()) continue;
    std::size_t burst_tiles = 0;
    std::vector<double> coverage(w, 0.0);
    for (std::size_t id : members[cl]) {
      const int archetype = static_cast<int>(truth[id][1]);
      if (archetype == static_cast<int>(data::Archetype::burst) ||
          archetype == static_cast<int>(data::Archetype::burst_and_narrowband)) {
        ++burst_tiles;
      }
      std::vector<char> hit(w, 0);
      for (const auto& [b, e] : tile_bursts[id]) {
        for (std::size_t col = b; col < e; ++col) hit[col] = 1;
      }
      for (std::size_t col = 0; col < w; ++col) coverage[col] += hit[col];
    }
    const double share = static_cast<double>(burst_tiles) / static_cast<double>(members[cl].size());
    if (share <= kBurstDominance) continue;
    ++dominated;
    const auto avg = read_csv_numbers((s.dir / "report" / "desk" / ("cluster_" + std::to_string(cl)) / "avg_spec.csv").string(), false);
    std::vector<double> row_energy(w, 0.0), col_energy(w, 0.0);
    for (std::size_t r = 0; r < w; ++r) {
      for (std::size_t col = 0; col < w; ++col) {
        row_energy[r] += avg[r][col];
        col_energy[col] += avg[r][col];
      }
    }
    const auto best_row = static_cast<std::size_t>(std::max_element(row_energy.begin(), row_energy.end()) - row_energy.begin());
    const auto best_col = static_cast<std::size_t>(std::max_element(col_energy.begin(), col_energy.end()) - col_energy.begin());
    const double peak = *std::max_element(coverage.begin(), coverage.end());
    // Bursts span the full region height, so every row lies in their extent;
    // the column must sit where member bursts concentrate.
    const bool row_in = best_row < w && peak > 0.0;
    const bool col_in = coverage[best_col] >= kCoverageFraction * peak && coverage[best_col] > 0.0;
    c.expect(row_in && col_in, "cluster " + std::to_string(cl) + " peak column " + std::to_string(best_col) +
                                   " has burst coverage " + fmt(coverage[best_col]) + " of max " + fmt(peak));
    notes += " c" + std::to_string(cl) + "(share " + fmt(share, 3) + ", col " + std::to_string(best_col) + ")";
  }
  c.expect(dominated > 0, "no burst-dominated cluster");
  return c.done("exit 0 in " + fmt(s.seconds, 4) + "s; burst-dominated clusters " + std::to_string(dominated) + ":" + notes);
}

Outcome criterion_report(const SmokeRun& s) {
  Checker c;
  c.expect(s.ok, "end-to-end run unavailable: " + s.failure);
  if (!s.ok) return c.done("");
  const std::string out = s.dir.string();
  const std::string config = std::string(SPECTRUM_XAI_DOCS_DIR) + "/desk_config.json";
  const fs::path root = s.dir / "report" / "desk";
  // Re-run explain over the end-to-end report, once serial and once threaded.
  const auto first = snapshot(root);
  std::vector<std::string> args = {"--config", config, "explain", "--segments", out + "/segments.bin", "--out", out};
  c.expect(run_binary(args, s.dir / "rerun1.log") == 0, "first re-run of explain failed");
  c.expect(snapshot(root) == first, "serial re-run changed the report bytes");
  args.insert(args.begin(), {"--threads", "2"});
  c.expect(run_binary(args, s.dir / "rerun2.log") == 0, "second re-run of explain failed");
  c.expect(snapshot(root) == first, "threaded re-run changed the report bytes");

  const auto index = nlohmann::json::parse(first.at("index.json"));
  std::size_t total = 0;
  double lo = 1.0, hi = 0.0;
  for (const auto& cl : index["clusters"]) {
    std::size_t sum = 0;
    for (const auto& h : cl["histogram"]) sum += h.get<std::size_t>();
    const auto n = cl["sample_count"].get<std::size_t>();
    c.expect(sum == n, "cluster " + cl["id"].dump() + " histogram sums to " + std::to_string(sum) + " of " + std::to_string(n));
    total += n;
    for (const auto& row : read_csv_numbers((root / cl["dir"].get<std::string>() / "avg_spec.csv").string(), false)) {
      for (double v : row) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
  }
  c.expect(total == index["segments"].get<std::size_t>(), "cluster sizes do not cover the dataset");
  c.expect(lo >= 0.0 && hi <= 1.0, "average pixel range [" + fmt(lo) + ", " + fmt(hi) + "]");
  return c.done(std::to_string(first.size()) + " files byte-identical; histograms match " + std::to_string(total) +
                " members; pixels in [" + fmt(lo) + ", " + fmt(hi) + "]");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance gate"};
  std::string workdir = "acceptance_work";
  std::vector<int> only;
  app.add_option("--workdir", workdir, "Scratch directory");
  app.add_option("--only", only, "Run just these criteria")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);
  const fs::path work = fs::absolute(workdir);
  fs::create_directories(work);

  auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
  SmokeRun smoke;
  auto ensure_smoke = [&]() -> const SmokeRun& {
    if (!smoke.ran) smoke = run_smoke(work);
    return smoke;
  };

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient correctness", criterion_gradients},
      {"guided backprop rule", criterion_guided_rule},
      {"segmentation formula", criterion_segmentation},
      {"PCA", criterion_pca},
      {"K-means", criterion_kmeans},
      {"clustering-cycle experiment", criterion_cycle},
      {"PCA clusterability", criterion_pca_clusterability},
      {"shallow tree", [&] { return criterion_tree(work); }},
      {"report determinism", [&] { return criterion_report(ensure_smoke()); }},
      {"end-to-end smoke", [&] { return criterion_smoke(ensure_smoke()); }},
  };
  // The cycle experiment trains the desk model the later criteria reuse, so
  // it runs before PCA even though lines print in numeric order.
  const std::vector<int> order = {1, 2, 3, 6, 4, 5, 7, 8, 10, 9};
  std::map<int, std::pair<Outcome, double>> results;
  for (int id : order) {
    if (!wanted(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[static_cast<std::size_t>(id - 1)].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    std::cerr << "  criterion " << id << " finished in " << fmt(secs, 4) << " s\n";
    results[id] = {o, secs};
  }
  bool all = true;
  std::ostringstream lines;
  for (const auto& [id, r] : results) {
    all = all && r.first.pass;
    lines << (r.first.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[static_cast<std::size_t>(id - 1)].first
          << "): " << r.first.detail << '\n';
  }
  lines << (all ? "ALL PASS" : "SOME FAILED") << " (" << results.size() << " criteria)\n";
  std::cout << lines.str();
  write_text_file((work / "acceptance_summary.txt").string(), lines.str());
  return all ? 0 : 1;
}
