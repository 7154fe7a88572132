#include "spectrum_xai/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>

namespace spectrum_xai::train {

namespace {

// Seed streams. Each is further mixed with the epoch index.
constexpr std::uint64_t kInitStream = 10;
constexpr std::uint64_t kShuffleStream = 11;
constexpr std::uint64_t kHeadStream = 12;
constexpr std::uint64_t kKmeansStream = 13;

// Samples per gradient chunk. Chunks are reduced in index order, so the
// summation tree is fixed regardless of the worker count.
constexpr std::size_t kChunk = 8;

std::uint64_t epoch_seed(std::uint64_t seed, std::uint64_t stream, std::size_t epoch) {
  return derive_seed(derive_seed(seed, stream), epoch);
}

struct ClusterStep {
  repr::PcaModel pca;
  cluster::KmeansResult km;
};

ClusterStep cluster_features(const Matrix& features, const TrainConfig& cfg, std::size_t epoch) {
  ClusterStep s;
  const std::size_t cap = std::min(features.rows, features.cols);
  if (cfg.evr_threshold > 0.0) {
    repr::PcaModel full = repr::pca_fit(features, cap);
    s.pca = repr::pca_truncate(full, repr::select_dims(full, cfg.evr_threshold));
  } else {
    s.pca = repr::pca_fit(features, std::min(cfg.pca_dims, cap));
  }
  const Matrix reduced = repr::pca_transform(s.pca, features);
  cluster::KmeansOptions ko;
  ko.k = cfg.clusters;
  ko.seed = epoch_seed(cfg.seed, kKmeansStream, epoch);
  ko.init = cfg.kmeans_init;
  ko.restarts = cfg.kmeans_restarts;
  s.km = cluster::kmeans_fit(reduced, ko);
  return s;
}

// One epoch of mini-batch SGD; returns the mean loss over mini-batches.
double run_epoch(nn::CnnModel& model, nn::SgdOptimizer& opt, const std::vector<data::SpectrogramSegment>& segments,
                 const std::vector<int>& labels, const TrainConfig& cfg, std::size_t epoch) {
  Rng rng(epoch_seed(cfg.seed, kShuffleStream, epoch));
  const std::vector<std::size_t> order = rng.sample_without_replacement(segments.size(), segments.size());
  const std::size_t k = model.num_classes();
  double loss_sum = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(order.size(), start + cfg.batch_size);
    const std::size_t n = end - start;
    const std::size_t chunks = (n + kChunk - 1) / kChunk;
    std::vector<nn::Gradients> partial(chunks);
    std::vector<double> losses(n, 0.0);
    parallel_for(chunks, [&](std::size_t c) {
      nn::Gradients g = nn::Gradients::zeros_like(model);
      std::vector<double> dlogits(k);
      nn::BackwardOptions bo;
      bo.param_grads = &g;
      bo.want_input_grad = false;
      for (std::size_t i = c * kChunk; i < std::min(n, (c + 1) * kChunk); ++i) {
        const std::size_t idx = order[start + i];
        const nn::ActivationRecord rec = nn::forward(model, segments[idx].pixels);
        losses[i] = nn::cross_entropy_row(rec.logits(), labels[idx], dlogits);
        nn::backward(model, rec, dlogits, bo);
      }
      partial[c] = std::move(g);
    });
    nn::Gradients total = std::move(partial[0]);
    for (std::size_t c = 1; c < chunks; ++c) total.add(partial[c]);
    total.scale(1.0 / static_cast<double>(n));
    double batch_loss = 0.0;
    for (double l : losses) batch_loss += l;
    batch_loss /= static_cast<double>(n);
    if (!std::isfinite(batch_loss)) throw NumericError("non-finite loss");
    opt.step(model, total);
    loss_sum += batch_loss;
    ++batches;
  }
  return loss_sum / static_cast<double>(batches);
}

}  // namespace

void TrainConfig::validate() const {
  if (clustering_cycle < 1) throw InvalidConfig("clustering cycle must be >= 1");
  if (epochs < clustering_cycle) {
    throw InvalidConfig("epochs (" + std::to_string(epochs) + ") must be >= clustering cycle (" +
                        std::to_string(clustering_cycle) + ")");
  }
  if (clusters < 2) throw InvalidConfig("need at least 2 clusters");
  if (evr_threshold <= 0.0 && pca_dims == 0) throw InvalidConfig("pca_dims must be positive");
  if (evr_threshold < 0.0 || evr_threshold > 1.0) throw InvalidConfig("evr_threshold must lie in (0, 1]");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw InvalidConfig("learning rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw InvalidConfig("momentum must lie in [0, 1)");
  if (batch_size == 0) throw InvalidConfig("batch size must be positive");
  if (kmeans_restarts == 0) throw InvalidConfig("kmeans restarts must be positive");
}

std::string LossHistory::to_csv() const {
  std::ostringstream os;
  os << "epoch,loss,is_clustering_epoch,nmi_vs_previous\n";
  for (const auto& r : records) {
    os << r.epoch << ',' << format_double(r.loss) << ',' << (r.is_clustering_epoch ? 1 : 0) << ','
       << format_double(r.nmi_vs_previous) << '\n';
  }
  return os.str();
}

std::vector<std::size_t> loss_spikes(const LossHistory& history, double min_rise) {
  std::vector<std::size_t> out;
  for (std::size_t i = 1; i < history.records.size(); ++i) {
    if (history.records[i].loss - history.records[i - 1].loss > min_rise) out.push_back(history.records[i].epoch);
  }
  return out;
}

std::uint64_t label_hash(std::span<const int> labels) {
  Fnv1a h;
  h.update(labels);
  return h.value();
}

Matrix extract_features(const nn::CnnModel& model, const std::vector<data::SpectrogramSegment>& segments) {
  Matrix out(segments.size(), model.feature_dim());
  parallel_for(segments.size(), [&](std::size_t i) {
    const auto f = nn::forward_until(model, segments[i].pixels, model.feature_tap());
    std::copy(f.begin(), f.end(), out.row(i).begin());
  });
  return out;
}

TrainResult train(const std::vector<data::SpectrogramSegment>& segments, const TrainConfig& cfg,
                  const TrainObserver* observer) {
  cfg.validate();
  if (segments.empty()) throw InvalidConfig("train: empty dataset");
  if (segments.size() < cfg.clusters) {
    throw InvalidConfig("train: " + std::to_string(segments.size()) + " segments is fewer than k=" +
                        std::to_string(cfg.clusters));
  }
  const std::size_t side = segments.front().side;
  for (const auto& s : segments) {
    if (s.side != side || s.pixels.size() != side * side) throw StructuralError("train: segments differ in shape");
  }

  nn::ArchitectureConfig arch = cfg.arch;
  arch.window = side;
  arch.classes = cfg.clusters;
  TrainResult res;
  res.model = nn::CnnModel::compact(arch, derive_seed(cfg.seed, kInitStream));
  res.history.clustering_cycle = cfg.clustering_cycle;
  nn::SgdOptimizer opt(res.model, cfg.lr, cfg.momentum);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    if (epoch % cfg.clustering_cycle == 0) {
      rec.is_clustering_epoch = true;
      ClusteringEvent ev;
      ev.epoch = epoch;
      ev.body_hash_before = res.model.parameter_hash(false);
      ClusterStep step = cluster_features(extract_features(res.model, segments), cfg, epoch);
      if (!res.labels.empty()) rec.nmi_vs_previous = cluster::nmi(res.labels, step.km.labels);
      res.labels = std::move(step.km.labels);
      res.kmeans = std::move(step.km.model);
      res.pca = std::move(step.pca);
      if (cfg.reinit_head_on_cluster) {
        nn::reinit_head(res.model, epoch_seed(cfg.seed, kHeadStream, epoch));
        opt.reset_head_state(res.model);
      }
      ev.body_hash_after = res.model.parameter_hash(false);
      ev.label_hash = label_hash(res.labels);
      ev.pca_dims = res.pca.output_dim();
      ev.nmi_vs_previous = rec.nmi_vs_previous;
      if (observer && observer->on_clustering) observer->on_clustering(ev);
    }
    try {
      rec.loss = run_epoch(res.model, opt, segments, res.labels, cfg, epoch);
    } catch (const NumericError& e) {
      std::string where = "epoch " + std::to_string(epoch) + ": " + e.what();
      if (!cfg.diagnostic_path.empty()) {
        nn::save_model(res.model, cfg.diagnostic_path);
        where += " (diagnostic checkpoint: " + cfg.diagnostic_path + ")";
      }
      throw NumericError("train: " + where);
    }
    res.history.records.push_back(rec);
    if (observer && observer->on_epoch_end) observer->on_epoch_end(epoch, label_hash(res.labels));
  }
  return res;
}

std::string CycleExperiment::to_csv() const {
  std::ostringstream os;
  os << "cycle,epoch,loss,is_clustering_epoch\n";
  for (std::size_t i = 0; i < cycles.size(); ++i) {
    for (const auto& r : histories[i].records) {
      os << cycles[i] << ',' << r.epoch << ',' << format_double(r.loss) << ',' << (r.is_clustering_epoch ? 1 : 0)
         << '\n';
    }
  }
  return os.str();
}

CycleExperiment run_cycle_experiment(const std::vector<data::SpectrogramSegment>& segments,
                                     const TrainConfig& base, const std::vector<std::size_t>& cycles) {
  if (cycles.empty()) throw InvalidConfig("run_cycle_experiment: no cycles given");
  CycleExperiment out;
  for (std::size_t c : cycles) {
    TrainConfig cfg = base;
    cfg.clustering_cycle = c;
    out.cycles.push_back(c);
    out.histories.push_back(train(segments, cfg).history);
  }
  return out;
}

std::vector<std::string> write_checkpoint(const TrainResult& result, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path d(dir);
  std::vector<std::string> paths = {(d / "model.bin").string(), (d / "pca.bin").string(),
                                    (d / "kmeans.bin").string(), (d / "labels.csv").string()};
  nn::save_model(result.model, paths[0]);
  repr::save_pca(result.pca, paths[1]);
  cluster::save_kmeans(result.kmeans, paths[2]);
  write_text_file(paths[3], cluster::labels_csv(result.labels));
  return paths;
}

TrainResult read_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path d(dir);
  for (const char* name : {"model.bin", "pca.bin", "kmeans.bin", "labels.csv"}) {
    if (!fs::exists(d / name)) throw std::runtime_error("checkpoint file missing: " + (d / name).string());
  }
  TrainResult r;
  r.model = nn::load_model((d / "model.bin").string());
  r.pca = repr::load_pca((d / "pca.bin").string());
  r.kmeans = cluster::load_kmeans((d / "kmeans.bin").string());
  r.labels = cluster::read_labels_csv((d / "labels.csv").string());
  if (r.kmeans.k != r.model.num_classes()) throw StructuralError("checkpoint: k differs between model and kmeans");
  for (int l : r.labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= r.kmeans.k) throw StructuralError("checkpoint: label out of range");
  }
  return r;
}

}  // namespace spectrum_xai::train
