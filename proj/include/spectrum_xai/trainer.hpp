#pragma once

#include "spectrum_xai/clustering.hpp"
#include "spectrum_xai/common.hpp"
#include "spectrum_xai/nn.hpp"
#include "spectrum_xai/representation.hpp"
#include "spectrum_xai/spectrum_data.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace spectrum_xai::train {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t clustering_cycle = 15;  // C
  std::size_t clusters = 24;          // k
  std::size_t pca_dims = 20;
  double evr_threshold = 0.0;  // > 0 picks the PCA size by cumulative EVR instead of pca_dims
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  bool reinit_head_on_cluster = true;
  cluster::KmeansInit kmeans_init = cluster::KmeansInit::random_points;
  std::size_t kmeans_restarts = 1;
  nn::ArchitectureConfig arch;  // window and classes are overwritten from the data and k
  std::string diagnostic_path;  // model dump target when the loss goes non-finite

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;  // mean cross-entropy over the epoch's mini-batches
  bool is_clustering_epoch = false;
  double nmi_vs_previous = -1.0;  // -1 when no earlier assignment exists or no clustering ran

  bool operator==(const EpochRecord&) const = default;
};

struct LossHistory {
  std::size_t clustering_cycle = 0;
  std::vector<EpochRecord> records;

  std::string to_csv() const;
  bool operator==(const LossHistory&) const = default;
};

// Epochs e >= 1 whose loss exceeds the previous epoch's by more than min_rise.
std::vector<std::size_t> loss_spikes(const LossHistory& history, double min_rise);

struct ClusteringEvent {
  std::size_t epoch = 0;
  std::uint64_t body_hash_before = 0;  // non-head parameters around the clustering step
  std::uint64_t body_hash_after = 0;
  std::uint64_t label_hash = 0;
  std::size_t pca_dims = 0;
  double nmi_vs_previous = -1.0;
};

struct TrainObserver {
  std::function<void(const ClusteringEvent&)> on_clustering;
  // Called after every epoch with the hash of the pseudo-labels that epoch trained on.
  std::function<void(std::size_t epoch, std::uint64_t label_hash)> on_epoch_end;
};

struct TrainResult {
  nn::CnnModel model;
  repr::PcaModel pca;           // from the last clustering event
  cluster::KmeansModel kmeans;  // from the last clustering event
  std::vector<int> labels;      // pseudo-labels the final epochs trained on
  LossHistory history;
};

std::uint64_t label_hash(std::span<const int> labels);

// Row i is the feature-tap output for segment i.
Matrix extract_features(const nn::CnnModel& model, const std::vector<data::SpectrogramSegment>& segments);

TrainResult train(const std::vector<data::SpectrogramSegment>& segments, const TrainConfig& cfg,
                  const TrainObserver* observer = nullptr);

struct CycleExperiment {
  std::vector<std::size_t> cycles;
  std::vector<LossHistory> histories;

  // Columns "cycle,epoch,loss,is_clustering_epoch".
  std::string to_csv() const;
};

CycleExperiment run_cycle_experiment(const std::vector<data::SpectrogramSegment>& segments,
                                     const TrainConfig& base, const std::vector<std::size_t>& cycles);

// Checkpoint directory: model.bin, pca.bin, kmeans.bin, labels.csv.
std::vector<std::string> write_checkpoint(const TrainResult& result, const std::string& dir);
TrainResult read_checkpoint(const std::string& dir);

}  // namespace spectrum_xai::train
