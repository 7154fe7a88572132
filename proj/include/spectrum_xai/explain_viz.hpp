#pragma once

#include "spectrum_xai/nn.hpp"
#include "spectrum_xai/shallow_tree.hpp"
#include "spectrum_xai/spectrum_data.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace spectrum_xai::viz {

using SegmentRefs = std::vector<const data::SpectrogramSegment*>;

inline constexpr std::size_t kAverageCap = 4096;

// Mean over min(count, cap) members drawn with `seed`, summed in ascending
// member order. `used` receives the number of members averaged.
std::vector<double> average_spectrogram(const SegmentRefs& members, std::size_t cap, std::uint64_t seed,
                                        std::size_t* used = nullptr);

// Member count per frequency region.
std::vector<std::size_t> origin_histogram(const SegmentRefs& members, std::size_t regions);

// Members of each cluster in segment order.
std::vector<SegmentRefs> group_by_cluster(const std::vector<data::SpectrogramSegment>& segments,
                                          std::span<const int> labels, std::size_t k);

struct ReportConfig {
  std::string run_id = "run";
  std::uint64_t seed = 0;
  std::size_t average_cap = kAverageCap;
  std::size_t attribution_cap = 256;
  std::size_t samples_per_cluster = 2;  // individual attribution maps written per cluster
  int fixed_target = -1;                // >= 0 explains this logit for every sample instead of the prediction
};

struct ClusterReport {
  int cluster = 0;
  std::size_t sample_count = 0;
  std::size_t averaged = 0;             // members in the average spectrogram
  std::size_t attribution_members = 0;  // members in the average attribution
  std::vector<double> average;          // W x W
  std::vector<std::size_t> histogram;
  std::vector<tree::PathStep> path;
  std::vector<std::size_t> sample_segments;  // ids with individual attribution maps
};

struct Report {
  std::string root;  // report/<run_id>
  std::vector<ClusterReport> clusters;
  std::vector<std::string> files;  // every written file, sorted
};

// Writes <out_dir>/<run_id>/{index.json, tree.json, cluster_<id>/...}.
Report build_report(const tree::ShallowTree& tree, const nn::CnnModel& model,
                    const std::vector<data::SpectrogramSegment>& segments, std::span<const int> labels,
                    std::size_t regions, const ReportConfig& cfg, const std::string& out_dir);

}  // namespace spectrum_xai::viz
