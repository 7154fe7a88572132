#include "spectrum_xai/explain_viz.hpp"

#include "spectrum_xai/xai_gbp.hpp"

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <sstream>

namespace spectrum_xai::viz {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

constexpr std::uint64_t kAverageStream = 21;
constexpr std::uint64_t kAttributionStream = 22;

std::uint64_t cluster_seed(std::uint64_t seed, std::uint64_t stream, int cluster) {
  return derive_seed(derive_seed(seed, stream), static_cast<std::uint64_t>(cluster));
}

std::string histogram_csv(const std::vector<std::size_t>& h) {
  std::ostringstream os;
  os << "region,count\n";
  for (std::size_t i = 0; i < h.size(); ++i) os << i << ',' << h[i] << '\n';
  return os.str();
}

json path_json(const ClusterReport& c) {
  json j;
  j["cluster"] = c.cluster;
  json keys = json::array();
  json steps = json::array();
  for (const auto& s : c.path) {
    keys.push_back(s.feature);
    steps.push_back({{"feature", s.feature}, {"threshold", s.threshold}, {"direction", s.went_left ? "le" : "gt"}});
  }
  j["key_features"] = keys;
  j["path"] = steps;
  return j;
}

// Removes a previous report at `root`; refuses to touch anything else.
void prepare_root(const fs::path& root) {
  if (!fs::exists(root)) return;
  if (!fs::is_directory(root) || (!fs::is_empty(root) && !fs::exists(root / "index.json"))) {
    throw std::runtime_error("report directory " + root.string() + " exists and is not a report");
  }
  fs::remove_all(root);
}

}  // namespace

std::vector<double> average_spectrogram(const SegmentRefs& members, std::size_t cap, std::uint64_t seed,
                                        std::size_t* used) {
  if (members.empty()) throw InvalidConfig("average_spectrogram: empty cluster");
  if (cap == 0) throw InvalidConfig("average_spectrogram: cap must be positive");
  const std::size_t side = members.front()->side;
  const auto pick = seeded_subsample(members.size(), cap, seed);
  std::vector<double> avg(side * side, 0.0);
  for (std::size_t i : pick) {
    const auto& px = members[i]->pixels;
    if (px.size() != avg.size()) throw StructuralError("average_spectrogram: segments differ in shape");
    for (std::size_t j = 0; j < avg.size(); ++j) avg[j] += px[j];
  }
  const double inv = 1.0 / static_cast<double>(pick.size());
  for (double& v : avg) v *= inv;
  if (used) *used = pick.size();
  return avg;
}

std::vector<std::size_t> origin_histogram(const SegmentRefs& members, std::size_t regions) {
  std::vector<std::size_t> h(regions, 0);
  for (const auto* m : members) {
    if (m->freq_region >= regions) {
      throw StructuralError("origin_histogram: region " + std::to_string(m->freq_region) + " outside [0, " +
                            std::to_string(regions) + ")");
    }
    ++h[m->freq_region];
  }
  return h;
}

std::vector<SegmentRefs> group_by_cluster(const std::vector<data::SpectrogramSegment>& segments,
                                          std::span<const int> labels, std::size_t k) {
  if (segments.size() != labels.size()) throw StructuralError("report: segment and label counts differ");
  std::vector<SegmentRefs> groups(k);
  for (std::size_t i = 0; i < segments.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw StructuralError("report: label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(k) + ")");
    }
    groups[static_cast<std::size_t>(labels[i])].push_back(&segments[i]);
  }
  return groups;
}

Report build_report(const tree::ShallowTree& tree, const nn::CnnModel& model,
                    const std::vector<data::SpectrogramSegment>& segments, std::span<const int> labels,
                    std::size_t regions, const ReportConfig& cfg, const std::string& out_dir) {
  const std::size_t k = tree.k;
  if (k != model.num_classes()) {
    throw StructuralError("report: tree has " + std::to_string(k) + " clusters, model head has " +
                          std::to_string(model.num_classes()));
  }
  if (cfg.fixed_target >= static_cast<int>(k)) throw InvalidConfig("report: fixed target outside [0, k)");
  const auto groups = group_by_cluster(segments, labels, k);

  Report rep;
  rep.clusters.resize(k);
  parallel_for(k, [&](std::size_t c) {
    const int id = static_cast<int>(c);
    ClusterReport& cr = rep.clusters[c];
    cr.cluster = id;
    cr.sample_count = groups[c].size();
    cr.average = average_spectrogram(groups[c], cfg.average_cap, cluster_seed(cfg.seed, kAverageStream, id), &cr.averaged);
    cr.histogram = origin_histogram(groups[c], regions);
    cr.path = tree::leaf_path(tree, id);
  });

  const fs::path root = fs::path(out_dir) / cfg.run_id;
  prepare_root(root);
  fs::create_directories(root);
  rep.root = root.string();
  auto emit = [&](const fs::path& p, const std::string& text) {
    write_text_file(p.string(), text);
    rep.files.push_back(p.string());
  };

  // Attribution maps parallelise internally, so clusters run in sequence here.
  for (std::size_t c = 0; c < k; ++c) {
    ClusterReport& cr = rep.clusters[c];
    const fs::path dir = root / ("cluster_" + std::to_string(c));
    fs::create_directories(dir);
    const std::size_t side = groups[c].front()->side;
    emit(dir / "avg_spec.pgm", data::to_pgm(cr.average, side));
    // The PGM is quantised; the CSV keeps the exact mean.
    emit(dir / "avg_spec.csv", xai::to_csv(xai::AttributionMap{side, side, cr.average, cr.cluster, 0}));
    emit(dir / "origin_hist.csv", histogram_csv(cr.histogram));
    emit(dir / "path.json", path_json(cr).dump(2) + "\n");

    const auto pick = seeded_subsample(groups[c].size(), cfg.attribution_cap,
                                       cluster_seed(cfg.seed, kAttributionStream, cr.cluster));
    SegmentRefs subset;
    for (std::size_t i : pick) subset.push_back(groups[c][i]);
    cr.attribution_members = subset.size();
    emit(dir / "avg_attr.ppm", xai::to_ppm(xai::average_attribution(model, subset, cr.cluster)));
    for (std::size_t i = 0; i < std::min(cfg.samples_per_cluster, subset.size()); ++i) {
      const auto& seg = *subset[i];
      const int target = cfg.fixed_target >= 0 ? cfg.fixed_target : xai::predicted_cluster(model, seg.pixels);
      for (auto& p : xai::write_sample(xai::guided_backprop(model, seg, target), cr.cluster, dir.string())) {
        rep.files.push_back(p);
      }
      cr.sample_segments.push_back(seg.segment_id);
    }
  }

  emit(root / "tree.json", tree::to_json(tree));
  json index;
  index["run_id"] = cfg.run_id;
  index["k"] = k;
  index["regions"] = regions;
  index["segments"] = segments.size();
  index["seed"] = cfg.seed;
  index["tree"] = {{"file", "tree.json"}, {"depth", tree.depth()}, {"lambda", tree.lambda}, {"leaves", tree.leaf_count()}};
  json clusters = json::array();
  for (const auto& cr : rep.clusters) {
    json keys = json::array();
    for (const auto& s : cr.path) keys.push_back(s.feature);
    clusters.push_back({{"id", cr.cluster},
                        {"dir", "cluster_" + std::to_string(cr.cluster)},
                        {"sample_count", cr.sample_count},
                        {"averaged", cr.averaged},
                        {"subsampled", cr.averaged < cr.sample_count},
                        {"attribution_members", cr.attribution_members},
                        {"histogram", cr.histogram},
                        {"key_features", keys},
                        {"sample_segments", cr.sample_segments}});
  }
  index["clusters"] = clusters;
  emit(root / "index.json", index.dump(2) + "\n");
  std::sort(rep.files.begin(), rep.files.end());
  return rep;
}

}  // namespace spectrum_xai::viz
