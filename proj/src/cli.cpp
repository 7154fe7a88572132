#include "spectrum_xai/cli.hpp"

#include "spectrum_xai/clustering.hpp"
#include "spectrum_xai/common.hpp"
#include "spectrum_xai/explain_viz.hpp"
#include "spectrum_xai/nn.hpp"
#include "spectrum_xai/representation.hpp"
#include "spectrum_xai/shallow_tree.hpp"
#include "spectrum_xai/spectrum_data.hpp"
#include "spectrum_xai/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

namespace spectrum_xai::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

constexpr const char* kSeedEnv = "SPECTRUM_XAI_SEED";
const std::vector<std::string> kCommands = {"synth", "segment", "train", "explain", "verify"};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

// --- config file merging -------------------------------------------------

std::string config_path_from(const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) return args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
  }
  return {};
}

void append_json_args(const json& obj, std::vector<std::string>& out, bool globals) {
  for (const auto& [key, value] : obj.items()) {
    if (value.is_object()) continue;  // per-command section, handled separately
    if ((key == "threads") != globals) continue;
    const std::string flag = "--" + key;
    if (value.is_boolean()) {
      if (value.get<bool>()) out.push_back(flag);
    } else if (value.is_array()) {
      std::string joined;
      for (const auto& v : value) joined += (joined.empty() ? "" : ",") + (v.is_string() ? v.get<std::string>() : v.dump());
      out.push_back(flag);
      out.push_back(joined);
    } else {
      out.push_back(flag);
      out.push_back(value.is_string() ? value.get<std::string>() : value.dump());
    }
  }
}

// Config values are spliced in ahead of the explicit flags; options take the
// last occurrence, so explicit flags win.
std::vector<std::string> merge_config(const std::vector<std::string>& args) {
  const std::string path = config_path_from(args);
  if (path.empty()) return args;
  json cfg;
  try {
    cfg = json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    throw UsageError("--config " + path + ": " + e.what());
  } catch (const std::runtime_error& e) {
    throw UsageError("--config: " + std::string(e.what()));
  }
  if (!cfg.is_object()) throw UsageError("--config " + path + ": top level must be an object");
  auto sub = std::find_first_of(args.begin(), args.end(), kCommands.begin(), kCommands.end());
  if (sub == args.end()) return args;
  std::vector<std::string> globals, locals;
  append_json_args(cfg, globals, true);
  append_json_args(cfg, locals, false);
  if (cfg.contains(*sub) && cfg[*sub].is_object()) {
    append_json_args(cfg[*sub], globals, true);
    append_json_args(cfg[*sub], locals, false);
  }
  std::vector<std::string> merged(args.begin(), sub);
  merged.insert(merged.end(), globals.begin(), globals.end());
  merged.push_back(*sub);
  merged.insert(merged.end(), locals.begin(), locals.end());
  merged.insert(merged.end(), sub + 1, args.end());
  return merged;
}

// --- manifest -------------------------------------------------------------

json config_snapshot(const CLI::App* sub, std::uint64_t seed) {
  json cfg;
  for (const CLI::Option* opt : sub->get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name == "config" || name == "resume" || name == "threads") continue;
    if (opt->count() > 0) {
      const auto& res = opt->results();
      std::string joined;
      for (const auto& r : res) joined += (joined.empty() ? "" : ",") + r;
      cfg[name] = opt->get_type_size() == 0 && joined.empty() ? "true" : joined;
    } else {
      cfg[name] = opt->get_default_str();
    }
  }
  cfg["seed"] = std::to_string(seed);
  return cfg;
}

fs::path manifest_path(const fs::path& out, const std::string& cmd) { return out / ("manifest_" + cmd + ".json"); }

void write_manifest(const fs::path& out, const std::string& cmd, const json& config, std::uint64_t seed,
                    const std::string& dataset_hash, const std::string& started, std::vector<std::string> artifacts) {
  std::sort(artifacts.begin(), artifacts.end());
  json m;
  m["tool"] = "spectrum_xai";
  m["version"] = SPECTRUM_XAI_VERSION;
  m["command"] = cmd;
  m["seed"] = seed;
  m["dataset_hash"] = dataset_hash;
  m["config"] = config;
  m["started_at"] = started;
  m["finished_at"] = utc_now();
  json list = json::array();
  for (const auto& a : artifacts) {
    list.push_back({{"path", fs::path(a).lexically_relative(out).generic_string()}, {"fnv1a", hash_file(a)}});
  }
  m["artifacts"] = list;
  write_text_file(manifest_path(out, cmd).string(), m.dump(2) + "\n");
}

// True when a previous manifest for the same configuration lists artifacts
// that all still exist with their recorded hashes.
bool up_to_date(const fs::path& out, const std::string& cmd, const json& config) {
  const fs::path mp = manifest_path(out, cmd);
  if (!fs::exists(mp)) return false;
  try {
    const json m = json::parse(read_text_file(mp.string()));
    if (m.at("config") != config || m.at("version") != SPECTRUM_XAI_VERSION) return false;
    for (const auto& a : m.at("artifacts")) {
      const fs::path p = out / a.at("path").get<std::string>();
      if (!fs::exists(p) || hash_file(p.string()) != a.at("fnv1a").get<std::string>()) return false;
    }
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

// --- shared option groups ------------------------------------------------

struct Common {
  std::string out = "out";
  std::uint64_t seed = 0;
  bool resume = false;
  CLI::Option* seed_opt = nullptr;

  void attach(CLI::App* app) {
    app->add_option("--out", out, "Output directory")->capture_default_str();
    seed_opt = app->add_option("--seed", seed, "Seed (falls back to $SPECTRUM_XAI_SEED, then 0)");
    app->add_flag("--resume", resume, "Skip the run when the manifest's artifacts are present and unchanged");
  }

  void resolve_seed() {
    if (seed_opt->count() > 0) return;
    if (const char* env = std::getenv(kSeedEnv); env && *env) {
      try {
        std::size_t used = 0;
        seed = std::stoull(env, &used);
        if (env[used] != '\0') throw std::invalid_argument(env);
      } catch (const std::exception&) {
        throw UsageError(std::string(kSeedEnv) + " is not an unsigned integer: '" + env + "'");
      }
    }
  }
};

struct DatasetArgs {
  std::string segments;
  std::string psd;
  std::string format = "auto";
  std::size_t window = 32;
  std::string scaling = "global";

  void attach(CLI::App* app) {
    auto* s = app->add_option("--segments", segments, "Segment dataset written by `segment`");
    auto* p = app->add_option("--psd", psd, "PSD file to segment on the fly");
    s->excludes(p);
    app->add_option("--format", format, "PSD format")->check(CLI::IsMember({"auto", "csv", "raw"}))->capture_default_str();
    app->add_option("--window", window, "Segment side W")->check(CLI::Range(2, 1 << 16))->capture_default_str();
    app->add_option("--scaling", scaling, "Pixel scaling")->check(CLI::IsMember({"global", "per-segment"}))->capture_default_str();
  }
};

data::PsdFormat psd_format(const std::string& format, const std::string& path) {
  if (format == "csv") return data::PsdFormat::csv;
  if (format == "raw") return data::PsdFormat::raw_f32_le;
  return fs::path(path).extension() == ".csv" ? data::PsdFormat::csv : data::PsdFormat::raw_f32_le;
}

data::SegmentationConfig seg_config(const DatasetArgs& d) {
  return {d.window, d.scaling == "global" ? data::ScalingMode::global_minmax : data::ScalingMode::per_segment_minmax};
}

struct Dataset {
  std::vector<data::SpectrogramSegment> segments;
  std::size_t regions = 0;
  std::string hash;
};

Dataset load_dataset(const DatasetArgs& d) {
  Dataset ds;
  if (!d.segments.empty()) {
    ds.segments = data::read_segments(d.segments, &ds.regions);
  } else if (!d.psd.empty()) {
    const data::PsdMatrix m = data::read_psd_file(d.psd, psd_format(d.format, d.psd));
    const auto cfg = seg_config(d);
    ds.segments = data::scale_segments(data::segment(m, cfg), cfg);
    ds.regions = data::region_count(m.bins, d.window);
  } else {
    throw UsageError("one of --segments or --psd is required");
  }
  if (ds.segments.empty()) throw UsageError("dataset holds no segments");
  ds.hash = data::dataset_hash(ds.segments);
  return ds;
}

// --- synth -----------------------------------------------------------------

struct SynthArgs {
  Common common;
  std::size_t duration = 0;
  std::size_t bins = 256;
  std::size_t window = 32;
  double burst_rate = 0.4;
  std::size_t classes = 4;
  std::string format = "csv";
};

int cmd_synth(SynthArgs& a, CLI::App* sub, std::ostream& out) {
  a.common.resolve_seed();
  const fs::path dir(a.common.out);
  const json config = config_snapshot(sub, a.common.seed);
  if (a.common.resume && up_to_date(dir, "synth", config)) {
    out << "synth: up to date\n";
    return kExitOk;
  }
  const std::string started = utc_now();
  data::SynthConfig cfg = data::SynthConfig::desk_default();
  // Narrowband channels keep their relative position when the band is resized.
  for (auto& ch : cfg.narrowband_channels) ch.bin = ch.bin * a.bins / cfg.bins;
  cfg.bins = a.bins;
  cfg.duration = a.duration;
  cfg.window = a.window;
  cfg.burst_rate = a.burst_rate;
  cfg.n_classes = a.classes;
  cfg.seed = a.common.seed;
  try {
    cfg.validate();
  } catch (const InvalidConfig& e) {
    throw UsageError(e.what());
  }
  const data::SynthResult res = data::synth_generate(cfg);
  fs::create_directories(dir);
  const bool csv = a.format == "csv";
  const std::string psd = (dir / (csv ? "psd.csv" : "psd.bin")).string();
  data::write_psd_file(res.matrix, psd, csv ? data::PsdFormat::csv : data::PsdFormat::raw_f32_le);
  const std::string labels = (dir / "labels.csv").string();
  write_text_file(labels, cluster::labels_csv(res.labels));
  std::ostringstream bursts;
  bursts << "region,time_index,start,length\n";
  for (const auto& b : res.bursts) bursts << b.region << ',' << b.time_index << ',' << b.start << ',' << b.length << '\n';
  const std::string bursts_path = (dir / "bursts.csv").string();
  write_text_file(bursts_path, bursts.str());
  write_manifest(dir, "synth", config, cfg.seed, "", started, {psd, labels, bursts_path});
  out << "synth: " << cfg.bins << " bins x " << cfg.duration << " samples, " << res.labels.size() << " tiles, "
      << res.bursts.size() << " bursts -> " << psd << '\n';
  return kExitOk;
}

// --- segment ---------------------------------------------------------------

struct SegmentArgs {
  Common common;
  DatasetArgs dataset;
  std::size_t preview = 0;
};

int cmd_segment(SegmentArgs& a, CLI::App* sub, std::ostream& out) {
  a.common.resolve_seed();
  const fs::path dir(a.common.out);
  const json config = config_snapshot(sub, a.common.seed);
  if (a.common.resume && up_to_date(dir, "segment", config)) {
    out << "segment: up to date\n";
    return kExitOk;
  }
  if (a.dataset.psd.empty()) throw UsageError("segment requires --psd");
  const std::string started = utc_now();
  const Dataset ds = load_dataset(a.dataset);
  fs::create_directories(dir);
  const std::string path = (dir / "segments.bin").string();
  data::write_segments(ds.segments, ds.regions, path);
  std::vector<std::string> artifacts = {path};
  if (a.preview > 0) {
    fs::create_directories(dir / "preview");
    for (std::size_t i = 0; i < std::min(a.preview, ds.segments.size()); ++i) {
      const auto& s = ds.segments[i];
      const std::string p = (dir / "preview" / ("segment_" + std::to_string(s.segment_id) + ".pgm")).string();
      write_text_file(p, data::to_pgm(s.pixels, s.side));
      artifacts.push_back(p);
    }
  }
  write_manifest(dir, "segment", config, a.common.seed, ds.hash, started, artifacts);
  out << "segment: " << ds.segments.size() << " segments (" << ds.regions << " regions) -> " << path << '\n';
  return kExitOk;
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  Common common;
  DatasetArgs dataset;
  train::TrainConfig cfg;
  std::string kmeans_init = "random";
  bool no_reinit = false;
  std::vector<std::size_t> cycles;
  CLI::Option* evr_opt = nullptr;
};

int cmd_train(TrainArgs& a, CLI::App* sub, std::ostream& out) {
  a.common.resolve_seed();
  const fs::path dir(a.common.out);
  const json config = config_snapshot(sub, a.common.seed);
  if (a.common.resume && up_to_date(dir, "train", config)) {
    out << "train: up to date\n";
    return kExitOk;
  }
  const std::string started = utc_now();
  train::TrainConfig cfg = a.cfg;
  cfg.seed = a.common.seed;
  cfg.reinit_head_on_cluster = !a.no_reinit;
  cfg.kmeans_init = a.kmeans_init == "kmeans++" ? cluster::KmeansInit::kmeans_pp : cluster::KmeansInit::random_points;
  if (a.evr_opt->count() == 0) cfg.evr_threshold = 0.0;
  try {
    cfg.validate();
  } catch (const InvalidConfig& e) {
    throw UsageError(e.what());
  }
  const Dataset ds = load_dataset(a.dataset);
  fs::create_directories(dir);
  cfg.diagnostic_path = (dir / "diagnostic_model.bin").string();
  const train::TrainResult res = train::train(ds.segments, cfg);
  std::vector<std::string> artifacts = train::write_checkpoint(res, (dir / "checkpoint").string());
  const std::string loss = (dir / "loss.csv").string();
  write_text_file(loss, res.history.to_csv());
  artifacts.push_back(loss);
  if (!a.cycles.empty()) {
    const auto exp = train::run_cycle_experiment(ds.segments, cfg, a.cycles);
    const std::string p = (dir / "cycles.csv").string();
    write_text_file(p, exp.to_csv());
    artifacts.push_back(p);
  }
  write_manifest(dir, "train", config, cfg.seed, ds.hash, started, artifacts);
  const auto& recs = res.history.records;
  out << "train: " << recs.size() << " epochs, first loss " << format_double(recs.front().loss) << ", final loss "
      << format_double(recs.back().loss) << ", k=" << cfg.clusters << ", pca dims " << res.pca.output_dim() << " -> "
      << (dir / "checkpoint").string() << '\n';
  return kExitOk;
}

// --- explain ---------------------------------------------------------------

struct ExplainArgs {
  Common common;
  DatasetArgs dataset;
  std::string checkpoint;
  double lambda = 0.03;
  std::string run_id = "run";
  int target = -1;
  std::size_t samples = 2;
  std::size_t average_cap = viz::kAverageCap;
  std::size_t attribution_cap = 256;
};

int cmd_explain(ExplainArgs& a, CLI::App* sub, std::ostream& out) {
  a.common.resolve_seed();
  const fs::path dir(a.common.out);
  const json config = config_snapshot(sub, a.common.seed);
  if (a.common.resume && up_to_date(dir, "explain_" + a.run_id, config)) {
    out << "explain: up to date\n";
    return kExitOk;
  }
  const std::string started = utc_now();
  const std::string ckpt_dir = a.checkpoint.empty() ? (dir / "checkpoint").string() : a.checkpoint;
  if (!fs::is_directory(ckpt_dir)) throw std::runtime_error("checkpoint not found: " + ckpt_dir);
  const train::TrainResult ckpt = train::read_checkpoint(ckpt_dir);
  const Dataset ds = load_dataset(a.dataset);
  if (ds.segments.size() != ckpt.labels.size()) {
    throw std::runtime_error("dataset has " + std::to_string(ds.segments.size()) + " segments, checkpoint labels " +
                             std::to_string(ckpt.labels.size()));
  }
  const Matrix features = train::extract_features(ckpt.model, ds.segments);
  const repr::PcaModel pca = repr::pca_fit(features, ckpt.pca.output_dim());
  const Matrix reduced = repr::pca_transform(pca, features);
  const tree::ShallowTree t = tree::build_tree(reduced, ckpt.labels, ckpt.kmeans.k, a.lambda);

  viz::ReportConfig rc;
  rc.run_id = a.run_id;
  rc.seed = a.common.seed;
  rc.average_cap = a.average_cap;
  rc.attribution_cap = a.attribution_cap;
  rc.samples_per_cluster = a.samples;
  rc.fixed_target = a.target;
  viz::Report rep = viz::build_report(t, ckpt.model, ds.segments, ckpt.labels, ds.regions, rc, (dir / "report").string());
  const std::string text = (fs::path(rep.root) / "tree.txt").string();
  write_text_file(text, tree::to_text(t));
  const std::string stats = (fs::path(rep.root) / "leaf_stats.csv").string();
  write_text_file(stats, tree::leaf_stats_csv(t));
  rep.files.push_back(text);
  rep.files.push_back(stats);
  write_manifest(dir, "explain_" + a.run_id, config, a.common.seed, ds.hash, started, rep.files);
  const auto fid = tree::fidelity(t, reduced, ckpt.labels);
  out << tree::to_text(t);
  out << "explain: k=" << t.k << " depth=" << t.depth() << " fidelity=" << format_double(fid.agreement) << " -> "
      << rep.root << '\n';
  return kExitOk;
}

// --- verify ----------------------------------------------------------------

struct VerifyArgs {
  Common common;
  DatasetArgs dataset;
  std::string checkpoint;
  std::size_t clusters = 8;
  double evr_threshold = 0.95;
  std::size_t tsne_points = 1000;
  std::size_t tsne_iterations = 1000;
  double perplexity = 30.0;
  std::size_t grad_samples = 2;
  std::size_t grad_params = 256;
  double grad_tol = 1e-4;
};

int cmd_verify(VerifyArgs& a, CLI::App* sub, std::ostream& out) {
  a.common.resolve_seed();
  const fs::path dir(a.common.out);
  const json config = config_snapshot(sub, a.common.seed);
  const std::string started = utc_now();
  const Dataset ds = load_dataset(a.dataset);
  const std::uint64_t seed = a.common.seed;

  nn::CnnModel model;
  std::vector<int> labels;
  if (!a.checkpoint.empty()) {
    if (!fs::is_directory(a.checkpoint)) throw std::runtime_error("checkpoint not found: " + a.checkpoint);
    train::TrainResult ck = train::read_checkpoint(a.checkpoint);
    model = std::move(ck.model);
    labels = std::move(ck.labels);
    if (labels.size() != ds.segments.size()) throw std::runtime_error("checkpoint labels do not match the dataset");
  } else {
    nn::ArchitectureConfig arch;
    arch.window = ds.segments.front().side;
    arch.classes = a.clusters;
    model = nn::CnnModel::compact(arch, derive_seed(seed, 1));
    for (std::size_t i = 0; i < ds.segments.size(); ++i) labels.push_back(static_cast<int>(i % a.clusters));
  }
  const std::size_t k = model.num_classes();

  // Gradient check on a few samples.
  const std::size_t gn = std::min(a.grad_samples, ds.segments.size());
  const nn::Shape in = model.input_shape();
  nn::Tensor batch({gn, in.c, in.h, in.w});
  for (std::size_t i = 0; i < gn; ++i) {
    std::copy(ds.segments[i].pixels.begin(), ds.segments[i].pixels.end(), batch.data.begin() + i * in.size());
  }
  nn::GradCheckOptions go;
  go.max_params = a.grad_params;
  go.seed = seed;
  const auto gc = nn::gradient_check(model, batch, std::span<const int>(labels.data(), gn), go);
  const bool grad_ok = gc.passed(a.grad_tol);
  out << (grad_ok ? "PASS" : "FAIL") << " max_rel_err=" << format_double(gc.max_rel_error) << " checked=" << gc.checked
      << " skipped_kinks=" << gc.skipped_kinks << '\n';

  fs::create_directories(dir);
  std::vector<std::string> artifacts;
  const Matrix features = train::extract_features(model, ds.segments);
  const repr::PcaModel full = repr::pca_fit(features, std::min(features.rows, features.cols));
  const std::string evr = (dir / "evr.csv").string();
  write_text_file(evr, repr::evr_csv(full));
  artifacts.push_back(evr);
  const std::size_t n = repr::select_dims(full, a.evr_threshold);
  const Matrix reduced = repr::pca_transform(repr::pca_truncate(full, n), features);

  cluster::KmeansOptions ko;
  ko.k = k;
  ko.seed = derive_seed(seed, 2);
  ko.init = cluster::KmeansInit::kmeans_pp;
  ko.restarts = 10;
  const auto km_full = cluster::kmeans_fit(features, ko);
  const auto km_reduced = cluster::kmeans_fit(reduced, ko);
  const double agreement = cluster::nmi(km_full.labels, km_reduced.labels);
  out << "evr_dims=" << n << " of " << full.output_dim() << " (threshold " << format_double(a.evr_threshold) << ")\n";
  out << "nmi_full_vs_reduced=" << format_double(agreement) << '\n';

  const auto pick = seeded_subsample(features.rows, a.tsne_points, derive_seed(seed, 3));
  auto rows = [&](const Matrix& m) {
    Matrix s(pick.size(), m.cols);
    for (std::size_t i = 0; i < pick.size(); ++i) std::copy(m.row(pick[i]).begin(), m.row(pick[i]).end(), s.row(i).begin());
    return s;
  };
  std::vector<int> sub_labels;
  for (std::size_t i : pick) sub_labels.push_back(km_full.labels[i]);
  repr::TsneConfig tc;
  tc.perplexity = std::min(a.perplexity, static_cast<double>(pick.size() - 1) / 3.0);
  tc.iterations = a.tsne_iterations;
  tc.seed = derive_seed(seed, 4);
  for (const auto& [name, m] : {std::pair<const char*, const Matrix*>{"tsne_full.csv", &features}, {"tsne_reduced.csv", &reduced}}) {
    const std::string p = (dir / name).string();
    write_text_file(p, repr::embedding_csv(repr::tsne_embed(rows(*m), tc), sub_labels));
    artifacts.push_back(p);
  }
  write_manifest(dir, "verify", config, seed, ds.hash, started, artifacts);
  out << "verify: wrote " << artifacts.size() << " files to " << dir.string() << '\n';
  return grad_ok ? kExitOk : kExitFailure;
}

}  // namespace

int run_cli(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Explainable DeepCluster pipeline for spectrum spectrograms", "spectrum_xai"};
  app.set_version_flag("--version", std::string(SPECTRUM_XAI_VERSION));
  app.require_subcommand(1);
  app.fallthrough();
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  std::size_t threads = 0;
  std::string config_path;
  app.add_option("--threads", threads, "Worker threads (0 = all cores)");
  app.add_option("--config", config_path, "JSON config; explicit flags take precedence");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic PSD matrix with ground-truth tile labels");
  sa.common.attach(synth);
  synth->add_option("--duration", sa.duration, "Time samples T")->required()->check(CLI::PositiveNumber);
  synth->add_option("--bins", sa.bins, "Frequency bins")->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--window", sa.window, "Tile side used for labels")->capture_default_str();
  synth->add_option("--burst-rate", sa.burst_rate, "Expected bursts per tile")->capture_default_str()->check(CLI::NonNegativeNumber);
  synth->add_option("--classes", sa.classes, "3 or 4 archetypes")->capture_default_str()->check(CLI::IsMember({3, 4}));
  synth->add_option("--format", sa.format, "PSD output format")->capture_default_str()->check(CLI::IsMember({"csv", "raw"}));

  SegmentArgs ga;
  auto* seg = app.add_subcommand("segment", "Cut a PSD matrix into scaled W x W segments");
  ga.common.attach(seg);
  ga.dataset.attach(seg);
  seg->add_option("--preview", ga.preview, "Write the first N segments as PGM")->capture_default_str();

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Run the DeepCluster training loop");
  ta.common.attach(tr);
  ta.dataset.attach(tr);
  tr->add_option("--epochs", ta.cfg.epochs)->capture_default_str()->check(CLI::Range(std::size_t{1}, std::size_t{1000000}));
  tr->add_option("--clustering-cycle", ta.cfg.clustering_cycle, "Epochs between clustering events")
      ->capture_default_str()
      ->check(CLI::Range(std::size_t{1}, std::size_t{1000000}));
  tr->add_option("--clusters", ta.cfg.clusters, "k")->capture_default_str()->check(CLI::Range(std::size_t{2}, std::size_t{100000}));
  auto* pca_opt = tr->add_option("--pca-dims", ta.cfg.pca_dims)->capture_default_str()->check(CLI::PositiveNumber);
  ta.evr_opt = tr->add_option("--evr-threshold", ta.cfg.evr_threshold, "Pick PCA size by cumulative EVR")
                   ->check(CLI::Range(0.0, 1.0));
  ta.evr_opt->excludes(pca_opt);
  tr->add_option("--lr", ta.cfg.lr)->capture_default_str()->check(CLI::PositiveNumber);
  tr->add_option("--momentum", ta.cfg.momentum)->capture_default_str()->check(CLI::Range(0.0, 0.999999));
  tr->add_option("--batch-size", ta.cfg.batch_size)->capture_default_str()->check(CLI::PositiveNumber);
  tr->add_flag("--no-reinit-head", ta.no_reinit, "Keep the classifier head across clustering events");
  tr->add_option("--kmeans-init", ta.kmeans_init)->capture_default_str()->check(CLI::IsMember({"random", "kmeans++"}));
  tr->add_option("--kmeans-restarts", ta.cfg.kmeans_restarts)->capture_default_str()->check(CLI::PositiveNumber);
  tr->add_option("--base-channels", ta.cfg.arch.base_channels)->capture_default_str()->check(CLI::PositiveNumber);
  tr->add_option("--conv-blocks", ta.cfg.arch.conv_blocks)->capture_default_str()->check(CLI::PositiveNumber);
  tr->add_option("--feature-dim", ta.cfg.arch.feature_dim)->capture_default_str()->check(CLI::PositiveNumber);
  tr->add_option("--cycles", ta.cycles, "Also run the clustering-cycle experiment for these C values")
      ->delimiter(',')
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);

  ExplainArgs ea;
  auto* ex = app.add_subcommand("explain", "Build the shallow tree, attributions and cluster report");
  ea.common.attach(ex);
  ea.dataset.attach(ex);
  ex->add_option("--checkpoint", ea.checkpoint, "Checkpoint directory (default <out>/checkpoint)");
  ex->add_option("--lambda", ea.lambda, "Depth penalty")->capture_default_str()->check(CLI::NonNegativeNumber);
  ex->add_option("--run-id", ea.run_id)->capture_default_str();
  ex->add_option("--target", ea.target, "Explain this logit instead of the predicted cluster");
  ex->add_option("--samples-per-cluster", ea.samples)->capture_default_str();
  ex->add_option("--average-cap", ea.average_cap)->capture_default_str()->check(CLI::PositiveNumber);
  ex->add_option("--attribution-cap", ea.attribution_cap)->capture_default_str()->check(CLI::PositiveNumber);

  VerifyArgs va;
  auto* ve = app.add_subcommand("verify", "Gradient check, EVR curve and t-SNE diagnostics");
  va.common.attach(ve);
  va.dataset.attach(ve);
  ve->add_option("--checkpoint", va.checkpoint, "Checkpoint directory (default: fresh seeded model)");
  ve->add_option("--clusters", va.clusters)->capture_default_str()->check(CLI::Range(std::size_t{2}, std::size_t{100000}));
  ve->add_option("--evr-threshold", va.evr_threshold)->capture_default_str()->check(CLI::Range(0.0, 1.0));
  ve->add_option("--tsne-points", va.tsne_points)->capture_default_str()->check(CLI::Range(std::size_t{4}, std::size_t{5000}));
  ve->add_option("--tsne-iterations", va.tsne_iterations)->capture_default_str()->check(CLI::PositiveNumber);
  ve->add_option("--perplexity", va.perplexity)->capture_default_str()->check(CLI::PositiveNumber);
  ve->add_option("--gradcheck-samples", va.grad_samples)->capture_default_str()->check(CLI::PositiveNumber);
  ve->add_option("--gradcheck-params", va.grad_params, "Parameters probed (0 = all)")->capture_default_str();
  ve->add_option("--gradcheck-tol", va.grad_tol)->capture_default_str()->check(CLI::PositiveNumber);

  try {
    const std::vector<std::string> args = merge_config(raw_args);
    std::vector<std::string> argv_store = {"spectrum_xai"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& s : argv_store) argv.push_back(s.data());
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    set_thread_count(threads);
    if (synth->parsed()) return cmd_synth(sa, synth, out);
    if (seg->parsed()) return cmd_segment(ga, seg, out);
    if (tr->parsed()) return cmd_train(ta, tr, out);
    if (ex->parsed()) return cmd_explain(ea, ex, out);
    if (ve->parsed()) return cmd_verify(va, ve, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace spectrum_xai::cli
