#include "spectrum_xai/spectrum_data.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace spectrum_xai::data {

namespace {

constexpr char kRawMagic[] = "SXPSDF32";
constexpr char kSegMagic[] = "SXAISEG";  // 7 chars + NUL = 8 bytes on disk
constexpr std::uint32_t kSegVersion = 1;

}  // namespace

void PsdMatrix::validate() const {
  if (values.size() != bins * samples) {
    throw StructuralError("PsdMatrix: expected " + std::to_string(bins * samples) + " values, have " +
                          std::to_string(values.size()));
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw StructuralError("PsdMatrix: non-finite value at bin " + std::to_string(i / samples) +
                            ", sample " + std::to_string(i % samples));
    }
  }
}

std::size_t region_count(std::size_t bins, std::size_t window) { return window == 0 ? 0 : bins / window; }

std::vector<SpectrogramSegment> segment(const PsdMatrix& matrix, const SegmentationConfig& cfg) {
  const std::size_t w = cfg.window;
  if (w < 2) throw InvalidConfig("segment: window must be at least 2");
  if (w > matrix.bins) {
    throw InvalidConfig("segment: window " + std::to_string(w) + " exceeds bin count " +
                        std::to_string(matrix.bins));
  }
  const std::size_t regions = matrix.bins / w;
  const std::size_t windows = matrix.samples / w;
  std::vector<SpectrogramSegment> out;
  out.reserve(regions * windows);
  for (std::size_t t = 0; t < windows; ++t) {
    for (std::size_t r = 0; r < regions; ++r) {
      SpectrogramSegment s;
      s.side = w;
      s.freq_region = r;
      s.time_index = t;
      s.segment_id = out.size();
      s.pixels.resize(w * w);
      for (std::size_t row = 0; row < w; ++row) {
        const float* src = matrix.values.data() + (r * w + row) * matrix.samples + t * w;
        std::copy(src, src + w, s.pixels.begin() + static_cast<std::ptrdiff_t>(row * w));
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

std::vector<SpectrogramSegment> scale_segments(std::vector<SpectrogramSegment> segments,
                                               const SegmentationConfig& cfg) {
  if (segments.empty()) return segments;
  auto rescale = [](SpectrogramSegment& s, double lo, double hi) {
    const double range = hi - lo;
    for (double& p : s.pixels) {
      p = range > 0.0 ? std::clamp((p - lo) / range, 0.0, 1.0) : 0.0;
    }
  };
  if (cfg.scaling == ScalingMode::global_minmax) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (const auto& s : segments) {
      require_finite(s.pixels, "scale_segments input");
      const auto [mn, mx] = std::minmax_element(s.pixels.begin(), s.pixels.end());
      lo = std::min(lo, *mn);
      hi = std::max(hi, *mx);
    }
    for (auto& s : segments) rescale(s, lo, hi);
  } else {
    for (auto& s : segments) {
      require_finite(s.pixels, "scale_segments input");
      const auto [mn, mx] = std::minmax_element(s.pixels.begin(), s.pixels.end());
      rescale(s, *mn, *mx);
    }
  }
  return segments;
}

std::string archetype_name(Archetype a) {
  switch (a) {
    case Archetype::noise_only: return "noise_only";
    case Archetype::narrowband: return "narrowband";
    case Archetype::burst: return "burst";
    case Archetype::burst_and_narrowband: return "burst_and_narrowband";
  }
  return "unknown";
}

void SynthConfig::validate() const {
  if (window < 2) throw InvalidConfig("synth: window must be at least 2");
  if (window > bins) throw InvalidConfig("synth: window exceeds bin count");
  if (!(burst_rate >= 0.0)) throw InvalidConfig("synth: burst_rate must be >= 0");
  if (!(noise_std_db > 0.0)) throw InvalidConfig("synth: noise std must be > 0");
  if (burst_min_len < 1 || burst_min_len > burst_max_len || burst_max_len > window) {
    throw InvalidConfig("synth: burst length range must satisfy 1 <= min <= max <= window");
  }
  if (n_classes != 3 && n_classes != 4) throw InvalidConfig("synth: n_classes must be 3 or 4");
  for (const auto& ch : narrowband_channels) {
    if (ch.bin >= bins) throw InvalidConfig("synth: narrowband bin " + std::to_string(ch.bin) + " out of range");
  }
}

SynthConfig SynthConfig::desk_default() {
  SynthConfig cfg;
  cfg.narrowband_channels = {{45, -76.0}, {140, -74.0}, {205, -77.0}};
  return cfg;
}

SynthResult synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  SynthResult res;
  PsdMatrix& m = res.matrix;
  m = PsdMatrix(cfg.bins, cfg.duration);
  m.sample_rate_hz = 5.0;

  Rng noise_rng(derive_seed(cfg.seed, 1));
  for (auto& v : m.values) v = static_cast<float>(noise_rng.normal(cfg.noise_mean_db, cfg.noise_std_db));

  Rng nb_rng(derive_seed(cfg.seed, 2));
  for (const auto& ch : cfg.narrowband_channels) {
    for (std::size_t t = 0; t < m.samples; ++t) {
      const float level = static_cast<float>(nb_rng.normal(ch.power_db, 0.5 * cfg.noise_std_db));
      m.at(ch.bin, t) = std::max(m.at(ch.bin, t), level);
    }
  }

  const std::size_t w = cfg.window;
  const std::size_t regions = cfg.bins / w;
  const std::size_t windows = cfg.duration / w;
  Rng burst_rng(derive_seed(cfg.seed, 3));
  std::vector<char> has_burst(regions * windows, 0);
  for (std::size_t r = 0; r < regions; ++r) {
    for (std::size_t tw = 0; tw < windows; ++tw) {
      const unsigned count = burst_rng.poisson(cfg.burst_rate);
      for (unsigned b = 0; b < count; ++b) {
        Burst burst;
        burst.region = r;
        burst.time_index = tw;
        burst.length = cfg.burst_min_len + burst_rng.index(cfg.burst_max_len - cfg.burst_min_len + 1);
        burst.start = tw * w + burst_rng.index(w - burst.length + 1);
        for (std::size_t bin = r * w; bin < (r + 1) * w; ++bin) {
          for (std::size_t t = burst.start; t < burst.start + burst.length; ++t) {
            const float level = static_cast<float>(burst_rng.normal(cfg.burst_power_db, 1.0));
            m.at(bin, t) = std::max(m.at(bin, t), level);
          }
        }
        has_burst[tw * regions + r] = 1;
        res.bursts.push_back(burst);
      }
    }
  }

  std::vector<char> region_narrowband(regions, 0);
  for (const auto& ch : cfg.narrowband_channels) {
    if (ch.bin / w < regions) region_narrowband[ch.bin / w] = 1;
  }
  res.labels.resize(regions * windows);
  for (std::size_t tw = 0; tw < windows; ++tw) {
    for (std::size_t r = 0; r < regions; ++r) {
      const bool burst = has_burst[tw * regions + r] != 0;
      const bool nb = region_narrowband[r] != 0;
      Archetype a = Archetype::noise_only;
      if (burst && nb && cfg.n_classes == 4) {
        a = Archetype::burst_and_narrowband;
      } else if (burst) {
        a = Archetype::burst;
      } else if (nb) {
        a = Archetype::narrowband;
      }
      res.labels[tw * regions + r] = static_cast<int>(a);
    }
  }
  return res;
}

namespace {

PsdMatrix read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  PsdMatrix m;
  std::size_t declared_bins = 0;
  std::size_t declared_samples = 0;
  bool have_header = false;
  std::string line;
  std::size_t line_no = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      // "# bins=<b> samples=<t>"
      const auto b = line.find("bins=");
      const auto t = line.find("samples=");
      if (b != std::string::npos && t != std::string::npos) {
        declared_bins = std::stoull(line.substr(b + 5));
        declared_samples = std::stoull(line.substr(t + 8));
        have_header = true;
      }
      continue;
    }
    std::size_t count = 0;
    const char* p = line.data();
    const char* end = line.data() + line.size();
    while (p <= end) {
      while (p < end && (*p == ' ' || *p == '\t')) ++p;
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(p, end, v);
      if (ec != std::errc()) {
        throw ParseError("read_psd_file: malformed number in " + path, line_no,
                         static_cast<std::size_t>(p - line.data()));
      }
      if (!std::isfinite(v)) {
        throw ParseError("read_psd_file: non-finite value in " + path, line_no,
                         static_cast<std::size_t>(p - line.data()));
      }
      m.values.push_back(static_cast<float>(v));
      ++count;
      p = ptr;
      while (p < end && (*p == ' ' || *p == '\t')) ++p;
      if (p == end) break;
      if (*p != ',') {
        throw ParseError("read_psd_file: expected ',' in " + path, line_no,
                         static_cast<std::size_t>(p - line.data()));
      }
      ++p;
    }
    if (rows == 0) cols = count;
    if (count != cols || (have_header && count != declared_samples)) {
      throw StructuralError("read_psd_file: row " + std::to_string(rows) + " has " + std::to_string(count) +
                            " values, expected " + std::to_string(have_header ? declared_samples : cols));
    }
    ++rows;
  }
  if (have_header && rows != declared_bins) {
    throw StructuralError("read_psd_file: header declares " + std::to_string(declared_bins) + " bins, found " +
                          std::to_string(rows));
  }
  m.bins = rows;
  m.samples = have_header ? declared_samples : cols;
  return m;
}

PsdMatrix read_raw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  BinaryReader r(in);
  std::string magic;
  try {
    magic = r.bytes(8);
  } catch (const ParseError&) {
    throw ParseError("read_psd_file: truncated header in " + path, 0, 0);
  }
  if (magic != std::string_view(kRawMagic, 8)) throw ParseError("read_psd_file: bad magic in " + path, 0, 0);
  const std::uint32_t bins = r.u32();
  const std::uint32_t samples = r.u32();
  PsdMatrix m(bins, samples);
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    float v = 0.0f;
    try {
      v = r.f32();
    } catch (const ParseError&) {
      throw StructuralError("read_psd_file: header declares " + std::to_string(bins) + "x" +
                            std::to_string(samples) + " values but file ends after " + std::to_string(i));
    }
    if (!std::isfinite(v)) {
      throw ParseError("read_psd_file: non-finite value in " + path, 0, r.offset() - 4);
    }
    m.values[i] = v;
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw StructuralError("read_psd_file: trailing bytes after " + std::to_string(m.values.size()) + " values");
  }
  return m;
}

}  // namespace

PsdMatrix read_psd_file(const std::string& path, PsdFormat format) {
  PsdMatrix m = format == PsdFormat::csv ? read_csv(path) : read_raw(path);
  m.validate();
  return m;
}

void write_psd_file(const PsdMatrix& matrix, const std::string& path, PsdFormat format) {
  matrix.validate();
  if (format == PsdFormat::csv) {
    std::ostringstream os;
    os << "# bins=" << matrix.bins << " samples=" << matrix.samples << "\n";
    for (std::size_t b = 0; b < matrix.bins; ++b) {
      for (std::size_t t = 0; t < matrix.samples; ++t) {
        if (t) os << ',';
        std::array<char, 32> buf{};
        auto res = std::to_chars(buf.data(), buf.data() + buf.size(), matrix.at(b, t));
        os.write(buf.data(), res.ptr - buf.data());
      }
      os << '\n';
    }
    write_text_file(path, os.str());
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  BinaryWriter w(out);
  w.bytes(std::string_view(kRawMagic, 8));
  w.u32(static_cast<std::uint32_t>(matrix.bins));
  w.u32(static_cast<std::uint32_t>(matrix.samples));
  for (float v : matrix.values) w.f32(v);
}

std::string to_pgm(std::span<const double> pixels, std::size_t side) {
  std::ostringstream os;
  os << "P2\n" << side << ' ' << side << "\n255\n";
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      const double v = std::clamp(pixels[r * side + c], 0.0, 1.0);
      if (c) os << ' ';
      os << static_cast<int>(std::lround(v * 255.0));
    }
    os << '\n';
  }
  return os.str();
}

void write_segments(const std::vector<SpectrogramSegment>& segments, std::size_t regions,
                    const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  BinaryWriter w(out);
  w.bytes(std::string_view(kSegMagic, 8));
  w.u32(kSegVersion);
  const std::size_t side = segments.empty() ? 0 : segments.front().side;
  w.u32(static_cast<std::uint32_t>(side));
  w.u32(static_cast<std::uint32_t>(regions));
  w.u64(segments.size());
  for (const auto& s : segments) {
    if (s.side != side || s.pixels.size() != side * side) {
      throw StructuralError("write_segments: mixed segment sizes");
    }
    w.u32(static_cast<std::uint32_t>(s.freq_region));
    w.u32(static_cast<std::uint32_t>(s.time_index));
    w.u64(s.segment_id);
    w.f64s(s.pixels);
  }
}

std::vector<SpectrogramSegment> read_segments(const std::string& path, std::size_t* regions) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  BinaryReader r(in);
  if (r.bytes(8) != std::string_view(kSegMagic, 8)) throw ParseError("read_segments: bad magic in " + path, 0, 0);
  const std::uint32_t version = r.u32();
  if (version != kSegVersion) {
    throw ParseError("read_segments: unsupported version " + std::to_string(version), 0, 8);
  }
  const std::uint32_t side = r.u32();
  const std::uint32_t n_regions = r.u32();
  const std::uint64_t count = r.u64();
  if (regions) *regions = n_regions;
  std::vector<SpectrogramSegment> out(count);
  for (auto& s : out) {
    s.side = side;
    s.freq_region = r.u32();
    s.time_index = r.u32();
    s.segment_id = r.u64();
    s.pixels = r.f64s(static_cast<std::size_t>(side) * side);
  }
  return out;
}

std::string dataset_hash(const std::vector<SpectrogramSegment>& segments) {
  Fnv1a h;
  for (const auto& s : segments) {
    const std::uint64_t meta[3] = {s.freq_region, s.time_index, s.segment_id};
    h.update(meta, sizeof(meta));
    h.update(s.pixels);
  }
  return h.hex();
}

}  // namespace spectrum_xai::data
