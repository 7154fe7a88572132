#pragma once

#include "spectrum_xai/common.hpp"

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace spectrum_xai::data {

// Raw PSD measurements, one row per FFT bin, one column per time sample.
struct PsdMatrix {
  std::size_t bins = 0;
  std::size_t samples = 0;  // T
  std::vector<float> values;  // bins x samples, row-major
  double center_frequency_hz = 0.0;
  double bandwidth_hz = 0.0;
  double sample_rate_hz = 5.0;

  PsdMatrix() = default;
  PsdMatrix(std::size_t b, std::size_t t, float fill = 0.0f)
      : bins(b), samples(t), values(b * t, fill) {}

  float& at(std::size_t bin, std::size_t t) { return values[bin * samples + t]; }
  float at(std::size_t bin, std::size_t t) const { return values[bin * samples + t]; }

  // Throws StructuralError if the shape or finiteness invariant is broken.
  void validate() const;
};

enum class ScalingMode { global_minmax, per_segment_minmax };

struct SegmentationConfig {
  std::size_t window = 128;
  ScalingMode scaling = ScalingMode::global_minmax;
};

// W x W tile; pixel (row, col) maps to matrix (freq_region*W + row, time_index*W + col).
struct SpectrogramSegment {
  std::size_t side = 0;
  std::vector<double> pixels;
  std::size_t freq_region = 0;
  std::size_t time_index = 0;
  std::size_t segment_id = 0;

  double& at(std::size_t r, std::size_t c) { return pixels[r * side + c]; }
  double at(std::size_t r, std::size_t c) const { return pixels[r * side + c]; }
};

std::size_t region_count(std::size_t bins, std::size_t window);

// Tiles are emitted time-major: segment_id = time_index * regions + freq_region.
std::vector<SpectrogramSegment> segment(const PsdMatrix& matrix, const SegmentationConfig& cfg);

std::vector<SpectrogramSegment> scale_segments(std::vector<SpectrogramSegment> segments,
                                               const SegmentationConfig& cfg);

// Ground-truth archetype of a tile, by dominance: burst beats narrowband beats noise.
enum class Archetype : int { noise_only = 0, narrowband = 1, burst = 2, burst_and_narrowband = 3 };

std::string archetype_name(Archetype a);

struct NarrowbandChannel {
  std::size_t bin = 0;
  double power_db = -75.0;
};

struct SynthConfig {
  std::size_t bins = 256;
  std::size_t duration = 8000;  // T
  std::size_t window = 32;      // tile side used for labels and burst placement
  double burst_rate = 0.4;      // expected bursts per window per region
  std::size_t burst_min_len = 2;
  std::size_t burst_max_len = 5;
  double burst_power_db = -78.0;
  std::vector<NarrowbandChannel> narrowband_channels;
  double noise_mean_db = -100.0;
  double noise_std_db = 2.0;
  std::uint64_t seed = 0;
  std::size_t n_classes = 4;  // 3 folds burst+narrowband into burst

  void validate() const;
  static SynthConfig desk_default();
};

struct Burst {
  std::size_t region = 0;
  std::size_t time_index = 0;  // tile containing the burst
  std::size_t start = 0;       // absolute time sample
  std::size_t length = 0;
};

struct SynthResult {
  PsdMatrix matrix;
  std::vector<int> labels;  // one per tile, same order as segment()
  std::vector<Burst> bursts;
};

SynthResult synth_generate(const SynthConfig& cfg);

enum class PsdFormat { csv, raw_f32_le };

// CSV: one bin per row, comma separated. Raw: 16-byte header
// ("SXPSDF32", u32 bins, u32 T) followed by bins*T little-endian f32.
PsdMatrix read_psd_file(const std::string& path, PsdFormat format);
void write_psd_file(const PsdMatrix& matrix, const std::string& path, PsdFormat format);

// Plain-text P2 dump of a segment, pixels scaled to 0-255.
std::string to_pgm(std::span<const double> pixels, std::size_t side);

// Segment dataset container ("SXAISEG" magic, f64 pixels).
void write_segments(const std::vector<SpectrogramSegment>& segments, std::size_t regions,
                    const std::string& path);
std::vector<SpectrogramSegment> read_segments(const std::string& path, std::size_t* regions = nullptr);

std::string dataset_hash(const std::vector<SpectrogramSegment>& segments);

}  // namespace spectrum_xai::data
