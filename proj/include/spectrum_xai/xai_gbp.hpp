#pragma once

#include "spectrum_xai/nn.hpp"
#include "spectrum_xai/spectrum_data.hpp"

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace spectrum_xai::xai {

// Signed per-pixel attribution with the input's spatial shape.
struct AttributionMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;  // channels x height x width of the model input
  int target = 0;
  std::size_t segment_id = 0;

  bool operator==(const AttributionMap&) const = default;
};

// argmax of the logits, lowest index on ties.
int predicted_cluster(const nn::CnnModel& model, std::span<const double> input);

// d logit[target] / d input with the guided ReLU rule. The observer, when
// given, sees every ReLU's incoming and outgoing signal.
AttributionMap guided_backprop(const nn::CnnModel& model, std::span<const double> input, int target,
                               std::size_t segment_id = 0, const nn::ReluObserver* observer = nullptr);
AttributionMap guided_backprop(const nn::CnnModel& model, const data::SpectrogramSegment& segment, int target);

// Element-wise mean of the per-segment maps, summed in list order.
AttributionMap average_attribution(const nn::CnnModel& model,
                                   const std::vector<const data::SpectrogramSegment*>& segments, int target);

inline constexpr std::size_t kAttributionCap = 256;

// Diverging red/white/blue P3 image, symmetric about zero with scale max |value|.
std::string to_ppm(const AttributionMap& map);

// One image row per line; values in shortest round-trip form.
std::string to_csv(const AttributionMap& map);
AttributionMap parse_csv(const std::string& text);

// Writes cluster_<cluster>_sample_<segment_id>.{ppm,csv} into dir; returns both paths.
std::vector<std::string> write_sample(const AttributionMap& map, int cluster, const std::string& dir);

}  // namespace spectrum_xai::xai
