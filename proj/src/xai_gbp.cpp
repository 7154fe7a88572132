#include "spectrum_xai/xai_gbp.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <sstream>

namespace spectrum_xai::xai {

int predicted_cluster(const nn::CnnModel& model, std::span<const double> input) {
  const nn::ActivationRecord rec = nn::forward(model, input);
  const auto logits = rec.logits();
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

AttributionMap guided_backprop(const nn::CnnModel& model, std::span<const double> input, int target,
                               std::size_t segment_id, const nn::ReluObserver* observer) {
  if (target < 0 || static_cast<std::size_t>(target) >= model.num_classes()) {
    throw InvalidConfig("guided_backprop: target " + std::to_string(target) + " outside [0, " +
                        std::to_string(model.num_classes()) + ")");
  }
  const nn::ActivationRecord rec = nn::forward(model, input);
  std::vector<double> seed(model.num_classes(), 0.0);
  seed[static_cast<std::size_t>(target)] = 1.0;
  nn::BackwardOptions opts;
  opts.mode = nn::BackwardMode::guided;
  opts.observer = observer;
  AttributionMap map;
  const nn::Shape& in = model.input_shape();
  map.height = in.c * in.h;
  map.width = in.w;
  map.values = nn::backward(model, rec, seed, opts);
  map.target = target;
  map.segment_id = segment_id;
  return map;
}

AttributionMap guided_backprop(const nn::CnnModel& model, const data::SpectrogramSegment& segment, int target) {
  return guided_backprop(model, segment.pixels, target, segment.segment_id);
}

AttributionMap average_attribution(const nn::CnnModel& model,
                                   const std::vector<const data::SpectrogramSegment*>& segments, int target) {
  if (segments.empty()) throw InvalidConfig("average_attribution: empty segment list");
  const std::size_t side = segments.front()->side;
  for (const auto* s : segments) {
    if (s->side != side) throw StructuralError("average_attribution: segments differ in shape");
  }
  std::vector<AttributionMap> maps(segments.size());
  parallel_for(segments.size(), [&](std::size_t i) { maps[i] = guided_backprop(model, *segments[i], target); });
  AttributionMap avg = maps.front();
  for (std::size_t i = 1; i < maps.size(); ++i) {
    for (std::size_t j = 0; j < avg.values.size(); ++j) avg.values[j] += maps[i].values[j];
  }
  const double inv = 1.0 / static_cast<double>(maps.size());
  for (double& v : avg.values) v *= inv;
  avg.segment_id = 0;
  return avg;
}

std::string to_ppm(const AttributionMap& map) {
  require_finite(map.values, "attribution map");
  double scale = 0.0;
  for (double v : map.values) scale = std::max(scale, std::abs(v));
  std::ostringstream os;
  os << "P3\n" << map.width << ' ' << map.height << "\n255\n";
  for (std::size_t r = 0; r < map.height; ++r) {
    for (std::size_t c = 0; c < map.width; ++c) {
      const double t = scale > 0.0 ? map.values[r * map.width + c] / scale : 0.0;
      // Fade the two other channels toward 0 as |t| grows.
      const long fade = std::lround(255.0 * (1.0 - std::abs(t)));
      const long red = t < 0.0 ? fade : 255;
      const long blue = t > 0.0 ? fade : 255;
      if (c) os << ' ';
      os << red << ' ' << fade << ' ' << blue;
    }
    os << '\n';
  }
  return os.str();
}

std::string to_csv(const AttributionMap& map) {
  std::string out;
  for (std::size_t r = 0; r < map.height; ++r) {
    for (std::size_t c = 0; c < map.width; ++c) {
      if (c) out += ',';
      out += format_double(map.values[r * map.width + c]);
    }
    out += '\n';
  }
  return out;
}

AttributionMap parse_csv(const std::string& text) {
  AttributionMap map;
  std::istringstream is(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::size_t cols = 0;
    const char* p = line.data();
    const char* end = line.data() + line.size();
    while (true) {
      double v = 0.0;
      const auto [next, ec] = std::from_chars(p, end, v);
      if (ec != std::errc()) {
        throw ParseError("attribution csv: bad number", line_no, static_cast<std::size_t>(p - line.data()));
      }
      map.values.push_back(v);
      ++cols;
      p = next;
      if (p == end) break;
      if (*p != ',') throw ParseError("attribution csv: expected ','", line_no, static_cast<std::size_t>(p - line.data()));
      ++p;
    }
    if (map.height == 0) map.width = cols;
    if (cols != map.width) throw StructuralError("attribution csv: ragged row " + std::to_string(line_no));
    ++map.height;
  }
  return map;
}

std::vector<std::string> write_sample(const AttributionMap& map, int cluster, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::string stem =
      (fs::path(dir) / ("cluster_" + std::to_string(cluster) + "_sample_" + std::to_string(map.segment_id))).string();
  write_text_file(stem + ".ppm", to_ppm(map));
  write_text_file(stem + ".csv", to_csv(map));
  return {stem + ".ppm", stem + ".csv"};
}

}  // namespace spectrum_xai::xai
