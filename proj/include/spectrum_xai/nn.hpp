#pragma once

#include "spectrum_xai/common.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace spectrum_xai::nn {

// Dense tensor with row-major storage. `grad` is empty unless populated.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::vector<double> grad;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, double fill = 0.0);

  std::size_t size() const { return data.size(); }
  // Throws StructuralError when the shape product or grad length disagree with data.
  void validate() const;
};

struct Conv2d {
  std::size_t in_ch = 1;
  std::size_t out_ch = 1;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::vector<double> weight;  // out_ch x in_ch x kernel x kernel
  std::vector<double> bias;    // out_ch
};

struct Relu {};

struct MaxPool2d {
  std::size_t kernel = 2;
  std::size_t stride = 2;
};

struct Flatten {};

struct Linear {
  std::size_t in = 1;
  std::size_t out = 1;
  std::vector<double> weight;  // out x in
  std::vector<double> bias;    // out
};

using Layer = std::variant<Conv2d, Relu, MaxPool2d, Flatten, Linear>;

// Activation shape of one sample, channels x height x width.
struct Shape {
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;
  std::size_t size() const { return c * h * w; }
  bool operator==(const Shape&) const = default;
};

struct ArchitectureConfig {
  std::size_t window = 32;
  std::size_t base_channels = 4;  // doubled per block
  std::size_t conv_blocks = 3;
  std::size_t feature_dim = 64;
  std::size_t classes = 8;
};

class CnnModel {
 public:
  CnnModel() = default;
  // The last layer must be Linear (the head) and feature_tap must precede it.
  CnnModel(Shape input, std::vector<Layer> layers, std::size_t feature_tap);

  // conv blocks (3x3, pad 1, ReLU, 2x2 max-pool) -> Flatten -> Linear(D) [tap] -> ReLU -> Linear(k).
  static CnnModel compact(const ArchitectureConfig& arch, std::uint64_t seed);

  const Shape& input_shape() const { return input_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Shape>& output_shapes() const { return shapes_; }
  std::size_t feature_tap() const { return feature_tap_; }
  std::size_t feature_dim() const { return shapes_[feature_tap_].size(); }
  std::size_t head_index() const { return layers_.size() - 1; }
  std::size_t num_classes() const { return shapes_.back().size(); }
  std::size_t parameter_count() const;

  // uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) for every parameterised layer.
  void init_uniform(std::uint64_t seed);

  std::uint64_t parameter_hash(bool include_head = true) const;

  bool operator==(const CnnModel& other) const;

 private:
  void validate_and_infer_shapes();

  Shape input_;
  std::vector<Layer> layers_;
  std::vector<Shape> shapes_;
  std::size_t feature_tap_ = 0;
};

// Per-sample forward trace. outputs[i] is the output of layer i; a ReLU's
// pre-activation is outputs[i-1] (or the input for i == 0).
struct ActivationRecord {
  std::vector<double> input;
  std::vector<std::vector<double>> outputs;
  std::vector<std::vector<std::uint32_t>> argmax;  // per layer; only MaxPool2d entries are filled

  bool empty() const { return outputs.empty(); }
  std::span<const double> logits() const { return outputs.back(); }
  std::span<const double> pre_activation(std::size_t layer) const {
    return layer == 0 ? std::span<const double>(input) : std::span<const double>(outputs[layer - 1]);
  }
};

// Gradient buffers mirroring the model's parameters (empty for parameter-free layers).
struct Gradients {
  std::vector<std::vector<double>> weight;
  std::vector<std::vector<double>> bias;

  static Gradients zeros_like(const CnnModel& model);
  void add(const Gradients& other);
  void scale(double s);
};

ActivationRecord forward(const CnnModel& model, std::span<const double> input);

// Runs layers [0, last_layer] only.
std::vector<double> forward_until(const CnnModel& model, std::span<const double> input, std::size_t last_layer);

struct BatchOutput {
  Matrix logits;    // B x k
  Matrix features;  // B x D
  std::vector<ActivationRecord> records;
};

// inputs: B x C x H x W matching the model's input shape.
BatchOutput forward(const CnnModel& model, const Tensor& inputs, bool record = true);

enum class BackwardMode { standard, guided };

struct ReluTrace {
  std::size_t layer = 0;
  std::span<const double> pre_activation;
  std::span<const double> incoming;  // gradient arriving from above
  std::span<const double> outgoing;  // gradient passed below
};

using ReluObserver = std::function<void(const ReluTrace&)>;

struct BackwardOptions {
  BackwardMode mode = BackwardMode::standard;
  Gradients* param_grads = nullptr;  // accumulated into when set
  bool want_input_grad = true;
  const ReluObserver* observer = nullptr;
};

// Reverse pass from dL/dlogits. Returns dL/dinput (empty if not requested).
std::vector<double> backward(const CnnModel& model, const ActivationRecord& record,
                             std::span<const double> grad_logits, const BackwardOptions& opts = {});

// Mean cross-entropy over the batch, log-sum-exp stabilised.
double cross_entropy(const Matrix& logits, std::span<const int> labels);

// Loss of one row; writes softmax - onehot into grad when non-empty.
double cross_entropy_row(std::span<const double> logits, int label, std::span<double> grad = {});

// Mean-reduced gradient of cross_entropy with respect to the logits.
Matrix cross_entropy_grad(const Matrix& logits, std::span<const int> labels);

// Momentum SGD: v <- momentum*v + g; p <- p - lr*v.
class SgdOptimizer {
 public:
  SgdOptimizer(const CnnModel& model, double lr, double momentum);
  void step(CnnModel& model, const Gradients& grads);
  void reset_head_state(const CnnModel& model);
  double lr() const { return lr_; }
  double momentum() const { return momentum_; }

 private:
  double lr_;
  double momentum_;
  Gradients velocity_;
};

// Redraws only the final Linear layer from uniform(-a, a), a = sqrt(1/fan_in).
void reinit_head(CnnModel& model, std::uint64_t seed);

void save_model(const CnnModel& model, std::ostream& os);
CnnModel load_model(std::istream& is);
void save_model(const CnnModel& model, const std::string& path);
CnnModel load_model(const std::string& path);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;  // perturbations that flipped a ReLU mask or pool argmax
  bool passed(double tol) const { return checked > 0 && max_rel_error < tol; }
};

struct GradCheckOptions {
  double eps = 1e-3;
  std::size_t max_params = 0;  // 0 checks every parameter; otherwise a seeded subset
  bool include_input = true;
  std::uint64_t seed = 0;
};

// Central finite differences of the mean cross-entropy versus backward().
GradCheckReport gradient_check(const CnnModel& model, const Tensor& inputs, std::span<const int> labels,
                               const GradCheckOptions& opts = {});

}  // namespace spectrum_xai::nn
