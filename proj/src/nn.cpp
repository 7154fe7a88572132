#include "spectrum_xai/nn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace spectrum_xai::nn {

namespace {

constexpr char kModelMagic[] = "SXAICNN";  // 8 bytes with NUL
constexpr std::uint32_t kModelVersion = 1;

enum class LayerKind : std::uint32_t { conv2d = 1, relu = 2, maxpool2d = 3, flatten = 4, linear = 5 };

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

using Index = std::ptrdiff_t;

// Output columns ox whose input column ox*stride + kx - pad lies in [0, in_w).
void valid_range(Index in_w, Index out_w, Index stride, Index kx, Index pad, Index& lo, Index& hi) {
  const Index shift = kx - pad;
  lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
  const Index last = in_w - 1 - shift;
  hi = last < 0 ? 0 : std::min(out_w, last / stride + 1);
  if (hi < lo) hi = lo;
}

void conv_forward(const Conv2d& c, const Shape& in, const Shape& out, const double* x, double* y) {
  const Index H = static_cast<Index>(in.h), W = static_cast<Index>(in.w);
  const Index OH = static_cast<Index>(out.h), OW = static_cast<Index>(out.w);
  const Index K = static_cast<Index>(c.kernel), S = static_cast<Index>(c.stride), P = static_cast<Index>(c.pad);
  for (std::size_t oc = 0; oc < c.out_ch; ++oc) {
    double* yp = y + oc * out.h * out.w;
    std::fill(yp, yp + out.h * out.w, c.bias[oc]);
    for (std::size_t ic = 0; ic < c.in_ch; ++ic) {
      const double* xp = x + ic * in.h * in.w;
      const double* wp = c.weight.data() + (oc * c.in_ch + ic) * c.kernel * c.kernel;
      for (Index ky = 0; ky < K; ++ky) {
        for (Index kx = 0; kx < K; ++kx) {
          const double wv = wp[ky * K + kx];
          Index lo = 0, hi = 0;
          valid_range(W, OW, S, kx, P, lo, hi);
          for (Index oy = 0; oy < OH; ++oy) {
            const Index iy = oy * S + ky - P;
            if (iy < 0 || iy >= H) continue;
            double* yr = yp + oy * OW;
            const double* xr = xp + iy * W + kx - P;
            if (S == 1) {
              for (Index ox = lo; ox < hi; ++ox) yr[ox] += wv * xr[ox];
            } else {
              for (Index ox = lo; ox < hi; ++ox) yr[ox] += wv * xr[ox * S];
            }
          }
        }
      }
    }
  }
}

void conv_backward(const Conv2d& c, const Shape& in, const Shape& out, const double* x, const double* g,
                   double* gx, double* gw, double* gb) {
  const Index H = static_cast<Index>(in.h), W = static_cast<Index>(in.w);
  const Index OH = static_cast<Index>(out.h), OW = static_cast<Index>(out.w);
  const Index K = static_cast<Index>(c.kernel), S = static_cast<Index>(c.stride), P = static_cast<Index>(c.pad);
  for (std::size_t oc = 0; oc < c.out_ch; ++oc) {
    const double* gp = g + oc * out.h * out.w;
    if (gb) {
      double s = 0.0;
      for (std::size_t i = 0; i < out.h * out.w; ++i) s += gp[i];
      gb[oc] += s;
    }
    for (std::size_t ic = 0; ic < c.in_ch; ++ic) {
      const double* xp = x + ic * in.h * in.w;
      double* gxp = gx ? gx + ic * in.h * in.w : nullptr;
      const std::size_t wbase = (oc * c.in_ch + ic) * c.kernel * c.kernel;
      for (Index ky = 0; ky < K; ++ky) {
        for (Index kx = 0; kx < K; ++kx) {
          const double wv = c.weight[wbase + ky * K + kx];
          Index lo = 0, hi = 0;
          valid_range(W, OW, S, kx, P, lo, hi);
          double acc = 0.0;
          for (Index oy = 0; oy < OH; ++oy) {
            const Index iy = oy * S + ky - P;
            if (iy < 0 || iy >= H) continue;
            const double* gr = gp + oy * OW;
            const Index off = iy * W + kx - P;
            if (S == 1) {
              const double* xr = xp + off;
              for (Index ox = lo; ox < hi; ++ox) acc += gr[ox] * xr[ox];
              if (gxp) {
                double* gxr = gxp + off;
                for (Index ox = lo; ox < hi; ++ox) gxr[ox] += wv * gr[ox];
              }
            } else {
              for (Index ox = lo; ox < hi; ++ox) acc += gr[ox] * xp[off + ox * S];
              if (gxp) {
                for (Index ox = lo; ox < hi; ++ox) gxp[off + ox * S] += wv * gr[ox];
              }
            }
          }
          if (gw) gw[wbase + ky * K + kx] += acc;
        }
      }
    }
  }
}

void pool_forward(const MaxPool2d& p, const Shape& in, const Shape& out, const double* x, double* y,
                  std::uint32_t* arg) {
  for (std::size_t ch = 0; ch < in.c; ++ch) {
    for (std::size_t oy = 0; oy < out.h; ++oy) {
      for (std::size_t ox = 0; ox < out.w; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = ch * in.h * in.w + (oy * p.stride) * in.w + ox * p.stride;
        for (std::size_t ky = 0; ky < p.kernel; ++ky) {
          for (std::size_t kx = 0; kx < p.kernel; ++kx) {
            const std::size_t idx = ch * in.h * in.w + (oy * p.stride + ky) * in.w + (ox * p.stride + kx);
            if (x[idx] > best) {
              best = x[idx];
              best_idx = idx;
            }
          }
        }
        const std::size_t o = ch * out.h * out.w + oy * out.w + ox;
        y[o] = best;
        arg[o] = static_cast<std::uint32_t>(best_idx);
      }
    }
  }
}

void linear_forward(const Linear& l, const double* x, double* y) {
  for (std::size_t o = 0; o < l.out; ++o) {
    const double* w = l.weight.data() + o * l.in;
    double s = 0.0;
    for (std::size_t i = 0; i < l.in; ++i) s += w[i] * x[i];
    y[o] = s + l.bias[o];
  }
}

double fan_in_bound(const Layer& layer) {
  return std::visit(Overloaded{[](const Conv2d& c) { return std::sqrt(1.0 / static_cast<double>(c.in_ch * c.kernel * c.kernel)); },
                               [](const Linear& l) { return std::sqrt(1.0 / static_cast<double>(l.in)); },
                               [](const auto&) { return 0.0; }},
                    layer);
}

void run_layer(const Layer& layer, const Shape& in, const Shape& out, const double* x, double* y,
               std::vector<std::uint32_t>* arg) {
  std::visit(Overloaded{[&](const Conv2d& c) { conv_forward(c, in, out, x, y); },
                        [&](const Relu&) {
                          for (std::size_t i = 0; i < in.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
                        },
                        [&](const MaxPool2d& p) {
                          arg->resize(out.size());
                          pool_forward(p, in, out, x, y, arg->data());
                        },
                        [&](const Flatten&) { std::copy(x, x + in.size(), y); },
                        [&](const Linear& l) { linear_forward(l, x, y); }},
             layer);
}

const char* layer_name(const Layer& layer) {
  return std::visit(Overloaded{[](const Conv2d&) { return "conv2d"; }, [](const Relu&) { return "relu"; },
                               [](const MaxPool2d&) { return "maxpool2d"; },
                               [](const Flatten&) { return "flatten"; }, [](const Linear&) { return "linear"; }},
                    layer);
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> s, double fill) : shape(std::move(s)) {
  const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  data.assign(n, fill);
}

void Tensor::validate() const {
  const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  if (n != data.size()) throw StructuralError("Tensor: shape product does not match data length");
  if (!grad.empty() && grad.size() != data.size()) throw StructuralError("Tensor: grad length mismatch");
  require_finite(data, "tensor data");
}

CnnModel::CnnModel(Shape input, std::vector<Layer> layers, std::size_t feature_tap)
    : input_(input), layers_(std::move(layers)), feature_tap_(feature_tap) {
  validate_and_infer_shapes();
}

void CnnModel::validate_and_infer_shapes() {
  if (layers_.empty()) throw StructuralError("CnnModel: no layers");
  if (!std::holds_alternative<Linear>(layers_.back())) {
    throw StructuralError("CnnModel: last layer (head) must be Linear");
  }
  if (feature_tap_ >= layers_.size() - 1) throw StructuralError("CnnModel: feature tap must precede the head");
  shapes_.clear();
  Shape cur = input_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string where = "CnnModel layer " + std::to_string(i) + " (" + layer_name(layers_[i]) + "): ";
    cur = std::visit(
        Overloaded{[&](const Conv2d& c) {
                     if (c.in_ch != cur.c) throw StructuralError(where + "channel mismatch");
                     if (c.kernel == 0 || c.stride == 0) throw StructuralError(where + "zero kernel or stride");
                     if (cur.h + 2 * c.pad < c.kernel || cur.w + 2 * c.pad < c.kernel) {
                       throw StructuralError(where + "kernel larger than padded input");
                     }
                     if (c.weight.size() != c.out_ch * c.in_ch * c.kernel * c.kernel || c.bias.size() != c.out_ch) {
                       throw StructuralError(where + "parameter size mismatch");
                     }
                     return Shape{c.out_ch, (cur.h + 2 * c.pad - c.kernel) / c.stride + 1,
                                  (cur.w + 2 * c.pad - c.kernel) / c.stride + 1};
                   },
                   [&](const Relu&) { return cur; },
                   [&](const MaxPool2d& p) {
                     if (p.kernel == 0 || p.stride == 0 || cur.h < p.kernel || cur.w < p.kernel) {
                       throw StructuralError(where + "pool window does not fit");
                     }
                     return Shape{cur.c, (cur.h - p.kernel) / p.stride + 1, (cur.w - p.kernel) / p.stride + 1};
                   },
                   [&](const Flatten&) { return Shape{cur.size(), 1, 1}; },
                   [&](const Linear& l) {
                     if (l.in != cur.size()) throw StructuralError(where + "input size mismatch");
                     if (l.weight.size() != l.in * l.out || l.bias.size() != l.out) {
                       throw StructuralError(where + "parameter size mismatch");
                     }
                     return Shape{l.out, 1, 1};
                   }},
        layers_[i]);
    shapes_.push_back(cur);
  }
}

CnnModel CnnModel::compact(const ArchitectureConfig& arch, std::uint64_t seed) {
  if (arch.window < 2 || arch.conv_blocks == 0 || arch.feature_dim == 0 || arch.classes == 0) {
    throw InvalidConfig("compact architecture: window >= 2 and non-zero blocks, features and classes required");
  }
  std::vector<Layer> layers;
  std::size_t ch = 1;
  std::size_t side = arch.window;
  for (std::size_t b = 0; b < arch.conv_blocks; ++b) {
    if (side < 2) throw InvalidConfig("compact architecture: window too small for the number of pooling blocks");
    const std::size_t out = arch.base_channels << b;
    Conv2d conv;
    conv.in_ch = ch;
    conv.out_ch = out;
    conv.kernel = 3;
    conv.stride = 1;
    conv.pad = 1;
    conv.weight.assign(out * ch * 9, 0.0);
    conv.bias.assign(out, 0.0);
    layers.emplace_back(std::move(conv));
    layers.emplace_back(Relu{});
    layers.emplace_back(MaxPool2d{2, 2});
    ch = out;
    side /= 2;
  }
  layers.emplace_back(Flatten{});
  Linear fc;
  fc.in = ch * side * side;
  fc.out = arch.feature_dim;
  fc.weight.assign(fc.in * fc.out, 0.0);
  fc.bias.assign(fc.out, 0.0);
  layers.emplace_back(std::move(fc));
  const std::size_t tap = layers.size() - 1;
  layers.emplace_back(Relu{});
  Linear head;
  head.in = arch.feature_dim;
  head.out = arch.classes;
  head.weight.assign(head.in * head.out, 0.0);
  head.bias.assign(head.out, 0.0);
  layers.emplace_back(std::move(head));
  CnnModel model(Shape{1, arch.window, arch.window}, std::move(layers), tap);
  model.init_uniform(seed);
  return model;
}

std::size_t CnnModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& layer : layers_) {
    std::visit(Overloaded{[&](const Conv2d& c) { n += c.weight.size() + c.bias.size(); },
                          [&](const Linear& l) { n += l.weight.size() + l.bias.size(); }, [](const auto&) {}},
               layer);
  }
  return n;
}

void CnnModel::init_uniform(std::uint64_t seed) {
  Rng rng(seed);
  for (auto& layer : layers_) {
    const double a = fan_in_bound(layer);
    auto fill = [&](std::vector<double>& v) {
      for (double& x : v) x = rng.uniform(-a, a);
    };
    std::visit(Overloaded{[&](Conv2d& c) {
                            fill(c.weight);
                            fill(c.bias);
                          },
                          [&](Linear& l) {
                            fill(l.weight);
                            fill(l.bias);
                          },
                          [](auto&) {}},
               layer);
  }
}

std::uint64_t CnnModel::parameter_hash(bool include_head) const {
  Fnv1a h;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (!include_head && i == head_index()) continue;
    std::visit(Overloaded{[&](const Conv2d& c) {
                            h.update(c.weight);
                            h.update(c.bias);
                          },
                          [&](const Linear& l) {
                            h.update(l.weight);
                            h.update(l.bias);
                          },
                          [](const auto&) {}},
               layers_[i]);
  }
  return h.value();
}

bool CnnModel::operator==(const CnnModel& other) const {
  if (!(input_ == other.input_) || feature_tap_ != other.feature_tap_ || layers_.size() != other.layers_.size()) {
    return false;
  }
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].index() != other.layers_[i].index()) return false;
    const bool same = std::visit(
        Overloaded{[&](const Conv2d& a) {
                     const auto& b = std::get<Conv2d>(other.layers_[i]);
                     return a.in_ch == b.in_ch && a.out_ch == b.out_ch && a.kernel == b.kernel &&
                            a.stride == b.stride && a.pad == b.pad && a.weight == b.weight && a.bias == b.bias;
                   },
                   [&](const MaxPool2d& a) {
                     const auto& b = std::get<MaxPool2d>(other.layers_[i]);
                     return a.kernel == b.kernel && a.stride == b.stride;
                   },
                   [&](const Linear& a) {
                     const auto& b = std::get<Linear>(other.layers_[i]);
                     return a.in == b.in && a.out == b.out && a.weight == b.weight && a.bias == b.bias;
                   },
                   [](const auto&) { return true; }},
        layers_[i]);
    if (!same) return false;
  }
  return true;
}

Gradients Gradients::zeros_like(const CnnModel& model) {
  Gradients g;
  for (const auto& layer : model.layers()) {
    std::vector<double> w, b;
    std::visit(Overloaded{[&](const Conv2d& c) {
                            w.assign(c.weight.size(), 0.0);
                            b.assign(c.bias.size(), 0.0);
                          },
                          [&](const Linear& l) {
                            w.assign(l.weight.size(), 0.0);
                            b.assign(l.bias.size(), 0.0);
                          },
                          [](const auto&) {}},
               layer);
    g.weight.push_back(std::move(w));
    g.bias.push_back(std::move(b));
  }
  return g;
}

void Gradients::add(const Gradients& other) {
  for (std::size_t i = 0; i < weight.size(); ++i) {
    for (std::size_t j = 0; j < weight[i].size(); ++j) weight[i][j] += other.weight[i][j];
    for (std::size_t j = 0; j < bias[i].size(); ++j) bias[i][j] += other.bias[i][j];
  }
}

void Gradients::scale(double s) {
  for (auto& w : weight) {
    for (double& x : w) x *= s;
  }
  for (auto& b : bias) {
    for (double& x : b) x *= s;
  }
}

std::vector<double> forward_until(const CnnModel& model, std::span<const double> input, std::size_t last_layer) {
  if (input.size() != model.input_shape().size()) {
    throw StructuralError("forward: input has " + std::to_string(input.size()) + " values, model expects " +
                          std::to_string(model.input_shape().size()));
  }
  std::vector<double> cur(input.begin(), input.end());
  std::vector<double> next;
  std::vector<std::uint32_t> arg;
  Shape in_shape = model.input_shape();
  const auto& shapes = model.output_shapes();
  for (std::size_t i = 0; i <= last_layer && i < model.layers().size(); ++i) {
    next.assign(shapes[i].size(), 0.0);
    run_layer(model.layers()[i], in_shape, shapes[i], cur.data(), next.data(), &arg);
    require_finite(next, "forward activation");
    std::swap(cur, next);
    in_shape = shapes[i];
  }
  return cur;
}

ActivationRecord forward(const CnnModel& model, std::span<const double> input) {
  if (input.size() != model.input_shape().size()) {
    throw StructuralError("forward: input has " + std::to_string(input.size()) + " values, model expects " +
                          std::to_string(model.input_shape().size()));
  }
  ActivationRecord rec;
  rec.input.assign(input.begin(), input.end());
  const auto& layers = model.layers();
  const auto& shapes = model.output_shapes();
  rec.outputs.resize(layers.size());
  rec.argmax.resize(layers.size());
  Shape in_shape = model.input_shape();
  const double* x = rec.input.data();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    rec.outputs[i].assign(shapes[i].size(), 0.0);
    run_layer(layers[i], in_shape, shapes[i], x, rec.outputs[i].data(), &rec.argmax[i]);
    require_finite(rec.outputs[i], "forward activation");
    x = rec.outputs[i].data();
    in_shape = shapes[i];
  }
  return rec;
}

BatchOutput forward(const CnnModel& model, const Tensor& inputs, bool record) {
  const Shape& in = model.input_shape();
  if (inputs.shape.size() != 4 || inputs.shape[1] != in.c || inputs.shape[2] != in.h || inputs.shape[3] != in.w) {
    throw StructuralError("forward: batch shape does not match model input");
  }
  inputs.validate();
  const std::size_t batch = inputs.shape[0];
  BatchOutput out;
  out.logits = Matrix(batch, model.num_classes());
  out.features = Matrix(batch, model.feature_dim());
  out.records.resize(batch);
  parallel_for(batch, [&](std::size_t b) {
    std::span<const double> x(inputs.data.data() + b * in.size(), in.size());
    ActivationRecord rec = forward(model, x);
    const auto logits = rec.logits();
    std::copy(logits.begin(), logits.end(), out.logits.row(b).begin());
    const auto& feat = rec.outputs[model.feature_tap()];
    std::copy(feat.begin(), feat.end(), out.features.row(b).begin());
    if (record) out.records[b] = std::move(rec);
  });
  if (!record) out.records.clear();
  return out;
}

std::vector<double> backward(const CnnModel& model, const ActivationRecord& record,
                             std::span<const double> grad_logits, const BackwardOptions& opts) {
  const auto& layers = model.layers();
  if (record.empty() || record.outputs.size() != layers.size()) {
    throw StateError("backward: no forward record for this model");
  }
  if (grad_logits.size() != model.num_classes()) throw StructuralError("backward: gradient size mismatch");
  const auto& shapes = model.output_shapes();
  std::vector<double> g(grad_logits.begin(), grad_logits.end());
  std::vector<double> gin;
  for (std::size_t li = layers.size(); li-- > 0;) {
    const Shape in_shape = li == 0 ? model.input_shape() : shapes[li - 1];
    const std::span<const double> x = record.pre_activation(li);
    const bool need_gin = li > 0 || opts.want_input_grad;
    gin.assign(need_gin ? in_shape.size() : 0, 0.0);
    double* gw = nullptr;
    double* gb = nullptr;
    if (opts.param_grads) {
      gw = opts.param_grads->weight[li].empty() ? nullptr : opts.param_grads->weight[li].data();
      gb = opts.param_grads->bias[li].empty() ? nullptr : opts.param_grads->bias[li].data();
    }
    std::visit(
        Overloaded{
            [&](const Conv2d& c) {
              conv_backward(c, in_shape, shapes[li], x.data(), g.data(), need_gin ? gin.data() : nullptr, gw, gb);
            },
            [&](const Relu&) {
              if (!need_gin) return;
              if (opts.mode == BackwardMode::guided) {
                for (std::size_t i = 0; i < g.size(); ++i) gin[i] = (x[i] > 0.0 && g[i] > 0.0) ? g[i] : 0.0;
              } else {
                for (std::size_t i = 0; i < g.size(); ++i) gin[i] = x[i] > 0.0 ? g[i] : 0.0;
              }
              if (opts.observer && *opts.observer) (*opts.observer)(ReluTrace{li, x, g, gin});
            },
            [&](const MaxPool2d&) {
              if (!need_gin) return;
              const auto& arg = record.argmax[li];
              for (std::size_t i = 0; i < g.size(); ++i) gin[arg[i]] += g[i];
            },
            [&](const Flatten&) {
              if (need_gin) std::copy(g.begin(), g.end(), gin.begin());
            },
            [&](const Linear& l) {
              for (std::size_t o = 0; o < l.out; ++o) {
                const double go = g[o];
                if (gb) gb[o] += go;
                if (gw) {
                  double* gwr = gw + o * l.in;
                  for (std::size_t i = 0; i < l.in; ++i) gwr[i] += go * x[i];
                }
                if (need_gin) {
                  const double* wr = l.weight.data() + o * l.in;
                  for (std::size_t i = 0; i < l.in; ++i) gin[i] += wr[i] * go;
                }
              }
            }},
        layers[li]);
    std::swap(g, gin);
  }
  if (!opts.want_input_grad) return {};
  require_finite(g, "input gradient");
  return g;
}

double cross_entropy_row(std::span<const double> logits, int label, std::span<double> grad) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) {
    throw InvalidConfig("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                        std::to_string(logits.size()) + ")");
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - mx);
  const double lse = mx + std::log(sum);
  if (!grad.empty()) {
    for (std::size_t j = 0; j < logits.size(); ++j) grad[j] = std::exp(logits[j] - lse);
    grad[static_cast<std::size_t>(label)] -= 1.0;
  }
  const double loss = lse - logits[static_cast<std::size_t>(label)];
  if (!std::isfinite(loss)) throw NumericError("cross_entropy: non-finite loss");
  return loss;
}

double cross_entropy(const Matrix& logits, std::span<const int> labels) {
  if (labels.size() != logits.rows || logits.rows == 0) {
    throw StructuralError("cross_entropy: need one label per logit row");
  }
  double total = 0.0;
  for (std::size_t b = 0; b < logits.rows; ++b) total += cross_entropy_row(logits.row(b), labels[b]);
  return total / static_cast<double>(logits.rows);
}

Matrix cross_entropy_grad(const Matrix& logits, std::span<const int> labels) {
  if (labels.size() != logits.rows || logits.rows == 0) {
    throw StructuralError("cross_entropy: need one label per logit row");
  }
  Matrix g(logits.rows, logits.cols);
  const double inv = 1.0 / static_cast<double>(logits.rows);
  for (std::size_t b = 0; b < logits.rows; ++b) {
    cross_entropy_row(logits.row(b), labels[b], g.row(b));
    for (double& v : g.row(b)) v *= inv;
  }
  return g;
}

SgdOptimizer::SgdOptimizer(const CnnModel& model, double lr, double momentum)
    : lr_(lr), momentum_(momentum), velocity_(Gradients::zeros_like(model)) {}

void SgdOptimizer::step(CnnModel& model, const Gradients& grads) {
  auto update = [&](std::vector<double>& p, std::vector<double>& v, const std::vector<double>& g) {
    if (p.size() != g.size()) throw StructuralError("sgd_step: gradient shape mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = momentum_ * v[i] + g[i];
      p[i] -= lr_ * v[i];
    }
  };
  auto& layers = model.layers();
  if (grads.weight.size() != layers.size()) throw StructuralError("sgd_step: gradient layer count mismatch");
  for (std::size_t li = 0; li < layers.size(); ++li) {
    std::visit(Overloaded{[&](Conv2d& c) {
                            update(c.weight, velocity_.weight[li], grads.weight[li]);
                            update(c.bias, velocity_.bias[li], grads.bias[li]);
                          },
                          [&](Linear& l) {
                            update(l.weight, velocity_.weight[li], grads.weight[li]);
                            update(l.bias, velocity_.bias[li], grads.bias[li]);
                          },
                          [](auto&) {}},
               layers[li]);
  }
}

void SgdOptimizer::reset_head_state(const CnnModel& model) {
  const std::size_t h = model.head_index();
  std::fill(velocity_.weight[h].begin(), velocity_.weight[h].end(), 0.0);
  std::fill(velocity_.bias[h].begin(), velocity_.bias[h].end(), 0.0);
}

void reinit_head(CnnModel& model, std::uint64_t seed) {
  auto& head = std::get<Linear>(model.layers()[model.head_index()]);
  const double a = std::sqrt(1.0 / static_cast<double>(head.in));
  Rng rng(seed);
  for (double& w : head.weight) w = rng.uniform(-a, a);
  for (double& b : head.bias) b = rng.uniform(-a, a);
}

void save_model(const CnnModel& model, std::ostream& os) {
  BinaryWriter w(os);
  w.bytes(std::string_view(kModelMagic, 8));
  w.u32(kModelVersion);
  const Shape& in = model.input_shape();
  w.u32(static_cast<std::uint32_t>(in.c));
  w.u32(static_cast<std::uint32_t>(in.h));
  w.u32(static_cast<std::uint32_t>(in.w));
  w.u32(static_cast<std::uint32_t>(model.feature_tap()));
  w.u32(static_cast<std::uint32_t>(model.layers().size()));
  for (const auto& layer : model.layers()) {
    std::visit(Overloaded{[&](const Conv2d& c) {
                            w.u32(static_cast<std::uint32_t>(LayerKind::conv2d));
                            for (auto v : {c.in_ch, c.out_ch, c.kernel, c.stride, c.pad}) {
                              w.u32(static_cast<std::uint32_t>(v));
                            }
                          },
                          [&](const Relu&) { w.u32(static_cast<std::uint32_t>(LayerKind::relu)); },
                          [&](const MaxPool2d& p) {
                            w.u32(static_cast<std::uint32_t>(LayerKind::maxpool2d));
                            w.u32(static_cast<std::uint32_t>(p.kernel));
                            w.u32(static_cast<std::uint32_t>(p.stride));
                          },
                          [&](const Flatten&) { w.u32(static_cast<std::uint32_t>(LayerKind::flatten)); },
                          [&](const Linear& l) {
                            w.u32(static_cast<std::uint32_t>(LayerKind::linear));
                            w.u32(static_cast<std::uint32_t>(l.in));
                            w.u32(static_cast<std::uint32_t>(l.out));
                          }},
               layer);
  }
  for (const auto& layer : model.layers()) {
    std::visit(Overloaded{[&](const Conv2d& c) {
                            w.u64(c.weight.size());
                            w.f64s(c.weight);
                            w.u64(c.bias.size());
                            w.f64s(c.bias);
                          },
                          [&](const Linear& l) {
                            w.u64(l.weight.size());
                            w.f64s(l.weight);
                            w.u64(l.bias.size());
                            w.f64s(l.bias);
                          },
                          [](const auto&) {}},
               layer);
  }
}

CnnModel load_model(std::istream& is) {
  BinaryReader r(is);
  if (r.bytes(8) != std::string_view(kModelMagic, 8)) throw ParseError("load_model: bad magic", 0, 0);
  const std::uint32_t version = r.u32();
  if (version != kModelVersion) throw ParseError("load_model: unsupported version " + std::to_string(version), 0, 8);
  Shape in;
  in.c = r.u32();
  in.h = r.u32();
  in.w = r.u32();
  const std::size_t tap = r.u32();
  const std::size_t count = r.u32();
  std::vector<Layer> layers;
  for (std::size_t i = 0; i < count; ++i) {
    const auto kind = static_cast<LayerKind>(r.u32());
    switch (kind) {
      case LayerKind::conv2d: {
        Conv2d c;
        c.in_ch = r.u32();
        c.out_ch = r.u32();
        c.kernel = r.u32();
        c.stride = r.u32();
        c.pad = r.u32();
        layers.emplace_back(std::move(c));
        break;
      }
      case LayerKind::relu: layers.emplace_back(Relu{}); break;
      case LayerKind::maxpool2d: {
        MaxPool2d p;
        p.kernel = r.u32();
        p.stride = r.u32();
        layers.emplace_back(p);
        break;
      }
      case LayerKind::flatten: layers.emplace_back(Flatten{}); break;
      case LayerKind::linear: {
        Linear l;
        l.in = r.u32();
        l.out = r.u32();
        layers.emplace_back(std::move(l));
        break;
      }
      default: throw ParseError("load_model: unknown layer kind", 0, r.offset() - 4);
    }
  }
  auto blob = [&](std::vector<double>& v) {
    const std::uint64_t n = r.u64();
    if (n > (std::uint64_t{1} << 32)) throw ParseError("load_model: implausible blob size", 0, r.offset() - 8);
    v = r.f64s(static_cast<std::size_t>(n));
  };
  for (auto& layer : layers) {
    std::visit(Overloaded{[&](Conv2d& c) {
                            blob(c.weight);
                            blob(c.bias);
                          },
                          [&](Linear& l) {
                            blob(l.weight);
                            blob(l.bias);
                          },
                          [](auto&) {}},
               layer);
  }
  return CnnModel(in, std::move(layers), tap);
}

void save_model(const CnnModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  save_model(model, out);
}

CnnModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return load_model(in);
}

namespace {

struct Probe {
  double loss = 0.0;
  std::uint64_t pattern = 0;
};

Probe probe(const CnnModel& model, const Tensor& inputs, std::span<const int> labels, const std::vector<double>* input_override) {
  const std::size_t batch = inputs.shape[0];
  const std::size_t per = model.input_shape().size();
  const std::vector<double>& data = input_override ? *input_override : inputs.data;
  Probe p;
  Fnv1a h;
  for (std::size_t b = 0; b < batch; ++b) {
    const ActivationRecord rec = forward(model, std::span<const double>(data.data() + b * per, per));
    p.loss += cross_entropy_row(rec.logits(), labels[b]);
    for (std::size_t li = 0; li < model.layers().size(); ++li) {
      if (std::holds_alternative<Relu>(model.layers()[li])) {
        for (double v : rec.pre_activation(li)) {
          const unsigned char bit = v > 0.0 ? 1 : 0;
          h.update(&bit, 1);
        }
      } else if (std::holds_alternative<MaxPool2d>(model.layers()[li])) {
        h.update(rec.argmax[li].data(), rec.argmax[li].size() * sizeof(std::uint32_t));
      }
    }
  }
  p.loss /= static_cast<double>(batch);
  p.pattern = h.value();
  return p;
}

std::vector<double>* param_blob(CnnModel& model, std::size_t layer, bool bias) {
  return std::visit(Overloaded{[&](Conv2d& c) { return bias ? &c.bias : &c.weight; },
                               [&](Linear& l) { return bias ? &l.bias : &l.weight; },
                               [](auto&) -> std::vector<double>* { return nullptr; }},
                    model.layers()[layer]);
}

}  // namespace

GradCheckReport gradient_check(const CnnModel& model, const Tensor& inputs, std::span<const int> labels,
                               const GradCheckOptions& opts) {
  const std::size_t batch = inputs.shape.at(0);
  if (labels.size() != batch) throw StructuralError("gradient_check: need one label per sample");
  const std::size_t per = model.input_shape().size();

  Gradients analytic = Gradients::zeros_like(model);
  std::vector<double> input_grad(inputs.data.size(), 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const ActivationRecord rec = forward(model, std::span<const double>(inputs.data.data() + b * per, per));
    std::vector<double> gl(model.num_classes());
    cross_entropy_row(rec.logits(), labels[b], gl);
    for (double& v : gl) v /= static_cast<double>(batch);
    BackwardOptions bo;
    bo.param_grads = &analytic;
    const auto gi = backward(model, rec, gl, bo);
    std::copy(gi.begin(), gi.end(), input_grad.begin() + static_cast<std::ptrdiff_t>(b * per));
  }

  struct Target {
    std::size_t layer;  // layers.size() marks the input
    bool bias;
    std::size_t index;
  };
  std::vector<Target> targets;
  const std::size_t n_layers = model.layers().size();
  for (std::size_t li = 0; li < n_layers; ++li) {
    for (std::size_t i = 0; i < analytic.weight[li].size(); ++i) targets.push_back({li, false, i});
    for (std::size_t i = 0; i < analytic.bias[li].size(); ++i) targets.push_back({li, true, i});
  }
  if (opts.include_input) {
    for (std::size_t i = 0; i < inputs.data.size(); ++i) targets.push_back({n_layers, false, i});
  }
  if (opts.max_params > 0 && opts.max_params < targets.size()) {
    Rng rng(opts.seed);
    auto pick = rng.sample_without_replacement(targets.size(), opts.max_params);
    std::sort(pick.begin(), pick.end());
    std::vector<Target> subset;
    for (auto i : pick) subset.push_back(targets[i]);
    targets = std::move(subset);
  }

  CnnModel work = model;
  std::vector<double> input_work = inputs.data;
  const std::uint64_t base_pattern = probe(work, inputs, labels, nullptr).pattern;
  GradCheckReport report;
  for (const auto& t : targets) {
    double* slot = nullptr;
    double a = 0.0;
    if (t.layer == n_layers) {
      slot = &input_work[t.index];
      a = input_grad[t.index];
    } else {
      slot = &(*param_blob(work, t.layer, t.bias))[t.index];
      a = t.bias ? analytic.bias[t.layer][t.index] : analytic.weight[t.layer][t.index];
    }
    const double saved = *slot;
    const std::vector<double>* override_input = t.layer == n_layers ? &input_work : nullptr;
    *slot = saved + opts.eps;
    const Probe plus = probe(work, inputs, labels, override_input);
    *slot = saved - opts.eps;
    const Probe minus = probe(work, inputs, labels, override_input);
    *slot = saved;
    if (plus.pattern != base_pattern || minus.pattern != base_pattern) {
      ++report.skipped_kinks;
      continue;
    }
    const double numeric = (plus.loss - minus.loss) / (2.0 * opts.eps);
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-5});
    report.max_rel_error = std::max(report.max_rel_error, std::abs(a - numeric) / denom);
    ++report.checked;
  }
  return report;
}

}  // namespace spectrum_xai::nn
