#include "attrib/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <charconv>
#include <utility>

#include <Eigen/Dense>

#include "attrib/error.hpp"

namespace attrib {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::string_view layer_kind(const Layer& layer) {
  return std::visit(
      Overloaded{
          [](const DenseLayer&) { return std::string_view("dense"); },
          [](const Conv2dLayer&) { return std::string_view("conv2d"); },
          [](const ReluLayer&) { return std::string_view("relu"); },
          [](const MaxPool2dLayer&) { return std::string_view("maxpool2d"); },
          [](const GlobalAvgPoolLayer&) {
            return std::string_view("global_avg_pool");
          },
          [](const FlattenLayer&) { return std::string_view("flatten"); },
      },
      layer);
}

namespace {

// ---------------------------------------------------------------------------
// Per-element kernels shared by the full and the incremental forward pass.

double dense_at(const DenseLayer& d, const Tensor& x, std::size_t o) {
  double acc = d.bias[o];
  const double* w = d.weight.data().data() + o * d.in;
  for (std::size_t i = 0; i < d.in; ++i) acc += w[i] * x[i];
  return acc;
}

std::size_t conv_out_extent(std::size_t in, const Conv2dLayer& c) {
  return (in + 2 * c.padding - c.kernel) / c.stride + 1;
}

// Patch matrix of a conv input: row (c, kh, kw), column (oh, ow); taps in the
// padding are zero.
Eigen::MatrixXd im2col(const Conv2dLayer& conv, const Tensor& x, std::size_t oh_n,
                       std::size_t ow_n) {
  const std::size_t in_h = x.shape()[1];
  const std::size_t in_w = x.shape()[2];
  const std::size_t k = conv.kernel;
  Eigen::MatrixXd cols = Eigen::MatrixXd::Zero(
      static_cast<Eigen::Index>(conv.in_channels * k * k), static_cast<Eigen::Index>(oh_n * ow_n));
  for (std::size_t oh = 0; oh < oh_n; ++oh)
    for (std::size_t ow = 0; ow < ow_n; ++ow) {
      double* col = cols.data() + (oh * ow_n + ow) * static_cast<std::size_t>(cols.rows());
      for (std::size_t c = 0; c < conv.in_channels; ++c)
        for (std::size_t kh = 0; kh < k; ++kh) {
          const std::size_t ih = oh * conv.stride + kh;
          if (ih < conv.padding || ih - conv.padding >= in_h) continue;
          for (std::size_t kw = 0; kw < k; ++kw) {
            const std::size_t iw = ow * conv.stride + kw;
            if (iw < conv.padding || iw - conv.padding >= in_w) continue;
            col[(c * k + kh) * k + kw] = x.at(c, ih - conv.padding, iw - conv.padding);
          }
        }
    }
  return cols;
}

// Adds every patch-matrix entry back onto the input cell it was read from.
void col2im(const Conv2dLayer& conv, const Eigen::MatrixXd& cols, std::size_t oh_n,
            std::size_t ow_n, Tensor& out) {
  const std::size_t in_h = out.shape()[1];
  const std::size_t in_w = out.shape()[2];
  const std::size_t k = conv.kernel;
  for (std::size_t oh = 0; oh < oh_n; ++oh)
    for (std::size_t ow = 0; ow < ow_n; ++ow) {
      const double* col = cols.data() + (oh * ow_n + ow) * static_cast<std::size_t>(cols.rows());
      for (std::size_t c = 0; c < conv.in_channels; ++c)
        for (std::size_t kh = 0; kh < k; ++kh) {
          const std::size_t ih = oh * conv.stride + kh;
          if (ih < conv.padding || ih - conv.padding >= in_h) continue;
          for (std::size_t kw = 0; kw < k; ++kw) {
            const std::size_t iw = ow * conv.stride + kw;
            if (iw < conv.padding || iw - conv.padding >= in_w) continue;
            out.at(c, ih - conv.padding, iw - conv.padding) += col[(c * k + kh) * k + kw];
          }
        }
    }
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMatrix> conv_weights(const Conv2dLayer& conv) {
  return {conv.weight.data().data(), static_cast<Eigen::Index>(conv.out_channels),
          static_cast<Eigen::Index>(conv.in_channels * conv.kernel * conv.kernel)};
}

void conv_forward(const Conv2dLayer& conv, const Tensor& x, Tensor& y) {
  const std::size_t oh_n = y.shape()[1];
  const std::size_t ow_n = y.shape()[2];
  const Eigen::MatrixXd cols = im2col(conv, x, oh_n, ow_n);
  Eigen::Map<RowMatrix> out(y.data().data(), static_cast<Eigen::Index>(conv.out_channels),
                            static_cast<Eigen::Index>(oh_n * ow_n));
  out.noalias() = conv_weights(conv) * cols;
  for (std::size_t o = 0; o < conv.out_channels; ++o) {
    out.row(static_cast<Eigen::Index>(o)).array() += conv.bias[o];
  }
}

double relu_of(double v) { return v > 0.0 ? v : 0.0; }

// Returns the flat input index of the window maximum; ties go to the lowest
// flat index.
std::size_t maxpool_argmax(const Tensor& x, std::size_t size, std::size_t c,
                           std::size_t oh, std::size_t ow) {
  const std::size_t h = x.shape()[1];
  const std::size_t w = x.shape()[2];
  std::size_t best = (c * h + oh * size) * w + ow * size;
  for (std::size_t dh = 0; dh < size; ++dh) {
    for (std::size_t dw = 0; dw < size; ++dw) {
      const std::size_t idx = (c * h + oh * size + dh) * w + ow * size + dw;
      if (x[idx] > x[best]) best = idx;
    }
  }
  return best;
}

double gap_at(const Tensor& x, std::size_t c) {
  const std::size_t plane = x.shape()[1] * x.shape()[2];
  const double* p = x.data().data() + c * plane;
  double acc = 0.0;
  for (std::size_t i = 0; i < plane; ++i) acc += p[i];
  return acc / static_cast<double>(plane);
}

Tensor apply_layer(const Layer& layer, const Tensor& x, const Shape& out_shape) {
  Tensor y(out_shape);
  std::visit(
      Overloaded{
          [&](const DenseLayer& d) {
            for (std::size_t o = 0; o < d.out; ++o) y[o] = dense_at(d, x, o);
          },
          [&](const Conv2dLayer& conv) {
            conv_forward(conv, x, y);
          },
          [&](const ReluLayer&) {
            for (std::size_t i = 0; i < x.size(); ++i) y[i] = relu_of(x[i]);
          },
          [&](const MaxPool2dLayer& p) {
            for (std::size_t c = 0; c < out_shape[0]; ++c)
              for (std::size_t oh = 0; oh < out_shape[1]; ++oh)
                for (std::size_t ow = 0; ow < out_shape[2]; ++ow)
                  y.at(c, oh, ow) = x[maxpool_argmax(x, p.size, c, oh, ow)];
          },
          [&](const GlobalAvgPoolLayer&) {
            for (std::size_t c = 0; c < out_shape[0]; ++c) y[c] = gap_at(x, c);
          },
          [&](const FlattenLayer&) {
            std::copy(x.data().begin(), x.data().end(), y.data().begin());
          },
      },
      layer);
  return y;
}

[[noreturn]] void shape_error(std::size_t i, const Layer& layer,
                              const std::string& what) {
  throw Error(ErrorCode::kShapeMismatch, "layer " + std::to_string(i) + " (" +
                                             std::string(layer_kind(layer)) +
                                             "): " + what);
}

void require_param_shape(std::size_t i, const Layer& layer, const Tensor& t,
                         const Shape& expected, const char* name) {
  if (t.shape() != expected) {
    shape_error(i, layer,
                std::string(name) + " has shape " + shape_to_string(t.shape()) +
                    ", expected " + shape_to_string(expected));
  }
  t.require_finite(name);
}

Shape infer_output_shape(std::size_t i, const Layer& layer, const Shape& in) {
  return std::visit(
      Overloaded{
          [&](const DenseLayer& d) -> Shape {
            if (in.size() != 1 || in[0] != d.in) {
              shape_error(i, layer, "expects a vector of length " +
                                        std::to_string(d.in) + ", got " +
                                        shape_to_string(in));
            }
            if (d.out == 0) shape_error(i, layer, "zero outputs");
            require_param_shape(i, layer, d.weight, {d.out, d.in}, "weight");
            require_param_shape(i, layer, d.bias, {d.out}, "bias");
            return {d.out};
          },
          [&](const Conv2dLayer& c) -> Shape {
            if (in.size() != 3 || in[0] != c.in_channels) {
              shape_error(i, layer, "expects (" + std::to_string(c.in_channels) +
                                        ",H,W), got " + shape_to_string(in));
            }
            if (c.kernel == 0 || c.stride == 0 || c.out_channels == 0) {
              shape_error(i, layer, "kernel, stride and out_channels must be positive");
            }
            if (in[1] + 2 * c.padding < c.kernel || in[2] + 2 * c.padding < c.kernel) {
              shape_error(i, layer, "kernel larger than padded input");
            }
            require_param_shape(i, layer, c.weight,
                                {c.out_channels, c.in_channels, c.kernel, c.kernel},
                                "weight");
            require_param_shape(i, layer, c.bias, {c.out_channels}, "bias");
            return {c.out_channels, conv_out_extent(in[1], c), conv_out_extent(in[2], c)};
          },
          [&](const ReluLayer&) -> Shape { return in; },
          [&](const MaxPool2dLayer& p) -> Shape {
            if (in.size() != 3) shape_error(i, layer, "expects a rank-3 input");
            if (p.size == 0 || in[1] < p.size || in[2] < p.size) {
              shape_error(i, layer, "window does not fit the input");
            }
            return {in[0], in[1] / p.size, in[2] / p.size};
          },
          [&](const GlobalAvgPoolLayer&) -> Shape {
            if (in.size() != 3) shape_error(i, layer, "expects a rank-3 input");
            return {in[0]};
          },
          [&](const FlattenLayer&) -> Shape { return {shape_size(in)}; },
      },
      layer);
}

}  // namespace

ModelGraph::ModelGraph(Shape input_shape, std::vector<Layer> layers,
                       std::vector<std::string> class_names)
    : input_shape_(std::move(input_shape)),
      layers_(std::move(layers)),
      class_names_(std::move(class_names)) {
  if (input_shape_.size() != 3 || shape_size(input_shape_) == 0) {
    throw Error(ErrorCode::kShapeMismatch,
                "model input shape must be (channels, height, width), got " +
                    shape_to_string(input_shape_));
  }
  if (layers_.empty()) {
    throw Error(ErrorCode::kShapeMismatch, "model has no layers");
  }
  if (class_names_.empty()) {
    throw Error(ErrorCode::kShapeMismatch, "model needs at least one class");
  }
  Shape current = input_shape_;
  output_shapes_.reserve(layers_.size());
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    current = infer_output_shape(i, layers_[i], current);
    output_shapes_.push_back(current);
  }
  if (current.size() != 1 || current[0] != class_names_.size()) {
    throw Error(ErrorCode::kShapeMismatch,
                "final output shape " + shape_to_string(current) +
                    " does not match " + std::to_string(class_names_.size()) +
                    " classes");
  }
}

const Shape& ModelGraph::layer_input_shape(std::size_t i) const {
  return i == 0 ? input_shape_ : output_shapes_.at(i - 1);
}

bool ModelGraph::is_cam_eligible() const noexcept {
  const std::size_t n = layers_.size();
  if (n < 2 || !std::holds_alternative<DenseLayer>(layers_[n - 1])) return false;
  if (std::holds_alternative<GlobalAvgPoolLayer>(layers_[n - 2])) return true;
  return n >= 3 && std::holds_alternative<FlattenLayer>(layers_[n - 2]) &&
         std::holds_alternative<GlobalAvgPoolLayer>(layers_[n - 3]);
}

std::optional<std::size_t> ModelGraph::last_conv_feature_index() const noexcept {
  for (std::size_t i = layers_.size(); i-- > 0;) {
    if (std::holds_alternative<Conv2dLayer>(layers_[i])) {
      if (i + 1 < layers_.size() && std::holds_alternative<ReluLayer>(layers_[i + 1])) {
        return i + 1;
      }
      return i;
    }
  }
  return std::nullopt;
}

DenseLayer& ModelGraph::final_dense() {
  auto* d = std::get_if<DenseLayer>(&layers_.back());
  if (d == nullptr) {
    throw Error(ErrorCode::kUnsupportedModel, "final layer is not dense");
  }
  return *d;
}

std::size_t ActivationTrace::argmax() const {
  const Tensor& y = logits();
  std::size_t best = 0;
  for (std::size_t i = 1; i < y.size(); ++i) {
    if (y[i] > y[best]) best = i;
  }
  return best;
}

ActivationTrace forward(const ModelGraph& model, const Tensor& input) {
  if (input.shape() != model.input_shape()) {
    throw Error(ErrorCode::kShapeMismatch,
                "input shape " + shape_to_string(input.shape()) +
                    " does not match model input " +
                    shape_to_string(model.input_shape()));
  }
  input.require_finite("forward input");
  std::vector<Tensor> outputs;
  outputs.reserve(model.num_layers());
  const Tensor* x = &input;
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    outputs.push_back(apply_layer(model.layers()[i], *x, model.output_shape(i)));
    x = &outputs.back();
  }
  return ActivationTrace(model, input, std::move(outputs));
}

Tensor predict(const ModelGraph& model, const Tensor& input) {
  return forward(model, input).logits();
}

LayerRef LayerRef::parse(std::string_view text) {
  if (text == "last_conv") return last_conv();
  std::size_t value = 0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw Error(ErrorCode::kInvalidArgument,
                "layer reference must be an index or 'last_conv': " + std::string(text));
  }
  return index(value);
}

std::size_t resolve_layer(const ModelGraph& model, LayerRef ref) {
  if (!ref.value) {
    auto idx = model.last_conv_feature_index();
    if (!idx) {
      throw Error(ErrorCode::kUnsupportedModel, "model has no conv2d layer");
    }
    return *idx;
  }
  if (*ref.value >= model.num_layers()) {
    throw Error(ErrorCode::kOutOfRange,
                "layer index " + std::to_string(*ref.value) + " out of range");
  }
  return *ref.value;
}

const Tensor& feature_at(const ActivationTrace& trace, LayerRef ref) {
  return trace.output(resolve_layer(trace.model(), ref));
}

namespace {

void require_target(const ActivationTrace& trace, std::size_t target) {
  if (target >= trace.model().num_classes()) {
    throw Error(ErrorCode::kOutOfRange,
                "target class " + std::to_string(target) + " out of range [0, " +
                    std::to_string(trace.model().num_classes()) + ")");
  }
}

// Gradient with respect to the input of layer i, given the gradient with
// respect to its output.
Tensor backward_layer(const ActivationTrace& trace, std::size_t i,
                      const Tensor& g, BackwardRule rule) {
  const ModelGraph& model = trace.model();
  const Tensor& x = trace.layer_input(i);
  Tensor gin(model.layer_input_shape(i));
  std::visit(
      Overloaded{
          [&](const DenseLayer& d) {
            for (std::size_t o = 0; o < d.out; ++o) {
              const double go = g[o];
              if (go == 0.0) continue;
              const double* w = d.weight.data().data() + o * d.in;
              for (std::size_t k = 0; k < d.in; ++k) gin[k] += w[k] * go;
            }
          },
          [&](const Conv2dLayer& conv) {
            const Shape& os = model.output_shape(i);
            const Eigen::Map<const RowMatrix> go(g.data().data(), static_cast<Eigen::Index>(os[0]),
                                                 static_cast<Eigen::Index>(os[1] * os[2]));
            const Eigen::MatrixXd cols = conv_weights(conv).transpose() * go;
            col2im(conv, cols, os[1], os[2], gin);
          },
          [&](const ReluLayer&) {
            for (std::size_t k = 0; k < x.size(); ++k) {
              const bool open = x[k] > 0.0 && (rule == BackwardRule::kGradient || g[k] >= 0.0);
              gin[k] = open ? g[k] : 0.0;
            }
          },
          [&](const MaxPool2dLayer& p) {
            const Shape& os = model.output_shape(i);
            for (std::size_t c = 0; c < os[0]; ++c)
              for (std::size_t oh = 0; oh < os[1]; ++oh)
                for (std::size_t ow = 0; ow < os[2]; ++ow)
                  gin[maxpool_argmax(x, p.size, c, oh, ow)] +=
                      g[(c * os[1] + oh) * os[2] + ow];
          },
          [&](const GlobalAvgPoolLayer&) {
            const std::size_t plane = x.shape()[1] * x.shape()[2];
            for (std::size_t c = 0; c < x.shape()[0]; ++c)
              for (std::size_t k = 0; k < plane; ++k)
                gin[c * plane + k] = g[c] / static_cast<double>(plane);
          },
          [&](const FlattenLayer&) {
            std::copy(g.data().begin(), g.data().end(), gin.data().begin());
          },
      },
      model.layers()[i]);
  return gin;
}

double stabilized(double z, double epsilon) {
  return z + (z >= 0.0 ? epsilon : -epsilon);
}

// Relevance of the input of layer i given the relevance of its output.
Tensor relevance_layer(const ActivationTrace& trace, std::size_t i,
                       const Tensor& r, double epsilon) {
  const ModelGraph& model = trace.model();
  const Tensor& x = trace.layer_input(i);
  const Tensor& z = trace.output(i);
  Tensor rin(model.layer_input_shape(i));
  auto ratio = [&](std::size_t idx) {
    const double denom = stabilized(z[idx], epsilon);
    return denom == 0.0 ? 0.0 : r[idx] / denom;
  };
  std::visit(
      Overloaded{
          [&](const DenseLayer& d) {
            for (std::size_t o = 0; o < d.out; ++o) {
              const double s = ratio(o);
              if (s == 0.0) continue;
              const double* w = d.weight.data().data() + o * d.in;
              for (std::size_t k = 0; k < d.in; ++k) rin[k] += x[k] * w[k] * s;
            }
          },
          [&](const Conv2dLayer& conv) {
            const Shape& os = model.output_shape(i);
            const std::size_t k = conv.kernel;
            const auto in_h = static_cast<std::ptrdiff_t>(x.shape()[1]);
            const auto in_w = static_cast<std::ptrdiff_t>(x.shape()[2]);
            for (std::size_t o = 0; o < os[0]; ++o)
              for (std::size_t oh = 0; oh < os[1]; ++oh)
                for (std::size_t ow = 0; ow < os[2]; ++ow) {
                  const double s = ratio((o * os[1] + oh) * os[2] + ow);
                  if (s == 0.0) continue;
                  for (std::size_t c = 0; c < conv.in_channels; ++c) {
                    const double* w =
                        conv.weight.data().data() + (o * conv.in_channels + c) * k * k;
                    for (std::size_t kh = 0; kh < k; ++kh) {
                      const auto ih = static_cast<std::ptrdiff_t>(oh * conv.stride + kh) -
                                      static_cast<std::ptrdiff_t>(conv.padding);
                      if (ih < 0 || ih >= in_h) continue;
                      for (std::size_t kw = 0; kw < k; ++kw) {
                        const auto iw = static_cast<std::ptrdiff_t>(ow * conv.stride + kw) -
                                        static_cast<std::ptrdiff_t>(conv.padding);
                        if (iw < 0 || iw >= in_w) continue;
                        const auto uh = static_cast<std::size_t>(ih);
                        const auto uw = static_cast<std::size_t>(iw);
                        rin.at(c, uh, uw) += x.at(c, uh, uw) * w[kh * k + kw] * s;
                      }
                    }
                  }
                }
          },
          [&](const ReluLayer&) {
            std::copy(r.data().begin(), r.data().end(), rin.data().begin());
          },
          [&](const MaxPool2dLayer& p) {
            const Shape& os = model.output_shape(i);
            for (std::size_t c = 0; c < os[0]; ++c)
              for (std::size_t oh = 0; oh < os[1]; ++oh)
                for (std::size_t ow = 0; ow < os[2]; ++ow)
                  rin[maxpool_argmax(x, p.size, c, oh, ow)] +=
                      r[(c * os[1] + oh) * os[2] + ow];
          },
          [&](const GlobalAvgPoolLayer&) {
            const std::size_t plane = x.shape()[1] * x.shape()[2];
            for (std::size_t c = 0; c < x.shape()[0]; ++c)
              for (std::size_t k = 0; k < plane; ++k)
                rin[c * plane + k] = r[c] / static_cast<double>(plane);
          },
          [&](const FlattenLayer&) {
            std::copy(r.data().begin(), r.data().end(), rin.data().begin());
          },
      },
      model.layers()[i]);
  return rin;
}

}  // namespace

Tensor backward_to(const ActivationTrace& trace, std::size_t target,
                   std::optional<std::size_t> layer, BackwardRule rule) {
  require_target(trace, target);
  const std::size_t n = trace.model().num_layers();
  if (layer && *layer >= n) {
    throw Error(ErrorCode::kOutOfRange, "layer index out of range");
  }
  Tensor g(trace.logits().shape());
  g[target] = 1.0;
  const std::size_t stop = layer ? *layer + 1 : 0;
  for (std::size_t i = n; i-- > stop;) {
    g = backward_layer(trace, i, g, rule);
  }
  return g;
}

Tensor grad_input(const ActivationTrace& trace, std::size_t target) {
  return backward_to(trace, target, std::nullopt, BackwardRule::kGradient);
}

Tensor guided_grad_input(const ActivationTrace& trace, std::size_t target) {
  // Relu is the only nonlinearity in the layer vocabulary, so every model
  // meets the guided-backprop requirement.
  return backward_to(trace, target, std::nullopt, BackwardRule::kGuided);
}

Tensor lrp_epsilon(const ActivationTrace& trace, std::size_t target,
                   double epsilon) {
  require_target(trace, target);
  if (!(epsilon >= 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "LRP epsilon must be >= 0");
  }
  Tensor r(trace.logits().shape());
  r[target] = trace.logits()[target];
  for (std::size_t i = trace.model().num_layers(); i-- > 0;) {
    r = relevance_layer(trace, i, r, epsilon);
  }
  r.require_finite("lrp_epsilon");
  return r;
}

// ---------------------------------------------------------------------------

IncrementalForward::IncrementalForward(const ModelGraph& model, const Tensor& input)
    : model_(&model), input_(input) {
  dirty_flags_.resize(model.num_layers() + 1);
  dirty_lists_.resize(model.num_layers() + 1);
  dirty_old_.resize(model.num_layers() + 1);
  dirty_flags_[0].assign(input.size(), 0);
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    dirty_flags_[i + 1].assign(shape_size(model.output_shape(i)), 0);
  }
  reset(input);
}

void IncrementalForward::reset(const Tensor& source) {
  ActivationTrace trace = forward(*model_, source);
  input_ = source;
  outputs_ = trace.outputs();
  for (std::size_t level = 0; level < dirty_flags_.size(); ++level) {
    std::fill(dirty_flags_[level].begin(), dirty_flags_[level].end(), 0);
    dirty_lists_[level].clear();
    dirty_old_[level].clear();
  }
}

void IncrementalForward::copy_pixel(const Tensor& source, std::size_t row,
                                    std::size_t col) {
  const std::size_t h = model_->height();
  const std::size_t w = model_->width();
  for (std::size_t c = 0; c < model_->channels(); ++c) {
    const std::size_t idx = (c * h + row) * w + col;
    if (!dirty_flags_[0][idx]) {
      dirty_flags_[0][idx] = 1;
      dirty_lists_[0].push_back(idx);
      dirty_old_[0].push_back(input_[idx]);
    }
    input_[idx] = source[idx];
  }
}

const Tensor& IncrementalForward::logits() {
  if (!dirty_lists_[0].empty()) propagate();
  return outputs_.back();
}

// Nonlinear and dense layers recompute affected entries with the shared
// kernels. Conv and global-average-pool layers, which dominate the cost, add
// W * (x_new - x_old) for the changed inputs only; their outputs agree with a
// full pass up to rounding.
void IncrementalForward::propagate() {
  const ModelGraph& model = *model_;
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    auto& in_list = dirty_lists_[i];
    auto& in_old = dirty_old_[i];
    auto& in_flags = dirty_flags_[i];
    auto& out_list = dirty_lists_[i + 1];
    auto& out_old = dirty_old_[i + 1];
    auto& out_flags = dirty_flags_[i + 1];
    const Tensor& x = i == 0 ? input_ : outputs_[i - 1];
    Tensor& y = outputs_[i];
    const Shape& in_shape = model.layer_input_shape(i);
    const Shape& out_shape = model.output_shape(i);
    auto touch = [&](std::size_t idx) {
      if (!out_flags[idx]) {
        out_flags[idx] = 1;
        out_list.push_back(idx);
        out_old.push_back(y[idx]);
      }
    };
    // Only entries whose value actually changes are passed on.
    auto store = [&](std::size_t idx, double value) {
      if (value == y[idx] && std::signbit(value) == std::signbit(y[idx])) return;
      touch(idx);
      y[idx] = value;
    };

    if (!in_list.empty()) {
      std::visit(
          Overloaded{
              [&](const DenseLayer& d) {
                for (std::size_t o = 0; o < d.out; ++o) store(o, dense_at(d, x, o));
              },
              [&](const Conv2dLayer& conv) {
                const std::size_t oh_n = out_shape[1];
                const std::size_t ow_n = out_shape[2];
                const std::size_t in_w = in_shape[2];
                const std::size_t plane = in_shape[1] * in_w;
                const std::size_t k = conv.kernel;
                for (std::size_t n = 0; n < in_list.size(); ++n) {
                  const std::size_t idx = in_list[n];
                  const double delta = x[idx] - in_old[n];
                  if (delta == 0.0) continue;
                  const std::size_t c = idx / plane;
                  const std::size_t h = (idx % plane) / in_w;
                  const std::size_t w = idx % in_w;
                  for (std::size_t kh = 0; kh < k; ++kh) {
                    const auto th = static_cast<std::ptrdiff_t>(h + conv.padding) -
                                    static_cast<std::ptrdiff_t>(kh);
                    if (th < 0 || th % static_cast<std::ptrdiff_t>(conv.stride) != 0) continue;
                    const auto oh = static_cast<std::size_t>(th) / conv.stride;
                    if (oh >= oh_n) continue;
                    for (std::size_t kw = 0; kw < k; ++kw) {
                      const auto tw = static_cast<std::ptrdiff_t>(w + conv.padding) -
                                      static_cast<std::ptrdiff_t>(kw);
                      if (tw < 0 || tw % static_cast<std::ptrdiff_t>(conv.stride) != 0) continue;
                      const auto ow = static_cast<std::size_t>(tw) / conv.stride;
                      if (ow >= ow_n) continue;
                      const double* wt = conv.weight.data().data() + c * k * k + kh * k + kw;
                      const std::size_t stride = conv.in_channels * k * k;
                      for (std::size_t o = 0; o < conv.out_channels; ++o) {
                        const std::size_t oidx = (o * oh_n + oh) * ow_n + ow;
                        touch(oidx);
                        y[oidx] += wt[o * stride] * delta;
                      }
                    }
                  }
                }
              },
              [&](const ReluLayer&) {
                for (std::size_t idx : in_list) store(idx, relu_of(x[idx]));
              },
              [&](const MaxPool2dLayer& p) {
                const std::size_t plane = in_shape[1] * in_shape[2];
                for (std::size_t idx : in_list) {
                  const std::size_t c = idx / plane;
                  const std::size_t oh = (idx % plane) / in_shape[2] / p.size;
                  const std::size_t ow = (idx % in_shape[2]) / p.size;
                  if (oh >= out_shape[1] || ow >= out_shape[2]) continue;
                  store((c * out_shape[1] + oh) * out_shape[2] + ow,
                        x[maxpool_argmax(x, p.size, c, oh, ow)]);
                }
              },
              [&](const GlobalAvgPoolLayer&) {
                const std::size_t plane = in_shape[1] * in_shape[2];
                const double scale = 1.0 / static_cast<double>(plane);
                for (std::size_t n = 0; n < in_list.size(); ++n) {
                  const double delta = x[in_list[n]] - in_old[n];
                  if (delta == 0.0) continue;
                  const std::size_t c = in_list[n] / plane;
                  touch(c);
                  y[c] += delta * scale;
                }
              },
              [&](const FlattenLayer&) {
                for (std::size_t idx : in_list) store(idx, x[idx]);
              },
          },
          model.layers()[i]);
    }
    for (std::size_t idx : in_list) in_flags[idx] = 0;
    in_list.clear();
    in_old.clear();
  }
  for (std::size_t idx : dirty_lists_.back()) dirty_flags_.back()[idx] = 0;
  dirty_lists_.back().clear();
  dirty_old_.back().clear();
}

}  // namespace attrib
