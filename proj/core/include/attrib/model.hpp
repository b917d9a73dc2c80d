#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "attrib/tensor.hpp"

namespace attrib {

// weight: (out, in), bias: (out). Input must be a rank-1 tensor of length in.
struct DenseLayer {
  std::size_t in = 0;
  std::size_t out = 0;
  Tensor weight;
  Tensor bias;
};

// weight: (out_channels, in_channels, kernel, kernel), bias: (out_channels).
// Zero padding on all four sides.
struct Conv2dLayer {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  Tensor weight;
  Tensor bias;
};

struct ReluLayer {};

// Non-overlapping window; stride equals size, trailing rows/cols are dropped.
struct MaxPool2dLayer {
  std::size_t size = 2;
};

// (C, H, W) -> (C)
struct GlobalAvgPoolLayer {};

struct FlattenLayer {};

using Layer = std::variant<DenseLayer, Conv2dLayer, ReluLayer, MaxPool2dLayer,
                           GlobalAvgPoolLayer, FlattenLayer>;

std::string_view layer_kind(const Layer& layer);

// A validated feed-forward layer sequence. Construction checks that every
// layer accepts the previous layer's output shape and that the final output is
// a vector of num_classes logits.
class ModelGraph {
 public:
  ModelGraph(Shape input_shape, std::vector<Layer> layers,
             std::vector<std::string> class_names);

  const Shape& input_shape() const noexcept { return input_shape_; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  std::size_t num_layers() const noexcept { return layers_.size(); }
  std::size_t num_classes() const noexcept { return class_names_.size(); }
  const std::vector<std::string>& class_names() const noexcept {
    return class_names_;
  }

  // Output shape of layer i.
  const Shape& output_shape(std::size_t i) const { return output_shapes_.at(i); }
  // Input shape of layer i (the model input for i == 0).
  const Shape& layer_input_shape(std::size_t i) const;

  // Spatial extent of the input image.
  std::size_t channels() const noexcept { return input_shape_[0]; }
  std::size_t height() const noexcept { return input_shape_[1]; }
  std::size_t width() const noexcept { return input_shape_[2]; }
  std::size_t pixel_count() const noexcept { return height() * width(); }

  // Tail is exactly [global_avg_pool, (flatten), dense].
  bool is_cam_eligible() const noexcept;

  // Index of the layer whose output is the "last convolutional feature":
  // the last conv2d, or the relu directly following it.
  std::optional<std::size_t> last_conv_feature_index() const noexcept;

  // Mutable access to the final dense layer, used to build scaled variants of
  // a model in tests and experiments.
  DenseLayer& final_dense();

 private:
  Shape input_shape_;
  std::vector<Layer> layers_;
  std::vector<std::string> class_names_;
  std::vector<Shape> output_shapes_;
};

// Per-layer outputs of one forward pass. Holds a non-owning pointer to the
// model; the model must outlive every trace created from it.
class ActivationTrace {
 public:
  ActivationTrace(const ModelGraph& model, Tensor input,
                  std::vector<Tensor> outputs)
      : model_(&model), input_(std::move(input)), outputs_(std::move(outputs)) {}

  const ModelGraph& model() const noexcept { return *model_; }
  const Tensor& input() const noexcept { return input_; }
  // Output of layer i. For a conv2d/dense followed by relu, the conv/dense
  // entry holds the pre-activation and the relu entry the post-activation.
  const Tensor& output(std::size_t i) const { return outputs_.at(i); }
  const std::vector<Tensor>& outputs() const noexcept { return outputs_; }
  const Tensor& logits() const noexcept { return outputs_.back(); }
  // Input to layer i.
  const Tensor& layer_input(std::size_t i) const {
    return i == 0 ? input_ : outputs_.at(i - 1);
  }

  std::size_t argmax() const;

 private:
  const ModelGraph* model_;
  Tensor input_;
  std::vector<Tensor> outputs_;
};

ActivationTrace forward(const ModelGraph& model, const Tensor& input);

// Convenience: logits only.
Tensor predict(const ModelGraph& model, const Tensor& input);

// Symbolic or numeric layer reference for feature access.
struct LayerRef {
  static LayerRef last_conv() { return LayerRef{std::nullopt}; }
  static LayerRef index(std::size_t i) { return LayerRef{i}; }
  static LayerRef parse(std::string_view text);

  std::optional<std::size_t> value;
};

std::size_t resolve_layer(const ModelGraph& model, LayerRef ref);

// Cached output of the referenced layer ("last_conv" resolves to the
// post-activation output of the last conv2d).
const Tensor& feature_at(const ActivationTrace& trace, LayerRef ref);

enum class BackwardRule {
  kGradient,
  // ReLU additionally blocks negative incoming signal.
  kGuided,
};

// d logit[target] / d (output of layer `layer`), or d / d input when `layer`
// is std::nullopt.
Tensor backward_to(const ActivationTrace& trace, std::size_t target,
                   std::optional<std::size_t> layer, BackwardRule rule);

Tensor grad_input(const ActivationTrace& trace, std::size_t target);
Tensor guided_grad_input(const ActivationTrace& trace, std::size_t target);

// LRP-epsilon relevance of every input cell. The relevance injected at the top
// is exactly logit[target]. Dense and conv2d use the epsilon rule on their
// pre-activations with stabilizer sign(z) * epsilon (sign(0) = +1); relu and
// flatten pass relevance through; maxpool routes it to the window argmax;
// global average pooling splits it uniformly.
Tensor lrp_epsilon(const ActivationTrace& trace, std::size_t target,
                   double epsilon);

// Updates a forward pass after a few input pixels changed, touching only the
// layer entries that depend on them. Dense, relu, maxpool and flatten entries
// are recomputed exactly as forward() does; conv2d and global average pooling
// apply the change as a delta, so models containing them agree with a fresh
// forward pass up to accumulated rounding (about 1e-15 relative per step).
class IncrementalForward {
 public:
  IncrementalForward(const ModelGraph& model, const Tensor& input);

  // Overwrites every channel of pixel (row, col) with the matching channel of
  // `source` and schedules the change.
  void copy_pixel(const Tensor& source, std::size_t row, std::size_t col);
  // Restores every pixel from `source` with a full forward pass.
  void reset(const Tensor& source);

  // Propagates pending changes and returns the logits.
  const Tensor& logits();
  double logit(std::size_t target) { return logits()[target]; }

  const Tensor& input() const noexcept { return input_; }

 private:
  void propagate();

  const ModelGraph* model_;
  Tensor input_;
  std::vector<Tensor> outputs_;
  // Dirty flags and index lists for the input and each layer output.
  std::vector<std::vector<unsigned char>> dirty_flags_;
  std::vector<std::vector<std::size_t>> dirty_lists_;
  // Value of each listed entry before its first change in this round.
  std::vector<std::vector<double>> dirty_old_;
};

}  // namespace attrib
