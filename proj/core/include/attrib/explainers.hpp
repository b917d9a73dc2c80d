#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string_view>
#include <vector>

#include "attrib/model.hpp"
#include "attrib/model_io.hpp"
#include "attrib/tensor.hpp"

namespace attrib {

enum class Method {
  kGrad,
  kGradientInput,
  kGuidedBackprop,
  kLrp,
  kLime,
  kPert,
  kCam,
  kGradCam,
  kSampledShapley,
};

// Short names used on the command line and in reports:
// grad, gi, gb, lrp, lime, pert, cam, gradcam, shapley.
std::string_view method_name(Method method);
std::optional<Method> parse_method(std::string_view name);
const std::vector<Method>& all_methods();

enum class MapDomain { kPixel, kFeature };
enum class SignInfo { kSigned, kNonNegative };

MapDomain method_domain(Method method);
SignInfo method_sign(Method method);

// Attribution values over an H x W grid: the input pixels for pixel-domain
// maps, or the spatial cells of a feature layer for feature-domain maps.
struct AttributionMap {
  MapDomain domain = MapDomain::kPixel;
  // Layer whose spatial grid the map covers; set for feature-domain maps.
  std::optional<std::size_t> feature_layer;
  Tensor values;
  Method method = Method::kGrad;
  std::size_t target = 0;
  SignInfo sign = SignInfo::kSigned;

  std::size_t rows() const { return values.shape()[0]; }
  std::size_t cols() const { return values.shape()[1]; }
  std::size_t size() const { return values.size(); }
};

// Builds a map and enforces its invariants (rank-2 values, finite entries,
// no negative entry in a non-negative map).
AttributionMap make_map(Method method, std::size_t target, Tensor values,
                        std::optional<std::size_t> feature_layer = std::nullopt);

struct LimeConfig {
  // Side length of the square grid blocks used as segments.
  std::size_t grid = 4;
  std::size_t samples = 1000;
  double kernel_width = 0.25;
  double ridge_lambda = 1.0;
  std::uint64_t seed = 0;
};

struct PertConfig {
  double lambda_l1 = 0.05;
  std::size_t steps = 200;
  double learning_rate = 0.1;
  // The mask always starts at 1, so the optimization is deterministic; the
  // seed is carried for reporting only.
  std::uint64_t seed = 0;
};

struct ShapleyConfig {
  std::size_t permutations = 200;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

struct ExplainerConfig {
  double lrp_epsilon = 1.0;
  LimeConfig lime;
  PertConfig pert;
  ShapleyConfig shapley;
};

AttributionMap explain_grad(const ModelGraph& model, const Tensor& image, std::size_t target);
AttributionMap explain_gi(const ModelGraph& model, const Tensor& image, std::size_t target);
AttributionMap explain_gb(const ModelGraph& model, const Tensor& image, std::size_t target);
AttributionMap explain_lrp(const ModelGraph& model, const Tensor& image, std::size_t target,
                           double epsilon = 1.0);
AttributionMap explain_cam(const ModelGraph& model, const Tensor& image, std::size_t target);
AttributionMap explain_gradcam(const ModelGraph& model, const Tensor& image, std::size_t target);
AttributionMap explain_lime(const ModelGraph& model, const Tensor& image,
                            const Baseline& baseline, std::size_t target,
                            const LimeConfig& config = {});
AttributionMap explain_pert(const ModelGraph& model, const Tensor& image,
                            const Baseline& baseline, std::size_t target,
                            const PertConfig& config = {});
AttributionMap explain_sampled_shapley(const ModelGraph& model, const Tensor& image,
                                       const Baseline& baseline, std::size_t target,
                                       const ShapleyConfig& config = {});

AttributionMap explain(Method method, const ModelGraph& model, const Tensor& image,
                       const Baseline& baseline, std::size_t target,
                       const ExplainerConfig& config = {});

// An explainer bound to a model and baseline: image -> map for a fixed target.
using Explainer = std::function<AttributionMap(const Tensor& image, std::size_t target)>;

Explainer bind_explainer(Method method, const ModelGraph& model, const Baseline& baseline,
                         ExplainerConfig config = {});

// Feature-domain helpers shared by CAM and Grad-CAM.
// Index of the layer whose output feeds the global average pool.
std::size_t cam_feature_layer(const ModelGraph& model);
// Sum over channels of weight[target, c] * feature[c], before normalization.
Tensor cam_raw(const ActivationTrace& trace, std::size_t target);
// Sum over channels of mean-gradient[c] * feature[c], before the ReLU.
Tensor gradcam_raw(const ActivationTrace& trace, std::size_t target);

}  // namespace attrib
