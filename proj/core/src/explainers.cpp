#include "attrib/explainers.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>

#include "attrib/error.hpp"
#include "attrib/rng.hpp"
#include "attrib/shapley.hpp"

namespace attrib {

namespace {

struct MethodInfo {
  Method method;
  std::string_view name;
  MapDomain domain;
  SignInfo sign;
};

constexpr std::array<MethodInfo, 9> kMethods{{
    {Method::kGrad, "grad", MapDomain::kPixel, SignInfo::kNonNegative},
    {Method::kGradientInput, "gi", MapDomain::kPixel, SignInfo::kSigned},
    {Method::kGuidedBackprop, "gb", MapDomain::kPixel, SignInfo::kNonNegative},
    {Method::kLrp, "lrp", MapDomain::kPixel, SignInfo::kSigned},
    {Method::kLime, "lime", MapDomain::kPixel, SignInfo::kSigned},
    {Method::kPert, "pert", MapDomain::kPixel, SignInfo::kNonNegative},
    {Method::kCam, "cam", MapDomain::kFeature, SignInfo::kNonNegative},
    {Method::kGradCam, "gradcam", MapDomain::kFeature, SignInfo::kNonNegative},
    {Method::kSampledShapley, "shapley", MapDomain::kPixel, SignInfo::kSigned},
}};

const MethodInfo& info(Method method) {
  for (const auto& m : kMethods) {
    if (m.method == method) return m;
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown method");
}

void require_image(const ModelGraph& model, const Tensor& image) {
  if (image.shape() != model.input_shape()) {
    throw Error(ErrorCode::kShapeMismatch, "image shape " + shape_to_string(image.shape()) +
                                               " does not match model input " +
                                               shape_to_string(model.input_shape()));
  }
}

// Per-pixel max |value| over channels.
Tensor channel_max_abs(const Tensor& t) {
  const std::size_t c_n = t.shape()[0], h_n = t.shape()[1], w_n = t.shape()[2];
  Tensor out({h_n, w_n});
  for (std::size_t h = 0; h < h_n; ++h)
    for (std::size_t w = 0; w < w_n; ++w) {
      double best = 0.0;
      for (std::size_t c = 0; c < c_n; ++c) best = std::max(best, std::abs(t.at(c, h, w)));
      out[h * w_n + w] = best;
    }
  return out;
}

Tensor channel_sum(const Tensor& t) {
  const std::size_t c_n = t.shape()[0], h_n = t.shape()[1], w_n = t.shape()[2];
  Tensor out({h_n, w_n});
  for (std::size_t h = 0; h < h_n; ++h)
    for (std::size_t w = 0; w < w_n; ++w) {
      double acc = 0.0;
      for (std::size_t c = 0; c < c_n; ++c) acc += t.at(c, h, w);
      out[h * w_n + w] = acc;
    }
  return out;
}

// Min-max projection to [0, 1]; a constant map projects to all zeros.
Tensor min_max(Tensor t) {
  const auto [lo, hi] = std::minmax_element(t.data().begin(), t.data().end());
  const double min = *lo;
  const double range = *hi - *lo;
  for (double& v : t.data()) v = range > 0.0 ? (v - min) / range : 0.0;
  return t;
}

}  // namespace

std::string_view method_name(Method method) { return info(method).name; }

std::optional<Method> parse_method(std::string_view name) {
  for (const auto& m : kMethods) {
    if (m.name == name) return m.method;
  }
  return std::nullopt;
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> methods = [] {
    std::vector<Method> out;
    for (const auto& m : kMethods) out.push_back(m.method);
    return out;
  }();
  return methods;
}

MapDomain method_domain(Method method) { return info(method).domain; }
SignInfo method_sign(Method method) { return info(method).sign; }

AttributionMap make_map(Method method, std::size_t target, Tensor values,
                        std::optional<std::size_t> feature_layer) {
  if (values.rank() != 2) {
    throw Error(ErrorCode::kShapeMismatch, "attribution values must be rank 2 (rows, cols)");
  }
  values.require_finite(std::string(method_name(method)) + " attribution map");
  AttributionMap map;
  map.method = method;
  map.domain = method_domain(method);
  map.sign = method_sign(method);
  map.target = target;
  map.feature_layer = feature_layer;
  if (map.domain == MapDomain::kFeature && !feature_layer) {
    throw Error(ErrorCode::kInvalidArgument, "feature-domain map needs its layer");
  }
  if (map.sign == SignInfo::kNonNegative) {
    for (double v : values.data()) {
      if (v < 0.0) {
        throw Error(ErrorCode::kInvalidArgument,
                    std::string(method_name(method)) + " produced a negative entry in a "
                                                       "non-negative map");
      }
    }
  }
  map.values = std::move(values);
  return map;
}

AttributionMap explain_grad(const ModelGraph& model, const Tensor& image, std::size_t target) {
  require_image(model, image);
  const auto trace = forward(model, image);
  return make_map(Method::kGrad, target, channel_max_abs(grad_input(trace, target)));
}

AttributionMap explain_gi(const ModelGraph& model, const Tensor& image, std::size_t target) {
  require_image(model, image);
  const auto trace = forward(model, image);
  Tensor g = grad_input(trace, target);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] *= image[i];
  return make_map(Method::kGradientInput, target, channel_sum(g));
}

AttributionMap explain_gb(const ModelGraph& model, const Tensor& image, std::size_t target) {
  require_image(model, image);
  const auto trace = forward(model, image);
  return make_map(Method::kGuidedBackprop, target,
                  channel_max_abs(guided_grad_input(trace, target)));
}

AttributionMap explain_lrp(const ModelGraph& model, const Tensor& image, std::size_t target,
                           double epsilon) {
  require_image(model, image);
  const auto trace = forward(model, image);
  return make_map(Method::kLrp, target, channel_sum(lrp_epsilon(trace, target, epsilon)));
}

std::size_t cam_feature_layer(const ModelGraph& model) {
  if (!model.is_cam_eligible()) {
    throw Error(ErrorCode::kUnsupportedModel,
                "CAM needs a model ending in global_avg_pool, optional flatten, dense");
  }
  std::size_t gap = model.num_layers() - 2;
  if (!std::holds_alternative<GlobalAvgPoolLayer>(model.layers()[gap])) --gap;
  if (gap == 0) {
    throw Error(ErrorCode::kUnsupportedModel, "CAM needs at least one layer before the pooling");
  }
  return gap - 1;
}

Tensor cam_raw(const ActivationTrace& trace, std::size_t target) {
  const ModelGraph& model = trace.model();
  const std::size_t layer = cam_feature_layer(model);
  if (target >= model.num_classes()) {
    throw Error(ErrorCode::kOutOfRange, "target class out of range");
  }
  const auto& dense = std::get<DenseLayer>(model.layers().back());
  const Tensor& f = trace.output(layer);
  const std::size_t c_n = f.shape()[0], h_n = f.shape()[1], w_n = f.shape()[2];
  Tensor out({h_n, w_n});
  for (std::size_t c = 0; c < c_n; ++c) {
    const double w = dense.weight[target * dense.in + c];
    for (std::size_t k = 0; k < h_n * w_n; ++k) out[k] += w * f[c * h_n * w_n + k];
  }
  return out;
}

Tensor gradcam_raw(const ActivationTrace& trace, std::size_t target) {
  const std::size_t layer = resolve_layer(trace.model(), LayerRef::last_conv());
  const Tensor grad = backward_to(trace, target, layer, BackwardRule::kGradient);
  const Tensor& f = trace.output(layer);
  const std::size_t c_n = f.shape()[0], h_n = f.shape()[1], w_n = f.shape()[2];
  const std::size_t plane = h_n * w_n;
  Tensor out({h_n, w_n});
  for (std::size_t c = 0; c < c_n; ++c) {
    double alpha = 0.0;
    for (std::size_t k = 0; k < plane; ++k) alpha += grad[c * plane + k];
    alpha /= static_cast<double>(plane);
    for (std::size_t k = 0; k < plane; ++k) out[k] += alpha * f[c * plane + k];
  }
  return out;
}

AttributionMap explain_cam(const ModelGraph& model, const Tensor& image, std::size_t target) {
  require_image(model, image);
  const std::size_t layer = cam_feature_layer(model);
  const auto trace = forward(model, image);
  return make_map(Method::kCam, target, min_max(cam_raw(trace, target)), layer);
}

AttributionMap explain_gradcam(const ModelGraph& model, const Tensor& image, std::size_t target) {
  require_image(model, image);
  const std::size_t layer = resolve_layer(model, LayerRef::last_conv());
  const auto trace = forward(model, image);
  Tensor raw = gradcam_raw(trace, target);
  for (double& v : raw.data()) v = v > 0.0 ? v : 0.0;
  return make_map(Method::kGradCam, target, std::move(raw), layer);
}

AttributionMap explain_lime(const ModelGraph& model, const Tensor& image,
                            const Baseline& baseline, std::size_t target,
                            const LimeConfig& config) {
  require_image(model, image);
  const std::size_t h_n = model.height(), w_n = model.width(), c_n = model.channels();
  if (config.grid == 0 || h_n % config.grid != 0 || w_n % config.grid != 0) {
    throw Error(ErrorCode::kInvalidArgument,
                "LIME grid " + std::to_string(config.grid) + " does not divide the " +
                    std::to_string(h_n) + "x" + std::to_string(w_n) + " image");
  }
  if (!(config.kernel_width > 0.0) || !(config.ridge_lambda >= 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "LIME kernel width must be > 0 and lambda >= 0");
  }
  if (target >= model.num_classes()) throw Error(ErrorCode::kOutOfRange, "target class out of range");
  const std::size_t seg_cols = w_n / config.grid;
  const std::size_t segments = (h_n / config.grid) * seg_cols;
  if (config.samples < segments + 1) {
    throw Error(ErrorCode::kInvalidArgument,
                "LIME needs at least " + std::to_string(segments + 1) + " samples for " +
                    std::to_string(segments) + " segments");
  }
  const Tensor base = baseline.image(model.input_shape());
  auto segment_of = [&](std::size_t h, std::size_t w) {
    return (h / config.grid) * seg_cols + w / config.grid;
  };

  // Design matrix with a leading intercept column.
  const auto n = static_cast<Eigen::Index>(config.samples);
  const auto p = static_cast<Eigen::Index>(segments + 1);
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(n, p);
  Eigen::VectorXd y(n), weight(n);
  SplitMix64 rng(config.seed);
  std::vector<unsigned char> on(segments);
  Tensor perturbed = image;
  for (Eigen::Index s = 0; s < n; ++s) {
    // The first sample is the unperturbed image.
    std::size_t off = 0;
    for (std::size_t k = 0; k < segments; ++k) {
      on[k] = s == 0 ? 1 : static_cast<unsigned char>(rng.coin());
      off += on[k] ? 0 : 1;
    }
    for (std::size_t c = 0; c < c_n; ++c)
      for (std::size_t h = 0; h < h_n; ++h)
        for (std::size_t w = 0; w < w_n; ++w)
          perturbed.at(c, h, w) = on[segment_of(h, w)] ? image.at(c, h, w) : base.at(c, h, w);
    y(s) = predict(model, perturbed)[target];
    z(s, 0) = 1.0;
    for (std::size_t k = 0; k < segments; ++k) z(s, static_cast<Eigen::Index>(k + 1)) = on[k];
    const double frac = static_cast<double>(off) / static_cast<double>(segments);
    weight(s) = std::exp(-(frac * frac) / (config.kernel_width * config.kernel_width));
  }

  Eigen::MatrixXd gram = z.transpose() * weight.asDiagonal() * z;
  for (Eigen::Index k = 1; k < p; ++k) gram(k, k) += config.ridge_lambda;
  const Eigen::VectorXd rhs = z.transpose() * (weight.asDiagonal() * y);
  const Eigen::LDLT<Eigen::MatrixXd> solver(gram);
  if (solver.info() != Eigen::Success) {
    throw Error(ErrorCode::kNonFinite, "LIME ridge system is singular");
  }
  const Eigen::VectorXd coef = solver.solve(rhs);

  Tensor values({h_n, w_n});
  for (std::size_t h = 0; h < h_n; ++h)
    for (std::size_t w = 0; w < w_n; ++w)
      values[h * w_n + w] = coef(static_cast<Eigen::Index>(segment_of(h, w) + 1));
  return make_map(Method::kLime, target, std::move(values));
}

AttributionMap explain_pert(const ModelGraph& model, const Tensor& image,
                            const Baseline& baseline, std::size_t target,
                            const PertConfig& config) {
  require_image(model, image);
  const std::size_t h_n = model.height(), w_n = model.width(), c_n = model.channels();
  const std::size_t plane = h_n * w_n;
  const Tensor base = baseline.image(model.input_shape());
  Tensor mask({h_n, w_n}, 1.0);
  Tensor perturbed = image;
  for (std::size_t step = 0; step < config.steps; ++step) {
    for (std::size_t c = 0; c < c_n; ++c)
      for (std::size_t k = 0; k < plane; ++k) {
        const std::size_t idx = c * plane + k;
        perturbed[idx] = mask[k] * image[idx] + (1.0 - mask[k]) * base[idx];
      }
    const auto trace = forward(model, perturbed);
    double removed = 0.0;
    for (double m : mask.data()) removed += 1.0 - m;
    const double loss = trace.logits()[target] + config.lambda_l1 * removed;
    if (!std::isfinite(loss)) {
      throw Error(ErrorCode::kNonFinite, "Pert loss became non-finite at step " + std::to_string(step));
    }
    const Tensor g = grad_input(trace, target);
    for (std::size_t k = 0; k < plane; ++k) {
      double dm = -config.lambda_l1;
      for (std::size_t c = 0; c < c_n; ++c) {
        const std::size_t idx = c * plane + k;
        dm += g[idx] * (image[idx] - base[idx]);
      }
      mask[k] = std::clamp(mask[k] - config.learning_rate * dm, 0.0, 1.0);
    }
  }
  for (double& m : mask.data()) m = 1.0 - m;
  return make_map(Method::kPert, target, std::move(mask));
}

AttributionMap explain_sampled_shapley(const ModelGraph& model, const Tensor& image,
                                       const Baseline& baseline, std::size_t target,
                                       const ShapleyConfig& config) {
  require_image(model, image);
  const ModelValueFunction v(model, image, baseline, target);
  const ShapleyEstimate est = sampled_shapley(
      v, SamplingOptions{config.permutations, config.seed, config.workers, PermutationSource::kRandom});
  return make_map(Method::kSampledShapley, target,
                  Tensor({model.height(), model.width()}, est.values));
}

AttributionMap explain(Method method, const ModelGraph& model, const Tensor& image,
                       const Baseline& baseline, std::size_t target,
                       const ExplainerConfig& config) {
  switch (method) {
    case Method::kGrad: return explain_grad(model, image, target);
    case Method::kGradientInput: return explain_gi(model, image, target);
    case Method::kGuidedBackprop: return explain_gb(model, image, target);
    case Method::kLrp: return explain_lrp(model, image, target, config.lrp_epsilon);
    case Method::kLime: return explain_lime(model, image, baseline, target, config.lime);
    case Method::kPert: return explain_pert(model, image, baseline, target, config.pert);
    case Method::kCam: return explain_cam(model, image, target);
    case Method::kGradCam: return explain_gradcam(model, image, target);
    case Method::kSampledShapley:
      return explain_sampled_shapley(model, image, baseline, target, config.shapley);
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown method");
}

Explainer bind_explainer(Method method, const ModelGraph& model, const Baseline& baseline,
                         ExplainerConfig config) {
  return [method, &model, baseline, config](const Tensor& image, std::size_t target) {
    return explain(method, model, image, baseline, target, config);
  };
}

}  // namespace attrib
