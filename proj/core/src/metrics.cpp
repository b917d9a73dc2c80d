#include "attrib/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "attrib/error.hpp"
#include "attrib/parallel.hpp"

namespace attrib {

namespace {

void require_pixel_map(const AttributionMap& map, std::string_view metric) {
  if (map.domain != MapDomain::kPixel) {
    throw Error(ErrorCode::kDomainMismatch,
                std::string(metric) + ": feature-domain maps (" +
                    std::string(method_name(map.method)) +
                    ") are not comparable with pixel-level attributions");
  }
}

void require_map_matches(const AttributionMap& map, const ModelGraph& model) {
  if (map.rows() != model.height() || map.cols() != model.width()) {
    throw Error(ErrorCode::kShapeMismatch, "attribution map shape " +
                                               shape_to_string(map.values.shape()) +
                                               " does not match the model input grid");
  }
}

std::vector<std::size_t> ranked(const AttributionMap& map, Direction direction) {
  std::vector<std::size_t> order(map.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto& v = map.values;
  if (direction == Direction::kHigh) {
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  } else {
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  }
  return order;
}

double norm_of(std::span<const double> values, BiasNorm norm) {
  std::vector<double> terms(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    terms[i] = norm == BiasNorm::kL1 ? std::abs(values[i]) : values[i] * values[i];
  }
  const double s = pairwise_sum(terms);
  return norm == BiasNorm::kL1 ? s : std::sqrt(s);
}

double l2_norm(std::span<const double> values) { return norm_of(values, BiasNorm::kL2); }

double subset_sum(std::span<const double> values, std::span<const std::size_t> subset) {
  std::vector<double> terms;
  terms.reserve(subset.size());
  for (std::size_t i : subset) terms.push_back(values[i]);
  return pairwise_sum(terms);
}

constexpr double kRatioGrid = 0x1.0p32;

double snap(double ratio) { return std::nearbyint(ratio * kRatioGrid) / kRatioGrid; }

}  // namespace

std::string_view direction_name(Direction d) { return d == Direction::kHigh ? "high" : "low"; }

std::size_t fraction_count(double p, std::size_t n) {
  return static_cast<std::size_t>(std::floor(p * static_cast<double>(n) + 0.5));
}

PixelSelection select_top_fraction(const AttributionMap& map, double p, Direction direction) {
  require_pixel_map(map, "select_top_fraction");
  if (!(p > 0.0 && p <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "fraction must lie in (0, 1]");
  }
  PixelSelection sel;
  sel.rule = PixelSelection::Rule::kTopFraction;
  sel.parameter = p;
  sel.direction = direction;
  std::vector<std::size_t> order = ranked(map, direction);
  order.resize(std::min(order.size(), fraction_count(p, map.size())));
  sel.indices = std::move(order);
  return sel;
}

PixelSelection select_tau_mass(const AttributionMap& map, double tau) {
  require_pixel_map(map, "select_tau_mass");
  if (!(tau >= 0.0 && tau <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "tau must lie in [0, 1]");
  }
  PixelSelection sel;
  sel.rule = PixelSelection::Rule::kTauMass;
  sel.parameter = tau;
  sel.direction = Direction::kLow;
  if (tau == 0.0) return sel;

  std::vector<std::size_t> order(map.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto& v = map.values;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(v[a]) < std::abs(v[b]);
  });
  // The total is accumulated in the same order as the running sum, so tau = 1
  // admits every pixel exactly.
  double total = 0.0;
  for (std::size_t i : order) total += std::abs(v[i]);
  const double budget = tau * total;
  double running = 0.0;
  for (std::size_t i : order) {
    const double next = running + std::abs(v[i]);
    if (next > budget) break;
    running = next;
    sel.indices.push_back(i);
  }
  return sel;
}

PixelBias metric_pixel_bias(const AttributionMap& map, const ShapleyEstimate& reference,
                            double fraction, Direction direction, BiasNorm norm) {
  require_pixel_map(map, "pixel_bias");
  if (map.sign != SignInfo::kSigned) {
    throw Error(ErrorCode::kInvalidArgument,
                "pixel_bias needs a signed attribution map; " +
                    std::string(method_name(map.method)) + " has no negative values");
  }
  if (reference.values.size() != map.size()) {
    throw Error(ErrorCode::kShapeMismatch, "Shapley reference and map differ in pixel count");
  }
  const PixelSelection sel = select_top_fraction(map, fraction, direction);
  if (sel.indices.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "fraction selects no pixels");
  }
  const double map_norm = norm_of(map.values.data(), norm);
  const double ref_norm = norm_of(reference.values, norm);
  if (map_norm == 0.0 || ref_norm == 0.0) {
    throw Error(ErrorCode::kInvalidArgument, "pixel_bias: zero-norm map or Shapley reference");
  }
  const double s = static_cast<double>(sel.indices.size());
  const double ref_ratio = subset_sum(reference.values, sel.indices) / ref_norm;
  const double map_ratio = snap(subset_sum(map.values.data(), sel.indices) / map_norm);

  PixelBias out;
  out.set_size = sel.indices.size();
  out.value = std::abs(ref_ratio - map_ratio) / s;
  if (!reference.per_player_variance.empty()) {
    const double shared = subset_sum(reference.per_player_variance, sel.indices) / s;
    out.noise_sigma = std::sqrt(s * shared) / ref_norm / s;
  }
  return out;
}

PixelBias metric_pixel_bias(const AttributionMap& map, const ModelGraph& model,
                            const Tensor& image, const Baseline& baseline, std::size_t target,
                            double fraction, Direction direction, std::size_t permutations,
                            std::uint64_t seed, std::size_t workers, BiasNorm norm) {
  require_map_matches(map, model);
  const ModelValueFunction v(model, image, baseline, target);
  const ShapleyEstimate ref =
      sampled_shapley(v, {permutations, seed, workers, PermutationSource::kRandom});
  return metric_pixel_bias(map, ref, fraction, direction, norm);
}

double feature_normalizer(const ModelGraph& model, std::span<const Tensor> images,
                          LayerRef layer) {
  if (images.empty()) throw Error(ErrorCode::kInvalidArgument, "feature normalizer needs images");
  const std::size_t idx = resolve_layer(model, layer);
  std::vector<Tensor> features;
  features.reserve(images.size());
  for (const Tensor& img : images) features.push_back(forward(model, img).output(idx));
  const std::size_t dim = features.front().size();
  std::vector<double> mean(dim);
  std::vector<double> column(images.size());
  for (std::size_t k = 0; k < dim; ++k) {
    for (std::size_t i = 0; i < features.size(); ++i) column[i] = features[i][k];
    mean[k] = pairwise_sum(column) / static_cast<double>(features.size());
  }
  std::vector<double> dist(features.size());
  std::vector<double> diff(dim);
  for (std::size_t i = 0; i < features.size(); ++i) {
    for (std::size_t k = 0; k < dim; ++k) diff[k] = features[i][k] - mean[k];
    dist[i] = l2_norm(diff);
  }
  const double spread = pairwise_sum(dist) / static_cast<double>(features.size());
  if (!(spread > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument,
                "feature normalizer undefined: all images share the same feature");
  }
  return 1.0 / spread;
}

Tensor mask_low_mass(const AttributionMap& map, const Tensor& image, const Baseline& baseline,
                     double tau) {
  const PixelSelection sel = select_tau_mass(map, tau);
  Tensor out = image;
  if (sel.indices.empty()) return out;
  const Tensor base = baseline.image(image.shape());
  const std::size_t plane = image.shape()[1] * image.shape()[2];
  for (std::size_t p : sel.indices)
    for (std::size_t c = 0; c < image.shape()[0]; ++c) out[c * plane + p] = base[c * plane + p];
  return out;
}

double metric_unexplainable(const AttributionMap& map, const ModelGraph& model,
                            const Tensor& image, const Baseline& baseline, double tau,
                            double alpha, LayerRef layer) {
  require_pixel_map(map, "unexplainable");
  require_map_matches(map, model);
  const std::size_t idx = resolve_layer(model, layer);
  const Tensor masked = mask_low_mass(map, image, baseline, tau);
  const Tensor f = forward(model, image).output(idx);
  const Tensor f_masked = forward(model, masked).output(idx);
  std::vector<double> diff(f.size());
  for (std::size_t k = 0; k < f.size(); ++k) diff[k] = f_masked[k] - f[k];
  return alpha * l2_norm(diff);
}

std::vector<unsigned char> half_mask_pixels(std::size_t rows, std::size_t cols, HalfMask mask) {
  std::vector<unsigned char> out(rows * cols, 0);
  const std::size_t keep_cols = cols / 2;
  const std::size_t keep_rows = rows / 2;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      bool masked = false;
      switch (mask) {
        case HalfMask::kRight: masked = c >= keep_cols; break;
        case HalfMask::kLeft: masked = c < cols - keep_cols; break;
        case HalfMask::kTop: masked = r < rows - keep_rows; break;
        case HalfMask::kBottom: masked = r >= keep_rows; break;
      }
      out[r * cols + c] = masked ? 1 : 0;
    }
  return out;
}

Tensor apply_half_mask(const Tensor& image, const Baseline& baseline, HalfMask mask) {
  const std::size_t rows = image.shape()[1], cols = image.shape()[2];
  const auto pixels = half_mask_pixels(rows, cols, mask);
  const Tensor base = baseline.image(image.shape());
  Tensor out = image;
  const std::size_t plane = rows * cols;
  for (std::size_t c = 0; c < image.shape()[0]; ++c)
    for (std::size_t p = 0; p < plane; ++p)
      if (pixels[p]) out[c * plane + p] = base[c * plane + p];
  return out;
}

double metric_non_robustness(const Explainer& explainer, const ModelGraph& model,
                             const Tensor& image, const Baseline& baseline, std::size_t target) {
  return metric_non_robustness(explainer, explainer(image, target), model, image, baseline,
                               target);
}

double metric_non_robustness(const Explainer& explainer, const AttributionMap& original,
                             const ModelGraph& model, const Tensor& image,
                             const Baseline& baseline, std::size_t target) {
  require_pixel_map(original, "non_robust");
  require_map_matches(original, model);
  const double norm = l2_norm(original.values.data());
  if (norm == 0.0) {
    throw Error(ErrorCode::kInvalidArgument, "non_robust: zero-norm attribution map");
  }
  std::vector<double> per_mask;
  for (HalfMask mask : kHalfMasks) {
    const AttributionMap masked = explainer(apply_half_mask(image, baseline, mask), target);
    require_map_matches(masked, model);
    const auto hidden = half_mask_pixels(model.height(), model.width(), mask);
    std::vector<double> sq;
    for (std::size_t p = 0; p < hidden.size(); ++p) {
      if (hidden[p]) continue;
      const double d = original.values[p] - masked.values[p];
      sq.push_back(d * d);
    }
    per_mask.push_back(std::sqrt(pairwise_sum(sq)) / norm);
  }
  return pairwise_sum(per_mask) / static_cast<double>(per_mask.size());
}

double metric_mutual(const AttributionMap& a, const AttributionMap& b) {
  require_pixel_map(a, "mutual");
  require_pixel_map(b, "mutual");
  if (a.values.shape() != b.values.shape()) {
    throw Error(ErrorCode::kShapeMismatch, "mutual: maps differ in shape");
  }
  const double na = l2_norm(a.values.data());
  const double nb = l2_norm(b.values.data());
  if (na == 0.0 || nb == 0.0) throw Error(ErrorCode::kInvalidArgument, "mutual: zero-norm map");
  std::vector<double> diff(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) diff[i] = a.values[i] / na - b.values[i] / nb;
  return l2_norm(diff);
}

std::string_view metric_name(MetricKind kind) {
  switch (kind) {
    case MetricKind::kPixelBias: return "pixel_bias";
    case MetricKind::kUnexplainable: return "unexplainable";
    case MetricKind::kNonRobust: return "non_robust";
    case MetricKind::kMutual: return "mutual";
  }
  return "unknown";
}

std::optional<MetricKind> parse_metric(std::string_view name) {
  for (MetricKind k : {MetricKind::kPixelBias, MetricKind::kUnexplainable, MetricKind::kNonRobust,
                       MetricKind::kMutual}) {
    if (metric_name(k) == name) return k;
  }
  return std::nullopt;
}

void MetricReport::finalize() {
  n_images = per_image.size();
  aggregate = n_images == 0 ? 0.0 : pairwise_sum(per_image) / static_cast<double>(n_images);
}

}  // namespace attrib
