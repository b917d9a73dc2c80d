#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "attrib/explainers.hpp"
#include "attrib/model.hpp"
#include "attrib/model_io.hpp"
#include "attrib/shapley.hpp"

namespace attrib {

enum class Direction { kHigh, kLow };

std::string_view direction_name(Direction d);

struct PixelSelection {
  enum class Rule { kTopFraction, kTauMass };

  // Selected flat pixel ids, in selection order.
  std::vector<std::size_t> indices;
  Rule rule = Rule::kTopFraction;
  double parameter = 0.0;
  Direction direction = Direction::kHigh;
};

// round(p * n), halves rounded up.
std::size_t fraction_count(double p, std::size_t n);

// The round(p * |map|) highest (or lowest) entries; ties go to the lower
// flat index.
PixelSelection select_top_fraction(const AttributionMap& map, double p, Direction direction);

// Pixels in ascending |a| order (ties by index) while the cumulative |a| stays
// within tau times the total. tau = 0 selects nothing; an all-zero map with
// tau > 0 selects everything.
PixelSelection select_tau_mass(const AttributionMap& map, double tau);

enum class BiasNorm { kL1, kL2 };

struct PixelBias {
  double value = 0.0;
  // One standard deviation of the Shapley-side term from sampling noise,
  // assuming the per-pixel variance is shared across the set.
  double noise_sigma = 0.0;
  std::size_t set_size = 0;
};

// |sum_S A / ||A|| - sum_S a / ||a||| / |S| against a sampled Shapley
// reference. The map-side ratio is snapped to a 2^-32 grid, which makes the
// metric independent of any positive rescaling of the map.
PixelBias metric_pixel_bias(const AttributionMap& map, const ShapleyEstimate& reference,
                            double fraction, Direction direction, BiasNorm norm = BiasNorm::kL1);

// Same, drawing a fresh reference with `permutations` permutations from `seed`.
PixelBias metric_pixel_bias(const AttributionMap& map, const ModelGraph& model,
                            const Tensor& image, const Baseline& baseline, std::size_t target,
                            double fraction, Direction direction, std::size_t permutations,
                            std::uint64_t seed, std::size_t workers = 1,
                            BiasNorm norm = BiasNorm::kL1);

// 1 / E_I ||f_I - E[f]||_2 over `images` at `layer`.
double feature_normalizer(const ModelGraph& model, std::span<const Tensor> images,
                          LayerRef layer = LayerRef::last_conv());

// Image with the tau-mass pixels of `map` replaced by the baseline.
Tensor mask_low_mass(const AttributionMap& map, const Tensor& image, const Baseline& baseline,
                     double tau);

// alpha * ||f(masked image) - f(image)||_2.
double metric_unexplainable(const AttributionMap& map, const ModelGraph& model,
                            const Tensor& image, const Baseline& baseline, double tau,
                            double alpha, LayerRef layer = LayerRef::last_conv());

enum class HalfMask { kRight, kLeft, kTop, kBottom };

inline constexpr HalfMask kHalfMasks[] = {HalfMask::kRight, HalfMask::kLeft, HalfMask::kTop,
                                          HalfMask::kBottom};

// 1 for masked pixels. On odd extents the middle row/column is masked; the
// kept side has floor(extent / 2) rows/columns.
std::vector<unsigned char> half_mask_pixels(std::size_t rows, std::size_t cols, HalfMask mask);
Tensor apply_half_mask(const Tensor& image, const Baseline& baseline, HalfMask mask);

// Mean over the four half masks of ||a - a_masked||_2 on unmasked pixels,
// divided by ||a||_2. The masked images are explained for the same target.
double metric_non_robustness(const Explainer& explainer, const ModelGraph& model,
                             const Tensor& image, const Baseline& baseline, std::size_t target);
// Same, reusing an already computed map of the unmasked image.
double metric_non_robustness(const Explainer& explainer, const AttributionMap& original,
                             const ModelGraph& model, const Tensor& image,
                             const Baseline& baseline, std::size_t target);

// ||a / ||a||_2 - b / ||b||_2||_2 for two pixel-domain maps.
double metric_mutual(const AttributionMap& a, const AttributionMap& b);

enum class MetricKind { kPixelBias, kUnexplainable, kNonRobust, kMutual };

std::string_view metric_name(MetricKind kind);
std::optional<MetricKind> parse_metric(std::string_view name);

struct MetricReport {
  MetricKind metric = MetricKind::kPixelBias;
  std::map<std::string, std::string> params;
  std::vector<double> per_image;
  double aggregate = 0.0;
  std::size_t n_images = 0;
  std::uint64_t seed = 0;

  // Fills aggregate and n_images from per_image.
  void finalize();
};

}  // namespace attrib
