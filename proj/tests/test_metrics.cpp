#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "attrib/error.hpp"
#include "attrib/explainers.hpp"
#include "attrib/metrics.hpp"
#include "attrib/model_io.hpp"
#include "attrib/rng.hpp"
#include "attrib/shapley.hpp"
#include "support/fixtures.hpp"

namespace attrib {
namespace {

using testing::linear_model;
using testing::random_tensor;

template <class Fn>
ErrorCode code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected attrib::Error";
  return ErrorCode::kIo;
}

AttributionMap row_map(std::vector<double> v, Method method = Method::kGradientInput) {
  const std::size_t n = v.size();
  return make_map(method, 0, Tensor({1, n}, std::move(v)));
}

AttributionMap random_map(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  return make_map(Method::kGradientInput, 0, random_tensor({rows, cols}, seed, -1.0, 1.0));
}

std::vector<std::size_t> sorted(std::vector<std::size_t> v) {
  std::sort(v.begin(), v.end());
  return v;
}

ModelGraph random_linear(const Shape& shape, std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<double> w(shape_size(shape));
  for (double& x : w) x = rng.symmetric();
  return linear_model(shape, {w}, {0.1});
}

TEST(Selection, FractionCountRoundsHalfUp) {
  EXPECT_EQ(fraction_count(0.5, 3), 2u);
  EXPECT_EQ(fraction_count(0.1, 1024), 102u);
  EXPECT_EQ(fraction_count(0.3, 1024), 307u);
  EXPECT_EQ(fraction_count(1.0, 9), 9u);
  EXPECT_EQ(fraction_count(0.25, 2), 1u);
}

TEST(Selection, TopFractionExamples) {
  EXPECT_EQ(sorted(select_top_fraction(row_map({4, 3, 2, 1}), 0.5, Direction::kHigh).indices),
            (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(select_top_fraction(row_map({1, 1, 1, 1}), 0.25, Direction::kHigh).indices,
            (std::vector<std::size_t>{0}));
  EXPECT_EQ(sorted(select_top_fraction(row_map({4, 3, 2, 1}), 0.5, Direction::kLow).indices),
            (std::vector<std::size_t>{2, 3}));
  for (Direction d : {Direction::kHigh, Direction::kLow})
    EXPECT_EQ(sorted(select_top_fraction(row_map({4, -3, 2, 1}), 1.0, d).indices),
              (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(code_of([] { select_top_fraction(row_map({1, 2}), 0.0, Direction::kHigh); }),
            ErrorCode::kInvalidArgument);
}

TEST(Selection, TopFractionSideCondition) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const AttributionMap map = random_map(8, 8, seed);
    for (double p : {0.1, 0.3, 0.5, 0.7, 0.9}) {
      for (Direction d : {Direction::kHigh, Direction::kLow}) {
        const auto sel = select_top_fraction(map, p, d);
        ASSERT_EQ(sel.indices.size(), fraction_count(p, 64));
        std::vector<unsigned char> in(64, 0);
        for (std::size_t i : sel.indices) in[i] = 1;
        for (std::size_t i = 0; i < 64; ++i)
          for (std::size_t j = 0; j < 64; ++j)
            if (in[i] && !in[j]) {
              if (d == Direction::kHigh) {
                ASSERT_GE(map.values[i], map.values[j]);
              } else {
                ASSERT_LE(map.values[i], map.values[j]);
              }
            }
      }
    }
  }
}

TEST(Selection, TauMassExamples) {
  EXPECT_EQ(sorted(select_tau_mass(row_map({5, 3, 1, 1}), 0.2).indices),
            (std::vector<std::size_t>{2, 3}));
  EXPECT_TRUE(select_tau_mass(row_map({5, 3, 1, 1}), 0.0).indices.empty());
  EXPECT_EQ(select_tau_mass(row_map({5, -3, 1, 1}), 1.0).indices.size(), 4u);
  EXPECT_EQ(select_tau_mass(row_map({0, 0, 0}), 0.5).indices.size(), 3u);
  EXPECT_EQ(code_of([] { select_tau_mass(row_map({1}), 1.5); }), ErrorCode::kInvalidArgument);
}

TEST(Selection, TauMassIsMaximalWithinBudget) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const AttributionMap map = random_map(6, 6, seed);
    double total = 0.0;
    for (double v : map.values.data()) total += std::abs(v);
    for (double tau : {0.05, 0.1, 0.3, 0.6}) {
      const auto sel = select_tau_mass(map, tau);
      std::vector<unsigned char> in(36, 0);
      double mass = 0.0;
      for (std::size_t i : sel.indices) {
        in[i] = 1;
        mass += std::abs(map.values[i]);
      }
      EXPECT_LE(mass, tau * total * (1 + 1e-15));
      double next = INFINITY;
      for (std::size_t i = 0; i < 36; ++i)
        if (!in[i]) next = std::min(next, std::abs(map.values[i]));
      EXPECT_GT(mass + next, tau * total);
    }
  }
}

struct LinearCase {
  ModelGraph model = random_linear({3, 4, 4}, 31);
  Tensor image = random_tensor({3, 4, 4}, 32);
  Baseline zero = constant_baseline({0.0, 0.0, 0.0});
};

TEST(PixelBias, GiOnLinearModelWithinNoiseBound) {
  LinearCase c;
  const AttributionMap gi = explain_gi(c.model, c.image, 0);
  const ModelValueFunction v(c.model, c.image, c.zero, 0);
  const ShapleyEstimate ref = sampled_shapley(v, {50, 4});
  for (double p : {0.1, 0.3, 0.5, 0.7, 0.9})
    for (Direction d : {Direction::kHigh, Direction::kLow}) {
      const PixelBias b = metric_pixel_bias(gi, ref, p, d);
      // Linear games have zero sampling variance; the floor is the 2^-32
      // snapping quantum of the map-side ratio.
      const double floor = 0x1.0p-32 / static_cast<double>(b.set_size);
      EXPECT_LE(b.value, 3.0 * b.noise_sigma + floor) << p;
      EXPECT_EQ(b.set_size, fraction_count(p, 16));
    }
}

TEST(PixelBias, ExactReferenceOfItselfIsZero) {
  const ModelGraph m = build_reference_model("TinyMLP-9", 42);
  const Tensor img = random_tensor({1, 3, 3}, 1);
  const ModelValueFunction v(m, img, constant_baseline({0.5}), 2);
  const ShapleyEstimate exact = exact_shapley(v);
  const AttributionMap map = make_map(Method::kSampledShapley, 2, Tensor({3, 3}, exact.values));
  for (double p : {0.1, 0.5, 1.0}) {
    EXPECT_LE(metric_pixel_bias(map, exact, p, Direction::kHigh).value, 1e-9);
    EXPECT_LE(metric_pixel_bias(map, exact, p, Direction::kLow, BiasNorm::kL2).value, 1e-9);
  }
}

TEST(PixelBias, SymmetricModelUniformMap) {
  const ModelGraph m = linear_model({1, 2, 2}, {{0.5, 0.5, 0.5, 0.5}}, {0.0});
  const Tensor img({1, 2, 2}, 0.8);
  const AttributionMap map = row_map({1, 1, 1, 1});
  const AttributionMap square = make_map(Method::kGradientInput, 0, map.values.reshaped({2, 2}));
  const ModelValueFunction v(m, img, constant_baseline({0.2}), 0);
  const ShapleyEstimate ref = sampled_shapley(v, {10, 1});
  EXPECT_LE(metric_pixel_bias(square, ref, 0.5, Direction::kHigh).value, 1e-9);
}

TEST(PixelBias, BitExactScaleInvariance) {
  const ModelGraph m = build_reference_model("MiniCNN-32", 42);
  const Tensor img = testing::synthetic_cifar(1, 3).images[0];
  const AttributionMap gi = explain_gi(m, img, 1);
  ShapleyEstimate ref;
  ref.values = random_tensor({1024}, 5, -1.0, 1.0).vector();
  ref.per_player_variance.assign(1024, 0.01);
  for (double scale : {7.3, 0.001, 1234.5}) {
    Tensor scaled = gi.values;
    for (double& x : scaled.data()) x *= scale;
    const AttributionMap s = make_map(Method::kGradientInput, 1, scaled);
    for (double p : {0.1, 0.5, 0.9})
      for (Direction d : {Direction::kHigh, Direction::kLow})
        for (BiasNorm n : {BiasNorm::kL1, BiasNorm::kL2})
          EXPECT_EQ(metric_pixel_bias(s, ref, p, d, n).value,
                    metric_pixel_bias(gi, ref, p, d, n).value)
              << scale << " " << p;
  }
}

TEST(PixelBias, ExactShapleyMapConvergesWithReferenceSize) {
  const ModelGraph m = build_reference_model("TinyMLP-9", 42);
  const Tensor img = random_tensor({1, 3, 3}, 17);
  const ModelValueFunction v(m, img, constant_baseline({0.5}), 1);
  const ShapleyEstimate exact = exact_shapley(v);
  const AttributionMap map =
      make_map(Method::kSampledShapley, 1, Tensor({3, 3}, exact.values));
  auto average = [&](std::size_t permutations) {
    double acc = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const ShapleyEstimate ref = sampled_shapley(v, {permutations, seed});
      for (double p : {0.1, 0.3, 0.5, 0.7, 0.9})
        for (Direction d : {Direction::kHigh, Direction::kLow})
          acc += metric_pixel_bias(map, ref, p, d).value;
    }
    return acc / 200.0;
  };
  EXPECT_LE(average(1000), average(50));
}

TEST(PixelBias, ModelOverloadDeterministic) {
  const ModelGraph m = build_reference_model("TinyMLP-9", 42);
  const Tensor img = random_tensor({1, 3, 3}, 2);
  const Baseline b = constant_baseline({0.5});
  const AttributionMap gi = explain_gi(m, img, 0);
  const PixelBias a = metric_pixel_bias(gi, m, img, b, 0, 0.3, Direction::kHigh, 100, 9, 1);
  const PixelBias c = metric_pixel_bias(gi, m, img, b, 0, 0.3, Direction::kHigh, 100, 9, 4);
  EXPECT_EQ(a.value, c.value);
  EXPECT_EQ(a.noise_sigma, c.noise_sigma);
}

TEST(PixelBias, RejectsIncompatibleMaps) {
  ShapleyEstimate ref;
  ref.values = {1.0, 2.0, 3.0, 4.0};
  const AttributionMap pert = make_map(Method::kPert, 0, Tensor({2, 2}, 0.5));
  EXPECT_EQ(code_of([&] { metric_pixel_bias(pert, ref, 0.5, Direction::kHigh); }),
            ErrorCode::kInvalidArgument);
  const AttributionMap cam = make_map(Method::kCam, 0, Tensor({2, 2}, 0.5), 3);
  EXPECT_EQ(code_of([&] { metric_pixel_bias(cam, ref, 0.5, Direction::kHigh); }),
            ErrorCode::kDomainMismatch);
  const AttributionMap zero = make_map(Method::kGradientInput, 0, Tensor({2, 2}));
  EXPECT_EQ(code_of([&] { metric_pixel_bias(zero, ref, 0.5, Direction::kHigh); }),
            ErrorCode::kInvalidArgument);
  const AttributionMap wrong = make_map(Method::kGradientInput, 0, Tensor({3, 3}, 1.0));
  EXPECT_EQ(code_of([&] { metric_pixel_bias(wrong, ref, 0.5, Direction::kHigh); }),
            ErrorCode::kShapeMismatch);
}

struct CnnCase {
  ModelGraph model = build_reference_model("MiniCNN-32", 42);
  ImageSet set = testing::synthetic_cifar(6, 11);
  Baseline baseline = compute_baseline(set);
};

TEST(Unexplainable, TauZeroIsExactlyZero) {
  CnnCase c;
  const double alpha = feature_normalizer(c.model, c.set.images);
  for (const Tensor& img : c.set.images) {
    const AttributionMap grad = explain_grad(c.model, img, 0);
    EXPECT_EQ(metric_unexplainable(grad, c.model, img, c.baseline, 0.0, alpha), 0.0);
  }
}

TEST(Unexplainable, ImageAtBaselineIsZero) {
  CnnCase c;
  const Tensor img = c.baseline.image(c.model.input_shape());
  const AttributionMap gi = random_map(32, 32, 4);
  for (double tau : {0.05, 0.5, 1.0})
    EXPECT_EQ(metric_unexplainable(gi, c.model, img, c.baseline, tau, 2.0), 0.0);
}

TEST(Unexplainable, TauOneMatchesBaselineFeatureDistance) {
  CnnCase c;
  const double alpha = feature_normalizer(c.model, c.set.images);
  const std::size_t layer = resolve_layer(c.model, LayerRef::last_conv());
  const Tensor f_base = forward(c.model, c.baseline.image(c.model.input_shape())).output(layer);
  for (const Tensor& img : c.set.images) {
    const Tensor f = forward(c.model, img).output(layer);
    double sq = 0.0;
    for (std::size_t k = 0; k < f.size(); ++k) sq += (f_base[k] - f[k]) * (f_base[k] - f[k]);
    const AttributionMap grad = explain_grad(c.model, img, 0);
    EXPECT_NEAR(metric_unexplainable(grad, c.model, img, c.baseline, 1.0, alpha),
                alpha * std::sqrt(sq), 1e-9);
  }
}

TEST(Unexplainable, GoldenAgainstStraightLineFeatures) {
  CnnCase c;
  const Tensor& img = c.set.images[2];
  const AttributionMap grad = explain_grad(c.model, img, 3);
  // Independent tau-mass selection: ascending |a|, ties by index.
  std::vector<std::size_t> order(1024);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return std::abs(grad.values[i]) < std::abs(grad.values[j]);
  });
  double total = 0.0;
  for (double v : grad.values.data()) total += std::abs(v);
  Tensor masked = img;
  double mass = 0.0;
  for (std::size_t p : order) {
    mass += std::abs(grad.values[p]);
    if (mass > 0.05 * total) break;
    for (std::size_t ch = 0; ch < 3; ++ch) masked[ch * 1024 + p] = c.baseline.per_channel_mean[ch];
  }
  const std::size_t upto = resolve_layer(c.model, LayerRef::last_conv()) + 1;
  const auto f = testing::straight_line_forward(c.model, img, upto);
  const auto g = testing::straight_line_forward(c.model, masked, upto);
  double sq = 0.0;
  for (std::size_t k = 0; k < f.size(); ++k) sq += (f[k] - g[k]) * (f[k] - g[k]);
  const double value = metric_unexplainable(grad, c.model, img, c.baseline, 0.05, 1.0);
  EXPECT_NEAR(value, std::sqrt(sq), 1e-12);
  // Frozen from the oracle above.
  EXPECT_NEAR(value, 0.45835654070675619, 1e-12);
}

TEST(Unexplainable, MaskLowMassReplacesSelectedPixels) {
  const AttributionMap map = make_map(Method::kGradientInput, 0,
                                      Tensor::from({2, 2}, {5.0, 1.0, 3.0, 1.0}));
  const Tensor img({3, 2, 2}, 0.9);
  const Tensor masked = mask_low_mass(map, img, constant_baseline({0.1, 0.2, 0.3}), 0.2);
  EXPECT_EQ(masked.at(0, 0, 0), 0.9);
  EXPECT_EQ(masked.at(0, 0, 1), 0.1);
  EXPECT_EQ(masked.at(2, 1, 1), 0.3);
  EXPECT_EQ(masked.at(1, 1, 0), 0.9);
}

TEST(Unexplainable, FeatureNormalizer) {
  const ModelGraph m = build_reference_model("MiniCNN-32", 42);
  const std::vector<Tensor> two = {random_tensor({3, 32, 32}, 1), random_tensor({3, 32, 32}, 2)};
  const std::size_t layer = resolve_layer(m, LayerRef::last_conv());
  const Tensor f1 = forward(m, two[0]).output(layer), f2 = forward(m, two[1]).output(layer);
  double sq = 0.0;
  for (std::size_t k = 0; k < f1.size(); ++k) sq += (f1[k] - f2[k]) * (f1[k] - f2[k]);
  EXPECT_NEAR(feature_normalizer(m, two), 2.0 / std::sqrt(sq), 1e-9);
  const std::vector<Tensor> same = {two[0], two[0]};
  EXPECT_EQ(code_of([&] { feature_normalizer(m, same); }), ErrorCode::kInvalidArgument);
}

TEST(NonRobust, ConstantExplainerIsZero) {
  CnnCase c;
  const Explainer constant = [](const Tensor&, std::size_t t) {
    return make_map(Method::kGradientInput, t, Tensor({32, 32}, 0.25));
  };
  EXPECT_EQ(metric_non_robustness(constant, c.model, c.set.images[0], c.baseline, 0), 0.0);
}

TEST(NonRobust, LinearModelGradIsZero) {
  const ModelGraph m = random_linear({3, 8, 8}, 3);
  const Baseline b = constant_baseline({0.5, 0.5, 0.5});
  const Explainer grad = bind_explainer(Method::kGrad, m, b);
  for (std::uint64_t s = 0; s < 3; ++s)
    EXPECT_EQ(metric_non_robustness(grad, m, random_tensor({3, 8, 8}, s), b, 0), 0.0);
}

TEST(NonRobust, MatchesDirectRecomputation) {
  CnnCase c;
  const Tensor& img = c.set.images[1];
  const Explainer gi = bind_explainer(Method::kGradientInput, c.model, c.baseline);
  const AttributionMap a = explain_gi(c.model, img, 5);
  double norm = 0.0;
  for (double v : a.values.data()) norm += v * v;
  norm = std::sqrt(norm);
  double total = 0.0;
  for (HalfMask mask : kHalfMasks) {
    const AttributionMap m = explain_gi(c.model, apply_half_mask(img, c.baseline, mask), 5);
    const auto hidden = half_mask_pixels(32, 32, mask);
    double sq = 0.0;
    for (std::size_t p = 0; p < 1024; ++p)
      if (!hidden[p]) sq += (a.values[p] - m.values[p]) * (a.values[p] - m.values[p]);
    total += std::sqrt(sq) / norm;
  }
  const double value = metric_non_robustness(gi, c.model, img, c.baseline, 5);
  EXPECT_GT(value, 0.0);
  EXPECT_NEAR(value, total / 4.0, 1e-12);
  EXPECT_EQ(metric_non_robustness(gi, a, c.model, img, c.baseline, 5), value);
  // Frozen from the recomputation above.
  EXPECT_NEAR(value, 0.22127528974988447, 1e-12);
}

TEST(NonRobust, HalfMaskGeometry) {
  // 3x3: the middle column/row is always masked; one column/row is kept.
  const auto right = half_mask_pixels(3, 3, HalfMask::kRight);
  EXPECT_EQ(right, (std::vector<unsigned char>{0, 1, 1, 0, 1, 1, 0, 1, 1}));
  const auto left = half_mask_pixels(3, 3, HalfMask::kLeft);
  EXPECT_EQ(left, (std::vector<unsigned char>{1, 1, 0, 1, 1, 0, 1, 1, 0}));
  const auto top = half_mask_pixels(3, 3, HalfMask::kTop);
  EXPECT_EQ(top, (std::vector<unsigned char>{1, 1, 1, 1, 1, 1, 0, 0, 0}));
  const auto bottom = half_mask_pixels(2, 2, HalfMask::kBottom);
  EXPECT_EQ(bottom, (std::vector<unsigned char>{0, 0, 1, 1}));
  const Tensor masked =
      apply_half_mask(Tensor({3, 2, 2}, 1.0), constant_baseline({0.0, 0.5, 0.0}), HalfMask::kRight);
  EXPECT_EQ(masked.vector(),
            (std::vector<double>{1, 0, 1, 0, 1, 0.5, 1, 0.5, 1, 0, 1, 0}));
}

TEST(NonRobust, ZeroMapRejected) {
  CnnCase c;
  const Explainer zero = [](const Tensor&, std::size_t t) {
    return make_map(Method::kGradientInput, t, Tensor({32, 32}));
  };
  EXPECT_EQ(code_of([&] { metric_non_robustness(zero, c.model, c.set.images[0], c.baseline, 0); }),
            ErrorCode::kInvalidArgument);
}

TEST(Mutual, Examples) {
  EXPECT_EQ(metric_mutual(row_map({1, 2, 3}), row_map({1, 2, 3})), 0.0);
  EXPECT_NEAR(metric_mutual(row_map({1, 0}), row_map({0, 1})), std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(metric_mutual(row_map({1, 1}), row_map({1, 0})), std::sqrt(2.0 - std::sqrt(2.0)),
              1e-12);
  EXPECT_NEAR(metric_mutual(row_map({1, 1}), row_map({1, 0})), 0.76537, 1e-5);
  EXPECT_NEAR(metric_mutual(row_map({1, 0}), row_map({-1, 0})), 2.0, 1e-12);
}

TEST(Mutual, SymmetricAndScaleInvariant) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const AttributionMap a = random_map(4, 4, s), b = random_map(4, 4, s + 100);
    const double ab = metric_mutual(a, b);
    EXPECT_EQ(ab, metric_mutual(b, a));
    Tensor scaled = a.values;
    for (double& x : scaled.data()) x *= 7.3;
    EXPECT_NEAR(metric_mutual(make_map(Method::kGradientInput, 0, scaled), b), ab, 1e-12);
    EXPECT_LE(ab, 2.0 + 1e-12);
  }
}

TEST(Mutual, Errors) {
  EXPECT_EQ(code_of([] { metric_mutual(row_map({0, 0}), row_map({1, 0})); }),
            ErrorCode::kInvalidArgument);
  EXPECT_EQ(code_of([] { metric_mutual(row_map({1, 0}), row_map({1, 0, 0})); }),
            ErrorCode::kShapeMismatch);
  const AttributionMap cam = make_map(Method::kCam, 0, Tensor::from({1, 2}, {1, 0}), 3);
  EXPECT_EQ(code_of([&] { metric_mutual(cam, row_map({1, 0})); }), ErrorCode::kDomainMismatch);
}

TEST(Report, FinalizeAveragesPerImage) {
  MetricReport r;
  r.per_image = {1.0, 2.0, 4.5};
  r.finalize();
  EXPECT_EQ(r.n_images, 3u);
  EXPECT_DOUBLE_EQ(r.aggregate, 2.5);
  EXPECT_EQ(parse_metric("non_robust"), MetricKind::kNonRobust);
  EXPECT_FALSE(parse_metric("bias").has_value());
  EXPECT_EQ(direction_name(Direction::kLow), "low");
}

}  // namespace
}  // namespace attrib
