#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "attrib/explainers.hpp"
#include "attrib/metrics.hpp"
#include "attrib/model.hpp"
#include "attrib/model_io.hpp"

namespace attrib {

struct ModelSpec {
  std::string name;
  // Exactly one of manifest / reference is set.
  std::optional<std::filesystem::path> manifest;
  std::optional<std::string> reference;
  std::uint64_t reference_seed = 0;
};

enum class DatasetFormat { kCifar, kPpmList };

struct DatasetSpec {
  DatasetFormat format = DatasetFormat::kCifar;
  // A CIFAR batch file, or a list of PPM files.
  std::vector<std::filesystem::path> paths;
  // 0 means every image.
  std::size_t n_images = 0;
};

enum class TargetRule { kPredicted, kLabel };

struct ExplainerSpec {
  Method method = Method::kGrad;
  ExplainerConfig config;
};

struct MetricSpec {
  MetricKind kind = MetricKind::kPixelBias;
  std::vector<Method> methods;
  std::vector<double> fractions;
  std::vector<Direction> directions;
  std::vector<double> taus;
  std::size_t permutations = 1000;
  LayerRef layer = LayerRef::last_conv();
  BiasNorm norm = BiasNorm::kL1;
};

struct RunConfig {
  std::vector<ModelSpec> models;
  DatasetSpec dataset;
  BaselineMode baseline_mode = BaselineMode::kPerChannel;
  TargetRule target = TargetRule::kPredicted;
  std::vector<ExplainerSpec> explainers;
  std::vector<MetricSpec> metrics;
  std::uint64_t master_seed = 0;
  std::size_t workers = 1;
  std::filesystem::path output_dir = "attrib-out";

  const ExplainerSpec& explainer(Method method) const;
};

struct ConfigIssue {
  // Stable machine-readable code, e.g. "incompatible_method_metric".
  std::string code;
  std::string message;
};

struct ConfigValidation {
  std::optional<RunConfig> config;
  std::vector<ConfigIssue> issues;

  bool ok() const noexcept { return config.has_value() && issues.empty(); }
};

// Empty when `method` may feed `metric`; otherwise the reason it may not.
// pixel_bias needs signed pixel maps; the other metrics need pixel maps.
std::optional<std::string> incompatibility(Method method, MetricKind metric);

// Parses and fully resolves a run configuration. Relative paths resolve
// against `base_dir`. Every violation is collected; the config is returned
// only when there are none.
ConfigValidation validate_config(std::string_view text,
                                 const std::filesystem::path& base_dir = {});

}  // namespace attrib
