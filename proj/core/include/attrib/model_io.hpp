#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "attrib/model.hpp"
#include "attrib/tensor.hpp"

namespace attrib {

inline constexpr int kManifestFormatVersion = 1;

// A manifest (canonical JSON text) plus its little-endian float32 weight blob.
struct SerializedModel {
  std::string manifest;
  std::vector<std::uint8_t> weights;
};

// Weights are narrowed to float32. Models whose weights are already float32
// values (everything produced by load_model or build_reference_model)
// round-trip exactly.
SerializedModel save_model(const ModelGraph& model);

ModelGraph load_model(std::string_view manifest, std::span<const std::uint8_t> weights);

// Files: <prefix>.json and <prefix>.bin.
void save_model_files(const ModelGraph& model, const std::filesystem::path& prefix);
// Accepts the manifest path; the blob is the sibling file with extension .bin.
ModelGraph load_model_files(const std::filesystem::path& manifest_path);

// "TinyMLP-9": flatten(1x3x3) -> dense(9->8) -> relu -> dense(8->4).
// "MiniCNN-32": conv(3->8,3x3,pad 1) -> relu -> maxpool(2) -> conv(8->16,3x3,pad 1)
//               -> relu -> global_avg_pool -> dense(16->10), input 3x32x32.
// Weights are uniform in [-1, 1) scaled by 1/sqrt(fan_in), drawn from a
// SplitMix64 stream seeded with mix_seed(seed, fnv1a64(name)) in layer order
// (weight then bias), and rounded to float32. Only integer arithmetic, exact
// conversions and correctly rounded IEEE operations are involved.
ModelGraph build_reference_model(std::string_view name, std::uint64_t seed);

std::vector<std::string> reference_model_names();

struct ImageSet {
  Shape image_shape;
  std::vector<Tensor> images;
  // Empty when the set is unlabeled.
  std::vector<std::size_t> labels;
  std::string source_id;

  std::size_t size() const noexcept { return images.size(); }
};

inline constexpr std::size_t kCifarRecordBytes = 3073;

ImageSet parse_cifar_batch(std::span<const std::uint8_t> bytes, std::string source_id);
ImageSet load_cifar_batch(const std::filesystem::path& path);
// Pixels are rounded to the nearest byte.
std::vector<std::uint8_t> encode_cifar_batch(const ImageSet& set);

Tensor parse_ppm(std::span<const std::uint8_t> bytes);
Tensor load_ppm(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_ppm(const Tensor& image);

enum class BaselineMode { kPerChannel, kPerPixel };

// Replacement value for absent pixels.
struct Baseline {
  std::vector<double> per_channel_mean;
  // Set only in per-pixel mode.
  std::optional<Tensor> mean_image;

  // A full image with every pixel at its baseline value.
  Tensor image(const Shape& shape) const;
};

Baseline compute_baseline(const ImageSet& images,
                          BaselineMode mode = BaselineMode::kPerChannel);
Baseline constant_baseline(std::vector<double> per_channel);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, std::string_view text);

}  // namespace attrib
