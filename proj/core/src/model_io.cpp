#include "attrib/model_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <limits>
#include <cmath>
#include <fstream>
#include <iterator>
#include <utility>

#include "attrib/error.hpp"
#include "attrib/parallel.hpp"
#include "attrib/rng.hpp"
#include "json.hpp"

namespace attrib {

using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// File helpers

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "write failed for " + path.string());
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

void append_f32(std::vector<std::uint8_t>& out, double value) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(value));
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
}

double read_f32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) {
    bits |= static_cast<std::uint32_t>(bytes[offset + b]) << (8 * b);
  }
  return static_cast<double>(std::bit_cast<float>(bits));
}

Json shape_json(const Shape& s) {
  Json j = Json::array();
  for (std::size_t d : s) j.push_back(d);
  return j;
}

Json blob_entry(const Tensor& t, std::vector<std::uint8_t>& blob) {
  Json j;
  j["shape"] = shape_json(t.shape());
  j["offset"] = blob.size();
  for (double v : t.data()) append_f32(blob, v);
  return j;
}

[[noreturn]] void manifest_error(const std::string& what) {
  throw Error(ErrorCode::kFormat, "model manifest: " + what);
}

Shape parse_shape(const Json& j, const char* what) {
  if (!j.is_array() || j.empty()) manifest_error(std::string(what) + " must be a nonempty array");
  Shape s;
  for (const auto& d : j) {
    if (!d.is_number_unsigned() || d.get<std::size_t>() == 0) {
      manifest_error(std::string(what) + " entries must be positive integers");
    }
    s.push_back(d.get<std::size_t>());
  }
  return s;
}

std::size_t get_size(const Json& layer, const char* key) {
  if (!layer.contains(key) || !layer[key].is_number_unsigned()) {
    manifest_error(std::string("layer field '") + key + "' missing or not a nonnegative integer");
  }
  return layer[key].get<std::size_t>();
}

struct BlobRange {
  std::size_t begin;
  std::size_t end;
};

Tensor read_blob_tensor(const Json& entry, const Shape& expected,
                        std::span<const std::uint8_t> blob,
                        std::vector<BlobRange>& ranges) {
  if (!entry.is_object() || !entry.contains("shape") || !entry.contains("offset")) {
    manifest_error("weight entry needs 'shape' and 'offset'");
  }
  const Shape shape = parse_shape(entry["shape"], "weight shape");
  if (shape != expected) {
    throw Error(ErrorCode::kShapeMismatch, "model manifest: weight shape " +
                                               shape_to_string(shape) + " expected " +
                                               shape_to_string(expected));
  }
  if (!entry["offset"].is_number_unsigned()) manifest_error("offset must be a nonnegative integer");
  const std::size_t offset = entry["offset"].get<std::size_t>();
  const std::size_t bytes = shape_size(shape) * 4;
  if (offset % 4 != 0) manifest_error("offset not aligned to 4 bytes");
  if (offset + bytes > blob.size()) {
    throw Error(ErrorCode::kTruncated,
                "weight blob too short: need bytes [" + std::to_string(offset) + ", " +
                    std::to_string(offset + bytes) + "), have " + std::to_string(blob.size()));
  }
  ranges.push_back({offset, offset + bytes});
  std::vector<double> values(shape_size(shape));
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = read_f32(blob, offset + 4 * i);
  return Tensor(shape, std::move(values));
}

}  // namespace

SerializedModel save_model(const ModelGraph& model) {
  SerializedModel out;
  Json manifest;
  manifest["format_version"] = kManifestFormatVersion;
  manifest["input_shape"] = shape_json(model.input_shape());
  manifest["class_names"] = model.class_names();
  Json layers = Json::array();
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    const Layer& layer = model.layers()[i];
    Json j;
    j["type"] = std::string(layer_kind(layer));
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      j["in"] = d->in;
      j["out"] = d->out;
      j["weight"] = blob_entry(d->weight, out.weights);
      j["bias"] = blob_entry(d->bias, out.weights);
    } else if (const auto* c = std::get_if<Conv2dLayer>(&layer)) {
      j["in_channels"] = c->in_channels;
      j["out_channels"] = c->out_channels;
      j["kernel"] = c->kernel;
      j["stride"] = c->stride;
      j["padding"] = c->padding;
      j["weight"] = blob_entry(c->weight, out.weights);
      j["bias"] = blob_entry(c->bias, out.weights);
    } else if (const auto* p = std::get_if<MaxPool2dLayer>(&layer)) {
      j["size"] = p->size;
    }
    j["output_shape"] = shape_json(model.output_shape(i));
    layers.push_back(std::move(j));
  }
  manifest["layers"] = std::move(layers);
  manifest["weight_bytes"] = out.weights.size();
  out.manifest = manifest.dump(2) + "\n";
  return out;
}

ModelGraph load_model(std::string_view manifest_text, std::span<const std::uint8_t> blob) {
  Json manifest;
  try {
    manifest = Json::parse(manifest_text);
  } catch (const Json::parse_error& e) {
    manifest_error(std::string("invalid JSON: ") + e.what());
  }
  if (!manifest.is_object()) manifest_error("top level must be an object");
  if (!manifest.contains("format_version") || !manifest["format_version"].is_number_integer()) {
    manifest_error("missing format_version");
  }
  const int version = manifest["format_version"].get<int>();
  if (version != kManifestFormatVersion) {
    throw Error(ErrorCode::kVersion, "model manifest: unsupported format_version " +
                                         std::to_string(version));
  }
  if (!manifest.contains("input_shape") || !manifest.contains("class_names") ||
      !manifest.contains("layers") || !manifest["layers"].is_array()) {
    manifest_error("needs input_shape, class_names and layers");
  }
  const Shape input_shape = parse_shape(manifest["input_shape"], "input_shape");
  std::vector<std::string> class_names;
  for (const auto& name : manifest["class_names"]) {
    if (!name.is_string()) manifest_error("class_names must be strings");
    class_names.push_back(name.get<std::string>());
  }
  if (manifest.contains("weight_bytes")) {
    const auto declared = manifest["weight_bytes"].get<std::size_t>();
    if (blob.size() < declared) {
      throw Error(ErrorCode::kTruncated, "weight blob has " + std::to_string(blob.size()) +
                                             " bytes, manifest declares " +
                                             std::to_string(declared));
    }
  }

  std::vector<Layer> layers;
  std::vector<BlobRange> ranges;
  for (const auto& j : manifest["layers"]) {
    if (!j.is_object() || !j.contains("type") || !j["type"].is_string()) {
      manifest_error("layer needs a string 'type'");
    }
    const auto type = j["type"].get<std::string>();
    if (type == "dense") {
      DenseLayer d;
      d.in = get_size(j, "in");
      d.out = get_size(j, "out");
      d.weight = read_blob_tensor(j["weight"], {d.out, d.in}, blob, ranges);
      d.bias = read_blob_tensor(j["bias"], {d.out}, blob, ranges);
      layers.emplace_back(std::move(d));
    } else if (type == "conv2d") {
      Conv2dLayer c;
      c.in_channels = get_size(j, "in_channels");
      c.out_channels = get_size(j, "out_channels");
      c.kernel = get_size(j, "kernel");
      c.stride = get_size(j, "stride");
      c.padding = get_size(j, "padding");
      c.weight = read_blob_tensor(j["weight"], {c.out_channels, c.in_channels, c.kernel, c.kernel},
                                  blob, ranges);
      c.bias = read_blob_tensor(j["bias"], {c.out_channels}, blob, ranges);
      layers.emplace_back(std::move(c));
    } else if (type == "relu") {
      layers.emplace_back(ReluLayer{});
    } else if (type == "maxpool2d") {
      layers.emplace_back(MaxPool2dLayer{get_size(j, "size")});
    } else if (type == "global_avg_pool") {
      layers.emplace_back(GlobalAvgPoolLayer{});
    } else if (type == "flatten") {
      layers.emplace_back(FlattenLayer{});
    } else {
      throw Error(ErrorCode::kUnsupportedLayer, "model manifest: unknown layer type '" + type + "'");
    }
  }

  std::sort(ranges.begin(), ranges.end(),
            [](const BlobRange& a, const BlobRange& b) { return a.begin < b.begin; });
  std::size_t cursor = 0;
  for (const auto& r : ranges) {
    if (r.begin != cursor) {
      manifest_error(r.begin < cursor ? "weight ranges overlap" : "gap in weight blob");
    }
    cursor = r.end;
  }
  if (cursor != blob.size()) {
    manifest_error("weight blob has " + std::to_string(blob.size() - cursor) +
                   " trailing bytes not covered by any tensor");
  }

  ModelGraph model(input_shape, std::move(layers), std::move(class_names));
  std::size_t i = 0;
  for (const auto& j : manifest["layers"]) {
    if (j.contains("output_shape") &&
        parse_shape(j["output_shape"], "output_shape") != model.output_shape(i)) {
      throw Error(ErrorCode::kShapeMismatch,
                  "model manifest: declared output_shape of layer " + std::to_string(i) +
                      " disagrees with the computed " + shape_to_string(model.output_shape(i)));
    }
    ++i;
  }
  return model;
}

void save_model_files(const ModelGraph& model, const std::filesystem::path& prefix) {
  const SerializedModel s = save_model(model);
  std::filesystem::path json = prefix;
  json += ".json";
  std::filesystem::path bin = prefix;
  bin += ".bin";
  write_text(json, s.manifest);
  write_file(bin, s.weights);
}

ModelGraph load_model_files(const std::filesystem::path& manifest_path) {
  const auto manifest = read_file(manifest_path);
  std::filesystem::path bin = manifest_path;
  bin.replace_extension(".bin");
  const auto blob = read_file(bin);
  return load_model(std::string_view(reinterpret_cast<const char*>(manifest.data()), manifest.size()),
                    blob);
}

// ---------------------------------------------------------------------------
// Reference models

namespace {

Tensor random_tensor(Shape shape, double scale, SplitMix64& rng) {
  std::vector<double> values(shape_size(shape));
  for (double& v : values) v = static_cast<double>(static_cast<float>(rng.symmetric() * scale));
  return Tensor(std::move(shape), std::move(values));
}

DenseLayer random_dense(std::size_t in, std::size_t out, SplitMix64& rng) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(in));
  DenseLayer d{in, out, {}, {}};
  d.weight = random_tensor({out, in}, scale, rng);
  d.bias = random_tensor({out}, scale, rng);
  return d;
}

Conv2dLayer random_conv(std::size_t in, std::size_t out, std::size_t kernel,
                        std::size_t padding, SplitMix64& rng) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
  Conv2dLayer c{in, out, kernel, 1, padding, {}, {}};
  c.weight = random_tensor({out, in, kernel, kernel}, scale, rng);
  c.bias = random_tensor({out}, scale, rng);
  return c;
}

std::vector<std::string> numbered_classes(std::size_t n) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < n; ++i) names.push_back("class" + std::to_string(i));
  return names;
}

}  // namespace

std::vector<std::string> reference_model_names() { return {"TinyMLP-9", "MiniCNN-32"}; }

ModelGraph build_reference_model(std::string_view name, std::uint64_t seed) {
  SplitMix64 rng(mix_seed(seed, fnv1a64(name)));
  if (name == "TinyMLP-9") {
    std::vector<Layer> layers;
    layers.emplace_back(FlattenLayer{});
    layers.emplace_back(random_dense(9, 8, rng));
    layers.emplace_back(ReluLayer{});
    layers.emplace_back(random_dense(8, 4, rng));
    return ModelGraph({1, 3, 3}, std::move(layers), numbered_classes(4));
  }
  if (name == "MiniCNN-32") {
    std::vector<Layer> layers;
    layers.emplace_back(random_conv(3, 8, 3, 1, rng));
    layers.emplace_back(ReluLayer{});
    layers.emplace_back(MaxPool2dLayer{2});
    layers.emplace_back(random_conv(8, 16, 3, 1, rng));
    layers.emplace_back(ReluLayer{});
    layers.emplace_back(GlobalAvgPoolLayer{});
    layers.emplace_back(random_dense(16, 10, rng));
    return ModelGraph({3, 32, 32}, std::move(layers),
                      {"airplane", "automobile", "bird", "cat", "deer", "dog", "frog",
                       "horse", "ship", "truck"});
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown reference model '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Images

ImageSet parse_cifar_batch(std::span<const std::uint8_t> bytes, std::string source_id) {
  if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0) {
    throw Error(ErrorCode::kFormat, "CIFAR batch length " + std::to_string(bytes.size()) +
                                        " is not a positive multiple of 3073");
  }
  ImageSet set;
  set.image_shape = {3, 32, 32};
  set.source_id = std::move(source_id);
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  set.images.reserve(n);
  set.labels.reserve(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto record = bytes.subspan(r * kCifarRecordBytes, kCifarRecordBytes);
    if (record[0] > 9) {
      throw Error(ErrorCode::kFormat, "CIFAR record " + std::to_string(r) + " has label " +
                                          std::to_string(record[0]) + " > 9");
    }
    set.labels.push_back(record[0]);
    std::vector<double> pixels(3072);
    for (std::size_t i = 0; i < 3072; ++i) pixels[i] = record[1 + i] / 255.0;
    set.images.emplace_back(set.image_shape, std::move(pixels));
  }
  return set;
}

ImageSet load_cifar_batch(const std::filesystem::path& path) {
  return parse_cifar_batch(read_file(path), path.filename().string());
}

namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

std::vector<std::uint8_t> encode_cifar_batch(const ImageSet& set) {
  if (set.image_shape != Shape{3, 32, 32} || set.labels.size() != set.images.size()) {
    throw Error(ErrorCode::kInvalidArgument, "CIFAR encoding needs labeled 3x32x32 images");
  }
  std::vector<std::uint8_t> out;
  out.reserve(set.size() * kCifarRecordBytes);
  for (std::size_t r = 0; r < set.size(); ++r) {
    out.push_back(static_cast<std::uint8_t>(set.labels[r]));
    for (double v : set.images[r].data()) out.push_back(to_byte(v));
  }
  return out;
}

namespace {

// Reads one whitespace-delimited header token, skipping '#' comments.
std::string ppm_token(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  auto is_space = [](std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; };
  for (;;) {
    while (pos < bytes.size() && is_space(bytes[pos])) ++pos;
    if (pos < bytes.size() && bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  std::string token;
  while (pos < bytes.size() && !is_space(bytes[pos]) && bytes[pos] != '#') {
    token.push_back(static_cast<char>(bytes[pos++]));
  }
  if (token.empty()) throw Error(ErrorCode::kTruncated, "PPM header truncated");
  return token;
}

std::size_t ppm_number(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  const std::string token = ppm_token(bytes, pos);
  std::size_t value = 0;
  auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
  if (ec != std::errc() || ptr != token.data() + token.size() || value == 0) {
    throw Error(ErrorCode::kFormat, "PPM header field '" + token + "' is not a positive integer");
  }
  return value;
}

}  // namespace

Tensor parse_ppm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
    throw Error(ErrorCode::kFormat, "unsupported image format: only binary PPM (P6) is accepted");
  }
  pos = 2;
  const std::size_t width = ppm_number(bytes, pos);
  const std::size_t height = ppm_number(bytes, pos);
  const std::size_t maxval = ppm_number(bytes, pos);
  if (maxval != 255) {
    throw Error(ErrorCode::kFormat, "PPM maxval " + std::to_string(maxval) + " unsupported (need 255)");
  }
  ++pos;  // single whitespace byte before the raster
  const std::size_t need = width * height * 3;
  if (pos > bytes.size() || bytes.size() - pos < need) {
    throw Error(ErrorCode::kTruncated, "PPM payload truncated: need " + std::to_string(need) +
                                           " bytes");
  }
  Tensor image({3, height, width});
  for (std::size_t h = 0; h < height; ++h)
    for (std::size_t w = 0; w < width; ++w)
      for (std::size_t c = 0; c < 3; ++c)
        image.at(c, h, w) = bytes[pos + (h * width + w) * 3 + c] / 255.0;
  return image;
}

Tensor load_ppm(const std::filesystem::path& path) { return parse_ppm(read_file(path)); }

std::vector<std::uint8_t> encode_ppm(const Tensor& image) {
  if (image.rank() != 3 || image.shape()[0] != 3) {
    throw Error(ErrorCode::kInvalidArgument, "PPM encoding needs a 3xHxW tensor");
  }
  const std::size_t h = image.shape()[1];
  const std::size_t w = image.shape()[2];
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch) out.push_back(to_byte(image.at(ch, r, c)));
  return out;
}

// ---------------------------------------------------------------------------
// Baseline

Tensor Baseline::image(const Shape& shape) const {
  if (mean_image) {
    if (mean_image->shape() != shape) {
      throw Error(ErrorCode::kShapeMismatch, "baseline mean image shape " +
                                                 shape_to_string(mean_image->shape()) +
                                                 " does not match " + shape_to_string(shape));
    }
    return *mean_image;
  }
  if (shape.size() != 3 || shape[0] != per_channel_mean.size()) {
    throw Error(ErrorCode::kShapeMismatch,
                "baseline has " + std::to_string(per_channel_mean.size()) +
                    " channels, image shape is " + shape_to_string(shape));
  }
  Tensor out(shape);
  const std::size_t plane = shape[1] * shape[2];
  for (std::size_t c = 0; c < shape[0]; ++c)
    std::fill_n(out.data().begin() + static_cast<std::ptrdiff_t>(c * plane), plane,
                per_channel_mean[c]);
  return out;
}

Baseline constant_baseline(std::vector<double> per_channel) {
  return Baseline{std::move(per_channel), std::nullopt};
}

Baseline compute_baseline(const ImageSet& set, BaselineMode mode) {
  if (set.images.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "cannot compute a baseline from an empty image set");
  }
  const Shape& shape = set.images.front().shape();
  if (shape.size() != 3) throw Error(ErrorCode::kShapeMismatch, "images must be rank 3");
  const std::size_t channels = shape[0];
  const std::size_t plane = shape[1] * shape[2];
  for (const Tensor& img : set.images) {
    if (img.shape() != shape) {
      throw Error(ErrorCode::kShapeMismatch, "image set mixes shapes " + shape_to_string(shape) +
                                                 " and " + shape_to_string(img.shape()));
    }
  }
  // Values are sorted before the fixed-shape pairwise sum, so the result does
  // not depend on the order of the image list.
  auto order_free_sum = [](std::vector<double>& values) {
    std::sort(values.begin(), values.end());
    return pairwise_sum(values);
  };
  const double n = static_cast<double>(set.images.size());
  Baseline b;
  b.per_channel_mean.resize(channels);
  std::vector<double> values;
  for (std::size_t c = 0; c < channels; ++c) {
    values.clear();
    values.reserve(set.images.size() * plane);
    for (const Tensor& img : set.images) {
      const auto data = img.data().subspan(c * plane, plane);
      values.insert(values.end(), data.begin(), data.end());
    }
    b.per_channel_mean[c] = order_free_sum(values) / (n * static_cast<double>(plane));
  }
  if (mode == BaselineMode::kPerPixel) {
    Tensor mean(shape);
    for (std::size_t i = 0; i < mean.size(); ++i) {
      values.clear();
      for (const Tensor& img : set.images) values.push_back(img[i]);
      mean[i] = order_free_sum(values) / n;
    }
    b.mean_image = std::move(mean);
  }
  return b;
}

}  // namespace attrib
