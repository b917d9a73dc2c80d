#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "attrib/model.hpp"
#include "attrib/model_io.hpp"
#include "attrib/shapley.hpp"
#include "attrib/tensor.hpp"

namespace attrib::testing {

// Uniform entries in [lo, hi).
Tensor random_tensor(const Shape& shape, std::uint64_t seed, double lo = 0.0, double hi = 1.0);

// Deterministic CIFAR-format stand-in: smooth per-class color fields with
// texture, quantized to bytes so it survives an encode/parse round trip.
ImageSet synthetic_cifar(std::size_t count, std::uint64_t seed);

// Writes synthetic_cifar(count, seed) to `path` in the CIFAR-10 binary layout.
void write_synthetic_cifar(const std::filesystem::path& path, std::size_t count,
                           std::uint64_t seed);

// Path of a real CIFAR-10 batch named by ATTRIB_CIFAR_BATCH, if it exists.
std::optional<std::filesystem::path> real_cifar_batch();

// flatten -> dense(weights) on a (channels, rows, cols) input.
ModelGraph linear_model(const Shape& input_shape, std::vector<std::vector<double>> weights,
                        std::vector<double> bias);

// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

// Shapley values by averaging marginal contributions over every permutation
// (n <= 10), with v tabulated once per coalition. Independent of the subset
// formula used by exact_shapley.
std::vector<double> permutation_oracle(const ValueFunction& v);

std::string read_text(const std::filesystem::path& path);

// Plain nested-loop forward pass written from the layer definitions, without
// any of the library's kernels: the output of the first `layers` layers.
std::vector<double> straight_line_forward(const ModelGraph& model, const Tensor& input,
                                          std::size_t layers);
std::vector<double> straight_line_logits(const ModelGraph& model, const Tensor& input);

}  // namespace attrib::testing
