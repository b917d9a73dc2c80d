#include "attrib/tensor.hpp"

#include <cmath>
#include <sstream>
#include <utility>

#include "attrib/error.hpp"

namespace attrib {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShapeMismatch: return "shape_mismatch";
    case ErrorCode::kNonFinite: return "non_finite";
    case ErrorCode::kOutOfRange: return "out_of_range";
    case ErrorCode::kUnsupportedLayer: return "unsupported_layer";
    case ErrorCode::kUnsupportedModel: return "unsupported_model";
    case ErrorCode::kFormat: return "format";
    case ErrorCode::kTruncated: return "truncated";
    case ErrorCode::kVersion: return "version";
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kDomainMismatch: return "domain_mismatch";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kConfig: return "config";
  }
  return "unknown";
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ')';
  return out.str();
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty()) {
    throw Error(ErrorCode::kShapeMismatch, "tensor shape must have rank >= 1");
  }
  for (std::size_t d : shape) {
    if (d == 0) {
      throw Error(ErrorCode::kShapeMismatch,
                  "tensor shape has a zero extent: " + shape_to_string(shape));
    }
  }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  validate_shape(shape_);
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  validate_shape(shape_);
  if (shape_size(shape_) != data_.size()) {
    throw Error(ErrorCode::kShapeMismatch,
                "tensor data length " + std::to_string(data_.size()) +
                    " does not match shape " + shape_to_string(shape_));
  }
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values) {
  return Tensor(std::move(shape), std::vector<double>(values));
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::require_finite(std::string_view where) const {
  if (!all_finite()) {
    throw Error(ErrorCode::kNonFinite,
                std::string(where) + ": tensor contains NaN or Inf");
  }
}

}  // namespace attrib
