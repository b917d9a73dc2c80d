#include "fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <unistd.h>

#include "attrib/error.hpp"
#include "attrib/rng.hpp"

namespace attrib::testing {

Tensor random_tensor(const Shape& shape, std::uint64_t seed, double lo, double hi) {
  SplitMix64 rng(seed);
  Tensor t(shape);
  for (double& v : t.data()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

ImageSet synthetic_cifar(std::size_t count, std::uint64_t seed) {
  ImageSet set;
  set.image_shape = {3, 32, 32};
  set.source_id = "synthetic";
  for (std::size_t n = 0; n < count; ++n) {
    SplitMix64 rng(mix_seed(seed, n));
    const std::size_t label = static_cast<std::size_t>(rng.below(10));
    Tensor img(set.image_shape);
    const double fx = 0.1 + 0.3 * rng.uniform();
    const double fy = 0.1 + 0.3 * rng.uniform();
    const double phase = 6.28 * rng.uniform();
    // Object: a bright disc of random radius and position.
    const double cx = 8.0 + 16.0 * rng.uniform();
    const double cy = 8.0 + 16.0 * rng.uniform();
    const double radius = 4.0 + 6.0 * rng.uniform();
    for (std::size_t c = 0; c < 3; ++c) {
      const double tint = 0.25 + 0.05 * static_cast<double>((label + c * 3) % 10);
      for (std::size_t h = 0; h < 32; ++h)
        for (std::size_t w = 0; w < 32; ++w) {
          const double hh = static_cast<double>(h);
          const double ww = static_cast<double>(w);
          double v = tint + 0.15 * std::sin(fx * ww + fy * hh + phase + static_cast<double>(c));
          if ((hh - cy) * (hh - cy) + (ww - cx) * (ww - cx) < radius * radius) {
            v += 0.3 * (c == label % 3 ? 1.0 : -0.5);
          }
          v += 0.08 * rng.symmetric();
          v = std::clamp(v, 0.0, 1.0);
          img.at(c, h, w) = std::round(v * 255.0) / 255.0;
        }
    }
    set.images.push_back(std::move(img));
    set.labels.push_back(label);
  }
  return set;
}

void write_synthetic_cifar(const std::filesystem::path& path, std::size_t count,
                           std::uint64_t seed) {
  write_file(path, encode_cifar_batch(synthetic_cifar(count, seed)));
}

std::optional<std::filesystem::path> real_cifar_batch() {
  const char* env = std::getenv("ATTRIB_CIFAR_BATCH");
  if (env == nullptr || *env == '\0') return std::nullopt;
  std::filesystem::path p(env);
  if (!std::filesystem::exists(p)) return std::nullopt;
  return p;
}

ModelGraph linear_model(const Shape& input_shape, std::vector<std::vector<double>> weights,
                        std::vector<double> bias) {
  DenseLayer d;
  d.in = shape_size(input_shape);
  d.out = weights.size();
  std::vector<double> flat;
  for (const auto& row : weights) flat.insert(flat.end(), row.begin(), row.end());
  d.weight = Tensor({d.out, d.in}, flat);
  d.bias = Tensor({d.out}, std::move(bias));
  std::vector<std::string> names;
  for (std::size_t k = 0; k < d.out; ++k) names.push_back("c" + std::to_string(k));
  return ModelGraph(input_shape, {FlattenLayer{}, d}, names);
}

TempDir::TempDir(const std::string& tag) {
  static std::uint64_t counter = 0;
  const auto base = std::filesystem::temp_directory_path();
  for (;;) {
    path_ = base / ("attrib-" + tag + "-" + std::to_string(::getpid()) + "-" +
                    std::to_string(counter++));
    if (std::filesystem::create_directories(path_)) break;
  }
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

std::vector<double> permutation_oracle(const ValueFunction& v) {
  const std::size_t n = v.players();
  if (n > 10) throw Error(ErrorCode::kInvalidArgument, "oracle limited to 10 players");
  std::vector<double> table(std::size_t{1} << n);
  std::vector<unsigned char> present(n);
  for (std::size_t mask = 0; mask < table.size(); ++mask) {
    for (std::size_t i = 0; i < n; ++i) present[i] = (mask >> i) & 1U;
    table[mask] = v.value(present);
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::vector<long double> sums(n, 0.0L);
  std::size_t count = 0;
  do {
    std::size_t mask = 0;
    for (std::size_t p : perm) {
      const std::size_t next = mask | (std::size_t{1} << p);
      sums[p] += static_cast<long double>(table[next]) - static_cast<long double>(table[mask]);
      mask = next;
    }
    ++count;
  } while (std::next_permutation(perm.begin(), perm.end()));
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = static_cast<double>(sums[i] / static_cast<long double>(count));
  }
  return out;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<double> straight_line_forward(const ModelGraph& model, const Tensor& input,
                                          std::size_t layers) {
  std::vector<double> x(input.data().begin(), input.data().end());
  Shape shape = model.input_shape();
  for (std::size_t li = 0; li < std::min(layers, model.num_layers()); ++li) {
    const Layer& layer = model.layers()[li];
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      std::vector<double> y(d->out);
      for (std::size_t o = 0; o < d->out; ++o) {
        double acc = d->bias[o];
        for (std::size_t i = 0; i < d->in; ++i) acc += d->weight[o * d->in + i] * x[i];
        y[o] = acc;
      }
      x = y;
      shape = {d->out};
    } else if (const auto* c = std::get_if<Conv2dLayer>(&layer)) {
      const long H = static_cast<long>(shape[1]), W = static_cast<long>(shape[2]);
      const long K = static_cast<long>(c->kernel), P = static_cast<long>(c->padding);
      const long OH = H + 2 * P - K + 1, OW = W + 2 * P - K + 1;
      std::vector<double> y(c->out_channels * static_cast<std::size_t>(OH * OW));
      for (std::size_t o = 0; o < c->out_channels; ++o)
        for (long oh = 0; oh < OH; ++oh)
          for (long ow = 0; ow < OW; ++ow) {
            double acc = c->bias[o];
            for (std::size_t ci = 0; ci < c->in_channels; ++ci)
              for (long kh = 0; kh < K; ++kh)
                for (long kw = 0; kw < K; ++kw) {
                  const long ih = oh + kh - P, iw = ow + kw - P;
                  if (ih < 0 || iw < 0 || ih >= H || iw >= W) continue;
                  const double w =
                      c->weight[((o * c->in_channels + ci) * c->kernel + static_cast<std::size_t>(kh)) *
                                    c->kernel +
                                static_cast<std::size_t>(kw)];
                  acc += w * x[(ci * static_cast<std::size_t>(H) + static_cast<std::size_t>(ih)) *
                                   static_cast<std::size_t>(W) +
                               static_cast<std::size_t>(iw)];
                }
            y[(o * static_cast<std::size_t>(OH) + static_cast<std::size_t>(oh)) *
                  static_cast<std::size_t>(OW) +
              static_cast<std::size_t>(ow)] = acc;
          }
      x = y;
      shape = {c->out_channels, static_cast<std::size_t>(OH), static_cast<std::size_t>(OW)};
    } else if (std::holds_alternative<ReluLayer>(layer)) {
      for (double& v : x) v = std::max(v, 0.0);
    } else if (const auto* p = std::get_if<MaxPool2dLayer>(&layer)) {
      const std::size_t C = shape[0], OH = shape[1] / p->size, OW = shape[2] / p->size;
      std::vector<double> y(C * OH * OW, -std::numeric_limits<double>::infinity());
      for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t h = 0; h < OH * p->size; ++h)
          for (std::size_t w = 0; w < OW * p->size; ++w) {
            double& out = y[(ch * OH + h / p->size) * OW + w / p->size];
            out = std::max(out, x[(ch * shape[1] + h) * shape[2] + w]);
          }
      x = y;
      shape = {C, OH, OW};
    } else if (std::holds_alternative<GlobalAvgPoolLayer>(layer)) {
      const std::size_t C = shape[0], plane = shape[1] * shape[2];
      std::vector<double> y(C, 0.0);
      for (std::size_t ch = 0; ch < C; ++ch) {
        for (std::size_t k = 0; k < plane; ++k) y[ch] += x[ch * plane + k];
        y[ch] /= static_cast<double>(plane);
      }
      x = y;
      shape = {C};
    } else {
      shape = {x.size()};
    }
  }
  return x;
}

std::vector<double> straight_line_logits(const ModelGraph& model, const Tensor& input) {
  return straight_line_forward(model, input, model.num_layers());
}

}  // namespace attrib::testing
