#include "attrib/shapley.hpp"

#include <algorithm>
#include <bit>
#include <numeric>

#include "attrib/error.hpp"
#include "attrib/parallel.hpp"
#include "attrib/rng.hpp"

namespace attrib {

namespace {

class GenericWalker final : public CoalitionWalker {
 public:
  explicit GenericWalker(const ValueFunction& v) : v_(&v), present_(v.players(), 0) {}

  double start() override {
    std::fill(present_.begin(), present_.end(), 0);
    return v_->value(present_);
  }
  double add(std::size_t player) override {
    present_[player] = 1;
    return v_->value(present_);
  }

 private:
  const ValueFunction* v_;
  std::vector<unsigned char> present_;
};

class ModelWalker final : public CoalitionWalker {
 public:
  ModelWalker(const ModelValueFunction& v, std::shared_ptr<const IncrementalForward> empty)
      : v_(&v), empty_(std::move(empty)), state_(*empty_) {}

  double start() override {
    state_ = *empty_;
    return state_.logit(v_->target());
  }
  double add(std::size_t player) override {
    const std::size_t w = v_->model().width();
    state_.copy_pixel(v_->image(), player / w, player % w);
    return state_.logit(v_->target());
  }

 private:
  const ModelValueFunction* v_;
  std::shared_ptr<const IncrementalForward> empty_;
  IncrementalForward state_;
};

// Sample mean and (unbiased variance / count) of one row of marginals.
std::pair<double, double> mean_and_error_variance(std::span<const double> samples) {
  const double n = static_cast<double>(samples.size());
  const double mean = pairwise_sum(samples) / n;
  if (samples.size() < 2) return {mean, 0.0};
  std::vector<double> sq(samples.size());
  for (std::size_t t = 0; t < samples.size(); ++t) {
    const double d = samples[t] - mean;
    sq[t] = d * d;
  }
  return {mean, pairwise_sum(sq) / (n - 1.0) / n};
}

std::vector<std::size_t> nth_permutation(std::size_t n, std::uint64_t index) {
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  std::vector<std::uint64_t> factorial(n + 1, 1);
  for (std::size_t k = 1; k <= n; ++k) factorial[k] = factorial[k - 1] * k;
  std::vector<std::size_t> perm;
  perm.reserve(n);
  for (std::size_t k = n; k > 0; --k) {
    const std::uint64_t digit = index / factorial[k - 1];
    index %= factorial[k - 1];
    perm.push_back(pool[digit]);
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(digit));
  }
  return perm;
}

constexpr std::size_t kPermutationsPerTask = 16;

}  // namespace

std::unique_ptr<CoalitionWalker> ValueFunction::walker() const {
  return std::make_unique<GenericWalker>(*this);
}

ModelValueFunction::ModelValueFunction(const ModelGraph& model, Tensor image,
                                       const Baseline& baseline, std::size_t target)
    : model_(&model),
      image_(std::move(image)),
      baseline_image_(baseline.image(model.input_shape())),
      target_(target) {
  if (image_.shape() != model.input_shape()) {
    throw Error(ErrorCode::kShapeMismatch, "image shape " + shape_to_string(image_.shape()) +
                                               " does not match model input " +
                                               shape_to_string(model.input_shape()));
  }
  image_.require_finite("shapley image");
  baseline_image_.require_finite("shapley baseline");
  if (target_ >= model.num_classes()) {
    throw Error(ErrorCode::kOutOfRange, "target class " + std::to_string(target_) + " out of range");
  }
  empty_state_ = std::make_shared<const IncrementalForward>(model, baseline_image_);
}

Tensor ModelValueFunction::compose(std::span<const unsigned char> present) const {
  if (present.size() != players()) {
    throw Error(ErrorCode::kShapeMismatch, "coalition mask has wrong length");
  }
  Tensor out = baseline_image_;
  const std::size_t plane = model_->pixel_count();
  for (std::size_t p = 0; p < plane; ++p) {
    if (!present[p]) continue;
    for (std::size_t c = 0; c < model_->channels(); ++c) out[c * plane + p] = image_[c * plane + p];
  }
  return out;
}

double ModelValueFunction::value(std::span<const unsigned char> present) const {
  return predict(*model_, compose(present))[target_];
}

std::unique_ptr<CoalitionWalker> ModelValueFunction::walker() const {
  return std::make_unique<ModelWalker>(*this, empty_state_);
}

ShapleyEstimate exact_shapley(const ValueFunction& v, std::size_t workers) {
  const std::size_t n = v.players();
  if (n == 0 || n > kMaxExactPlayers) {
    throw Error(ErrorCode::kInvalidArgument,
                "exact Shapley enumeration supports 1.." + std::to_string(kMaxExactPlayers) +
                    " players, got " + std::to_string(n));
  }
  const std::size_t subsets = std::size_t{1} << n;
  std::vector<double> table(subsets);
  const std::size_t chunk = 256;
  parallel_for((subsets + chunk - 1) / chunk, workers, [&](std::size_t task) {
    std::vector<unsigned char> present(n);
    const std::size_t end = std::min(subsets, (task + 1) * chunk);
    for (std::size_t mask = task * chunk; mask < end; ++mask) {
      for (std::size_t i = 0; i < n; ++i) present[i] = (mask >> i) & 1U;
      table[mask] = v.value(present);
    }
  });

  // weight[k] = k!(n-k-1)!/n! = 1 / (n * C(n-1, k))
  std::vector<double> weight(n);
  {
    double binom = 1.0;
    for (std::size_t k = 0; k < n; ++k) {
      weight[k] = 1.0 / (static_cast<double>(n) * binom);
      binom = binom * static_cast<double>(n - 1 - k) / static_cast<double>(k + 1);
    }
  }

  ShapleyEstimate est;
  est.values.assign(n, 0.0);
  est.per_player_variance.assign(n, 0.0);
  est.players.resize(n);
  std::iota(est.players.begin(), est.players.end(), std::size_t{0});
  est.samples = 0;
  est.evaluations = subsets;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t bit = std::size_t{1} << i;
    double acc = 0.0;
    for (std::size_t mask = 0; mask < subsets; ++mask) {
      if (mask & bit) continue;
      acc += weight[static_cast<std::size_t>(std::popcount(mask))] *
             (table[mask | bit] - table[mask]);
    }
    est.values[i] = acc;
  }
  return est;
}

ShapleyEstimate sampled_shapley(const ValueFunction& v, const SamplingOptions& options) {
  const std::size_t n = v.players();
  const std::size_t m = options.permutations;
  if (n == 0) throw Error(ErrorCode::kInvalidArgument, "value function has no players");
  if (m < 2) {
    throw Error(ErrorCode::kInvalidArgument, "permutation sampling needs at least 2 permutations");
  }
  if (options.source == PermutationSource::kExhaustive) {
    std::uint64_t total = 1;
    for (std::size_t k = 2; k <= n; ++k) {
      if (total > UINT64_MAX / k) {
        throw Error(ErrorCode::kInvalidArgument, "too many players for exhaustive permutations");
      }
      total *= k;
    }
    if (total != m) {
      throw Error(ErrorCode::kInvalidArgument,
                  "exhaustive permutation source needs exactly " + std::to_string(total) +
                      " permutations");
    }
  }

  // marginals[player * m + t]
  std::vector<double> marginals(n * m);
  const std::size_t tasks = (m + kPermutationsPerTask - 1) / kPermutationsPerTask;
  parallel_for(tasks, options.workers, [&](std::size_t task) {
    auto walker = v.walker();
    const std::size_t end = std::min(m, (task + 1) * kPermutationsPerTask);
    for (std::size_t t = task * kPermutationsPerTask; t < end; ++t) {
      const std::vector<std::size_t> perm =
          options.source == PermutationSource::kExhaustive
              ? nth_permutation(n, t)
              : random_permutation(n, mix_seed(options.seed, t));
      double previous = walker->start();
      for (std::size_t player : perm) {
        const double current = walker->add(player);
        marginals[player * m + t] = current - previous;
        previous = current;
      }
    }
  });

  ShapleyEstimate est;
  est.samples = m;
  est.values.resize(n);
  est.per_player_variance.resize(n);
  est.players.resize(n);
  std::iota(est.players.begin(), est.players.end(), std::size_t{0});
  est.evaluations = m * (n + 1);
  for (std::size_t i = 0; i < n; ++i) {
    auto [mean, var] =
        mean_and_error_variance(std::span<const double>(marginals.data() + i * m, m));
    est.values[i] = mean;
    est.per_player_variance[i] = var;
  }
  return est;
}

SetAverage set_average_shapley(const ValueFunction& v, std::span<const std::size_t> set,
                               std::size_t permutations, std::uint64_t seed, SetSampling mode,
                               std::size_t workers) {
  const std::size_t n = v.players();
  if (set.empty()) throw Error(ErrorCode::kInvalidArgument, "pixel set is empty");
  for (std::size_t p : set) {
    if (p >= n) throw Error(ErrorCode::kOutOfRange, "pixel id " + std::to_string(p) + " out of range");
  }
  if (permutations < 2) {
    throw Error(ErrorCode::kInvalidArgument, "set average needs at least 2 permutations");
  }
  const std::size_t m = permutations;
  const double s = static_cast<double>(set.size());
  std::vector<double> means(set.size());
  std::vector<double> variances(set.size());

  if (mode == SetSampling::kSharedPermutations) {
    const ShapleyEstimate est = sampled_shapley(v, {m, seed, workers, PermutationSource::kRandom});
    for (std::size_t k = 0; k < set.size(); ++k) {
      means[k] = est.values[set[k]];
      variances[k] = est.per_player_variance[set[k]];
    }
  } else {
    std::vector<double> marginals(set.size() * m);
    parallel_for(set.size(), workers, [&](std::size_t k) {
      const std::size_t player = set[k];
      const std::uint64_t player_seed = mix_seed(seed ^ 0x5e7a5e7a5e7a5e7aULL, player);
      std::vector<unsigned char> present(n);
      for (std::size_t t = 0; t < m; ++t) {
        const auto perm = random_permutation(n, mix_seed(player_seed, t));
        std::fill(present.begin(), present.end(), 0);
        for (std::size_t q : perm) {
          if (q == player) break;
          present[q] = 1;
        }
        const double without = v.value(present);
        present[player] = 1;
        marginals[k * m + t] = v.value(present) - without;
      }
    });
    for (std::size_t k = 0; k < set.size(); ++k) {
      auto [mean, var] =
          mean_and_error_variance(std::span<const double>(marginals.data() + k * m, m));
      means[k] = mean;
      variances[k] = var;
    }
  }
  return SetAverage{pairwise_sum(means) / s, pairwise_sum(variances) / s / s};
}

}  // namespace attrib
