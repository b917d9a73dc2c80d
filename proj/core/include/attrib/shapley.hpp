#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "attrib/model.hpp"
#include "attrib/model_io.hpp"
#include "attrib/tensor.hpp"

namespace attrib {

// Grows a coalition one player at a time, returning the value after each step.
class CoalitionWalker {
 public:
  virtual ~CoalitionWalker() = default;
  // Resets to the empty coalition and returns v(empty).
  virtual double start() = 0;
  // Adds `player` (not yet present) and returns the value of the new coalition.
  virtual double add(std::size_t player) = 0;
};

// v(P) for coalitions P of players [0, players()). Implementations must be
// deterministic and safe to call concurrently.
class ValueFunction {
 public:
  virtual ~ValueFunction() = default;
  virtual std::size_t players() const = 0;
  // present[i] != 0 iff player i is in the coalition.
  virtual double value(std::span<const unsigned char> present) const = 0;
  // The default walker re-evaluates value() at every step.
  virtual std::unique_ptr<CoalitionWalker> walker() const;
};

// Wraps an arbitrary callable; used for constructed games.
class FunctionValue final : public ValueFunction {
 public:
  using Fn = std::function<double(std::span<const unsigned char>)>;
  FunctionValue(std::size_t players, Fn fn) : players_(players), fn_(std::move(fn)) {}

  std::size_t players() const override { return players_; }
  double value(std::span<const unsigned char> present) const override { return fn_(present); }

 private:
  std::size_t players_;
  Fn fn_;
};

// v(P) = logit[target] of the image whose pixels outside P are replaced by the
// baseline. A player is one pixel location with all channels toggled together;
// player id = row * width + col.
class ModelValueFunction final : public ValueFunction {
 public:
  ModelValueFunction(const ModelGraph& model, Tensor image, const Baseline& baseline,
                     std::size_t target);

  std::size_t players() const override { return model_->pixel_count(); }
  double value(std::span<const unsigned char> present) const override;
  std::unique_ptr<CoalitionWalker> walker() const override;

  // The masked image for coalition `present`.
  Tensor compose(std::span<const unsigned char> present) const;

  const ModelGraph& model() const noexcept { return *model_; }
  const Tensor& image() const noexcept { return image_; }
  const Tensor& baseline_image() const noexcept { return baseline_image_; }
  std::size_t target() const noexcept { return target_; }

 private:
  const ModelGraph* model_;
  Tensor image_;
  Tensor baseline_image_;
  std::size_t target_;
  // Forward state at the empty coalition; walkers copy it instead of
  // re-running the baseline forward pass.
  std::shared_ptr<const IncrementalForward> empty_state_;
};

struct ShapleyEstimate {
  std::vector<double> values;
  // Permutations per player; 0 for exact values.
  std::size_t samples = 0;
  // Unbiased sample variance of the marginal contributions divided by
  // `samples`, i.e. the estimated variance of each entry of `values`.
  std::vector<double> per_player_variance;
  std::vector<std::size_t> players;
  std::size_t evaluations = 0;
};

inline constexpr std::size_t kMaxExactPlayers = 20;

// Subset enumeration with the classical weight |P|!(n-|P|-1)!/n!.
ShapleyEstimate exact_shapley(const ValueFunction& v, std::size_t workers = 1);

enum class PermutationSource {
  // Permutation t is a uniform shuffle seeded with mix_seed(seed, t).
  kRandom,
  // Permutation t is the t-th permutation in lexicographic order; requires
  // permutations == players! and is therefore exact.
  kExhaustive,
};

struct SamplingOptions {
  std::size_t permutations = 1000;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  PermutationSource source = PermutationSource::kRandom;
};

// Permutation sampling: every permutation contributes one marginal
// contribution per player, evaluated along the growing prefix (players + 1
// evaluations per permutation). Results do not depend on `workers`.
ShapleyEstimate sampled_shapley(const ValueFunction& v, const SamplingOptions& options);

enum class SetSampling {
  // Each player in the set is estimated from its own m permutations (seeded
  // per player id), so the per-player estimates are independent and the
  // variance of their mean shrinks as 1/|S|.
  kIndependentPlayers,
  // One shared stream of m permutations for all players, identical to
  // sampled_shapley restricted to the set.
  kSharedPermutations,
};

struct SetAverage {
  double mean = 0.0;
  // mean(per-player variance over the set) / |S|.
  double variance = 0.0;
};

SetAverage set_average_shapley(const ValueFunction& v, std::span<const std::size_t> set,
                               std::size_t permutations, std::uint64_t seed,
                               SetSampling mode = SetSampling::kIndependentPlayers,
                               std::size_t workers = 1);

}  // namespace attrib
