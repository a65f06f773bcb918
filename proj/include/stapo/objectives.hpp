#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stapo/core.hpp"
#include "stapo/policy.hpp"

namespace stapo {

enum class Objective : std::uint8_t { GRPO, DAPO, STAPO };

std::string_view to_string(Objective o);
Objective objective_from_string(std::string_view s);  // case-insensitive

struct ClipConfig {
  double eps_low = 0.2;
  double eps_high = 0.28;

  void validate() const;
  // GRPO uses a single symmetric epsilon (eps_low).
  ClipConfig effective_for(Objective o) const;
};

// Population-std group normalization. Groups whose reward std does not
// exceed sigma_min get all-zero advantages. Throws for fewer than 2 rewards.
std::vector<double> group_advantages(std::span<const double> rewards,
                                     double sigma_min = kDefaultSigmaMin);

// Builds a Group from verified rollouts: rewards, moments, advantages.
Group assemble_group(const Prompt& prompt, std::vector<Rollout> rollouts,
                     std::span<const double> rewards, double sigma_min = kDefaultSigmaMin);

struct RatioClip {
  double ratio = 1.0;
  ClipState state = ClipState::Unclipped;
};

RatioClip token_ratio_and_clipstate(double old_prob, double cur_prob, double advantage,
                                    const ClipConfig& clip);

// One scored token, flattened out of a batch of groups.
struct TokenSample {
  std::string context;
  TokenId target = 0;
  double old_prob = 1.0;
  double advantage = 0.0;
  std::size_t sequence = 0;  // index into SampleBatch::sequence_lengths
};

struct SampleBatch {
  std::vector<TokenSample> tokens;
  std::vector<std::size_t> sequence_lengths;

  std::size_t num_sequences() const { return sequence_lengths.size(); }
};

// Flattens groups in order (group, trajectory, position). Contexts are
// rebuilt from the prompt id and generated prefix.
SampleBatch flatten_groups(std::span<const Group> groups, int context_order);

// Per-token weights of the objective's denominator: GRPO 1/(S * |y_i|),
// DAPO 1/sum|y_i|, STAPO 1/sum(mask) with masked tokens at 0. Returns
// nullopt when nothing survives (empty batch, or every token masked).
// Throws if a non-STAPO objective is given a mask with any zero.
std::optional<std::vector<double>> token_normalizers(Objective o, const SampleBatch& batch,
                                                     std::span<const std::uint8_t> masks);

// Clipped surrogate value under the current policy. nullopt is the
// "no update" signal.
std::optional<double> surrogate_value(Objective o, const PolicyTable& policy,
                                      const SampleBatch& batch,
                                      std::span<const std::uint8_t> masks,
                                      const ClipConfig& clip);

// Audit record for one token. `weight` is the unnormalized weight
// (ratio * advantage, or 0 when clipped out) and `vector` is
// weight * (one_hot(target) - pi_cur). The token's contribution to its
// context's gradient is normalizer * vector, or nothing when masked.
struct TokenGradient {
  std::string context;
  TokenId target = 0;
  double weight = 0.0;
  double ratio = 1.0;
  double cur_prob = 1.0;
  double normalizer = 0.0;
  ClipState clip_state = ClipState::Unclipped;
  bool masked = false;
  std::vector<double> vector;

  double norm() const;
};

struct SurrogateGradient {
  double value = 0.0;
  GradientMap per_context;
  std::vector<TokenGradient> audit;
};

std::optional<SurrogateGradient> surrogate_gradient(Objective o, const PolicyTable& policy,
                                                    const SampleBatch& batch,
                                                    std::span<const std::uint8_t> masks,
                                                    const ClipConfig& clip);

void to_json(json& j, const TokenGradient& g);

}  // namespace stapo
