#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace stapo {

using TokenId = std::int32_t;
using json = nlohmann::json;

// Symbol table over a small synthetic vocabulary. Token ids are indices
// into `tokens`.
struct Vocabulary {
  std::vector<std::string> tokens;
  TokenId answer_marker = 0;
  TokenId end_of_sequence = 0;

  std::size_t size() const { return tokens.size(); }
  bool contains(TokenId id) const {
    return id >= 0 && static_cast<std::size_t>(id) < tokens.size();
  }
  // Throws std::out_of_range for unknown labels.
  TokenId id_of(std::string_view label) const;
  std::string render(std::span<const TokenId> ids) const;
  std::vector<std::string> violations() const;
};

struct Prompt {
  std::string id;
  std::vector<TokenId> tokens;
  std::vector<TokenId> ground_truth;

  bool operator==(const Prompt&) const = default;
};

enum class ClipState : std::uint8_t { Unclipped, ClippedHigh, ClippedLow };

std::string_view to_string(ClipState s);
ClipState clip_state_from_string(std::string_view s);

// Per-token record. Probabilities are never exactly zero because the policy
// floors its distributions; entropy is in nats over the full next-token
// distribution under the current policy.
struct TokenStep {
  TokenId token_id = 0;
  double old_prob = 1.0;
  double cur_prob = 1.0;
  double entropy = 0.0;
  double ratio = 1.0;
  std::uint8_t mask = 1;
  ClipState clip_state = ClipState::Unclipped;

  bool operator==(const TokenStep&) const = default;
};

struct Trajectory {
  std::string prompt_id;
  std::vector<TokenId> tokens;
  std::vector<TokenStep> steps;
  double reward = -1.0;
  double advantage = 0.0;

  bool operator==(const Trajectory&) const = default;
};

struct Group {
  Prompt prompt;
  std::vector<Trajectory> trajectories;
  double reward_mean = 0.0;
  double reward_std = 0.0;

  bool operator==(const Group&) const = default;
};

inline constexpr double kDefaultSigmaMin = 1e-6;

bool is_binary_reward(double r);

struct RewardMoments {
  double mean = 0.0;
  double std = 0.0;  // population
};

RewardMoments reward_moments(std::span<const double> rewards);

// Reports every broken Group/Trajectory/TokenStep invariant. Never throws.
// `vocab_size`, when given, enables the entropy <= ln|V| check.
std::vector<std::string> validate_group(
    const Group& g, std::size_t expected_group_size,
    double sigma_min = kDefaultSigmaMin,
    std::optional<std::size_t> vocab_size = std::nullopt);

void to_json(json& j, const Prompt& p);
void from_json(const json& j, Prompt& p);
void to_json(json& j, const TokenStep& s);
void from_json(const json& j, TokenStep& s);
void to_json(json& j, const Trajectory& t);
void from_json(const json& j, Trajectory& t);
void to_json(json& j, const Group& g);
void from_json(const json& j, Group& g);

}  // namespace stapo
