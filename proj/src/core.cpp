#include "stapo/core.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace stapo {

TokenId Vocabulary::id_of(std::string_view label) const {
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == label) return static_cast<TokenId>(i);
  }
  throw std::out_of_range("unknown token label '" + std::string(label) + "'");
}

std::string Vocabulary::render(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    out += contains(id) ? tokens[static_cast<std::size_t>(id)] : "<?>";
  }
  return out;
}

std::vector<std::string> Vocabulary::violations() const {
  std::vector<std::string> out;
  if (size() < 2) out.emplace_back("vocabulary size < 2");
  if (!contains(answer_marker)) out.emplace_back("answer_marker out of range");
  if (!contains(end_of_sequence)) out.emplace_back("end_of_sequence out of range");
  if (answer_marker == end_of_sequence) {
    out.emplace_back("answer_marker == end_of_sequence");
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    for (std::size_t j = i + 1; j < tokens.size(); ++j) {
      if (tokens[i] == tokens[j]) out.push_back("duplicate token label '" + tokens[i] + "'");
    }
  }
  return out;
}

std::string_view to_string(ClipState s) {
  switch (s) {
    case ClipState::Unclipped: return "unclipped";
    case ClipState::ClippedHigh: return "clipped_high";
    case ClipState::ClippedLow: return "clipped_low";
  }
  return "unclipped";
}

ClipState clip_state_from_string(std::string_view s) {
  if (s == "unclipped") return ClipState::Unclipped;
  if (s == "clipped_high") return ClipState::ClippedHigh;
  if (s == "clipped_low") return ClipState::ClippedLow;
  throw std::invalid_argument("unknown clip_state '" + std::string(s) + "'");
}

bool is_binary_reward(double r) { return r == 1.0 || r == -1.0; }

RewardMoments reward_moments(std::span<const double> rewards) {
  RewardMoments m;
  if (rewards.empty()) return m;
  const auto n = static_cast<double>(rewards.size());
  m.mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double ss = 0.0;
  for (double r : rewards) ss += (r - m.mean) * (r - m.mean);
  m.std = std::sqrt(ss / n);
  return m;
}

std::vector<std::string> validate_group(const Group& g,
                                        std::size_t expected_group_size,
                                        double sigma_min,
                                        std::optional<std::size_t> vocab_size) {
  std::vector<std::string> out;
  if (g.prompt.tokens.empty()) out.emplace_back("prompt tokens empty");
  if (g.prompt.ground_truth.empty()) out.emplace_back("prompt ground_truth empty");
  if (g.trajectories.size() != expected_group_size) {
    out.push_back("group has " + std::to_string(g.trajectories.size()) +
                  " trajectories, expected " +
                  std::to_string(expected_group_size));
  }

  std::vector<double> rewards;
  rewards.reserve(g.trajectories.size());
  for (const auto& t : g.trajectories) rewards.push_back(t.reward);
  const RewardMoments m = reward_moments(rewards);
  const auto close = [](double a, double b) {
    return std::abs(a - b) <= 1e-12 * std::max(1.0, std::abs(b));
  };
  if (!close(g.reward_mean, m.mean)) out.emplace_back("reward_mean does not match rewards");
  if (!close(g.reward_std, m.std)) out.emplace_back("reward_std does not match rewards");
  if (g.reward_std < 0.0) out.emplace_back("reward_std negative");

  for (std::size_t i = 0; i < g.trajectories.size(); ++i) {
    const Trajectory& t = g.trajectories[i];
    const std::string name = "trajectory " + std::to_string(i);
    if (t.prompt_id != g.prompt.id) out.push_back(name + ": prompt_id mismatch");
    if (t.tokens.empty()) out.push_back(name + ": empty token sequence");
    if (t.steps.size() != t.tokens.size()) {
      out.push_back(name + ": steps/tokens length mismatch (" +
                    std::to_string(t.steps.size()) + " vs " +
                    std::to_string(t.tokens.size()) + ")");
    }
    if (!is_binary_reward(t.reward)) out.push_back(name + ": reward not in {-1,+1}");
    const double expected_adv =
        m.std > sigma_min ? (t.reward - m.mean) / m.std : 0.0;
    if (!close(t.advantage, expected_adv)) {
      out.push_back(name + ": advantage does not match group normalization");
    }

    const std::size_t n = std::min(t.steps.size(), t.tokens.size());
    for (std::size_t s = 0; s < n; ++s) {
      const TokenStep& st = t.steps[s];
      const std::string where = name + " step " + std::to_string(s);
      if (st.token_id != t.tokens[s]) out.push_back(where + ": token_id mismatch");
      if (!(st.old_prob > 0.0 && st.old_prob <= 1.0)) out.push_back(where + ": old_prob out of (0,1]");
      if (!(st.cur_prob > 0.0 && st.cur_prob <= 1.0)) out.push_back(where + ": cur_prob out of (0,1]");
      if (!(st.entropy >= 0.0)) out.push_back(where + ": negative entropy");
      if (vocab_size && st.entropy > std::log(static_cast<double>(*vocab_size)) + 1e-12) {
        out.push_back(where + ": entropy exceeds ln|V|");
      }
      if (st.old_prob > 0.0) {
        const double r = st.cur_prob / st.old_prob;
        if (!(std::abs(st.ratio - r) <= 1e-12 * r)) out.push_back(where + ": ratio != cur/old");
      }
      if (st.mask > 1) out.push_back(where + ": mask not in {0,1}");
    }
  }
  return out;
}

void to_json(json& j, const Prompt& p) {
  j = json{{"id", p.id}, {"tokens", p.tokens}, {"ground_truth", p.ground_truth}};
}

void from_json(const json& j, Prompt& p) {
  j.at("id").get_to(p.id);
  j.at("tokens").get_to(p.tokens);
  j.at("ground_truth").get_to(p.ground_truth);
}

void to_json(json& j, const TokenStep& s) {
  j = json{{"token_id", s.token_id},
           {"old_prob", s.old_prob},
           {"cur_prob", s.cur_prob},
           {"entropy", s.entropy},
           {"ratio", s.ratio},
           {"mask", s.mask},
           {"clip_state", to_string(s.clip_state)}};
}

void from_json(const json& j, TokenStep& s) {
  j.at("token_id").get_to(s.token_id);
  j.at("old_prob").get_to(s.old_prob);
  j.at("cur_prob").get_to(s.cur_prob);
  j.at("entropy").get_to(s.entropy);
  j.at("ratio").get_to(s.ratio);
  j.at("mask").get_to(s.mask);
  s.clip_state = clip_state_from_string(j.at("clip_state").get<std::string>());
}

void to_json(json& j, const Trajectory& t) {
  j = json{{"prompt_id", t.prompt_id},
           {"tokens", t.tokens},
           {"steps", t.steps},
           {"reward", t.reward},
           {"advantage", t.advantage}};
}

void from_json(const json& j, Trajectory& t) {
  j.at("prompt_id").get_to(t.prompt_id);
  j.at("tokens").get_to(t.tokens);
  j.at("steps").get_to(t.steps);
  j.at("reward").get_to(t.reward);
  if (!is_binary_reward(t.reward)) {
    throw std::invalid_argument("trajectory reward must be -1 or +1, got " +
                                j.at("reward").dump());
  }
  j.at("advantage").get_to(t.advantage);
}

void to_json(json& j, const Group& g) {
  j = json{{"prompt", g.prompt},
           {"trajectories", g.trajectories},
           {"reward_mean", g.reward_mean},
           {"reward_std", g.reward_std}};
}

void from_json(const json& j, Group& g) {
  j.at("prompt").get_to(g.prompt);
  j.at("trajectories").get_to(g.trajectories);
  j.at("reward_mean").get_to(g.reward_mean);
  j.at("reward_std").get_to(g.reward_std);
}

}  // namespace stapo
