#include "stapo/objectives.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <stdexcept>
#include <unordered_map>

namespace stapo {

std::string_view to_string(Objective o) {
  switch (o) {
    case Objective::GRPO: return "grpo";
    case Objective::DAPO: return "dapo";
    case Objective::STAPO: return "stapo";
  }
  return "stapo";
}

Objective objective_from_string(std::string_view s) {
  std::string lower(s);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "grpo") return Objective::GRPO;
  if (lower == "dapo") return Objective::DAPO;
  if (lower == "stapo") return Objective::STAPO;
  throw std::invalid_argument("unknown objective '" + std::string(s) + "'");
}

void ClipConfig::validate() const {
  if (!(eps_low > 0.0 && eps_low < 1.0)) {
    throw std::invalid_argument("clip eps_low must be in (0, 1)");
  }
  if (!(eps_high > 0.0 && std::isfinite(eps_high))) {
    throw std::invalid_argument("clip eps_high must be > 0");
  }
}

ClipConfig ClipConfig::effective_for(Objective o) const {
  if (o == Objective::GRPO) return ClipConfig{eps_low, eps_low};
  return *this;
}

std::vector<double> group_advantages(std::span<const double> rewards, double sigma_min) {
  if (rewards.size() < 2) throw std::invalid_argument("group_advantages needs G >= 2");
  for (double r : rewards) {
    if (!is_binary_reward(r)) throw std::invalid_argument("reward not in {-1,+1}");
  }
  const RewardMoments m = reward_moments(rewards);
  std::vector<double> adv(rewards.size(), 0.0);
  if (m.std > sigma_min) {
    for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - m.mean) / m.std;
  }
  return adv;
}

Group assemble_group(const Prompt& prompt, std::vector<Rollout> rollouts,
                     std::span<const double> rewards, double sigma_min) {
  if (rollouts.size() != rewards.size()) {
    throw std::invalid_argument("assemble_group: rollouts/rewards size mismatch");
  }
  const std::vector<double> adv = group_advantages(rewards, sigma_min);
  const RewardMoments m = reward_moments(rewards);
  Group g;
  g.prompt = prompt;
  g.reward_mean = m.mean;
  g.reward_std = m.std;
  g.trajectories.reserve(rollouts.size());
  for (std::size_t i = 0; i < rollouts.size(); ++i) {
    Trajectory t;
    t.prompt_id = std::move(rollouts[i].prompt_id);
    t.tokens = std::move(rollouts[i].tokens);
    t.steps = std::move(rollouts[i].steps);
    t.reward = rewards[i];
    t.advantage = adv[i];
    g.trajectories.push_back(std::move(t));
  }
  return g;
}

RatioClip token_ratio_and_clipstate(double old_prob, double cur_prob, double advantage,
                                    const ClipConfig& clip) {
  RatioClip rc;
  rc.ratio = cur_prob / old_prob;
  if (advantage > 0.0 && rc.ratio > 1.0 + clip.eps_high) {
    rc.state = ClipState::ClippedHigh;
  } else if (advantage < 0.0 && rc.ratio < 1.0 - clip.eps_low) {
    rc.state = ClipState::ClippedLow;
  }
  return rc;
}

SampleBatch flatten_groups(std::span<const Group> groups, int context_order) {
  SampleBatch batch;
  for (const Group& g : groups) {
    for (const Trajectory& t : g.trajectories) {
      const std::size_t seq = batch.sequence_lengths.size();
      batch.sequence_lengths.push_back(t.tokens.size());
      std::span<const TokenId> toks(t.tokens);
      for (std::size_t pos = 0; pos < t.tokens.size(); ++pos) {
        TokenSample s;
        s.context = context_key(t.prompt_id, toks.first(pos), context_order);
        s.target = t.tokens[pos];
        s.old_prob = t.steps.at(pos).old_prob;
        s.advantage = t.advantage;
        s.sequence = seq;
        batch.tokens.push_back(std::move(s));
      }
    }
  }
  return batch;
}

std::optional<std::vector<double>> token_normalizers(Objective o, const SampleBatch& batch,
                                                     std::span<const std::uint8_t> masks) {
  const std::size_t n = batch.tokens.size();
  if (masks.size() != n) throw std::invalid_argument("mask length != token count");
  if (n == 0) return std::nullopt;
  if (o != Objective::STAPO &&
      std::any_of(masks.begin(), masks.end(), [](std::uint8_t m) { return m == 0; })) {
    throw std::invalid_argument("masks must be all ones for GRPO/DAPO");
  }
  std::vector<double> norm(n, 0.0);
  switch (o) {
    case Objective::GRPO: {
      const auto seqs = static_cast<double>(batch.num_sequences());
      for (std::size_t i = 0; i < n; ++i) {
        const auto len = static_cast<double>(batch.sequence_lengths.at(batch.tokens[i].sequence));
        norm[i] = 1.0 / (seqs * len);
      }
      break;
    }
    case Objective::DAPO: {
      const double w = 1.0 / static_cast<double>(n);
      std::fill(norm.begin(), norm.end(), w);
      break;
    }
    case Objective::STAPO: {
      std::size_t kept = 0;
      for (auto m : masks) kept += m ? 1 : 0;
      if (kept == 0) return std::nullopt;
      const double w = 1.0 / static_cast<double>(kept);
      for (std::size_t i = 0; i < n; ++i) norm[i] = masks[i] ? w : 0.0;
      break;
    }
  }
  return norm;
}

namespace {

class DistributionCache {
 public:
  explicit DistributionCache(const PolicyTable& p) : policy_(p) {}
  const std::vector<double>& at(const std::string& ctx) {
    auto it = cache_.find(ctx);
    if (it == cache_.end()) it = cache_.emplace(ctx, policy_.distribution(ctx)).first;
    return it->second;
  }

 private:
  const PolicyTable& policy_;
  std::unordered_map<std::string, std::vector<double>> cache_;
};

double clipped_term(double ratio, double advantage, const ClipConfig& clip) {
  const double clipped = std::clamp(ratio, 1.0 - clip.eps_low, 1.0 + clip.eps_high);
  return std::min(ratio * advantage, clipped * advantage);
}

}  // namespace

std::optional<double> surrogate_value(Objective o, const PolicyTable& policy,
                                      const SampleBatch& batch,
                                      std::span<const std::uint8_t> masks,
                                      const ClipConfig& clip) {
  const auto norm = token_normalizers(o, batch, masks);
  if (!norm) return std::nullopt;
  const ClipConfig eff = clip.effective_for(o);
  DistributionCache dist(policy);
  double value = 0.0;
  for (std::size_t i = 0; i < batch.tokens.size(); ++i) {
    if (!masks[i]) continue;
    const TokenSample& t = batch.tokens[i];
    const double cur = dist.at(t.context)[static_cast<std::size_t>(t.target)];
    value += (*norm)[i] * clipped_term(cur / t.old_prob, t.advantage, eff);
  }
  return value;
}

double TokenGradient::norm() const {
  double s = 0.0;
  for (double v : vector) s += v * v;
  return std::sqrt(s);
}

std::optional<SurrogateGradient> surrogate_gradient(Objective o, const PolicyTable& policy,
                                                    const SampleBatch& batch,
                                                    std::span<const std::uint8_t> masks,
                                                    const ClipConfig& clip) {
  const auto norm = token_normalizers(o, batch, masks);
  if (!norm) return std::nullopt;
  const ClipConfig eff = clip.effective_for(o);
  const std::size_t vocab = policy.vocab_size();
  DistributionCache dist(policy);

  SurrogateGradient out;
  out.audit.reserve(batch.tokens.size());
  for (std::size_t i = 0; i < batch.tokens.size(); ++i) {
    const TokenSample& t = batch.tokens[i];
    const std::vector<double>& pi = dist.at(t.context);
    const auto k = static_cast<std::size_t>(t.target);
    const RatioClip rc = token_ratio_and_clipstate(t.old_prob, pi[k], t.advantage, eff);

    TokenGradient tg;
    tg.context = t.context;
    tg.target = t.target;
    tg.ratio = rc.ratio;
    tg.cur_prob = pi[k];
    tg.clip_state = rc.state;
    tg.masked = masks[i] == 0;
    tg.normalizer = (*norm)[i];
    tg.weight = rc.state == ClipState::Unclipped ? rc.ratio * t.advantage : 0.0;
    tg.vector.resize(vocab);
    for (std::size_t n = 0; n < vocab; ++n) {
      tg.vector[n] = tg.weight * ((n == k ? 1.0 : 0.0) - pi[n]);
    }

    if (!tg.masked) {
      out.value += tg.normalizer * clipped_term(rc.ratio, t.advantage, eff);
      auto [it, inserted] = out.per_context.try_emplace(t.context, vocab, 0.0);
      for (std::size_t n = 0; n < vocab; ++n) it->second[n] += tg.normalizer * tg.vector[n];
    }
    out.audit.push_back(std::move(tg));
  }
  return out;
}

void to_json(json& j, const TokenGradient& g) {
  j = json{{"context", g.context},       {"target", g.target},
           {"weight", g.weight},         {"ratio", g.ratio},
           {"cur_prob", g.cur_prob},     {"normalizer", g.normalizer},
           {"clip_state", to_string(g.clip_state)},
           {"masked", g.masked},         {"norm", g.norm()},
           {"vector", g.vector}};
}

}  // namespace stapo
