#include <gtest/gtest.h>

#include <boost/multiprecision/cpp_bin_float.hpp>
#include <cmath>
#include <numeric>

#include "stapo/analysis.hpp"
#include "stapo/objectives.hpp"

namespace stapo {
namespace {

using Big = boost::multiprecision::cpp_bin_float_50;

TokenSample token(std::string ctx, TokenId target, double old_prob, double adv, std::size_t seq) {
  return TokenSample{std::move(ctx), target, old_prob, adv, seq};
}

TEST(ObjectiveNames, CaseInsensitive) {
  EXPECT_EQ(objective_from_string("STAPO"), Objective::STAPO);
  EXPECT_EQ(objective_from_string("Dapo"), Objective::DAPO);
  EXPECT_EQ(to_string(Objective::GRPO), "grpo");
  EXPECT_THROW(objective_from_string("ppo"), std::invalid_argument);
}

TEST(ClipConfig, ValidationAndGrpoSymmetry) {
  EXPECT_NO_THROW(ClipConfig{}.validate());
  EXPECT_THROW((ClipConfig{1.0, 0.28}.validate()), std::invalid_argument);
  EXPECT_THROW((ClipConfig{0.0, 0.28}.validate()), std::invalid_argument);
  EXPECT_THROW((ClipConfig{0.2, -0.1}.validate()), std::invalid_argument);
  const ClipConfig g = ClipConfig{}.effective_for(Objective::GRPO);
  EXPECT_EQ(g.eps_low, 0.2);
  EXPECT_EQ(g.eps_high, 0.2);
  EXPECT_EQ(ClipConfig{}.effective_for(Objective::DAPO).eps_high, 0.28);
}

TEST(GroupAdvantages, PairIsPlusMinusOne) {
  const std::vector<double> r{1, -1};
  EXPECT_EQ(group_advantages(r), (std::vector<double>{1.0, -1.0}));
}

TEST(GroupAdvantages, AllSameRewardIsZero) {
  const std::vector<double> r{1, 1, 1, 1};
  EXPECT_EQ(group_advantages(r), (std::vector<double>(4, 0.0)));
}

TEST(GroupAdvantages, MatchesHighPrecisionRecomputation) {
  const std::vector<double> r{1, 1, -1, -1, -1, -1, -1, -1};
  Big mean = 0;
  for (double v : r) mean += v;
  mean /= r.size();
  Big var = 0;
  for (double v : r) var += (v - mean) * (v - mean);
  const Big sd = boost::multiprecision::sqrt(var / r.size());
  const auto adv = group_advantages(r);
  for (std::size_t i = 0; i < r.size(); ++i) {
    EXPECT_NEAR(adv[i], static_cast<double>((r[i] - mean) / sd), 1e-15);
  }
  EXPECT_NEAR(adv[0], 1.7320508075688772, 1e-15);
}

TEST(GroupAdvantages, Errors) {
  const std::vector<double> one{1};
  const std::vector<double> frac{1, 0.5};
  EXPECT_THROW(group_advantages(one), std::invalid_argument);
  EXPECT_THROW(group_advantages(frac), std::invalid_argument);
}

TEST(GroupAdvantages, SigmaMinThreshold) {
  const std::vector<double> r{1, -1};
  EXPECT_EQ(group_advantages(r, 1.0), (std::vector<double>{0.0, 0.0}));
  EXPECT_EQ(group_advantages(r, 0.999)[0], 1.0);
}

TEST(RatioClip, Examples) {
  const ClipConfig clip;
  auto a = token_ratio_and_clipstate(0.5, 0.5, 1.0, clip);
  EXPECT_EQ(a.ratio, 1.0);
  EXPECT_EQ(a.state, ClipState::Unclipped);
  auto b = token_ratio_and_clipstate(0.1, 0.2, 1.0, clip);
  EXPECT_EQ(b.ratio, 2.0);
  EXPECT_EQ(b.state, ClipState::ClippedHigh);
  auto c = token_ratio_and_clipstate(0.5, 0.35, -1.0, clip);
  EXPECT_NEAR(c.ratio, 0.7, 1e-15);
  EXPECT_EQ(c.state, ClipState::ClippedLow);
}

TEST(RatioClip, OppositeSidesStayUnclipped) {
  const ClipConfig clip;
  EXPECT_EQ(token_ratio_and_clipstate(0.1, 0.2, -1.0, clip).state, ClipState::Unclipped);
  EXPECT_EQ(token_ratio_and_clipstate(0.5, 0.35, 1.0, clip).state, ClipState::Unclipped);
  EXPECT_EQ(token_ratio_and_clipstate(0.1, 0.2, 0.0, clip).state, ClipState::Unclipped);
}

// Two groups of two equal-length trajectories with zero-mean advantages.
SampleBatch balanced_batch(const PolicyTable& p) {
  SampleBatch b;
  for (std::size_t s = 0; s < 4; ++s) {
    const double adv = s % 2 == 0 ? 1.0 : -1.0;
    for (int pos = 0; pos < 3; ++pos) {
      const std::string ctx = "g" + std::to_string(s / 2) + "|" + std::to_string(pos);
      const TokenId tgt = static_cast<TokenId>(pos);
      b.tokens.push_back(token(ctx, tgt, p.distribution(ctx)[static_cast<std::size_t>(tgt)], adv, s));
    }
    b.sequence_lengths.push_back(3);
  }
  return b;
}

TEST(SurrogateValue, ZeroAtOldPolicyForBalancedAdvantages) {
  PolicyTable p(4, 1);
  const SampleBatch b = balanced_batch(p);
  const std::vector<std::uint8_t> masks(b.tokens.size(), 1);
  for (Objective o : {Objective::GRPO, Objective::DAPO, Objective::STAPO}) {
    EXPECT_NEAR(*surrogate_value(o, p, b, masks, ClipConfig{}), 0.0, 1e-15);
  }
}

TEST(SurrogateValue, SingleUnclippedToken) {
  PolicyTable p(4, 1);
  SampleBatch b;
  b.tokens.push_back(token("c|", 0, 0.25 / 1.1, 1.0, 0));
  b.sequence_lengths = {1};
  const std::vector<std::uint8_t> masks{1};
  for (Objective o : {Objective::GRPO, Objective::DAPO, Objective::STAPO}) {
    EXPECT_NEAR(*surrogate_value(o, p, b, masks, ClipConfig{}), 1.1, 1e-14);
  }
}

TEST(SurrogateValue, ClippedTermsUseBoundary) {
  PolicyTable p(4, 1);
  SampleBatch b;
  b.tokens.push_back(token("c|", 0, 0.125, 1.0, 0));  // rho = 2
  b.sequence_lengths = {1};
  const std::vector<std::uint8_t> masks{1};
  EXPECT_NEAR(*surrogate_value(Objective::DAPO, p, b, masks, ClipConfig{}), 1.28, 1e-15);
  EXPECT_NEAR(*surrogate_value(Objective::GRPO, p, b, masks, ClipConfig{}), 1.2, 1e-15);
}

RandomBatch random_batch(std::uint64_t seed) {
  Rng rng = make_stream(seed, {});
  return make_random_batch(rng, false);
}

// Sequence-mean then sequence-mean, written out directly.
double grpo_oracle(const PolicyTable& p, const SampleBatch& b, const ClipConfig& clip) {
  std::vector<double> per_seq(b.num_sequences(), 0.0);
  for (const TokenSample& t : b.tokens) {
    const double rho = p.distribution(t.context)[static_cast<std::size_t>(t.target)] / t.old_prob;
    const double c = std::clamp(rho, 1 - clip.eps_low, 1 + clip.eps_low);
    per_seq[t.sequence] += std::min(rho * t.advantage, c * t.advantage);
  }
  double v = 0.0;
  for (std::size_t s = 0; s < per_seq.size(); ++s) v += per_seq[s] / b.sequence_lengths[s];
  return v / static_cast<double>(per_seq.size());
}

double stapo_oracle(const PolicyTable& p, const SampleBatch& b,
                    const std::vector<std::uint8_t>& masks, const ClipConfig& clip) {
  double v = 0.0;
  double kept = 0.0;
  for (std::size_t i = 0; i < b.tokens.size(); ++i) {
    if (!masks[i]) continue;
    const TokenSample& t = b.tokens[i];
    const double rho = p.distribution(t.context)[static_cast<std::size_t>(t.target)] / t.old_prob;
    const double c = std::clamp(rho, 1 - clip.eps_low, 1 + clip.eps_high);
    v += std::min(rho * t.advantage, c * t.advantage);
    kept += 1.0;
  }
  return v / kept;
}

TEST(SurrogateValue, MatchesDirectOracles) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng = make_stream(seed, {1});
    const RandomBatch rb = make_random_batch(rng, true);
    const std::vector<std::uint8_t> ones(rb.batch.tokens.size(), 1);
    const ClipConfig clip;
    EXPECT_NEAR(*surrogate_value(Objective::GRPO, rb.policy, rb.batch, ones, clip),
                grpo_oracle(rb.policy, rb.batch, clip), 1e-13);
    EXPECT_NEAR(*surrogate_value(Objective::DAPO, rb.policy, rb.batch, ones, clip),
                stapo_oracle(rb.policy, rb.batch, ones, clip), 1e-13);
    const auto v = surrogate_value(Objective::STAPO, rb.policy, rb.batch, rb.masks, clip);
    if (std::count(rb.masks.begin(), rb.masks.end(), 1) == 0) {
      EXPECT_FALSE(v);
    } else {
      EXPECT_NEAR(*v, stapo_oracle(rb.policy, rb.batch, rb.masks, clip), 1e-13);
    }
  }
}

TEST(SurrogateValue, StapoWithoutMasksEqualsDapo) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const RandomBatch rb = random_batch(seed);
    const std::vector<std::uint8_t> ones(rb.batch.tokens.size(), 1);
    EXPECT_EQ(*surrogate_value(Objective::STAPO, rb.policy, rb.batch, ones, ClipConfig{}),
              *surrogate_value(Objective::DAPO, rb.policy, rb.batch, ones, ClipConfig{}));
  }
}

TEST(SurrogateValue, GrpoEqualsDapoOnEqualLengthsWithSymmetricClip) {
  PolicyTable p(5, 1);
  p.set_logits("g0|0", {0.3, -0.2, 0.1, 0.0, 0.5});
  SampleBatch b = balanced_batch(PolicyTable(5, 1));
  for (auto& t : b.tokens) t.old_prob *= 0.95;
  const std::vector<std::uint8_t> ones(b.tokens.size(), 1);
  const ClipConfig sym{0.2, 0.2};
  EXPECT_NEAR(*surrogate_value(Objective::GRPO, p, b, ones, sym),
              *surrogate_value(Objective::DAPO, p, b, ones, sym), 1e-15);
}

TEST(SurrogateValue, MaskedTokenEqualsDeletedToken) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const RandomBatch rb = random_batch(seed);
    if (rb.batch.tokens.size() < 2) continue;
    std::vector<std::uint8_t> masks(rb.batch.tokens.size(), 1);
    masks[seed % masks.size()] = 0;
    SampleBatch reduced = rb.batch;
    reduced.tokens.erase(reduced.tokens.begin() + static_cast<long>(seed % masks.size()));
    const std::vector<std::uint8_t> ones(reduced.tokens.size(), 1);
    const ClipConfig clip;
    EXPECT_NEAR(*surrogate_value(Objective::STAPO, rb.policy, rb.batch, masks, clip),
                *surrogate_value(Objective::DAPO, rb.policy, reduced, ones, clip), 1e-14);
    const auto ga = surrogate_gradient(Objective::STAPO, rb.policy, rb.batch, masks, clip);
    const auto gb = surrogate_gradient(Objective::DAPO, rb.policy, reduced, ones, clip);
    for (const auto& [ctx, v] : gb->per_context) {
      const auto it = ga->per_context.find(ctx);
      ASSERT_NE(it, ga->per_context.end());
      for (std::size_t n = 0; n < v.size(); ++n) EXPECT_NEAR(it->second[n], v[n], 1e-14);
    }
  }
}

TEST(SurrogateValue, NoUpdateSignals) {
  PolicyTable p(3, 1);
  SampleBatch empty;
  EXPECT_FALSE(surrogate_value(Objective::DAPO, p, empty, {}, ClipConfig{}));
  SampleBatch b;
  b.tokens.push_back(token("c|", 0, 0.3, 1.0, 0));
  b.sequence_lengths = {1};
  const std::vector<std::uint8_t> zero{0};
  EXPECT_FALSE(surrogate_value(Objective::STAPO, p, b, zero, ClipConfig{}));
  EXPECT_FALSE(surrogate_gradient(Objective::STAPO, p, b, zero, ClipConfig{}));
  EXPECT_THROW(surrogate_value(Objective::DAPO, p, b, zero, ClipConfig{}), std::invalid_argument);
  EXPECT_THROW(surrogate_value(Objective::GRPO, p, b, zero, ClipConfig{}), std::invalid_argument);
  const std::vector<std::uint8_t> wrong_len{1, 1};
  EXPECT_THROW(surrogate_value(Objective::STAPO, p, b, wrong_len, ClipConfig{}),
               std::invalid_argument);
}

TEST(SurrogateGradient, ClosedFormUniformSingleToken) {
  PolicyTable p(4, 1);
  SampleBatch b;
  b.tokens.push_back(token("c|", 2, 0.25, 1.0, 0));
  b.sequence_lengths = {1};
  const std::vector<std::uint8_t> ones{1};
  const auto g = surrogate_gradient(Objective::DAPO, p, b, ones, ClipConfig{});
  ASSERT_TRUE(g);
  const std::vector<double> want{-0.25, -0.25, 0.75, -0.25};
  EXPECT_EQ(g->per_context.at("c|"), want);
  EXPECT_EQ(g->audit[0].weight, 1.0);
  EXPECT_EQ(g->audit[0].normalizer, 1.0);
  EXPECT_NEAR(g->audit[0].norm() * g->audit[0].norm(), 0.75, 1e-15);
}

TEST(SurrogateGradient, ClippedOutTokenContributesZero) {
  PolicyTable p(4, 1);
  SampleBatch b;
  b.tokens.push_back(token("c|", 0, 0.125, 1.0, 0));    // rho 2, A > 0
  b.tokens.push_back(token("d|", 1, 0.25 / 0.7, -1.0, 0));  // rho 0.7, A < 0
  b.sequence_lengths = {2};
  const std::vector<std::uint8_t> ones{1, 1};
  const auto g = surrogate_gradient(Objective::DAPO, p, b, ones, ClipConfig{});
  ASSERT_TRUE(g);
  EXPECT_EQ(g->audit[0].clip_state, ClipState::ClippedHigh);
  EXPECT_EQ(g->audit[1].clip_state, ClipState::ClippedLow);
  for (const auto& [ctx, v] : g->per_context) {
    for (double x : v) EXPECT_EQ(x, 0.0);
  }
  EXPECT_EQ(g->audit[0].norm(), 0.0);
}

TEST(SurrogateGradient, PerContextVectorsSumToZero) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng = make_stream(seed, {2});
    const RandomBatch rb = make_random_batch(rng, true);
    const auto g = surrogate_gradient(Objective::STAPO, rb.policy, rb.batch, rb.masks, ClipConfig{});
    if (!g) continue;
    for (const auto& [ctx, v] : g->per_context) {
      double s = 0.0, scale = 0.0;
      for (double x : v) {
        s += x;
        scale += std::abs(x);
      }
      EXPECT_LE(std::abs(s), 1e-14 * std::max(1.0, scale)) << ctx;
    }
  }
}

TEST(SurrogateGradient, MatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng = make_stream(seed, {3});
    const RandomBatch rb = make_random_batch(rng, false);
    const std::vector<std::uint8_t> ones(rb.batch.tokens.size(), 1);
    for (Objective o : {Objective::GRPO, Objective::DAPO}) {
      const auto r = finite_difference_check(o, rb.policy, rb.batch, ones, ClipConfig{}, 1e-5);
      EXPECT_LT(r.max_rel_error, 1e-6);
      EXPECT_GT(r.compared + r.skipped, 0u);
    }
  }
}

TEST(SurrogateGradient, AuditMatchesBatchOrderAndMaskFlags) {
  Rng rng = make_stream(4, {});
  RandomBatch rb = make_random_batch(rng, true);
  rb.masks.assign(rb.batch.tokens.size(), 1);
  rb.masks[0] = 0;
  const auto g = surrogate_gradient(Objective::STAPO, rb.policy, rb.batch, rb.masks, ClipConfig{});
  ASSERT_TRUE(g);
  ASSERT_EQ(g->audit.size(), rb.batch.tokens.size());
  EXPECT_TRUE(g->audit[0].masked);
  EXPECT_EQ(g->audit[0].normalizer, 0.0);
  for (std::size_t i = 0; i < g->audit.size(); ++i) {
    EXPECT_EQ(g->audit[i].context, rb.batch.tokens[i].context);
    EXPECT_EQ(g->audit[i].target, rb.batch.tokens[i].target);
  }
  const json j = g->audit[1];
  EXPECT_EQ(j.at("vector").size(), rb.policy.vocab_size());
  EXPECT_EQ(j.at("masked"), false);
}

TEST(TokenNormalizers, GrpoPerSequence) {
  SampleBatch b;
  b.sequence_lengths = {2, 4};
  for (int i = 0; i < 2; ++i) b.tokens.push_back(token("a|", 0, 0.5, 1, 0));
  for (int i = 0; i < 4; ++i) b.tokens.push_back(token("a|", 0, 0.5, 1, 1));
  const std::vector<std::uint8_t> ones(6, 1);
  const auto n = token_normalizers(Objective::GRPO, b, ones);
  EXPECT_DOUBLE_EQ((*n)[0], 0.25);
  EXPECT_DOUBLE_EQ((*n)[5], 0.125);
  EXPECT_DOUBLE_EQ((*token_normalizers(Objective::DAPO, b, ones))[0], 1.0 / 6.0);
  std::vector<std::uint8_t> m(6, 1);
  m[1] = m[2] = 0;
  const auto s = token_normalizers(Objective::STAPO, b, m);
  EXPECT_EQ((*s)[1], 0.0);
  EXPECT_DOUBLE_EQ((*s)[0], 0.25);
  EXPECT_DOUBLE_EQ(std::accumulate(s->begin(), s->end(), 0.0), 1.0);
}

TEST(Assembly, FlattenAndAssemble) {
  const Prompt prompt{"p", {0}, {1}};
  std::vector<Rollout> rollouts(2);
  for (auto& r : rollouts) {
    r.prompt_id = "p";
    r.tokens = {3, 4, 5};
    for (TokenId t : r.tokens) r.steps.push_back(TokenStep{t, 0.5, 0.5, 0.1, 1.0, 1, ClipState::Unclipped});
  }
  const std::vector<double> rewards{1, -1};
  const Group g = assemble_group(prompt, rollouts, rewards);
  EXPECT_TRUE(validate_group(g, 2).empty());
  const std::vector<Group> gs{g};
  const SampleBatch b = flatten_groups(gs, 2);
  ASSERT_EQ(b.tokens.size(), 6u);
  EXPECT_EQ(b.tokens[0].context, "p|");
  EXPECT_EQ(b.tokens[2].context, "p|3-4");
  EXPECT_EQ(b.tokens[3].sequence, 1u);
  EXPECT_EQ(b.tokens[3].advantage, -1.0);
  EXPECT_EQ(b.sequence_lengths, (std::vector<std::size_t>{3, 3}));
  EXPECT_THROW(assemble_group(prompt, rollouts, std::vector<double>{1}), std::invalid_argument);
}

}  // namespace
}  // namespace stapo
