#include <gtest/gtest.h>

#include <boost/multiprecision/cpp_bin_float.hpp>
#include <cmath>

#include "stapo/objectives.hpp"
#include "stapo/policy.hpp"

namespace stapo {
namespace {

using Big = boost::multiprecision::cpp_bin_float_50;

std::vector<double> big_softmax(const std::vector<double>& logits) {
  std::vector<Big> e;
  Big sum = 0;
  for (double l : logits) {
    e.push_back(boost::multiprecision::exp(Big(l)));
    sum += e.back();
  }
  std::vector<double> out;
  for (const Big& v : e) out.push_back(static_cast<double>(v / sum));
  return out;
}

double big_entropy(const std::vector<double>& p) {
  Big h = 0;
  for (double v : p) h -= Big(v) * boost::multiprecision::log(Big(v));
  return static_cast<double>(h);
}

TEST(ContextKey, KeepsLastTokens) {
  const std::vector<TokenId> gen{4, 5, 6};
  EXPECT_EQ(context_key("p", {}, 2), "p|");
  EXPECT_EQ(context_key("p", gen, 2), "p|5-6");
  EXPECT_EQ(context_key("p", gen, 1), "p|6");
  EXPECT_EQ(context_key("p", gen, 5), "p|4-5-6");
}

TEST(Distribution, UniformForZeroLogits) {
  PolicyTable p(4, 1);
  for (double v : p.distribution("unseen|")) EXPECT_DOUBLE_EQ(v, 0.25);
  p.set_logits("c|", {0, 0, 0, 0});
  for (double v : p.distribution("c|")) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Distribution, ClosedForm) {
  PolicyTable p(4, 1);
  p.set_logits("c|", {std::log(2.0), 0, 0, 0});
  const auto d = p.distribution("c|");
  EXPECT_NEAR(d[0], 0.4, 1e-15);
  for (int i = 1; i < 4; ++i) EXPECT_NEAR(d[static_cast<std::size_t>(i)], 0.2, 1e-15);
}

TEST(Distribution, MatchesHighPrecisionOracle) {
  Rng rng = make_stream(11, {});
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> logits(64);
    for (double& l : logits) l = -8.0 + 16.0 * uniform01(rng);
    PolicyTable p(64, 1);
    p.set_logits("c|", logits);
    const auto got = p.distribution("c|");
    const auto want = big_softmax(logits);
    double sum = 0.0;
    for (std::size_t i = 0; i < 64; ++i) {
      ASSERT_NEAR(got[i], want[i], 1e-12);
      ASSERT_GT(got[i], 0.0);
      sum += got[i];
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Distribution, FloorKeepsEveryEntryPositive) {
  PolicyTable p(5, 1, 1e-8);
  p.set_logits("c|", {800.0, 0, 0, 0, -900.0});
  const auto d = p.distribution("c|");
  double sum = 0.0;
  for (double v : d) {
    EXPECT_GT(v, 0.0);
    sum += v;
  }
  EXPECT_NEAR(sum, 1.0, 1e-12);
  EXPECT_NEAR(d[4], 1e-8, 1e-15);
}

TEST(Entropy, UniformAndOneHot) {
  PolicyTable p(4, 1);
  EXPECT_NEAR(p.entropy("u|"), std::log(4.0), 1e-15);
  EXPECT_NEAR(p.entropy("u|"), 1.386294, 1e-6);
  p.set_logits("h|", {100.0, 0, 0, 0});
  EXPECT_NEAR(p.entropy("h|"), 0.0, 1e-6);
}

TEST(Entropy, MatchesHighPrecisionSum) {
  Rng rng = make_stream(12, {});
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> logits(32);
    for (double& l : logits) l = -5.0 + 10.0 * uniform01(rng);
    PolicyTable p(32, 1);
    p.set_logits("c|", logits);
    const double h = p.entropy("c|");
    EXPECT_NEAR(h, big_entropy(p.distribution("c|")), 1e-12);
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, std::log(32.0));
  }
}

TEST(SetLogits, RejectsBadInput) {
  PolicyTable p(3, 1);
  EXPECT_THROW(p.set_logits("c|", {0, 0}), std::invalid_argument);
  EXPECT_THROW(p.set_logits("c|", {0, NAN, 0}), std::domain_error);
  EXPECT_THROW(PolicyTable(1, 1), std::invalid_argument);
  EXPECT_THROW(PolicyTable(4, 0), std::invalid_argument);
  EXPECT_THROW(PolicyTable(4, 1, 0.3), std::invalid_argument);
}

class SamplingTest : public ::testing::Test {
 protected:
  Prompt prompt{"p", {0}, {1}};
};

TEST_F(SamplingTest, DominantEosStopsImmediately) {
  PolicyTable p(4, 1);
  p.set_logits("p|", {0, 0, 0, 60.0});
  Rng rng = make_stream(1, {});
  const Rollout r = sample_trajectory(p, prompt, 3, 10, 1.0, rng);
  ASSERT_EQ(r.tokens, std::vector<TokenId>{3});
  EXPECT_EQ(r.steps.size(), 1u);
  EXPECT_NEAR(r.steps[0].old_prob, 1.0 - 3e-8, 1e-12);  // three floored tokens
}

TEST_F(SamplingTest, StopsAtMaxLen) {
  PolicyTable p(4, 1);
  p.set_logits("p|", {60.0, 0, 0, 0});
  p.set_logits("p|0", {60.0, 0, 0, 0});
  Rng rng = make_stream(1, {});
  EXPECT_EQ(sample_trajectory(p, prompt, 3, 5, 1.0, rng).tokens.size(), 5u);
  EXPECT_THROW(sample_trajectory(p, prompt, 3, 0, 1.0, rng), std::invalid_argument);
}

TEST_F(SamplingTest, FixedStreamIsDeterministic) {
  PolicyTable p(6, 2);
  Rng a = make_stream(5, {1, 2});
  Rng b = make_stream(5, {1, 2});
  const Rollout ra = sample_trajectory(p, prompt, 5, 30, 1.0, a);
  const Rollout rb = sample_trajectory(p, prompt, 5, 30, 1.0, b);
  EXPECT_EQ(ra.tokens, rb.tokens);
  EXPECT_EQ(ra.steps, rb.steps);
}

TEST_F(SamplingTest, EmpiricalFrequenciesWithinThreeSigma) {
  PolicyTable p(3, 1);
  p.set_logits("p|", {std::log(0.5), std::log(0.3), std::log(0.2)});
  const std::vector<double> exact{0.5, 0.3, 0.2};
  const int n = 10000;
  std::vector<int> counts(3, 0);
  Rng rng = make_stream(77, {});
  for (int i = 0; i < n; ++i) {
    const Rollout r = sample_trajectory(p, prompt, 2, 1, 1.0, rng);
    ++counts[static_cast<std::size_t>(r.tokens[0])];
  }
  for (std::size_t k = 0; k < 3; ++k) {
    const double sigma = std::sqrt(n * exact[k] * (1 - exact[k]));
    EXPECT_LE(std::abs(counts[k] - n * exact[k]), 3 * sigma) << k;
  }
}

TEST_F(SamplingTest, TemperatureChangesSamplingNotRecordedProbabilities) {
  PolicyTable p(3, 1);
  p.set_logits("p|", {std::log(0.6), std::log(0.3), std::log(0.1)});
  // T = 0.5 squares the probabilities: 0.36 : 0.09 : 0.01.
  const std::vector<double> tempered{0.36 / 0.46, 0.09 / 0.46, 0.01 / 0.46};
  const std::vector<double> raw{0.6, 0.3, 0.1};
  const int n = 10000;
  std::vector<int> counts(3, 0);
  Rng rng = make_stream(78, {});
  for (int i = 0; i < n; ++i) {
    const Rollout r = sample_trajectory(p, prompt, 2, 1, 0.5, rng);
    const auto k = static_cast<std::size_t>(r.tokens[0]);
    ++counts[k];
    ASSERT_NEAR(r.steps[0].old_prob, raw[k], 1e-12);
  }
  for (std::size_t k = 0; k < 3; ++k) {
    const double sigma = std::sqrt(n * tempered[k] * (1 - tempered[k]));
    EXPECT_LE(std::abs(counts[k] - n * tempered[k]), 3 * sigma) << k;
  }
}

TEST(Snapshot, IsIndependentCopy) {
  PolicyTable p(3, 1);
  p.set_logits("c|", {1, 2, 3});
  const PolicyTable snap = p.snapshot();
  const auto before = snap.distribution("c|");
  p.apply_gradient({{"c|", {1, 0, -1}}, {"d|", {0.5, 0, 0}}}, 0.5, 10.0);
  EXPECT_EQ(snap.distribution("c|"), before);
  EXPECT_NE(p.distribution("c|"), before);
  EXPECT_EQ(snap.snapshot(), snap);
}

TEST(Snapshot, RatioIsOneImmediatelyAfter) {
  PolicyTable p(5, 2);
  Rng rng = make_stream(3, {});
  const Prompt prompt{"q", {1}, {2}};
  const Rollout r = sample_trajectory(p, prompt, 4, 10, 1.0, rng);
  const PolicyTable snap = p.snapshot();
  std::vector<TokenId> prefix;
  for (const TokenStep& s : r.steps) {
    const std::string ctx = context_key(prompt.id, prefix, 2);
    const double cur = snap.distribution(ctx)[static_cast<std::size_t>(s.token_id)];
    EXPECT_EQ(cur / s.old_prob, 1.0);
    prefix.push_back(s.token_id);
  }
}

TEST(ApplyGradient, ZeroGradientsLeaveTableUnchanged) {
  PolicyTable p(3, 1);
  p.set_logits("c|", {1, 2, 3});
  const PolicyTable before = p;
  const auto rep = p.apply_gradient({{"c|", {0, 0, 0}}, {"new|", {0, 0, 0}}}, 1.0, 1.0);
  EXPECT_EQ(rep.norm, 0.0);
  EXPECT_EQ(p, before);
}

TEST(ApplyGradient, ClipsGlobalNorm) {
  PolicyTable p(4, 1);
  const auto rep = p.apply_gradient({{"c|", {2.0, 0, 0, 0}}}, 1.0, 1.0);
  EXPECT_DOUBLE_EQ(rep.norm, 2.0);
  EXPECT_DOUBLE_EQ(rep.scale, 0.5);
  EXPECT_DOUBLE_EQ(p.logits_at("c|")[0], 1.0);

  PolicyTable q(2, 1);
  q.apply_gradient({{"a|", {3.0, 0}}, {"b|", {0, 4.0}}}, 2.0, 1.0);
  EXPECT_NEAR(q.logits_at("a|")[0], 2.0 * 0.6, 1e-15);
  EXPECT_NEAR(q.logits_at("b|")[1], 2.0 * 0.8, 1e-15);
}

TEST(ApplyGradient, NonFiniteRejectedAtomically) {
  PolicyTable p(3, 1);
  p.set_logits("a|", {1, 1, 1});
  const PolicyTable before = p;
  EXPECT_THROW(p.apply_gradient({{"a|", {1, 1, 1}}, {"b|", {0, INFINITY, 0}}}, 1.0, 1.0),
               std::domain_error);
  EXPECT_EQ(p, before);
  EXPECT_THROW(p.apply_gradient({{"b|", {1, 0, 0}}, {"a|", {1e150, 0, 0}}}, 1e300, 1e151),
               std::domain_error);
  EXPECT_EQ(p, before);
  EXPECT_THROW(p.apply_gradient({{"a|", {1, 1}}}, 1.0, 1.0), std::invalid_argument);
  EXPECT_THROW(p.apply_gradient({}, 0.0, 1.0), std::invalid_argument);
}

TEST(ApplyGradient, SmallAscentStepIncreasesObjective) {
  Rng rng = make_stream(21, {});
  for (int trial = 0; trial < 20; ++trial) {
    PolicyTable p(5, 1);
    SampleBatch batch;
    for (int c = 0; c < 3; ++c) {
      std::vector<double> l(5);
      for (double& v : l) v = -1.0 + 2.0 * uniform01(rng);
      p.set_logits("c" + std::to_string(c) + "|", l);
    }
    for (int i = 0; i < 12; ++i) {
      TokenSample t;
      t.context = "c" + std::to_string(i % 3) + "|";
      t.target = static_cast<TokenId>(uniform_index(rng, 5));
      t.old_prob = p.distribution(t.context)[static_cast<std::size_t>(t.target)];
      t.advantage = uniform01(rng) < 0.5 ? 1.0 : -1.0;
      t.sequence = static_cast<std::size_t>(i / 4);
      batch.tokens.push_back(t);
    }
    batch.sequence_lengths = {4, 4, 4};
    const std::vector<std::uint8_t> masks(12, 1);
    const ClipConfig clip;
    const auto g = surrogate_gradient(Objective::DAPO, p, batch, masks, clip);
    ASSERT_TRUE(g);
    const double before = *surrogate_value(Objective::DAPO, p, batch, masks, clip);
    PolicyTable q = p;
    q.apply_gradient(g->per_context, 1e-3, 1e9);
    const double after = *surrogate_value(Objective::DAPO, q, batch, masks, clip);
    EXPECT_GT(after, before);
  }
}

TEST(PolicyJson, RoundTripIsBitIdentical) {
  PolicyTable p(7, 2, 1e-8);
  Rng rng = make_stream(8, {});
  for (int c = 0; c < 10; ++c) {
    std::vector<double> l(7);
    for (double& v : l) v = -3.0 + 6.0 * uniform01(rng) + 1e-17 * c;
    p.set_logits("ctx" + std::to_string(c) + "|1-2", l);
  }
  const PolicyTable back = policy_from_json(json::parse(json(p).dump()));
  EXPECT_EQ(back, p);
  for (const auto& [ctx, l] : p.logits()) EXPECT_EQ(back.distribution(ctx), p.distribution(ctx));
}

TEST(PolicyJson, VersionMismatch) {
  json j = PolicyTable(3, 1);
  j["version"] = 99;
  EXPECT_THROW(policy_from_json(j), std::runtime_error);
}

}  // namespace
}  // namespace stapo
