#pragma once

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stapo/core.hpp"
#include "stapo/random.hpp"

namespace stapo {

// Context keys look like "<prompt id>|<t1>-<t2>-...", holding the last
// `order` generated tokens in decimal. The empty history is "<prompt id>|".
std::string context_key(std::string_view prompt_id, std::span<const TokenId> generated,
                        int order);

// Per-context gradient (or logit delta) vectors, ordered by key so every
// reduction over contexts is deterministic.
using GradientMap = std::map<std::string, std::vector<double>>;

// Softmax, then elementwise max with `floor`, then renormalize.
std::vector<double> floored_softmax(std::span<const double> logits, double floor);

// Shannon entropy in nats; 0 ln 0 = 0.
double shannon_entropy(std::span<const double> probs);

struct GradientStepReport {
  double norm = 0.0;   // global 2-norm before clipping
  double scale = 1.0;  // factor applied to the raw gradient
};

// Tabular autoregressive softmax policy. Unseen contexts behave as
// all-zero logits (uniform distribution).
class PolicyTable {
 public:
  PolicyTable(std::size_t vocab_size, int context_order, double prob_floor = 1e-8);

  std::size_t vocab_size() const { return vocab_size_; }
  int context_order() const { return context_order_; }
  double prob_floor() const { return prob_floor_; }
  const std::map<std::string, std::vector<double>>& logits() const { return logits_; }

  // Copy of the stored logits, or zeros for an unseen context.
  std::vector<double> logits_at(const std::string& ctx) const;
  void set_logits(const std::string& ctx, std::vector<double> values);

  std::vector<double> distribution(const std::string& ctx) const;
  double entropy(const std::string& ctx) const;

  PolicyTable snapshot() const { return *this; }

  // Gradient ascent: logits += lr * scale * grad, where scale shrinks the
  // global norm to `grad_clip_norm` when it is exceeded. A non-finite entry
  // or an overflowing logit rejects the whole update (std::domain_error,
  // table untouched).
  GradientStepReport apply_gradient(const GradientMap& grads, double lr, double grad_clip_norm);

  bool operator==(const PolicyTable&) const = default;

 private:
  std::size_t vocab_size_;
  int context_order_;
  double prob_floor_;
  std::map<std::string, std::vector<double>> logits_;
};

// Tokens and behaviour-policy statistics for one sampled response.
struct Rollout {
  std::string prompt_id;
  std::vector<TokenId> tokens;
  std::vector<TokenStep> steps;
};

// Samples until end-of-sequence or max_len. Tokens are drawn from the
// temperature-adjusted distribution; old_prob and entropy are recorded from
// the untempered one.
Rollout sample_trajectory(const PolicyTable& policy, const Prompt& prompt, TokenId eos,
                          std::size_t max_len, double temperature, Rng& rng);

// Inverse-CDF draw from a normalized distribution.
TokenId sample_index(std::span<const double> probs, Rng& rng);

void to_json(json& j, const PolicyTable& p);
PolicyTable policy_from_json(const json& j);

}  // namespace stapo
