#include "stapo/policy.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace stapo {
namespace {
constexpr int kCheckpointVersion = 1;
}

std::string context_key(std::string_view prompt_id, std::span<const TokenId> generated,
                        int order) {
  std::string key(prompt_id);
  key += '|';
  const std::size_t k = std::min(generated.size(), static_cast<std::size_t>(order));
  for (std::size_t i = generated.size() - k; i < generated.size(); ++i) {
    if (i != generated.size() - k) key += '-';
    key += std::to_string(generated[i]);
  }
  return key;
}

std::vector<double> floored_softmax(std::span<const double> logits, double floor) {
  std::vector<double> p(logits.size());
  if (logits.empty()) return p;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    sum += p[i];
  }
  for (double& v : p) v /= sum;

  bool floored = false;
  for (double& v : p) {
    if (v < floor) {
      v = floor;
      floored = true;
    }
  }
  if (floored) {
    double s = 0.0;
    for (double v : p) s += v;
    for (double& v : p) v /= s;
  }
  return p;
}

double shannon_entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double v : probs) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

PolicyTable::PolicyTable(std::size_t vocab_size, int context_order, double prob_floor)
    : vocab_size_(vocab_size), context_order_(context_order), prob_floor_(prob_floor) {
  if (vocab_size < 2) throw std::invalid_argument("policy vocabulary size must be >= 2");
  if (context_order < 1) throw std::invalid_argument("context_order must be >= 1");
  if (!(prob_floor >= 0.0 && prob_floor * static_cast<double>(vocab_size) < 1.0)) {
    throw std::invalid_argument("prob_floor must be in [0, 1/|V|)");
  }
}

std::vector<double> PolicyTable::logits_at(const std::string& ctx) const {
  auto it = logits_.find(ctx);
  if (it == logits_.end()) return std::vector<double>(vocab_size_, 0.0);
  return it->second;
}

void PolicyTable::set_logits(const std::string& ctx, std::vector<double> values) {
  if (values.size() != vocab_size_) {
    throw std::invalid_argument("logit vector for '" + ctx + "' has wrong length");
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw std::domain_error("non-finite logit for '" + ctx + "'");
  }
  logits_[ctx] = std::move(values);
}

std::vector<double> PolicyTable::distribution(const std::string& ctx) const {
  auto it = logits_.find(ctx);
  if (it == logits_.end()) {
    return std::vector<double>(vocab_size_, 1.0 / static_cast<double>(vocab_size_));
  }
  return floored_softmax(it->second, prob_floor_);
}

double PolicyTable::entropy(const std::string& ctx) const {
  return shannon_entropy(distribution(ctx));
}

GradientStepReport PolicyTable::apply_gradient(const GradientMap& grads, double lr,
                                               double grad_clip_norm) {
  if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be > 0");
  double sq = 0.0;
  for (const auto& [ctx, g] : grads) {
    if (g.size() != vocab_size_) {
      throw std::invalid_argument("gradient for '" + ctx + "' has wrong length");
    }
    for (double v : g) {
      if (!std::isfinite(v)) {
        throw std::domain_error("non-finite gradient entry at context '" + ctx +
                                "'; update rejected");
      }
      sq += v * v;
    }
  }
  GradientStepReport report;
  report.norm = std::sqrt(sq);
  if (report.norm > grad_clip_norm) report.scale = grad_clip_norm / report.norm;

  const double step = lr * report.scale;
  std::vector<std::pair<const std::string*, std::vector<double>>> staged;
  staged.reserve(grads.size());
  for (const auto& [ctx, g] : grads) {
    if (!logits_.contains(ctx) &&
        std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; })) {
      continue;
    }
    std::vector<double> next = logits_at(ctx);
    for (std::size_t i = 0; i < vocab_size_; ++i) {
      next[i] += step * g[i];
      if (!std::isfinite(next[i])) {
        throw std::domain_error("update overflows logits at context '" + ctx +
                                "'; update rejected");
      }
    }
    staged.emplace_back(&ctx, std::move(next));
  }
  for (auto& [ctx, next] : staged) logits_[*ctx] = std::move(next);
  return report;
}

TokenId sample_index(std::span<const double> probs, Rng& rng) {
  const double u = uniform01(rng);
  double cum = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] > 0.0) last_positive = i;
    cum += probs[i];
    if (u < cum) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(last_positive);
}

Rollout sample_trajectory(const PolicyTable& policy, const Prompt& prompt, TokenId eos,
                          std::size_t max_len, double temperature, Rng& rng) {
  if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  Rollout r;
  r.prompt_id = prompt.id;
  std::vector<double> tempered;
  while (r.tokens.size() < max_len) {
    const std::string ctx = context_key(prompt.id, r.tokens, policy.context_order());
    const std::vector<double> probs = policy.distribution(ctx);
    TokenId tok;
    if (temperature == 1.0) {
      tok = sample_index(probs, rng);
    } else {
      tempered.resize(probs.size());
      double s = 0.0;
      for (std::size_t i = 0; i < probs.size(); ++i) {
        tempered[i] = std::pow(probs[i], 1.0 / temperature);
        s += tempered[i];
      }
      for (double& v : tempered) v /= s;
      tok = sample_index(tempered, rng);
    }
    TokenStep step;
    step.token_id = tok;
    step.old_prob = probs[static_cast<std::size_t>(tok)];
    step.cur_prob = step.old_prob;
    step.entropy = shannon_entropy(probs);
    r.tokens.push_back(tok);
    r.steps.push_back(step);
    if (tok == eos) break;
  }
  return r;
}

void to_json(json& j, const PolicyTable& p) {
  json logits = json::object();
  for (const auto& [ctx, v] : p.logits()) logits[ctx] = v;
  j = json{{"version", kCheckpointVersion},
           {"vocab_size", p.vocab_size()},
           {"context_order", p.context_order()},
           {"prob_floor", p.prob_floor()},
           {"logits", std::move(logits)}};
}

PolicyTable policy_from_json(const json& j) {
  const int version = j.at("version").get<int>();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint version mismatch: expected " +
                             std::to_string(kCheckpointVersion) + ", got " +
                             std::to_string(version));
  }
  PolicyTable p(j.at("vocab_size").get<std::size_t>(), j.at("context_order").get<int>(),
                j.at("prob_floor").get<double>());
  for (const auto& [ctx, v] : j.at("logits").items()) {
    p.set_logits(ctx, v.get<std::vector<double>>());
  }
  return p;
}

}  // namespace stapo
