#include "stapo/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>

namespace stapo {

double collision_probability(std::span<const double> pi) {
  double s = 0.0;
  for (double v : pi) s += v * v;
  return s;
}

double renyi2_entropy(std::span<const double> pi) { return -std::log(collision_probability(pi)); }

double vocab_constant(std::size_t vocab_size) {
  if (vocab_size < 2) throw std::invalid_argument("vocab_constant needs |V| >= 2");
  const auto v = static_cast<double>(vocab_size);
  const double l = std::log(v);
  return (v - 1.0) / (v * l * l);
}

double grad_norm_sq_exact(double w, std::span<const double> pi, TokenId target) {
  // 1 - 2 pi_k + sum pi^2, grouped as (1 - pi_k)^2 + sum_{n != k} pi_n^2 so a
  // near-one-hot target does not cancel catastrophically.
  const auto k = static_cast<std::size_t>(target);
  double others = 0.0;
  for (std::size_t n = 0; n < pi.size(); ++n) {
    if (n != k) others += pi[n] * pi[n];
  }
  const double miss = 1.0 - pi[k];
  return w * w * (miss * miss + others);
}

BoundReport grad_norm_bounds(double w, std::span<const double> pi, TokenId target) {
  BoundReport r;
  const double pk = pi[static_cast<std::size_t>(target)];
  const double w2 = w * w;
  r.collision_prob = collision_probability(pi);
  r.renyi2 = -std::log(r.collision_prob);
  r.shannon = shannon_entropy(pi);
  r.c_v = vocab_constant(pi.size());
  r.exact_norm_sq = grad_norm_sq_exact(w, pi, target);
  r.lower_bound = w2 * (1.0 - 2.0 * pk + std::exp(-r.shannon));
  r.upper_bound = w2 * (2.0 - 2.0 * pk - r.c_v * r.shannon * r.shannon);
  return r;
}

GradientMap advantage_signal(const PolicyTable& policy, std::span<const EntropyVisit> visits) {
  GradientMap signal;
  for (const EntropyVisit& v : visits) {
    auto [it, inserted] = signal.try_emplace(v.context, policy.vocab_size(), 0.0);
    it->second.at(static_cast<std::size_t>(v.token)) += v.advantage;
  }
  return signal;
}

std::map<std::string, double> predict_entropy_change(const PolicyTable& policy,
                                                     std::span<const EntropyVisit> visits,
                                                     double eta) {
  if (!(eta > 0.0)) throw std::invalid_argument("eta must be > 0");
  std::map<std::string, double> out;
  for (const auto& [ctx, adv] : advantage_signal(policy, visits)) {
    const std::vector<double> pi = policy.distribution(ctx);
    double e_log = 0.0, e_adv = 0.0, e_cross = 0.0;
    for (std::size_t y = 0; y < pi.size(); ++y) {
      const double lp = std::log(pi[y]);
      e_log += pi[y] * lp;
      e_adv += pi[y] * adv[y];
      e_cross += pi[y] * lp * adv[y];
    }
    out[ctx] = -eta * (e_cross - e_log * e_adv);
  }
  return out;
}

std::vector<ContextUpdate> logit_deltas(const PolicyTable& before, const PolicyTable& after) {
  std::vector<ContextUpdate> out;
  for (const auto& [ctx, logits] : after.logits()) {
    const std::vector<double> prev = before.logits_at(ctx);
    ContextUpdate u;
    u.context = ctx;
    u.delta.resize(logits.size());
    bool changed = false;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      u.delta[i] = logits[i] - prev[i];
      changed = changed || u.delta[i] != 0.0;
    }
    if (!changed) continue;
    u.entropy = before.entropy(ctx);
    out.push_back(std::move(u));
  }
  return out;
}

LearningPotentialReport learning_potential_report(std::span<const ContextUpdate> updates,
                                                  double tau_h) {
  LearningPotentialReport r;
  for (const ContextUpdate& u : updates) {
    PotentialBucket& b = u.entropy < tau_h ? r.low_entropy : r.high_entropy;
    double sq = 0.0;
    for (double d : u.delta) sq += d * d;
    ++b.count;
    b.mean_delta_norm += std::sqrt(sq);
  }
  for (PotentialBucket* b : {&r.low_entropy, &r.high_entropy}) {
    if (b->count > 0) b->mean_delta_norm /= static_cast<double>(b->count);
  }
  return r;
}

FiniteDifferenceResult finite_difference_check(Objective o, const PolicyTable& policy,
                                               const SampleBatch& batch,
                                               std::span<const std::uint8_t> masks,
                                               const ClipConfig& clip, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite difference step must be > 0");
  FiniteDifferenceResult res;
  const auto analytic = surrogate_gradient(o, policy, batch, masks, clip);
  if (!analytic) {
    res.no_update = true;
    return res;
  }

  std::set<std::string> contexts;
  for (const TokenSample& t : batch.tokens) contexts.insert(t.context);

  PolicyTable scratch = policy.snapshot();
  const std::size_t vocab = policy.vocab_size();
  for (const std::string& ctx : contexts) {
    const std::vector<double> base = policy.logits_at(ctx);
    const auto found = analytic->per_context.find(ctx);
    for (std::size_t n = 0; n < vocab; ++n) {
      std::vector<double> shifted = base;
      shifted[n] = base[n] + h;
      scratch.set_logits(ctx, shifted);
      const double plus = surrogate_value(o, scratch, batch, masks, clip).value();
      shifted[n] = base[n] - h;
      scratch.set_logits(ctx, shifted);
      const double minus = surrogate_value(o, scratch, batch, masks, clip).value();
      const double fd = (plus - minus) / (2.0 * h);
      const double an = found == analytic->per_context.end() ? 0.0 : found->second[n];

      const double abs_err = std::abs(fd - an);
      res.max_abs_error = std::max(res.max_abs_error, abs_err);
      if (std::abs(fd) < 1e-10 && std::abs(an) < 1e-10) {
        ++res.skipped;
        continue;
      }
      ++res.compared;
      res.max_rel_error =
          std::max(res.max_rel_error, abs_err / std::max(std::abs(fd), std::abs(an)));
    }
    scratch.set_logits(ctx, base);
  }
  return res;
}

std::vector<double> random_dirichlet(Rng& rng, std::size_t size, double concentration) {
  // Gamma(a) = Gamma(a + 1) * U^(1/a), taken in logs.
  std::gamma_distribution<double> gamma(concentration + 1.0, 1.0);
  std::vector<double> logs(size);
  for (double& l : logs) {
    const double u = 1.0 - uniform01(rng);  // (0, 1]
    l = std::log(gamma(rng)) + std::log(u) / concentration;
  }
  const double mx = *std::max_element(logs.begin(), logs.end());
  double sum = 0.0;
  for (double& l : logs) {
    l = std::exp(l - mx);
    sum += l;
  }
  for (double& l : logs) l /= sum;
  return logs;
}

std::vector<double> random_distribution(Rng& rng, std::size_t size) {
  const double log_alpha = std::log(0.01) + uniform01(rng) * (std::log(100.0) - std::log(0.01));
  return random_dirichlet(rng, size, std::exp(log_alpha));
}

namespace {

double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

// Ratio in [0.5, 2] at least 0.01 away from every clip boundary used by the
// default configuration (0.8, 1.2, 1.28).
double ratio_away_from_kinks(Rng& rng) {
  while (true) {
    const double r = uniform(rng, 0.5, 2.0);
    if (std::abs(r - 0.8) > 0.01 && std::abs(r - 1.2) > 0.01 && std::abs(r - 1.28) > 0.01) {
      return r;
    }
  }
}

}  // namespace

RandomBatch make_random_batch(Rng& rng, bool with_masks) {
  const std::size_t vocab = 3 + uniform_index(rng, 14);
  const std::size_t n_ctx = 1 + uniform_index(rng, 4);
  RandomBatch rb{PolicyTable(vocab, 2), {}, {}};
  std::vector<std::string> contexts;
  for (std::size_t c = 0; c < n_ctx; ++c) {
    contexts.push_back("r|" + std::to_string(c));
    std::vector<double> logits(vocab);
    for (double& l : logits) l = uniform(rng, -2.0, 2.0);
    rb.policy.set_logits(contexts.back(), logits);
  }

  const std::size_t n_seq = 2 + uniform_index(rng, 5);
  for (std::size_t s = 0; s < n_seq; ++s) {
    const std::size_t len = 1 + uniform_index(rng, 5);
    const double adv = uniform(rng, -2.0, 2.0);
    rb.batch.sequence_lengths.push_back(len);
    for (std::size_t t = 0; t < len; ++t) {
      TokenSample ts;
      ts.context = contexts[uniform_index(rng, n_ctx)];
      ts.target = static_cast<TokenId>(uniform_index(rng, vocab));
      ts.advantage = adv;
      ts.sequence = s;
      const double cur = rb.policy.distribution(ts.context)[static_cast<std::size_t>(ts.target)];
      double ratio = ratio_away_from_kinks(rng);
      while (cur / ratio > 1.0) ratio = ratio_away_from_kinks(rng);
      ts.old_prob = cur / ratio;
      rb.batch.tokens.push_back(std::move(ts));
      rb.masks.push_back(with_masks && uniform01(rng) < 0.25 ? 0 : 1);
    }
  }
  if (with_masks && std::none_of(rb.masks.begin(), rb.masks.end(), [](auto m) { return m; })) {
    rb.masks.front() = 1;
  }
  return rb;
}

PhasePair make_phase_pair(Rng& rng, double tau_p, double tau_h) {
  if (!(tau_p > 0.0 && tau_p < 0.01)) throw std::invalid_argument("make_phase_pair: tau_p");
  if (!(tau_h > 0.3 && tau_h < std::log(50.0))) {
    throw std::invalid_argument("make_phase_pair: tau_h must lie in (0.3, ln 50)");
  }
  const std::size_t vocab = 50 + uniform_index(rng, 463);
  const double old_prob = tau_p * uniform(rng, 0.95, 1.05);
  const double advantage = uniform(rng, 0.1, 3.0);
  PhasePair pair;

  // Low probability target next to one dominant token: low entropy.
  {
    TokenCase& c = pair.spurious;
    c.old_prob = old_prob;
    c.advantage = advantage;
    c.target = static_cast<TokenId>(uniform_index(rng, vocab));
    auto dominant = static_cast<TokenId>(uniform_index(rng, vocab - 1));
    if (dominant >= c.target) ++dominant;
    const double p = tau_p * uniform(rng, 0.9, 0.999);
    const double rest = uniform(rng, 0.0, 0.02);
    std::vector<double> spread = random_dirichlet(rng, vocab - 2, 1.0);
    c.pi.assign(vocab, 0.0);
    std::size_t j = 0;
    for (std::size_t n = 0; n < vocab; ++n) {
      if (n == static_cast<std::size_t>(c.target) || n == static_cast<std::size_t>(dominant)) {
        continue;
      }
      c.pi[n] = rest * spread[j++];
    }
    c.pi[static_cast<std::size_t>(c.target)] = p;
    c.pi[static_cast<std::size_t>(dominant)] = 1.0 - p - rest;
  }

  // Target at or just above tau_p, remaining mass near-uniform: high entropy.
  {
    TokenCase& c = pair.confident;
    c.old_prob = old_prob;
    c.advantage = advantage;
    c.target = static_cast<TokenId>(uniform_index(rng, vocab));
    const double p = tau_p * uniform(rng, 1.0, 1.1);
    std::vector<double> spread = random_dirichlet(rng, vocab - 1, 100.0);
    c.pi.assign(vocab, 0.0);
    std::size_t j = 0;
    for (std::size_t n = 0; n < vocab; ++n) {
      if (n == static_cast<std::size_t>(c.target)) continue;
      c.pi[n] = (1.0 - p) * spread[j++];
    }
    c.pi[static_cast<std::size_t>(c.target)] = p;
  }
  return pair;
}

EntropyScaling entropy_prediction_scaling(Rng& rng, std::size_t cases,
                                          std::span<const double> etas) {
  EntropyScaling out;
  out.etas.assign(etas.begin(), etas.end());
  out.mean_errors.assign(etas.size(), 0.0);
  const double no_clip = std::numeric_limits<double>::infinity();

  for (std::size_t c = 0; c < cases; ++c) {
    const std::size_t vocab = 3 + uniform_index(rng, 10);
    const std::size_t n_ctx = 1 + uniform_index(rng, 3);
    PolicyTable policy(vocab, 1);
    std::vector<std::string> contexts;
    for (std::size_t k = 0; k < n_ctx; ++k) {
      contexts.push_back("e|" + std::to_string(k));
      std::vector<double> logits(vocab);
      for (double& l : logits) l = uniform(rng, -2.0, 2.0);
      policy.set_logits(contexts.back(), logits);
    }
    std::vector<EntropyVisit> visits(1 + uniform_index(rng, 12));
    for (EntropyVisit& v : visits) {
      v.context = contexts[uniform_index(rng, n_ctx)];
      v.token = static_cast<TokenId>(uniform_index(rng, vocab));
      v.advantage = uniform(rng, -1.0, 1.0);
    }
    const GradientMap signal = advantage_signal(policy, visits);

    for (std::size_t e = 0; e < etas.size(); ++e) {
      const auto predicted = predict_entropy_change(policy, visits, etas[e]);
      PolicyTable stepped = policy.snapshot();
      stepped.apply_gradient(signal, etas[e], no_clip);
      double err = 0.0;
      for (const auto& [ctx, dh] : predicted) {
        err += std::abs((stepped.entropy(ctx) - policy.entropy(ctx)) - dh);
      }
      out.mean_errors[e] += err / static_cast<double>(cases);
    }
  }

  const auto n = static_cast<double>(etas.size());
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (std::size_t e = 0; e < etas.size(); ++e) {
    const double x = std::log(etas[e]);
    const double y = std::log(out.mean_errors[e]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  out.slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  return out;
}

namespace {

struct MarginTracker {
  CheckResult r;
  explicit MarginTracker(std::string name) {
    r.check_name = std::move(name);
    r.worst_margin = std::numeric_limits<double>::infinity();
  }
  void record(double margin) {
    ++r.cases;
    if (margin < 0.0 || std::isnan(margin)) ++r.failures;
    if (std::isnan(margin)) margin = -std::numeric_limits<double>::infinity();
    r.worst_margin = std::min(r.worst_margin, margin);
  }
};

}  // namespace

std::vector<CheckResult> run_verification_suite(const SuiteOptions& options) {
  std::vector<CheckResult> results;

  // Norm decomposition, bound sandwich and the collision inequalities share
  // one stream of random (w, pi, k) cases.
  {
    Rng rng = make_stream(options.seed, {1});
    MarginTracker decomp("gradient_norm_decomposition");
    MarginTracker sandwich("gradient_norm_bounds");
    MarginTracker renyi("renyi2_le_shannon");
    MarginTracker collision("collision_upper_bound");
    for (std::size_t c = 0; c < options.bound_cases; ++c) {
      const std::size_t vocab = 2 + uniform_index(rng, 511);
      const std::vector<double> pi = random_distribution(rng, vocab);
      const auto k = static_cast<TokenId>(uniform_index(rng, vocab));
      const double w = uniform(rng, -3.0, 3.0);

      const BoundReport b = grad_norm_bounds(w, pi, k);
      double componentwise = 0.0;
      for (std::size_t n = 0; n < vocab; ++n) {
        const double g = w * ((n == static_cast<std::size_t>(k) ? 1.0 : 0.0) - pi[n]);
        componentwise += g * g;
      }
      const double denom = std::max(std::abs(componentwise), 1e-300);
      decomp.record(1e-12 - std::abs(b.exact_norm_sq - componentwise) / denom);
      sandwich.record(std::min(b.exact_norm_sq - b.lower_bound, b.upper_bound - b.exact_norm_sq) +
                      1e-9);
      renyi.record(b.shannon - b.renyi2 + 1e-12);
      collision.record((1.0 - b.c_v * b.shannon * b.shannon) - b.collision_prob + 1e-12);
    }
    // The uniform |V| = 4 case is tight on both sides.
    const std::vector<double> uniform4(4, 0.25);
    const BoundReport u = grad_norm_bounds(1.0, uniform4, 0);
    sandwich.record(1e-12 - std::max({std::abs(u.lower_bound - 0.75),
                                      std::abs(u.exact_norm_sq - 0.75),
                                      std::abs(u.upper_bound - 0.75)}));
    for (auto* t : {&decomp, &sandwich, &renyi, &collision}) results.push_back(t->r);
  }

  {
    Rng rng = make_stream(options.seed, {2});
    MarginTracker fd("finite_difference_gradient");
    const ClipConfig clip;
    for (std::size_t b = 0; b < options.fd_batches; ++b) {
      for (Objective o : {Objective::GRPO, Objective::DAPO, Objective::STAPO}) {
        for (bool masked : {false, true}) {
          if (masked && o != Objective::STAPO) continue;
          const RandomBatch rb = make_random_batch(rng, masked);
          const auto res = finite_difference_check(o, rb.policy, rb.batch, rb.masks, clip, 1e-5);
          fd.record(1e-6 - res.max_rel_error);
        }
      }
    }
    results.push_back(fd.r);
  }

  {
    MarginTracker dead("clip_deadzone");
    const ClipConfig clip;
    PolicyTable policy(4, 1);
    policy.set_logits("d|", {0.3, -0.2, 0.1, 0.0});
    const auto pi = policy.distribution("d|");
    // (ratio, advantage) pairs that sit beyond the clip range.
    const std::vector<std::pair<double, double>> cases = {
        {2.0, 1.0}, {1.3, 0.5}, {1.5, 2.0}, {0.7, -1.0}, {0.5, -0.3}, {0.79, -2.0}};
    for (Objective o : {Objective::DAPO, Objective::STAPO}) {
      for (const auto& [ratio, adv] : cases) {
        SampleBatch batch;
        batch.sequence_lengths = {1};
        batch.tokens.push_back(TokenSample{"d|", 1, pi[1] / ratio, adv, 0});
        const std::vector<std::uint8_t> masks{1};
        const auto g = surrogate_gradient(o, policy, batch, masks, clip);
        double worst = 0.0;
        for (double v : g->per_context.at("d|")) worst = std::max(worst, std::abs(v));
        dead.record(worst == 0.0 && g->audit[0].weight == 0.0 ? 0.0 : -worst - 1.0);
      }
    }
    results.push_back(dead.r);
  }

  {
    Rng rng = make_stream(options.seed, {3});
    MarginTracker lemma("entropy_change_scaling");
    const std::vector<double> etas{1e-2, 5e-3, 2.5e-3, 1.25e-3};
    const EntropyScaling s = entropy_prediction_scaling(rng, options.lemma_cases, etas);
    lemma.record(std::min(s.slope - 1.7, 2.3 - s.slope));
    results.push_back(lemma.r);
  }

  {
    Rng rng = make_stream(options.seed, {4});
    MarginTracker mask("s2t_mask_phase_consistency");
    S2TConfig cfg;
    cfg.resolved_tau_h = 1.0;
    std::size_t failures = 0;
    for (std::size_t c = 0; c < options.mask_cases; ++c) {
      const TokenView tv{uniform01(rng) * 0.004, uniform01(rng) * 2.0};
      const double adv = uniform(rng, -2.0, 2.0);
      const bool masked = s2t_mask(tv, adv, cfg) == 0;
      if (masked != classify_phase(tv, adv, cfg).spurious()) ++failures;
    }
    mask.r.cases = options.mask_cases;
    mask.r.failures = failures;
    mask.r.worst_margin = failures == 0 ? 0.0 : -static_cast<double>(failures);
    results.push_back(mask.r);
  }

  {
    Rng rng = make_stream(options.seed, {5});
    MarginTracker order("phase_gradient_ordering");
    const double tau_p = 0.002;
    const double tau_h = 1.0;
    for (std::size_t c = 0; c < options.phase_pairs; ++c) {
      const PhasePair pair = make_phase_pair(rng, tau_p, tau_h);
      const auto w = [](const TokenCase& t) {
        return t.pi[static_cast<std::size_t>(t.target)] / t.old_prob * t.advantage;
      };
      const double low = grad_norm_sq_exact(w(pair.spurious), pair.spurious.pi, pair.spurious.target);
      const double high =
          grad_norm_sq_exact(w(pair.confident), pair.confident.pi, pair.confident.target);
      order.record(std::sqrt(low) - std::sqrt(high) > 0.0 ? std::sqrt(low) - std::sqrt(high)
                                                          : -1.0);
    }
    results.push_back(order.r);
  }
  return results;
}

void to_json(json& j, const CheckResult& r) {
  j = json{{"check_name", r.check_name},
           {"cases", r.cases},
           {"failures", r.failures},
           {"worst_margin", r.worst_margin}};
}

}  // namespace stapo
