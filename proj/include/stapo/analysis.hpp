#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "stapo/objectives.hpp"
#include "stapo/policy.hpp"
#include "stapo/random.hpp"
#include "stapo/s2t.hpp"

namespace stapo {

// ---------------------------------------------------------------------------
// Gradient-norm theory for a single softmax token.
//
// For a token with target index k and weight w, the logit gradient is
// w * (e_k - pi), whose squared norm decomposes exactly as
//   |w|^2 (1 - 2 pi_k + sum_n pi_n^2).
// The collision probability sum pi^2 is bracketed by exp(-H) (Renyi-2 <=
// Shannon) and 1 - C_V H^2, which yields entropy-based bounds on the norm.
// ---------------------------------------------------------------------------

double collision_probability(std::span<const double> pi);
double renyi2_entropy(std::span<const double> pi);

// (|V| - 1) / (|V| (ln |V|)^2)
double vocab_constant(std::size_t vocab_size);

// Squared logit-gradient norm via the closed-form decomposition.
double grad_norm_sq_exact(double w, std::span<const double> pi, TokenId target);

struct BoundReport {
  double exact_norm_sq = 0.0;
  double lower_bound = 0.0;
  double upper_bound = 0.0;
  double collision_prob = 0.0;
  double renyi2 = 0.0;
  double shannon = 0.0;
  double c_v = 0.0;
};

BoundReport grad_norm_bounds(double w, std::span<const double> pi, TokenId target);

// ---------------------------------------------------------------------------
// Entropy dynamics.
// ---------------------------------------------------------------------------

// One visit of (context, token) carrying the advantage the update applies.
struct EntropyVisit {
  std::string context;
  TokenId token = 0;
  double advantage = 0.0;
};

// Per-context advantage signal: A(y) = sum of advantages over visits of
// (ctx, y); zero for unvisited tokens. Used directly as the logit step.
GradientMap advantage_signal(const PolicyTable& policy, std::span<const EntropyVisit> visits);

// -eta * Cov_{y ~ pi(.|ctx)}(ln pi(y|ctx), A(y)) for every visited context.
std::map<std::string, double> predict_entropy_change(const PolicyTable& policy,
                                                     std::span<const EntropyVisit> visits,
                                                     double eta);

struct ContextUpdate {
  std::string context;
  double entropy = 0.0;        // before the update
  std::vector<double> delta;   // logit change
};

// Contexts whose logits differ between two tables, with pre-update entropy.
std::vector<ContextUpdate> logit_deltas(const PolicyTable& before, const PolicyTable& after);

struct PotentialBucket {
  std::size_t count = 0;
  double mean_delta_norm = 0.0;  // mean L2 norm of the logit change
};

struct LearningPotentialReport {
  PotentialBucket low_entropy;
  PotentialBucket high_entropy;
};

// Descriptive only: partitions updated contexts by entropy < tau_h.
LearningPotentialReport learning_potential_report(std::span<const ContextUpdate> updates,
                                                  double tau_h);

// ---------------------------------------------------------------------------
// Finite-difference oracle for surrogate_gradient.
// ---------------------------------------------------------------------------

struct FiniteDifferenceResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t compared = 0;
  std::size_t skipped = 0;  // both |fd| and |analytic| below 1e-10
  bool no_update = false;   // objective signalled no-update
};

FiniteDifferenceResult finite_difference_check(Objective o, const PolicyTable& policy,
                                               const SampleBatch& batch,
                                               std::span<const std::uint8_t> masks,
                                               const ClipConfig& clip, double h);

// ---------------------------------------------------------------------------
// Random case generators shared by the verification suite and tests.
// ---------------------------------------------------------------------------

// Symmetric Dirichlet draw, computed in log space so tiny concentrations
// stay normalizable.
std::vector<double> random_dirichlet(Rng& rng, std::size_t size, double concentration);

// Dirichlet with concentration log-uniform in [0.01, 100].
std::vector<double> random_distribution(Rng& rng, std::size_t size);

struct RandomBatch {
  PolicyTable policy;
  SampleBatch batch;
  std::vector<std::uint8_t> masks;
};

// Small batch over a few contexts with moderate logits and ratios kept away
// from the clip boundaries, suitable for finite differencing.
RandomBatch make_random_batch(Rng& rng, bool with_masks);

// A pair of unclipped tokens with equal |A| and equal old probability, one
// in the (p < tau_p, H < tau_h) cell and one in (p >= tau_p, H >= tau_h).
struct TokenCase {
  std::vector<double> pi;
  TokenId target = 0;
  double old_prob = 1.0;
  double advantage = 0.0;
};

struct PhasePair {
  TokenCase spurious;
  TokenCase confident;
};

PhasePair make_phase_pair(Rng& rng, double tau_p, double tau_h);

// ---------------------------------------------------------------------------
// Verification suite.
// ---------------------------------------------------------------------------

struct CheckResult {
  std::string check_name;
  std::size_t cases = 0;
  std::size_t failures = 0;
  double worst_margin = 0.0;  // negative means the tolerance was exceeded
};

struct SuiteOptions {
  std::uint64_t seed = 0;
  std::size_t bound_cases = 100000;
  std::size_t fd_batches = 100;
  std::size_t lemma_cases = 50;
  std::size_t mask_cases = 1000000;
  std::size_t phase_pairs = 100;
};

// Least-squares slope of log(error) against log(eta) for the entropy-change
// prediction; also returns the mean absolute error per eta.
struct EntropyScaling {
  std::vector<double> etas;
  std::vector<double> mean_errors;
  double slope = 0.0;
};

EntropyScaling entropy_prediction_scaling(Rng& rng, std::size_t cases,
                                          std::span<const double> etas);

std::vector<CheckResult> run_verification_suite(const SuiteOptions& options);

void to_json(json& j, const CheckResult& r);

}  // namespace stapo
