#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "stapo/core.hpp"
#include "stapo/objectives.hpp"
#include "stapo/policy.hpp"
#include "stapo/s2t.hpp"

namespace stapo {

struct TrainConfig {
  Objective objective = Objective::STAPO;
  std::size_t group_size = 8;
  std::size_t batch_prompts = 32;
  std::size_t mini_batches_per_step = 4;
  double learning_rate = 300.0;  // token-mean gradients on a tabular policy are tiny
  std::size_t warmup_steps = 10;
  std::size_t max_response_len = 32;
  double grad_clip_norm = 1.0;
  double temperature = 1.0;
  int context_order = 2;
  double prob_floor = 1e-8;
  double sigma_min = kDefaultSigmaMin;
  ClipConfig clip;
  S2TConfig s2t;
  std::uint64_t seed = 0;
  std::size_t total_steps = 200;
  std::size_t threads = 1;

  // Throws std::invalid_argument describing the first bad field.
  void validate() const;
  // Learning rate after linear warmup for a 0-based step index.
  double learning_rate_at(std::size_t step) const;
};

struct CellDigest {
  std::size_t count = 0;
  double mean_grad_norm = 0.0;
  double mean_entropy = 0.0;
};

struct StepMetrics {
  std::size_t step = 0;
  double mean_reward = 0.0;
  double mean_entropy = 0.0;
  double spurious_ratio = 0.0;
  std::size_t masked_count = 0;
  std::size_t total_tokens = 0;
  double surrogate_value = 0.0;  // mean over applied mini-batches
  double grad_norm = 0.0;        // mean pre-clip global norm over applied mini-batches
  double learning_rate = 0.0;
  double tau_h = 0.0;            // mean resolved entropy threshold
  std::size_t skipped_updates = 0;
  std::array<std::optional<CellDigest>, PhaseCell::kCount> cells;
};

void to_json(json& j, const StepMetrics& m);
StepMetrics metrics_from_json(const json& j);

// Token id -> frequency, dense over the vocabulary.
using TokenCounts = std::vector<std::uint64_t>;

// One group as seen by its mini-batch: token steps refreshed under the
// current policy with masks and clip states, plus per-token gradient norms.
struct TraceRecord {
  std::size_t step = 0;
  std::size_t mini_batch = 0;
  double resolved_tau_h = 0.0;
  double tau_p = 0.0;
  Group group;
  std::vector<std::vector<double>> grad_norms;  // [trajectory][position]
};

void to_json(json& j, const TraceRecord& r);
TraceRecord trace_from_json(const json& j);

struct TrainHooks {
  std::function<void(const StepMetrics&)> on_step;
  // Called for every group of a traced step.
  std::function<void(const TraceRecord&)> on_trace;
  std::size_t trace_every = 0;  // 0 disables tracing
  std::function<void(const std::string&)> on_event;
  // Called at the end of every step with the updated policy and the number
  // of completed steps; used for resumable checkpointing.
  std::function<void(const PolicyTable&, std::size_t)> on_checkpoint;
};

struct TrainResult {
  PolicyTable policy;
  std::vector<StepMetrics> metrics;
  TokenCounts masked_tokens;
  TokenCounts kept_tokens;
  TokenCounts all_tokens;
};

// Raised when an update produces a non-finite gradient. Carries the last
// good policy so the caller can write a diagnostic checkpoint.
class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, PolicyTable policy, std::size_t step)
      : std::runtime_error(what), policy_(std::move(policy)), step_(step) {}
  const PolicyTable& policy() const { return policy_; }
  std::size_t step() const { return step_; }

 private:
  PolicyTable policy_;
  std::size_t step_;
};

// Rollout -> verify -> advantages -> per-mini-batch refresh, S2T masking and
// clipped-objective ascent. Deterministic for a fixed config, independent of
// the worker count. `initial` and `start_step` resume a previous run.
TrainResult train(const TrainConfig& config, const Vocabulary& vocab,
                  std::span<const Prompt> prompts, const TrainHooks& hooks = {},
                  std::optional<PolicyTable> initial = std::nullopt, std::size_t start_step = 0);

struct Checkpoint {
  PolicyTable policy;
  std::size_t step = 0;
};

void save_checkpoint(const PolicyTable& policy, std::size_t step,
                     const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace stapo
