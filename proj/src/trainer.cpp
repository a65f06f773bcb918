#include "stapo/trainer.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <thread>

#include "stapo/random.hpp"
#include "stapo/tasks.hpp"

namespace stapo {
namespace {

constexpr std::uint64_t kSelectTag = 0x73656c656374ULL;
constexpr std::uint64_t kRolloutTag = 0x726f6c6c6f7574ULL;

std::vector<std::size_t> select_prompts(std::size_t available, std::size_t wanted, Rng& rng) {
  std::vector<std::size_t> out;
  out.reserve(wanted);
  if (available >= wanted) {
    std::vector<std::size_t> idx(available);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < wanted; ++i) {
      const std::size_t j = i + uniform_index(rng, available - i);
      std::swap(idx[i], idx[j]);
      out.push_back(idx[i]);
    }
  } else {
    for (std::size_t i = 0; i < wanted; ++i) out.push_back(uniform_index(rng, available));
  }
  return out;
}

// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is owned
// by exactly one worker, so results written by index are order-independent.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> workers;
  workers.reserve(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    workers.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += threads) fn(i);
    });
  }
}

struct CellAccumulator {
  std::size_t count = 0;
  double grad_norm = 0.0;
  double entropy = 0.0;
};

}  // namespace

void TrainConfig::validate() const {
  if (group_size < 2) throw std::invalid_argument("group_size must be >= 2");
  if (batch_prompts < 1) throw std::invalid_argument("batch_prompts must be >= 1");
  if (mini_batches_per_step < 1) throw std::invalid_argument("mini_batches_per_step must be >= 1");
  if (batch_prompts % mini_batches_per_step != 0) {
    throw std::invalid_argument("batch_prompts must be divisible by mini_batches_per_step");
  }
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be > 0");
  if (max_response_len < 1) throw std::invalid_argument("max_response_len must be >= 1");
  if (!(grad_clip_norm > 0.0)) throw std::invalid_argument("grad_clip_norm must be > 0");
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  if (context_order < 1) throw std::invalid_argument("context_order must be >= 1");
  if (!(sigma_min >= 0.0)) throw std::invalid_argument("sigma_min must be >= 0");
  if (threads < 1) throw std::invalid_argument("threads must be >= 1");
  clip.validate();
  s2t.validate();
}

double TrainConfig::learning_rate_at(std::size_t step) const {
  if (warmup_steps == 0 || step + 1 >= warmup_steps) return learning_rate;
  return learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
}

TrainResult train(const TrainConfig& config, const Vocabulary& vocab,
                  std::span<const Prompt> prompts, const TrainHooks& hooks,
                  std::optional<PolicyTable> initial, std::size_t start_step) {
  config.validate();
  if (prompts.empty()) throw std::invalid_argument("train: prompt set is empty");
  if (const auto v = vocab.violations(); !v.empty()) {
    throw std::invalid_argument("train: invalid vocabulary: " + v.front());
  }

  TrainResult result{initial ? std::move(*initial)
                             : PolicyTable(vocab.size(), config.context_order, config.prob_floor),
                     {},
                     TokenCounts(vocab.size(), 0),
                     TokenCounts(vocab.size(), 0),
                     TokenCounts(vocab.size(), 0)};
  PolicyTable& policy = result.policy;
  if (policy.vocab_size() != vocab.size()) {
    throw std::invalid_argument("train: initial policy vocabulary size mismatch");
  }

  const std::size_t groups_per_mb = config.batch_prompts / config.mini_batches_per_step;
  const int order = policy.context_order();

  for (std::size_t step = start_step; step < config.total_steps; ++step) {
    const double lr = config.learning_rate_at(step);
    const PolicyTable behaviour = policy.snapshot();

    Rng select_rng = make_stream(config.seed, {step, kSelectTag});
    const auto chosen = select_prompts(prompts.size(), config.batch_prompts, select_rng);

    std::vector<Group> groups(chosen.size());
    parallel_for(chosen.size(), config.threads, [&](std::size_t slot) {
      const Prompt& prompt = prompts[chosen[slot]];
      std::vector<Rollout> rollouts;
      std::vector<double> rewards;
      for (std::size_t g = 0; g < config.group_size; ++g) {
        Rng rng = make_stream(config.seed, {step, slot, g, kRolloutTag});
        rollouts.push_back(sample_trajectory(behaviour, prompt, vocab.end_of_sequence,
                                             config.max_response_len, config.temperature, rng));
        rewards.push_back(verify(prompt, rollouts.back().tokens, vocab));
      }
      groups[slot] = assemble_group(prompt, std::move(rollouts), rewards, config.sigma_min);
    });

    StepMetrics m;
    m.step = step;
    m.learning_rate = lr;
    {
      double reward_sum = 0.0;
      std::size_t n = 0;
      for (const Group& g : groups) {
        for (const Trajectory& t : g.trajectories) {
          reward_sum += t.reward;
          ++n;
        }
      }
      m.mean_reward = reward_sum / static_cast<double>(n);
    }

    std::array<CellAccumulator, PhaseCell::kCount> cells{};
    double entropy_sum = 0.0;
    double tau_sum = 0.0;
    std::size_t applied = 0;
    const bool tracing = hooks.on_trace && hooks.trace_every > 0 && step % hooks.trace_every == 0;

    for (std::size_t mb = 0; mb < config.mini_batches_per_step; ++mb) {
      const std::span<const Group> chunk(groups.data() + mb * groups_per_mb, groups_per_mb);
      const SampleBatch batch = flatten_groups(chunk, order);
      const std::size_t n = batch.tokens.size();

      std::vector<double> cur(n), ent(n);
      for (std::size_t i = 0; i < n; ++i) {
        const TokenSample& t = batch.tokens[i];
        const std::vector<double> pi = policy.distribution(t.context);
        cur[i] = pi[static_cast<std::size_t>(t.target)];
        ent[i] = shannon_entropy(pi);
        entropy_sum += ent[i];
      }

      S2TConfig s2t = config.s2t;
      s2t.resolved_tau_h = resolve_tau_h(ent, s2t.entropy_quantile);
      tau_sum += *s2t.resolved_tau_h;

      std::vector<std::uint8_t> masks(n, 1);
      if (config.objective == Objective::STAPO) {
        for (std::size_t i = 0; i < n; ++i) {
          masks[i] = s2t_mask({cur[i], ent[i]}, batch.tokens[i].advantage, s2t);
        }
      }
      for (std::size_t i = 0; i < n; ++i) {
        const auto tok = static_cast<std::size_t>(batch.tokens[i].target);
        ++result.all_tokens[tok];
        if (masks[i]) {
          ++result.kept_tokens[tok];
        } else {
          ++result.masked_tokens[tok];
          ++m.masked_count;
        }
      }
      m.total_tokens += n;

      const auto grad = surrogate_gradient(config.objective, policy, batch, masks, config.clip);

      for (std::size_t i = 0; i < n; ++i) {
        const PhaseCell cell = classify_phase({cur[i], ent[i]}, batch.tokens[i].advantage, s2t);
        CellAccumulator& c = cells[cell.index()];
        ++c.count;
        c.entropy += ent[i];
        if (grad) c.grad_norm += grad->audit[i].norm();
      }

      if (tracing) {
        std::size_t i = 0;
        for (std::size_t gi = 0; gi < chunk.size(); ++gi) {
          TraceRecord rec;
          rec.step = step;
          rec.mini_batch = mb;
          rec.resolved_tau_h = *s2t.resolved_tau_h;
          rec.tau_p = s2t.tau_p;
          rec.group = chunk[gi];
          for (Trajectory& t : rec.group.trajectories) {
            std::vector<double> norms;
            for (TokenStep& st : t.steps) {
              st.cur_prob = cur[i];
              st.entropy = ent[i];
              st.mask = masks[i];
              const ClipConfig eff = config.clip.effective_for(config.objective);
              const RatioClip rc = token_ratio_and_clipstate(st.old_prob, cur[i], t.advantage, eff);
              st.ratio = rc.ratio;
              st.clip_state = rc.state;
              norms.push_back(grad ? grad->audit[i].norm() : 0.0);
              ++i;
            }
            rec.grad_norms.push_back(std::move(norms));
          }
          hooks.on_trace(rec);
        }
      }

      if (!grad) {
        ++m.skipped_updates;
        if (hooks.on_event) {
          hooks.on_event("step " + std::to_string(step) + " mini-batch " + std::to_string(mb) +
                         ": every token masked, update skipped");
        }
        continue;
      }

      try {
        const GradientStepReport rep = policy.apply_gradient(grad->per_context, lr,
                                                             config.grad_clip_norm);
        m.grad_norm += rep.norm;
      } catch (const std::domain_error& e) {
        throw TrainingAborted(std::string("step ") + std::to_string(step) + ": " + e.what(),
                              policy, step);
      }
      m.surrogate_value += grad->value;
      ++applied;
    }

    if (applied > 0) {
      m.surrogate_value /= static_cast<double>(applied);
      m.grad_norm /= static_cast<double>(applied);
    }
    m.mean_entropy = m.total_tokens ? entropy_sum / static_cast<double>(m.total_tokens) : 0.0;
    m.spurious_ratio = m.total_tokens ? static_cast<double>(m.masked_count) /
                                            static_cast<double>(m.total_tokens)
                                      : 0.0;
    m.tau_h = tau_sum / static_cast<double>(config.mini_batches_per_step);
    for (std::size_t c = 0; c < PhaseCell::kCount; ++c) {
      if (cells[c].count == 0) continue;
      const auto cnt = static_cast<double>(cells[c].count);
      m.cells[c] = CellDigest{cells[c].count, cells[c].grad_norm / cnt, cells[c].entropy / cnt};
    }

    if (hooks.on_step) hooks.on_step(m);
    if (hooks.on_checkpoint) hooks.on_checkpoint(policy, step + 1);
    result.metrics.push_back(std::move(m));
  }
  return result;
}

void to_json(json& j, const StepMetrics& m) {
  json cells = json::object();
  for (std::size_t c = 0; c < PhaseCell::kCount; ++c) {
    if (!m.cells[c]) continue;
    cells[PhaseCell::from_index(c).label()] = json{{"count", m.cells[c]->count},
                                                   {"mean_grad_norm", m.cells[c]->mean_grad_norm},
                                                   {"mean_entropy", m.cells[c]->mean_entropy}};
  }
  j = json{{"step", m.step},
           {"mean_reward", m.mean_reward},
           {"mean_entropy", m.mean_entropy},
           {"spurious_ratio", m.spurious_ratio},
           {"masked_count", m.masked_count},
           {"total_tokens", m.total_tokens},
           {"surrogate_value", m.surrogate_value},
           {"grad_norm", m.grad_norm},
           {"learning_rate", m.learning_rate},
           {"tau_h", m.tau_h},
           {"skipped_updates", m.skipped_updates},
           {"cells", std::move(cells)}};
}

StepMetrics metrics_from_json(const json& j) {
  StepMetrics m;
  j.at("step").get_to(m.step);
  j.at("mean_reward").get_to(m.mean_reward);
  j.at("mean_entropy").get_to(m.mean_entropy);
  j.at("spurious_ratio").get_to(m.spurious_ratio);
  j.at("masked_count").get_to(m.masked_count);
  j.at("total_tokens").get_to(m.total_tokens);
  j.at("surrogate_value").get_to(m.surrogate_value);
  j.at("grad_norm").get_to(m.grad_norm);
  j.at("learning_rate").get_to(m.learning_rate);
  j.at("tau_h").get_to(m.tau_h);
  j.at("skipped_updates").get_to(m.skipped_updates);
  for (std::size_t c = 0; c < PhaseCell::kCount; ++c) {
    const std::string label = PhaseCell::from_index(c).label();
    if (!j.at("cells").contains(label)) continue;
    const json& cj = j.at("cells").at(label);
    m.cells[c] = CellDigest{cj.at("count").get<std::size_t>(), cj.at("mean_grad_norm").get<double>(),
                            cj.at("mean_entropy").get<double>()};
  }
  return m;
}

void to_json(json& j, const TraceRecord& r) {
  j = json{{"step", r.step},         {"mini_batch", r.mini_batch},
           {"resolved_tau_h", r.resolved_tau_h}, {"tau_p", r.tau_p},
           {"group", r.group},       {"grad_norms", r.grad_norms}};
}

TraceRecord trace_from_json(const json& j) {
  TraceRecord r;
  j.at("step").get_to(r.step);
  j.at("mini_batch").get_to(r.mini_batch);
  j.at("resolved_tau_h").get_to(r.resolved_tau_h);
  j.at("tau_p").get_to(r.tau_p);
  j.at("group").get_to(r.group);
  j.at("grad_norms").get_to(r.grad_norms);
  return r;
}

void save_checkpoint(const PolicyTable& policy, std::size_t step,
                     const std::filesystem::path& path) {
  json j = policy;
  j["step"] = step;
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    out << j.dump() << '\n';
    if (!out) throw std::runtime_error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("corrupt checkpoint " + path.string() + ": " + e.what());
  }
  try {
    Checkpoint c{policy_from_json(j), j.value("step", std::size_t{0})};
    return c;
  } catch (const json::exception& e) {
    throw std::runtime_error("corrupt checkpoint " + path.string() + ": " + e.what());
  }
}

}  // namespace stapo
