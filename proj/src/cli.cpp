#include "stapo/cli.hpp"

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stapo/analysis.hpp"
#include "stapo/tasks.hpp"
#include "stapo/trainer.hpp"

namespace stapo::cli {
namespace {

namespace fs = std::filesystem;

// Raised for bad user input that CLI11 itself cannot catch (missing files,
// unreadable config, invalid combinations).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

void require_file(const fs::path& p, const char* what) {
  if (!fs::is_regular_file(p)) throw UsageError(std::string(what) + " not found: " + p.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw UsageError("cannot create output directory " + dir.string() + ": " + ec.message());
}

void write_counts_csv(const fs::path& path, const TokenCounts& counts) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "token_id,frequency\n";
  for (std::size_t id = 0; id < counts.size(); ++id) {
    if (counts[id] > 0) out << id << ',' << counts[id] << '\n';
  }
}

struct TrainOptions {
  std::string objective = "stapo";
  std::string task = "mod:7:2";
  std::string prompts_file;
  std::size_t num_prompts = 64;
  std::string out_dir = "run";
  std::string resume;
  std::string config_file;
  TrainConfig config;
  std::size_t trace_every = 0;
};

void add_train_options(CLI::App& cmd, TrainOptions& o) {
  TrainConfig& c = o.config;
  cmd.add_option("--objective", o.objective, "grpo | dapo | stapo")->capture_default_str();
  cmd.add_option("--tau-p", c.s2t.tau_p, "absolute probability threshold")->capture_default_str();
  cmd.add_option("--entropy-quantile", c.s2t.entropy_quantile,
                 "tokens below this batch entropy quantile are mask-eligible")
      ->capture_default_str();
  cmd.add_option("--group-size", c.group_size)->capture_default_str();
  cmd.add_option("--batch-prompts", c.batch_prompts)->capture_default_str();
  cmd.add_option("--mini-batches", c.mini_batches_per_step)->capture_default_str();
  cmd.add_option("--clip-low", c.clip.eps_low)->capture_default_str();
  cmd.add_option("--clip-high", c.clip.eps_high)->capture_default_str();
  cmd.add_option("--lr", c.learning_rate)->capture_default_str();
  cmd.add_option("--warmup", c.warmup_steps, "linear warmup steps")->capture_default_str();
  cmd.add_option("--grad-clip", c.grad_clip_norm)->capture_default_str();
  cmd.add_option("--max-len", c.max_response_len)->capture_default_str();
  cmd.add_option("--temperature", c.temperature)->capture_default_str();
  cmd.add_option("--context-order", c.context_order)->capture_default_str();
  cmd.add_option("--steps", c.total_steps)->capture_default_str();
  cmd.add_option("--seed", c.seed)->capture_default_str();
  cmd.add_option("--task", o.task, "mod:M[:L[:OPS]]")->capture_default_str();
  cmd.add_option("--prompts", o.prompts_file, "JSON-lines prompt file (default: generate)");
  cmd.add_option("--num-prompts", o.num_prompts, "prompts to generate when --prompts is absent")
      ->capture_default_str();
  cmd.add_option("--out", o.out_dir, "output directory")->capture_default_str();
  cmd.add_option("--resume", o.resume, "checkpoint to continue from");
  cmd.add_option("--trace-every", o.trace_every, "write trace.jsonl every N steps (0 = off)")
      ->capture_default_str();
  cmd.add_option("--threads", c.threads, "rollout workers")
      ->envname("STAPO_THREADS")
      ->capture_default_str();
  cmd.add_option("--config", o.config_file, "flat key=value file mirroring the flags");
}

// Fills every option the command line left unset from a flat key=value file,
// so explicit flags win over the file.
void apply_config_file(CLI::App& cmd, const std::string& path) {
  require_file(path, "config file");
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigINI().from_file(path);
  } catch (const CLI::Error& e) {
    throw UsageError("config file " + path + ": " + e.what());
  }
  for (const CLI::ConfigItem& item : items) {
    if (!item.parents.empty()) {
      throw UsageError("config file " + path + ": sections are not supported ('" +
                       item.fullname() + "')");
    }
    if (item.name == "config") throw UsageError("config file " + path + ": nested config");
    CLI::Option* opt = cmd.get_option_no_throw("--" + item.name);
    if (opt == nullptr) throw UsageError("config file " + path + ": unknown key '" + item.name + "'");
    if (opt->count() > 0) continue;
    try {
      opt->add_result(item.inputs);
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw UsageError("config file " + path + ": " + item.name + ": " + e.what());
    }
  }
}

void write_config_echo(const fs::path& path, const TrainOptions& o) {
  const TrainConfig& c = o.config;
  std::ofstream out(path);
  out << "objective=" << o.objective << '\n'
      << "tau-p=" << format_double(c.s2t.tau_p) << '\n'
      << "entropy-quantile=" << format_double(c.s2t.entropy_quantile) << '\n'
      << "group-size=" << c.group_size << '\n'
      << "batch-prompts=" << c.batch_prompts << '\n'
      << "mini-batches=" << c.mini_batches_per_step << '\n'
      << "clip-low=" << format_double(c.clip.eps_low) << '\n'
      << "clip-high=" << format_double(c.clip.eps_high) << '\n'
      << "lr=" << format_double(c.learning_rate) << '\n'
      << "warmup=" << c.warmup_steps << '\n'
      << "grad-clip=" << format_double(c.grad_clip_norm) << '\n'
      << "max-len=" << c.max_response_len << '\n'
      << "temperature=" << format_double(c.temperature) << '\n'
      << "context-order=" << c.context_order << '\n'
      << "steps=" << c.total_steps << '\n'
      << "seed=" << c.seed << '\n'
      << "task=" << o.task << '\n'
      << "num-prompts=" << o.num_prompts << '\n';
}

int run_generate(const std::string& task_spec, std::size_t n, std::uint64_t seed,
                 const std::string& out_path, std::ostream& out) {
  const ArithmeticTask task = ArithmeticTask::parse(task_spec);
  const auto prompts = generate_prompts(task, n, seed);
  if (out_path.empty() || out_path == "-") {
    for (const Prompt& p : prompts) out << json(p).dump() << '\n';
  } else {
    const fs::path parent = fs::path(out_path).parent_path();
    if (!parent.empty()) ensure_dir(parent);
    save_prompts(out_path, prompts);
  }
  return kSuccess;
}

int run_train(TrainOptions& o, std::ostream& out, std::ostream& err) {
  o.config.objective = objective_from_string(o.objective);
  o.config.validate();
  const ArithmeticTask task = ArithmeticTask::parse(o.task);
  const Vocabulary vocab = task.vocabulary();

  std::vector<Prompt> prompts;
  if (!o.prompts_file.empty()) {
    require_file(o.prompts_file, "prompt file");
    prompts = load_prompts(o.prompts_file);
  } else {
    prompts = generate_prompts(task, o.num_prompts, o.config.seed);
  }
  for (const Prompt& p : prompts) {
    for (TokenId t : p.tokens) {
      if (!vocab.contains(t)) throw UsageError("prompt '" + p.id + "' uses tokens outside the task vocabulary");
    }
  }

  std::optional<PolicyTable> initial;
  std::size_t start_step = 0;
  if (!o.resume.empty()) {
    require_file(o.resume, "checkpoint");
    Checkpoint ck = load_checkpoint(o.resume);
    initial = std::move(ck.policy);
    start_step = ck.step;
  }

  const fs::path dir(o.out_dir);
  ensure_dir(dir);
  write_config_echo(dir / "config.txt", o);
  std::ofstream metrics(dir / "metrics.jsonl", o.resume.empty() ? std::ios::trunc : std::ios::app);
  std::ofstream trace;
  if (o.trace_every > 0) trace.open(dir / "trace.jsonl");

  TrainHooks hooks;
  hooks.on_step = [&](const StepMetrics& m) {
    metrics << json(m).dump() << '\n';
    metrics.flush();
  };
  hooks.trace_every = o.trace_every;
  if (o.trace_every > 0) {
    hooks.on_trace = [&](const TraceRecord& r) { trace << json(r).dump() << '\n'; };
  }
  hooks.on_event = [&](const std::string& e) { err << e << '\n'; };

  try {
    const TrainResult result = train(o.config, vocab, prompts, hooks, std::move(initial), start_step);
    save_checkpoint(result.policy, o.config.total_steps, dir / "checkpoint.json");
    write_counts_csv(dir / "masked_tokens.csv", result.masked_tokens);
    write_counts_csv(dir / "kept_tokens.csv", result.kept_tokens);
    if (!result.metrics.empty()) {
      const StepMetrics& last = result.metrics.back();
      out << "step " << last.step << ": mean_reward=" << format_double(last.mean_reward)
          << " mean_entropy=" << format_double(last.mean_entropy)
          << " spurious_ratio=" << format_double(last.spurious_ratio) << '\n';
    }
  } catch (const TrainingAborted& e) {
    save_checkpoint(e.policy(), e.step(), dir / "abort_checkpoint.json");
    err << "training aborted: " << e.what() << " (diagnostic checkpoint written to "
        << (dir / "abort_checkpoint.json").string() << ")\n";
    return kRuntimeAbort;
  }
  return kSuccess;
}

int run_verify(const SuiteOptions& opts, const std::string& out_path, std::ostream& out) {
  const auto results = run_verification_suite(opts);
  json report = json::array();
  bool ok = true;
  for (const CheckResult& r : results) {
    report.push_back(r);
    ok = ok && r.failures == 0;
  }
  const std::string text = report.dump(2);
  if (out_path.empty() || out_path == "-") {
    out << text << '\n';
  } else {
    const fs::path parent = fs::path(out_path).parent_path();
    if (!parent.empty()) ensure_dir(parent);
    std::ofstream f(out_path);
    f << text << '\n';
  }
  return ok ? kSuccess : kVerificationFailure;
}

int run_classify(const std::string& trace_path, std::optional<double> tau_p_override,
                 const std::string& out_path, std::ostream& out) {
  require_file(trace_path, "trace file");
  std::ifstream in(trace_path);
  std::vector<ClassifiedToken> tokens;
  std::size_t masked = 0, lineno = 0;
  std::string line;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    TraceRecord rec;
    try {
      rec = trace_from_json(json::parse(line));
    } catch (const json::exception& e) {
      throw UsageError(trace_path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    S2TConfig cfg;
    cfg.tau_p = tau_p_override.value_or(rec.tau_p);
    cfg.resolved_tau_h = rec.resolved_tau_h;
    for (std::size_t t = 0; t < rec.group.trajectories.size(); ++t) {
      const Trajectory& traj = rec.group.trajectories[t];
      for (std::size_t s = 0; s < traj.steps.size(); ++s) {
        const TokenStep& st = traj.steps[s];
        ClassifiedToken ct;
        ct.cell = classify_phase({st.cur_prob, st.entropy}, traj.advantage, cfg);
        ct.entropy = st.entropy;
        ct.grad_norm = rec.grad_norms.at(t).at(s);
        tokens.push_back(ct);
        if (st.mask == 0) ++masked;
      }
    }
  }

  const CellTable stats = cell_statistics(tokens);
  json cells = json::array();
  for (std::size_t c = 0; c < PhaseCell::kCount; ++c) {
    if (!stats[c]) continue;
    cells.push_back(json{{"cell", PhaseCell::from_index(c).label()},
                         {"spurious", PhaseCell::from_index(c).spurious()},
                         {"count", stats[c]->count},
                         {"mean_grad_norm", stats[c]->mean_grad_norm},
                         {"mean_entropy", stats[c]->mean_entropy}});
  }
  const json report{{"total_tokens", tokens.size()}, {"masked_tokens", masked}, {"cells", cells}};
  if (out_path.empty() || out_path == "-") {
    out << report.dump(2) << '\n';
  } else {
    std::ofstream f(out_path);
    f << report.dump(2) << '\n';
  }
  return kSuccess;
}

int run_analyze(const std::string& metrics_path, const std::string& out_dir) {
  require_file(metrics_path, "metrics file");
  std::ifstream in(metrics_path);
  std::vector<StepMetrics> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      rows.push_back(metrics_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw UsageError(metrics_path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }

  const fs::path dir(out_dir);
  ensure_dir(dir);
  const std::vector<std::pair<std::string, std::function<std::string(const StepMetrics&)>>> series = {
      {"mean_reward", [](const StepMetrics& m) { return format_double(m.mean_reward); }},
      {"mean_entropy", [](const StepMetrics& m) { return format_double(m.mean_entropy); }},
      {"spurious_ratio", [](const StepMetrics& m) { return format_double(m.spurious_ratio); }},
      {"masked_count", [](const StepMetrics& m) { return std::to_string(m.masked_count); }},
      {"total_tokens", [](const StepMetrics& m) { return std::to_string(m.total_tokens); }},
      {"surrogate_value", [](const StepMetrics& m) { return format_double(m.surrogate_value); }},
      {"grad_norm", [](const StepMetrics& m) { return format_double(m.grad_norm); }},
      {"learning_rate", [](const StepMetrics& m) { return format_double(m.learning_rate); }},
      {"tau_h", [](const StepMetrics& m) { return format_double(m.tau_h); }},
  };
  for (const auto& [name, value] : series) {
    std::ofstream f(dir / (name + ".csv"), std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + (dir / (name + ".csv")).string());
    f << "step," << name << '\n';
    for (const StepMetrics& m : rows) f << m.step << ',' << value(m) << '\n';
  }
  return kSuccess;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Spurious-token-aware policy optimization lab"};
  app.require_subcommand(1);

  std::string task_spec = "mod:7:2";
  std::size_t gen_n = 100;
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  auto* generate = app.add_subcommand("generate", "emit a JSON-lines prompt dataset");
  generate->add_option("--task", task_spec, "mod:M[:L[:OPS]]")->capture_default_str();
  generate->add_option("--n", gen_n)->capture_default_str();
  generate->add_option("--seed", gen_seed)->capture_default_str();
  generate->add_option("--out", gen_out, "output file (default stdout)");

  TrainOptions train_opts;
  auto* train_cmd = app.add_subcommand("train", "run policy optimization");
  add_train_options(*train_cmd, train_opts);

  SuiteOptions suite;
  std::string verify_out;
  auto* verify_cmd = app.add_subcommand("verify", "run the gradient/entropy verification suite");
  verify_cmd->add_option("--seed", suite.seed)->capture_default_str();
  verify_cmd->add_option("--cases", suite.bound_cases, "random (w, pi, k) cases")
      ->capture_default_str();
  verify_cmd->add_option("--fd-batches", suite.fd_batches)->capture_default_str();
  verify_cmd->add_option("--mask-cases", suite.mask_cases)->capture_default_str();
  verify_cmd->add_option("--out", verify_out, "report file (default stdout)");

  std::string trace_path, classify_out;
  std::optional<double> classify_tau_p;
  auto* classify_cmd = app.add_subcommand("classify", "phase-diagram report from a trace");
  classify_cmd->add_option("--trace", trace_path)->required();
  classify_cmd->add_option("--tau-p", classify_tau_p, "override the recorded tau_p");
  classify_cmd->add_option("--out", classify_out, "report file (default stdout)");

  std::string metrics_path, analyze_out = "analysis";
  auto* analyze_cmd = app.add_subcommand("analyze", "metrics.jsonl to per-quantity CSV");
  analyze_cmd->add_option("--metrics", metrics_path)->required();
  analyze_cmd->add_option("--out", analyze_out)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kSuccess;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return kSuccess;
    err << "error: " << e.what() << '\n';
    return kUsageError;
  }

  try {
    if (*generate) return run_generate(task_spec, gen_n, gen_seed, gen_out, out);
    if (*train_cmd) {
      if (!train_opts.config_file.empty()) apply_config_file(*train_cmd, train_opts.config_file);
      return run_train(train_opts, out, err);
    }
    if (*verify_cmd) return run_verify(suite, verify_out, out);
    if (*classify_cmd) return run_classify(trace_path, classify_tau_p, classify_out, out);
    if (*analyze_cmd) return run_analyze(metrics_path, analyze_out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeAbort;
  }
  return kUsageError;
}

}  // namespace stapo::cli
