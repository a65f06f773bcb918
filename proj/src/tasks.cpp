#include "stapo/tasks.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <istream>
#include <stdexcept>

#include "stapo/random.hpp"

namespace stapo {
namespace {

std::string_view symbol(Operator op) {
  switch (op) {
    case Operator::Add: return "+";
    case Operator::Sub: return "-";
    case Operator::Mul: return "*";
  }
  return "+";
}

char op_code(Operator op) {
  switch (op) {
    case Operator::Add: return 'a';
    case Operator::Sub: return 's';
    case Operator::Mul: return 'm';
  }
  return 'a';
}

int apply(Operator op, int lhs, int rhs, int modulus) {
  long long r = 0;
  switch (op) {
    case Operator::Add: r = static_cast<long long>(lhs) + rhs; break;
    case Operator::Sub: r = static_cast<long long>(lhs) - rhs; break;
    case Operator::Mul: r = static_cast<long long>(lhs) * rhs; break;
  }
  r %= modulus;
  if (r < 0) r += modulus;
  return static_cast<int>(r);
}

int parse_int(std::string_view s, const char* what) {
  int v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) {
    throw std::invalid_argument(std::string("invalid ") + what + " '" + std::string(s) + "'");
  }
  return v;
}

constexpr std::uint64_t kPromptStreamTag = 0x70726f6d7074ULL;

}  // namespace

void ArithmeticTask::validate() const {
  if (modulus < 5 || modulus > 97) {
    throw std::invalid_argument("modulus must be in [5, 97], got " + std::to_string(modulus));
  }
  if (chain_length < 2 || chain_length > 6) {
    throw std::invalid_argument("chain_length must be in [2, 6], got " +
                                std::to_string(chain_length));
  }
  if (operators.empty()) throw std::invalid_argument("operator set is empty");
  for (std::size_t i = 0; i < operators.size(); ++i) {
    for (std::size_t j = i + 1; j < operators.size(); ++j) {
      if (operators[i] == operators[j]) throw std::invalid_argument("duplicate operator");
    }
  }
}

Vocabulary ArithmeticTask::vocabulary() const {
  validate();
  Vocabulary v;
  const int digits = std::min(modulus, 10);
  for (int d = 0; d < digits; ++d) v.tokens.push_back(std::to_string(d));
  for (Operator op : operators) v.tokens.emplace_back(symbol(op));
  v.answer_marker = static_cast<TokenId>(v.tokens.size());
  v.tokens.emplace_back("=");
  v.end_of_sequence = static_cast<TokenId>(v.tokens.size());
  v.tokens.emplace_back("<eos>");
  return v;
}

ArithmeticTask ArithmeticTask::parse(std::string_view spec) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = spec.find(':', start);
    parts.push_back(spec.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  if (parts.size() < 2 || parts.size() > 4 || parts[0] != "mod") {
    throw std::invalid_argument("task spec must look like mod:M[:L[:OPS]], got '" +
                                std::string(spec) + "'");
  }
  ArithmeticTask task;
  task.modulus = parse_int(parts[1], "modulus");
  if (parts.size() >= 3) task.chain_length = parse_int(parts[2], "chain length");
  if (parts.size() == 4) {
    task.operators.clear();
    for (char c : parts[3]) {
      switch (c) {
        case 'a': task.operators.push_back(Operator::Add); break;
        case 's': task.operators.push_back(Operator::Sub); break;
        case 'm': task.operators.push_back(Operator::Mul); break;
        default:
          throw std::invalid_argument(std::string("unknown operator code '") + c + "'");
      }
    }
  }
  task.validate();
  return task;
}

std::string ArithmeticTask::to_spec() const {
  std::string ops;
  for (Operator op : operators) ops += op_code(op);
  return "mod:" + std::to_string(modulus) + ":" + std::to_string(chain_length) + ":" + ops;
}

std::vector<TokenId> render_number(int value, const Vocabulary& vocab) {
  if (value < 0) throw std::invalid_argument("render_number: negative value");
  std::vector<TokenId> out;
  for (char c : std::to_string(value)) {
    out.push_back(vocab.id_of(std::string_view(&c, 1)));
  }
  return out;
}

std::vector<Prompt> generate_prompts(const ArithmeticTask& task, std::size_t n,
                                     std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("generate_prompts: n must be >= 1");
  const Vocabulary vocab = task.vocabulary();
  Rng rng = make_stream(seed, {kPromptStreamTag});
  const auto m = static_cast<std::uint64_t>(task.modulus);

  std::vector<Prompt> prompts;
  prompts.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Prompt p;
    std::string text;
    int acc = static_cast<int>(uniform_index(rng, m));
    auto emit = [&](int operand) {
      auto digits = render_number(operand, vocab);
      p.tokens.insert(p.tokens.end(), digits.begin(), digits.end());
      text += std::to_string(operand);
    };
    emit(acc);
    for (int k = 1; k < task.chain_length; ++k) {
      const Operator op = task.operators[uniform_index(rng, task.operators.size())];
      const int operand = static_cast<int>(uniform_index(rng, m));
      p.tokens.push_back(vocab.id_of(symbol(op)));
      text += symbol(op);
      emit(operand);
      acc = apply(op, acc, operand, task.modulus);
    }
    p.ground_truth = render_number(acc, vocab);
    p.id = "m" + std::to_string(task.modulus) + ":" + text;
    prompts.push_back(std::move(p));
  }
  return prompts;
}

double verify(const Prompt& prompt, std::span<const TokenId> y, const Vocabulary& vocab) {
  const auto marker = std::find(y.begin(), y.end(), vocab.answer_marker);
  if (marker == y.end()) return -1.0;
  const auto eos = std::find(marker + 1, y.end(), vocab.end_of_sequence);
  if (eos == y.end()) return -1.0;
  const bool match = std::equal(marker + 1, eos, prompt.ground_truth.begin(),
                                prompt.ground_truth.end());
  return match ? 1.0 : -1.0;
}

std::vector<Prompt> parse_prompts(std::istream& in, const std::string& source) {
  std::vector<Prompt> prompts;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    Prompt p;
    try {
      json::parse(line).get_to(p);
    } catch (const json::exception& e) {
      throw std::runtime_error(where + ": parse error: " + e.what());
    }
    if (p.id.empty()) throw std::runtime_error(where + ": prompt id is empty");
    if (p.id.find('|') != std::string::npos) {
      throw std::runtime_error(where + ": prompt '" + p.id + "' id contains '|'");
    }
    if (p.tokens.empty()) {
      throw std::runtime_error(where + ": prompt '" + p.id + "' has empty tokens");
    }
    if (p.ground_truth.empty()) {
      throw std::runtime_error(where + ": prompt '" + p.id + "' has empty ground_truth");
    }
    prompts.push_back(std::move(p));
  }
  return prompts;
}

std::vector<Prompt> load_prompts(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open prompt file " + path.string());
  return parse_prompts(in, path.string());
}

void save_prompts(const std::filesystem::path& path, std::span<const Prompt> prompts) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write prompt file " + path.string());
  for (const Prompt& p : prompts) out << json(p).dump() << '\n';
}

}  // namespace stapo
