#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stapo/core.hpp"

namespace stapo {

enum class Operator : std::uint8_t { Add, Sub, Mul };

// Modular-arithmetic chain "a op b op c ...", evaluated left to right modulo
// `modulus`. The model must answer with `= <residue digits> <eos>`; any
// tokens before the first `=` are free scratch space.
struct ArithmeticTask {
  int modulus = 7;
  int chain_length = 2;
  std::vector<Operator> operators{Operator::Add};

  // Throws std::invalid_argument on out-of-range fields.
  void validate() const;

  // Digits needed for residues, the task's operator symbols, then "=" and
  // "<eos>", in that id order.
  Vocabulary vocabulary() const;

  // "mod:M[:L[:OPS]]" where OPS is any of a/s/m (add/sub/mul), e.g.
  // "mod:7:2", "mod:97:6:asm". Defaults: L = 2, OPS = a.
  static ArithmeticTask parse(std::string_view spec);
  std::string to_spec() const;
};

std::vector<Prompt> generate_prompts(const ArithmeticTask& task, std::size_t n,
                                     std::uint64_t seed);

// Decimal rendering of a non-negative integer as vocabulary digit ids.
std::vector<TokenId> render_number(int value, const Vocabulary& vocab);

// +1 iff the tokens strictly between the first answer marker and the next
// end-of-sequence equal the ground truth; -1 otherwise.
double verify(const Prompt& prompt, std::span<const TokenId> y, const Vocabulary& vocab);

// JSON-lines, one {id, tokens, ground_truth} object per line. Errors carry
// the 1-based line number or the offending prompt id.
std::vector<Prompt> load_prompts(const std::filesystem::path& path);
std::vector<Prompt> parse_prompts(std::istream& in, const std::string& source = "<input>");
void save_prompts(const std::filesystem::path& path, std::span<const Prompt> prompts);

}  // namespace stapo
