#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>

namespace stapo {

// Spurious-token thresholds. tau_p is an absolute probability; the entropy
// threshold is resolved per mini-batch as the entropy_quantile-quantile of
// the batch's token entropies, so tokens below it (by default the bottom
// 80%) are eligible for masking.
struct S2TConfig {
  double tau_p = 0.002;
  double entropy_quantile = 0.8;
  std::optional<double> resolved_tau_h;

  void validate() const;
};

// Nearest-rank quantile: the element at sorted index ceil(q * n) - 1
// (clamped to [0, n-1]). Throws on an empty list or q outside (0,1).
double resolve_tau_h(std::span<const double> entropies, double q);

struct TokenView {
  double cur_prob = 1.0;
  double entropy = 0.0;
};

// 0 iff advantage > 0, cur_prob < tau_p and entropy < resolved tau_h.
// Throws std::logic_error when tau_h has not been resolved.
std::uint8_t s2t_mask(const TokenView& token, double advantage, const S2TConfig& cfg);

enum class ProbBin : std::uint8_t { Low, High };
enum class AdvSign : std::uint8_t { Positive, Negative };
enum class EntropyBin : std::uint8_t { Low, High };

struct PhaseCell {
  ProbBin prob = ProbBin::High;
  AdvSign adv = AdvSign::Positive;
  EntropyBin entropy = EntropyBin::High;

  static constexpr std::size_t kCount = 8;

  std::size_t index() const;
  static PhaseCell from_index(std::size_t i);
  bool spurious() const;
  // e.g. "low_prob/pos_adv/low_entropy"
  std::string label() const;

  bool operator==(const PhaseCell&) const = default;
};

// prob >= tau_p is High, entropy >= tau_h is High; a zero advantage is
// binned as Negative (it never satisfies the masking condition).
PhaseCell classify_phase(const TokenView& token, double advantage, const S2TConfig& cfg);

struct ClassifiedToken {
  PhaseCell cell;
  double grad_norm = 0.0;
  double entropy = 0.0;
};

struct CellStats {
  std::size_t count = 0;
  double mean_grad_norm = 0.0;
  double mean_entropy = 0.0;
};

// Indexed by PhaseCell::index(); empty cells are nullopt.
using CellTable = std::array<std::optional<CellStats>, PhaseCell::kCount>;

CellTable cell_statistics(std::span<const ClassifiedToken> tokens);

}  // namespace stapo
