#include "stapo/s2t.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace stapo {

void S2TConfig::validate() const {
  if (!(tau_p >= 0.0 && tau_p < 1.0)) throw std::invalid_argument("tau_p must be in [0, 1)");
  if (!(entropy_quantile > 0.0 && entropy_quantile < 1.0)) {
    throw std::invalid_argument("entropy_quantile must be in (0, 1)");
  }
}

double resolve_tau_h(std::span<const double> entropies, double q) {
  if (entropies.empty()) throw std::invalid_argument("resolve_tau_h: empty entropy list");
  if (!(q > 0.0 && q < 1.0)) throw std::invalid_argument("resolve_tau_h: q must be in (0,1)");
  const std::size_t n = entropies.size();
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(n)));
  const std::size_t idx = std::clamp<std::size_t>(rank, 1, n) - 1;
  std::vector<double> v(entropies.begin(), entropies.end());
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(idx), v.end());
  return v[idx];
}

namespace {
double require_tau_h(const S2TConfig& cfg) {
  if (!cfg.resolved_tau_h) {
    throw std::logic_error("entropy threshold not resolved for this mini-batch");
  }
  return *cfg.resolved_tau_h;
}
}  // namespace

std::uint8_t s2t_mask(const TokenView& token, double advantage, const S2TConfig& cfg) {
  const double tau_h = require_tau_h(cfg);
  const bool spurious = advantage > 0.0 && token.cur_prob < cfg.tau_p && token.entropy < tau_h;
  return spurious ? 0 : 1;
}

std::size_t PhaseCell::index() const {
  return (prob == ProbBin::High ? 4U : 0U) + (adv == AdvSign::Negative ? 2U : 0U) +
         (entropy == EntropyBin::High ? 1U : 0U);
}

PhaseCell PhaseCell::from_index(std::size_t i) {
  if (i >= kCount) throw std::out_of_range("phase cell index out of range");
  return PhaseCell{(i & 4U) ? ProbBin::High : ProbBin::Low,
                   (i & 2U) ? AdvSign::Negative : AdvSign::Positive,
                   (i & 1U) ? EntropyBin::High : EntropyBin::Low};
}

bool PhaseCell::spurious() const {
  return prob == ProbBin::Low && adv == AdvSign::Positive && entropy == EntropyBin::Low;
}

std::string PhaseCell::label() const {
  std::string s = prob == ProbBin::Low ? "low_prob" : "high_prob";
  s += adv == AdvSign::Positive ? "/pos_adv" : "/neg_adv";
  s += entropy == EntropyBin::Low ? "/low_entropy" : "/high_entropy";
  return s;
}

PhaseCell classify_phase(const TokenView& token, double advantage, const S2TConfig& cfg) {
  const double tau_h = require_tau_h(cfg);
  return PhaseCell{token.cur_prob >= cfg.tau_p ? ProbBin::High : ProbBin::Low,
                   advantage > 0.0 ? AdvSign::Positive : AdvSign::Negative,
                   token.entropy >= tau_h ? EntropyBin::High : EntropyBin::Low};
}

CellTable cell_statistics(std::span<const ClassifiedToken> tokens) {
  std::array<CellStats, PhaseCell::kCount> acc{};
  for (const ClassifiedToken& t : tokens) {
    CellStats& c = acc[t.cell.index()];
    ++c.count;
    c.mean_grad_norm += t.grad_norm;
    c.mean_entropy += t.entropy;
  }
  CellTable out;
  for (std::size_t i = 0; i < PhaseCell::kCount; ++i) {
    if (acc[i].count == 0) continue;
    const auto n = static_cast<double>(acc[i].count);
    out[i] = CellStats{acc[i].count, acc[i].mean_grad_norm / n, acc[i].mean_entropy / n};
  }
  return out;
}

}  // namespace stapo
