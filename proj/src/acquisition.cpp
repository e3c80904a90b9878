#include "fms/acquisition.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace fms {

double expected_improvement(double mu, double sigma, double y_star) {
  if (sigma < 0.0 || std::isnan(sigma)) throw std::invalid_argument("expected_improvement: sigma must be >= 0");
  const double d = mu - y_star;
  if (sigma == 0.0) return std::max(d, 0.0);
  const double z = d / sigma;
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  const double cdf = 0.5 * std::erfc(-z / std::numbers::sqrt2);
  return std::max(d * cdf + sigma * pdf, 0.0);
}

void IncumbentTable::observe(std::size_t budget, double y) {
  auto [it, fresh] = best_.try_emplace(budget, y);
  if (!fresh) it->second = std::max(it->second, y);
}

double IncumbentTable::incumbent_for(std::size_t budget) const {
  auto it = best_.find(budget);
  if (it != best_.end()) return it->second;
  double best = 0.0;
  bool any = false;
  for (const auto& [j, y] : best_) {
    if (j >= budget) break;
    best = any ? std::max(best, y) : y;
    any = true;
  }
  return any ? best : 0.0;
}

std::vector<CandidateSlot> candidate_slots(std::span<const std::size_t> progress, std::size_t b_max,
                                           std::size_t pool_size, std::mt19937_64& rng) {
  std::vector<std::size_t> unstarted;
  for (std::size_t c = 0; c < progress.size(); ++c)
    if (progress[c] == 0) unstarted.push_back(c);
  const std::size_t take = std::min(pool_size, unstarted.size());
  // Partial Fisher-Yates: a uniform sample without replacement.
  for (std::size_t i = 0; i < take; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, unstarted.size() - 1);
    std::swap(unstarted[i], unstarted[pick(rng)]);
  }
  std::vector<CandidateSlot> slots;
  for (std::size_t i = 0; i < take; ++i) slots.push_back({unstarted[i], 1});
  for (std::size_t c = 0; c < progress.size(); ++c)
    if (progress[c] > 0 && progress[c] < b_max) slots.push_back({c, progress[c] + 1});
  return slots;
}

Proposal select_proposal(std::span<const CandidateSlot> slots, std::span<const Prediction> predictions,
                         const IncumbentTable& incumbents) {
  if (slots.empty()) throw NoCandidates();
  if (predictions.size() != slots.size()) throw std::invalid_argument("select_proposal: one prediction per slot");
  Proposal best;
  bool have = false;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const Prediction& p = predictions[i];
    const double ei = expected_improvement(p.mean, std::sqrt(std::max(p.variance, 0.0)),
                                           incumbents.incumbent_for(slots[i].budget));
    const bool better = !have || ei > best.ei || (ei == best.ei && slots[i].budget < best.slot.budget);
    if (better) {
      best = {slots[i], i, ei, p};
      have = true;
    }
  }
  return best;
}

}  // namespace fms
