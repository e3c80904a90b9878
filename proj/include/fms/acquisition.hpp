#pragma once

// Multifidelity expected improvement and candidate selection.

#include <cstddef>
#include <map>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "fms/surrogate.hpp"

namespace fms {

// E[max(f - y_star, 0)] for f ~ N(mu, sigma^2).
double expected_improvement(double mu, double sigma, double y_star);

// Best observed performance per budget.
class IncumbentTable {
 public:
  void observe(std::size_t budget, double y);
  // y_j^max if budget j was observed, else the best over smaller budgets,
  // else 0.
  double incumbent_for(std::size_t budget) const;
  bool empty() const { return best_.empty(); }
  const std::map<std::size_t, double>& table() const { return best_; }

 private:
  std::map<std::size_t, double> best_;
};

struct CandidateSlot {
  std::size_t config = 0;
  std::size_t budget = 1;
};

class NoCandidates : public std::runtime_error {
 public:
  NoCandidates() : std::runtime_error("no candidates: every configuration is exhausted") {}
};

// Fresh configurations (never evaluated; up to pool_size drawn uniformly
// without replacement, at budget 1) followed by every partially evaluated
// configuration at its next budget. `progress[c]` is the last evaluated
// budget of configuration c (0 when unstarted).
std::vector<CandidateSlot> candidate_slots(std::span<const std::size_t> progress, std::size_t b_max,
                                           std::size_t pool_size, std::mt19937_64& rng);

struct Proposal {
  CandidateSlot slot;
  std::size_t index = 0;  // position in the candidate list
  double ei = 0.0;
  Prediction prediction;
};

// Argmax of EI over the candidates; ties go to the lowest budget, then to
// the earliest candidate.
Proposal select_proposal(std::span<const CandidateSlot> slots, std::span<const Prediction> predictions,
                         const IncumbentTable& incumbents);

}  // namespace fms
