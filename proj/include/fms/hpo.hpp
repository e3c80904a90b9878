#pragma once

// HPO drivers over a cached benchmark: FMS and DyHPO variants (one epoch
// per proposal), full-budget GP-BO and random search.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fms/acquisition.hpp"
#include "fms/benchhub.hpp"
#include "fms/surrogate.hpp"

namespace fms {

enum class Method {
  kFmsGmn,
  kFmsFlat,
  kFmsGmnNoCnn,
  kFmsFlatNoCnn,
  kDyhpo,
  kDyhpoNoCnn,
  kDyhpoPtmIndex,
  kGp,
  kRandom,
};

std::string method_id(Method m);
// Throws std::invalid_argument listing the known ids.
Method parse_method(const std::string& id);
std::vector<Method> all_methods();
bool is_multifidelity(Method m);

struct MethodConfig {
  Method method = Method::kFmsGmn;
  std::size_t total_budget = 200;  // epochs
  std::size_t b_max = 20;
  std::size_t pool_size = 1000;     // fresh configurations scored per proposal
  SurrogateConfig surrogate;
  std::optional<std::filesystem::path> warm_start;
  std::vector<double> snapshot_fractions{0.5, 1.0};
  std::size_t gp_fit_steps = 200;   // baseline GP hyperparameter fit

  bool use_weights() const { return surrogate.encoder != WeightEncoder::kNone; }
  // Flags and surrogate shape for `method` on `bench`.
  static MethodConfig make(Method method, const BenchmarkTable& bench, std::size_t total_budget);
};

struct TraceEvent {
  std::size_t step = 0;
  std::size_t config = 0;
  std::size_t budget = 0;  // epoch observed
  std::size_t epochs = 0;  // epochs charged
  double y = 0.0;
  std::size_t cumulative = 0;
  double incumbent = 0.0;
  double ei = 0.0;
  Prediction prediction;
  std::size_t fit_steps = 0;
  bool fit_aborted = false;
};

struct Snapshot {
  std::size_t budget = 0;       // nominal snapshot budget
  std::size_t spent = 0;        // epochs spent when taken
  bool fitted = false;          // false: prior only, scores constant
  std::vector<double> scores;   // predicted Y_{B_max} per config
};

struct HpoTrace {
  std::string method;
  std::uint64_t seed = 0;
  std::size_t total_budget = 0;
  std::size_t b_max = 0;
  std::string hub_hash;
  double y_opt = 0.0;
  std::vector<double> true_scores;
  bool warm_start = false;
  std::vector<TraceEvent> events;
  std::vector<Snapshot> snapshots;

  std::size_t spent() const { return events.empty() ? 0 : events.back().cumulative; }
  double final_incumbent() const { return events.empty() ? 0.0 : events.back().incumbent; }
  // Running incumbent after `epochs` epochs (0 before the first event).
  double incumbent_at(std::size_t epochs) const;

  // One JSON object per line: header, events, snapshots.
  std::string to_jsonl() const;
  static HpoTrace from_jsonl(const std::string& text);
};

// Input of config c at budget j: curve Y_1..Y_{j-1} and, with weights,
// the checkpoint after epoch j-1.
SurrogateInput surrogate_input(const BenchmarkTable& bench, std::size_t c, std::size_t j, bool with_weights);

HpoTrace run(const MethodConfig& method, const BenchmarkTable& bench, std::uint64_t seed);

struct RunJob {
  MethodConfig method;
  std::uint64_t seed = 0;
};
// Independent runs across `threads` workers (0: hardware concurrency);
// traces come back in job order.
std::vector<HpoTrace> run_all(const std::vector<RunJob>& jobs, const BenchmarkTable& bench, std::size_t threads);

// Squared-exponential GP on scaled hyperparameters with standardized
// targets and ML-II hyperparameters; the full-budget baseline.
class BaselineGp {
 public:
  explicit BaselineGp(const SearchSpace& space) : space_(space) {}
  std::vector<double> encode(const HyperparameterConfig& x) const;
  void fit(const std::vector<HyperparameterConfig>& xs, const std::vector<double>& ys, std::size_t steps);
  // Prediction on the original target scale.
  Prediction predict(const HyperparameterConfig& x) const;
  double sf2() const;

 private:
  SearchSpace space_;
  std::vector<std::vector<double>> x_;
  std::vector<double> y_;
  double y_mean_ = 0.0, y_scale_ = 1.0;
  double log_ell_ = 0.0, log_sf_ = 0.0, log_sn_ = -2.3;
  ad::Cholesky chol_;
  std::vector<double> alpha_;
};

// Next full-budget config for the GP baseline: uniform over `unstarted`
// when nothing is observed, else the EI argmax against the best observation.
std::size_t baseline_gp_step(const BaselineGp& gp, bool empty, double incumbent,
                             const std::vector<std::size_t>& unstarted, const BenchmarkTable& bench,
                             std::mt19937_64& rng);

// Transfer warm start: collects random multifidelity histories of
// `events_per_hub` epochs on each source hub, fits a fresh surrogate on
// their union for `steps` Adam steps and returns it.
Surrogate fit_transfer_surrogate(const MethodConfig& method, const std::vector<BenchmarkTable>& sources,
                                 std::uint64_t seed, std::size_t events_per_hub, std::size_t steps);

}  // namespace fms
