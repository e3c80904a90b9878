#pragma once

// Rank correlation, regret series and multi-seed comparison reports.

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fms/hpo.hpp"

namespace fms {

// Kendall tau-b in O(n log n). Empty when either side is constant.
// Throws std::invalid_argument on unequal lengths, n < 2 or NaN.
std::optional<double> kendall_tau(std::span<const double> pred, std::span<const double> truth);

struct RegretPoint {
  std::size_t budget = 0;
  double regret = 0.0;
};

// y_opt - incumbent after each event.
std::vector<RegretPoint> regret_curve(const HpoTrace& trace, double y_opt);
std::vector<RegretPoint> regret_curve(const HpoTrace& trace);  // y_opt from the trace header
// Regret at every epoch 1..total_budget (y_opt before the first event).
std::vector<double> regret_grid(const HpoTrace& trace);

// Tau of a trace's snapshots against its true final scores.
std::vector<std::optional<double>> snapshot_taus(const HpoTrace& trace);

struct MeanStderr {
  double mean = 0.0;
  double stderr_ = 0.0;
  std::size_t n = 0;
};
MeanStderr mean_stderr(std::span<const double> xs);

class ReportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ComparisonReport {
  std::string hub_hash;
  std::vector<std::string> methods;  // first-seen order
  std::vector<std::uint64_t> seeds;  // ascending
  std::size_t total_budget = 0;
  std::vector<HpoTrace> traces;      // sorted by (method order, seed)

  // Throws ReportError unless every method covers the same seeds on one hub
  // with one total budget.
  static ComparisonReport build(std::vector<HpoTrace> traces);

  const HpoTrace& trace(const std::string& method, std::uint64_t seed) const;
  // Mean final regret and mean tau at a snapshot over seeds (absent taus skipped).
  MeanStderr final_regret(const std::string& method) const;
  MeanStderr regret_at(const std::string& method, std::size_t epochs) const;
  MeanStderr tau_at(const std::string& method, std::size_t snapshot_budget) const;
  std::vector<std::size_t> snapshot_budgets() const;

  std::string report_csv() const;   // method,seed,budget,regret
  std::string tau_csv() const;      // method,seed,snapshot_budget,tau
  std::string summary_csv() const;  // method,metric,budget,mean,stderr,n
  std::string regret_svg() const;
  std::string meta_json() const;
  // Writes report.csv, tau.csv, summary.csv, regret.svg and meta.json.
  void write(const std::filesystem::path& dir) const;
};

// RFC 4180 field quoting.
std::string csv_field(const std::string& s);
std::string format_double(double v);

}  // namespace fms
