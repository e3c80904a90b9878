#include "fms/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "fms/io.hpp"

namespace fms {

namespace {

using i64 = long long;

// Sum of t(t-1)/2 over runs of equal values in a sorted sequence.
template <class Eq>
i64 tied_pairs(std::size_t n, Eq&& eq) {
  i64 total = 0, run = 1;
  for (std::size_t i = 1; i <= n; ++i) {
    if (i < n && eq(i - 1, i)) {
      ++run;
    } else {
      total += run * (run - 1) / 2;
      run = 1;
    }
  }
  return total;
}

// Sorts `v` ascending and returns the number of inversions.
i64 merge_count(std::vector<double>& v, std::vector<double>& buf, std::size_t lo, std::size_t hi) {
  if (hi - lo < 2) return 0;
  const std::size_t mid = (lo + hi) / 2;
  i64 swaps = merge_count(v, buf, lo, mid) + merge_count(v, buf, mid, hi);
  std::size_t i = lo, j = mid, k = lo;
  while (i < mid && j < hi) {
    if (v[j] < v[i]) {
      swaps += static_cast<i64>(mid - i);
      buf[k++] = v[j++];
    } else {
      buf[k++] = v[i++];
    }
  }
  while (i < mid) buf[k++] = v[i++];
  while (j < hi) buf[k++] = v[j++];
  std::copy(buf.begin() + static_cast<std::ptrdiff_t>(lo), buf.begin() + static_cast<std::ptrdiff_t>(hi),
            v.begin() + static_cast<std::ptrdiff_t>(lo));
  return swaps;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                          "#8c564b", "#e377c2", "#7f7f7f", "#17becf"};

}  // namespace

std::optional<double> kendall_tau(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) throw std::invalid_argument("kendall_tau: lengths differ");
  const std::size_t n = pred.size();
  if (n < 2) throw std::invalid_argument("kendall_tau: need at least 2 scores");
  for (std::size_t i = 0; i < n; ++i)
    if (std::isnan(pred[i]) || std::isnan(truth[i])) throw std::invalid_argument("kendall_tau: NaN score");

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return pred[a] != pred[b] ? pred[a] < pred[b] : truth[a] < truth[b];
  });
  const i64 n0 = static_cast<i64>(n) * static_cast<i64>(n - 1) / 2;
  const i64 n1 = tied_pairs(n, [&](std::size_t i, std::size_t j) { return pred[idx[i]] == pred[idx[j]]; });
  const i64 n3 = tied_pairs(n, [&](std::size_t i, std::size_t j) {
    return pred[idx[i]] == pred[idx[j]] && truth[idx[i]] == truth[idx[j]];
  });
  std::vector<double> b(n), buf(n);
  for (std::size_t i = 0; i < n; ++i) b[i] = truth[idx[i]];
  const i64 swaps = merge_count(b, buf, 0, n);
  const i64 n2 = tied_pairs(n, [&](std::size_t i, std::size_t j) { return b[i] == b[j]; });
  if (n0 == n1 || n0 == n2) return std::nullopt;
  const double num = static_cast<double>(n0 - n1 - n2 + n3 - 2 * swaps);
  const double tau = num / std::sqrt(static_cast<double>(n0 - n1) * static_cast<double>(n0 - n2));
  return std::clamp(tau, -1.0, 1.0);
}

std::vector<RegretPoint> regret_curve(const HpoTrace& trace, double y_opt) {
  std::vector<RegretPoint> out;
  for (const auto& e : trace.events) out.push_back({e.cumulative, y_opt - e.incumbent});
  return out;
}

std::vector<RegretPoint> regret_curve(const HpoTrace& trace) { return regret_curve(trace, trace.y_opt); }

std::vector<double> regret_grid(const HpoTrace& trace) {
  std::vector<double> out(trace.total_budget, trace.y_opt);
  std::size_t e = 0;
  bool any = false;
  double inc = 0.0;
  for (std::size_t t = 1; t <= trace.total_budget; ++t) {
    while (e < trace.events.size() && trace.events[e].cumulative <= t) {
      inc = trace.events[e++].incumbent;
      any = true;
    }
    out[t - 1] = any ? trace.y_opt - inc : trace.y_opt;
  }
  return out;
}

std::vector<std::optional<double>> snapshot_taus(const HpoTrace& trace) {
  std::vector<std::optional<double>> out;
  for (const auto& s : trace.snapshots)
    out.push_back(s.fitted && s.scores.size() >= 2 ? kendall_tau(s.scores, trace.true_scores) : std::nullopt);
  return out;
}

MeanStderr mean_stderr(std::span<const double> xs) {
  MeanStderr r;
  r.n = xs.size();
  if (xs.empty()) return r;
  r.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double v = 0.0;
    for (double x : xs) v += (x - r.mean) * (x - r.mean);
    v /= static_cast<double>(xs.size() - 1);
    r.stderr_ = std::sqrt(v / static_cast<double>(xs.size()));
  }
  return r;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v == 0.0 ? 0.0 : v);
  return buf;
}

// ---------------------------------------------------------------------------

ComparisonReport ComparisonReport::build(std::vector<HpoTrace> traces) {
  if (traces.empty()) throw ReportError("no traces to report");
  ComparisonReport r;
  r.hub_hash = traces.front().hub_hash;
  r.total_budget = traces.front().total_budget;
  std::map<std::string, std::set<std::uint64_t>> seeds;
  for (const auto& t : traces) {
    if (t.hub_hash != r.hub_hash) throw ReportError("traces come from different hubs");
    if (t.total_budget != r.total_budget) throw ReportError("traces use different total budgets");
    if (std::find(r.methods.begin(), r.methods.end(), t.method) == r.methods.end()) r.methods.push_back(t.method);
    if (!seeds[t.method].insert(t.seed).second)
      throw ReportError("duplicate trace for " + t.method + " seed " + std::to_string(t.seed));
  }
  const auto& first = seeds.at(r.methods.front());
  for (const auto& [m, s] : seeds)
    if (s != first) throw ReportError("method " + m + " was run on a different seed set");
  r.seeds.assign(first.begin(), first.end());
  auto rank = [&](const std::string& m) { return std::find(r.methods.begin(), r.methods.end(), m) - r.methods.begin(); };
  std::sort(traces.begin(), traces.end(), [&](const HpoTrace& a, const HpoTrace& b) {
    return rank(a.method) != rank(b.method) ? rank(a.method) < rank(b.method) : a.seed < b.seed;
  });
  r.traces = std::move(traces);
  return r;
}

const HpoTrace& ComparisonReport::trace(const std::string& method, std::uint64_t seed) const {
  for (const auto& t : traces)
    if (t.method == method && t.seed == seed) return t;
  throw ReportError("no trace for " + method + " seed " + std::to_string(seed));
}

MeanStderr ComparisonReport::regret_at(const std::string& method, std::size_t epochs) const {
  std::vector<double> xs;
  for (const auto& t : traces)
    if (t.method == method) xs.push_back(t.y_opt - t.incumbent_at(epochs));
  return mean_stderr(xs);
}

MeanStderr ComparisonReport::final_regret(const std::string& method) const { return regret_at(method, total_budget); }

MeanStderr ComparisonReport::tau_at(const std::string& method, std::size_t snapshot_budget) const {
  std::vector<double> xs;
  for (const auto& t : traces) {
    if (t.method != method) continue;
    const auto taus = snapshot_taus(t);
    for (std::size_t i = 0; i < t.snapshots.size(); ++i)
      if (t.snapshots[i].budget == snapshot_budget && taus[i]) xs.push_back(*taus[i]);
  }
  return mean_stderr(xs);
}

std::vector<std::size_t> ComparisonReport::snapshot_budgets() const {
  std::set<std::size_t> b;
  for (const auto& t : traces)
    for (const auto& s : t.snapshots) b.insert(s.budget);
  return {b.begin(), b.end()};
}

std::string ComparisonReport::report_csv() const {
  std::string out = "method,seed,budget,regret\n";
  for (const auto& t : traces) {
    const auto grid = regret_grid(t);
    for (std::size_t i = 0; i < grid.size(); ++i)
      out += csv_field(t.method) + "," + std::to_string(t.seed) + "," + std::to_string(i + 1) + "," +
             format_double(grid[i]) + "\n";
  }
  return out;
}

std::string ComparisonReport::tau_csv() const {
  std::string out = "method,seed,snapshot_budget,tau\n";
  for (const auto& t : traces) {
    const auto taus = snapshot_taus(t);
    for (std::size_t i = 0; i < t.snapshots.size(); ++i)
      out += csv_field(t.method) + "," + std::to_string(t.seed) + "," + std::to_string(t.snapshots[i].budget) + "," +
             (taus[i] ? format_double(*taus[i]) : "") + "\n";
  }
  return out;
}

std::string ComparisonReport::summary_csv() const {
  std::string out = "method,metric,budget,mean,stderr,n\n";
  auto row = [&](const std::string& m, const char* metric, std::size_t b, const MeanStderr& s) {
    out += csv_field(m) + "," + metric + "," + std::to_string(b) + "," + (s.n ? format_double(s.mean) : "") + "," +
           (s.n ? format_double(s.stderr_) : "") + "," + std::to_string(s.n) + "\n";
  };
  for (const auto& m : methods) {
    for (std::size_t b = 1; b <= total_budget; ++b) row(m, "regret", b, regret_at(m, b));
    for (std::size_t b : snapshot_budgets()) row(m, "tau", b, tau_at(m, b));
  }
  return out;
}

std::string ComparisonReport::regret_svg() const {
  constexpr double W = 720, H = 440, left = 60, right = 170, top = 20, bottom = 50;
  const double pw = W - left - right, ph = H - top - bottom;
  std::vector<std::vector<double>> means;
  double ymax = 0.0;
  for (const auto& m : methods) {
    std::vector<double> series;
    for (std::size_t b = 1; b <= total_budget; ++b) series.push_back(regret_at(m, b).mean);
    for (double v : series) ymax = std::max(ymax, v);
    means.push_back(std::move(series));
  }
  if (ymax <= 0.0) ymax = 1.0;
  auto px = [&](std::size_t b) { return left + pw * static_cast<double>(b) / static_cast<double>(std::max<std::size_t>(total_budget, 1)); };
  auto py = [&](double v) { return top + ph * (1.0 - v / ymax); };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = ymax * i / 4.0;
    s << "<text x=\"" << left - 6 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\">" << format_double(std::round(v * 1000) / 1000) << "</text>\n";
    const std::size_t b = total_budget * static_cast<std::size_t>(i) / 4;
    s << "<text x=\"" << px(b) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">" << b << "</text>\n";
  }
  s << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">budget (epochs)</text>\n";
  s << "<text x=\"16\" y=\"" << top + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << top + ph / 2 << ")\">mean regret</text>\n";
  for (std::size_t m = 0; m < methods.size(); ++m) {
    const char* color = kPalette[m % std::size(kPalette)];
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t b = 1; b <= total_budget; ++b) s << (b > 1 ? " " : "") << format_double(px(b)) << "," << format_double(py(means[m][b - 1]));
    s << "\"/>\n";
    const double ly = top + 14 + 18 * static_cast<double>(m);
    s << "<line x1=\"" << left + pw + 12 << "\" y1=\"" << ly - 4 << "\" x2=\"" << left + pw + 32 << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    s << "<text x=\"" << left + pw + 38 << "\" y=\"" << ly << "\">" << methods[m] << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

std::string ComparisonReport::meta_json() const {
  nlohmann::json j{{"hub_hash", hub_hash}, {"methods", methods}, {"seeds", seeds},
                   {"total_budget", total_budget}, {"format_version", 1}};
  return j.dump(1) + "\n";
}

void ComparisonReport::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  io::write_file_atomic(dir / "report.csv", report_csv());
  io::write_file_atomic(dir / "tau.csv", tau_csv());
  io::write_file_atomic(dir / "summary.csv", summary_csv());
  io::write_file_atomic(dir / "regret.svg", regret_svg());
  io::write_file_atomic(dir / "meta.json", meta_json());
}

}  // namespace fms
