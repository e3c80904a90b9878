#include <doctest.h>

#include <cmath>
#include <random>

#include "fms/report.hpp"

using namespace fms;

namespace {

// O(n^2) pair enumeration.
std::optional<double> brute_tau(const std::vector<double>& a, const std::vector<double>& b) {
  double conc = 0, disc = 0, ta = 0, tb = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      const double s = (a[i] - a[j]) * (b[i] - b[j]);
      if (a[i] == a[j] && b[i] == b[j]) continue;
      if (a[i] == a[j]) ta += 1;
      else if (b[i] == b[j]) tb += 1;
      else if (s > 0) conc += 1;
      else disc += 1;
    }
  const double den = std::sqrt((conc + disc + ta) * (conc + disc + tb));
  if (conc + disc + ta == 0 || conc + disc + tb == 0) return std::nullopt;
  return (conc - disc) / den;
}

HpoTrace make_trace(const std::string& method, std::uint64_t seed, std::vector<std::pair<std::size_t, double>> obs) {
  HpoTrace t;
  t.method = method;
  t.seed = seed;
  t.total_budget = 4;
  t.b_max = 2;
  t.hub_hash = "h";
  t.y_opt = 0.9;
  t.true_scores = {0.9, 0.5, 0.7};
  double inc = 0;
  std::size_t spent = 0;
  for (auto [c, y] : obs) {
    TraceEvent e;
    e.step = t.events.size();
    e.config = c;
    e.budget = 1;
    e.epochs = 1;
    e.y = y;
    inc = t.events.empty() ? y : std::max(inc, y);
    e.incumbent = inc;
    e.cumulative = ++spent;
    t.events.push_back(e);
  }
  t.snapshots.push_back({2, 2, true, {0.8, 0.1, 0.5}});
  t.snapshots.push_back({4, 4, false, {0, 0, 0}});
  return t;
}

}  // namespace

TEST_CASE("kendall tau worked examples") {
  const std::vector<double> a{1, 2, 3}, up{10, 20, 30}, down{30, 20, 10};
  CHECK(*kendall_tau(a, up) == doctest::Approx(1.0));
  CHECK(*kendall_tau(a, down) == doctest::Approx(-1.0));
  const std::vector<double> x{1, 2, 3, 4}, y{1, 3, 2, 4};
  CHECK(*kendall_tau(x, y) == doctest::Approx((5.0 - 1.0) / 6.0).epsilon(1e-12));
  CHECK(*kendall_tau(x, y) == doctest::Approx(*brute_tau(x, y)));
  const std::vector<double> flat{2, 2, 2};
  CHECK_FALSE(kendall_tau(flat, up).has_value());
  CHECK_FALSE(kendall_tau(up, flat).has_value());
  CHECK_THROWS(kendall_tau(std::vector<double>{1}, std::vector<double>{1}));
  CHECK_THROWS(kendall_tau(a, std::vector<double>{1, 2}));
}

TEST_CASE("kendall tau matches pair enumeration with ties") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + rng() % 40;
    const int range = 1 + static_cast<int>(rng() % 8);
    std::vector<double> a(n), b(n);
    for (auto& v : a) v = static_cast<double>(rng() % range);
    for (auto& v : b) v = static_cast<double>(rng() % range);
    const auto fast = kendall_tau(a, b);
    const auto slow = brute_tau(a, b);
    REQUIRE(fast.has_value() == slow.has_value());
    if (fast) CHECK(std::abs(*fast - *slow) <= 1e-12);
  }
}

TEST_CASE("kendall tau properties") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 3 + rng() % 30;
    std::vector<double> a(n), b(n), rb(n), ta(n);
    for (auto& v : a) v = nd(rng);
    for (auto& v : b) v = nd(rng);
    for (std::size_t i = 0; i < n; ++i) {
      rb[i] = -b[i];
      ta[i] = std::exp(3 * a[i]) + 1;
    }
    const double t = *kendall_tau(a, b);
    CHECK(*kendall_tau(a, rb) == doctest::Approx(-t).epsilon(1e-12));
    CHECK(*kendall_tau(ta, b) == doctest::Approx(t).epsilon(1e-12));
    CHECK(std::abs(t) <= 1.0);
  }
}

TEST_CASE("regret series") {
  const HpoTrace t = make_trace("random", 1, {{1, 0.5}, {2, 0.7}, {0, 0.9}, {1, 0.6}});
  const auto r = regret_curve(t);
  REQUIRE(r.size() == 4);
  CHECK(r[0].regret == doctest::Approx(0.4));
  CHECK(r[1].regret == doctest::Approx(0.2));
  CHECK(r[2].regret == 0.0);
  CHECK(r[3].regret == 0.0);
  for (std::size_t i = 1; i < r.size(); ++i) CHECK(r[i].regret <= r[i - 1].regret);
  const auto g = regret_grid(t);
  CHECK(g.size() == 4);
  CHECK(g[1] == doctest::Approx(0.2));

  HpoTrace full = t;
  full.events = {t.events[0]};
  full.events[0].epochs = 2;
  full.events[0].cumulative = 2;
  const auto fg = regret_grid(full);
  CHECK(fg[0] == doctest::Approx(0.9));
  CHECK(fg[1] == doctest::Approx(0.4));
  CHECK(fg[3] == doctest::Approx(0.4));
}

TEST_CASE("comparison report") {
  std::vector<HpoTrace> traces{make_trace("b", 2, {{0, 0.9}}), make_trace("a", 1, {{1, 0.5}}),
                               make_trace("a", 2, {{2, 0.7}}), make_trace("b", 1, {{1, 0.5}, {0, 0.9}})};
  const ComparisonReport r = ComparisonReport::build(traces);
  CHECK(r.methods == std::vector<std::string>{"b", "a"});
  CHECK(r.seeds == std::vector<std::uint64_t>{1, 2});
  CHECK(r.final_regret("a").mean == doctest::Approx(0.3));
  CHECK(r.final_regret("b").mean == doctest::Approx(0.0));
  CHECK(r.tau_at("a", 2).mean == doctest::Approx(1.0));
  CHECK(r.tau_at("a", 4).n == 0);
  const std::string csv = r.report_csv();
  CHECK(csv.rfind("method,seed,budget,regret\nb,1,1,0.4\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 4 * 4);
  CHECK(r.tau_csv().find("a,1,4,\n") != std::string::npos);
  CHECK(r.summary_csv().find("a,tau,2,1,0,2\n") != std::string::npos);
  CHECK(r.regret_svg().find("<polyline") != std::string::npos);
  CHECK(csv.find('\r') == std::string::npos);

  HpoTrace other = traces[0];
  other.hub_hash = "x";
  CHECK_THROWS_AS(ComparisonReport::build({traces[1], other}), ReportError);
  CHECK_THROWS_AS(ComparisonReport::build({traces[0], traces[1], traces[2]}), ReportError);
  CHECK_THROWS_AS(ComparisonReport::build({}), ReportError);
}

TEST_CASE("csv quoting") {
  CHECK(csv_field("plain") == "plain");
  CHECK(csv_field("a,b") == "\"a,b\"");
  CHECK(csv_field("say \"hi\"") == "\"say \"\"hi\"\"\"");
  CHECK(format_double(-0.0) == "0");
  CHECK(format_double(0.25) == "0.25");
}
