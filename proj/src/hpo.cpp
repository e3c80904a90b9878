#include "fms/hpo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace fms {

namespace {

using json = nlohmann::json;

struct MethodInfo {
  Method method;
  const char* id;
};

constexpr MethodInfo kMethods[] = {
    {Method::kFmsGmn, "fms-gmn"},         {Method::kFmsFlat, "fms-flat"},
    {Method::kFmsGmnNoCnn, "fms-gmn-nocnn"}, {Method::kFmsFlatNoCnn, "fms-flat-nocnn"},
    {Method::kDyhpo, "dyhpo"},            {Method::kDyhpoNoCnn, "dyhpo-nocnn"},
    {Method::kDyhpoPtmIndex, "dyhpo-ptm-index"}, {Method::kGp, "gp"},
    {Method::kRandom, "random"},
};

std::vector<double> curve_prefix(const BenchmarkTable& bench, std::size_t c, std::size_t n) {
  const auto& y = bench.curve(c);
  return {y.begin(), y.begin() + static_cast<std::ptrdiff_t>(n)};
}

// Snapshot query: config c at B_max with everything observed so far.
SurrogateInput snapshot_input(const BenchmarkTable& bench, std::size_t c, std::size_t progress, bool with_weights) {
  SurrogateInput in;
  in.config = bench.config(c);
  in.curve = curve_prefix(bench, c, progress);
  in.budget = bench.b_max();
  if (with_weights && progress > 0) in.weights = bench.weights(c, progress);
  return in;
}

struct SnapshotPlan {
  std::vector<std::size_t> budgets;
  std::size_t next = 0;

  SnapshotPlan(const std::vector<double>& fractions, std::size_t total) {
    for (double f : fractions)
      budgets.push_back(std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(f * static_cast<double>(total)))));
    std::sort(budgets.begin(), budgets.end());
  }
  template <class Take>
  void reached(std::size_t spent, Take&& take) {
    while (next < budgets.size() && spent >= budgets[next]) take(budgets[next++]);
  }
  template <class Take>
  void finish(Take&& take) {
    while (next < budgets.size()) take(budgets[next++]);
  }
};

void record_event(HpoTrace& trace, TraceEvent e, double& incumbent, std::size_t& spent) {
  spent += e.epochs;
  incumbent = trace.events.empty() ? e.y : std::max(incumbent, e.y);
  e.step = trace.events.size();
  e.cumulative = spent;
  e.incumbent = incumbent;
  trace.events.push_back(e);
}

HpoTrace trace_header(const MethodConfig& m, const BenchmarkTable& bench, std::uint64_t seed) {
  HpoTrace t;
  t.method = method_id(m.method);
  t.seed = seed;
  t.total_budget = m.total_budget;
  t.b_max = bench.b_max();
  t.hub_hash = bench.hash();
  t.y_opt = bench.y_opt();
  t.true_scores = bench.final_scores();
  t.warm_start = m.warm_start.has_value();
  return t;
}

void check_bench(const MethodConfig& m, const BenchmarkTable& bench) {
  if (m.total_budget < 1) throw std::invalid_argument("total budget must be >= 1");
  if (bench.num_configs() == 0) throw std::invalid_argument("benchmark has no configurations");
  if (m.b_max != bench.b_max())
    throw std::invalid_argument("method b_max " + std::to_string(m.b_max) + " differs from the benchmark's " +
                                std::to_string(bench.b_max()));
}

HpoTrace run_multifidelity(const MethodConfig& m, const BenchmarkTable& bench, std::uint64_t seed) {
  HpoTrace trace = trace_header(m, bench, seed);
  const bool with_w = m.use_weights();
  Surrogate surrogate = m.warm_start ? Surrogate::load(*m.warm_start) : Surrogate(m.surrogate, seed);
  if (surrogate.config().to_json() != m.surrogate.to_json())
    throw std::invalid_argument("warm-start state was fitted with a different surrogate configuration");
  std::mt19937_64 rng(seed ^ 0xc0ffee5eedULL);

  const std::size_t n = bench.num_configs();
  std::vector<std::size_t> progress(n, 0);
  std::vector<Observation> data;
  IncumbentTable incumbents;
  Posterior post = surrogate.posterior(data);
  bool fitted = false;
  double incumbent = 0.0;
  std::size_t spent = 0;

  SnapshotPlan plan(m.snapshot_fractions, m.total_budget);
  auto take = [&](std::size_t budget) {
    Snapshot s{budget, spent, fitted, std::vector<double>(n, 0.0)};
    if (fitted) {
      std::vector<SurrogateInput> q;
      q.reserve(n);
      for (std::size_t c = 0; c < n; ++c) q.push_back(snapshot_input(bench, c, progress[c], with_w));
      std::vector<const SurrogateInput*> ptr;
      for (const auto& x : q) ptr.push_back(&x);
      const auto p = post.predict(ptr);
      for (std::size_t c = 0; c < n; ++c) s.scores[c] = p[c].mean;
    }
    trace.snapshots.push_back(std::move(s));
  };

  while (spent < m.total_budget) {
    const auto slots = candidate_slots(progress, bench.b_max(), m.pool_size, rng);
    if (slots.empty()) break;
    std::vector<SurrogateInput> inputs;
    inputs.reserve(slots.size());
    for (const auto& s : slots) inputs.push_back(surrogate_input(bench, s.config, s.budget, with_w));
    std::vector<const SurrogateInput*> ptr;
    for (const auto& x : inputs) ptr.push_back(&x);
    const Proposal p = select_proposal(slots, post.predict(ptr), incumbents);

    const std::size_t c = p.slot.config, j = p.slot.budget;
    const double y = bench.accuracy(c, j);
    data.push_back({std::move(inputs[p.index]), y});
    progress[c] = j;
    incumbents.observe(j, y);

    TraceEvent e;
    e.config = c;
    e.budget = j;
    e.epochs = 1;
    e.y = y;
    e.ei = p.ei;
    e.prediction = p.prediction;
    surrogate.note_evaluation();
    if (data.size() >= 2) {
      const FitReport r = surrogate.fit(data, surrogate.steps_for_phase());
      e.fit_steps = r.steps;
      e.fit_aborted = r.aborted;
      fitted = fitted || !r.aborted;
    }
    post = surrogate.posterior(data);
    record_event(trace, e, incumbent, spent);
    plan.reached(spent, take);
  }
  plan.finish(take);
  return trace;
}

HpoTrace run_full_budget(const MethodConfig& m, const BenchmarkTable& bench, std::uint64_t seed) {
  HpoTrace trace = trace_header(m, bench, seed);
  std::mt19937_64 rng(seed ^ 0xba5e11eULL);
  const std::size_t n = bench.num_configs();
  std::vector<std::size_t> unstarted(n);
  std::iota(unstarted.begin(), unstarted.end(), 0);
  std::vector<std::optional<double>> observed(n);
  BaselineGp gp(bench.spec().space());
  std::vector<HyperparameterConfig> xs;
  std::vector<double> ys;
  double incumbent = 0.0;
  std::size_t spent = 0;

  SnapshotPlan plan(m.snapshot_fractions, m.total_budget);
  auto take = [&](std::size_t budget) {
    Snapshot s{budget, spent, !xs.empty(), std::vector<double>(n, 0.0)};
    if (s.fitted) {
      for (std::size_t c = 0; c < n; ++c) {
        if (m.method == Method::kGp)
          s.scores[c] = gp.predict(bench.config(c)).mean;
        else
          s.scores[c] = observed[c] ? *observed[c] : -1.0;  // unevaluated configs tie below every observation
      }
    }
    trace.snapshots.push_back(std::move(s));
  };

  while (spent < m.total_budget && !unstarted.empty()) {
    std::size_t c;
    TraceEvent e;
    if (m.method == Method::kGp) {
      c = baseline_gp_step(gp, xs.empty(), incumbent, unstarted, bench, rng);
      if (!xs.empty()) {
        e.prediction = gp.predict(bench.config(c));
        e.ei = expected_improvement(e.prediction.mean, std::sqrt(e.prediction.variance), incumbent);
      }
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, unstarted.size() - 1);
      c = unstarted[pick(rng)];
    }
    unstarted.erase(std::find(unstarted.begin(), unstarted.end(), c));
    const std::size_t epochs = std::min(bench.b_max(), m.total_budget - spent);
    e.config = c;
    e.budget = epochs;
    e.epochs = epochs;
    e.y = bench.accuracy(c, epochs);
    observed[c] = e.y;
    xs.push_back(bench.config(c));
    ys.push_back(e.y);
    if (m.method == Method::kGp) {
      gp.fit(xs, ys, m.gp_fit_steps);
      e.fit_steps = xs.size() >= 2 ? m.gp_fit_steps : 0;
    }
    record_event(trace, e, incumbent, spent);
    plan.reached(spent, take);
  }
  plan.finish(take);
  return trace;
}

json event_json(const TraceEvent& e) {
  return {{"type", "event"},       {"step", e.step},
          {"config", e.config},    {"budget", e.budget},
          {"epochs", e.epochs},    {"y", e.y},
          {"cumulative", e.cumulative}, {"incumbent", e.incumbent},
          {"ei", e.ei},            {"mean", e.prediction.mean},
          {"variance", e.prediction.variance}, {"fit_steps", e.fit_steps},
          {"fit_aborted", e.fit_aborted}};
}

}  // namespace

std::string method_id(Method m) {
  for (const auto& i : kMethods)
    if (i.method == m) return i.id;
  throw std::invalid_argument("unknown method");
}

Method parse_method(const std::string& id) {
  std::string known;
  for (const auto& i : kMethods) {
    if (id == i.id) return i.method;
    known += known.empty() ? "" : ", ";
    known += i.id;
  }
  throw std::invalid_argument("unknown method id '" + id + "' (known: " + known + ")");
}

std::vector<Method> all_methods() {
  std::vector<Method> out;
  for (const auto& i : kMethods) out.push_back(i.method);
  return out;
}

bool is_multifidelity(Method m) { return m != Method::kGp && m != Method::kRandom; }

MethodConfig MethodConfig::make(Method method, const BenchmarkTable& bench, std::size_t total_budget) {
  MethodConfig m;
  m.method = method;
  m.total_budget = total_budget;
  m.b_max = bench.b_max();
  SurrogateConfig& s = m.surrogate;
  s.num_models = bench.spec().roster.size();
  s.b_max = bench.b_max();
  switch (method) {
    case Method::kFmsGmn:
    case Method::kFmsGmnNoCnn:
      s.encoder = WeightEncoder::kGmn;
      break;
    case Method::kFmsFlat:
    case Method::kFmsFlatNoCnn:
      s.encoder = WeightEncoder::kFlat;
      s.flat_width = bench.spec().flat_width();
      break;
    default:
      s.encoder = WeightEncoder::kNone;
  }
  s.use_curve_cnn = method != Method::kFmsGmnNoCnn && method != Method::kFmsFlatNoCnn && method != Method::kDyhpoNoCnn;
  s.use_model_index = method != Method::kDyhpo && method != Method::kDyhpoNoCnn;
  return m;
}

SurrogateInput surrogate_input(const BenchmarkTable& bench, std::size_t c, std::size_t j, bool with_weights) {
  SurrogateInput in;
  in.config = bench.config(c);
  in.curve = curve_prefix(bench, c, j - 1);
  in.budget = j;
  if (with_weights && j > 1) in.weights = bench.weights(c, j - 1);
  return in;
}

HpoTrace run(const MethodConfig& method, const BenchmarkTable& bench, std::uint64_t seed) {
  check_bench(method, bench);
  return is_multifidelity(method.method) ? run_multifidelity(method, bench, seed)
                                         : run_full_budget(method, bench, seed);
}

std::vector<HpoTrace> run_all(const std::vector<RunJob>& jobs, const BenchmarkTable& bench, std::size_t threads) {
  std::vector<HpoTrace> out(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        out[i] = run(jobs[i].method, bench, jobs[i].seed);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, std::max<std::size_t>(jobs.size(), 1));
  std::vector<std::thread> pool;
  for (std::size_t k = 1; k < threads; ++k) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

// ---------------------------------------------------------------------------

double HpoTrace::incumbent_at(std::size_t epochs) const {
  double best = 0.0;
  for (const auto& e : events) {
    if (e.cumulative > epochs) break;
    best = e.incumbent;
  }
  return best;
}

std::string HpoTrace::to_jsonl() const {
  std::ostringstream out;
  json h{{"type", "header"},        {"format_version", 1},   {"method", method},
         {"seed", seed},            {"total_budget", total_budget}, {"b_max", b_max},
         {"hub_hash", hub_hash},    {"y_opt", y_opt},        {"true_scores", true_scores},
         {"warm_start", warm_start}};
  out << h.dump() << '\n';
  for (const auto& e : events) out << event_json(e).dump() << '\n';
  for (const auto& s : snapshots)
    out << json{{"type", "snapshot"}, {"budget", s.budget}, {"spent", s.spent}, {"fitted", s.fitted}, {"scores", s.scores}}
               .dump()
        << '\n';
  return out.str();
}

HpoTrace HpoTrace::from_jsonl(const std::string& text) {
  HpoTrace t;
  std::istringstream in(text);
  std::string line;
  bool header = false;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw std::runtime_error("trace line " + std::to_string(lineno) + ": " + e.what());
    }
    const std::string type = j.at("type").get<std::string>();
    if (type == "header") {
      t.method = j.at("method").get<std::string>();
      t.seed = j.at("seed").get<std::uint64_t>();
      t.total_budget = j.at("total_budget").get<std::size_t>();
      t.b_max = j.at("b_max").get<std::size_t>();
      t.hub_hash = j.at("hub_hash").get<std::string>();
      t.y_opt = j.at("y_opt").get<double>();
      t.true_scores = j.at("true_scores").get<std::vector<double>>();
      t.warm_start = j.value("warm_start", false);
      header = true;
    } else if (type == "event") {
      TraceEvent e;
      e.step = j.at("step");
      e.config = j.at("config");
      e.budget = j.at("budget");
      e.epochs = j.at("epochs");
      e.y = j.at("y");
      e.cumulative = j.at("cumulative");
      e.incumbent = j.at("incumbent");
      e.ei = j.at("ei");
      e.prediction = {j.at("mean").get<double>(), j.at("variance").get<double>()};
      e.fit_steps = j.at("fit_steps");
      e.fit_aborted = j.at("fit_aborted");
      t.events.push_back(e);
    } else if (type == "snapshot") {
      t.snapshots.push_back({j.at("budget").get<std::size_t>(), j.at("spent").get<std::size_t>(),
                             j.at("fitted").get<bool>(), j.at("scores").get<std::vector<double>>()});
    } else {
      throw std::runtime_error("trace line " + std::to_string(lineno) + ": unknown record type '" + type + "'");
    }
  }
  if (!header) throw std::runtime_error("trace has no header");
  return t;
}

// ---------------------------------------------------------------------------

std::vector<double> BaselineGp::encode(const HyperparameterConfig& x) const {
  auto unit = [](double v, double lo, double hi) { return hi > lo ? (v - lo) / (hi - lo) : 0.0; };
  std::vector<double> f;
  for (std::size_t m = 0; m < space_.num_models; ++m) f.push_back(m == x.model_index ? 1.0 : 0.0);
  f.push_back(x.dropout);
  const auto [bmin, bmax] = std::minmax_element(space_.batch_sizes.begin(), space_.batch_sizes.end());
  f.push_back(unit(std::log2(static_cast<double>(x.batch_size)), std::log2(static_cast<double>(*bmin)),
                   std::log2(static_cast<double>(*bmax))));
  f.push_back(unit(std::log10(x.learning_rate), std::log10(space_.lr_min), std::log10(space_.lr_max)));
  const auto [mmin, mmax] = std::minmax_element(space_.momenta.begin(), space_.momenta.end());
  f.push_back(unit(x.momentum, *mmin, *mmax));
  f.push_back(unit(std::log10(x.weight_decay), std::log10(space_.wd_min), std::log10(space_.wd_max)));
  return f;
}

void BaselineGp::fit(const std::vector<HyperparameterConfig>& xs, const std::vector<double>& ys, std::size_t steps) {
  if (xs.size() != ys.size()) throw std::invalid_argument("BaselineGp::fit: size mismatch");
  const std::size_t n = xs.size();
  x_.clear();
  for (const auto& x : xs) x_.push_back(encode(x));
  y_mean_ = 0.0;
  y_scale_ = 1.0;
  if (n >= 2) {
    y_mean_ = std::accumulate(ys.begin(), ys.end(), 0.0) / static_cast<double>(n);
    double v = 0.0;
    for (double y : ys) v += (y - y_mean_) * (y - y_mean_);
    y_scale_ = std::max(std::sqrt(v / static_cast<double>(n)), 1e-6);
  }
  y_.clear();
  for (double y : ys) y_.push_back((y - y_mean_) / y_scale_);
  log_ell_ = 0.0;
  log_sf_ = 0.0;
  log_sn_ = std::log(0.1);
  if (n == 0) return;
  const std::size_t d = x_.front().size();

  if (n >= 2 && steps > 0) {
    ad::Tensor xt({n, d});
    for (std::size_t i = 0; i < n; ++i) std::copy(x_[i].begin(), x_[i].end(), &xt[i * d]);
    ad::Tape tape;
    const ad::Var z = tape.constant(std::move(xt));
    const ad::Var k = tape.add_diag(record_kernel(tape, z, z), tape.exp(tape.scale(tape.leaf("log_sn"), 2.0)));
    tape.gp_nlml(k, tape.constant(ad::Tensor::vector(y_)));
    ad::ParamSet p{{"log_ell", ad::Tensor::scalar(log_ell_)},
                   {"log_sf", ad::Tensor::scalar(log_sf_)},
                   {"log_sn", ad::Tensor::scalar(log_sn_)}};
    ad::AdamState adam;
    adam.lr = 0.05;
    for (std::size_t s = 0; s < steps; ++s) {
      try {
        if (!std::isfinite(tape.evaluate(p).item())) break;
      } catch (const ad::NotPositiveDefinite&) {
        break;
      }
      tape.backward();
      const ad::ParamSet before = p;
      adam.update(p, tape.leaf_grads());
      p.at("log_sn")[0] = std::max(p.at("log_sn")[0], std::log(1e-3));
      bool finite = true;
      for (const auto& [name, t] : p) finite = finite && std::isfinite(t[0]);
      if (!finite) {
        p = before;
        break;
      }
    }
    log_ell_ = p.at("log_ell")[0];
    log_sf_ = p.at("log_sf")[0];
    log_sn_ = p.at("log_sn")[0];
  }

  const double sf2 = std::exp(2 * log_sf_), inv2l2 = 0.5 * std::exp(-2 * log_ell_), sn2 = std::exp(2 * log_sn_);
  std::vector<double> k(n * n);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      double s = 0.0;
      for (std::size_t i = 0; i < d; ++i) s += (x_[a][i] - x_[b][i]) * (x_[a][i] - x_[b][i]);
      k[a * n + b] = sf2 * std::exp(-s * inv2l2) + (a == b ? sn2 : 0.0);
    }
  chol_ = ad::Cholesky::factor(k, n);
  alpha_ = chol_.solve(y_);
}

double BaselineGp::sf2() const { return std::exp(2 * log_sf_) * y_scale_ * y_scale_; }

Prediction BaselineGp::predict(const HyperparameterConfig& x) const {
  const double sf2 = std::exp(2 * log_sf_), inv2l2 = 0.5 * std::exp(-2 * log_ell_);
  const std::size_t n = x_.size();
  if (n == 0) return {y_mean_, sf2 * y_scale_ * y_scale_};
  const auto f = encode(x);
  std::vector<double> ks(n);
  for (std::size_t a = 0; a < n; ++a) {
    double s = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) s += (x_[a][i] - f[i]) * (x_[a][i] - f[i]);
    ks[a] = sf2 * std::exp(-s * inv2l2);
  }
  double mean = 0.0;
  for (std::size_t a = 0; a < n; ++a) mean += ks[a] * alpha_[a];
  const auto v = chol_.solve_lower(ks);
  double var = sf2;
  for (double t : v) var -= t * t;
  var = std::max(var, 1e-12);
  return {y_mean_ + y_scale_ * mean, var * y_scale_ * y_scale_};
}

std::size_t baseline_gp_step(const BaselineGp& gp, bool empty, double incumbent,
                             const std::vector<std::size_t>& unstarted, const BenchmarkTable& bench,
                             std::mt19937_64& rng) {
  if (unstarted.empty()) throw NoCandidates();
  if (empty) {
    std::uniform_int_distribution<std::size_t> pick(0, unstarted.size() - 1);
    return unstarted[pick(rng)];
  }
  std::size_t best = unstarted.front();
  double best_ei = -1.0;
  for (std::size_t c : unstarted) {
    const Prediction p = gp.predict(bench.config(c));
    const double ei = expected_improvement(p.mean, std::sqrt(p.variance), incumbent);
    if (ei > best_ei) {
      best_ei = ei;
      best = c;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------

Surrogate fit_transfer_surrogate(const MethodConfig& method, const std::vector<BenchmarkTable>& sources,
                                 std::uint64_t seed, std::size_t events_per_hub, std::size_t steps) {
  if (!is_multifidelity(method.method)) throw std::invalid_argument("transfer needs a surrogate method");
  std::vector<Observation> data;
  for (std::size_t h = 0; h < sources.size(); ++h) {
    const BenchmarkTable& bench = sources[h];
    if (bench.b_max() != method.b_max || bench.spec().roster.size() != method.surrogate.num_models)
      throw std::invalid_argument("transfer source hub " + std::to_string(h) + " has a different search space");
    std::mt19937_64 rng(seed * 7919 + h);
    std::vector<std::size_t> progress(bench.num_configs(), 0);
    std::bernoulli_distribution advance(0.7);
    for (std::size_t e = 0; e < events_per_hub; ++e) {
      const auto slots = candidate_slots(progress, bench.b_max(), method.pool_size, rng);
      if (slots.empty()) break;
      std::vector<std::size_t> partial, fresh;
      for (std::size_t i = 0; i < slots.size(); ++i) (slots[i].budget > 1 ? partial : fresh).push_back(i);
      const auto& from = !partial.empty() && (fresh.empty() || advance(rng)) ? partial : fresh;
      std::uniform_int_distribution<std::size_t> pick(0, from.size() - 1);
      const CandidateSlot s = slots[from[pick(rng)]];
      data.push_back({surrogate_input(bench, s.config, s.budget, method.use_weights()), bench.accuracy(s.config, s.budget)});
      progress[s.config] = s.budget;
    }
  }
  Surrogate sur(method.surrogate, seed);
  if (data.size() >= 2) sur.fit(data, steps);
  sur.set_evaluations(data.size());
  return sur;
}

}  // namespace fms
