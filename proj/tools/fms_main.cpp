// fms: hub generation, HPO runs, comparisons and reports.

#include <glob.h>

#include <cstdio>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "fms/benchhub.hpp"
#include "fms/hpo.hpp"
#include "fms/io.hpp"
#include "fms/report.hpp"

namespace fs = std::filesystem;
using namespace fms;

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<std::string> expand_glob(const std::string& pattern) {
  glob_t g{};
  const int rc = ::glob(pattern.c_str(), 0, nullptr, &g);
  std::vector<std::string> out;
  if (rc == 0)
    for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
  globfree(&g);
  if (out.empty()) throw std::runtime_error("no traces match '" + pattern + "'");
  return out;
}

std::string trace_name(const std::string& method, std::uint64_t seed) {
  return method + "-seed" + std::to_string(seed) + ".jsonl";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Forecasting model search: weight-aware multifidelity hyperparameter optimization"};
  app.require_subcommand(1);

  auto* hub = app.add_subcommand("hub", "Model hub benchmarks");
  hub->require_subcommand(1);
  auto* gen = hub->add_subcommand("generate", "Train a hub and cache curves and checkpoints");
  std::string spec_path, out;
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  bool verbose = false;
  gen->add_option("--spec", spec_path, "Hub spec (JSON)")->required()->check(CLI::ExistingFile);
  gen->add_option("--seed", seed, "Hub seed")->required();
  gen->add_option("--out", out, "Destination directory")->required();
  gen->add_option("--threads", threads, "Training threads (0: all cores)");
  gen->add_flag("--verbose", verbose, "Log each trained configuration");

  auto* hpo = app.add_subcommand("hpo", "Hyperparameter optimization");
  hpo->require_subcommand(1);
  std::string hub_dir, method, warm, methods_arg, seeds_arg;
  std::size_t budget = 0, pool = 1000;
  auto* run_cmd = hpo->add_subcommand("run", "One search on a hub");
  run_cmd->add_option("--hub", hub_dir, "Hub directory")->required();
  run_cmd->add_option("--method", method, "Method id")->required();
  run_cmd->add_option("--budget", budget, "Total epoch budget")->required();
  run_cmd->add_option("--seed", seed, "Run seed")->required();
  run_cmd->add_option("--out", out, "Trace file (JSON lines)")->required();
  run_cmd->add_option("--warm-start", warm, "Surrogate state to start from")->check(CLI::ExistingFile);
  run_cmd->add_option("--pool-size", pool, "Fresh configurations scored per proposal");

  auto* cmp = hpo->add_subcommand("compare", "Methods x seeds on one hub, with a report");
  cmp->add_option("--hub", hub_dir, "Hub directory")->required();
  cmp->add_option("--methods", methods_arg, "Comma-separated method ids")->required();
  cmp->add_option("--seeds", seeds_arg, "Comma-separated run seeds")->required();
  cmp->add_option("--budget", budget, "Total epoch budget")->required();
  cmp->add_option("--out", out, "Output directory")->required();
  cmp->add_option("--threads", threads, "Worker threads (0: all cores)");

  auto* tr = hpo->add_subcommand("transfer", "Fit a warm-start surrogate on other hubs' histories");
  std::string hubs_arg;
  std::size_t events = 100, steps = 500;
  tr->add_option("--hubs", hubs_arg, "Comma-separated source hub directories")->required();
  tr->add_option("--method", method, "Surrogate method id")->default_val("fms-gmn");
  tr->add_option("--seed", seed, "Seed")->required();
  tr->add_option("--out", out, "State file to write")->required();
  tr->add_option("--events", events, "Random history length per hub");
  tr->add_option("--steps", steps, "Adam steps");

  auto* rep = app.add_subcommand("report", "Re-render CSVs and the regret plot from stored traces");
  std::string pattern;
  rep->add_option("--traces", pattern, "Glob of trace files")->required();
  rep->add_option("--out", out, "Output directory")->default_val(".");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed()) {
      const HubSpec spec = HubSpec::from_json(io::read_file(spec_path));
      const BenchmarkTable t = generate_hub(spec, seed, out, {threads, !verbose});
      std::cout << "hub " << t.hash() << ": " << t.num_configs() << " configurations, y_opt " << t.y_opt() << "\n";
    } else if (run_cmd->parsed()) {
      const BenchmarkTable t = BenchmarkTable::load(hub_dir);
      MethodConfig m = MethodConfig::make(parse_method(method), t, budget);
      m.pool_size = pool;
      if (!warm.empty()) {
        if (!is_multifidelity(m.method)) throw std::invalid_argument("--warm-start needs a surrogate method");
        m.warm_start = warm;
      }
      const HpoTrace trace = run(m, t, seed);
      io::write_file_atomic(out, trace.to_jsonl());
      std::cout << method << " seed " << seed << ": " << trace.events.size() << " events, final regret "
                << trace.y_opt - trace.final_incumbent() << "\n";
    } else if (cmp->parsed()) {
      const BenchmarkTable t = BenchmarkTable::load(hub_dir);
      std::vector<RunJob> jobs;
      const auto ids = split_list(methods_arg);
      const auto seed_list = split_list(seeds_arg);
      if (ids.empty() || seed_list.empty()) throw std::invalid_argument("empty --methods or --seeds");
      for (const auto& id : ids) {
        const Method me = parse_method(id);
        for (const auto& s : seed_list) jobs.push_back({MethodConfig::make(me, t, budget), std::stoull(s)});
      }
      std::vector<HpoTrace> traces = run_all(jobs, t, threads);
      for (const auto& trace : traces)
        io::write_file_atomic(fs::path(out) / "traces" / trace_name(trace.method, trace.seed), trace.to_jsonl());
      const ComparisonReport r = ComparisonReport::build(std::move(traces));
      r.write(out);
      for (const auto& m : r.methods) {
        const MeanStderr reg = r.final_regret(m);
        const MeanStderr tau = r.tau_at(m, budget);
        std::cout << m << ": final regret " << reg.mean << " +- " << reg.stderr_ << ", tau " << tau.mean << " +- "
                  << tau.stderr_ << " (n=" << tau.n << ")\n";
      }
    } else if (tr->parsed()) {
      std::vector<BenchmarkTable> sources;
      for (const auto& d : split_list(hubs_arg)) sources.push_back(BenchmarkTable::load(d));
      if (sources.empty()) throw std::invalid_argument("no source hubs");
      const MethodConfig m = MethodConfig::make(parse_method(method), sources.front(), 1);
      const Surrogate s = fit_transfer_surrogate(m, sources, seed, events, steps);
      s.save(out);
      std::cout << "surrogate state fitted on " << s.evaluations() << " observations\n";
    } else if (rep->parsed()) {
      std::vector<HpoTrace> traces;
      for (const auto& p : expand_glob(pattern)) traces.push_back(HpoTrace::from_jsonl(io::read_file(p)));
      ComparisonReport::build(std::move(traces)).write(out);
    }
  } catch (const std::exception& e) {
    std::cerr << "fms: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
