#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <set>

#include "fms/hpo.hpp"
#include "fms/io.hpp"

using namespace fms;
namespace fs = std::filesystem;

namespace {

// Toy table: curves given explicitly, random checkpoints per epoch.
BenchmarkTable toy_table(const std::vector<std::vector<double>>& curves, std::uint64_t seed = 1) {
  HubSpec spec;
  spec.roster = {{"mlp", {4}}, {"mlp", {3, 3}}};
  spec.n_cfg = curves.size();
  spec.b_max = curves.front().size();
  std::mt19937_64 rng(seed);
  const SearchSpace space = spec.space();
  std::vector<HyperparameterConfig> configs;
  std::vector<std::vector<CheckpointedWeights>> ckpts;
  for (std::size_t c = 0; c < curves.size(); ++c) {
    configs.push_back(space.sample(rng));
    const ArchDescriptor arch = spec.roster[configs.back().model_index].arch();
    ckpts.emplace_back();
    for (std::size_t e = 0; e < spec.b_max; ++e) ckpts.back().push_back(random_checkpoint(arch, rng));
  }
  return BenchmarkTable::in_memory(spec, configs, curves, ckpts);
}

BenchmarkTable random_table(std::size_t n, std::size_t b_max, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.2, 0.9);
  std::vector<std::vector<double>> curves;
  for (std::size_t c = 0; c < n; ++c) {
    const double top = u(rng);
    std::vector<double> y;
    for (std::size_t e = 1; e <= b_max; ++e)
      y.push_back(0.25 + (top - 0.25) * (1 - std::exp(-static_cast<double>(e) / 2.0)));
    curves.push_back(y);
  }
  return toy_table(curves, seed);
}

MethodConfig quick(Method m, const BenchmarkTable& t, std::size_t budget) {
  MethodConfig c = MethodConfig::make(m, t, budget);
  c.surrogate.initial_steps = 30;
  c.surrogate.refine_steps = 10;
  return c;
}

void check_trace_invariants(const HpoTrace& tr, const BenchmarkTable& t) {
  std::map<std::size_t, std::size_t> last;
  double inc = -1.0;
  std::size_t spent = 0;
  for (const auto& e : tr.events) {
    spent += e.epochs;
    CHECK(e.cumulative == spent);
    inc = std::max(inc, e.y);
    CHECK(e.incumbent == inc);
    CHECK(e.y == t.accuracy(e.config, e.budget));
    if (is_multifidelity(parse_method(tr.method))) {
      CHECK(e.epochs == 1);
      CHECK(e.budget == last[e.config] + 1);
      last[e.config] = e.budget;
    }
  }
}

}  // namespace

TEST_CASE("method ids") {
  for (Method m : all_methods()) CHECK(parse_method(method_id(m)) == m);
  CHECK(all_methods().size() == 9);
  CHECK_THROWS_WITH_AS(parse_method("bohb"), doctest::Contains("unknown method id 'bohb'"), std::invalid_argument);
  const BenchmarkTable t = random_table(3, 4, 1);
  const MethodConfig d = MethodConfig::make(Method::kDyhpo, t, 10);
  CHECK(d.surrogate.encoder == WeightEncoder::kNone);
  CHECK_FALSE(d.surrogate.use_model_index);
  const MethodConfig p = MethodConfig::make(Method::kDyhpoPtmIndex, t, 10);
  CHECK(p.surrogate.use_model_index);
  CHECK_FALSE(p.use_weights());
  const MethodConfig f = MethodConfig::make(Method::kFmsFlatNoCnn, t, 10);
  CHECK(f.surrogate.encoder == WeightEncoder::kFlat);
  CHECK_FALSE(f.surrogate.use_curve_cnn);
  CHECK(f.surrogate.flat_width == t.spec().flat_width());
}

TEST_CASE("budget of one epoch") {
  const BenchmarkTable t = random_table(4, 3, 2);
  for (Method m : all_methods()) {
    CAPTURE(method_id(m));
    const HpoTrace tr = run(quick(m, t, 1), t, 7);
    REQUIRE(tr.events.size() == 1);
    CHECK(tr.events[0].budget == 1);
    CHECK(tr.spent() == 1);
  }
}

TEST_CASE("budget accounting and history discipline") {
  const BenchmarkTable t = random_table(4, 3, 3);
  for (Method m : all_methods()) {
    CAPTURE(method_id(m));
    SUBCASE("budget below the consumable total") {
      const HpoTrace tr = run(quick(m, t, 7), t, 1);
      CHECK(tr.spent() == 7);
      check_trace_invariants(tr, t);
    }
    SUBCASE("budget above the consumable total") {
      const HpoTrace tr = run(quick(m, t, 100), t, 1);
      CHECK(tr.spent() == 12);
      check_trace_invariants(tr, t);
      CHECK(tr.snapshots.size() == 2);
    }
  }
}

TEST_CASE("runs are deterministic") {
  const BenchmarkTable t = random_table(5, 4, 4);
  for (Method m : {Method::kRandom, Method::kGp, Method::kFmsGmn, Method::kFmsFlat, Method::kDyhpo}) {
    CAPTURE(method_id(m));
    CHECK(run(quick(m, t, 9), t, 3).to_jsonl() == run(quick(m, t, 9), t, 3).to_jsonl());
  }
  CHECK(run(quick(Method::kRandom, t, 9), t, 3).to_jsonl() != run(quick(Method::kRandom, t, 9), t, 4).to_jsonl());
}

TEST_CASE("dyhpo never reads checkpoints") {
  const BenchmarkTable t = random_table(5, 4, 5);
  for (Method m : {Method::kDyhpo, Method::kDyhpoNoCnn, Method::kDyhpoPtmIndex, Method::kGp, Method::kRandom}) {
    t.reset_access_count();
    run(quick(m, t, 10), t, 1);
    CHECK(t.checkpoint_accesses() == 0);
  }
  t.reset_access_count();
  run(quick(Method::kFmsGmn, t, 10), t, 1);
  CHECK(t.checkpoint_accesses() > 0);
}

TEST_CASE("dominant configuration is found") {
  // Config 1 beats the others at every epoch, so the final incumbent must be
  // its full-budget accuracy.
  const BenchmarkTable t = toy_table({{0.30, 0.35, 0.40, 0.42}, {0.50, 0.60, 0.70, 0.80}, {0.20, 0.30, 0.32, 0.33}});
  const MethodConfig m = MethodConfig::make(Method::kFmsGmn, t, 8);
  const HpoTrace tr = run(m, t, 11);
  CHECK(tr.final_incumbent() == 0.80);
  check_trace_invariants(tr, t);
}

TEST_CASE("gp baseline finds the optimum of a five-config table") {
  const BenchmarkTable t = random_table(5, 4, 6);
  const HpoTrace tr = run(MethodConfig::make(Method::kGp, t, 10 * 4), t, 2);
  const auto finals = t.final_scores();
  CHECK(tr.events.size() == 5);
  CHECK(tr.final_incumbent() == *std::max_element(finals.begin(), finals.end()));
}

TEST_CASE("baseline gp prior and posterior") {
  SearchSpace space;
  space.num_models = 2;
  BaselineGp gp(space);
  HyperparameterConfig near, far;
  near.learning_rate = 1e-4;
  near.weight_decay = 1e-5;
  near.batch_size = 8;
  near.momentum = 0.1;
  far.model_index = 1;
  far.dropout = 1.0;
  far.learning_rate = 1e-1;
  far.weight_decay = 1e-1;
  far.batch_size = 64;
  far.momentum = 0.9;
  gp.fit({}, {}, 10);
  CHECK(gp.predict(far).mean == 0.0);
  CHECK(gp.predict(far).variance == doctest::Approx(gp.sf2()));
  gp.fit({near}, {0.6}, 10);
  CHECK(gp.predict(far).variance == doctest::Approx(gp.sf2()).epsilon(1e-3));
  CHECK(gp.predict(near).variance < 0.05 * gp.sf2());
  CHECK(gp.predict(near).mean == doctest::Approx(0.6 / (1 + 0.01)));

  const BenchmarkTable t = random_table(6, 2, 7);
  std::mt19937_64 rng(1);
  std::set<std::size_t> seen;
  const std::vector<std::size_t> unstarted{0, 2, 3, 5};
  BaselineGp empty(t.spec().space());
  for (int i = 0; i < 200; ++i) seen.insert(baseline_gp_step(empty, true, 0.0, unstarted, t, rng));
  CHECK(seen == std::set<std::size_t>{0, 2, 3, 5});
}

TEST_CASE("ranking snapshots") {
  const BenchmarkTable t = random_table(6, 3, 8);
  SUBCASE("one score per config, prior before any fit") {
    MethodConfig m = quick(Method::kFmsGmn, t, 1);
    const HpoTrace tr = run(m, t, 1);
    REQUIRE(tr.snapshots.size() == 2);
    for (const auto& s : tr.snapshots) {
      CHECK(s.scores.size() == 6);
      CHECK_FALSE(s.fitted);
      for (double v : s.scores) CHECK(v == 0.0);
    }
  }
  SUBCASE("fitted snapshots at half and full budget") {
    for (Method me : {Method::kFmsGmn, Method::kDyhpo, Method::kGp, Method::kRandom}) {
      const HpoTrace tr = run(quick(me, t, 10), t, 1);
      REQUIRE(tr.snapshots.size() == 2);
      CHECK(tr.snapshots[0].budget == 5);
      CHECK(tr.snapshots[1].budget == 10);
      CHECK(tr.snapshots[0].spent >= 5);
      CHECK(tr.snapshots[1].fitted);
      CHECK(tr.snapshots[1].scores.size() == 6);
    }
  }
}

TEST_CASE("trace json lines round trip") {
  const BenchmarkTable t = random_table(4, 3, 9);
  const HpoTrace tr = run(quick(Method::kFmsFlat, t, 6), t, 5);
  const std::string text = tr.to_jsonl();
  CHECK(std::count(text.begin(), text.end(), '\n') == 1 + 6 + 2);
  const HpoTrace back = HpoTrace::from_jsonl(text);
  CHECK(back.to_jsonl() == text);
  CHECK(back.hub_hash == t.hash());
  CHECK(back.true_scores == t.final_scores());
  CHECK_THROWS(HpoTrace::from_jsonl("{\"type\":\"event\"}\n"));
  CHECK_THROWS(HpoTrace::from_jsonl(""));
}

TEST_CASE("warm start from a transfer surrogate") {
  const BenchmarkTable target = random_table(5, 3, 10);
  const std::vector<BenchmarkTable> sources{random_table(5, 3, 11), random_table(5, 3, 12)};
  MethodConfig m = quick(Method::kFmsGmn, target, 6);
  const Surrogate s = fit_transfer_surrogate(m, sources, 1, 8, 20);
  CHECK(s.evaluations() == 16);
  CHECK_FALSE(s.initial_phase());
  const fs::path path = fs::temp_directory_path() / ("fms_test_warm_" + std::to_string(::getpid()) + ".fmss");
  s.save(path);
  m.warm_start = path;
  const HpoTrace tr = run(m, target, 2);
  CHECK(tr.warm_start);
  CHECK(tr.spent() == 6);
  for (const auto& e : tr.events)
    if (e.fit_steps) CHECK(e.fit_steps == m.surrogate.refine_steps);
  CHECK(run(m, target, 2).to_jsonl() == tr.to_jsonl());

  MethodConfig other = quick(Method::kFmsFlat, target, 6);
  other.warm_start = path;
  CHECK_THROWS_AS(run(other, target, 2), std::invalid_argument);
  fs::remove(path);
}

TEST_CASE("missing checkpoints fail hard") {
  const fs::path dir = fs::temp_directory_path() / ("fms_test_hpo_hub_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  HubSpec spec;
  spec.roster = {{"mlp", {4}}};
  spec.n_cfg = 3;
  spec.b_max = 3;
  spec.samples = 80;
  generate_hub(spec, 1, dir, {1, true});
  for (std::size_t c = 0; c < 3; ++c) fs::remove(dir / "ckpt" / config_id(c) / "1.fmsw");
  const BenchmarkTable t = BenchmarkTable::load(dir);
  CHECK_THROWS_AS(run(quick(Method::kFmsGmn, t, 9), t, 1), BenchmarkError);
  CHECK_NOTHROW(run(quick(Method::kDyhpo, t, 9), t, 1));
  fs::remove_all(dir);
}
