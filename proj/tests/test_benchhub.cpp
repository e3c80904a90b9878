#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "fms/benchhub.hpp"
#include "fms/io.hpp"
#include "reference_nets.hpp"

using namespace fms;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fms_test_benchhub_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

double replay_accuracy(const CheckpointedWeights& c, const Dataset& d) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    std::vector<double> x(d.x.begin() + static_cast<std::ptrdiff_t>(i * d.dim),
                          d.x.begin() + static_cast<std::ptrdiff_t>((i + 1) * d.dim));
    const auto logits = testing::reference_forward(c, x);
    if (std::max_element(logits.begin(), logits.end()) - logits.begin() == d.y[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(d.size());
}

HubSpec small_spec(std::size_t n_cfg, std::size_t b_max) {
  HubSpec s;
  s.roster = {{"mlp", {8}}, {"mlp", {8, 8}}, {"conv", {2, 3}}};
  s.n_cfg = n_cfg;
  s.b_max = b_max;
  s.samples = 200;
  return s;
}

}  // namespace

TEST_CASE("synthetic tasks are deterministic and balanced") {
  const SynthTasks a = synth_task(5), b = synth_task(5), c = synth_task(6);
  CHECK(a.vectors.train.x == b.vectors.train.x);
  CHECK(a.images.valid.y == b.images.valid.y);
  CHECK(a.vectors.train.x != c.vectors.train.x);
  for (const Task* t : {&a.vectors, &a.images}) {
    CHECK(t->train.size() == 800);
    CHECK(t->valid.size() == 200);
    std::vector<int> count(kClasses, 0);
    for (int y : t->train.y) ++count[static_cast<std::size_t>(y)];
    for (int y : t->valid.y) ++count[static_cast<std::size_t>(y)];
    for (int n : count) CHECK(n == 250);
  }
  CHECK(a.vectors.train.dim == kVectorDim);
  CHECK(a.images.train.dim == kImageSide * kImageSide);
}

TEST_CASE("search space sampling is log-uniform") {
  // Binomial oracle: P(lr < 1e-3) = 1/3 on [1e-4, 1e-1].
  SearchSpace s;
  std::mt19937_64 rng(11);
  const int n = 30000;
  int below = 0;
  for (int i = 0; i < n; ++i) below += s.sample(rng).learning_rate < 1e-3;
  const double p = 1.0 / 3.0, sd = std::sqrt(n * p * (1 - p));
  CHECK(std::abs(below - n * p) < 4 * sd);
}

TEST_CASE("training learns and is reproducible") {
  const SynthTasks tasks = synth_task(1);
  HyperparameterConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.batch_size = 32;
  cfg.dropout = 0.1;
  const ArchDescriptor arch = make_mlp(kVectorDim, {16, 16}, kClasses);
  const TrainResult r = train_target(cfg, arch, tasks.vectors, 20, 3);
  REQUIRE(r.curve.size() == 20);
  REQUIRE(r.checkpoints.size() == 20);
  CHECK_FALSE(r.diverged);
  CHECK(r.curve.back() > 0.25);
  const TrainResult again = train_target(cfg, arch, tasks.vectors, 20, 3);
  CHECK(again.curve == r.curve);
  CHECK(encode_checkpoint(again.checkpoints[7]) == encode_checkpoint(r.checkpoints[7]));

  SUBCASE("replayed checkpoints reproduce the curve") {
    for (std::size_t e = 0; e < r.curve.size(); e += 4)
      CHECK(std::abs(replay_accuracy(r.checkpoints[e], tasks.vectors.valid) - r.curve[e]) <= 1e-6);
  }
  SUBCASE("zero learning rate keeps the initial network") {
    HyperparameterConfig still = cfg;
    still.learning_rate = 0.0;
    const TrainResult z = train_target(still, arch, tasks.vectors, 5, 3);
    for (double y : z.curve) CHECK(y == z.curve.front());
  }
}

TEST_CASE("conv targets train and replay") {
  const SynthTasks tasks = synth_task(2, 400);
  HyperparameterConfig cfg;
  cfg.learning_rate = 3e-2;
  cfg.batch_size = 16;
  const ArchDescriptor arch = make_convnet(kImageSide, 4, 8, kClasses);
  const TrainResult r = train_target(cfg, arch, tasks.images, 6, 4);
  CHECK(r.curve.back() > 0.25);
  CHECK(std::abs(replay_accuracy(r.checkpoints.back(), tasks.images.valid) - r.curve.back()) <= 1e-6);
  CHECK_THROWS_AS(train_target(cfg, arch, tasks.vectors, 2, 4), std::invalid_argument);
}

TEST_CASE("divergent training freezes the curve") {
  const SynthTasks tasks = synth_task(1, 200);
  HyperparameterConfig cfg;
  cfg.learning_rate = 1e30;
  cfg.momentum = 0.9;
  const TrainResult r = train_target(cfg, make_mlp(kVectorDim, {8}, kClasses), tasks.vectors, 6, 1);
  CHECK(r.diverged);
  REQUIRE(r.curve.size() == 6);
  for (std::size_t e = 1; e < 6; ++e) CHECK(r.curve[e] == r.curve[e - 1]);
  for (const auto& c : r.checkpoints)
    for (const auto& w : c.weights)
      for (float v : w) CHECK(std::isfinite(v));
}

TEST_CASE("hub generation, reload and resumption") {
  const fs::path dir = scratch_dir("gen");
  const HubSpec spec = small_spec(5, 4);
  const BenchmarkTable t = generate_hub(spec, 9, dir, {2, true});
  CHECK(t.num_configs() == 5);
  CHECK(t.b_max() == 4);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "ckpt"))
    files += e.is_regular_file() && e.path().extension() == ".fmsw";
  CHECK(files == 5 * 4);
  CHECK(fs::exists(dir / "manifest.json"));

  const SynthTasks tasks = synth_task(9, spec.samples);
  for (std::size_t c = 0; c < t.num_configs(); ++c) {
    for (std::size_t e = 1; e <= t.b_max(); ++e) {
      const WeightsRef w = t.weights(c, e);
      const Task& task = w.checkpoint->arch.is_conv() ? tasks.images : tasks.vectors;
      CHECK(std::abs(replay_accuracy(*w.checkpoint, task.valid) - t.accuracy(c, e)) <= 1e-6);
    }
  }
  CHECK(t.checkpoint_accesses() == 5 * 4);
  t.reset_access_count();
  CHECK(t.checkpoint_accesses() == 0);
  CHECK_THROWS_AS(t.accuracy(0, 5), BenchmarkError);
  CHECK_THROWS_AS(t.weights(5, 1), BenchmarkError);
  const std::vector<double> finals = t.final_scores();
  CHECK(t.y_opt() >= *std::max_element(finals.begin(), finals.end()));

  SUBCASE("identical reruns are byte-identical") {
    const fs::path other = scratch_dir("gen2");
    generate_hub(spec, 9, other, {1, true});
    for (std::size_t c = 0; c < 5; ++c) {
      const std::string id = config_id(c);
      CHECK(io::read_file(dir / "curves" / (id + ".json")) == io::read_file(other / "curves" / (id + ".json")));
      CHECK(io::read_file(dir / "ckpt" / id / "3.fmsw") == io::read_file(other / "ckpt" / id / "3.fmsw"));
    }
    CHECK(io::read_file(dir / "manifest.json") == io::read_file(other / "manifest.json"));
    fs::remove_all(other);
  }
  SUBCASE("interrupted generation resumes") {
    fs::remove(dir / "manifest.json");
    fs::remove(dir / "curves" / (config_id(2) + ".json"));
    const BenchmarkTable r = generate_hub(spec, 9, dir, {1, true});
    CHECK(r.curve(2) == t.curve(2));
    CHECK(r.hash() == t.hash());
  }
  SUBCASE("a different spec is refused") {
    CHECK_THROWS_AS(generate_hub(small_spec(6, 4), 9, dir), BenchmarkError);
    CHECK_THROWS_AS(generate_hub(spec, 10, dir), BenchmarkError);
  }
  SUBCASE("missing files are reported") {
    fs::remove(dir / "ckpt" / config_id(1) / "2.fmsw");
    const BenchmarkTable fresh = BenchmarkTable::load(dir);
    CHECK_THROWS_AS(fresh.weights(1, 2), BenchmarkError);
    CHECK_THROWS_AS(BenchmarkTable::load(dir / "nowhere"), BenchmarkError);
  }
  fs::remove_all(dir);
}

TEST_CASE("hub spec json round trip and hash") {
  const HubSpec s = HubSpec::standard();
  const HubSpec r = HubSpec::from_json(s.to_json());
  CHECK(r.roster == s.roster);
  CHECK(r.hash(1) == s.hash(1));
  CHECK(r.hash(1) != s.hash(2));
  CHECK(s.space().num_models == 10);
  CHECK(HubSpec::standard(false).roster.size() == 9);
  HubSpec bad = s;
  bad.roster.push_back({"rnn", {3}});
  CHECK_THROWS(bad.validate());
}

TEST_CASE("in-memory tables") {
  HubSpec spec = small_spec(2, 3);
  const ArchDescriptor arch = make_mlp(3, {2}, 2);
  std::mt19937_64 rng(1);
  std::vector<std::vector<CheckpointedWeights>> ck(2);
  for (auto& v : ck)
    for (int e = 0; e < 3; ++e) v.push_back(random_checkpoint(arch, rng));
  const BenchmarkTable t =
      BenchmarkTable::in_memory(spec, {HyperparameterConfig{}, HyperparameterConfig{}}, {{0.1, 0.2, 0.3}, {0.5, 0.4, 0.6}}, ck);
  CHECK(t.y_opt() == 0.6);
  CHECK(t.accuracy(1, 2) == 0.4);
  CHECK(*t.weights(0, 2).checkpoint == ck[0][1]);
  CHECK(t.weights(0, 2).graph == t.weights(0, 2).graph);
  CHECK(t.checkpoint_accesses() == 3);
  CHECK_THROWS_AS(BenchmarkTable::in_memory(spec, {HyperparameterConfig{}}, {{0.1, 0.2}}, {}), BenchmarkError);
}
