#pragma once

// Synthetic model hubs: small target networks trained across sampled
// hyperparameter configurations, with per-epoch validation accuracy and
// checkpoints cached on disk.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "fms/search_space.hpp"
#include "fms/surrogate.hpp"
#include "fms/weightgraph.hpp"

namespace fms {

struct Dataset {
  std::size_t dim = 0;
  std::vector<double> x;  // n x dim, row-major
  std::vector<int> y;
  std::size_t size() const { return y.size(); }
};

struct Task {
  Dataset train;
  Dataset valid;
};

struct SynthTasks {
  Task vectors;  // 4-class Gaussian mixture, 16 features
  Task images;   // 4-class 8x8 single-channel blob/stripe images
};

inline constexpr std::size_t kClasses = 4;
inline constexpr std::size_t kVectorDim = 16;
inline constexpr std::size_t kImageSide = 8;

// n samples per task, exactly n/4 (+-1) per class, split 80/20.
SynthTasks synth_task(std::uint64_t seed, std::size_t n = 1000);

struct RosterEntry {
  std::string kind = "mlp";          // "mlp" or "conv"
  std::vector<std::size_t> hidden;   // mlp hidden widths, or conv channels
  ArchDescriptor arch() const;
  friend bool operator==(const RosterEntry&, const RosterEntry&) = default;
};

struct HubSpec {
  std::vector<RosterEntry> roster;
  std::size_t n_cfg = 50;
  std::size_t b_max = 20;
  std::size_t samples = 1000;
  std::vector<std::size_t> batch_sizes{8, 16, 32, 64};

  // MLPs with widths {8,16,32} x depths {1,2,3}, plus the tiny conv net
  // when `with_conv`.
  static HubSpec standard(bool with_conv = true);
  void validate() const;
  SearchSpace space() const;
  std::size_t flat_width() const;  // largest parameter count in the roster
  std::string to_json() const;
  static HubSpec from_json(const std::string& text);
  // Stable hash of (spec, seed).
  std::string hash(std::uint64_t seed) const;
};

struct TrainResult {
  std::vector<double> curve;
  std::vector<CheckpointedWeights> checkpoints;
  bool diverged = false;
};

// SGD with momentum, weight decay and inverted dropout on hidden
// activations; cross-entropy loss; validation accuracy and a checkpoint
// after every epoch. Accuracy is measured with the checkpointed (float)
// weights so that replaying a checkpoint reproduces it.
TrainResult train_target(const HyperparameterConfig& config, const ArchDescriptor& arch, const Task& task,
                         std::size_t b_max, std::uint64_t seed);

// Validation accuracy of a checkpoint on `data`.
double evaluate_accuracy(const CheckpointedWeights& ckpt, const Dataset& data);

class BenchmarkError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BenchmarkTable {
 public:
  BenchmarkTable() = default;
  static BenchmarkTable load(const std::filesystem::path& dir);
  // Table held in memory (toy benchmarks in tests).
  static BenchmarkTable in_memory(HubSpec spec, std::vector<HyperparameterConfig> configs,
                                  std::vector<std::vector<double>> curves,
                                  std::vector<std::vector<CheckpointedWeights>> checkpoints);

  const HubSpec& spec() const { return s_->spec; }
  const std::string& hash() const { return s_->hash; }
  std::size_t num_configs() const { return s_->configs.size(); }
  std::size_t b_max() const { return s_->spec.b_max; }
  const HyperparameterConfig& config(std::size_t c) const { return s_->configs.at(c); }
  const std::vector<double>& curve(std::size_t c) const { return s_->curves.at(c); }
  // Y_epoch of config c (epochs are 1-based); throws BenchmarkError when missing.
  double accuracy(std::size_t c, std::size_t epoch) const;
  bool diverged(std::size_t c) const { return s_->diverged.at(c); }
  // Checkpoint after `epoch` of config c, loaded lazily and cached.
  WeightsRef weights(std::size_t c, std::size_t epoch) const;
  std::size_t checkpoint_accesses() const { return s_->accesses.load(); }
  void reset_access_count() const { s_->accesses = 0; }

  // Best accuracy of any config at any epoch.
  double y_opt() const;
  // Accuracy at b_max of every config.
  std::vector<double> final_scores() const;

 private:
  struct Shared {
    HubSpec spec;
    std::string hash;
    std::filesystem::path dir;  // empty for in-memory tables
    std::vector<HyperparameterConfig> configs;
    std::vector<std::vector<double>> curves;
    std::vector<bool> diverged;
    std::vector<std::vector<CheckpointedWeights>> memory;
    std::mutex mu;
    std::map<std::pair<std::size_t, std::size_t>, WeightsRef> cache;
    std::atomic<std::size_t> accesses{0};
  };
  std::shared_ptr<Shared> s_;
};

std::string config_id(std::size_t index);

struct GenerateOptions {
  std::size_t threads = 0;  // 0: hardware concurrency
  bool quiet = true;
};

// Samples spec.n_cfg configurations from `seed`, trains each and writes
// manifest.json, curves/<id>.json and ckpt/<id>/<epoch>.fmsw under `dir`.
// Completed configurations of an interrupted run with the same spec hash
// are kept; a different hash is refused.
BenchmarkTable generate_hub(const HubSpec& spec, std::uint64_t seed, const std::filesystem::path& dir,
                            const GenerateOptions& options = {});

}  // namespace fms
