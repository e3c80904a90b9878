#pragma once

// Deep-kernel Gaussian process over (hyperparameters, weights, partial
// learning curve, budget) with an exact NLML fit and Cholesky posterior.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fms/autodiff.hpp"
#include "fms/search_space.hpp"
#include "fms/weightgraph.hpp"

namespace fms {

enum class WeightEncoder { kNone, kGmn, kFlat };

struct SurrogateConfig {
  WeightEncoder encoder = WeightEncoder::kGmn;
  bool use_curve_cnn = true;
  bool use_model_index = true;
  std::size_t num_models = 1;
  std::size_t b_max = 20;
  std::size_t flat_width = 0;  // kFlat only
  GmnShape gmn;
  std::vector<std::size_t> hp_hidden{64, 128};
  std::size_t curve_channels1 = 4;
  std::size_t curve_channels2 = 8;
  std::size_t weight_width = 32;
  std::size_t output_width = 10;
  std::size_t initial_phase_evals = 10;
  std::size_t initial_steps = 1000;
  std::size_t refine_steps = 50;

  std::size_t hp_width() const { return (use_model_index ? num_models : 0) + 5; }
  std::size_t curve_length() const { return std::max<std::size_t>(b_max, 5); }
  std::string to_json() const;
  static SurrogateConfig from_json(const std::string& text);
};

struct WeightsRef {
  std::shared_ptr<const CheckpointedWeights> checkpoint;
  std::shared_ptr<const WeightGraph> graph;  // optional cache of build_graph(*checkpoint)

  bool present() const { return checkpoint != nullptr; }
};

struct SurrogateInput {
  HyperparameterConfig config;
  WeightsRef weights;         // absent for j = 1 and in DyHPO mode
  std::vector<double> curve;  // Y_1..Y_{j-1}
  std::size_t budget = 1;     // j
};

struct Observation {
  SurrogateInput input;
  double y = 0.0;
};

struct Prediction {
  double mean = 0.0;
  double variance = 0.0;
};

struct FitReport {
  std::size_t steps = 0;
  double initial_nlml = 0.0;
  double final_nlml = 0.0;
  bool aborted = false;
  std::string error;
};

std::vector<double> hp_features(const HyperparameterConfig& x, const SurrogateConfig& cfg);

// Records the feature extractor for `rows` on `tape`; returns z [rows, 10].
ad::Var record_extractor(ad::Tape& tape, const SurrogateConfig& cfg, std::span<const SurrogateInput* const> rows);

// Records K[a, b] = sf^2 exp(-|z_a - z_b|^2 / (2 l^2)) from the log_ell and
// log_sf leaves.
ad::Var record_kernel(ad::Tape& tape, ad::Var za, ad::Var zb);

ad::ParamSet init_surrogate_params(const SurrogateConfig& cfg, std::mt19937_64& rng);

class Posterior {
 public:
  std::vector<Prediction> predict(std::span<const SurrogateInput* const> queries) const;
  Prediction predict(const SurrogateInput& query) const;
  std::size_t size() const { return n_; }

 private:
  friend class Surrogate;
  SurrogateConfig cfg_;
  std::shared_ptr<const ad::ParamSet> params_;
  std::size_t n_ = 0;
  ad::Tensor z_;               // [n, out]
  ad::Cholesky chol_;
  std::vector<double> alpha_;  // (K + sn^2 I)^-1 y
  double sf2_ = 1.0, inv_ell2_ = 1.0;
};

class Surrogate {
 public:
  Surrogate(SurrogateConfig cfg, std::uint64_t seed);

  const SurrogateConfig& config() const { return cfg_; }
  const ad::ParamSet& params() const { return params_; }
  ad::ParamSet& mutable_params() { return params_; }
  const ad::AdamState& adam() const { return adam_; }

  std::size_t evaluations() const { return evaluations_; }
  void set_evaluations(std::size_t n) { evaluations_ = n; }
  void note_evaluation() { ++evaluations_; }
  bool initial_phase() const { return evaluations_ <= cfg_.initial_phase_evals; }
  std::size_t steps_for_phase() const { return initial_phase() ? cfg_.initial_steps : cfg_.refine_steps; }

  // `steps` Adam updates on the NLML of the whole dataset. A kernel that
  // stays non positive definite aborts the fit and restores the parameters
  // held before the call.
  FitReport fit(std::span<const Observation> data, std::size_t steps);
  double nlml(std::span<const Observation> data) const;
  std::vector<double> features(const SurrogateInput& input) const;

  Posterior posterior(std::span<const Observation> data) const;

  void save(const std::filesystem::path& path) const;
  std::string encode() const;
  static Surrogate decode(std::string_view bytes);
  static Surrogate load(const std::filesystem::path& path);

  double ell() const;
  double sf() const;
  double sn() const;

 private:
  SurrogateConfig cfg_;
  ad::ParamSet params_;
  ad::AdamState adam_;
  std::size_t evaluations_ = 0;
};

}  // namespace fms
