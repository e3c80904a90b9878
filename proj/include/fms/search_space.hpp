#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

namespace fms {

struct HyperparameterConfig {
  std::size_t model_index = 0;
  double dropout = 0.0;
  std::size_t batch_size = 32;
  double learning_rate = 1e-2;
  double momentum = 0.9;
  double weight_decay = 1e-4;

  std::string to_json() const;
  static HyperparameterConfig from_json(const std::string& text);
  friend bool operator==(const HyperparameterConfig&, const HyperparameterConfig&) = default;
};

struct SearchSpace {
  std::size_t num_models = 1;
  std::vector<std::size_t> batch_sizes{8, 16, 32, 64};
  double lr_min = 1e-4, lr_max = 1e-1;
  std::vector<double> momenta{0.1, 0.5, 0.9};
  double wd_min = 1e-5, wd_max = 1e-1;

  // Uniform per field; learning rate and weight decay log-uniform.
  HyperparameterConfig sample(std::mt19937_64& rng) const;
  // Throws std::invalid_argument naming the first field out of its domain.
  void validate(const HyperparameterConfig& x) const;
};

}  // namespace fms
