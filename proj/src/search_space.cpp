#include "fms/search_space.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

namespace fms {

std::string HyperparameterConfig::to_json() const {
  nlohmann::json j{{"model_index", model_index}, {"dropout", dropout},   {"batch_size", batch_size},
                   {"learning_rate", learning_rate}, {"momentum", momentum}, {"weight_decay", weight_decay}};
  return j.dump();
}

HyperparameterConfig HyperparameterConfig::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  HyperparameterConfig x;
  x.model_index = j.at("model_index").get<std::size_t>();
  x.dropout = j.at("dropout").get<double>();
  x.batch_size = j.at("batch_size").get<std::size_t>();
  x.learning_rate = j.at("learning_rate").get<double>();
  x.momentum = j.at("momentum").get<double>();
  x.weight_decay = j.at("weight_decay").get<double>();
  return x;
}

HyperparameterConfig SearchSpace::sample(std::mt19937_64& rng) const {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto log_uniform = [&](double lo, double hi) { return std::exp(std::log(lo) + u(rng) * (std::log(hi) - std::log(lo))); };
  auto pick = [&](std::size_t n) { return std::min<std::size_t>(n - 1, static_cast<std::size_t>(u(rng) * n)); };
  HyperparameterConfig x;
  x.model_index = pick(num_models);
  x.dropout = u(rng);
  x.batch_size = batch_sizes[pick(batch_sizes.size())];
  x.learning_rate = log_uniform(lr_min, lr_max);
  x.momentum = momenta[pick(momenta.size())];
  x.weight_decay = log_uniform(wd_min, wd_max);
  return x;
}

void SearchSpace::validate(const HyperparameterConfig& x) const {
  auto fail = [](const std::string& field) { throw std::invalid_argument("hyperparameter '" + field + "' out of domain"); };
  if (x.model_index >= num_models) fail("model_index");
  if (!(x.dropout >= 0.0 && x.dropout <= 1.0)) fail("dropout");
  if (std::find(batch_sizes.begin(), batch_sizes.end(), x.batch_size) == batch_sizes.end()) fail("batch_size");
  if (!(x.learning_rate >= lr_min && x.learning_rate <= lr_max)) fail("learning_rate");
  if (std::find(momenta.begin(), momenta.end(), x.momentum) == momenta.end()) fail("momentum");
  if (!(x.weight_decay >= wd_min && x.weight_decay <= wd_max)) fail("weight_decay");
}

}  // namespace fms
