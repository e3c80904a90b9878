#pragma once

#include <memory>
#include <random>
#include <vector>

#include "fms/surrogate.hpp"

namespace fms::testing {

inline SurrogateConfig tiny_config(WeightEncoder enc = WeightEncoder::kGmn) {
  SurrogateConfig c;
  c.encoder = enc;
  c.num_models = 2;
  c.b_max = 6;
  c.flat_width = 40;
  c.gmn = GmnShape{4, {3, 3}, 0.01};
  c.hp_hidden = {6, 5};
  c.weight_width = 4;
  c.output_width = 3;
  return c;
}

inline WeightsRef random_weights(std::mt19937_64& rng, const ArchDescriptor& arch) {
  auto c = std::make_shared<const CheckpointedWeights>(random_checkpoint(arch, rng));
  return {c, std::make_shared<const WeightGraph>(build_graph(*c))};
}

inline WeightsRef with_permuted(const WeightsRef& w, std::mt19937_64& rng) {
  auto c = std::make_shared<const CheckpointedWeights>(
      permute_hidden(*w.checkpoint, random_hidden_permutations(w.checkpoint->arch, rng)));
  return {c, std::make_shared<const WeightGraph>(build_graph(*c))};
}

// Observations of random configs at budgets 1..b_max with weights present
// for budgets above 1.
inline std::vector<Observation> toy_dataset(std::size_t n, const SurrogateConfig& cfg, std::mt19937_64& rng) {
  SearchSpace space;
  space.num_models = cfg.num_models;
  const std::vector<ArchDescriptor> archs{make_mlp(3, {4}, 2), make_mlp(3, {3, 2}, 2)};
  std::uniform_real_distribution<double> u(0.2, 0.9);
  std::vector<Observation> out;
  for (std::size_t i = 0; i < n; ++i) {
    Observation o;
    o.input.config = space.sample(rng);
    o.input.budget = 1 + i % cfg.b_max;
    for (std::size_t e = 1; e < o.input.budget; ++e) o.input.curve.push_back(u(rng));
    if (o.input.budget > 1) o.input.weights = random_weights(rng, archs[o.input.config.model_index]);
    o.y = u(rng);
    out.push_back(std::move(o));
  }
  return out;
}

}  // namespace fms::testing
