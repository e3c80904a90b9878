#pragma once

// Weight checkpoints, their neuron-level graph encoding, and the
// permutation-invariant graph metanetwork (GMN) that maps a graph to a
// fixed-width feature vector.

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fms/autodiff.hpp"

namespace fms {

enum class LayerKind { kDense, kConv2d };

struct LayerSpec {
  LayerKind kind = LayerKind::kDense;
  std::size_t fan_in = 0;   // input features or input channels
  std::size_t fan_out = 0;  // output units or output channels
  std::size_t kernel = 0;   // conv2d only (square kernels)
  // Dense layers fed by a conv layer: positions per input channel after
  // flattening, so fan_in == channels * spatial.
  std::size_t spatial = 1;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct ArchDescriptor {
  std::string name;
  std::size_t input_height = 0;  // conv inputs only
  std::size_t input_width = 0;
  std::vector<LayerSpec> layers;

  // Throws std::invalid_argument naming the offending layer.
  void validate() const;
  std::string to_json() const;
  static ArchDescriptor from_json(const std::string& text);
  std::size_t input_nodes() const;
  std::size_t node_count() const;
  std::size_t parameter_count() const;
  // Per-layer weight tensor shape ([out, in] or [out, in, k, k]).
  std::vector<std::uint32_t> weight_dims(std::size_t layer) const;
  bool is_conv() const;

  friend bool operator==(const ArchDescriptor&, const ArchDescriptor&) = default;
};

ArchDescriptor make_mlp(std::size_t inputs, const std::vector<std::size_t>& hidden, std::size_t outputs);
// Two 3x3 conv layers (channels c1, c2) on a single-channel side x side
// image, flattened into a dense classifier.
ArchDescriptor make_convnet(std::size_t side, std::size_t c1, std::size_t c2, std::size_t outputs);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointedWeights {
  ArchDescriptor arch;
  std::vector<std::vector<float>> weights;  // per layer, row-major by weight_dims
  std::vector<std::vector<float>> biases;   // per layer, fan_out entries

  void validate() const;
  std::vector<double> flatten() const;  // weights then bias, layer by layer
  friend bool operator==(const CheckpointedWeights&, const CheckpointedWeights&) = default;
};

// Fan-in scaled uniform initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
CheckpointedWeights random_checkpoint(const ArchDescriptor& arch, std::mt19937_64& rng);

// FMSW v1 encoding: "FMSW", u32 version, u32-length-prefixed JSON descriptor,
// then a (weight, bias) tensor-block pair per layer.
std::string encode_checkpoint(const CheckpointedWeights& ckpt);
CheckpointedWeights decode_checkpoint(std::string_view bytes);
void write_checkpoint(const std::filesystem::path& path, const CheckpointedWeights& ckpt);
CheckpointedWeights read_checkpoint(const std::filesystem::path& path);

// Applies one permutation per hidden layer to units (dense) or channels
// (conv); the function computed by the network is unchanged.
CheckpointedWeights permute_hidden(const CheckpointedWeights& ckpt,
                                   const std::vector<std::vector<std::size_t>>& perms);
std::vector<std::vector<std::size_t>> random_hidden_permutations(const ArchDescriptor& arch, std::mt19937_64& rng);

struct WeightGraph {
  static constexpr std::size_t kNodeFeatures = 5;
  // [bias, layer index / layer count, is_input, is_hidden, is_output]
  using NodeFeatures = std::array<double, kNodeFeatures>;
  struct Edge {
    std::uint32_t src;
    std::uint32_t dst;
    double weight;
  };

  std::vector<NodeFeatures> nodes;
  std::vector<std::uint32_t> layer;  // layer index of every node (inputs are 0)
  std::vector<Edge> edges;

  std::size_t num_nodes() const { return nodes.size(); }
  std::size_t num_edges() const { return edges.size(); }
};

WeightGraph build_graph(const CheckpointedWeights& ckpt);

struct GmnShape {
  std::size_t embed = 64;
  std::vector<std::size_t> layers{64, 128, 256};
  double slope = 0.01;

  std::size_t output_width() const { return layers.empty() ? embed : layers.back(); }
};

// Parameter names: <prefix>embed.w [5, E], <prefix>embed.b [E], and per
// layer l: <prefix>l<l>.self, <prefix>l<l>.nbr [d_in, d_out], <prefix>l<l>.b.
ad::ParamSet init_gmn_params(const GmnShape& shape, std::mt19937_64& rng, const std::string& prefix = "gmn.");

// Graphs of a batch packed into one block-diagonal system. Source nodes
// (no incoming edges) with equal raw features share one row; their states
// are identical at every layer, and the readout weights count them.
struct GraphBatch {
  ad::Tensor features;                              // [rows, 5]
  std::shared_ptr<const ad::SparseRows> aggregate;  // [rows, rows], edge-weighted
  std::shared_ptr<const ad::SparseRows> readout;    // [graphs, rows], mean pooling
  std::size_t graphs = 0;

  static GraphBatch build(std::span<const WeightGraph* const> graphs, bool share_sources = true);
};

// Records the GMN over a batch on `tape`, reading parameters from leaves
// named as in init_gmn_params. Returns [graphs, output_width].
ad::Var gmn_encode(ad::Tape& tape, const GraphBatch& batch, const GmnShape& shape,
                   const std::string& prefix = "gmn.");

// Feature vector of a single graph.
std::vector<double> gmn_encode(const WeightGraph& graph, const ad::ParamSet& params,
                               const GmnShape& shape = {}, const std::string& prefix = "gmn.");

// Fixed-width flattened weights for the flat (non-invariant) encoder:
// truncated or zero-padded to `width`.
std::vector<double> flat_features(const CheckpointedWeights& ckpt, std::size_t width);

}  // namespace fms
