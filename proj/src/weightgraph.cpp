#include "fms/weightgraph.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <Eigen/Core>
#include <json.hpp>

#include "fms/io.hpp"

namespace fms {

namespace {

using json = nlohmann::json;

constexpr std::uint32_t kCheckpointVersion = 1;

std::string layer_tag(std::size_t i) { return "layer " + std::to_string(i); }

const char* kind_name(LayerKind k) { return k == LayerKind::kDense ? "dense" : "conv2d"; }

LayerKind kind_from(const std::string& s) {
  if (s == "dense") return LayerKind::kDense;
  if (s == "conv2d") return LayerKind::kConv2d;
  throw std::invalid_argument("unknown layer kind '" + s + "'");
}

// Node offset of every layer boundary; offsets[0] = 0 holds the inputs.
std::vector<std::size_t> boundaries(const ArchDescriptor& arch) {
  std::vector<std::size_t> off{0, arch.input_nodes()};
  for (const LayerSpec& l : arch.layers) off.push_back(off.back() + l.fan_out);
  return off;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

// One message-passing layer, fused:
//   out = leaky(H * self + (A * H) * nbr + b)
// with inputs H [rows, din], self and nbr [din, dout], b [dout].
class GmnLayerOp final : public ad::Op {
 public:
  GmnLayerOp(std::shared_ptr<const ad::SparseRows> a, double slope) : a_(std::move(a)), slope_(slope) {}
  std::string_view name() const override { return "gmn_layer"; }

  ad::Tensor forward(std::span<const ad::Tensor* const> in) override {
    const ad::Tensor& h = *in[0];
    const ad::Tensor& ws = *in[1];
    const ad::Tensor& wn = *in[2];
    const ad::Tensor& b = *in[3];
    if (h.rank() != 2 || ws.rank() != 2 || wn.shape() != ws.shape() || b.rank() != 1 || h.dim(1) != ws.dim(0) ||
        b.dim(0) != ws.dim(1) || h.dim(0) != a_->cols)
      throw ad::ShapeError("gmn_layer: incompatible shapes " + ad::shape_str(h.shape()) + ", " +
                           ad::shape_str(ws.shape()) + ", " + ad::shape_str(wn.shape()) + ", " +
                           ad::shape_str(b.shape()));
    const std::size_t rows = h.dim(0), din = h.dim(1), dout = ws.dim(1);
    msg_.setZero(rows, din);
    aggregate(*a_, h.data().data(), msg_.data(), din, false);
    ad::Tensor out({rows, dout});
    MapMat o(out.data().data(), rows, dout);
    o.noalias() = CMapMat(h.data().data(), rows, din) * CMapMat(ws.data().data(), din, dout);
    o.noalias() += msg_ * CMapMat(wn.data().data(), din, dout);
    for (std::size_t r = 0; r < rows; ++r) {
      double* row = &out[r * dout];
      for (std::size_t c = 0; c < dout; ++c) {
        const double v = row[c] + b[c];
        row[c] = v < 0.0 ? slope_ * v : v;
      }
    }
    return out;
  }

  void backward(std::span<const ad::Tensor* const> in, const ad::Tensor& out, const ad::Tensor& g,
                std::span<ad::Tensor* const> gin) override {
    const ad::Tensor& h = *in[0];
    const std::size_t rows = h.dim(0), din = h.dim(1), dout = in[1]->dim(1);
    // slope > 0, so the sign of the output is the sign of the pre-activation.
    gp_.resize(rows, dout);
    double* gp = gp_.data();
    for (std::size_t i = 0; i < rows * dout; ++i) gp[i] = out[i] < 0.0 ? slope_ * g[i] : g[i];
    if (gin[1]) MapMat(gin[1]->data().data(), din, dout).noalias() += CMapMat(h.data().data(), rows, din).transpose() * gp_;
    if (gin[2]) MapMat(gin[2]->data().data(), din, dout).noalias() += msg_.transpose() * gp_;
    if (gin[3]) Eigen::Map<Eigen::RowVectorXd>(gin[3]->data().data(), dout) += gp_.colwise().sum();
    if (gin[0]) {
      MapMat(gin[0]->data().data(), rows, din).noalias() += gp_ * CMapMat(in[1]->data().data(), din, dout).transpose();
      scratch_.noalias() = gp_ * CMapMat(in[2]->data().data(), din, dout).transpose();
      aggregate(*a_, scratch_.data(), gin[0]->data().data(), din, true);
    }
  }

 private:
  // y += A x, or y += A^T x when `transpose`.
  static void aggregate(const ad::SparseRows& a, const double* x, double* y, std::size_t d, bool transpose) {
    for (std::size_t r = 0; r < a.rows; ++r)
      for (std::size_t e = a.row_begin[r]; e < a.row_begin[r + 1]; ++e) {
        const double w = a.weight[e];
        const double* src = transpose ? x + r * d : x + a.col[e] * d;
        double* dst = transpose ? y + a.col[e] * d : y + r * d;
        for (std::size_t k = 0; k < d; ++k) dst[k] += w * src[k];
      }
  }

  std::shared_ptr<const ad::SparseRows> a_;
  double slope_;
  RowMat msg_;  // A H of the last forward
  RowMat gp_;
  RowMat scratch_;
};

}  // namespace

// ---------------------------------------------------------------------------

void ArchDescriptor::validate() const {
  if (layers.empty()) throw std::invalid_argument("architecture '" + name + "' has no layers");
  std::size_t h = input_height, w = input_width;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    if (l.fan_in == 0 || l.fan_out == 0) throw std::invalid_argument(layer_tag(i) + ": zero width");
    if (l.kind == LayerKind::kConv2d) {
      if (i > 0 && layers[i - 1].kind != LayerKind::kConv2d)
        throw std::invalid_argument(layer_tag(i) + ": conv2d after a dense layer");
      if (i > 0 && l.fan_in != layers[i - 1].fan_out)
        throw std::invalid_argument(layer_tag(i) + ": fan_in " + std::to_string(l.fan_in) +
                                    " does not match previous fan_out " + std::to_string(layers[i - 1].fan_out));
      if (l.kernel == 0 || l.kernel > h || l.kernel > w)
        throw std::invalid_argument(layer_tag(i) + ": kernel does not fit the " + std::to_string(h) + "x" +
                                    std::to_string(w) + " input");
      if (l.spatial != 1) throw std::invalid_argument(layer_tag(i) + ": conv2d layers have spatial == 1");
      h -= l.kernel - 1;
      w -= l.kernel - 1;
    } else {
      if (l.kernel != 0) throw std::invalid_argument(layer_tag(i) + ": dense layers have no kernel");
      const bool after_conv = i > 0 && layers[i - 1].kind == LayerKind::kConv2d;
      const std::size_t expect_spatial = after_conv ? h * w : 1;
      if (l.spatial != expect_spatial)
        throw std::invalid_argument(layer_tag(i) + ": spatial " + std::to_string(l.spatial) + ", expected " +
                                    std::to_string(expect_spatial));
      if (i > 0 && l.fan_in != layers[i - 1].fan_out * l.spatial)
        throw std::invalid_argument(layer_tag(i) + ": fan_in " + std::to_string(l.fan_in) +
                                    " does not chain from previous fan_out " + std::to_string(layers[i - 1].fan_out));
    }
  }
  if (layers.back().kind != LayerKind::kDense)
    throw std::invalid_argument("architecture '" + name + "' must end in a dense layer");
}

std::string ArchDescriptor::to_json() const {
  json j;
  j["name"] = name;
  j["input_height"] = input_height;
  j["input_width"] = input_width;
  j["layers"] = json::array();
  for (const LayerSpec& l : layers) {
    json jl{{"kind", kind_name(l.kind)}, {"fan_in", l.fan_in}, {"fan_out", l.fan_out}};
    if (l.kind == LayerKind::kConv2d) jl["kernel"] = l.kernel;
    if (l.spatial != 1) jl["spatial"] = l.spatial;
    j["layers"].push_back(jl);
  }
  return j.dump();
}

ArchDescriptor ArchDescriptor::from_json(const std::string& text) {
  const json j = json::parse(text);
  ArchDescriptor a;
  a.name = j.value("name", "");
  a.input_height = j.value("input_height", std::size_t{0});
  a.input_width = j.value("input_width", std::size_t{0});
  for (const json& jl : j.at("layers")) {
    LayerSpec l;
    l.kind = kind_from(jl.at("kind").get<std::string>());
    l.fan_in = jl.at("fan_in").get<std::size_t>();
    l.fan_out = jl.at("fan_out").get<std::size_t>();
    l.kernel = jl.value("kernel", std::size_t{0});
    l.spatial = jl.value("spatial", std::size_t{1});
    a.layers.push_back(l);
  }
  return a;
}

std::size_t ArchDescriptor::input_nodes() const {
  if (layers.empty()) return 0;
  return layers.front().fan_in;
}

std::size_t ArchDescriptor::node_count() const {
  std::size_t n = input_nodes();
  for (const LayerSpec& l : layers) n += l.fan_out;
  return n;
}

std::size_t ArchDescriptor::parameter_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto d = weight_dims(i);
    n += std::accumulate(d.begin(), d.end(), std::size_t{1}, std::multiplies<>()) + layers[i].fan_out;
  }
  return n;
}

std::vector<std::uint32_t> ArchDescriptor::weight_dims(std::size_t i) const {
  const LayerSpec& l = layers.at(i);
  if (l.kind == LayerKind::kConv2d)
    return {static_cast<std::uint32_t>(l.fan_out), static_cast<std::uint32_t>(l.fan_in),
            static_cast<std::uint32_t>(l.kernel), static_cast<std::uint32_t>(l.kernel)};
  return {static_cast<std::uint32_t>(l.fan_out), static_cast<std::uint32_t>(l.fan_in)};
}

bool ArchDescriptor::is_conv() const {
  return !layers.empty() && layers.front().kind == LayerKind::kConv2d;
}

ArchDescriptor make_mlp(std::size_t inputs, const std::vector<std::size_t>& hidden, std::size_t outputs) {
  ArchDescriptor a;
  a.name = "mlp";
  std::size_t prev = inputs;
  for (std::size_t w : hidden) {
    a.name += "-" + std::to_string(w);
    a.layers.push_back({LayerKind::kDense, prev, w, 0, 1});
    prev = w;
  }
  a.layers.push_back({LayerKind::kDense, prev, outputs, 0, 1});
  a.validate();
  return a;
}

ArchDescriptor make_convnet(std::size_t side, std::size_t c1, std::size_t c2, std::size_t outputs) {
  ArchDescriptor a;
  a.name = "conv-" + std::to_string(c1) + "-" + std::to_string(c2);
  a.input_height = side;
  a.input_width = side;
  a.layers.push_back({LayerKind::kConv2d, 1, c1, 3, 1});
  a.layers.push_back({LayerKind::kConv2d, c1, c2, 3, 1});
  const std::size_t spatial = (side - 4) * (side - 4);
  a.layers.push_back({LayerKind::kDense, c2 * spatial, outputs, 0, spatial});
  a.validate();
  return a;
}

// ---------------------------------------------------------------------------

void CheckpointedWeights::validate() const {
  try {
    arch.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("invalid descriptor: ") + e.what());
  }
  if (weights.size() != arch.layers.size() || biases.size() != arch.layers.size())
    throw CheckpointError("checkpoint has " + std::to_string(weights.size()) + " weight arrays for " +
                          std::to_string(arch.layers.size()) + " layers");
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const auto d = arch.weight_dims(i);
    const std::size_t n = std::accumulate(d.begin(), d.end(), std::size_t{1}, std::multiplies<>());
    if (weights[i].size() != n)
      throw CheckpointError(layer_tag(i) + ": weight array has " + std::to_string(weights[i].size()) +
                            " values, descriptor requires " + std::to_string(n));
    if (biases[i].size() != arch.layers[i].fan_out)
      throw CheckpointError(layer_tag(i) + ": bias array has " + std::to_string(biases[i].size()) +
                            " values, descriptor requires " + std::to_string(arch.layers[i].fan_out));
  }
}

std::vector<double> CheckpointedWeights::flatten() const {
  std::vector<double> out;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    out.insert(out.end(), weights[i].begin(), weights[i].end());
    out.insert(out.end(), biases[i].begin(), biases[i].end());
  }
  return out;
}

CheckpointedWeights random_checkpoint(const ArchDescriptor& arch, std::mt19937_64& rng) {
  arch.validate();
  CheckpointedWeights c;
  c.arch = arch;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& l = arch.layers[i];
    const std::size_t fan_in = l.kind == LayerKind::kConv2d ? l.fan_in * l.kernel * l.kernel : l.fan_in;
    std::uniform_real_distribution<float> u(-1.0f / std::sqrt(static_cast<float>(fan_in)),
                                            1.0f / std::sqrt(static_cast<float>(fan_in)));
    const auto d = arch.weight_dims(i);
    std::vector<float> w(std::accumulate(d.begin(), d.end(), std::size_t{1}, std::multiplies<>()));
    for (float& v : w) v = u(rng);
    std::vector<float> b(l.fan_out);
    for (float& v : b) v = u(rng);
    c.weights.push_back(std::move(w));
    c.biases.push_back(std::move(b));
  }
  return c;
}

std::string encode_checkpoint(const CheckpointedWeights& ckpt) {
  ckpt.validate();
  io::ByteWriter w;
  w.magic("FMSW");
  w.u32(kCheckpointVersion);
  w.text(ckpt.arch.to_json());
  for (std::size_t i = 0; i < ckpt.arch.layers.size(); ++i) {
    const auto dims = ckpt.arch.weight_dims(i);
    w.block_f32(dims, ckpt.weights[i]);
    const std::uint32_t bdim = static_cast<std::uint32_t>(ckpt.arch.layers[i].fan_out);
    w.block_f32(std::span(&bdim, 1), ckpt.biases[i]);
  }
  return w.take();
}

CheckpointedWeights decode_checkpoint(std::string_view bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("FMSW");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  CheckpointedWeights c;
  c.arch = ArchDescriptor::from_json(r.text());
  std::vector<std::uint32_t> dims;
  for (std::size_t i = 0; i < c.arch.layers.size(); ++i) {
    c.weights.push_back(r.block_f32(dims));
    if (dims != c.arch.weight_dims(i)) throw CheckpointError(layer_tag(i) + ": weight block dims do not match descriptor");
    c.biases.push_back(r.block_f32(dims));
    if (dims.size() != 1 || dims[0] != c.arch.layers[i].fan_out)
      throw CheckpointError(layer_tag(i) + ": bias block dims do not match descriptor");
  }
  if (!r.at_end()) throw CheckpointError("trailing bytes after checkpoint");
  c.validate();
  return c;
}

void write_checkpoint(const std::filesystem::path& path, const CheckpointedWeights& ckpt) {
  io::write_file_atomic(path, encode_checkpoint(ckpt));
}

CheckpointedWeights read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

CheckpointedWeights permute_hidden(const CheckpointedWeights& ckpt, const std::vector<std::vector<std::size_t>>& perms) {
  ckpt.validate();
  const auto& layers = ckpt.arch.layers;
  if (perms.size() + 1 != layers.size())
    throw std::invalid_argument("expected " + std::to_string(layers.size() - 1) + " hidden permutations");
  CheckpointedWeights out = ckpt;
  for (std::size_t h = 0; h < perms.size(); ++h) {
    const std::vector<std::size_t>& p = perms[h];
    const LayerSpec& cur = layers[h];
    const LayerSpec& next = layers[h + 1];
    if (p.size() != cur.fan_out) throw std::invalid_argument(layer_tag(h) + ": permutation has wrong length");
    // Rows (output units / channels) of layer h: new unit i is old unit p[i].
    const std::vector<float> rows = out.weights[h];
    const std::size_t row = rows.size() / cur.fan_out;
    for (std::size_t i = 0; i < cur.fan_out; ++i) {
      std::copy_n(&rows[p[i] * row], row, &out.weights[h][i * row]);
      out.biases[h][i] = ckpt.biases[h][p[i]];
    }
    // Matching input slots of layer h + 1.
    const std::size_t block = next.kind == LayerKind::kConv2d ? next.kernel * next.kernel : next.spatial;
    const std::size_t in_stride = next.fan_in * (next.kind == LayerKind::kConv2d ? block : 1);
    const std::vector<float>& src = out.weights[h + 1];
    std::vector<float> dst = src;
    for (std::size_t o = 0; o < next.fan_out; ++o)
      for (std::size_t i = 0; i < cur.fan_out; ++i)
        std::copy_n(&src[o * in_stride + p[i] * block], block, &dst[o * in_stride + i * block]);
    out.weights[h + 1] = std::move(dst);
  }
  return out;
}

std::vector<std::vector<std::size_t>> random_hidden_permutations(const ArchDescriptor& arch, std::mt19937_64& rng) {
  std::vector<std::vector<std::size_t>> perms;
  for (std::size_t h = 0; h + 1 < arch.layers.size(); ++h) {
    std::vector<std::size_t> p(arch.layers[h].fan_out);
    std::iota(p.begin(), p.end(), 0);
    std::shuffle(p.begin(), p.end(), rng);
    perms.push_back(std::move(p));
  }
  return perms;
}

// ---------------------------------------------------------------------------

WeightGraph build_graph(const CheckpointedWeights& ckpt) {
  ckpt.validate();
  const ArchDescriptor& arch = ckpt.arch;
  const std::size_t depth = arch.layers.size();
  const auto off = boundaries(arch);
  WeightGraph g;
  g.nodes.reserve(off.back());
  for (std::size_t i = 0; i < arch.input_nodes(); ++i) {
    g.nodes.push_back({0.0, 0.0, 1.0, 0.0, 0.0});
    g.layer.push_back(0);
  }
  for (std::size_t l = 0; l < depth; ++l) {
    const bool output = l + 1 == depth;
    const double pos = static_cast<double>(l + 1) / static_cast<double>(depth);
    for (std::size_t v = 0; v < arch.layers[l].fan_out; ++v) {
      g.nodes.push_back({static_cast<double>(ckpt.biases[l][v]), pos, 0.0, output ? 0.0 : 1.0, output ? 1.0 : 0.0});
      g.layer.push_back(static_cast<std::uint32_t>(l + 1));
    }
  }
  if (g.nodes.empty()) throw CheckpointError("architecture '" + arch.name + "' has no nodes");

  for (std::size_t l = 0; l < depth; ++l) {
    const LayerSpec& s = arch.layers[l];
    const std::vector<float>& w = ckpt.weights[l];
    const std::size_t in_nodes = off[l + 1] - off[l];
    // Scalar weights per (in, out) node pair are averaged over kernel taps
    // or flattened spatial positions.
    const std::size_t block = s.kind == LayerKind::kConv2d ? s.kernel * s.kernel : s.spatial;
    const std::size_t in_stride = s.kind == LayerKind::kConv2d ? s.fan_in * block : s.fan_in;
    for (std::size_t v = 0; v < s.fan_out; ++v)
      for (std::size_t u = 0; u < in_nodes; ++u) {
        double acc = 0.0;
        for (std::size_t q = 0; q < block; ++q) acc += w[v * in_stride + u * block + q];
        g.edges.push_back({static_cast<std::uint32_t>(off[l] + u), static_cast<std::uint32_t>(off[l + 1] + v),
                           acc / static_cast<double>(block)});
      }
  }
  return g;
}

// ---------------------------------------------------------------------------

ad::ParamSet init_gmn_params(const GmnShape& shape, std::mt19937_64& rng, const std::string& prefix) {
  ad::ParamSet p;
  auto uniform = [&](ad::Shape s, double bound) {
    ad::Tensor t(std::move(s));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& v : t.storage()) v = u(rng);
    return t;
  };
  const double b0 = 1.0 / std::sqrt(static_cast<double>(WeightGraph::kNodeFeatures));
  p[prefix + "embed.w"] = uniform({WeightGraph::kNodeFeatures, shape.embed}, b0);
  p[prefix + "embed.b"] = uniform({shape.embed}, b0);
  std::size_t din = shape.embed;
  for (std::size_t l = 0; l < shape.layers.size(); ++l) {
    const std::size_t dout = shape.layers[l];
    const double bound = 1.0 / std::sqrt(static_cast<double>(2 * din));
    const std::string base = prefix + "l" + std::to_string(l) + ".";
    p[base + "self"] = uniform({din, dout}, bound);
    p[base + "nbr"] = uniform({din, dout}, bound);
    p[base + "b"] = uniform({dout}, bound);
    din = dout;
  }
  return p;
}

GraphBatch GraphBatch::build(std::span<const WeightGraph* const> graphs, bool share_sources) {
  if (graphs.empty()) throw std::invalid_argument("GraphBatch: no graphs");
  std::vector<WeightGraph::NodeFeatures> rows;
  std::map<WeightGraph::NodeFeatures, std::size_t> shared;
  std::vector<ad::SparseRows::Triplet> agg, pool;
  for (std::size_t gi = 0; gi < graphs.size(); ++gi) {
    const WeightGraph& g = *graphs[gi];
    if (g.nodes.empty()) throw CheckpointError("graph " + std::to_string(gi) + " has no nodes");
    std::vector<bool> has_in(g.num_nodes(), false);
    for (const auto& e : g.edges) has_in[e.dst] = true;
    std::vector<std::size_t> row_of(g.num_nodes());
    std::map<std::size_t, double> counts;
    for (std::size_t v = 0; v < g.num_nodes(); ++v) {
      if (share_sources && !has_in[v]) {
        auto [it, fresh] = shared.try_emplace(g.nodes[v], rows.size());
        if (fresh) rows.push_back(g.nodes[v]);
        row_of[v] = it->second;
      } else {
        row_of[v] = rows.size();
        rows.push_back(g.nodes[v]);
      }
      counts[row_of[v]] += 1.0;
    }
    for (const auto& e : g.edges) agg.push_back({row_of[e.dst], row_of[e.src], e.weight});
    const double inv = 1.0 / static_cast<double>(g.num_nodes());
    for (const auto& [r, c] : counts) pool.push_back({gi, r, c * inv});
  }
  GraphBatch b;
  b.graphs = graphs.size();
  b.features = ad::Tensor({rows.size(), WeightGraph::kNodeFeatures});
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy(rows[r].begin(), rows[r].end(), &b.features[r * WeightGraph::kNodeFeatures]);
  b.aggregate = std::make_shared<ad::SparseRows>(ad::SparseRows::from_triplets(rows.size(), rows.size(), std::move(agg)));
  b.readout = std::make_shared<ad::SparseRows>(ad::SparseRows::from_triplets(graphs.size(), rows.size(), std::move(pool)));
  return b;
}

ad::Var gmn_encode(ad::Tape& tape, const GraphBatch& batch, const GmnShape& shape, const std::string& prefix) {
  ad::Var h = tape.constant(batch.features);
  h = tape.affine(tape.matmul(h, tape.leaf(prefix + "embed.w")), tape.leaf(prefix + "embed.b"));
  for (std::size_t l = 0; l < shape.layers.size(); ++l) {
    const std::string base = prefix + "l" + std::to_string(l) + ".";
    if (!(shape.slope > 0.0)) throw std::invalid_argument("GMN slope must be positive");
    h = tape.custom(std::make_unique<GmnLayerOp>(batch.aggregate, shape.slope),
                    {h, tape.leaf(base + "self"), tape.leaf(base + "nbr"), tape.leaf(base + "b")});
  }
  return tape.spmm(batch.readout, h);
}

std::vector<double> gmn_encode(const WeightGraph& graph, const ad::ParamSet& params, const GmnShape& shape,
                               const std::string& prefix) {
  const WeightGraph* g = &graph;
  const GraphBatch batch = GraphBatch::build(std::span(&g, 1));
  ad::Tape tape;
  gmn_encode(tape, batch, shape, prefix);
  const ad::Tensor& out = tape.evaluate(params);
  return out.to_vector();
}

std::vector<double> flat_features(const CheckpointedWeights& ckpt, std::size_t width) {
  std::vector<double> v = ckpt.flatten();
  v.resize(width, 0.0);
  return v;
}

}  // namespace fms
