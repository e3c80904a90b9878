#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "fms/io.hpp"
#include "fms/weightgraph.hpp"
#include "gradcheck.hpp"
#include "reference_nets.hpp"

using namespace fms;

namespace {

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double max_abs(const std::vector<double>& a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

ArchDescriptor small_conv() {
  // 6x6 input, conv 1->2, conv 2->3, dense 3*2*2 -> 4
  return make_convnet(6, 2, 3, 4);
}

}  // namespace

TEST_CASE("3-4-2 MLP graph has 9 nodes and 20 edges") {
  std::mt19937_64 rng(1);
  auto c = random_checkpoint(make_mlp(3, {4}, 2), rng);
  auto g = build_graph(c);
  CHECK(g.num_nodes() == 9);
  CHECK(g.num_edges() == 20);
  for (std::size_t v = 0; v < 3; ++v) CHECK(g.nodes[v] == WeightGraph::NodeFeatures{0, 0, 1, 0, 0});
  CHECK(g.nodes[3][0] == doctest::Approx(c.biases[0][0]));
  CHECK(g.nodes[3][1] == 0.5);
  CHECK(g.nodes[3][3] == 1.0);
  CHECK(g.nodes[8][1] == 1.0);
  CHECK(g.nodes[8][4] == 1.0);
  // Edge from input 2 to hidden unit 1 carries W0[1][2].
  bool found = false;
  for (const auto& e : g.edges)
    if (e.src == 2 && e.dst == 4) {
      found = true;
      CHECK(e.weight == static_cast<double>(c.weights[0][1 * 3 + 2]));
    }
  CHECK(found);
}

TEST_CASE("hidden permutation relabels the graph") {
  std::mt19937_64 rng(2);
  auto c = random_checkpoint(make_mlp(3, {5, 4}, 2), rng);
  auto perms = random_hidden_permutations(c.arch, rng);
  auto p = permute_hidden(c, perms);
  auto g = build_graph(c), gp = build_graph(p);
  // node relabelling: permuted node i of layer h is original node perms[h][i]
  std::vector<std::size_t> map(g.num_nodes());
  std::iota(map.begin(), map.end(), 0);
  std::size_t off = 3;
  for (std::size_t h = 0; h < perms.size(); ++h) {
    for (std::size_t i = 0; i < perms[h].size(); ++i) map[off + i] = off + perms[h][i];
    off += perms[h].size();
  }
  for (std::size_t v = 0; v < g.num_nodes(); ++v) CHECK(gp.nodes[v] == g.nodes[map[v]]);
  std::map<std::pair<std::size_t, std::size_t>, double> orig;
  for (const auto& e : g.edges) orig[{e.src, e.dst}] = e.weight;
  REQUIRE(gp.num_edges() == g.num_edges());
  for (const auto& e : gp.edges) CHECK(orig.at({map[e.src], map[e.dst]}) == e.weight);
}

TEST_CASE("permuting hidden units preserves the network function") {
  std::mt19937_64 rng(3);
  for (const auto& arch : {make_mlp(4, {6, 5}, 3), small_conv()}) {
    auto c = random_checkpoint(arch, rng);
    auto p = permute_hidden(c, random_hidden_permutations(arch, rng));
    CHECK(!(p == c));
    std::vector<double> x(arch.is_conv() ? arch.input_height * arch.input_width : arch.input_nodes());
    std::uniform_real_distribution<double> u(-1, 1);
    for (double& v : x) v = u(rng);
    CHECK(max_abs_diff(testing::reference_forward(c, x), testing::reference_forward(p, x)) < 1e-12);
  }
}

TEST_CASE("conv edges carry kernel means") {
  ArchDescriptor a;
  a.name = "conv";
  a.input_height = 5;
  a.input_width = 5;
  a.layers = {{LayerKind::kConv2d, 2, 3, 3, 1}, {LayerKind::kDense, 3 * 9, 2, 0, 9}};
  a.validate();
  std::mt19937_64 rng(4);
  auto c = random_checkpoint(a, rng);
  auto g = build_graph(c);
  CHECK(g.num_nodes() == 2 + 3 + 2);
  std::size_t conv_edges = 0;
  for (const auto& e : g.edges) {
    if (e.dst >= 5) continue;
    ++conv_edges;
    const std::size_t u = e.src, v = e.dst - 2;
    double s = 0.0;
    for (std::size_t a2 = 0; a2 < 3; ++a2)
      for (std::size_t b = 0; b < 3; ++b) s += c.weights[0][((v * 2 + u) * 3 + a2) * 3 + b];
    CHECK(std::abs(e.weight - s / 9.0) < 1e-12);
  }
  CHECK(conv_edges == 6);
  // dense-after-conv edges average the 9 positions of each channel
  for (const auto& e : g.edges) {
    if (e.dst < 5) continue;
    const std::size_t ch = e.src - 2, o = e.dst - 5;
    double s = 0.0;
    for (std::size_t q = 0; q < 9; ++q) s += c.weights[1][o * 27 + ch * 9 + q];
    CHECK(std::abs(e.weight - s / 9.0) < 1e-12);
  }
}

TEST_CASE("checkpoint round trip and byte layout") {
  std::mt19937_64 rng(5);
  auto c = random_checkpoint(small_conv(), rng);
  const std::string bytes = encode_checkpoint(c);
  CHECK(bytes.substr(0, 4) == "FMSW");
  io::ByteReader r(bytes);
  r.expect_magic("FMSW");
  CHECK(r.u32() == 1);
  CHECK(ArchDescriptor::from_json(r.text()) == c.arch);
  std::vector<std::uint32_t> dims;
  auto w0 = r.block_f32(dims);
  CHECK(dims == std::vector<std::uint32_t>{2, 1, 3, 3});
  CHECK(w0 == c.weights[0]);
  CHECK(decode_checkpoint(bytes) == c);

  const auto dir = std::filesystem::temp_directory_path() / "fms_test_ckpt";
  std::filesystem::create_directories(dir);
  write_checkpoint(dir / "a.fmsw", c);
  CHECK(read_checkpoint(dir / "a.fmsw") == c);
  std::filesystem::remove_all(dir);
}

TEST_CASE("malformed checkpoints are rejected") {
  std::mt19937_64 rng(6);
  auto c = random_checkpoint(make_mlp(3, {4}, 2), rng);
  SUBCASE("mismatched weight count names the layer") {
    auto bad = c;
    bad.weights[1].pop_back();
    try {
      encode_checkpoint(bad);
      FAIL("expected failure");
    } catch (const CheckpointError& e) {
      CHECK(std::string(e.what()).find("layer 1") != std::string::npos);
    }
  }
  SUBCASE("truncated bytes") {
    auto bytes = encode_checkpoint(c);
    bytes.resize(bytes.size() - 3);
    CHECK_THROWS(decode_checkpoint(bytes));
  }
  SUBCASE("bad magic") {
    auto bytes = encode_checkpoint(c);
    bytes[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bytes), io::FormatError);
  }
  SUBCASE("trailing bytes") { CHECK_THROWS_AS(decode_checkpoint(encode_checkpoint(c) + "x"), CheckpointError); }
}

TEST_CASE("GMN output is invariant to hidden permutations") {
  std::mt19937_64 rng(7);
  const GmnShape shape;
  const auto params = init_gmn_params(shape, rng);
  const std::vector<ArchDescriptor> archs{make_mlp(16, {8}, 4), make_mlp(16, {16, 8}, 4),
                                          make_mlp(16, {32, 32, 8}, 4), small_conv()};
  int pairs = 0;
  for (int trial = 0; trial < 60; ++trial) {
    const auto& arch = archs[trial % archs.size()];
    auto c = random_checkpoint(arch, rng);
    auto p = permute_hidden(c, random_hidden_permutations(arch, rng));
    auto a = gmn_encode(build_graph(c), params, shape);
    auto b = gmn_encode(build_graph(p), params, shape);
    CHECK(a.size() == 256);
    CHECK(max_abs_diff(a, b) <= 1e-9 * std::max(1.0, max_abs(a)));
    ++pairs;
  }
  CHECK(pairs >= 50);
}

TEST_CASE("GMN matches the per-node reference encoder") {
  std::mt19937_64 rng(8);
  const GmnShape shape;
  const auto params = init_gmn_params(shape, rng);
  for (const auto& arch : {make_mlp(16, {8}, 4), make_mlp(16, {16, 16}, 4), small_conv()}) {
    auto g = build_graph(random_checkpoint(arch, rng));
    auto fast = gmn_encode(g, params, shape);
    auto ref = testing::reference_gmn(g, params, shape);
    CHECK(max_abs_diff(fast, ref) < 1e-9 * std::max(1.0, max_abs(ref)));
  }
}

TEST_CASE("batched encoding with shared source rows matches single-graph encoding") {
  std::mt19937_64 rng(9);
  const GmnShape shape;
  const auto params = init_gmn_params(shape, rng);
  std::vector<WeightGraph> graphs;
  for (const auto& arch : {make_mlp(16, {8}, 4), make_mlp(16, {32, 8}, 4), small_conv(), make_mlp(16, {8}, 4)})
    graphs.push_back(build_graph(random_checkpoint(arch, rng)));
  std::vector<const WeightGraph*> ptrs;
  for (const auto& g : graphs) ptrs.push_back(&g);
  for (bool share : {true, false}) {
    auto batch = GraphBatch::build(ptrs, share);
    if (share) CHECK(batch.features.shape()[0] < 16 + 8 + 4 + 16 + 32 + 8 + 4);
    ad::Tape t;
    gmn_encode(t, batch, shape);
    const ad::Tensor& out = t.evaluate(params);
    for (std::size_t gi = 0; gi < graphs.size(); ++gi) {
      auto ref = testing::reference_gmn(graphs[gi], params, shape);
      std::vector<double> row(out.data().begin() + gi * 256, out.data().begin() + (gi + 1) * 256);
      CHECK(max_abs_diff(row, ref) < 1e-9 * std::max(1.0, max_abs(ref)));
    }
  }
}

TEST_CASE("GMN separates different weights") {
  std::mt19937_64 rng(10);
  const GmnShape shape;
  const auto params = init_gmn_params(shape, rng);
  const auto arch = make_mlp(8, {8}, 4);
  auto zero = random_checkpoint(arch, rng);
  for (auto& w : zero.weights) std::fill(w.begin(), w.end(), 0.0f);
  for (auto& b : zero.biases) std::fill(b.begin(), b.end(), 0.0f);
  auto z1 = gmn_encode(build_graph(zero), params, shape);
  auto z2 = gmn_encode(build_graph(zero), params, shape);
  CHECK(z1 == z2);
  auto r1 = gmn_encode(build_graph(random_checkpoint(arch, rng)), params, shape);
  auto r2 = gmn_encode(build_graph(random_checkpoint(arch, rng)), params, shape);
  CHECK(max_abs_diff(r1, z1) > 1e-6);
  CHECK(max_abs_diff(r1, r2) > 1e-6);
}

TEST_CASE("GMN parameter gradients pass the finite-difference check") {
  std::mt19937_64 rng(11);
  const GmnShape shape{4, {3, 2}, 0.01};
  auto params = init_gmn_params(shape, rng);
  std::vector<WeightGraph> graphs{build_graph(random_checkpoint(make_mlp(3, {4}, 2), rng)),
                                  build_graph(random_checkpoint(make_mlp(3, {2, 2}, 2), rng))};
  std::vector<const WeightGraph*> ptrs{&graphs[0], &graphs[1]};
  auto batch = GraphBatch::build(ptrs);
  ad::Tape t;
  t.sum(gmn_encode(t, batch, shape));
  std::vector<std::string> names;
  for (const auto& [k, v] : params) names.push_back(k);
  auto r = testing::check_gradients(t, {params.begin(), params.end()}, names);
  CHECK_MESSAGE(r.max_rel_error < 1e-4, r.worst);
}

TEST_CASE("descriptor validation names the offending layer") {
  ArchDescriptor a = make_mlp(3, {4}, 2);
  a.layers[1].fan_in = 5;
  try {
    a.validate();
    FAIL("expected failure");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("layer 1") != std::string::npos);
  }
  CHECK(ArchDescriptor::from_json(small_conv().to_json()) == small_conv());
}

TEST_CASE("flat features pad and truncate") {
  std::mt19937_64 rng(12);
  auto c = random_checkpoint(make_mlp(3, {4}, 2), rng);
  CHECK(c.arch.parameter_count() == 26);
  auto f = flat_features(c, 30);
  CHECK(f.size() == 30);
  CHECK(f[29] == 0.0);
  CHECK(f[0] == static_cast<double>(c.weights[0][0]));
  CHECK(flat_features(c, 10).size() == 10);
}
