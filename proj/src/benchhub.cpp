#include "fms/benchhub.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <iostream>
#include <numeric>
#include <thread>

#include <json.hpp>

#include "fms/io.hpp"

namespace fms {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;
using ad::Tensor;
using ad::Var;

constexpr int kFormatVersion = 1;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Balanced labels in random order.
std::vector<int> balanced_labels(std::size_t n, std::mt19937_64& rng) {
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i % kClasses);
  std::shuffle(y.begin(), y.end(), rng);
  return y;
}

Task split(Dataset all) {
  const std::size_t n_train = all.size() * 8 / 10;
  Task t;
  t.train.dim = t.valid.dim = all.dim;
  t.train.x.assign(all.x.begin(), all.x.begin() + static_cast<std::ptrdiff_t>(n_train * all.dim));
  t.train.y.assign(all.y.begin(), all.y.begin() + static_cast<std::ptrdiff_t>(n_train));
  t.valid.x.assign(all.x.begin() + static_cast<std::ptrdiff_t>(n_train * all.dim), all.x.end());
  t.valid.y.assign(all.y.begin() + static_cast<std::ptrdiff_t>(n_train), all.y.end());
  return t;
}

Dataset mixture(std::size_t n, std::mt19937_64& rng) {
  constexpr std::size_t kClusters = 3;
  std::normal_distribution<double> nd;
  std::vector<double> centers(kClasses * kClusters * kVectorDim);
  for (double& c : centers) c = 1.0 * nd(rng);
  Dataset d;
  d.dim = kVectorDim;
  d.y = balanced_labels(n, rng);
  d.x.resize(n * kVectorDim);
  std::uniform_int_distribution<std::size_t> cluster(0, kClusters - 1);
  for (std::size_t i = 0; i < n; ++i) {
    const double* c = &centers[(static_cast<std::size_t>(d.y[i]) * kClusters + cluster(rng)) * kVectorDim];
    for (std::size_t k = 0; k < kVectorDim; ++k) d.x[i * kVectorDim + k] = c[k] + 1.0 * nd(rng);
  }
  return d;
}

// 0: horizontal bar, 1: vertical bar, 2: small blob, 3: wide blob.
Dataset images(std::size_t n, std::mt19937_64& rng) {
  constexpr std::size_t s = kImageSide;
  std::normal_distribution<double> noise(0.0, 0.35);
  std::uniform_real_distribution<double> pos(1.5, s - 2.5);
  std::uniform_int_distribution<std::size_t> line(1, s - 2);
  Dataset d;
  d.dim = s * s;
  d.y = balanced_labels(n, rng);
  d.x.resize(n * d.dim);
  for (std::size_t i = 0; i < n; ++i) {
    double* img = &d.x[i * d.dim];
    const int cls = d.y[i];
    if (cls < 2) {
      const std::size_t at = line(rng);
      for (std::size_t r = 0; r < s; ++r)
        for (std::size_t c = 0; c < s; ++c) img[r * s + c] = (cls == 0 ? r : c) == at ? 1.0 : 0.0;
    } else {
      const double cy = pos(rng), cx = pos(rng), width = cls == 2 ? 0.8 : 1.8;
      for (std::size_t r = 0; r < s; ++r)
        for (std::size_t c = 0; c < s; ++c) {
          const double dy = static_cast<double>(r) - cy, dx = static_cast<double>(c) - cx;
          img[r * s + c] = std::exp(-(dy * dy + dx * dx) / (2.0 * width * width));
        }
    }
    for (std::size_t k = 0; k < d.dim; ++k) img[k] += noise(rng);
  }
  return d;
}

// Training-time parameters: dense weights stored [in, out], conv weights
// as in the checkpoint.
using Params = std::map<std::string, Tensor>;

std::string wname(std::size_t l) { return "w" + std::to_string(l); }
std::string bname(std::size_t l) { return "b" + std::to_string(l); }

Params params_from(const CheckpointedWeights& c) {
  Params p;
  for (std::size_t l = 0; l < c.arch.layers.size(); ++l) {
    const LayerSpec& s = c.arch.layers[l];
    const auto& w = c.weights[l];
    if (s.kind == LayerKind::kConv2d) {
      p[wname(l)] = Tensor({s.fan_out, s.fan_in, s.kernel, s.kernel}, std::vector<double>(w.begin(), w.end()));
    } else {
      Tensor t({s.fan_in, s.fan_out});
      for (std::size_t o = 0; o < s.fan_out; ++o)
        for (std::size_t i = 0; i < s.fan_in; ++i) t.at(i, o) = w[o * s.fan_in + i];
      p[wname(l)] = std::move(t);
    }
    p[bname(l)] = Tensor::vector(std::vector<double>(c.biases[l].begin(), c.biases[l].end()));
  }
  return p;
}

CheckpointedWeights checkpoint_from(const ArchDescriptor& arch, const Params& p) {
  CheckpointedWeights c;
  c.arch = arch;
  for (std::size_t l = 0; l < arch.layers.size(); ++l) {
    const LayerSpec& s = arch.layers[l];
    const Tensor& t = p.at(wname(l));
    std::vector<float> w(t.size());
    if (s.kind == LayerKind::kConv2d) {
      for (std::size_t i = 0; i < t.size(); ++i) w[i] = static_cast<float>(t[i]);
    } else {
      for (std::size_t o = 0; o < s.fan_out; ++o)
        for (std::size_t i = 0; i < s.fan_in; ++i) w[o * s.fan_in + i] = static_cast<float>(t.at(i, o));
    }
    const Tensor& b = p.at(bname(l));
    std::vector<float> bf(b.size());
    for (std::size_t i = 0; i < b.size(); ++i) bf[i] = static_cast<float>(b[i]);
    c.weights.push_back(std::move(w));
    c.biases.push_back(std::move(bf));
  }
  return c;
}

// Records logits for a batch; `masks` (one per hidden layer, may be empty)
// are leaf names bound to inverted-dropout masks.
Var record_network(ad::Tape& t, const ArchDescriptor& arch, Tensor x, bool dropout) {
  const std::size_t n = x.dim(0);
  Var h;
  if (arch.is_conv())
    h = t.constant(x.reshaped({n, 1, arch.input_height, arch.input_width}));
  else
    h = t.constant(std::move(x));
  for (std::size_t l = 0; l < arch.layers.size(); ++l) {
    const LayerSpec& s = arch.layers[l];
    if (s.kind == LayerKind::kConv2d) {
      h = t.conv2d(h, t.leaf(wname(l)), t.leaf(bname(l)));
    } else {
      if (l > 0 && arch.layers[l - 1].kind == LayerKind::kConv2d) h = t.reshape(h, {n, s.fan_in});
      h = t.affine(t.matmul(h, t.leaf(wname(l))), t.leaf(bname(l)));
    }
    if (l + 1 < arch.layers.size()) {
      h = t.leaky_relu(h);
      if (dropout) h = t.mul(h, t.leaf("mask" + std::to_string(l), false));
    }
  }
  return h;
}

Tensor rows_of(const Dataset& d, std::span<const std::size_t> idx) {
  Tensor x({idx.size(), d.dim});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(&d.x[idx[i] * d.dim], d.dim, &x[i * d.dim]);
  return x;
}

bool all_finite(const Params& p) {
  for (const auto& [k, t] : p)
    for (double v : t.storage())
      if (!std::isfinite(v)) return false;
  return true;
}

std::string read_text(const fs::path& p) {
  try {
    return io::read_file(p);
  } catch (const std::exception& e) {
    throw BenchmarkError(std::string("unreadable hub: ") + e.what());
  }
}

}  // namespace

SynthTasks synth_task(std::uint64_t seed, std::size_t n) {
  if (n < 2 * kClasses) throw std::invalid_argument("synth_task: too few samples");
  std::mt19937_64 rv(splitmix(seed ^ 0x5eed0001ULL));
  std::mt19937_64 ri(splitmix(seed ^ 0x5eed0002ULL));
  return {split(mixture(n, rv)), split(images(n, ri))};
}

// ---------------------------------------------------------------------------

ArchDescriptor RosterEntry::arch() const {
  if (kind == "mlp") return make_mlp(kVectorDim, hidden, kClasses);
  if (kind == "conv") {
    if (hidden.size() != 2) throw std::invalid_argument("conv roster entry needs two channel counts");
    return make_convnet(kImageSide, hidden[0], hidden[1], kClasses);
  }
  throw std::invalid_argument("unknown roster kind '" + kind + "'");
}

HubSpec HubSpec::standard(bool with_conv) {
  HubSpec s;
  for (std::size_t depth : {1, 2, 3})
    for (std::size_t width : {8, 16, 32}) s.roster.push_back({"mlp", std::vector<std::size_t>(depth, width)});
  if (with_conv) s.roster.push_back({"conv", {4, 8}});
  return s;
}

void HubSpec::validate() const {
  if (roster.empty()) throw std::invalid_argument("hub spec: empty roster");
  if (n_cfg < 2) throw std::invalid_argument("hub spec: n_cfg must be >= 2");
  if (b_max < 2) throw std::invalid_argument("hub spec: b_max must be >= 2");
  if (samples < 40) throw std::invalid_argument("hub spec: samples must be >= 40");
  if (batch_sizes.empty()) throw std::invalid_argument("hub spec: no batch sizes");
  for (const RosterEntry& r : roster) r.arch();
}

SearchSpace HubSpec::space() const {
  SearchSpace s;
  s.num_models = roster.size();
  s.batch_sizes = batch_sizes;
  return s;
}

std::size_t HubSpec::flat_width() const {
  std::size_t w = 0;
  for (const RosterEntry& r : roster) w = std::max(w, r.arch().parameter_count());
  return w;
}

std::string HubSpec::to_json() const {
  json j;
  j["n_cfg"] = n_cfg;
  j["b_max"] = b_max;
  j["samples"] = samples;
  j["batch_sizes"] = batch_sizes;
  j["roster"] = json::array();
  for (const RosterEntry& r : roster) j["roster"].push_back({{"kind", r.kind}, {"hidden", r.hidden}});
  return j.dump();
}

HubSpec HubSpec::from_json(const std::string& text) {
  const json j = json::parse(text);
  HubSpec s;
  s.n_cfg = j.value("n_cfg", s.n_cfg);
  s.b_max = j.value("b_max", s.b_max);
  s.samples = j.value("samples", s.samples);
  if (j.contains("batch_sizes")) s.batch_sizes = j.at("batch_sizes").get<std::vector<std::size_t>>();
  if (j.contains("roster")) {
    for (const json& r : j.at("roster"))
      s.roster.push_back({r.at("kind").get<std::string>(), r.at("hidden").get<std::vector<std::size_t>>()});
  } else {
    s.roster = standard(j.value("with_conv", true)).roster;
  }
  s.validate();
  return s;
}

std::string HubSpec::hash(std::uint64_t seed) const {
  return io::hex64(io::fnv1a(to_json() + "/" + std::to_string(seed) + "/v" + std::to_string(kFormatVersion)));
}

// ---------------------------------------------------------------------------

double evaluate_accuracy(const CheckpointedWeights& ckpt, const Dataset& data) {
  if (data.size() == 0) return 0.0;
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  ad::Tape t;
  record_network(t, ckpt.arch, rows_of(data, idx), false);
  const Tensor& logits = t.evaluate(params_from(ckpt));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double* row = &logits[i * kClasses];
    const auto best = static_cast<int>(std::max_element(row, row + kClasses) - row);
    if (best == data.y[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

TrainResult train_target(const HyperparameterConfig& config, const ArchDescriptor& arch, const Task& task,
                         std::size_t b_max, std::uint64_t seed) {
  arch.validate();
  const Dataset& train = task.train;
  const std::size_t expect_dim = arch.is_conv() ? arch.input_height * arch.input_width : arch.input_nodes();
  if (train.dim != expect_dim)
    throw std::invalid_argument("train_target: task has " + std::to_string(train.dim) + " features, '" + arch.name +
                                "' expects " + std::to_string(expect_dim));
  std::mt19937_64 rng(seed);
  Params params = params_from(random_checkpoint(arch, rng));
  Params velocity;
  for (const auto& [k, v] : params) velocity[k] = Tensor(v.shape());

  const double keep = 1.0 - config.dropout;
  const bool dropout = config.dropout > 0.0;
  std::bernoulli_distribution keep_unit(std::clamp(keep, 0.0, 1.0));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult out;
  CheckpointedWeights last = checkpoint_from(arch, params);
  double last_acc = evaluate_accuracy(last, task.valid);
  for (std::size_t epoch = 1; epoch <= b_max; ++epoch) {
    if (!out.diverged) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t start = 0; start < order.size() && !out.diverged; start += config.batch_size) {
        const std::size_t end = std::min(order.size(), start + config.batch_size);
        const std::span<const std::size_t> idx(order.data() + start, end - start);
        std::vector<int> labels;
        for (std::size_t i : idx) labels.push_back(train.y[i]);
        ad::Tape t;
        const Var logits = record_network(t, arch, rows_of(train, idx), dropout);
        t.softmax_xent(logits, labels);
        std::map<std::string, Tensor> leaves = params;
        if (dropout) {
          // Masks need the activation shapes; a forward with unit masks
          // is avoided by deriving shapes from the architecture.
          std::size_t h = arch.input_height, w = arch.input_width;
          for (std::size_t l = 0; l + 1 < arch.layers.size(); ++l) {
            const LayerSpec& s = arch.layers[l];
            ad::Shape shape;
            if (s.kind == LayerKind::kConv2d) {
              h -= s.kernel - 1;
              w -= s.kernel - 1;
              shape = {idx.size(), s.fan_out, h, w};
            } else {
              shape = {idx.size(), s.fan_out};
            }
            Tensor m(shape);
            for (double& v : m.storage()) v = keep > 0.0 && keep_unit(rng) ? 1.0 / keep : 0.0;
            leaves["mask" + std::to_string(l)] = std::move(m);
          }
        }
        const double loss = t.evaluate(leaves).item();
        if (!std::isfinite(loss)) {
          out.diverged = true;
          break;
        }
        t.backward();
        const auto grads = t.leaf_grads();
        for (auto& [name, p] : params) {
          const Tensor& g = grads.at(name);
          Tensor& v = velocity.at(name);
          for (std::size_t i = 0; i < p.size(); ++i) {
            v[i] = config.momentum * v[i] + g[i] + config.weight_decay * p[i];
            p[i] -= config.learning_rate * v[i];
          }
        }
        if (!all_finite(params)) out.diverged = true;
      }
      if (!out.diverged) {
        CheckpointedWeights ck = checkpoint_from(arch, params);
        bool finite = true;
        for (const auto& w : ck.weights)
          for (float v : w) finite = finite && std::isfinite(v);
        if (finite) {
          last = std::move(ck);
          last_acc = evaluate_accuracy(last, task.valid);
        } else {
          out.diverged = true;
        }
      }
    }
    out.curve.push_back(last_acc);
    out.checkpoints.push_back(last);
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string config_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04zu", index);
  return buf;
}

double BenchmarkTable::accuracy(std::size_t c, std::size_t epoch) const {
  if (c >= num_configs()) throw BenchmarkError("benchmark has no config " + std::to_string(c));
  const auto& y = s_->curves[c];
  if (epoch == 0 || epoch > y.size())
    throw BenchmarkError("benchmark missing config " + config_id(c) + " epoch " + std::to_string(epoch));
  return y[epoch - 1];
}

WeightsRef BenchmarkTable::weights(std::size_t c, std::size_t epoch) const {
  if (c >= num_configs() || epoch == 0 || epoch > b_max())
    throw BenchmarkError("benchmark missing checkpoint for config " + std::to_string(c) + " epoch " +
                         std::to_string(epoch));
  ++s_->accesses;
  std::lock_guard lock(s_->mu);
  auto it = s_->cache.find({c, epoch});
  if (it != s_->cache.end()) return it->second;
  std::shared_ptr<const CheckpointedWeights> ck;
  if (s_->dir.empty()) {
    ck = std::make_shared<const CheckpointedWeights>(s_->memory.at(c).at(epoch - 1));
  } else {
    const fs::path p = s_->dir / "ckpt" / config_id(c) / (std::to_string(epoch) + ".fmsw");
    try {
      ck = std::make_shared<const CheckpointedWeights>(read_checkpoint(p));
    } catch (const std::exception& e) {
      throw BenchmarkError("benchmark checkpoint " + p.string() + ": " + e.what());
    }
  }
  WeightsRef ref{ck, std::make_shared<const WeightGraph>(build_graph(*ck))};
  s_->cache.emplace(std::make_pair(c, epoch), ref);
  return ref;
}

double BenchmarkTable::y_opt() const {
  double best = 0.0;
  for (const auto& c : s_->curves)
    for (double v : c) best = std::max(best, v);
  return best;
}

std::vector<double> BenchmarkTable::final_scores() const {
  std::vector<double> out;
  for (const auto& c : s_->curves) out.push_back(c.back());
  return out;
}

BenchmarkTable BenchmarkTable::in_memory(HubSpec spec, std::vector<HyperparameterConfig> configs,
                                         std::vector<std::vector<double>> curves,
                                         std::vector<std::vector<CheckpointedWeights>> checkpoints) {
  if (configs.size() != curves.size() || (!checkpoints.empty() && checkpoints.size() != configs.size()))
    throw BenchmarkError("in-memory benchmark: inconsistent sizes");
  for (const auto& c : curves)
    if (c.size() != spec.b_max) throw BenchmarkError("in-memory benchmark: curve length differs from b_max");
  BenchmarkTable t;
  t.s_ = std::make_shared<Shared>();
  t.s_->spec = std::move(spec);
  t.s_->configs = std::move(configs);
  t.s_->curves = std::move(curves);
  t.s_->diverged.assign(t.s_->configs.size(), false);
  t.s_->memory = std::move(checkpoints);
  json j;
  for (const auto& c : t.s_->curves) j.push_back(c);
  t.s_->hash = io::hex64(io::fnv1a(t.s_->spec.to_json() + j.dump()));
  return t;
}

BenchmarkTable BenchmarkTable::load(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw BenchmarkError("unreadable hub: " + mpath.string() + " does not exist");
  json m;
  try {
    m = json::parse(read_text(mpath));
  } catch (const json::exception& e) {
    throw BenchmarkError("unreadable hub manifest: " + std::string(e.what()));
  }
  if (m.value("format_version", 0) != kFormatVersion) throw BenchmarkError("unsupported hub format version");
  BenchmarkTable t;
  t.s_ = std::make_shared<Shared>();
  t.s_->spec = HubSpec::from_json(m.at("spec").dump());
  t.s_->dir = dir;
  const auto seed = m.at("seed").get<std::uint64_t>();
  t.s_->hash = m.at("spec_hash").get<std::string>();
  if (t.s_->hash != t.s_->spec.hash(seed)) throw BenchmarkError("spec hash mismatch in " + mpath.string());
  for (const json& c : m.at("configs")) {
    const std::string id = c.at("id").get<std::string>();
    t.s_->configs.push_back(HyperparameterConfig::from_json(c.at("hyperparameters").dump()));
    const json cj = json::parse(read_text(dir / "curves" / (id + ".json")));
    auto curve = cj.at("curve").get<std::vector<double>>();
    if (curve.size() != t.s_->spec.b_max) throw BenchmarkError("curve of config " + id + " is incomplete");
    t.s_->curves.push_back(std::move(curve));
    t.s_->diverged.push_back(c.at("diverged").get<bool>());
  }
  if (t.s_->configs.size() != t.s_->spec.n_cfg) throw BenchmarkError("manifest lists the wrong number of configs");
  return t;
}

BenchmarkTable generate_hub(const HubSpec& spec, std::uint64_t seed, const fs::path& dir,
                            const GenerateOptions& options) {
  spec.validate();
  const std::string hash = spec.hash(seed);
  fs::create_directories(dir);
  const fs::path stamp = dir / "spec.json";
  if (fs::exists(stamp)) {
    const json j = json::parse(read_text(stamp));
    if (j.value("spec_hash", "") != hash)
      throw BenchmarkError("spec hash mismatch: " + dir.string() + " holds a different hub; use a clean directory");
  } else {
    if (!fs::is_empty(dir)) throw BenchmarkError(dir.string() + " is not empty and holds no hub; use a clean directory");
    io::write_file_atomic(stamp, json{{"spec_hash", hash}, {"seed", seed}, {"spec", json::parse(spec.to_json())}}.dump());
  }

  const SearchSpace space = spec.space();
  std::mt19937_64 rng(seed);
  std::vector<HyperparameterConfig> configs;
  for (std::size_t i = 0; i < spec.n_cfg; ++i) configs.push_back(space.sample(rng));
  const SynthTasks tasks = synth_task(seed, spec.samples);

  std::vector<bool> diverged(spec.n_cfg, false);
  std::atomic<std::size_t> next{0};
  std::mutex err_mu, log_mu;
  std::exception_ptr error;
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next++;
      if (i >= spec.n_cfg) return;
      try {
        const std::string id = config_id(i);
        const fs::path curve_path = dir / "curves" / (id + ".json");
        if (fs::exists(curve_path)) {
          diverged[i] = json::parse(read_text(curve_path)).at("diverged").get<bool>();
          continue;
        }
        const RosterEntry& entry = spec.roster[configs[i].model_index];
        const ArchDescriptor arch = entry.arch();
        const Task& task = entry.kind == "conv" ? tasks.images : tasks.vectors;
        TrainResult r = train_target(configs[i], arch, task, spec.b_max, splitmix(seed * 1000003ULL + i));
        for (std::size_t e = 0; e < r.checkpoints.size(); ++e)
          write_checkpoint(dir / "ckpt" / id / (std::to_string(e + 1) + ".fmsw"), r.checkpoints[e]);
        io::write_file_atomic(curve_path, json{{"id", id}, {"curve", r.curve}, {"diverged", r.diverged}}.dump());
        diverged[i] = r.diverged;
        if (!options.quiet) {
          std::lock_guard lock(log_mu);
          std::cerr << "config " << id << " " << arch.name << " final accuracy " << r.curve.back() << "\n";
        }
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!error) error = std::current_exception();
        next = spec.n_cfg;
      }
    }
  };
  std::size_t threads = options.threads ? options.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, spec.n_cfg);
  std::vector<std::thread> pool;
  for (std::size_t k = 1; k < threads; ++k) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);

  json m;
  m["format_version"] = kFormatVersion;
  m["seed"] = seed;
  m["spec_hash"] = hash;
  m["spec"] = json::parse(spec.to_json());
  m["configs"] = json::array();
  for (std::size_t i = 0; i < spec.n_cfg; ++i)
    m["configs"].push_back({{"id", config_id(i)},
                            {"arch", spec.roster[configs[i].model_index].arch().name},
                            {"hyperparameters", json::parse(configs[i].to_json())},
                            {"diverged", static_cast<bool>(diverged[i])}});
  io::write_file_atomic(dir / "manifest.json", m.dump(1));
  return BenchmarkTable::load(dir);
}

}  // namespace fms
