#include "fms/surrogate.hpp"

#include <cmath>
#include <map>
#include <numeric>

#include <json.hpp>

#include "fms/io.hpp"

namespace fms {

namespace {

using json = nlohmann::json;
using ad::Tensor;
using ad::Var;

constexpr std::uint32_t kStateVersion = 1;

const char* encoder_name(WeightEncoder e) {
  switch (e) {
    case WeightEncoder::kNone:
      return "none";
    case WeightEncoder::kGmn:
      return "gmn";
    case WeightEncoder::kFlat:
      return "flat";
  }
  return "none";
}

WeightEncoder encoder_from(const std::string& s) {
  if (s == "none") return WeightEncoder::kNone;
  if (s == "gmn") return WeightEncoder::kGmn;
  if (s == "flat") return WeightEncoder::kFlat;
  throw std::invalid_argument("unknown weight encoder '" + s + "'");
}

Tensor uniform(ad::Shape shape, double bound, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (double& v : t.storage()) v = u(rng);
  return t;
}

std::size_t fused_width(const SurrogateConfig& cfg) {
  return cfg.hp_hidden.back() + (cfg.use_curve_cnn ? cfg.curve_channels2 : 0) + 1 + cfg.weight_width;
}

std::vector<const SurrogateInput*> inputs_of(std::span<const Observation> data) {
  std::vector<const SurrogateInput*> rows;
  rows.reserve(data.size());
  for (const Observation& o : data) rows.push_back(&o.input);
  return rows;
}

double kernel_value(std::span<const double> a, std::span<const double> b, double sf2, double inv_ell2) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return sf2 * std::exp(-0.5 * d * inv_ell2);
}

// Forward-only evaluation of the extractor.
Tensor extract(const SurrogateConfig& cfg, const ad::ParamSet& params, std::span<const SurrogateInput* const> rows) {
  ad::Tape tape;
  record_extractor(tape, cfg, rows);
  return tape.evaluate(params);
}

}  // namespace

std::string SurrogateConfig::to_json() const {
  json j{{"encoder", encoder_name(encoder)},
         {"use_curve_cnn", use_curve_cnn},
         {"use_model_index", use_model_index},
         {"num_models", num_models},
         {"b_max", b_max},
         {"flat_width", flat_width},
         {"gmn_embed", gmn.embed},
         {"gmn_layers", gmn.layers},
         {"gmn_slope", gmn.slope},
         {"hp_hidden", hp_hidden},
         {"curve_channels", {curve_channels1, curve_channels2}},
         {"weight_width", weight_width},
         {"output_width", output_width},
         {"initial_phase_evals", initial_phase_evals},
         {"initial_steps", initial_steps},
         {"refine_steps", refine_steps}};
  return j.dump();
}

SurrogateConfig SurrogateConfig::from_json(const std::string& text) {
  const json j = json::parse(text);
  SurrogateConfig c;
  c.encoder = encoder_from(j.at("encoder").get<std::string>());
  c.use_curve_cnn = j.at("use_curve_cnn").get<bool>();
  c.use_model_index = j.at("use_model_index").get<bool>();
  c.num_models = j.at("num_models").get<std::size_t>();
  c.b_max = j.at("b_max").get<std::size_t>();
  c.flat_width = j.at("flat_width").get<std::size_t>();
  c.gmn.embed = j.at("gmn_embed").get<std::size_t>();
  c.gmn.layers = j.at("gmn_layers").get<std::vector<std::size_t>>();
  c.gmn.slope = j.at("gmn_slope").get<double>();
  c.hp_hidden = j.at("hp_hidden").get<std::vector<std::size_t>>();
  c.curve_channels1 = j.at("curve_channels").at(0).get<std::size_t>();
  c.curve_channels2 = j.at("curve_channels").at(1).get<std::size_t>();
  c.weight_width = j.at("weight_width").get<std::size_t>();
  c.output_width = j.at("output_width").get<std::size_t>();
  c.initial_phase_evals = j.at("initial_phase_evals").get<std::size_t>();
  c.initial_steps = j.at("initial_steps").get<std::size_t>();
  c.refine_steps = j.at("refine_steps").get<std::size_t>();
  return c;
}

std::vector<double> hp_features(const HyperparameterConfig& x, const SurrogateConfig& cfg) {
  std::vector<double> f;
  f.reserve(cfg.hp_width());
  if (cfg.use_model_index) {
    if (x.model_index >= cfg.num_models)
      throw std::invalid_argument("model index " + std::to_string(x.model_index) + " outside the roster");
    for (std::size_t m = 0; m < cfg.num_models; ++m) f.push_back(m == x.model_index ? 1.0 : 0.0);
  }
  f.push_back(x.dropout);
  f.push_back(static_cast<double>(x.batch_size));
  f.push_back(std::log10(x.learning_rate));
  f.push_back(x.momentum);
  f.push_back(std::log10(x.weight_decay));
  return f;
}

ad::ParamSet init_surrogate_params(const SurrogateConfig& cfg, std::mt19937_64& rng) {
  ad::ParamSet p;
  std::size_t din = cfg.hp_width();
  for (std::size_t l = 0; l < cfg.hp_hidden.size(); ++l) {
    const double b = 1.0 / std::sqrt(static_cast<double>(din));
    p["hp.w" + std::to_string(l)] = uniform({din, cfg.hp_hidden[l]}, b, rng);
    p["hp.b" + std::to_string(l)] = uniform({cfg.hp_hidden[l]}, b, rng);
    din = cfg.hp_hidden[l];
  }
  if (cfg.use_curve_cnn) {
    const double b0 = 1.0 / std::sqrt(3.0);
    const double b1 = 1.0 / std::sqrt(3.0 * static_cast<double>(cfg.curve_channels1));
    p["cnn.w0"] = uniform({cfg.curve_channels1, 1, 3}, b0, rng);
    p["cnn.b0"] = uniform({cfg.curve_channels1}, b0, rng);
    p["cnn.w1"] = uniform({cfg.curve_channels2, cfg.curve_channels1, 3}, b1, rng);
    p["cnn.b1"] = uniform({cfg.curve_channels2}, b1, rng);
  }
  if (cfg.encoder != WeightEncoder::kNone) {
    const std::size_t in = cfg.encoder == WeightEncoder::kGmn ? cfg.gmn.output_width() : cfg.flat_width;
    if (in == 0) throw std::invalid_argument("flat weight encoder needs flat_width > 0");
    const double b = 1.0 / std::sqrt(static_cast<double>(in));
    p["xi.w"] = uniform({in, cfg.weight_width}, b, rng);
    p["xi.b"] = uniform({cfg.weight_width}, b, rng);
    if (cfg.encoder == WeightEncoder::kGmn) {
      for (auto& [k, v] : init_gmn_params(cfg.gmn, rng, "gmn.")) p[k] = std::move(v);
    }
  }
  p["xi.absent"] = Tensor({cfg.weight_width});
  const std::size_t fw = fused_width(cfg);
  const double bh = 1.0 / std::sqrt(static_cast<double>(fw));
  p["head.w"] = uniform({fw, cfg.output_width}, bh, rng);
  p["head.b"] = uniform({cfg.output_width}, bh, rng);
  p["log_ell"] = Tensor::scalar(0.0);
  p["log_sf"] = Tensor::scalar(0.0);
  p["log_sn"] = Tensor::scalar(std::log(0.1));
  return p;
}

Var record_extractor(ad::Tape& tape, const SurrogateConfig& cfg, std::span<const SurrogateInput* const> rows) {
  const std::size_t n = rows.size();
  if (n == 0) throw std::invalid_argument("feature extractor: no rows");
  std::vector<Var> parts;

  Tensor hp({n, cfg.hp_width()});
  for (std::size_t r = 0; r < n; ++r) {
    const auto f = hp_features(rows[r]->config, cfg);
    std::copy(f.begin(), f.end(), &hp[r * cfg.hp_width()]);
  }
  Var h = tape.constant(std::move(hp));
  for (std::size_t l = 0; l < cfg.hp_hidden.size(); ++l)
    h = tape.leaky_relu(tape.affine(tape.matmul(h, tape.leaf("hp.w" + std::to_string(l))),
                                    tape.leaf("hp.b" + std::to_string(l))));
  parts.push_back(h);

  if (cfg.use_curve_cnn) {
    const std::size_t len = cfg.curve_length();
    Tensor curves({n, 1, len});
    for (std::size_t r = 0; r < n; ++r) {
      const auto& c = rows[r]->curve;
      if (c.size() > len) throw std::invalid_argument("learning curve longer than " + std::to_string(len));
      std::copy(c.begin(), c.end(), &curves[r * len + (len - c.size())]);
    }
    Var c = tape.constant(std::move(curves));
    c = tape.leaky_relu(tape.conv1d(c, tape.leaf("cnn.w0"), tape.leaf("cnn.b0")));
    c = tape.leaky_relu(tape.conv1d(c, tape.leaf("cnn.w1"), tape.leaf("cnn.b1")));
    parts.push_back(tape.mean(c, {2}));
  }

  Tensor budget({n, 1});
  for (std::size_t r = 0; r < n; ++r)
    budget[r] = static_cast<double>(rows[r]->budget) / static_cast<double>(cfg.b_max);
  parts.push_back(tape.constant(std::move(budget)));

  // Weight branch: one encoding per distinct checkpoint, gathered into rows;
  // rows without weights take the learned constant.
  std::map<const CheckpointedWeights*, std::size_t> slot;
  std::vector<const SurrogateInput*> owners;
  if (cfg.encoder != WeightEncoder::kNone)
    for (const SurrogateInput* r : rows)
      if (r->weights.present() && slot.try_emplace(r->weights.checkpoint.get(), owners.size()).second)
        owners.push_back(r);
  const std::size_t g = owners.size();
  Var absent = tape.reshape(tape.leaf("xi.absent"), {1, cfg.weight_width});
  Var table = absent;
  if (g > 0) {
    Var enc;
    if (cfg.encoder == WeightEncoder::kGmn) {
      std::vector<std::shared_ptr<const WeightGraph>> graphs;
      std::vector<const WeightGraph*> ptrs;
      for (const SurrogateInput* r : owners) {
        auto gr = r->weights.graph ? r->weights.graph
                                   : std::make_shared<const WeightGraph>(build_graph(*r->weights.checkpoint));
        ptrs.push_back(gr.get());
        graphs.push_back(std::move(gr));
      }
      enc = gmn_encode(tape, GraphBatch::build(ptrs), cfg.gmn, "gmn.");
    } else {
      Tensor flat({g, cfg.flat_width});
      for (std::size_t i = 0; i < g; ++i) {
        const auto f = flat_features(*owners[i]->weights.checkpoint, cfg.flat_width);
        std::copy(f.begin(), f.end(), &flat[i * cfg.flat_width]);
      }
      enc = tape.constant(std::move(flat));
    }
    enc = tape.affine(tape.matmul(enc, tape.leaf("xi.w")), tape.leaf("xi.b"));
    table = tape.concat({enc, absent}, 0);
  }
  std::vector<std::size_t> index(n, g);
  for (std::size_t r = 0; r < n; ++r)
    if (cfg.encoder != WeightEncoder::kNone && rows[r]->weights.present())
      index[r] = slot.at(rows[r]->weights.checkpoint.get());
  parts.push_back(tape.spmm(std::make_shared<ad::SparseRows>(ad::SparseRows::gather(g + 1, index)), table));

  Var fused = tape.concat(parts, 1);
  return tape.affine(tape.matmul(fused, tape.leaf("head.w")), tape.leaf("head.b"));
}

Var record_kernel(ad::Tape& tape, Var za, Var zb) {
  Var inv_ell2 = tape.exp(tape.scale(tape.leaf("log_ell"), -2.0));
  Var sf2 = tape.exp(tape.scale(tape.leaf("log_sf"), 2.0));
  Var d = tape.scale(tape.scale(tape.sq_dist(za, zb), inv_ell2), -0.5);
  return tape.scale(tape.exp(d), sf2);
}

// ---------------------------------------------------------------------------

Surrogate::Surrogate(SurrogateConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  std::mt19937_64 rng(seed);
  params_ = init_surrogate_params(cfg_, rng);
}

double Surrogate::ell() const { return std::exp(params_.at("log_ell")[0]); }
double Surrogate::sf() const { return std::exp(params_.at("log_sf")[0]); }
double Surrogate::sn() const { return std::exp(params_.at("log_sn")[0]); }

FitReport Surrogate::fit(std::span<const Observation> data, std::size_t steps) {
  if (data.size() < 2) throw std::invalid_argument("fit needs at least 2 observations, got " + std::to_string(data.size()));
  FitReport report;
  if (steps == 0) return report;
  const auto rows = inputs_of(data);
  ad::Tape tape;
  Var z = record_extractor(tape, cfg_, rows);
  Var k = record_kernel(tape, z, z);
  Var kn = tape.add_diag(k, tape.exp(tape.scale(tape.leaf("log_sn"), 2.0)));
  Tensor y({data.size()});
  for (std::size_t i = 0; i < data.size(); ++i) y[i] = data[i].y;
  tape.gp_nlml(kn, tape.constant(std::move(y)));

  const ad::ParamSet saved_params = params_;
  const ad::AdamState saved_adam = adam_;
  auto abort = [&](const std::string& why) {
    params_ = saved_params;
    adam_ = saved_adam;
    report.aborted = true;
    report.error = why;
    return report;
  };
  try {
    for (std::size_t s = 0; s < steps; ++s) {
      const double v = tape.evaluate(params_).item();
      if (!std::isfinite(v)) return abort("non-finite NLML at step " + std::to_string(s));
      if (s == 0) report.initial_nlml = v;
      tape.backward();
      adam_.update(params_, tape.leaf_grads());
      ++report.steps;
    }
    report.final_nlml = tape.evaluate(params_).item();
    if (!std::isfinite(report.final_nlml)) return abort("non-finite NLML after fit");
  } catch (const ad::NotPositiveDefinite& e) {
    return abort(e.what());
  }
  return report;
}

double Surrogate::nlml(std::span<const Observation> data) const {
  const auto rows = inputs_of(data);
  ad::Tape tape;
  Var z = record_extractor(tape, cfg_, rows);
  Var kn = tape.add_diag(record_kernel(tape, z, z), tape.exp(tape.scale(tape.leaf("log_sn"), 2.0)));
  Tensor y({data.size()});
  for (std::size_t i = 0; i < data.size(); ++i) y[i] = data[i].y;
  tape.gp_nlml(kn, tape.constant(std::move(y)));
  return tape.evaluate(params_).item();
}

std::vector<double> Surrogate::features(const SurrogateInput& input) const {
  const SurrogateInput* p = &input;
  return extract(cfg_, params_, std::span(&p, 1)).to_vector();
}

Posterior Surrogate::posterior(std::span<const Observation> data) const {
  Posterior post;
  post.cfg_ = cfg_;
  post.params_ = std::make_shared<const ad::ParamSet>(params_);
  post.sf2_ = sf() * sf();
  post.inv_ell2_ = 1.0 / (ell() * ell());
  post.n_ = data.size();
  if (data.empty()) return post;
  const auto rows = inputs_of(data);
  post.z_ = extract(cfg_, params_, rows);
  const std::size_t n = data.size(), d = cfg_.output_width;
  std::vector<double> k(n * n);
  const double sn2 = sn() * sn();
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b <= a; ++b) {
      const double v = kernel_value(std::span(&post.z_[a * d], d), std::span(&post.z_[b * d], d), post.sf2_,
                                    post.inv_ell2_);
      k[a * n + b] = v;
      k[b * n + a] = v;
    }
    k[a * n + a] += sn2;
  }
  post.chol_ = ad::Cholesky::factor(k, n);
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = data[i].y;
  post.alpha_ = post.chol_.solve(y);
  return post;
}

std::vector<Prediction> Posterior::predict(std::span<const SurrogateInput* const> queries) const {
  std::vector<Prediction> out(queries.size());
  if (queries.empty()) return out;
  if (n_ == 0) {
    for (auto& p : out) p = {0.0, sf2_};
    return out;
  }
  const Tensor zq = extract(cfg_, *params_, queries);
  const std::size_t d = cfg_.output_width;
  std::vector<double> ks(n_);
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto zrow = std::span(&zq[q * d], d);
    for (std::size_t i = 0; i < n_; ++i) ks[i] = kernel_value(zrow, std::span(&z_[i * d], d), sf2_, inv_ell2_);
    const double mean = std::inner_product(ks.begin(), ks.end(), alpha_.begin(), 0.0);
    const auto v = chol_.solve_lower(ks);
    const double var = sf2_ - std::inner_product(v.begin(), v.end(), v.begin(), 0.0);
    out[q] = {mean, std::max(var, 1e-12)};
  }
  return out;
}

Prediction Posterior::predict(const SurrogateInput& query) const {
  const SurrogateInput* p = &query;
  return predict(std::span(&p, 1)).front();
}

// ---------------------------------------------------------------------------
// FMSS v1: "FMSS", u32 version, u32-length-prefixed JSON header, then for
// every parameter (header order) the value, first and second Adam moments
// as f64 tensor blocks.

std::string Surrogate::encode() const {
  json h;
  h["config"] = json::parse(cfg_.to_json());
  h["evaluations"] = evaluations_;
  h["adam"] = {{"lr", adam_.lr}, {"beta1", adam_.beta1}, {"beta2", adam_.beta2}, {"eps", adam_.eps}, {"step", adam_.step}};
  h["params"] = json::array();
  for (const auto& [name, t] : params_) h["params"].push_back(name);
  io::ByteWriter w;
  w.magic("FMSS");
  w.u32(kStateVersion);
  w.text(h.dump());
  for (const auto& [name, t] : params_) {
    std::vector<std::uint32_t> dims(t.shape().begin(), t.shape().end());
    w.block_f64(dims, t.data());
    for (const ad::ParamSet* moments : {&adam_.m, &adam_.v}) {
      auto it = moments->find(name);
      const Tensor zero(t.shape());
      w.block_f64(dims, it == moments->end() ? zero.data() : it->second.data());
    }
  }
  return w.take();
}

Surrogate Surrogate::decode(std::string_view bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("FMSS");
  const std::uint32_t version = r.u32();
  if (version != kStateVersion) throw io::FormatError("unsupported surrogate state version " + std::to_string(version));
  const json h = json::parse(r.text());
  Surrogate s(SurrogateConfig::from_json(h.at("config").dump()), 0);
  s.evaluations_ = h.at("evaluations").get<std::size_t>();
  const json& a = h.at("adam");
  s.adam_.lr = a.at("lr").get<double>();
  s.adam_.beta1 = a.at("beta1").get<double>();
  s.adam_.beta2 = a.at("beta2").get<double>();
  s.adam_.eps = a.at("eps").get<double>();
  s.adam_.step = a.at("step").get<std::uint64_t>();
  ad::ParamSet loaded;
  std::vector<std::uint32_t> dims;
  for (const json& jn : h.at("params")) {
    const std::string name = jn.get<std::string>();
    auto it = s.params_.find(name);
    if (it == s.params_.end()) throw io::FormatError("surrogate state has unknown parameter '" + name + "'");
    const ad::Shape shape = it->second.shape();
    auto read = [&]() {
      auto v = r.block_f64(dims);
      if (ad::Shape(dims.begin(), dims.end()) != shape)
        throw io::FormatError("parameter '" + name + "' has shape " + ad::shape_str({dims.begin(), dims.end()}) +
                              ", expected " + ad::shape_str(shape));
      return Tensor(shape, std::move(v));
    };
    loaded[name] = read();
    Tensor m = read(), v = read();
    if (s.adam_.step > 0) {
      s.adam_.m[name] = std::move(m);
      s.adam_.v[name] = std::move(v);
    }
  }
  if (!r.at_end()) throw io::FormatError("trailing bytes after surrogate state");
  if (loaded.size() != s.params_.size()) throw io::FormatError("surrogate state is missing parameters");
  s.params_ = std::move(loaded);
  return s;
}

void Surrogate::save(const std::filesystem::path& path) const { io::write_file_atomic(path, encode()); }

Surrogate Surrogate::load(const std::filesystem::path& path) { return decode(io::read_file(path)); }

}  // namespace fms
