#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "fms/acquisition.hpp"
#include "fms/benchhub.hpp"
#include "fms/hpo.hpp"
#include "fms/report.hpp"

namespace py = pybind11;
using namespace fms;

namespace {

py::dict config_dict(const HyperparameterConfig& x) {
  py::dict d;
  d["model_index"] = x.model_index;
  d["dropout"] = x.dropout;
  d["batch_size"] = x.batch_size;
  d["learning_rate"] = x.learning_rate;
  d["momentum"] = x.momentum;
  d["weight_decay"] = x.weight_decay;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Forecasting model search core";

  py::register_exception<BenchmarkError>(m, "BenchmarkError", PyExc_RuntimeError);

  m.def("kendall_tau",
        [](const std::vector<double>& pred, const std::vector<double>& truth) { return kendall_tau(pred, truth); },
        py::arg("pred"), py::arg("truth"), "Kendall tau-b; None when either ranking is constant.");
  m.def("expected_improvement", &expected_improvement, py::arg("mu"), py::arg("sigma"), py::arg("y_star"));

  py::class_<HubSpec>(m, "HubSpec")
      .def_static("standard", &HubSpec::standard, py::arg("with_conv") = true)
      .def_static("from_json", &HubSpec::from_json)
      .def("to_json", &HubSpec::to_json)
      .def("hash", &HubSpec::hash, py::arg("seed"))
      .def_readwrite("n_cfg", &HubSpec::n_cfg)
      .def_readwrite("b_max", &HubSpec::b_max)
      .def_readwrite("samples", &HubSpec::samples)
      .def_property_readonly("roster", [](const HubSpec& s) {
        std::vector<std::string> names;
        for (const auto& r : s.roster) names.push_back(r.arch().name);
        return names;
      });

  py::class_<BenchmarkTable>(m, "BenchmarkTable")
      .def_static("load", &BenchmarkTable::load, py::arg("dir"))
      .def_property_readonly("hash", &BenchmarkTable::hash)
      .def_property_readonly("num_configs", &BenchmarkTable::num_configs)
      .def_property_readonly("b_max", &BenchmarkTable::b_max)
      .def_property_readonly("y_opt", &BenchmarkTable::y_opt)
      .def("config", [](const BenchmarkTable& t, std::size_t c) { return config_dict(t.config(c)); })
      .def("curve", &BenchmarkTable::curve)
      .def("accuracy", &BenchmarkTable::accuracy, py::arg("config"), py::arg("epoch"))
      .def("final_scores", &BenchmarkTable::final_scores);

  m.def(
      "generate_hub",
      [](const HubSpec& spec, std::uint64_t seed, const std::filesystem::path& dir, std::size_t threads) {
        py::gil_scoped_release release;
        return generate_hub(spec, seed, dir, {threads, true});
      },
      py::arg("spec"), py::arg("seed"), py::arg("dir"), py::arg("threads") = 0);

  m.def("methods", [] {
    std::vector<std::string> ids;
    for (Method x : all_methods()) ids.push_back(method_id(x));
    return ids;
  });

  py::class_<HpoTrace>(m, "Trace")
      .def_readonly("method", &HpoTrace::method)
      .def_readonly("seed", &HpoTrace::seed)
      .def_readonly("total_budget", &HpoTrace::total_budget)
      .def_readonly("y_opt", &HpoTrace::y_opt)
      .def_property_readonly("spent", &HpoTrace::spent)
      .def_property_readonly("final_incumbent", &HpoTrace::final_incumbent)
      .def("incumbent_at", &HpoTrace::incumbent_at, py::arg("epochs"))
      .def_property_readonly("events",
                             [](const HpoTrace& t) {
                               py::list out;
                               for (const auto& e : t.events) {
                                 py::dict d;
                                 d["config"] = e.config;
                                 d["budget"] = e.budget;
                                 d["epochs"] = e.epochs;
                                 d["y"] = e.y;
                                 d["cumulative"] = e.cumulative;
                                 d["incumbent"] = e.incumbent;
                                 out.append(d);
                               }
                               return out;
                             })
      .def("regret_curve",
           [](const HpoTrace& t) {
             std::vector<std::pair<std::size_t, double>> out;
             for (const auto& p : regret_curve(t)) out.emplace_back(p.budget, p.regret);
             return out;
           })
      .def("snapshot_taus", [](const HpoTrace& t) { return snapshot_taus(t); })
      .def("to_jsonl", &HpoTrace::to_jsonl)
      .def_static("from_jsonl", &HpoTrace::from_jsonl);

  m.def(
      "run",
      [](const BenchmarkTable& bench, const std::string& method, std::size_t budget, std::uint64_t seed,
         std::size_t pool_size) {
        MethodConfig cfg = MethodConfig::make(parse_method(method), bench, budget);
        cfg.pool_size = pool_size;
        py::gil_scoped_release release;
        return run(cfg, bench, seed);
      },
      py::arg("bench"), py::arg("method"), py::arg("budget"), py::arg("seed"), py::arg("pool_size") = 1000,
      "One search; returns its trace.");
}
