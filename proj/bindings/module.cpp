// Python bindings for the engine's main operations: the train/eval/report
// pipeline, dataset construction, checkpoint loading, adaptive and budgeted
// single-sample inference, batched forward passes, and the gradient check.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>
#include <cstring>
#include <string>
#include <vector>

#include "ddi/checkpoint.hpp"
#include "ddi/commands.hpp"
#include "ddi/costmodel.hpp"
#include "ddi/data.hpp"
#include "ddi/errors.hpp"
#include "ddi/runtime.hpp"
#include "ddi/training.hpp"

namespace py = pybind11;
using namespace ddi;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& arr) {
  py::buffer_info info = arr.request();
  Shape shape;
  for (auto d : info.shape) shape.push_back(static_cast<int>(d));
  std::vector<float> values(static_cast<size_t>(info.size));
  std::memcpy(values.data(), info.ptr, values.size() * sizeof(float));
  return Tensor(shape, std::move(values));
}

py::array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> out(shape);
  std::memcpy(out.request().ptr, t.data(),
              static_cast<size_t>(t.numel()) * sizeof(float));
  return out;
}

py::object json_to_py(const nlohmann::json& j) {
  switch (j.type()) {
    case nlohmann::json::value_t::null:
      return py::none();
    case nlohmann::json::value_t::boolean:
      return py::bool_(j.get<bool>());
    case nlohmann::json::value_t::number_integer:
      return py::int_(j.get<int64_t>());
    case nlohmann::json::value_t::number_unsigned:
      return py::int_(j.get<uint64_t>());
    case nlohmann::json::value_t::number_float:
      return py::float_(j.get<double>());
    case nlohmann::json::value_t::string:
      return py::str(j.get<std::string>());
    case nlohmann::json::value_t::array: {
      py::list out;
      for (const auto& v : j) out.append(json_to_py(v));
      return out;
    }
    case nlohmann::json::value_t::object: {
      py::dict out;
      for (const auto& [k, v] : j.items()) out[py::str(k)] = json_to_py(v);
      return out;
    }
    default:
      return py::none();
  }
}

ForwardMode parse_mode(const std::string& mode) {
  if (mode == "vanilla") return ForwardMode::vanilla;
  if (mode == "soft") return ForwardMode::soft;
  if (mode == "hard") return ForwardMode::hard;
  fail<ConfigError>("mode must be vanilla, soft, or hard, got '", mode, "'");
}

py::dict result_to_dict(const InferenceResult& r) {
  py::dict out;
  out["predicted"] = r.predicted;
  out["exit_index"] = r.exit_index;
  out["realized_cost"] = r.realized_cost;
  out["skip_ratio"] = r.trace.skip_ratio();
  out["difficulty"] = difficulty_name(classify_difficulty(r));
  py::list logits;
  for (const auto& row : r.exit_logits) logits.append(py::cast(row));
  out["exit_logits"] = logits;
  return out;
}

// Checkpointed network plus its stored normalization statistics and a cost
// ledger, ready for inference from python.
struct PyNetwork {
  DDINetwork net;
  NormStats stats;
  CostLedger ledger;

  static PyNetwork load(const std::string& path) {
    Checkpoint ckpt = load_checkpoint(path);
    PyNetwork out{DDINetwork::from_checkpoint(ckpt), {}, {}};
    const Tensor* mean = ckpt.find("norm.mean");
    const Tensor* stddev = ckpt.find("norm.stddev");
    DDI_CHECK_T(DataError, mean != nullptr && stddev != nullptr,
                "checkpoint '", path, "' lacks normalization statistics");
    out.stats = NormStats{mean->vec(), stddev->vec()};
    out.ledger = build_cost_ledger(out.net, MemModelConfig{}, EnergyParams{});
    return out;
  }

  py::tuple batch(const Dataset& ds, int64_t start, int64_t count) {
    DDI_CHECK_T(DataError, start >= 0 && count >= 1 && start + count <= ds.size(),
                "batch range [", start, ", ", start + count,
                ") outside dataset of size ", ds.size());
    std::vector<int64_t> idx(count);
    for (int64_t i = 0; i < count; ++i) idx[i] = start + i;
    Dataset sub = subset(ds, idx);
    BatchIterator it(sub, stats, static_cast<int>(count), false, 0,
                     Augment::none);
    Batch b;
    DDI_CHECK_T(DataError, it.next(b), "empty batch");
    return py::make_tuple(to_array(b.images), py::cast(b.labels));
  }

  py::dict infer(const FloatArray& x, double budget,
                 const std::string& metric) {
    Tensor input = to_tensor(x);
    CostMetric m = parse_metric(metric);
    InferenceResult r;
    {
      py::gil_scoped_release release;
      r = budget > 0.0 ? budgeted_infer(net, input, ledger, Budget{m, budget})
                       : adaptive_infer(net, input, ledger, m);
    }
    return result_to_dict(r);
  }

  py::list exit_logits(const FloatArray& x, const std::string& mode) {
    Tensor input = to_tensor(x);
    ForwardMode fm = parse_mode(mode);
    ForwardResult res;
    {
      py::gil_scoped_release release;
      NoGradGuard ng;
      res = net.full_forward(input, fm, false);
    }
    py::list out;
    for (const auto& t : res.exit_logits) out.append(to_array(t));
    return out;
  }

  py::dict gradient_check(const Dataset& ds, int64_t count, double alpha,
                          int n_coords, uint64_t seed,
                          const std::string& metric) {
    std::vector<int64_t> idx(count);
    for (int64_t i = 0; i < count; ++i) idx[i] = i;
    Dataset sub = subset(ds, idx);
    BatchIterator it(sub, stats, static_cast<int>(count), false, 0,
                     Augment::none);
    Batch b;
    DDI_CHECK_T(DataError, it.next(b), "empty batch");
    FdCheckResult r;
    {
      py::gil_scoped_release release;
      r = finite_difference_check(net, b.images, b.labels, ledger,
                                  parse_metric(metric),
                                  static_cast<float>(alpha), n_coords, seed);
    }
    py::dict out;
    out["max_rel_err"] = r.max_rel_err;
    out["coords_checked"] = r.coords_checked;
    out["coords_rejected"] = r.coords_rejected;
    return out;
  }

  double vanilla_cost(const std::string& metric) const {
    return ledger.vanilla_total(parse_metric(metric));
  }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "training and adaptive-inference engine for gated networks";
  m.attr("__version__") = kEngineVersion;

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ModelError>(m, "ModelError", PyExc_RuntimeError);
  py::register_exception<TrainingDivergence>(m, "TrainingDivergenceError",
                                             PyExc_RuntimeError);
  py::register_exception<WarmupFailure>(m, "WarmupFailureError",
                                        PyExc_RuntimeError);
  py::register_exception<BudgetInfeasible>(m, "BudgetInfeasibleError",
                                           PyExc_RuntimeError);
  py::register_exception<NonDifferentiableError>(m, "NonDifferentiableError",
                                                 PyExc_RuntimeError);

  py::class_<Dataset>(m, "Dataset")
      .def_readonly("channels", &Dataset::channels)
      .def_readonly("height", &Dataset::height)
      .def_readonly("width", &Dataset::width)
      .def_property_readonly("labels",
                             [](const Dataset& ds) { return ds.labels; })
      .def_property_readonly(
          "difficulty", [](const Dataset& ds) { return ds.difficulty; })
      .def("__len__", &Dataset::size);

  m.def("synthetic_dataset", &synthetic_easy_hard, py::arg("n"),
        py::arg("seed"),
        "two-class easy/hard synthetic task with ground-truth difficulty");
  m.def("save_dataset", &save_dataset, py::arg("dataset"), py::arg("path"));
  m.def("load_dataset", &load_dataset, py::arg("path"));
  m.def(
      "config_echo",
      [](const std::string& text) {
        RunConfig cfg = RunConfig::from_text(text);
        cfg.validate();
        return cfg.to_text();
      },
      py::arg("text"),
      "parse configuration text and return the fully resolved echo");

  m.def(
      "train",
      [](const std::string& config_text) {
        RunConfig cfg = RunConfig::from_text(config_text);
        nlohmann::json out;
        {
          py::gil_scoped_release release;
          out = cmd_train(cfg);
        }
        return json_to_py(out);
      },
      py::arg("config_text"),
      "run the full training pipeline; returns the final metrics");
  m.def(
      "evaluate",
      [](const std::string& config_text, const std::string& mode,
         double budget, const std::string& checkpoint) {
        RunConfig cfg = RunConfig::from_text(config_text);
        EvalOptions opt;
        opt.mode = mode;
        opt.budget_limit = budget;
        opt.checkpoint = checkpoint;
        nlohmann::json out;
        {
          py::gil_scoped_release release;
          out = cmd_eval(cfg, opt);
        }
        return json_to_py(out);
      },
      py::arg("config_text"), py::arg("mode") = "adaptive",
      py::arg("budget") = 0.0, py::arg("checkpoint") = "",
      "evaluate a checkpoint: adaptive, budget, or all_exits mode");
  m.def(
      "report",
      [](const std::string& run_dir) {
        nlohmann::json out;
        {
          py::gil_scoped_release release;
          out = cmd_report(run_dir);
        }
        return json_to_py(out);
      },
      py::arg("run_dir"), "turn eval outputs into plot-ready artifacts");

  py::class_<PyNetwork>(m, "Network")
      .def_static("load", &PyNetwork::load, py::arg("checkpoint_path"))
      .def_property_readonly(
          "num_exits",
          [](const PyNetwork& p) { return p.net.num_exits(); })
      .def_property_readonly(
          "gated_units",
          [](const PyNetwork& p) { return p.net.gated_units(); })
      .def("vanilla_cost", &PyNetwork::vanilla_cost,
           py::arg("metric") = "flops")
      .def("batch", &PyNetwork::batch, py::arg("dataset"), py::arg("start"),
           py::arg("count"),
           "normalized [N,C,H,W] inputs and labels from a dataset slice")
      .def("infer", &PyNetwork::infer, py::arg("x"), py::arg("budget") = 0.0,
           py::arg("metric") = "flops",
           "single-sample adaptive (budget=0) or budgeted inference")
      .def("exit_logits", &PyNetwork::exit_logits, py::arg("x"),
           py::arg("mode") = "hard",
           "batched forward; logits per exit, final head last")
      .def("gradient_check", &PyNetwork::gradient_check, py::arg("dataset"),
           py::arg("count") = 16, py::arg("alpha") = 2e-4,
           py::arg("n_coords") = 50, py::arg("seed") = 0,
           py::arg("metric") = "flops",
           "finite-difference check of the training-loss gradient");
}
