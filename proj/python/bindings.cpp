#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "tsformer/cli.hpp"
#include "tsformer/config.hpp"
#include "tsformer/dsp.hpp"
#include "tsformer/error.hpp"
#include "tsformer/model.hpp"
#include "tsformer/objectives.hpp"
#include "tsformer/pipeline.hpp"

namespace py = pybind11;
using namespace tsf;

namespace {

using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using F32Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

template <typename T>
py::array_t<T> to_array(std::span<const T> values, std::vector<py::ssize_t> shape) {
  py::array_t<T> out(shape);
  std::copy(values.begin(), values.end(), out.mutable_data());
  return out;
}

ad::Tensor<double> matrix(const F64Array& a, const char* what) {
  if (a.ndim() != 2) throw ShapeError(std::string(what) + " must be a 2-D array");
  const auto r = static_cast<std::size_t>(a.shape(0)), c = static_cast<std::size_t>(a.shape(1));
  return ad::Tensor<double>::constant({r, c}, std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> from_tensor(const ad::Tensor<double>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  return to_array<double>(t.values(), shape);
}

std::vector<double> vec(const F64Array& a) { return {a.data(), a.data() + a.size()}; }

py::dict metrics_dict(const obj::ConfusionCounts& c) {
  const auto m = obj::metrics(c);
  py::dict d;
  d["ba"] = m.ba;
  d["tpr"] = m.tpr;
  d["fpr"] = m.fpr;
  return d;
}

class PyModel {
 public:
  PyModel(const std::string& config_json, std::uint64_t seed)
      : cfg_(from_json(config_json.empty() ? "{}" : config_json).model),
        params_(model::ModelParams<float>::init(cfg_, seed)) {
    cfg_.validate();
  }

  py::dict forward(const F32Array& temporal, const F32Array& spectral, bool adapted) const {
    if (static_cast<std::size_t>(temporal.size()) != cfg_.channels * cfg_.samples)
      throw ShapeError("temporal input must hold channels x samples values");
    if (static_cast<std::size_t>(spectral.size()) != cfg_.scales * cfg_.channels * cfg_.samples)
      throw ShapeError("spectral input must hold scales x channels x samples values");
    const model::TrialView view{{temporal.data(), static_cast<std::size_t>(temporal.size())},
                                {spectral.data(), static_cast<std::size_t>(spectral.size())}};
    model::Trace<float> trace;
    const auto out = model::forward(view, model::GraphParams<float>(params_, {}),
                                    adapted ? model::Mode::adapted : model::Mode::pretrain, &trace);
    auto flat = [](const ad::Tensor<float>& t) {
      return to_array<float>(t.values(), {static_cast<py::ssize_t>(t.size())});
    };
    py::dict d;
    d["logits"] = flat(out.logits);
    d["z_fus"] = flat(out.z_fus);
    d["z_tem"] = flat(out.z_tem);
    d["z_spe"] = flat(out.z_spe);
    if (out.z_sub) d["z_sub"] = flat(*out.z_sub);
    const auto n = static_cast<py::ssize_t>(cfg_.tokens()), dim = static_cast<py::ssize_t>(cfg_.dim);
    d["temporal_tokens"] = to_array<float>(trace.embedded->temporal.values(), {n, dim});
    d["spectral_tokens"] = to_array<float>(trace.embedded->spectral.values(), {n, dim});
    d["mask_temporal"] = trace.mask_temporal;
    d["mask_spectral"] = trace.mask_spectral;
    return d;
  }

  std::size_t count(const std::string& group) const {
    if (group.empty()) return params_.count();
    if (group == "adapter") return params_.count(model::Group::adapter);
    if (group == "pretrainable") return params_.count(model::Group::pretrainable);
    throw ConfigError("group must be 'adapter' or 'pretrainable'");
  }

  std::vector<std::string> names(const std::string& group) const {
    return params_.names(group == "adapter" ? model::Group::adapter : model::Group::pretrainable);
  }

  std::size_t tokens() const { return cfg_.tokens(); }

 private:
  model::ModelConfig cfg_;
  model::ModelParams<float> params_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Two-view EEG transformer for RSVP target detection";

  // Translators run newest first, so the base class goes in first.
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  m.def(
      "cwt",
      [](const F64Array& x, const std::string& wavelet, std::optional<std::vector<double>> scales) {
        const auto s = scales ? *scales : dsp::default_scales();
        const auto out = dsp::cwt_signal(vec(x), dsp::parse_wavelet(wavelet), s);
        return to_array<double>(out, {static_cast<py::ssize_t>(s.size()), x.size()});
      },
      py::arg("signal"), py::arg("wavelet") = "mexican_hat", py::arg("scales") = py::none(),
      "Continuous wavelet transform of one signal, scales x samples.");

  m.def(
      "bandpass",
      [](const F32Array& data, double sample_rate, double low, double high, int order) {
        if (data.ndim() != 2) throw ShapeError("data must be channels x samples");
        dsp::RawRecording rec;
        rec.channels = static_cast<std::size_t>(data.shape(0));
        rec.samples = static_cast<std::size_t>(data.shape(1));
        rec.sample_rate = sample_rate;
        rec.data.assign(data.data(), data.data() + data.size());
        for (std::size_t c = 0; c < rec.channels; ++c) rec.channel_names.push_back("C" + std::to_string(c + 1));
        const auto out = dsp::bandpass(rec, dsp::FilterSpec{order, low, high, true});
        return to_array<float>(out.data, {data.shape(0), data.shape(1)});
      },
      py::arg("data"), py::arg("sample_rate"), py::arg("low_hz") = 0.5, py::arg("high_hz") = 15.0,
      py::arg("order") = 3);

  m.def("default_scales", &dsp::default_scales, py::arg("count") = 20);

  m.def(
      "metrics", [](std::size_t tp, std::size_t fn, std::size_t tn, std::size_t fp) {
        return metrics_dict({tp, fn, tn, fp});
      },
      py::arg("tp"), py::arg("fn"), py::arg("tn"), py::arg("fp"));

  m.def(
      "multiview_loss",
      [](const F64Array& z_tem, const F64Array& z_spe, double tau) {
        return obj::multiview_loss(matrix(z_tem, "z_tem"), matrix(z_spe, "z_spe"), tau).item();
      },
      py::arg("z_tem"), py::arg("z_spe"), py::arg("tau") = 0.2);

  m.def(
      "cross_entropy",
      [](const F64Array& logits, const std::vector<int>& labels) {
        return obj::cross_entropy(matrix(logits, "logits"), labels).item();
      },
      py::arg("logits"), py::arg("labels"));

  m.def(
      "token_score",
      [](const F64Array& tokens, const F64Array& w) {
        return model::token_score(matrix(tokens, "tokens"), matrix(w, "w_score"));
      },
      py::arg("tokens"), py::arg("w_score"));

  m.def(
      "fusion_mask",
      [](const std::vector<double>& own, const std::vector<double>& other) {
        return model::fusion_mask<double>(own, other);
      },
      py::arg("own_scores"), py::arg("other_scores"));

  m.def(
      "token_fuse",
      [](const F64Array& tem, const F64Array& spe, const std::vector<double>& st, const std::vector<double>& ss,
         const std::string& variant) {
        model::FuseVariant v;
        if (variant == "literal") v = model::FuseVariant::literal;
        else if (variant == "average_selected") v = model::FuseVariant::average_selected;
        else throw ConfigError("variant must be 'literal' or 'average_selected'");
        const auto out = model::token_fuse<double>({matrix(tem, "temporal"), matrix(spe, "spectral")}, st, ss, v);
        return py::make_tuple(from_tensor(out.temporal), from_tensor(out.spectral));
      },
      py::arg("temporal"), py::arg("spectral"), py::arg("scores_temporal"), py::arg("scores_spectral"),
      py::arg("variant") = "literal");

  m.def(
      "lr", [](std::size_t epoch, const std::string& config_json) {
        return from_json(config_json.empty() ? "{}" : config_json).optimizer.lr(epoch);
      },
      py::arg("epoch"), py::arg("config") = "");

  m.def(
      "gradcheck",
      [](const std::string& dtype, std::uint64_t seed) {
        if (dtype != "f32" && dtype != "f64") throw ConfigError("dtype must be f32 or f64");
        const auto rep = pipeline::gradcheck(dtype == "f64", seed);
        py::dict d;
        d["max_rel_error"] = rep.max_rel_error;
        d["worst_parameter"] = rep.worst_parameter;
        d["checked"] = rep.checked;
        d["per_parameter"] = rep.per_parameter;
        return d;
      },
      py::arg("dtype") = "f64", py::arg("seed") = 1);

  m.def("default_config", [] { return to_json(RunConfig{}); });
  m.def("reduced_config", [] { return to_json(reduced_config()); });

  m.def(
      "cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "tsformer");
        std::vector<const char*> argv;
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command-line interface; returns (exit_code, stdout, stderr).");

  py::class_<PyModel>(m, "Model")
      .def(py::init<const std::string&, std::uint64_t>(), py::arg("config") = "", py::arg("seed") = 0)
      .def("forward", &PyModel::forward, py::arg("temporal"), py::arg("spectral"), py::arg("adapted") = false)
      .def("parameter_count", &PyModel::count, py::arg("group") = "")
      .def("parameter_names", &PyModel::names, py::arg("group") = "pretrainable")
      .def_property_readonly("tokens", &PyModel::tokens);
}
