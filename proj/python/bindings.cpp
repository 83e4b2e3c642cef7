// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0
//
// Python module mmbeam._core. Arrays cross the boundary as numpy copies;
// torch tensors never leave C++.

#include <pybind11/complex.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "mmbeam/checkpoint.hpp"
#include "mmbeam/cli.hpp"
#include "mmbeam/data.hpp"
#include "mmbeam/errors.hpp"
#include "mmbeam/model.hpp"
#include "mmbeam/rf_core.hpp"

namespace py = pybind11;
using namespace mmbeam;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

py::array_t<float> to_numpy(const torch::Tensor& t) {
  const auto c = t.detach().to(torch::kFloat).contiguous().cpu();
  std::vector<py::ssize_t> shape(c.sizes().begin(), c.sizes().end());
  py::array_t<float> out(shape);
  std::memcpy(out.mutable_data(), c.data_ptr<float>(), sizeof(float) * c.numel());
  return out;
}

torch::Tensor to_tensor(const FloatArray& a) {
  std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
  return torch::from_blob(const_cast<float*>(a.data()), shape, torch::kFloat).clone();
}

rf::CVector to_cvector(const py::array_t<std::complex<double>, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 1) throw std::invalid_argument("channel must be a 1-d complex array");
  return {a.data(), a.data() + a.size()};
}

py::object json_to_py(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

class Model {
 public:
  explicit Model(const std::string& path) {
    nlohmann::json meta;
    net_ = ckpt::load_model(path, &meta);
    net_->eval();
    meta_ = meta;
  }

  py::array_t<float> predict(const FloatArray& camera, const FloatArray& lidar, const FloatArray& radar,
                             const FloatArray& gps) {
    data::Batch b;
    b.camera = to_tensor(camera);
    b.lidar = to_tensor(lidar);
    b.radar = to_tensor(radar);
    b.gps = to_tensor(gps);
    b.labels = torch::zeros({b.camera.size(0)}, torch::kLong);
    torch::Tensor logits;
    {
      py::gil_scoped_release nogil;
      torch::NoGradGuard ng;
      logits = net_->forward(b.to(net_->dtype()));
    }
    return to_numpy(logits);
  }

  int num_beams() const { return net_->config().num_beams; }
  int64_t num_parameters() const { return model::count_parameters(*net_); }
  py::object config() const { return json_to_py(net_->config().to_json()); }
  py::object meta() const { return json_to_py(meta_); }

 private:
  model::BeamTransFuser net_{nullptr};
  nlohmann::json meta_;
};

py::dict synth(int num_samples, int num_beams, int camera_size, int lidar_size, int radar_size, std::uint64_t seed) {
  data::SyntheticSceneConfig cfg;
  cfg.num_samples = num_samples;
  cfg.num_beams = num_beams;
  cfg.camera_size = camera_size;
  cfg.lidar_size = lidar_size;
  cfg.radar_size = radar_size;
  cfg.seed = seed;
  std::vector<data::MultiModalSample> samples;
  {
    py::gil_scoped_release nogil;
    samples = data::synth_generate(cfg);
  }
  const auto b = data::collate(samples);
  std::vector<int> scenarios;
  for (const auto& s : samples) scenarios.push_back(s.scenario_id);
  py::dict out;
  out["camera"] = to_numpy(b.camera);
  out["lidar"] = to_numpy(b.lidar);
  out["radar"] = to_numpy(b.radar);
  out["gps"] = to_numpy(b.gps);
  out["labels"] = py::array_t<int64_t>(b.labels.size(0), b.labels.contiguous().data_ptr<int64_t>());
  out["scenario"] = scenarios;
  return out;
}

rf::PredictionBatch ranked(const FloatArray& logits, const std::vector<int>& truth) {
  if (logits.ndim() != 2) throw std::invalid_argument("logits must be [N, beams]");
  return rf::rank_predictions(std::span<const float>(logits.data(), logits.size()),
                              static_cast<int>(logits.shape(1)), truth);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Multi-modal mmWave beam prediction";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_IOError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def("steering_vector", &rf::steering_vector, py::arg("num_antennas"), py::arg("spatial_freq"));
  m.def(
      "dft_codebook",
      [](int n, int beams) {
        const auto cb = rf::make_dft_codebook(n, beams);
        py::array_t<std::complex<double>> out({beams, n});
        auto* p = out.mutable_data();
        for (const auto& v : cb.vectors) p = std::copy(v.begin(), v.end(), p);
        return out;
      },
      py::arg("num_antennas"), py::arg("num_beams"));
  m.def(
      "beam_powers",
      [](int n, int beams, const py::array_t<std::complex<double>>& h) {
        return rf::beam_powers(rf::make_dft_codebook(n, beams), to_cvector(h));
      },
      py::arg("num_antennas"), py::arg("num_beams"), py::arg("h"));
  m.def(
      "snr",
      [](int n, int beams, int beam, const py::array_t<std::complex<double>>& h, double noise) {
        return rf::snr(rf::make_dft_codebook(n, beams), beam, {to_cvector(h), noise});
      },
      py::arg("num_antennas"), py::arg("num_beams"), py::arg("beam"), py::arg("h"), py::arg("noise_power") = 1.0);
  m.def(
      "rate",
      [](int n, int beams, int beam, const py::array_t<std::complex<double>>& h, double noise) {
        return rf::rate(rf::make_dft_codebook(n, beams), beam, {to_cvector(h), noise});
      },
      py::arg("num_antennas"), py::arg("num_beams"), py::arg("beam"), py::arg("h"), py::arg("noise_power") = 1.0);
  m.def(
      "optimal_beam",
      [](int n, int beams, const py::array_t<std::complex<double>>& h) {
        return rf::optimal_beam(rf::make_dft_codebook(n, beams), {to_cvector(h), 1.0});
      },
      py::arg("num_antennas"), py::arg("num_beams"), py::arg("h"));

  m.def(
      "dba_score",
      [](const FloatArray& logits, const std::vector<int>& truth, int k_max, int delta) {
        return rf::dba_score(ranked(logits, truth), k_max, delta);
      },
      py::arg("logits"), py::arg("truth"), py::arg("k_max") = 3, py::arg("delta") = 5);
  m.def(
      "topk_accuracy",
      [](const FloatArray& logits, const std::vector<int>& truth, int k) {
        return rf::topk_accuracy(ranked(logits, truth), k);
      },
      py::arg("logits"), py::arg("truth"), py::arg("k"));

  m.def("synth", &synth, py::arg("num_samples"), py::arg("num_beams") = 8, py::arg("camera_size") = 64,
        py::arg("lidar_size") = 64, py::arg("radar_size") = 32, py::arg("seed") = 0);

  m.def(
      "census",
      [](const std::string& preset) {
        const auto cfg = preset == "full"  ? model::ModelConfig::full()
                         : preset == "toy" ? model::ModelConfig::toy()
                                           : throw ConfigError("preset must be full or toy");
        model::BeamTransFuser net(cfg);
        return json_to_py(model::param_census(*net).to_json());
      },
      py::arg("preset") = "full");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release nogil;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"));

  py::class_<Model>(m, "Model")
      .def(py::init<const std::string&>(), py::arg("checkpoint"))
      .def("predict", &Model::predict, py::arg("camera"), py::arg("lidar"), py::arg("radar"), py::arg("gps"))
      .def_property_readonly("num_beams", &Model::num_beams)
      .def_property_readonly("num_parameters", &Model::num_parameters)
      .def_property_readonly("config", &Model::config)
      .def_property_readonly("meta", &Model::meta);
}
