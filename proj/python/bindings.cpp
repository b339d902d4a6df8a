#include <pybind11/complex.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <complex>
#include <optional>

#include "dwdn/config.hpp"
#include "dwdn/deploy.hpp"
#include "dwdn/training.hpp"

namespace py = pybind11;
using namespace dwdn;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

// [samples] or [channels, samples] -> Waveform.
Waveform to_waveform(const Array& a, int sample_rate) {
  if (a.ndim() != 1 && a.ndim() != 2) throw py::value_error("expected a 1-D or 2-D array of samples");
  const std::size_t channels = a.ndim() == 1 ? 1 : static_cast<std::size_t>(a.shape(0));
  const std::size_t length = static_cast<std::size_t>(a.shape(a.ndim() - 1));
  Waveform w{sample_rate, std::vector<std::vector<Scalar>>(channels, std::vector<Scalar>(length))};
  const double* p = a.data();
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < length; ++i) w.channels[c][i] = static_cast<Scalar>(p[c * length + i]);
  return w;
}

py::array_t<double> from_waveform(const Waveform& w) {
  py::array_t<double> out({w.num_channels(), w.length()});
  auto m = out.mutable_unchecked<2>();
  for (std::size_t c = 0; c < w.num_channels(); ++c)
    for (std::size_t i = 0; i < w.length(); ++i) m(c, i) = w.channels[c][i];
  return out;
}

py::array_t<std::complex<double>> from_spectrogram(const Spectrogram& s) {
  py::array_t<std::complex<double>> out({s.channels, s.bins, s.frames});
  auto m = out.mutable_unchecked<3>();
  for (std::size_t c = 0; c < s.channels; ++c)
    for (std::size_t f = 0; f < s.bins; ++f)
      for (std::size_t t = 0; t < s.frames; ++t) {
        const auto k = s.index(c, f, t);
        m(c, f, t) = {s.re[k], s.im[k]};
      }
  return out;
}

Spectrogram to_spectrogram(const py::array_t<std::complex<double>, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 3) throw py::value_error("expected a complex array [channels, bins, frames]");
  Spectrogram s(a.shape(0), a.shape(1), a.shape(2));
  const auto* p = a.data();
  for (std::size_t i = 0; i < s.re.size(); ++i) {
    s.re[i] = static_cast<Scalar>(p[i].real());
    s.im[i] = static_cast<Scalar>(p[i].imag());
  }
  return s;
}

std::optional<double> budget(std::optional<double> v) {
  if (v && *v < 0) throw py::value_error("budgets must be non-negative");
  return v;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Dynamic-width/depth separation networks";

  auto error = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", error.ptr());
  py::register_exception<CheckpointError>(m, "CheckpointError", error.ptr());
  py::register_exception<BudgetError>(m, "BudgetError", error.ptr());
  m.attr("scalar_bits") = static_cast<int>(8 * sizeof(Scalar));

  py::enum_<GateMode>(m, "GateMode").value("TAC", GateMode::kTac).value("INDEPENDENT", GateMode::kIndependent);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_static("desk", &ModelConfig::desk)
      .def_static("paper", &ModelConfig::paper)
      .def_readwrite("n", &ModelConfig::n)
      .def_readwrite("h", &ModelConfig::h)
      .def_readwrite("max_width", &ModelConfig::max_width)
      .def_readwrite("max_depth", &ModelConfig::max_depth)
      .def_readwrite("r", &ModelConfig::r)
      .def_readwrite("h_tac", &ModelConfig::h_tac)
      .def_readwrite("bands", &ModelConfig::bands)
      .def_readwrite("sample_rate", &ModelConfig::sample_rate)
      .def_readwrite("dual_path", &ModelConfig::dual_path)
      .def_readwrite("bidirectional", &ModelConfig::bidirectional)
      .def_readwrite("gate", &ModelConfig::gate)
      .def_property(
          "stft_window", [](const ModelConfig& c) { return c.stft.window; },
          [](ModelConfig& c, std::size_t v) { c.stft.window = v; })
      .def_property(
          "stft_hop", [](const ModelConfig& c) { return c.stft.hop; },
          [](ModelConfig& c, std::size_t v) { c.stft.hop = v; })
      .def("validate", &ModelConfig::validate)
      .def("__eq__", [](const ModelConfig& a, const ModelConfig& b) { return a == b; })
      .def("__repr__", [](const ModelConfig& c) { return format_key_values(model_key_values(c)); });

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("lr", &TrainConfig::lr)
      .def_readwrite("lr_decay", &TrainConfig::lr_decay)
      .def_readwrite("decay_every", &TrainConfig::decay_every)
      .def_readwrite("grad_clip", &TrainConfig::grad_clip)
      .def_readwrite("patience", &TrainConfig::patience)
      .def_readwrite("max_epochs", &TrainConfig::max_epochs)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("steps_per_epoch", &TrainConfig::steps_per_epoch)
      .def_readwrite("val_batches", &TrainConfig::val_batches)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("sample_subnets", &TrainConfig::sample_subnets);

  py::class_<FullModelParams>(m, "Model")
      .def_static("init", &FullModelParams::init, py::arg("config"), py::arg("seed") = 0)
      .def_static("load", &load_checkpoint, py::arg("path"))
      .def_static("from_bytes", [](const py::bytes& b) { return decode_checkpoint(std::string(b)); })
      .def("save", [](const FullModelParams& p, const std::filesystem::path& path) { save_checkpoint(p, path); })
      .def("to_bytes", [](const FullModelParams& p) { return py::bytes(encode_checkpoint(p)); })
      .def_readonly("config", &FullModelParams::config)
      .def_property_readonly("parameter_count", &FullModelParams::parameter_count)
      .def("extract", [](const FullModelParams& p, std::size_t w, std::size_t d) { return extract_subnet(p, {w, d}); },
           py::arg("w"), py::arg("d"))
      .def("parameter_names", [](const FullModelParams& p) {
        std::vector<std::string> names;
        for (const auto& nt : p.named_parameters()) names.push_back(nt.name);
        return names;
      });

  py::class_<CostRow>(m, "CostRow")
      .def_readonly("w", &CostRow::w)
      .def_readonly("d", &CostRow::d)
      .def_readonly("params", &CostRow::params)
      .def_readonly("macs_per_second", &CostRow::macs_per_second)
      .def("__repr__", [](const CostRow& r) {
        return "CostRow(w=" + std::to_string(r.w) + ", d=" + std::to_string(r.d) +
               ", params=" + std::to_string(r.params) + ", macs_per_second=" + format_number(r.macs_per_second) + ")";
      });

  m.def("enumerate_costs", [](const ModelConfig& c) { return enumerate_costs(c).rows; }, py::arg("config"),
        "Params and MACs per second for every (w, d), ordered by d then w.");

  m.def(
      "select_config",
      [](const ModelConfig& c, std::optional<double> max_macs, std::optional<double> max_params,
         const std::string& prefer) {
        if (prefer != "depth" && prefer != "width") throw py::value_error("prefer must be 'depth' or 'width'");
        const auto s = select_config(enumerate_costs(c), budget(max_macs), budget(max_params),
                                     prefer == "depth" ? Preference::kDepth : Preference::kWidth);
        return py::make_tuple(s.w, s.d);
      },
      py::arg("config"), py::arg("max_macs") = py::none(), py::arg("max_params") = py::none(),
      py::arg("prefer") = "depth");

  m.def(
      "stft",
      [](const Array& x, std::size_t window, std::size_t hop) { return from_spectrogram(stft(to_waveform(x, 8000), {window, hop})); },
      py::arg("x"), py::arg("window") = 256, py::arg("hop") = 64, "Complex spectrogram [channels, bins, frames].");
  m.def(
      "istft",
      [](const py::array_t<std::complex<double>, py::array::c_style | py::array::forcecast>& s, std::size_t length,
         std::size_t window, std::size_t hop) { return from_waveform(istft(to_spectrogram(s), {window, hop}, length)); },
      py::arg("spec"), py::arg("length"), py::arg("window") = 256, py::arg("hop") = 64);

  m.def(
      "snr_db", [](const Array& ref, const Array& est) { return snr_db(to_waveform(ref, 8000), to_waveform(est, 8000)); },
      py::arg("reference"), py::arg("estimate"));

  m.def(
      "synth_batch",
      [](std::uint64_t seed, double seconds, std::size_t items, int sample_rate) {
        Rng rng(seed);
        SynthSpec spec;
        spec.seconds = seconds;
        spec.items = items;
        spec.sample_rate = sample_rate;
        const auto pair = synth_batch(rng, spec);
        return py::make_tuple(from_waveform(pair.mixture), from_waveform(pair.target));
      },
      py::arg("seed"), py::arg("seconds") = 1.0, py::arg("items") = 1, py::arg("sample_rate") = 8000,
      "Synthetic (mixture, target) arrays, each [items, samples].");

  m.def(
      "tac_reweight",
      [](const Array& g, std::size_t h_tac, std::uint64_t seed) {
        if (g.ndim() != 2) throw py::value_error("expected G as [w, h]");
        Rng rng(seed);
        const auto tac = TacParams::init(static_cast<std::size_t>(g.shape(1)), h_tac, rng);
        std::vector<std::vector<Scalar>> rows(g.shape(0), std::vector<Scalar>(g.shape(1)));
        for (std::size_t i = 0; i < rows.size(); ++i)
          for (std::size_t j = 0; j < rows[i].size(); ++j) rows[i][j] = static_cast<Scalar>(g.at(i, j));
        return tac_reweight(rows, tac).q;
      },
      py::arg("g"), py::arg("h_tac") = 16, py::arg("seed") = 0,
      "Reweighting scalars for w pooled feature vectors, with TAC weights drawn from `seed`.");

  m.def(
      "separate",
      [](const FullModelParams& p, const Array& mixture, std::size_t w, std::size_t d) {
        Waveform out;
        {
          py::gil_scoped_release release;
          out = separate(p, to_waveform(mixture, p.config.sample_rate), w, d);
        }
        return from_waveform(out);
      },
      py::arg("model"), py::arg("mixture"), py::arg("w"), py::arg("d"));

  m.def(
      "train",
      [](const FullModelParams& init, const TrainConfig& cfg, double crop_seconds) {
        SynthSpec spec;
        spec.seconds = crop_seconds;
        spec.sample_rate = init.config.sample_rate;
        SynthSource src(spec);
        py::gil_scoped_release release;
        auto result = train(init.clone(), src, cfg);
        py::gil_scoped_acquire acquire;
        py::list history;
        for (const auto& e : result.history)
          history.append(py::dict(py::arg("epoch") = e.epoch, py::arg("train_loss") = e.train_loss,
                                  py::arg("val_loss") = e.val_loss, py::arg("lr") = e.lr));
        return py::make_tuple(std::move(result.best), history);
      },
      py::arg("model"), py::arg("config"), py::arg("crop_seconds") = 0.5,
      "Trains on synthetic crops; returns (best model, per-epoch history).");
}
