// Thin pybind11 layer. Configs cross the boundary as JSON text; the Python
// package turns them into dicts.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "laff/cli.hpp"
#include "laff/config.hpp"
#include "laff/errors.hpp"
#include "laff/evalkit.hpp"
#include "laff/objective.hpp"
#include "laff/optim.hpp"

namespace py = pybind11;
using namespace laff;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const Array& a) {
  if (a.ndim() != 2) throw DimensionError("expected a 2-D array");
  const auto rows = static_cast<std::size_t>(a.shape(0));
  const auto cols = static_cast<std::size_t>(a.shape(1));
  return Matrix(rows, cols, std::vector<double>(a.data(), a.data() + rows * cols));
}

Array to_array(const Matrix& m) {
  Array out({m.rows(), m.cols()});
  std::copy(m.values().begin(), m.values().end(), out.mutable_data());
  return out;
}

// Each entry is a samples × dim array, or for frame-level features a list
// with one frames × dim array per sample.
ModalityBatch to_batch(const std::vector<FeatureDecl>& decls, const py::list& features) {
  if (features.size() != decls.size()) {
    throw DimensionError("expected " + std::to_string(decls.size()) + " feature arrays, got " +
                         std::to_string(features.size()));
  }
  ModalityBatch b;
  for (std::size_t i = 0; i < decls.size(); ++i) {
    if (decls[i].level == FeatureLevel::video) {
      b.pooled.push_back(to_matrix(features[i].cast<Array>()));
      b.frames.emplace_back(std::nullopt);
      continue;
    }
    const auto seqs = features[i].cast<std::vector<Array>>();
    FrameBatch fb;
    fb.offsets.push_back(0);
    std::vector<double> all;
    Matrix pooled(seqs.size(), decls[i].dim);
    for (std::size_t s = 0; s < seqs.size(); ++s) {
      Matrix frames = to_matrix(seqs[s]);
      if (frames.cols() != decls[i].dim) throw DimensionError("frame dim mismatch for " + decls[i].name);
      const auto mean = mean_pool_frames(frames);
      std::copy(mean.begin(), mean.end(), pooled.row(s).begin());
      all.insert(all.end(), frames.values().begin(), frames.values().end());
      fb.offsets.push_back(fb.offsets.back() + frames.rows());
    }
    fb.frames = Matrix(fb.offsets.back(), decls[i].dim, std::move(all));
    b.pooled.push_back(std::move(pooled));
    b.frames.emplace_back(std::move(fb));
  }
  b.samples = b.pooled.empty() ? 0 : b.pooled.front().rows();
  return b;
}

ModalityEncoding encode(const FusionModel& m, Modality modality, const py::list& features) {
  const auto& decls = modality == Modality::video ? m.config().video_features : m.config().text_features;
  return m.encode(modality, to_batch(decls, features), Mode::eval, nullptr);
}

py::list embeddings(const ModalityEncoding& e) {
  py::list out;
  for (const auto& s : e.spaces) out.append(to_array(s.embedding));
  return out;
}

ModelConfig parse_model(const std::string& text) { return model_config_from_json(Json::parse(text)); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "LAFF text-to-video retrieval core";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
  py::register_exception<DegenerateInputError>(m, "DegenerateInputError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<UnsupportedError>(m, "UnsupportedError", PyExc_NotImplementedError);

  m.def("param_count", [](const std::string& config) { return param_count(parse_model(config)); },
        py::arg("config_json"));
  m.def("normalize_model_config", [](const std::string& config) {
    ModelConfig c = parse_model(config);
    c.validate();
    return to_json(c).dump();
  });
  m.def("default_run_config", [] { return to_json(RunConfig{}).dump(); });

  py::class_<FusionModel>(m, "Model")
      .def(py::init([](const std::string& config, std::uint64_t seed) {
             ModelConfig c = parse_model(config);
             c.validate();
             return FusionModel(std::move(c), seed);
           }),
           py::arg("config_json"), py::arg("seed") = 0)
      .def_static("load", &load_model, py::arg("path"))
      .def("save", [](const FusionModel& self, const std::string& path) { save_model(self, path); })
      .def_property_readonly("config_json", [](const FusionModel& self) { return to_json(self.config()).dump(); })
      .def_property_readonly("spaces", &FusionModel::spaces)
      .def("parameter_count", &FusionModel::parameter_count)
      .def("encode_video",
           [](const FusionModel& self, const py::list& f) { return embeddings(encode(self, Modality::video, f)); })
      .def("encode_text",
           [](const FusionModel& self, const py::list& f) { return embeddings(encode(self, Modality::text, f)); })
      .def("attention_weights",
           [](const FusionModel& self, const std::string& modality, const py::list& f) {
             const Modality mod = modality == "video" ? Modality::video : Modality::text;
             py::list out;
             for (const auto& s : encode(self, mod, f).spaces) out.append(to_array(s.weights));
             return out;
           })
      .def("similarity",
           [](const FusionModel& self, const py::list& video, const py::list& text) {
             ModalityEncoding v = encode(self, Modality::video, video);
             ModalityEncoding t = encode(self, Modality::text, text);
             return to_array(mean_similarity(space_similarities(t, v)));
           },
           py::arg("video_features"), py::arg("text_features"),
           "texts × videos mean cosine over spaces");

  m.def("triplet_loss",
        [](const Array& sims, const std::vector<std::size_t>& positive, double margin) {
          TripletResult r = triplet_hard_loss(to_matrix(sims), positive, margin);
          return py::make_tuple(r.loss, to_array(r.grad), r.hardest);
        },
        py::arg("sims"), py::arg("positive"), py::arg("margin") = 0.2);

  m.def("recall_at_k", [](const std::vector<QueryRanks>& r, std::size_t k) { return recall_at_k(r, k); });
  m.def("median_rank", [](const std::vector<QueryRanks>& r) { return median_rank(r); });
  m.def("mean_ap", [](const std::vector<QueryRanks>& r) { return mean_ap(r); });

  m.def("synth",
        [](const std::string& spec, const std::string& out_dir, std::uint64_t seed, bool binary) {
          SynthSpec s = synth_spec_from_json(Json::parse(spec));
          s.seed = seed;
          return write_dataset(synth_generate(s), out_dir, binary);
        },
        py::arg("spec_json"), py::arg("out_dir"), py::arg("seed") = 2022, py::arg("binary") = true);

  m.def("run_cli",
        [](std::vector<std::string> args) {
          args.insert(args.begin(), "laff");
          py::gil_scoped_release release;
          return cli::run(args);
        },
        py::arg("args"), "Runs a laff subcommand in-process and returns its exit code.");
}
