#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "pcgan/data.hpp"
#include "pcgan/errors.hpp"
#include "pcgan/metrics.hpp"
#include "pcgan/trainer.hpp"

namespace py = pybind11;
using namespace pcgan;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Xyz to_xyz(const Array& a) {
  if (a.ndim() != 2 || (a.shape(1) != 3 && a.shape(1) != 6))
    throw ShapeError("expected an [N, 3] or [N, 6] array");
  const auto v = a.unchecked<2>();
  Xyz out(static_cast<std::size_t>(a.shape(0)));
  for (std::size_t i = 0; i < out.size(); ++i)
    for (int c = 0; c < 3; ++c) out[i][c] = v(i, c);
  return out;
}

std::vector<Xyz> to_xyz_list(const std::vector<Array>& clouds) {
  std::vector<Xyz> out;
  for (const auto& c : clouds) out.push_back(to_xyz(c));
  return out;
}

PointCloud to_cloud(const Array& a, int label) {
  if (a.ndim() != 2 || a.shape(1) != 6) throw ShapeError("expected an [N, 6] array");
  PointCloud cloud(static_cast<std::size_t>(a.shape(0)), label);
  std::copy(a.data(), a.data() + a.size(), cloud.points.begin());
  return cloud;
}

Array from_cloud(const PointCloud& cloud) {
  Array out({static_cast<py::ssize_t>(cloud.size()), py::ssize_t{6}});
  std::copy(cloud.points.begin(), cloud.points.end(), out.mutable_data());
  return out;
}

PlyPositionType position_type(const std::string& name) {
  if (name == "float32") return PlyPositionType::Float32;
  if (name == "float64") return PlyPositionType::Float64;
  throw UsageError("positions must be float32 or float64, got '" + name + "'");
}

EmdSolver emd_solver(const std::string& name) {
  if (name == "auto") return EmdSolver::Auto;
  if (name == "exact") return EmdSolver::Exact;
  if (name == "auction") return EmdSolver::Auction;
  throw UsageError("emd solver must be auto, exact or auction, got '" + name + "'");
}

// JSON crosses the boundary as text; the Python wrapper parses it.
std::string dump(const nlohmann::json& j) { return j.dump(); }

/// Loaded generator plus its class names.
struct PyGenerator {
  Generator generator;
  std::vector<std::string> classes;

  int label_of(const std::string& name) const {
    for (std::size_t i = 0; i < classes.size(); ++i)
      if (classes[i] == name) return static_cast<int>(i);
    throw UsageError("unknown class '" + name + "'");
  }

  /// [count, N, 6]; same seeding and batching as the command-line tool.
  Array generate(const std::string& class_name, std::size_t count, std::uint64_t seed) const {
    const int label = label_of(class_name);
    const std::size_t n = generator.resolution();
    Array out({static_cast<py::ssize_t>(count), static_cast<py::ssize_t>(n), py::ssize_t{6}});
    double* dst = out.mutable_data();
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(label)}));
    NoGradGuard no_grad;
    for (std::size_t done = 0; done < count;) {
      const std::size_t b = std::min<std::size_t>(8, count - done);
      const std::vector<int> labels(b, label);
      const Tensor t = generator.generate(sample_latent(b, generator.spec().z_dim, rng), labels);
      const auto v = t.values();
      dst = std::copy(v.begin(), v.end(), dst);
      done += b;
    }
    return out;
  }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Progressive conditional point-cloud GAN: data, metrics, generation and training";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<UsageError>(m, "UsageError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());

  m.attr("precision_bits") = kPrecisionBits;

  m.def(
      "derive_seed",
      [](std::uint64_t base_seed, const std::vector<std::uint64_t>& keys) {
        return derive_seed(base_seed, std::span<const std::uint64_t>(keys));
      },
      py::arg("base"), py::arg("keys"));

  // ---- data ---------------------------------------------------------------------
  m.def(
      "read_ply",
      [](const fs::path& path) {
        const PointCloud c = read_ply(path);
        return py::make_tuple(from_cloud(c), c.label);
      },
      py::arg("path"), "Returns (points [N, 6], label).");
  m.def(
      "write_ply",
      [](const fs::path& path, const Array& points, int label, const std::string& positions) {
        write_ply(to_cloud(points, label), path, position_type(positions));
      },
      py::arg("path"), py::arg("points"), py::arg("label") = -1, py::arg("positions") = "float32");
  m.def(
      "normalize",
      [](const Array& points) {
        PointCloud c = to_cloud(points, -1);
        normalize(c);
        return from_cloud(c);
      },
      py::arg("points"));
  m.def(
      "make_procedural_dataset",
      [](const fs::path& out, std::uint64_t seed, std::size_t samples_per_class,
         const std::vector<std::size_t>& resolutions) {
        ProceduralSpec spec = ProceduralSpec::desk_default();
        spec.samples_per_class = samples_per_class;
        spec.resolutions = resolutions;
        return dump(make_procedural_dataset(spec, out, seed));
      },
      py::arg("out"), py::arg("seed") = 0, py::arg("samples_per_class") = 32,
      py::arg("resolutions") = std::vector<std::size_t>{1024, 2048, 4096, 8192});
  m.def(
      "load_clouds",
      [](const fs::path& dataset, std::size_t resolution) {
        const DatasetManifest manifest = DatasetManifest::load(dataset);
        std::vector<Array> clouds;
        std::vector<int> labels;
        for (const auto& c : load_clouds(dataset, manifest, resolution)) {
          clouds.push_back(from_cloud(c));
          labels.push_back(c.label);
        }
        return py::make_tuple(clouds, labels, manifest.classes);
      },
      py::arg("dataset"), py::arg("resolution"), "Returns (clouds, labels, class names).");

  // ---- metrics --------------------------------------------------------------------
  m.def("chamfer", [](const Array& a, const Array& b) { return chamfer(to_xyz(a), to_xyz(b)); }, py::arg("a"),
        py::arg("b"));
  m.def(
      "emd",
      [](const Array& a, const Array& b, const std::string& solver, std::size_t exact_max, double max_relative_gap) {
        const EmdResult r = emd(to_xyz(a), to_xyz(b), {emd_solver(solver), exact_max, max_relative_gap});
        py::dict d;
        d["value"] = r.value;
        d["solver"] = r.solver;
        d["relative_gap"] = r.relative_gap;
        return d;
      },
      py::arg("a"), py::arg("b"), py::arg("solver") = "auto", py::arg("exact_max") = 1024,
      py::arg("max_relative_gap") = 0.01);
  m.def(
      "jsd",
      [](const std::vector<Array>& a, const std::vector<Array>& b, std::size_t grid, bool per_cloud_occupancy) {
        return jsd(to_xyz_list(a), to_xyz_list(b), {grid, per_cloud_occupancy});
      },
      py::arg("reference"), py::arg("generated"), py::arg("grid") = 28, py::arg("per_cloud_occupancy") = true);
  m.def(
      "mmd_cov",
      [](const Eigen::MatrixXd& distances) {
        const MmdCov r = mmd_cov(distances);
        return py::make_tuple(r.mmd, r.cov);
      },
      py::arg("distances"), "From a [reference, generated] distance matrix; returns (mmd, cov).");
  m.def(
      "fdd",
      [](const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, bool squared_mean_norm) {
        return fdd(GaussianStats::from_features(x), GaussianStats::from_features(y), {squared_mean_norm});
      },
      py::arg("features_x"), py::arg("features_y"), py::arg("squared_mean_norm") = false,
      "Frechet distance between Gaussians fitted to two [count, dim] feature matrices.");

  // ---- generation, training, evaluation ---------------------------------------------
  py::class_<PyGenerator>(m, "Generator")
      .def_property_readonly("resolution", [](const PyGenerator& g) { return g.generator.resolution(); })
      .def_property_readonly("stage", [](const PyGenerator& g) { return g.generator.stage(); })
      .def_readonly("classes", &PyGenerator::classes)
      .def_property_readonly("spec", [](const PyGenerator& g) { return dump(g.generator.spec()); })
      .def("generate", &PyGenerator::generate, py::arg("class_name"), py::arg("count") = 1, py::arg("seed") = 0,
           "Returns a [count, N, 6] array.");
  m.def(
      "load_generator",
      [](const fs::path& ckpt) {
        std::vector<std::string> classes;
        Generator g = load_generator(ckpt, &classes);
        return PyGenerator{std::move(g), std::move(classes)};
      },
      py::arg("checkpoint"));

  m.def(
      "train",
      [](const fs::path& config_path, std::optional<std::uint64_t> seed, std::optional<std::size_t> max_stages) {
        TrainConfig config = TrainConfig::load(config_path);
        if (seed) config.seed = *seed;
        py::gil_scoped_release release;
        Trainer trainer(std::move(config));
        for (std::size_t s = 0; !trainer.finished() && (!max_stages || s < *max_stages); ++s) trainer.run_stage();
        return trainer.checkpoint_dir(trainer.stage() - 1);
      },
      py::arg("config"), py::arg("seed") = py::none(), py::arg("max_stages") = py::none(),
      "Trains from a JSON config file; returns the last checkpoint directory.");

  m.def(
      "train_fdd_extractor",
      [](const fs::path& dataset, const fs::path& out, const std::string& config_json) {
        const ExtractorConfig config = nlohmann::json::parse(config_json).get<ExtractorConfig>();
        py::gil_scoped_release release;
        const ExtractorResult r = train_fdd_extractor(dataset, config);
        save_classifier(r.classifier, out);
        return std::make_tuple(r.per_class_accuracy, r.epochs_run, r.reached_target);
      },
      py::arg("dataset"), py::arg("out"), py::arg("config") = "{}",
      "Trains and saves the feature classifier; returns (per-class accuracy, epochs, reached target).");

  m.def(
      "evaluate",
      [](const fs::path& dataset, std::optional<fs::path> gen_checkpoint, std::optional<fs::path> gen_dataset,
         const fs::path& fdd_checkpoint, std::uint64_t seed, std::size_t geometry_points) {
        EvaluateConfig config;
        config.seed = seed;
        config.geometry_points = geometry_points;
        std::vector<MetricReport> reports;
        {
          py::gil_scoped_release release;
          reports = evaluate(dataset, gen_checkpoint, gen_dataset, fdd_checkpoint, config);
        }
        return dump(nlohmann::json(reports));
      },
      py::arg("dataset"), py::arg("gen_checkpoint") = py::none(), py::arg("gen_dataset") = py::none(),
      py::arg("fdd_checkpoint"), py::arg("seed") = 0, py::arg("geometry_points") = 2048);
}
