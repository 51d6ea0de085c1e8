// pcgan: dataset preparation, training, sampling, FDD extractor training and
// evaluation for the progressive conditional point-cloud GAN.
//
// Exit codes: 0 success, 1 usage or shape error, 2 data error, 3 numeric error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pcgan/data.hpp"
#include "pcgan/errors.hpp"
#include "pcgan/metrics.hpp"
#include "pcgan/trainer.hpp"

namespace fs = std::filesystem;
using namespace pcgan;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

std::string build_precision() { return kPrecisionBits == 64 ? "float64" : "float32"; }

struct Common {
  std::optional<std::uint64_t> seed;
  std::string precision = build_precision();
};

void add_common(CLI::App* cmd, Common& common) {
  cmd->add_option("--seed", common.seed, "Random seed (every command is reproducible under a fixed seed)");
  cmd->add_option("--precision", common.precision, "float64 or float32; must match the build")
      ->capture_default_str();
}

PlyPositionType position_type(const std::string& name) {
  if (name == "float64") return PlyPositionType::Float64;
  if (name == "float32") return PlyPositionType::Float32;
  throw UsageError("position type must be float64 or float32, got '" + name + "'");
}

std::vector<std::size_t> parse_resolutions(const std::string& csv) {
  std::vector<std::size_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(item, &used);
      if (used != item.size() || v == 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw UsageError("--resolutions: '" + item + "' is not a positive integer");
    }
  }
  if (out.empty()) throw UsageError("--resolutions: empty list");
  return out;
}

std::string cloud_file_name(const std::string& class_name, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "_%04zu.ply", index);
  return class_name + buf;
}

// ---- prepare-data ------------------------------------------------------------------

struct PrepareArgs {
  std::string input, procedural, out, resolutions = "1024,2048,4096,8192";
  std::optional<std::size_t> samples_per_class;
};

int prepare_data(const PrepareArgs& a, const Common& c) {
  const auto resolutions = parse_resolutions(a.resolutions);
  const std::uint64_t seed = c.seed.value_or(0);
  DatasetManifest manifest;
  if (!a.procedural.empty()) {
    ProceduralSpec spec = ProceduralSpec::desk_default();
    if (a.procedural != "default") {
      if (!fs::exists(a.procedural)) throw DataError("procedural spec '" + a.procedural + "' does not exist");
      try {
        spec = read_json(a.procedural).get<ProceduralSpec>();
      } catch (const nlohmann::json::exception& e) {
        throw UsageError(a.procedural + ": " + e.what());
      }
    }
    spec.resolutions = resolutions;
    if (a.samples_per_class) spec.samples_per_class = *a.samples_per_class;
    manifest = make_procedural_dataset(spec, a.out, seed);
  } else {
    if (!fs::is_directory(a.input)) throw DataError("input directory '" + a.input + "' does not exist");
    std::vector<std::string> skipped;
    manifest = ingest_meshes(a.input, a.out, resolutions, seed, &skipped);
    for (const auto& s : skipped) std::cerr << "skipped (no colour information): " << s << "\n";
  }
  std::cout << "wrote " << manifest.samples.size() << " samples in " << manifest.classes.size() << " classes to "
            << a.out << "\n";
  return 0;
}

// ---- train ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, resume;
  std::optional<std::size_t> max_stages;
};

int train(const TrainArgs& a, const Common& c) {
  check_precision(c.precision);
  std::optional<Trainer> trainer;
  if (!a.resume.empty()) {
    if (c.seed) throw UsageError("--seed cannot change a resumed run; its seed is stored in the checkpoint");
    trainer.emplace(Trainer::resume(a.resume));
  } else {
    if (!fs::exists(a.config)) throw DataError("config '" + a.config + "' does not exist");
    TrainConfig config = TrainConfig::load(a.config);
    if (c.seed) config.seed = *c.seed;
    check_precision(config.precision);
    trainer.emplace(std::move(config));
  }
  std::size_t stages = 0;
  while (!trainer->finished() && (!a.max_stages || stages < *a.max_stages)) {
    trainer->run_stage(&std::cout);
    ++stages;
  }
  std::cout << "checkpoints in " << (fs::path(trainer->config().out_dir) / "checkpoints").string() << "\n";
  return 0;
}

// ---- generate ------------------------------------------------------------------------

struct GenerateArgs {
  std::string checkpoint, class_name, out, positions = "float64";
  std::size_t count = 1;
};

int generate(const GenerateArgs& a, const Common& c) {
  check_precision(c.precision);
  const PlyPositionType type = position_type(a.positions);
  std::vector<std::string> classes;
  Generator g = load_generator(a.checkpoint, &classes);
  int label = -1;
  for (std::size_t i = 0; i < classes.size(); ++i)
    if (classes[i] == a.class_name) label = static_cast<int>(i);
  if (label < 0) {
    std::string known;
    for (const auto& n : classes) known += (known.empty() ? "" : ", ") + n;
    throw UsageError("unknown class '" + a.class_name + "' (checkpoint classes: " + known + ")");
  }
  Rng rng(derive_seed(c.seed.value_or(0), {static_cast<std::uint64_t>(label)}));
  fs::create_directories(a.out);
  NoGradGuard no_grad;
  std::size_t written = 0;
  while (written < a.count) {
    const std::size_t b = std::min<std::size_t>(8, a.count - written);
    const std::vector<int> labels(b, label);
    for (const auto& cloud : from_tensor(g.generate(sample_latent(b, g.spec().z_dim, rng), labels), labels)) {
      write_ply(cloud, fs::path(a.out) / cloud_file_name(a.class_name, written), type);
      ++written;
    }
  }
  std::cout << "wrote " << written << " clouds of " << g.resolution() << " points to " << a.out << "\n";
  return 0;
}

// ---- train-fdd-extractor --------------------------------------------------------------

struct ExtractorArgs {
  std::string dataset, out, config;
  std::optional<double> target_accuracy;
  std::optional<std::size_t> epochs, resolution, points;
};

int train_extractor(const ExtractorArgs& a, const Common& c) {
  check_precision(c.precision);
  ExtractorConfig config;
  if (!a.config.empty()) config = read_json(a.config).get<ExtractorConfig>();
  if (c.seed) config.seed = *c.seed;
  if (a.target_accuracy) config.target_accuracy = *a.target_accuracy;
  if (a.epochs) config.epochs = *a.epochs;
  if (a.resolution) config.resolution = *a.resolution;
  if (a.points) config.points = *a.points;
  ExtractorResult result = train_fdd_extractor(a.dataset, config, &std::cout);
  save_classifier(result.classifier, a.out);
  const DatasetManifest manifest = DatasetManifest::load(a.dataset);
  for (std::size_t i = 0; i < result.per_class_accuracy.size(); ++i)
    std::cout << manifest.classes[i] << " held-out accuracy " << result.per_class_accuracy[i] << "\n";
  if (!result.reached_target) {
    std::cerr << "target accuracy " << config.target_accuracy << " not reached in " << result.epochs_run
              << " epochs; checkpoint written to " << a.out << "\n";
    return kExitNumeric;
  }
  return 0;
}

// ---- evaluate ------------------------------------------------------------------------

struct EvaluateArgs {
  std::string dataset, gen_checkpoint, gen_dataset, fdd_checkpoint, out;
  EvaluateConfig config;
  std::string emd_solver = "auto";
};

int evaluate_cmd(EvaluateArgs a, const Common& c) {
  check_precision(c.precision);
  if (c.seed) a.config.seed = *c.seed;
  if (a.emd_solver == "auto") a.config.emd.solver = EmdSolver::Auto;
  else if (a.emd_solver == "exact") a.config.emd.solver = EmdSolver::Exact;
  else if (a.emd_solver == "auction") a.config.emd.solver = EmdSolver::Auction;
  else throw UsageError("--emd-solver must be auto, exact or auction");
  std::optional<fs::path> gen_ckpt, gen_data;
  if (!a.gen_checkpoint.empty()) gen_ckpt = a.gen_checkpoint;
  if (!a.gen_dataset.empty()) gen_data = a.gen_dataset;
  const auto reports = evaluate(a.dataset, gen_ckpt, gen_data, a.fdd_checkpoint, a.config);
  write_json(a.out, nlohmann::json(reports));
  fs::path csv = a.out;
  csv.replace_extension(".csv");
  std::ofstream(csv) << reports_to_csv(reports);
  std::cout << reports_to_csv(reports);
  return 0;
}

// ---- export-ply ----------------------------------------------------------------------

struct ExportArgs {
  std::string input, out, positions = "float32";
  std::optional<std::size_t> resolution;
};

int export_ply(const ExportArgs& a, const Common& c) {
  check_precision(c.precision);
  const PlyPositionType type = position_type(a.positions);
  fs::create_directories(a.out);
  if (fs::is_regular_file(a.input)) {
    write_ply(read_ply(a.input), fs::path(a.out) / fs::path(a.input).filename(), type);
    std::cout << "wrote 1 cloud to " << a.out << "\n";
    return 0;
  }
  if (!fs::is_directory(a.input)) throw DataError("input '" + a.input + "' does not exist");
  const DatasetManifest manifest = DatasetManifest::load(a.input);
  const std::size_t res = a.resolution.value_or(manifest.resolutions.back());
  const auto clouds = load_clouds(a.input, manifest, res);
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    const auto& s = manifest.samples[i];
    write_ply(clouds[i], fs::path(a.out) / (manifest.classes[s.class_id] + "_" + s.id + ".ply"), type);
  }
  std::cout << "wrote " << clouds.size() << " clouds of " << res << " points to " << a.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Progressive conditional GAN for coloured point clouds"};
  app.require_subcommand(1);
  app.footer("Exit codes: 0 success, 1 usage/shape error, 2 data error, 3 numeric error.");

  Common common;

  PrepareArgs prep;
  auto* cmd_prep = app.add_subcommand("prepare-data", "Sample a coloured point-cloud dataset from meshes");
  auto* in_opt = cmd_prep->add_option("--input", prep.input, "Directory of meshes: <class>/<name>.{obj,ply}");
  auto* proc_opt =
      cmd_prep->add_option("--procedural", prep.procedural, "Procedural spec JSON, or 'default' for the 2-class toy set");
  in_opt->excludes(proc_opt);
  cmd_prep->add_option("--out", prep.out, "Dataset directory to write")->required();
  cmd_prep->add_option("--resolutions", prep.resolutions, "Comma-separated points per cloud")->capture_default_str();
  cmd_prep->add_option("--samples-per-class", prep.samples_per_class, "Override the procedural sample count");
  add_common(cmd_prep, common);

  TrainArgs tr;
  auto* cmd_train = app.add_subcommand("train", "Progressive WGAN-GP training from a JSON config");
  auto* cfg_opt = cmd_train->add_option("--config", tr.config, "Training config (train.json)");
  auto* res_opt = cmd_train->add_option("--resume", tr.resume, "Stage checkpoint directory to continue from");
  cfg_opt->excludes(res_opt);
  cmd_train->add_option("--max-stages", tr.max_stages, "Stop after this many stages");
  add_common(cmd_train, common);

  GenerateArgs gen;
  auto* cmd_gen = app.add_subcommand("generate", "Sample clouds of one class from a generator checkpoint");
  cmd_gen->add_option("--checkpoint", gen.checkpoint, "Generator checkpoint (G.ckpt)")->required();
  cmd_gen->add_option("--class", gen.class_name, "Class name")->required();
  cmd_gen->add_option("--count", gen.count, "Number of clouds")->capture_default_str();
  cmd_gen->add_option("--out", gen.out, "Output directory for PLY files")->required();
  cmd_gen->add_option("--positions", gen.positions, "PLY position type: float64 or float32")->capture_default_str();
  add_common(cmd_gen, common);

  ExtractorArgs ex;
  auto* cmd_ex = app.add_subcommand("train-fdd-extractor", "Train the classifier whose features define FDD");
  cmd_ex->add_option("--dataset", ex.dataset, "Dataset directory")->required();
  cmd_ex->add_option("--out", ex.out, "Classifier checkpoint to write (FDDX.ckpt)")->required();
  cmd_ex->add_option("--config", ex.config, "Extractor config JSON");
  cmd_ex->add_option("--target-accuracy", ex.target_accuracy, "Required held-out accuracy per class (default 0.98)");
  cmd_ex->add_option("--epochs", ex.epochs, "Epoch budget");
  cmd_ex->add_option("--resolution", ex.resolution, "Dataset resolution to train on");
  cmd_ex->add_option("--points", ex.points, "Random points per training cloud (0 = all)");
  add_common(cmd_ex, common);

  EvaluateArgs ev;
  auto* cmd_ev = app.add_subcommand("evaluate", "JSD, MMD/COV (CD and EMD) and FDD per class");
  cmd_ev->add_option("--dataset", ev.dataset, "Reference dataset directory")->required();
  auto* gck = cmd_ev->add_option("--gen-checkpoint", ev.gen_checkpoint, "Generator checkpoint (G.ckpt)");
  auto* gds = cmd_ev->add_option("--gen-dataset", ev.gen_dataset, "Dataset to evaluate as the generated set");
  gck->excludes(gds);
  cmd_ev->add_option("--fdd-checkpoint", ev.fdd_checkpoint, "FDD classifier checkpoint (FDDX.ckpt)")->required();
  cmd_ev->add_option("--out", ev.out, "Report JSON (a CSV copy is written next to it)")->required();
  cmd_ev->add_option("--geometry-points", ev.config.geometry_points, "Points per cloud for geometry metrics")
      ->capture_default_str();
  cmd_ev->add_option("--samples-per-class", ev.config.samples_per_class, "Generated clouds per class (0 = reference count)")
      ->capture_default_str();
  cmd_ev->add_option("--fdd-points", ev.config.fdd_points, "Points per cloud for FDD features (0 = all)")
      ->capture_default_str();
  cmd_ev->add_option("--jsd-grid", ev.config.jsd.grid, "Voxels per axis for JSD")->capture_default_str();
  cmd_ev->add_option("--emd-solver", ev.emd_solver, "auto, exact or auction")->capture_default_str();
  cmd_ev->add_option("--emd-exact-max", ev.config.emd.exact_max, "Largest N solved exactly under auto")
      ->capture_default_str();
  cmd_ev->add_flag("--squared-mean-norm", ev.config.fdd.squared_mean_norm, "FDD with ||mu - mu'||^2 (FID convention)");
  add_common(cmd_ev, common);

  ExportArgs exp;
  auto* cmd_exp = app.add_subcommand("export-ply", "Re-encode a PLY file or a dataset's clouds for viewers");
  cmd_exp->add_option("--input", exp.input, "PLY file or dataset directory")->required();
  cmd_exp->add_option("--out", exp.out, "Output directory")->required();
  cmd_exp->add_option("--resolution", exp.resolution, "Dataset resolution (default: the largest)");
  cmd_exp->add_option("--positions", exp.positions, "PLY position type: float32 or float64")->capture_default_str();
  add_common(cmd_exp, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*cmd_prep) {
      if (prep.input.empty() && prep.procedural.empty())
        throw UsageError("prepare-data needs --input or --procedural");
      return prepare_data(prep, common);
    }
    if (*cmd_train) {
      if (tr.config.empty() && tr.resume.empty()) throw UsageError("train needs --config or --resume");
      return train(tr, common);
    }
    if (*cmd_gen) return generate(gen, common);
    if (*cmd_ex) return train_extractor(ex, common);
    if (*cmd_ev) {
      if (ev.gen_checkpoint.empty() && ev.gen_dataset.empty())
        throw UsageError("evaluate needs --gen-checkpoint or --gen-dataset");
      return evaluate_cmd(ev, common);
    }
    if (*cmd_exp) return export_ply(exp, common);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
