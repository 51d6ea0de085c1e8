#include "pcgan/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>

#include "pcgan/errors.hpp"

namespace pcgan {

namespace fs = std::filesystem;

// ---- Adam --------------------------------------------------------------------

void Adam::step(const ParameterStore& params, const Gradients& grads) {
  for (const auto& p : params.items()) {
    if (!p.tensor.requires_grad() || !grads.contains(p.tensor)) continue;
    Slot& slot = slots_[p.name];
    if (slot.shape != p.tensor.shape() || slot.m.size() != p.tensor.numel()) slot = Slot{p.tensor.shape(), std::vector<double>(p.tensor.numel(), 0.0),
                                                   std::vector<double>(p.tensor.numel(), 0.0), 0};
    ++slot.t;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(slot.t));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(slot.t));
    const auto g = grads.get(p.tensor).values();
    Tensor leaf = p.tensor;
    auto w = leaf.mutable_values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      slot.m[i] = config_.beta1 * slot.m[i] + (1.0 - config_.beta1) * gi;
      slot.v[i] = config_.beta2 * slot.v[i] + (1.0 - config_.beta2) * gi * gi;
      const double m_hat = slot.m[i] / c1;
      const double v_hat = slot.v[i] / c2;
      w[i] = static_cast<Real>(static_cast<double>(w[i]) - config_.lr * m_hat / (std::sqrt(v_hat) + config_.eps));
    }
  }
}

void Adam::prune(const ParameterStore& params) {
  for (auto it = slots_.begin(); it != slots_.end();) {
    if (!params.contains(it->first) || params.at(it->first).shape() != it->second.shape) it = slots_.erase(it);
    else ++it;
  }
}

std::size_t Adam::steps(const std::string& name) const {
  auto it = slots_.find(name);
  return it == slots_.end() ? 0 : static_cast<std::size_t>(it->second.t);
}

std::vector<CheckpointRecord> Adam::to_records(const std::string& prefix) const {
  std::vector<CheckpointRecord> out;
  for (const auto& [name, slot] : slots_) {
    // Moments are stored at the build precision (exact in 64-bit builds).
    auto as_tensor = [&](const std::vector<double>& v) {
      return Tensor(slot.shape, std::vector<Real>(v.begin(), v.end()));
    };
    out.push_back({prefix + name + ".m", as_tensor(slot.m)});
    out.push_back({prefix + name + ".v", as_tensor(slot.v)});
    out.push_back({prefix + name + ".t", Tensor::scalar(static_cast<Real>(slot.t))});
  }
  return out;
}

void Adam::load_records(const std::vector<CheckpointRecord>& records, const std::string& prefix) {
  slots_.clear();
  std::map<std::string, const Tensor*> by_name;
  for (const auto& r : records) by_name[r.name] = &r.tensor;
  for (const auto& [name, tensor] : by_name) {
    if (name.rfind(prefix, 0) != 0 || name.size() < 2 || name.compare(name.size() - 2, 2, ".t") != 0) continue;
    const std::string param = name.substr(prefix.size(), name.size() - prefix.size() - 2);
    auto m = by_name.find(prefix + param + ".m");
    auto v = by_name.find(prefix + param + ".v");
    if (m == by_name.end() || v == by_name.end() || m->second->shape() != v->second->shape())
      throw DataError("optimizer state for '" + param + "' is incomplete");
    Slot slot;
    slot.shape = m->second->shape();
    slot.m.assign(m->second->values().begin(), m->second->values().end());
    slot.v.assign(v->second->values().begin(), v->second->values().end());
    slot.t = static_cast<std::uint64_t>(tensor->item());
    slots_[param] = std::move(slot);
  }
}

// ---- config ------------------------------------------------------------------

void check_precision(const std::string& precision) {
  int bits = 0;
  if (precision == "float64" || precision == "64" || precision == "double") bits = 64;
  else if (precision == "float32" || precision == "32" || precision == "float") bits = 32;
  else throw UsageError("precision must be float64 or float32, got '" + precision + "'");
  if (bits != kPrecisionBits)
    throw UsageError("this build computes in " + std::to_string(kPrecisionBits) + "-bit precision; rebuild with" +
                     (bits == 32 ? " -DPCGAN_FLOAT32=ON" : "out PCGAN_FLOAT32") + " for " + precision);
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw UsageError("config: batch_size must be >= 1");
  if (!(lr >= 0)) throw UsageError("config: lr must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw UsageError("config: betas must lie in [0, 1)");
  if (!(gp_lambda >= 0)) throw UsageError("config: gp_lambda must be >= 0");
  if (critic_steps < 1) throw UsageError("config: critic_steps must be >= 1");
  if (dataset_dir.empty()) throw UsageError("config: dataset_dir is required");
  if (out_dir.empty()) throw UsageError("config: out_dir is required");
  check_precision(precision);
  generator.validate();
  critic.validate();
  StageSchedule{stages}.validate(generator);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : c.stages) stages.push_back({{"resolution", s.resolution}, {"iterations", s.iterations}});
  j = nlohmann::json{{"seed", c.seed},
                     {"batch_size", c.batch_size},
                     {"lr", c.lr},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"gp_lambda", c.gp_lambda},
                     {"critic_steps", c.critic_steps},
                     {"stages", stages},
                     {"dataset_dir", c.dataset_dir},
                     {"out_dir", c.out_dir},
                     {"precision", c.precision},
                     {"generator", c.generator},
                     {"critic", c.critic}};
  if (c.penalty_per_point) j["penalty_per_point"] = true;
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const char* known[] = {"seed",   "batch_size",  "lr",      "beta1",     "beta2",
                                "gp_lambda", "critic_steps", "stages", "dataset_dir", "out_dir",
                                "precision", "generator",  "critic",  "penalty_per_point"};
  for (const auto& [key, value] : j.items())
    if (std::find(std::begin(known), std::end(known), key) == std::end(known))
      throw UsageError("config: unknown key '" + key + "'");
  TrainConfig d;
  c.seed = j.value("seed", d.seed);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.gp_lambda = j.value("gp_lambda", d.gp_lambda);
  c.critic_steps = j.value("critic_steps", d.critic_steps);
  c.dataset_dir = j.value("dataset_dir", d.dataset_dir);
  c.out_dir = j.value("out_dir", d.out_dir);
  c.precision = j.value("precision", d.precision);
  c.generator = j.contains("generator") ? j.at("generator").get<GeneratorSpec>() : d.generator;
  c.critic = j.contains("critic") ? j.at("critic").get<CriticSpec>() : d.critic;
  c.penalty_per_point = j.value("penalty_per_point", false);
  c.stages.clear();
  if (!j.contains("stages")) throw UsageError("config: stages is required");
  for (const auto& s : j.at("stages"))
    c.stages.push_back({s.at("resolution").get<std::size_t>(), s.at("iterations").get<std::size_t>()});
}

TrainConfig TrainConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config '" + path.string() + "'");
  try {
    TrainConfig c = nlohmann::json::parse(in).get<TrainConfig>();
    // Relative directories are taken relative to the config file.
    const fs::path base = path.parent_path();
    if (!c.dataset_dir.empty() && fs::path(c.dataset_dir).is_relative()) c.dataset_dir = (base / c.dataset_dir).string();
    if (!c.out_dir.empty() && fs::path(c.out_dir).is_relative()) c.out_dir = (base / c.out_dir).string();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config '" + path.string() + "': " + e.what());
  }
}

// ---- log ---------------------------------------------------------------------

std::string TrainLog::format_row(const TrainLogRow& r) {
  std::ostringstream ss;
  ss << std::setprecision(17) << r.stage << ',' << r.iter << ',' << r.critic_loss << ',' << r.gen_loss << ',' << r.gp
     << ',' << std::setprecision(6) << r.seconds;
  return ss.str();
}

std::string TrainLog::to_csv() const {
  std::string out = std::string(kHeader) + "\n";
  for (const auto& r : rows_) out += format_row(r) + "\n";
  return out;
}

TrainLog TrainLog::parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kHeader) throw DataError("train log: unexpected header");
  TrainLog log;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    TrainLogRow r;
    char comma;
    if (!(ls >> r.stage >> comma >> r.iter >> comma >> r.critic_loss >> comma >> r.gen_loss >> comma >> r.gp >> comma >>
          r.seconds))
      throw DataError("train log: malformed row '" + line + "'");
    log.append(r);
  }
  return log;
}

// ---- sampling and steps --------------------------------------------------------

Tensor sample_latent(std::size_t batch, std::size_t dim, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Real> v(batch * dim);
  for (auto& x : v) x = static_cast<Real>(normal(rng));
  return Tensor({batch, dim}, std::move(v));
}

std::vector<int> sample_labels(std::size_t batch, std::size_t num_classes, Rng& rng) {
  std::uniform_int_distribution<int> pick(0, static_cast<int>(num_classes) - 1);
  std::vector<int> labels(batch);
  for (auto& l : labels) l = pick(rng);
  return labels;
}

Tensor sample_interpolation_weights(std::size_t batch, std::size_t n, bool per_point, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t rows = per_point ? n : 1;
  std::vector<Real> v(batch * rows);
  for (auto& x : v) x = static_cast<Real>(unit(rng));
  return Tensor({batch, rows, 1}, std::move(v));
}

PenaltyResult gradient_penalty(const CriticFn& critic, const Tensor& real, const Tensor& fake, const Tensor& eps,
                               double lambda) {
  if (real.shape() != fake.shape() || real.rank() != 3)
    throw ShapeError("gradient_penalty: real " + shape_string(real.shape()) + " and fake " +
                     shape_string(fake.shape()) + " must match as [batch, n, channels]");
  if (eps.rank() != 3 || eps.size(0) != real.size(0) || eps.size(2) != 1 ||
      (eps.size(1) != 1 && eps.size(1) != real.size(1)))
    throw ShapeError("gradient_penalty: weights " + shape_string(eps.shape()) + " do not fit " +
                     shape_string(real.shape()));
  if (lambda == 0) return {Tensor::scalar(0), 0.0};

  Tensor mixed;
  {
    NoGradGuard guard;
    mixed = add(mul(eps, real), mul(add_scalar(neg(eps), 1), fake));
  }
  Tensor x = Tensor(mixed.shape(), std::vector<Real>(mixed.values().begin(), mixed.values().end()), true);
  Tensor g = grad(sum(critic(x)), {x}, true)[0];
  const std::size_t b = real.size(0);
  Tensor norms = l2_norm(reshape(g, {b, real.numel() / b}), 1);
  double mean_norm = 0;
  for (Real n : norms.values()) mean_norm += static_cast<double>(n) / static_cast<double>(b);
  return {scale(mean(square(add_scalar(norms, -1))), static_cast<Real>(lambda)), mean_norm};
}

namespace {

// Freezes a network for the lifetime of the guard.
class Freeze {
 public:
  explicit Freeze(ParameterStore& params) : params_(params) {
    params_.set_requires_grad(false);
  }
  ~Freeze() { params_.set_requires_grad(true); }
  Freeze(const Freeze&) = delete;
  Freeze& operator=(const Freeze&) = delete;

 private:
  ParameterStore& params_;
};

double checked(const Tensor& loss, const std::string& what, std::size_t stage) {
  const double v = static_cast<double>(loss.item());
  if (!std::isfinite(v)) throw NumericError(what + " loss became non-finite (" + std::to_string(v) + ") at stage " +
                                            std::to_string(stage));
  return v;
}

}  // namespace

StepResult critic_step(Generator& g, Critic& d, Adam& opt, const Tensor& real, std::span<const int> labels,
                       std::size_t stage, const TrainConfig& config, Rng& rng) {
  if (real.rank() != 3 || real.size(1) != g.resolution() || real.size(0) != labels.size())
    throw ShapeError("critic_step: real batch " + shape_string(real.shape()) + " does not match generator resolution " +
                     std::to_string(g.resolution()) + " and " + std::to_string(labels.size()) + " labels");
  Freeze frozen(g.parameters());
  const std::size_t batch = real.size(0);
  Tensor z = sample_latent(batch, g.spec().z_dim, rng);
  Tensor fake;
  {
    NoGradGuard guard;
    fake = g.generate(z, labels);
  }
  Tensor eps = sample_interpolation_weights(batch, real.size(1), config.penalty_per_point, rng);
  auto critic = [&](const Tensor& x) { return d.criticize(x, labels, stage); };
  PenaltyResult gp = gradient_penalty(critic, real, fake, eps, config.gp_lambda);
  Tensor loss = add(sub(mean(critic(fake)), mean(critic(real))), gp.value);
  StepResult out{checked(loss, "critic", stage), static_cast<double>(gp.value.item())};
  opt.step(d.parameters(), backward(loss));
  return out;
}

StepResult generator_step(Generator& g, Critic& d, Adam& opt, std::size_t batch, std::size_t stage, Rng& rng) {
  Freeze frozen(d.parameters());
  std::vector<int> labels = sample_labels(batch, g.spec().num_classes, rng);
  Tensor z = sample_latent(batch, g.spec().z_dim, rng);
  Tensor loss = neg(mean(d.criticize(g.generate(z, labels), labels, stage)));
  StepResult out{checked(loss, "generator", stage), 0.0};
  opt.step(g.parameters(), backward(loss));
  return out;
}

// ---- checkpoints -----------------------------------------------------------------

fs::path sidecar_path(const fs::path& ckpt) {
  fs::path p = ckpt;
  return p.replace_extension(".json");
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << j.dump(2) << "\n";
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void save_generator(const Generator& g, const std::vector<std::string>& classes, const fs::path& ckpt) {
  save_checkpoint(ckpt, to_records(g.parameters()));
  write_json(sidecar_path(ckpt), {{"spec", g.spec()}, {"stage", g.stage()}, {"classes", classes}});
}

Generator load_generator(const fs::path& ckpt, std::vector<std::string>* classes) {
  const nlohmann::json side = read_json(sidecar_path(ckpt));
  Generator g(side.at("spec").get<GeneratorSpec>(), 0, side.at("stage").get<std::size_t>());
  assign_from_records(g.parameters(), load_checkpoint(ckpt));
  if (classes) *classes = side.value("classes", std::vector<std::string>{});
  return g;
}

void save_critic(const Critic& d, const fs::path& ckpt) {
  save_checkpoint(ckpt, to_records(d.parameters()));
  write_json(sidecar_path(ckpt), {{"spec", d.spec()}});
}

Critic load_critic(const fs::path& ckpt) {
  const nlohmann::json side = read_json(sidecar_path(ckpt));
  Critic d(side.at("spec").get<CriticSpec>(), 0);
  assign_from_records(d.parameters(), load_checkpoint(ckpt));
  return d;
}

// ---- trainer ---------------------------------------------------------------------

namespace {

TrainConfig with_classes(TrainConfig config, std::size_t num_classes) {
  config.generator.num_classes = num_classes;
  config.critic.num_classes = num_classes;
  return config;
}

DatasetManifest checked_manifest(const TrainConfig& config) {
  config.validate();
  DatasetManifest m = DatasetManifest::load(config.dataset_dir);
  std::vector<std::size_t> required;
  for (const auto& s : config.stages) required.push_back(s.resolution);
  m.verify(config.dataset_dir, required);
  if (m.classes.size() < 1 || m.samples.empty()) throw DataError("dataset has no samples");
  return m;
}

}  // namespace

Trainer::Trainer(TrainConfig config, DatasetManifest manifest, Generator g, Critic d)
    : config_(std::move(config)),
      manifest_(std::move(manifest)),
      generator_(std::move(g)),
      critic_(std::move(d)),
      opt_g_(config_.adam()),
      opt_d_(config_.adam()) {}

Trainer::Trainer(TrainConfig config)
    : Trainer(config, DatasetManifest{}, Generator(config.generator, 0), Critic(config.critic, 0)) {
  manifest_ = checked_manifest(config_);
  config_ = with_classes(config_, manifest_.classes.size());
  generator_ = Generator(config_.generator, derive_seed(config_.seed, {1}));
  critic_ = Critic(config_.critic, derive_seed(config_.seed, {2}));
  rng_ = Rng(derive_seed(config_.seed, {3}));
  fs::create_directories(config_.out_dir);
  std::ofstream(fs::path(config_.out_dir) / "train_log.csv", std::ios::trunc) << TrainLog::kHeader << "\n";
}

fs::path Trainer::checkpoint_dir(std::size_t s) const {
  return fs::path(config_.out_dir) / "checkpoints" / ("stage" + std::to_string(s));
}

void Trainer::save_boundary(std::size_t completed_stage) const {
  const fs::path dir = checkpoint_dir(completed_stage);
  fs::create_directories(dir);
  save_generator(generator_, manifest_.classes, dir / "G.ckpt");
  save_critic(critic_, dir / "D.ckpt");
  auto records = opt_g_.to_records("ADAM.G.");
  auto d_records = opt_d_.to_records("ADAM.D.");
  records.insert(records.end(), d_records.begin(), d_records.end());
  save_checkpoint(dir / "optim.ckpt", records);
  std::ostringstream rng_state;
  rng_state << rng_;
  write_json(dir / "trainer.json",
             {{"config", config_}, {"completed_stage", completed_stage}, {"rng", rng_state.str()}});
}

Trainer Trainer::resume(const fs::path& dir) {
  const nlohmann::json state = read_json(dir / "trainer.json");
  TrainConfig config = state.at("config").get<TrainConfig>();
  DatasetManifest manifest = checked_manifest(config);
  Generator g = load_generator(dir / "G.ckpt");
  Critic d = load_critic(dir / "D.ckpt");
  Trainer t(config, std::move(manifest), std::move(g), std::move(d));
  const auto optim = load_checkpoint(dir / "optim.ckpt");
  t.opt_g_.load_records(optim, "ADAM.G.");
  t.opt_d_.load_records(optim, "ADAM.D.");
  std::istringstream rng_state(state.at("rng").get<std::string>());
  rng_state >> t.rng_;
  if (!rng_state) throw DataError("trainer.json: malformed rng state");
  t.stage_ = state.at("completed_stage").get<std::size_t>() + 1;
  return t;
}

void Trainer::append_log_file(const TrainLogRow& row) const {
  std::ofstream out(fs::path(config_.out_dir) / "train_log.csv", std::ios::app);
  out << TrainLog::format_row(row) << "\n";
}

void Trainer::run_stage(std::ostream* progress) {
  if (finished()) throw UsageError("training already finished");
  const Stage& st = config_.stages[stage_];
  if (generator_.resolution() != st.resolution)
    throw ShapeError("generator resolution " + std::to_string(generator_.resolution()) + " does not match stage " +
                     std::to_string(stage_) + " resolution " + std::to_string(st.resolution));
  const std::vector<PointCloud> clouds = load_clouds(config_.dataset_dir, manifest_, st.resolution);
  const auto start = std::chrono::steady_clock::now();
  const std::size_t report_every = std::max<std::size_t>(1, st.iterations / 10);

  for (std::size_t it = 0; it < st.iterations; ++it) {
    StepResult c;
    for (std::size_t s = 0; s < config_.critic_steps; ++s) {
      std::uniform_int_distribution<std::size_t> pick(0, clouds.size() - 1);
      std::vector<const PointCloud*> batch;
      std::vector<int> labels;
      for (std::size_t b = 0; b < config_.batch_size; ++b) {
        const PointCloud& cloud = clouds[pick(rng_)];
        batch.push_back(&cloud);
        labels.push_back(cloud.label);
      }
      c = critic_step(generator_, critic_, opt_d_, to_tensor(batch), labels, stage_, config_, rng_);
    }
    const StepResult gen = generator_step(generator_, critic_, opt_g_, config_.batch_size, stage_, rng_);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const TrainLogRow row{stage_, it, c.loss, gen.loss, c.penalty, seconds};
    log_.append(row);
    append_log_file(row);
    if (progress && ((it + 1) % report_every == 0 || it + 1 == st.iterations))
      *progress << "stage " << stage_ << " iter " << it + 1 << "/" << st.iterations << " critic " << c.loss << " gen "
                << gen.loss << " gp " << c.penalty << " (" << std::fixed << std::setprecision(1) << seconds << "s)"
                << std::defaultfloat << std::endl;
  }

  if (stage_ + 1 < config_.stages.size()) {
    generator_.grow(StageSchedule{config_.stages}, rng_);
    opt_g_.prune(generator_.parameters());
  }
  save_boundary(stage_);
  if (progress) *progress << "wrote " << checkpoint_dir(stage_).string() << std::endl;
  ++stage_;
}

void Trainer::run(std::ostream* progress) {
  while (!finished()) run_stage(progress);
}

}  // namespace pcgan
