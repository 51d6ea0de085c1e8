#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pcgan/checkpoint.hpp"
#include "pcgan/data.hpp"
#include "pcgan/dgcnn.hpp"
#include "pcgan/parameters.hpp"
#include "pcgan/treegen.hpp"

namespace pcgan {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.0;
  double beta2 = 0.95;
  double eps = 1e-8;
};

/// Adam with bias-corrected moments. State is keyed by parameter name and
/// starts from zero (with its own step count) for parameters it has not seen
/// or whose shape changed.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  const AdamConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }

  /// Updates every parameter that requires grad and has a gradient.
  void step(const ParameterStore& params, const Gradients& grads);
  /// Drops state of parameters that no longer exist.
  void prune(const ParameterStore& params);

  std::size_t steps(const std::string& name) const;
  std::vector<CheckpointRecord> to_records(const std::string& prefix) const;
  void load_records(const std::vector<CheckpointRecord>& records, const std::string& prefix);

 private:
  struct Slot {
    Shape shape;
    std::vector<double> m, v;
    std::uint64_t t = 0;
  };
  AdamConfig config_;
  std::map<std::string, Slot> slots_;
};

struct TrainConfig {
  std::uint64_t seed = 0;
  std::size_t batch_size = 8;
  double lr = 1e-4;
  double beta1 = 0.0;
  double beta2 = 0.95;
  double gp_lambda = 10.0;
  std::size_t critic_steps = 1;
  std::vector<Stage> stages;
  std::string dataset_dir;
  std::string out_dir;
  std::string precision = "float64";
  GeneratorSpec generator;
  CriticSpec critic;
  /// Draw the interpolation weight per point instead of per cloud.
  bool penalty_per_point = false;

  AdamConfig adam() const { return {lr, beta1, beta2, 1e-8}; }
  void validate() const;
  static TrainConfig load(const std::filesystem::path& path);
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Rejects a precision string that does not match the compiled scalar type.
void check_precision(const std::string& precision);

struct TrainLogRow {
  std::size_t stage = 0;
  std::size_t iter = 0;
  double critic_loss = 0;
  double gen_loss = 0;
  double gp = 0;
  double seconds = 0;
};

class TrainLog {
 public:
  static constexpr const char* kHeader = "stage,iter,critic_loss,gen_loss,gp,seconds";

  void append(const TrainLogRow& row) { rows_.push_back(row); }
  const std::vector<TrainLogRow>& rows() const { return rows_; }
  std::string to_csv() const;
  static std::string format_row(const TrainLogRow& row);
  static TrainLog parse_csv(const std::string& text);

 private:
  std::vector<TrainLogRow> rows_;
};

/// N(0, 1) latent codes, [batch, dim].
Tensor sample_latent(std::size_t batch, std::size_t dim, Rng& rng);
/// Uniform class labels in [0, num_classes).
std::vector<int> sample_labels(std::size_t batch, std::size_t num_classes, Rng& rng);
/// Interpolation weights: [batch, 1, 1] per cloud or [batch, n, 1] per point.
Tensor sample_interpolation_weights(std::size_t batch, std::size_t n, bool per_point, Rng& rng);

using CriticFn = std::function<Tensor(const Tensor&)>;

struct PenaltyResult {
  Tensor value;              // differentiable scalar
  double mean_grad_norm = 0;
};

/// lambda * mean_b (||grad_x D(x~)_b||_2 - 1)^2 with x~ = eps*real + (1-eps)*fake,
/// the gradient flattened over all points and channels of each cloud.
PenaltyResult gradient_penalty(const CriticFn& critic, const Tensor& real, const Tensor& fake, const Tensor& eps,
                               double lambda);

struct StepResult {
  double loss = 0;
  double penalty = 0;
};

/// One critic update with the generator frozen:
/// loss = mean D(fake) - mean D(real) + penalty.
StepResult critic_step(Generator& g, Critic& d, Adam& opt, const Tensor& real, std::span<const int> labels,
                       std::size_t stage, const TrainConfig& config, Rng& rng);
/// One generator update with the critic frozen: loss = -mean D(G(z, c), c).
StepResult generator_step(Generator& g, Critic& d, Adam& opt, std::size_t batch, std::size_t stage,
                          Rng& rng);

/// Pretty-printed JSON file I/O; failures are data errors.
void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

/// Writes G.ckpt + G.json (spec, stage, class names).
void save_generator(const Generator& g, const std::vector<std::string>& classes, const std::filesystem::path& ckpt);
Generator load_generator(const std::filesystem::path& ckpt, std::vector<std::string>* classes = nullptr);
void save_critic(const Critic& d, const std::filesystem::path& ckpt);
Critic load_critic(const std::filesystem::path& ckpt);
/// Sidecar path next to a checkpoint: "G.ckpt" -> "G.json".
std::filesystem::path sidecar_path(const std::filesystem::path& ckpt);

/// Progressive WGAN-GP training over the configured stage schedule.
class Trainer {
 public:
  explicit Trainer(TrainConfig config);
  /// Continues from a stage-boundary checkpoint directory.
  static Trainer resume(const std::filesystem::path& checkpoint_dir);

  /// Trains every remaining stage; growth and a checkpoint follow each stage.
  void run(std::ostream* progress = nullptr);
  /// Trains the current stage only.
  void run_stage(std::ostream* progress = nullptr);
  bool finished() const { return stage_ >= config_.stages.size(); }

  const TrainConfig& config() const { return config_; }
  std::size_t stage() const { return stage_; }
  const TrainLog& log() const { return log_; }
  Generator& generator() { return generator_; }
  Critic& critic() { return critic_; }
  const DatasetManifest& manifest() const { return manifest_; }
  /// Directory written after stage `s` completes.
  std::filesystem::path checkpoint_dir(std::size_t s) const;

 private:
  Trainer(TrainConfig config, DatasetManifest manifest, Generator g, Critic d);
  void save_boundary(std::size_t completed_stage) const;
  void append_log_file(const TrainLogRow& row) const;

  TrainConfig config_;
  DatasetManifest manifest_;
  Generator generator_;
  Critic critic_;
  Adam opt_g_;
  Adam opt_d_;
  Rng rng_;
  std::size_t stage_ = 0;
  TrainLog log_;
};

}  // namespace pcgan
