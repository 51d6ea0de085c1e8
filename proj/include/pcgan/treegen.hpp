#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pcgan/parameters.hpp"
#include "pcgan/tensor.hpp"

namespace pcgan {

/// Architecture of the conditional tree generator.
struct GeneratorSpec {
  std::size_t z_dim = 64;
  std::size_t label_embed_dim = 64;
  std::size_t label_hidden = 64;
  std::vector<std::size_t> branch_depths{1, 2, 2, 2, 2};  // H
  std::size_t leaf_factor = 64;                            // h_L
  /// Width of z, then one width per branch, then the leaf output (6).
  std::vector<std::size_t> feature_widths{128, 128, 256, 256, 128, 128, 6};
  std::size_t support = 10;          // m, terms of the Chebyshev sub-network
  std::size_t ancestor_window = 3;   // 0 means every ancestor up to the root
  std::size_t num_classes = 2;

  std::size_t num_branches() const { return branch_depths.size(); }
  /// Points per cloud: h_L times the product of the branch factors.
  std::size_t resolution() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const GeneratorSpec& spec);
void from_json(const nlohmann::json& j, GeneratorSpec& spec);

struct Stage {
  std::size_t resolution = 0;
  std::size_t iterations = 0;
};

/// Progressive training plan: stage d trains at resolution R_1 * 2^d.
struct StageSchedule {
  std::vector<Stage> stages;

  /// `num_stages` stages starting at spec.resolution(), doubling each time.
  static StageSchedule doubling(const GeneratorSpec& spec, std::size_t num_stages,
                                std::size_t iterations_per_stage);
  /// Branch (1-based) copied by growth event `event` (0-based) for a
  /// generator that started with `initial_branches` branches.
  static std::size_t replication_source(std::size_t initial_branches, std::size_t event) {
    return initial_branches + event;
  }
  void validate(const GeneratorSpec& initial) const;
};

/// Node features of the generator tree, one matrix per layer.
///
/// Layer 0 is the point vector z (one node per cloud). Layer l holds, for
/// each cloud of the batch, nodes(l) consecutive rows; children of a node are
/// contiguous, so the ancestor of node t at layer a is t / (nodes(l)/nodes(a)).
class TreeState {
 public:
  explicit TreeState(Tensor root);

  std::size_t batch() const { return batch_; }
  std::size_t depth() const { return layers_.size(); }
  std::size_t nodes(std::size_t layer) const;
  std::size_t width(std::size_t layer) const;

  /// [batch * nodes(layer), width(layer)]; reads are logged when enabled.
  const Tensor& features(std::size_t layer) const;
  /// Rows of `ancestor_layer` holding the ancestor of every row of `layer`.
  IndexList ancestor_rows(std::size_t layer, std::size_t ancestor_layer) const;

  void push(Tensor features, std::size_t branch_factor);

  void log_reads(bool enabled) { logging_ = enabled; }
  const std::vector<std::size_t>& reads() const { return reads_; }
  void clear_reads() { reads_.clear(); }

 private:
  std::vector<Tensor> layers_;
  std::vector<std::size_t> nodes_;
  std::size_t batch_ = 0;
  bool logging_ = false;
  mutable std::vector<std::size_t> reads_;
};

/// G = (label transformer, tree point transformer) with progressive growth.
class Generator {
 public:
  Generator(GeneratorSpec spec, std::uint64_t seed, std::size_t stage = 0);

  const GeneratorSpec& spec() const { return spec_; }
  std::size_t stage() const { return stage_; }
  std::size_t resolution() const { return spec_.resolution(); }
  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }

  /// Class embedding g_c for each label, [batch, label_embed_dim].
  Tensor label_transform(std::span<const int> labels) const;
  /// z = (z_in, g_c): concatenation along the feature axis, z_in first.
  static Tensor make_point_vector(const Tensor& z_in, const Tensor& g_c);
  /// Appends layer `layer` (1..num_branches) computed from the state.
  TreeState tree_gcn_layer(TreeState state, std::size_t layer) const;
  /// Expands the final branch layer by h_L into [batch, N, 6] points.
  Tensor leaf_layer(const TreeState& state) const;
  /// Runs the full pipeline for z_in [batch, z_dim] and one label per row.
  Tensor generate(const Tensor& z_in, std::span<const int> labels) const;

  /// Appends a factor-2 branch copied from the last one. Ancestor matrices
  /// whose input width changes are re-drawn from `rng`.
  void grow(const StageSchedule& schedule, Rng& rng);

 private:
  std::string layer_prefix(std::size_t layer) const;
  std::size_t ancestor_slots(std::size_t layer) const;
  void add_layer_parameters(std::size_t layer, Rng& rng);
  Tensor tree_layer(const TreeState& state, std::size_t layer, bool activate) const;

  GeneratorSpec spec_;
  std::size_t stage_ = 0;
  ParameterStore params_;
};

}  // namespace pcgan
