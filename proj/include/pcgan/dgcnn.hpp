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

/// k nearest neighbours of every row, stored row-major as `rows * k` global
/// row indices. The first neighbour of every row is the row itself.
struct KnnGraph {
  std::size_t rows = 0;
  std::size_t k = 0;
  std::vector<Index> neighbors;

  std::span<const Index> neighbors_of(std::size_t row) const {
    return {neighbors.data() + row * k, k};
  }
};

/// Exact kNN under Euclidean distance for `batch` independent clouds of `n`
/// rows each (features is [batch * n, d]). Self comes first; the remaining
/// k - 1 neighbours are ordered by (distance, index).
KnnGraph knn(const Tensor& features, std::size_t k, std::size_t batch = 1);

/// out[i, c] = max over the neighbours j of i of a[j, c]. The gradient goes
/// to the first neighbour attaining the maximum.
Tensor neighbor_max(const Tensor& a, const KnnGraph& graph);

/// EdgeConv with edge function theta(v_i, v_i - v_j) followed by
/// leaky_relu(0.2) and a channel-wise max over neighbours. `theta` is
/// [2 * d_in, d_out], the first d_in rows acting on v_i.
Tensor edge_conv(const Tensor& features, const KnnGraph& graph, const Tensor& theta, const Tensor& bias);

/// Stacked edge convolutions, each on a kNN graph rebuilt from the current
/// features. `x` is [batch, n, widths[0]]; returns [batch * n, widths.back()].
Tensor edge_conv_stack(const ParameterStore& params, const std::string& prefix,
                       const std::vector<std::size_t>& widths, const Tensor& x, std::size_t k);

struct CriticSpec {
  std::vector<std::size_t> feature_widths{6, 64, 128, 256, 512, 1024};
  std::size_t k_base = 20;
  std::size_t k_step = 10;
  std::size_t label_embed_dim = 64;  // d_c
  std::size_t label_hidden = 64;
  std::vector<std::size_t> critic_hidden{512, 256};  // two hidden layers, then the score
  std::size_t num_classes = 2;

  std::size_t k_for_stage(std::size_t stage) const { return k_base + k_step * stage; }
  void validate() const;
};

void to_json(nlohmann::json& j, const CriticSpec& spec);
void from_json(const nlohmann::json& j, CriticSpec& spec);

/// Conditional WGAN critic D = (feature transform, label transform, head).
class Critic {
 public:
  Critic(CriticSpec spec, std::uint64_t seed);

  const CriticSpec& spec() const { return spec_; }
  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }

  /// f_c for every cloud of x [batch, n, 6]: [batch, feature_widths.back()].
  Tensor feature_transform(const Tensor& x, std::size_t stage) const;
  /// d_c for every label: [batch, label_embed_dim].
  Tensor label_transform(std::span<const int> labels) const;
  /// One unbounded score per cloud: [batch].
  Tensor criticize(const Tensor& x, std::span<const int> labels, std::size_t stage) const;

 private:
  CriticSpec spec_;
  ParameterStore params_;
};

struct ClassifierSpec {
  std::vector<std::size_t> feature_widths{6, 64, 128, 256, 512};
  std::size_t k = 20;
  std::size_t head_hidden = 256;
  std::size_t num_classes = 2;

  void validate() const;
};

void to_json(nlohmann::json& j, const ClassifierSpec& spec);
void from_json(const nlohmann::json& j, ClassifierSpec& spec);

/// Edge-convolution classifier with average pooling; its pooled feature is
/// the embedding used by the FDD metric.
class Classifier {
 public:
  Classifier(ClassifierSpec spec, std::uint64_t seed);

  const ClassifierSpec& spec() const { return spec_; }
  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }

  /// Average-pooled backbone feature, [batch, feature_widths.back()].
  Tensor extract_512(const Tensor& x) const;
  Tensor logits(const Tensor& x) const;
  /// Class probabilities, [batch, num_classes].
  Tensor classify(const Tensor& x) const;

 private:
  ClassifierSpec spec_;
  ParameterStore params_;
};

/// Adds a dense layer "prefix.W{i}" [in, out] and "prefix.b{i}" [out].
void add_dense(ParameterStore& params, const std::string& prefix, std::size_t i, std::size_t in,
               std::size_t out, Rng& rng);
/// x W_i + b_i.
Tensor dense(const ParameterStore& params, const std::string& prefix, std::size_t i, const Tensor& x);
/// One-hot rows for `labels` over `num_classes` classes.
Tensor one_hot(std::span<const int> labels, std::size_t num_classes);

}  // namespace pcgan
