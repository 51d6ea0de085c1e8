#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pcgan/tensor.hpp"

namespace pcgan {

using Rng = std::mt19937_64;

struct Parameter {
  std::string name;  // dotted path, e.g. "G.branch3.W1"
  Tensor tensor;     // leaf with requires_grad
};

/// Named learnable leaves of one model, kept in insertion order.
class ParameterStore {
 public:
  const Tensor& add(std::string name, Tensor init);
  /// Swaps in a new leaf for an existing name (shape may change).
  const Tensor& replace(std::string_view name, Tensor value);
  void remove(std::string_view name);

  bool contains(std::string_view name) const;
  const Tensor& at(std::string_view name) const;

  const std::vector<Parameter>& items() const { return items_; }
  std::vector<Tensor> tensors() const;
  std::size_t size() const { return items_.size(); }
  std::size_t element_count() const;

  /// Freezing toggles requires_grad on every leaf.
  void set_requires_grad(bool requires_grad);

 private:
  std::vector<Parameter> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Glorot/Xavier uniform matrix of shape [fan_in, fan_out].
Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);

}  // namespace pcgan
