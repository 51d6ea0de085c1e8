#include "pcgan/parameters.hpp"

#include <cmath>

#include "pcgan/errors.hpp"

namespace pcgan {

const Tensor& ParameterStore::add(std::string name, Tensor init) {
  if (index_.count(name)) throw UsageError("parameter '" + name + "' already exists");
  Tensor leaf = init.detach();
  leaf.set_requires_grad(true);
  index_.emplace(name, items_.size());
  items_.push_back({std::move(name), std::move(leaf)});
  return items_.back().tensor;
}

const Tensor& ParameterStore::replace(std::string_view name, Tensor value) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw UsageError("unknown parameter '" + std::string(name) + "'");
  Tensor leaf = value.detach();
  leaf.set_requires_grad(true);
  items_[it->second].tensor = std::move(leaf);
  return items_[it->second].tensor;
}

void ParameterStore::remove(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw UsageError("unknown parameter '" + std::string(name) + "'");
  items_.erase(items_.begin() + static_cast<std::ptrdiff_t>(it->second));
  index_.clear();
  for (std::size_t i = 0; i < items_.size(); ++i) index_.emplace(items_[i].name, i);
}

bool ParameterStore::contains(std::string_view name) const {
  return index_.count(std::string(name)) != 0;
}

const Tensor& ParameterStore::at(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw UsageError("unknown parameter '" + std::string(name) + "'");
  return items_[it->second].tensor;
}

std::vector<Tensor> ParameterStore::tensors() const {
  std::vector<Tensor> out;
  out.reserve(items_.size());
  for (const auto& p : items_) out.push_back(p.tensor);
  return out;
}

std::size_t ParameterStore::element_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.tensor.numel();
  return n;
}

void ParameterStore::set_requires_grad(bool requires_grad) {
  for (auto& p : items_) p.tensor.set_requires_grad(requires_grad);
}

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<Real> values(fan_in * fan_out);
  for (Real& v : values) v = static_cast<Real>(dist(rng));
  return Tensor({fan_in, fan_out}, std::move(values));
}

}  // namespace pcgan
