#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "pcgan/real.hpp"

namespace pcgan {

using Shape = std::vector<std::size_t>;
using Index = std::uint32_t;
using IndexList = std::shared_ptr<const std::vector<Index>>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

class GradFn;

/// N-dimensional value node of a dynamically recorded computation graph.
///
/// Tensors are immutable once they participate in a graph: every op returns a
/// fresh tensor and records how to differentiate it. Only leaves may be
/// written through `mutable_values()`, and only while no live graph holds
/// them (optimizer updates between training steps).
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<Real> values, bool requires_grad = false);

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor ones(const Shape& shape);
  static Tensor full(const Shape& shape, Real value);
  static Tensor scalar(Real value, bool requires_grad = false);

  bool defined() const noexcept { return static_cast<bool>(node_); }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const Real> values() const;
  std::span<Real> mutable_values();
  Real item() const;

  bool requires_grad() const;
  void set_requires_grad(bool requires_grad);
  bool is_leaf() const;
  const std::shared_ptr<GradFn>& grad_fn() const;

  /// Same values, cut from the graph.
  Tensor detach() const;

  const void* id() const noexcept { return node_.get(); }

  // Used by op implementations to attach a backward rule to a fresh result.
  void attach(std::shared_ptr<GradFn> fn);

 private:
  struct Node {
    Shape shape;
    std::vector<Real> values;
    bool requires_grad = false;
    std::shared_ptr<GradFn> grad_fn;
  };
  std::shared_ptr<Node> node_;
};

/// Backward rule of one recorded op. Rules are written in terms of the
/// differentiable ops below, so running them with recording enabled yields
/// gradients that can be differentiated again.
class GradFn {
 public:
  explicit GradFn(std::vector<Tensor> inputs) : inputs_(std::move(inputs)) {}
  virtual ~GradFn() = default;

  virtual const char* name() const = 0;
  /// One entry per input; undefined where the input does not require grad.
  virtual std::vector<Tensor> backward(const Tensor& grad_output) const = 0;

  const std::vector<Tensor>& inputs() const { return inputs_; }

 protected:
  std::vector<Tensor> inputs_;
};

bool grad_enabled();

/// Disables graph recording for its lifetime (thread-local).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// ---- ops -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real factor);
Tensor add_scalar(const Tensor& a, Real value);
Tensor neg(const Tensor& a);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor narrow(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
/// Inverse of `narrow`: places `a` at [start, start+len) of a zero tensor
/// whose `axis` extent is `full_extent`.
Tensor unnarrow(const Tensor& a, std::size_t axis, std::size_t start, std::size_t full_extent);

/// Selects rows (slices along axis 0) by index; indices may repeat.
Tensor gather_rows(const Tensor& a, IndexList rows);
Tensor gather_rows(const Tensor& a, std::vector<Index> rows);
/// Sums rows of `a` into a zero tensor with `num_rows` rows at `rows[i]`.
Tensor scatter_add_rows(const Tensor& a, IndexList rows, std::size_t num_rows);

inline constexpr Real kLeakySlope = Real(0.2);
/// x for x > 0, slope*x otherwise (the slope branch is taken at exactly 0).
Tensor leaky_relu(const Tensor& a, Real slope = kLeakySlope);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& a);
/// With `order_invariant`, each fiber is summed in sorted order so the result
/// does not depend on the order of elements along `axis`.
Tensor mean(const Tensor& a, std::size_t axis, bool keepdim = false, bool order_invariant = false);
/// Max along `axis`; ties resolve to the lowest index, which also receives the
/// whole gradient.
Tensor max(const Tensor& a, std::size_t axis, bool keepdim = false);
/// Euclidean norm along `axis`.
Tensor l2_norm(const Tensor& a, std::size_t axis, bool keepdim = false);

/// Picks one element per fiber along `axis` (axis removed from the result).
Tensor take_along_axis(const Tensor& a, IndexList index, std::size_t axis);
/// Inverse of `take_along_axis`: scatters into zeros with `extent` along `axis`.
Tensor put_along_axis(const Tensor& a, IndexList index, std::size_t axis, std::size_t extent);

Tensor broadcast_to(const Tensor& a, const Shape& shape);
/// Sums `a` down to `shape` (the inverse of broadcasting to a.shape()).
Tensor sum_to(const Tensor& a, const Shape& shape);

Tensor log_softmax(const Tensor& logits);  // along the last axis of a 2-D tensor
Tensor softmax(const Tensor& logits);

// ---- differentiation -----------------------------------------------------

/// Gradients of a scalar root with respect to the leaves that require grad.
class Gradients {
 public:
  bool contains(const Tensor& leaf) const { return map_.count(leaf.id()) != 0; }
  /// Undefined tensor when the leaf is unreachable from the root.
  Tensor get(const Tensor& leaf) const;
  /// Gradient, or zeros shaped like the leaf when unreachable.
  Tensor get_or_zeros(const Tensor& leaf) const;
  std::size_t size() const { return map_.size(); }
  bool empty() const { return map_.empty(); }

 private:
  friend Gradients backward(const Tensor& root, bool create_graph);
  std::unordered_map<const void*, Tensor> map_;
};

/// Reverse-mode sweep from a scalar root. With `create_graph` the returned
/// gradients are themselves graph nodes and can be differentiated again.
Gradients backward(const Tensor& root, bool create_graph = false);

/// Convenience wrapper: gradients for `wrt` in order (zeros if unreachable).
std::vector<Tensor> grad(const Tensor& root, const std::vector<Tensor>& wrt,
                         bool create_graph = false);

}  // namespace pcgan
