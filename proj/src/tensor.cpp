#include "pcgan/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <unordered_set>

#include "pcgan/errors.hpp"

namespace pcgan {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

thread_local int no_grad_depth = 0;

[[noreturn]] void shape_fail(const char* kind, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(kind) + ": incompatible shapes " + shape_string(a) + " and " +
                   shape_string(b));
}

[[noreturn]] void shape_fail(const char* kind, const std::string& what) {
  throw ShapeError(std::string(kind) + ": " + what);
}

using BackwardRule =
    std::function<std::vector<Tensor>(const Tensor& grad, const std::vector<Tensor>& inputs)>;

class RuleGradFn final : public GradFn {
 public:
  RuleGradFn(const char* name, std::vector<Tensor> inputs, BackwardRule rule)
      : GradFn(std::move(inputs)), name_(name), rule_(std::move(rule)) {}
  const char* name() const override { return name_; }
  std::vector<Tensor> backward(const Tensor& grad_output) const override {
    return rule_(grad_output, inputs_);
  }

 private:
  const char* name_;
  BackwardRule rule_;
};

Tensor record(Tensor out, const char* name, std::vector<Tensor> inputs, BackwardRule rule) {
  if (!grad_enabled()) return out;
  bool any = std::any_of(inputs.begin(), inputs.end(),
                         [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return out;
  out.attach(std::make_shared<RuleGradFn>(name, std::move(inputs), std::move(rule)));
  return out;
}

// Splits `shape` around `axis` into (outer, extent, inner).
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* kind) {
  if (axis >= shape.size())
    shape_fail(kind, "axis " + std::to_string(axis) + " out of range for " + shape_string(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis, bool keepdim) {
  Shape out = shape;
  if (keepdim)
    out[axis] = 1;
  else
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  return out;
}

Shape broadcast_shapes(const Shape& a, const Shape& b, const char* kind) {
  std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) shape_fail(kind, a, b);
    out[i] = da == 1 ? db : da;
  }
  return out;
}

// Strides of `in` laid over `out` (0 on broadcast dimensions).
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::size_t rank = out.size();
  std::vector<std::size_t> strides(rank, 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    std::size_t i = in.size() - 1 - k;
    std::size_t o = rank - 1 - k;
    strides[o] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

bool broadcastable_to(const Shape& in, const Shape& out) {
  if (in.size() > out.size()) return false;
  for (std::size_t k = 0; k < in.size(); ++k) {
    std::size_t i = in[in.size() - 1 - k];
    std::size_t o = out[out.size() - 1 - k];
    if (i != o && i != 1) return false;
  }
  return true;
}

// Calls f(out_flat, a_flat, b_flat) for every element of `out`.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  std::size_t total = shape_numel(out);
  if (total == 0) return;
  std::size_t rank = out.size();
  if (rank == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  const std::size_t last = out[rank - 1], la = sa[rank - 1], lb = sb[rank - 1];
  for (std::size_t o = 0; o < total; o += last) {
    for (std::size_t j = 0; j < last; ++j) f(o + j, ia + j * la, ib + j * lb);
    for (std::ptrdiff_t d = static_cast<std::ptrdiff_t>(rank) - 2; d >= 0; --d) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

// True when `in`, minus leading unit dimensions, equals the trailing dims of `out`.
bool matches_trailing(const Shape& in, const Shape& out) {
  std::size_t lead = 0;
  while (lead < in.size() && in[lead] == 1) ++lead;
  const std::size_t rest = in.size() - lead;
  if (rest == 0 || rest > out.size()) return false;
  return std::equal(in.begin() + static_cast<std::ptrdiff_t>(lead), in.end(),
                    out.end() - static_cast<std::ptrdiff_t>(rest));
}

template <class F>
Tensor binary_kernel(const Tensor& a, const Tensor& b, const char* kind, F f) {
  auto av = a.values();
  auto bv = b.values();
  if (a.shape() == b.shape()) {
    std::vector<Real> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
    return Tensor(a.shape(), std::move(out));
  }
  Shape shape = broadcast_shapes(a.shape(), b.shape(), kind);
  std::vector<Real> out(shape_numel(shape));
  if (shape == a.shape() && bv.size() == 1) {
    const Real s = bv[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], s);
  } else if (shape == b.shape() && av.size() == 1) {
    const Real s = av[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(s, bv[i]);
  } else if (shape == a.shape() && matches_trailing(b.shape(), shape)) {
    // b matches the trailing dimensions of a: repeat it row by row.
    const std::size_t period = bv.size();
    for (std::size_t o = 0; o < out.size(); o += period)
      for (std::size_t j = 0; j < period; ++j) out[o + j] = f(av[o + j], bv[j]);
  } else {
    auto sa = broadcast_strides(a.shape(), shape);
    auto sb = broadcast_strides(b.shape(), shape);
    for_each_broadcast(shape, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      out[o] = f(av[ia], bv[ib]);
    });
  }
  return Tensor(std::move(shape), std::move(out));
}

template <class F>
Tensor unary_kernel(const Tensor& a, F f) {
  auto av = a.values();
  std::vector<Real> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return Tensor(a.shape(), std::move(out));
}

Tensor maybe(const Tensor& input, const std::function<Tensor()>& make) {
  return input.requires_grad() ? make() : Tensor();
}

void check_index_list(const IndexList& idx, const char* kind) {
  if (!idx) shape_fail(kind, "null index list");
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<Real> values, bool requires_grad)
    : node_(std::make_shared<Node>()) {
  if (shape_numel(shape) != values.size())
    throw ShapeError("tensor: shape " + shape_string(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  node_->shape = std::move(shape);
  node_->values = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return Tensor(shape, std::vector<Real>(shape_numel(shape), Real(0)), requires_grad);
}

Tensor Tensor::ones(const Shape& shape) { return full(shape, Real(1)); }

Tensor Tensor::full(const Shape& shape, Real value) {
  return Tensor(shape, std::vector<Real>(shape_numel(shape), value));
}

Tensor Tensor::scalar(Real value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<Real>{value}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!node_) throw ShapeError("tensor: use of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::size(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size())
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " +
                     shape_string(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const Real> Tensor::values() const {
  if (!node_) throw ShapeError("tensor: use of undefined tensor");
  return node_->values;
}

std::span<Real> Tensor::mutable_values() {
  if (!node_) throw ShapeError("tensor: use of undefined tensor");
  if (node_->grad_fn) throw ShapeError("tensor: only leaf tensors may be written in place");
  return node_->values;
}

Real Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_string(shape()) + " is not a scalar");
  return node_->values[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool requires_grad) {
  if (!node_) throw ShapeError("tensor: use of undefined tensor");
  if (node_->grad_fn) throw ShapeError("tensor: requires_grad can only be set on leaves");
  node_->requires_grad = requires_grad;
}

bool Tensor::is_leaf() const { return !node_ || !node_->grad_fn; }

const std::shared_ptr<GradFn>& Tensor::grad_fn() const {
  static const std::shared_ptr<GradFn> none;
  return node_ ? node_->grad_fn : none;
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->values, false); }

void Tensor::attach(std::shared_ptr<GradFn> fn) {
  node_->grad_fn = std::move(fn);
  node_->requires_grad = true;
}

bool grad_enabled() { return no_grad_depth == 0; }
NoGradGuard::NoGradGuard() { ++no_grad_depth; }
NoGradGuard::~NoGradGuard() { --no_grad_depth; }

// ---- linear algebra ----------------------------------------------------------

namespace {

// C = A(m×k) · B(k×n). Each output row is accumulated in the same order
// regardless of its position, so permuting rows of A permutes rows of C
// bit-exactly.
std::vector<Real> matmul_kernel(std::span<const Real> a, std::span<const Real> b, std::size_t m,
                                std::size_t k, std::size_t n) {
  std::vector<Real> c(m * n, Real(0));
  for (std::size_t i = 0; i < m; ++i) {
    Real* crow = c.data() + i * n;
    const Real* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = arow[p];
      const Real* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() == 2 && b.rank() == 1) {
    if (a.size(1) != b.size(0)) shape_fail("matmul", a.shape(), b.shape());
    return reshape(matmul(a, reshape(b, {b.size(0), 1})), {a.size(0)});
  }
  if (a.rank() == 1 && b.rank() == 2) {
    if (a.size(0) != b.size(0)) shape_fail("matmul", a.shape(), b.shape());
    return reshape(matmul(reshape(a, {1, a.size(0)}), b), {b.size(1)});
  }
  if (a.rank() != 2 || b.rank() != 2 || a.size(1) != b.size(0))
    shape_fail("matmul", a.shape(), b.shape());
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  Tensor out({m, n}, matmul_kernel(a.values(), b.values(), m, k, n));
  return record(std::move(out), "matmul", {a, b}, [](const Tensor& g, const std::vector<Tensor>& in) {
    return std::vector<Tensor>{maybe(in[0], [&] { return matmul(g, transpose(in[1])); }),
                               maybe(in[1], [&] { return matmul(transpose(in[0]), g); })};
  });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) shape_fail("transpose", "expected a 2-D tensor, got " + shape_string(a.shape()));
  const std::size_t m = a.size(0), n = a.size(1);
  auto av = a.values();
  std::vector<Real> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return record(Tensor({n, m}, std::move(out)), "transpose", {a},
                [](const Tensor& g, const std::vector<Tensor>&) {
                  return std::vector<Tensor>{transpose(g)};
                });
}

// ---- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor out = binary_kernel(a, b, "add", [](Real x, Real y) { return x + y; });
  return record(std::move(out), "add", {a, b}, [](const Tensor& g, const std::vector<Tensor>& in) {
    return std::vector<Tensor>{maybe(in[0], [&] { return sum_to(g, in[0].shape()); }),
                               maybe(in[1], [&] { return sum_to(g, in[1].shape()); })};
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Tensor out = binary_kernel(a, b, "sub", [](Real x, Real y) { return x - y; });
  return record(std::move(out), "sub", {a, b}, [](const Tensor& g, const std::vector<Tensor>& in) {
    return std::vector<Tensor>{maybe(in[0], [&] { return sum_to(g, in[0].shape()); }),
                               maybe(in[1], [&] { return neg(sum_to(g, in[1].shape())); })};
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Tensor out = binary_kernel(a, b, "mul", [](Real x, Real y) { return x * y; });
  return record(std::move(out), "mul", {a, b}, [](const Tensor& g, const std::vector<Tensor>& in) {
    return std::vector<Tensor>{maybe(in[0], [&] { return sum_to(mul(g, in[1]), in[0].shape()); }),
                               maybe(in[1], [&] { return sum_to(mul(g, in[0]), in[1].shape()); })};
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  Tensor out = binary_kernel(a, b, "div", [](Real x, Real y) { return x / y; });
  return record(std::move(out), "div", {a, b}, [](const Tensor& g, const std::vector<Tensor>& in) {
    return std::vector<Tensor>{
        maybe(in[0], [&] { return sum_to(div(g, in[1]), in[0].shape()); }),
        maybe(in[1], [&] {
          return sum_to(neg(div(mul(g, in[0]), square(in[1]))), in[1].shape());
        })};
  });
}

Tensor scale(const Tensor& a, Real factor) {
  Tensor out = unary_kernel(a, [factor](Real x) { return x * factor; });
  return record(std::move(out), "scale", {a}, [factor](const Tensor& g, const std::vector<Tensor>&) {
    return std::vector<Tensor>{scale(g, factor)};
  });
}

Tensor add_scalar(const Tensor& a, Real value) {
  Tensor out = unary_kernel(a, [value](Real x) { return x + value; });
  return record(std::move(out), "add_scalar", {a}, [](const Tensor& g, const std::vector<Tensor>&) {
    return std::vector<Tensor>{g};
  });
}

Tensor neg(const Tensor& a) { return scale(a, Real(-1)); }

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator-(const Tensor& a) { return neg(a); }

Tensor leaky_relu(const Tensor& a, Real slope) {
  Tensor out = unary_kernel(a, [slope](Real x) { return x > 0 ? x : slope * x; });
  return record(std::move(out), "leaky_relu", {a},
                [slope](const Tensor& g, const std::vector<Tensor>& in) {
                  Tensor mask = unary_kernel(in[0], [slope](Real x) { return x > 0 ? Real(1) : slope; });
                  return std::vector<Tensor>{mul(g, mask)};
                });
}

Tensor tanh(const Tensor& a) {
  Tensor out = unary_kernel(a, [](Real x) { return std::tanh(x); });
  return record(std::move(out), "tanh", {a}, [](const Tensor& g, const std::vector<Tensor>& in) {
    return std::vector<Tensor>{mul(g, add_scalar(neg(square(tanh(in[0]))), Real(1)))};
  });
}

Tensor exp(const Tensor& a) {
  Tensor out = unary_kernel(a, [](Real x) { return std::exp(x); });
  return record(std::move(out), "exp", {a}, [](const Tensor& g, const std::vector<Tensor>& in) {
    return std::vector<Tensor>{mul(g, exp(in[0]))};
  });
}

Tensor log(const Tensor& a) {
  Tensor out = unary_kernel(a, [](Real x) { return std::log(x); });
  return record(std::move(out), "log", {a}, [](const Tensor& g, const std::vector<Tensor>& in) {
    return std::vector<Tensor>{div(g, in[0])};
  });
}

Tensor sqrt(const Tensor& a) {
  Tensor out = unary_kernel(a, [](Real x) { return std::sqrt(x); });
  return record(std::move(out), "sqrt", {a}, [](const Tensor& g, const std::vector<Tensor>& in) {
    return std::vector<Tensor>{div(g, scale(sqrt(in[0]), Real(2)))};
  });
}

Tensor square(const Tensor& a) {
  Tensor out = unary_kernel(a, [](Real x) { return x * x; });
  return record(std::move(out), "square", {a}, [](const Tensor& g, const std::vector<Tensor>& in) {
    return std::vector<Tensor>{mul(g, scale(in[0], Real(2)))};
  });
}

// ---- shape ops -----------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) shape_fail("reshape", a.shape(), shape);
  std::vector<Real> values(a.values().begin(), a.values().end());
  return record(Tensor(std::move(shape), std::move(values)), "reshape", {a},
                [](const Tensor& g, const std::vector<Tensor>& in) {
                  return std::vector<Tensor>{reshape(g, in[0].shape())};
                });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) shape_fail("concat", "no inputs");
  const Shape& first = parts[0].shape();
  split_axis(first, axis, "concat");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) shape_fail("concat", first, s);
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != first[d]) shape_fail("concat", first, s);
    out_shape[axis] += s[axis];
  }
  AxisSplit outer_split = split_axis(out_shape, axis, "concat");
  std::vector<Real> out(shape_numel(out_shape));
  const std::size_t out_row = outer_split.extent * outer_split.inner;
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const Tensor& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.size(axis) * outer_split.inner;
    auto pv = p.values();
    for (std::size_t o = 0; o < outer_split.outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  out.begin() + static_cast<std::ptrdiff_t>(o * out_row + offset * outer_split.inner));
    offset += p.size(axis);
  }
  return record(Tensor(std::move(out_shape), std::move(out)), "concat", parts,
                [axis, offsets](const Tensor& g, const std::vector<Tensor>& in) {
                  std::vector<Tensor> grads;
                  for (std::size_t i = 0; i < in.size(); ++i)
                    grads.push_back(
                        maybe(in[i], [&] { return narrow(g, axis, offsets[i], in[i].size(axis)); }));
                  return grads;
                });
}

Tensor narrow(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  AxisSplit s = split_axis(a.shape(), axis, "narrow");
  if (start + length > s.extent)
    shape_fail("narrow", "range [" + std::to_string(start) + "," + std::to_string(start + length) +
                             ") exceeds extent of " + shape_string(a.shape()));
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  std::vector<Real> out(shape_numel(out_shape));
  auto av = a.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>((o * s.extent + start) * s.inner),
                length * s.inner, out.begin() + static_cast<std::ptrdiff_t>(o * length * s.inner));
  return record(Tensor(std::move(out_shape), std::move(out)), "narrow", {a},
                [axis, start](const Tensor& g, const std::vector<Tensor>& in) {
                  return std::vector<Tensor>{unnarrow(g, axis, start, in[0].size(axis))};
                });
}

Tensor unnarrow(const Tensor& a, std::size_t axis, std::size_t start, std::size_t full_extent) {
  AxisSplit s = split_axis(a.shape(), axis, "unnarrow");
  if (start + s.extent > full_extent)
    shape_fail("unnarrow", "slice of " + shape_string(a.shape()) + " at " + std::to_string(start) +
                               " exceeds extent " + std::to_string(full_extent));
  Shape out_shape = a.shape();
  out_shape[axis] = full_extent;
  std::vector<Real> out(shape_numel(out_shape), Real(0));
  auto av = a.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(o * s.extent * s.inner), s.extent * s.inner,
                out.begin() + static_cast<std::ptrdiff_t>((o * full_extent + start) * s.inner));
  return record(Tensor(std::move(out_shape), std::move(out)), "unnarrow", {a},
                [axis, start](const Tensor& g, const std::vector<Tensor>& in) {
                  return std::vector<Tensor>{narrow(g, axis, start, in[0].size(axis))};
                });
}

Tensor gather_rows(const Tensor& a, std::vector<Index> rows) {
  return gather_rows(a, std::make_shared<const std::vector<Index>>(std::move(rows)));
}

Tensor gather_rows(const Tensor& a, IndexList rows) {
  check_index_list(rows, "gather_rows");
  if (a.rank() == 0) shape_fail("gather_rows", "cannot gather from a scalar");
  const std::size_t n = a.size(0);
  const std::size_t row = n ? a.numel() / n : 0;
  Shape out_shape = a.shape();
  out_shape[0] = rows->size();
  std::vector<Real> out(shape_numel(out_shape));
  auto av = a.values();
  for (std::size_t r = 0; r < rows->size(); ++r) {
    const Index src = (*rows)[r];
    if (src >= n)
      shape_fail("gather_rows", "row index " + std::to_string(src) + " out of range for " +
                                    shape_string(a.shape()));
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(src * row), row,
                out.begin() + static_cast<std::ptrdiff_t>(r * row));
  }
  return record(Tensor(std::move(out_shape), std::move(out)), "gather_rows", {a},
                [rows](const Tensor& g, const std::vector<Tensor>& in) {
                  return std::vector<Tensor>{scatter_add_rows(g, rows, in[0].size(0))};
                });
}

Tensor scatter_add_rows(const Tensor& a, IndexList rows, std::size_t num_rows) {
  check_index_list(rows, "scatter_add_rows");
  if (a.rank() == 0 || a.size(0) != rows->size())
    shape_fail("scatter_add_rows", "need one index per row of " + shape_string(a.shape()));
  const std::size_t row = rows->empty() ? 0 : a.numel() / rows->size();
  Shape out_shape = a.shape();
  out_shape[0] = num_rows;
  std::vector<Real> out(shape_numel(out_shape), Real(0));
  auto av = a.values();
  for (std::size_t r = 0; r < rows->size(); ++r) {
    const Index dst = (*rows)[r];
    if (dst >= num_rows)
      shape_fail("scatter_add_rows", "row index " + std::to_string(dst) + " out of range");
    Real* o = out.data() + dst * row;
    const Real* s = av.data() + r * row;
    for (std::size_t j = 0; j < row; ++j) o[j] += s[j];
  }
  return record(Tensor(std::move(out_shape), std::move(out)), "scatter_add_rows", {a},
                [rows](const Tensor& g, const std::vector<Tensor>&) {
                  return std::vector<Tensor>{gather_rows(g, rows)};
                });
}

// ---- reductions -------------------------------------------------------------------

Tensor sum(const Tensor& a) {
  auto av = a.values();
  Real total = 0;
  for (Real v : av) total += v;
  return record(Tensor::scalar(total), "sum", {a}, [](const Tensor& g, const std::vector<Tensor>& in) {
    return std::vector<Tensor>{broadcast_to(g, in[0].shape())};
  });
}

Tensor sum(const Tensor& a, std::size_t axis, bool keepdim) {
  AxisSplit s = split_axis(a.shape(), axis, "sum");
  std::vector<Real> out(s.outer * s.inner, Real(0));
  auto av = a.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < s.extent; ++e) {
      const Real* src = av.data() + (o * s.extent + e) * s.inner;
      Real* dst = out.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  return record(Tensor(drop_axis(a.shape(), axis, keepdim), std::move(out)), "sum_axis", {a},
                [axis](const Tensor& g, const std::vector<Tensor>& in) {
                  Tensor kept = reshape(g, drop_axis(in[0].shape(), axis, true));
                  return std::vector<Tensor>{broadcast_to(kept, in[0].shape())};
                });
}

Tensor mean(const Tensor& a) { return scale(sum(a), Real(1) / static_cast<Real>(a.numel())); }

Tensor mean(const Tensor& a, std::size_t axis, bool keepdim, bool order_invariant) {
  AxisSplit s = split_axis(a.shape(), axis, "mean");
  if (!order_invariant) return scale(sum(a, axis, keepdim), Real(1) / static_cast<Real>(s.extent));
  std::vector<Real> out(s.outer * s.inner);
  std::vector<Real> fiber(s.extent);
  auto av = a.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      for (std::size_t e = 0; e < s.extent; ++e) fiber[e] = av[(o * s.extent + e) * s.inner + i];
      std::sort(fiber.begin(), fiber.end());
      Real total = 0;
      for (Real v : fiber) total += v;
      out[o * s.inner + i] = total / static_cast<Real>(s.extent);
    }
  const Real inv = Real(1) / static_cast<Real>(s.extent);
  return record(Tensor(drop_axis(a.shape(), axis, keepdim), std::move(out)), "mean_sorted", {a},
                [axis, inv](const Tensor& g, const std::vector<Tensor>& in) {
                  Tensor kept = reshape(g, drop_axis(in[0].shape(), axis, true));
                  return std::vector<Tensor>{scale(broadcast_to(kept, in[0].shape()), inv)};
                });
}

Tensor max(const Tensor& a, std::size_t axis, bool keepdim) {
  AxisSplit s = split_axis(a.shape(), axis, "max");
  if (s.extent == 0) shape_fail("max", "empty reduction axis in " + shape_string(a.shape()));
  std::vector<Real> out(s.outer * s.inner);
  auto arg = std::make_shared<std::vector<Index>>(s.outer * s.inner);
  auto av = a.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = 0;
      Real best_v = av[o * s.extent * s.inner + i];
      for (std::size_t e = 1; e < s.extent; ++e) {
        const Real v = av[(o * s.extent + e) * s.inner + i];
        if (v > best_v) {
          best_v = v;
          best = e;
        }
      }
      out[o * s.inner + i] = best_v;
      (*arg)[o * s.inner + i] = static_cast<Index>(best);
    }
  IndexList index = arg;
  return record(Tensor(drop_axis(a.shape(), axis, keepdim), std::move(out)), "max", {a},
                [axis, index](const Tensor& g, const std::vector<Tensor>& in) {
                  Tensor flat = reshape(g, drop_axis(in[0].shape(), axis, false));
                  return std::vector<Tensor>{put_along_axis(flat, index, axis, in[0].size(axis))};
                });
}

Tensor l2_norm(const Tensor& a, std::size_t axis, bool keepdim) {
  return sqrt(sum(square(a), axis, keepdim));
}

Tensor take_along_axis(const Tensor& a, IndexList index, std::size_t axis) {
  check_index_list(index, "take_along_axis");
  AxisSplit s = split_axis(a.shape(), axis, "take_along_axis");
  if (index->size() != s.outer * s.inner)
    shape_fail("take_along_axis", "index count " + std::to_string(index->size()) +
                                      " does not match " + shape_string(a.shape()));
  std::vector<Real> out(s.outer * s.inner);
  auto av = a.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const Index e = (*index)[o * s.inner + i];
      if (e >= s.extent) shape_fail("take_along_axis", "index out of range");
      out[o * s.inner + i] = av[(o * s.extent + e) * s.inner + i];
    }
  return record(Tensor(drop_axis(a.shape(), axis, false), std::move(out)), "take_along_axis", {a},
                [index, axis](const Tensor& g, const std::vector<Tensor>& in) {
                  return std::vector<Tensor>{put_along_axis(g, index, axis, in[0].size(axis))};
                });
}

Tensor put_along_axis(const Tensor& a, IndexList index, std::size_t axis, std::size_t extent) {
  check_index_list(index, "put_along_axis");
  Shape out_shape = a.shape();
  if (axis > out_shape.size()) shape_fail("put_along_axis", "axis out of range");
  out_shape.insert(out_shape.begin() + static_cast<std::ptrdiff_t>(axis), extent);
  AxisSplit s = split_axis(out_shape, axis, "put_along_axis");
  if (index->size() != s.outer * s.inner)
    shape_fail("put_along_axis", "index count does not match " + shape_string(a.shape()));
  std::vector<Real> out(shape_numel(out_shape), Real(0));
  auto av = a.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const Index e = (*index)[o * s.inner + i];
      if (e >= extent) shape_fail("put_along_axis", "index out of range");
      out[(o * extent + e) * s.inner + i] += av[o * s.inner + i];
    }
  return record(Tensor(std::move(out_shape), std::move(out)), "put_along_axis", {a},
                [index, axis](const Tensor& g, const std::vector<Tensor>&) {
                  return std::vector<Tensor>{take_along_axis(g, index, axis)};
                });
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  if (!broadcastable_to(a.shape(), shape)) shape_fail("broadcast_to", a.shape(), shape);
  std::vector<Real> out(shape_numel(shape));
  auto av = a.values();
  if (av.size() == 1) {
    std::fill(out.begin(), out.end(), av[0]);
  } else {
    auto sa = broadcast_strides(a.shape(), shape);
    std::vector<std::size_t> zero(shape.size(), 0);
    for_each_broadcast(shape, sa, zero,
                       [&](std::size_t o, std::size_t ia, std::size_t) { out[o] = av[ia]; });
  }
  return record(Tensor(shape, std::move(out)), "broadcast_to", {a},
                [](const Tensor& g, const std::vector<Tensor>& in) {
                  return std::vector<Tensor>{sum_to(g, in[0].shape())};
                });
}

Tensor sum_to(const Tensor& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  if (!broadcastable_to(shape, a.shape())) shape_fail("sum_to", a.shape(), shape);
  std::vector<Real> out(shape_numel(shape), Real(0));
  auto av = a.values();
  auto st = broadcast_strides(shape, a.shape());
  std::vector<std::size_t> unit(a.rank(), 0);
  // Walk `a` linearly; the second index is the destination in the reduced tensor.
  for_each_broadcast(a.shape(), st, unit,
                     [&](std::size_t o, std::size_t it, std::size_t) { out[it] += av[o]; });
  return record(Tensor(shape, std::move(out)), "sum_to", {a},
                [](const Tensor& g, const std::vector<Tensor>& in) {
                  return std::vector<Tensor>{broadcast_to(g, in[0].shape())};
                });
}

Tensor log_softmax(const Tensor& logits) {
  if (logits.rank() != 2) shape_fail("log_softmax", "expected [batch, classes], got " + shape_string(logits.shape()));
  Tensor row_max;
  {
    NoGradGuard guard;
    row_max = max(logits, 1, true).detach();
  }
  Tensor shifted = sub(logits, row_max);
  return sub(shifted, log(sum(exp(shifted), 1, true)));
}

Tensor softmax(const Tensor& logits) { return exp(log_softmax(logits)); }

// ---- backward ------------------------------------------------------------------------

Tensor Gradients::get(const Tensor& leaf) const {
  auto it = map_.find(leaf.id());
  return it == map_.end() ? Tensor() : it->second;
}

Tensor Gradients::get_or_zeros(const Tensor& leaf) const {
  Tensor g = get(leaf);
  return g.defined() ? g : Tensor::zeros(leaf.shape());
}

Gradients backward(const Tensor& root, bool create_graph) {
  if (root.numel() != 1)
    throw ShapeError("backward: root must be a scalar, got shape " + shape_string(root.shape()));
  Gradients result;
  if (!root.requires_grad()) return result;

  // Post-order DFS restricted to nodes that require grad.
  std::vector<Tensor> order;
  std::unordered_set<const void*> visited{root.id()};
  struct Frame {
    Tensor tensor;
    std::size_t next = 0;
  };
  std::vector<Frame> stack{{root, 0}};
  while (!stack.empty()) {
    const std::shared_ptr<GradFn>& fn = stack.back().tensor.grad_fn();
    if (fn && stack.back().next < fn->inputs().size()) {
      Tensor input = fn->inputs()[stack.back().next++];
      if (input.requires_grad() && visited.insert(input.id()).second) stack.push_back({input, 0});
    } else {
      order.push_back(stack.back().tensor);
      stack.pop_back();
    }
  }

  std::optional<NoGradGuard> guard;
  if (!create_graph) guard.emplace();

  std::unordered_map<const void*, Tensor> pending;
  pending[root.id()] = Tensor::ones(root.shape());
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto found = pending.find(it->id());
    if (found == pending.end()) continue;
    Tensor g = std::move(found->second);
    pending.erase(found);
    if (it->is_leaf()) {
      result.map_[it->id()] = create_graph ? g : g.detach();
      continue;
    }
    const GradFn& fn = *it->grad_fn();
    std::vector<Tensor> input_grads = fn.backward(g);
    for (std::size_t i = 0; i < input_grads.size(); ++i) {
      const Tensor& input = fn.inputs()[i];
      if (!input.requires_grad() || !input_grads[i].defined()) continue;
      if (input_grads[i].shape() != input.shape())
        throw ShapeError(std::string("backward: rule for ") + fn.name() + " produced gradient " +
                         shape_string(input_grads[i].shape()) + " for input " +
                         shape_string(input.shape()));
      auto slot = pending.find(input.id());
      if (slot == pending.end())
        pending.emplace(input.id(), input_grads[i]);
      else
        slot->second = add(slot->second, input_grads[i]);
    }
  }
  return result;
}

std::vector<Tensor> grad(const Tensor& root, const std::vector<Tensor>& wrt, bool create_graph) {
  Gradients g = backward(root, create_graph);
  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const Tensor& t : wrt) out.push_back(g.get_or_zeros(t));
  return out;
}

}  // namespace pcgan
