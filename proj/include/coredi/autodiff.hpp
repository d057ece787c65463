#pragma once

// Define-by-run reverse-mode differentiation over dense row-major float64
// arrays. Every op returns a fresh immutable Tensor; when any input requires a
// gradient the result records its parents and a backward closure. A tape is
// simply the graph reachable from the loss, rebuilt every training step.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "coredi/errors.hpp"

namespace coredi {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;
using GradSlots = std::vector<std::vector<double>*>;
using BackwardFn = std::function<void(const Node& self, std::span<const double> grad, GradSlots& parents)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<NodePtr> parents;
  BackwardFn backward;
};

inline std::uint64_t next_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on this thread for its lifetime (sampling, eval).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> data) {
    return make(std::move(shape), std::move(data), false);
  }
  static Tensor parameter(Shape shape, std::vector<double> data) {
    return make(std::move(shape), std::move(data), true);
  }
  static Tensor zeros(Shape shape) {
    const std::size_t n = numel(shape);
    return constant(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor full(Shape shape, double v) {
    const std::size_t n = numel(shape);
    return constant(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v) { return constant({}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->value.size(); }
  std::span<const double> data() const { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }
  bool requires_grad() const { return node_->requires_grad; }
  std::uint64_t id() const { return node_->id; }
  bool is_leaf() const { return node_->parents.empty(); }

  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }
  double operator[](std::size_t i) const { return node_->value[i]; }

  // Internal: builds an op result. Constant parents stay in the record (the
  // backward closures read their values) but traversal never enters them.
  static Tensor from_op(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                        detail::BackwardFn backward) {
    if (numel(shape) != value.size()) {
      throw DimensionError("op produced " + std::to_string(value.size()) + " values for shape " +
                           to_string(shape));
    }
    Tensor out = make(std::move(shape), std::move(value), false);
    if (!detail::grad_enabled_flag()) return out;
    bool any = false;
    for (const Tensor& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    for (Tensor& in : inputs) out.node_->parents.push_back(in.node_);
    out.node_->backward = std::move(backward);
    return out;
  }

  const detail::Node& node() const { return *node_; }
  const detail::NodePtr& node_ptr() const { return node_; }

 private:
  static Tensor make(Shape shape, std::vector<double> data, bool requires_grad) {
    if (numel(shape) != data.size()) {
      throw DimensionError("shape " + to_string(shape) + " needs " + std::to_string(numel(shape)) +
                           " values, got " + std::to_string(data.size()));
    }
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    t.node_->id = detail::next_id();
    return t;
  }

  detail::NodePtr node_;
};

/// Gradients of a scalar loss with respect to every requires_grad leaf that
/// the loss depends on. Leaves the loss does not reach report zeros.
class Gradients {
 public:
  std::vector<double> of(const Tensor& leaf) const {
    auto it = grads_.find(leaf.id());
    if (it == grads_.end()) return std::vector<double>(leaf.size(), 0.0);
    return it->second;
  }
  bool reached(const Tensor& leaf) const { return grads_.count(leaf.id()) != 0; }
  std::size_t size() const { return grads_.size(); }

  void set(std::uint64_t id, std::vector<double> g) { grads_[id] = std::move(g); }

 private:
  std::unordered_map<std::uint64_t, std::vector<double>> grads_;
};

inline Gradients backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  Gradients result;
  if (!loss.requires_grad()) return result;

  // Iterative post-order DFS; `order` ends up topologically sorted.
  std::vector<const detail::Node*> order;
  std::unordered_map<const detail::Node*, std::size_t> slot;
  std::vector<std::pair<const detail::Node*, std::size_t>> stack{{&loss.node(), 0}};
  slot.emplace(&loss.node(), SIZE_MAX);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      const detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && slot.emplace(parent, SIZE_MAX).second) stack.emplace_back(parent, 0);
      continue;
    }
    slot[node] = order.size();
    order.push_back(node);
    stack.pop_back();
  }

  std::vector<std::vector<double>> grads(order.size());
  grads.back().assign(1, 1.0);
  detail::GradSlots parent_slots;
  for (std::size_t i = order.size(); i-- > 0;) {
    const detail::Node* node = order[i];
    if (grads[i].empty()) continue;
    if (node->parents.empty()) {
      result.set(node->id, std::move(grads[i]));
      continue;
    }
    parent_slots.assign(node->parents.size(), nullptr);
    for (std::size_t p = 0; p < node->parents.size(); ++p) {
      const detail::Node* parent = node->parents[p].get();
      if (!parent->requires_grad) continue;
      auto& g = grads[slot.at(parent)];
      if (g.empty()) g.assign(parent->value.size(), 0.0);
      parent_slots[p] = &g;
    }
    node->backward(*node, grads[i], parent_slots);
    grads[i].clear();
    grads[i].shrink_to_fit();
  }
  return result;
}

// ---------------------------------------------------------------------------
// Broadcasting helpers

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` viewed with shape `out` (0 on broadcast axes).
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    const std::size_t o = i + (out.size() - in.size());
    strides[o] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

// Calls f(out_index, a_index, b_index) for every element of `out`.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t n = numel(out);
  if (out.empty()) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t r = out.size();
  const std::size_t inner = out[r - 1];
  const std::size_t ia = sa[r - 1], ib = sb[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t o = 0; o < n; o += inner) {
    for (std::size_t k = 0; k < inner; ++k) f(o + k, oa + k * ia, ob + k * ib);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * idx[d];
      ob -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
}

template <typename Fwd, typename DA, typename DB>
Tensor binary(const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  const Shape out = broadcast_shape(a.shape(), b.shape());
  const auto sa = broadcast_strides(a.shape(), out);
  const auto sb = broadcast_strides(b.shape(), out);
  std::vector<double> value(numel(out));
  const auto& av = a.values();
  const auto& bv = b.values();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < value.size(); ++i) value[i] = fwd(av[i], bv[i]);
  } else {
    for_each_broadcast(out, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
      value[o] = fwd(av[i], bv[j]);
    });
  }
  return Tensor::from_op(out, std::move(value), {a, b},
                         [sa, sb, da, db](const Node& self, std::span<const double> g, GradSlots& pg) {
                           const auto& x = self.parents[0]->value;
                           const auto& y = self.parents[1]->value;
                           for_each_broadcast(self.shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
                             if (pg[0]) (*pg[0])[i] += g[o] * da(x[i], y[j]);
                             if (pg[1]) (*pg[1])[j] += g[o] * db(x[i], y[j]);
                           });
                         });
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  std::vector<double> value(a.size());
  const auto& av = a.values();
  for (std::size_t i = 0; i < value.size(); ++i) value[i] = fwd(av[i]);
  return Tensor::from_op(a.shape(), std::move(value), {a},
                         [deriv](const Node& self, std::span<const double> g, GradSlots& pg) {
                           const auto& x = self.parents[0]->value;
                           auto& out = *pg[0];
                           for (std::size_t i = 0; i < g.size(); ++i) out[i] += g[i] * deriv(x[i], self.value[i]);
                         });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops (numpy broadcasting)

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
                        [](double, double) { return 1.0; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
                        [](double, double) { return -1.0; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
                        [](double x, double) { return x; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
                        [](double x, double y) { return -x / (y * y); });
}
/// Elementwise max(a, floor); the floor branch passes no gradient.
inline Tensor clamp_min(const Tensor& a, double floor) {
  return detail::unary(a, [floor](double x) { return x > floor ? x : floor; },
                       [floor](double x, double) { return x > floor ? 1.0 : 0.0; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}
inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator-(const Tensor& a) { return scale(a, -1.0); }

inline Tensor square(const Tensor& a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// Plain square root. Callers guard the radical with their own epsilon.
inline Tensor sqrt(const Tensor& a) {
  for (double v : a.values()) {
    if (!(v >= 0.0)) throw NumericError("sqrt of negative or NaN value " + std::to_string(v));
  }
  return detail::unary(a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

/// relu'(0) = 0.
inline Tensor relu(const Tensor& a) {
  return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor silu(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

/// Forward is the identity; backward contributes nothing to any ancestor.
inline Tensor stop_gradient(const Tensor& a) { return Tensor::constant(a.shape(), a.values()); }

inline Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  if (detail::broadcast_shape(a.shape(), shape) != shape) {
    throw DimensionError("cannot broadcast " + to_string(a.shape()) + " to " + to_string(shape));
  }
  return add(a, Tensor::zeros(shape));
}

// ---------------------------------------------------------------------------
// Reductions and views

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return Tensor::from_op({}, {s}, {a}, [](const detail::Node&, std::span<const double> g, detail::GradSlots& pg) {
    for (double& v : *pg[0]) v += g[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

/// Sum over one axis, keeping it with extent 1.
inline Tensor sum_axis(const Tensor& a, int axis) {
  const std::size_t r = a.rank();
  const std::size_t ax = axis < 0 ? r + axis : static_cast<std::size_t>(axis);
  if (ax >= r) throw DimensionError("axis out of range for shape " + to_string(a.shape()));
  const Shape& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < r; ++i) inner *= s[i];
  const std::size_t n = s[ax];
  Shape out_shape = s;
  out_shape[ax] = 1;
  std::vector<double> out(outer * inner, 0.0);
  const auto& v = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += v[(o * n + k) * inner + i];
  return Tensor::from_op(out_shape, std::move(out), {a},
                         [outer, inner, n](const detail::Node&, std::span<const double> g, detail::GradSlots& pg) {
                           auto& ga = *pg[0];
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t k = 0; k < n; ++k)
                               for (std::size_t i = 0; i < inner; ++i) ga[(o * n + k) * inner + i] += g[o * inner + i];
                         });
}

inline Tensor mean_axis(const Tensor& a, int axis) {
  const std::size_t ax = axis < 0 ? a.rank() + axis : static_cast<std::size_t>(axis);
  return scale(sum_axis(a, axis), 1.0 / static_cast<double>(a.dim(ax)));
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw DimensionError("cannot reshape " + to_string(a.shape()) + " to " + to_string(shape));
  }
  return Tensor::from_op(std::move(shape), a.values(), {a},
                         [](const detail::Node&, std::span<const double> g, detail::GradSlots& pg) {
                           auto& ga = *pg[0];
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                         });
}

/// Swaps the last two axes.
inline Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) throw DimensionError("transpose needs rank >= 2, got " + to_string(a.shape()));
  const Shape& s = a.shape();
  const std::size_t r = s.size();
  const std::size_t m = s[r - 2], n = s[r - 1], batch = a.size() / (m * n);
  Shape out_shape = s;
  std::swap(out_shape[r - 2], out_shape[r - 1]);
  std::vector<double> out(a.size());
  const auto& v = a.values();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[b * m * n + j * m + i] = v[b * m * n + i * n + j];
  return Tensor::from_op(out_shape, std::move(out), {a},
                         [batch, m, n](const detail::Node&, std::span<const double> g, detail::GradSlots& pg) {
                           auto& ga = *pg[0];
                           for (std::size_t b = 0; b < batch; ++b)
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) ga[b * m * n + i * n + j] += g[b * m * n + j * m + i];
                         });
}

/// Columns [start, start+len) of the last axis.
inline Tensor slice_last(const Tensor& a, std::size_t start, std::size_t len) {
  const Shape& s = a.shape();
  if (s.empty() || start + len > s.back()) {
    throw DimensionError("slice [" + std::to_string(start) + "," + std::to_string(start + len) + ") of " +
                         to_string(s));
  }
  const std::size_t width = s.back(), rows = a.size() / width;
  Shape out_shape = s;
  out_shape.back() = len;
  std::vector<double> out(rows * len);
  const auto& v = a.values();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(r * width + start), len,
                out.begin() + static_cast<std::ptrdiff_t>(r * len));
  return Tensor::from_op(out_shape, std::move(out), {a},
                         [rows, width, start, len](const detail::Node&, std::span<const double> g, detail::GradSlots& pg) {
                           auto& ga = *pg[0];
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t k = 0; k < len; ++k) ga[r * width + start + k] += g[r * len + k];
                         });
}

/// Row gather from a [R, C] table: out[i] = table[rows[i]].
inline Tensor take_rows(const Tensor& table, std::vector<std::size_t> rows) {
  if (table.rank() != 2) throw DimensionError("take_rows needs a [R,C] table, got " + to_string(table.shape()));
  const std::size_t R = table.dim(0), C = table.dim(1);
  std::vector<double> out(rows.size() * C);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= R) throw ContractError("row index " + std::to_string(rows[i]) + " out of range " + std::to_string(R));
    std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(rows[i] * C), C,
                out.begin() + static_cast<std::ptrdiff_t>(i * C));
  }
  const std::size_t n = rows.size();
  return Tensor::from_op({n, C}, std::move(out), {table},
                         [rows = std::move(rows), C](const detail::Node&, std::span<const double> g, detail::GradSlots& pg) {
                           auto& gt = *pg[0];
                           for (std::size_t i = 0; i < rows.size(); ++i)
                             for (std::size_t c = 0; c < C; ++c) gt[rows[i] * C + c] += g[i * C + c];
                         });
}

/// Softmax over the last axis.
inline Tensor softmax(const Tensor& a) {
  const std::size_t width = a.shape().back(), rows = a.size() / width;
  std::vector<double> out(a.size());
  const auto& v = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = v.data() + r * width;
    double* y = out.data() + r * width;
    const double mx = *std::max_element(x, x + width);
    double z = 0.0;
    for (std::size_t k = 0; k < width; ++k) z += (y[k] = std::exp(x[k] - mx));
    for (std::size_t k = 0; k < width; ++k) y[k] /= z;
  }
  return Tensor::from_op(a.shape(), std::move(out), {a},
                         [rows, width](const detail::Node& self, std::span<const double> g, detail::GradSlots& pg) {
                           auto& ga = *pg[0];
                           for (std::size_t r = 0; r < rows; ++r) {
                             const double* y = self.value.data() + r * width;
                             const double* gy = g.data() + r * width;
                             double dot = 0.0;
                             for (std::size_t k = 0; k < width; ++k) dot += y[k] * gy[k];
                             for (std::size_t k = 0; k < width; ++k) ga[r * width + k] += y[k] * (gy[k] - dot);
                           }
                         });
}

// ---------------------------------------------------------------------------
// Matrix products

namespace detail {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
}  // namespace detail

/// Matrix product on the last two axes.
///   [..., n, k] x [k, m]       -> [..., n, m]   (leading axes flattened)
///   [B, n, k]   x [B, k, m]    -> [B, n, m]
///   [n, k]      x [B, k, m]    -> [B, n, m]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  using detail::ConstMap;
  using detail::MutMap;
  if (a.rank() < 2 || b.rank() < 2 || b.rank() > 3) {
    throw DimensionError("matmul shapes " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const std::size_t k = sa.back();
  if (sb[sb.size() - 2] != k) {
    throw DimensionError("matmul inner extents differ: " + to_string(sa) + " x " + to_string(sb));
  }
  const std::size_t m = sb.back();
  if (b.rank() == 2) {
    const std::size_t rows = a.size() / k;
    Shape out_shape = sa;
    out_shape.back() = m;
    std::vector<double> out(rows * m);
    MutMap(out.data(), rows, m).noalias() = ConstMap(a.values().data(), rows, k) * ConstMap(b.values().data(), k, m);
    return Tensor::from_op(out_shape, std::move(out), {a, b},
                           [rows, k, m](const detail::Node& self, std::span<const double> g, detail::GradSlots& pg) {
                             ConstMap G(g.data(), rows, m);
                             if (pg[0]) MutMap(pg[0]->data(), rows, k).noalias() += G * ConstMap(self.parents[1]->value.data(), k, m).transpose();
                             if (pg[1]) MutMap(pg[1]->data(), k, m).noalias() += ConstMap(self.parents[0]->value.data(), rows, k).transpose() * G;
                           });
  }
  const std::size_t batch = sb[0];
  const bool a_batched = a.rank() == 3;
  if (a.rank() > 3 || (a_batched && sa[0] != batch)) {
    throw DimensionError("batched matmul shapes " + to_string(sa) + " x " + to_string(sb));
  }
  const std::size_t n = sa[sa.size() - 2];
  std::vector<double> out(batch * n * m);
  for (std::size_t i = 0; i < batch; ++i) {
    const double* pa = a.values().data() + (a_batched ? i * n * k : 0);
    MutMap(out.data() + i * n * m, n, m).noalias() = ConstMap(pa, n, k) * ConstMap(b.values().data() + i * k * m, k, m);
  }
  return Tensor::from_op({batch, n, m}, std::move(out), {a, b},
                         [batch, a_batched, n, k, m](const detail::Node& self, std::span<const double> g, detail::GradSlots& pg) {
                           const auto& av = self.parents[0]->value;
                           const auto& bv = self.parents[1]->value;
                           for (std::size_t i = 0; i < batch; ++i) {
                             ConstMap G(g.data() + i * n * m, n, m);
                             const std::size_t off_a = a_batched ? i * n * k : 0;
                             if (pg[0]) MutMap(pg[0]->data() + off_a, n, k).noalias() += G * ConstMap(bv.data() + i * k * m, k, m).transpose();
                             if (pg[1]) MutMap(pg[1]->data() + i * k * m, k, m).noalias() += ConstMap(av.data() + off_a, n, k).transpose() * G;
                           }
                         });
}

}  // namespace coredi
