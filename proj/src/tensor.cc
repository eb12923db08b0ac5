#include "mtner/tensor.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

namespace mtner {

namespace {

thread_local bool g_grad_enabled = true;

void check_finite(std::span<const double> values, std::string_view op) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value produced by " + std::string(op));
    }
  }
}

void require_rank(const Tensor& t, std::size_t rank, std::string_view op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got shape " +
                         shape_to_string(t.shape()));
  }
}

void require_defined(const Tensor& t, std::string_view op) {
  if (!t.defined()) {
    throw std::invalid_argument(std::string(op) + ": undefined tensor");
  }
}

// True if b broadcasts over the rows of a (b holds exactly a's last dim).
bool row_broadcast(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return false;
  if (a.rank() == 0 || b.size() != a.shape().back()) return false;
  // Allow b of shape [n] or [1 x n].
  return b.rank() == 1 || (b.rank() == 2 && b.dim(0) == 1);
}

void check_binary(const Tensor& a, const Tensor& b, std::string_view op,
                  bool allow_broadcast) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() == b.shape()) return;
  if (allow_broadcast && row_broadcast(a, b)) return;
  throw DimensionError(std::string(op) + ": incompatible shapes " +
                       shape_to_string(a.shape()) + " and " +
                       shape_to_string(b.shape()));
}

// Shared scaffolding for unary elementwise ops. `fn` maps x -> y, `deriv`
// maps (x, y) -> dy/dx.
template <typename Fn, typename Deriv>
Tensor unary(const Tensor& a, std::string_view op, Fn fn, Deriv deriv) {
  require_defined(a, op);
  auto x = a.data();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fn(x[i]);
  Tensor out = make_output(a.shape(), std::move(y), op);
  if (needs_record({a})) {
    record_op(out, {a}, [a, out, deriv]() mutable {
      if (!a.requires_grad()) return;
      auto g = out.grad();
      auto xs = a.data();
      auto ys = out.data();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(xs[i], ys[i]);
    });
  }
  return out;
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::size_t n = shape_size(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("zero-sized dimension in " + shape_to_string(shape));
  }
  if (shape_size(shape) != values.size()) {
    throw DimensionError("shape " + shape_to_string(shape) + " needs " +
                         std::to_string(shape_size(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  check_finite(values, "tensor construction");
  auto s = std::make_shared<Storage>();
  s->shape = std::move(shape);
  s->values = std::move(values);
  s->requires_grad = requires_grad;
  return Tensor(std::move(s));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_to_string(shape()));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::size() const { return impl_->values.size(); }

std::span<const double> Tensor::data() const { return impl_->values; }

std::span<double> Tensor::mutable_data() { return impl_->values; }

double Tensor::item() const {
  if (size() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_to_string(shape()));
  }
  return impl_->values[0];
}

double Tensor::at(std::size_t i) const { return impl_->values.at(i); }

double Tensor::at(std::size_t i, std::size_t j) const {
  return impl_->values.at(i * impl_->shape.at(1) + j);
}

double Tensor::at(std::size_t i, std::size_t j, std::size_t k) const {
  const auto& s = impl_->shape;
  return impl_->values.at((i * s.at(1) + j) * s.at(2) + k);
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool value) { impl_->requires_grad = value; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const { return impl_->grad; }

std::span<double> Tensor::grad_buffer() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
  return impl_->grad;
}

void Tensor::accumulate_grad(std::span<const double> delta) const {
  auto g = grad_buffer();
  if (delta.size() != g.size()) throw DimensionError("gradient size mismatch");
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

void Tensor::zero_grad() {
  if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void Tensor::clear_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::detach() const {
  auto s = std::make_shared<Storage>();
  s->shape = impl_->shape;
  s->values = impl_->values;
  return Tensor(std::move(s));
}

Tensor Tensor::clone() const {
  auto s = std::make_shared<Storage>(*impl_);
  return Tensor(std::move(s));
}

// ---------------------------------------------------------------------------
// Graph

Graph& Graph::current() {
  thread_local Graph graph;
  return graph;
}

void Graph::record(Tensor output, std::function<void()> backward) {
  nodes_.push_back(Node{std::move(output), std::move(backward)});
}

void Graph::backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.size() != 1) {
    throw DimensionError("backward requires a scalar loss, got " +
                         shape_to_string(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw std::invalid_argument("backward: loss does not depend on any parameter");
  }
  for (auto& node : nodes_) node.output.clear_grad();
  Tensor seed = loss;
  seed.grad_buffer()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output.has_grad()) it->backward();
  }
}

void backward(const Tensor& loss) { Graph::current().backward(loss); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor make_output(Shape shape, std::vector<double> values, std::string_view op) {
  check_finite(values, op);
  return Tensor::from(std::move(shape), std::move(values));
}

bool needs_record(std::initializer_list<Tensor> inputs) {
  if (!g_grad_enabled) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor& t) { return t.requires_grad(); });
}

void record_op(Tensor& output, std::initializer_list<Tensor> inputs,
               std::function<void()> backward) {
  if (!needs_record(inputs)) return;
  output.set_requires_grad(true);
  Graph::current().record(output, std::move(backward));
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  check_binary(a, b, "add", true);
  const bool bcast = row_broadcast(a, b);
  auto x = a.data();
  auto y = b.data();
  const std::size_t n = y.size();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[bcast ? i % n : i];
  Tensor result = make_output(a.shape(), std::move(out), "add");
  if (needs_record({a, b})) {
    record_op(result, {a, b}, [a, b, result, bcast]() mutable {
      auto g = result.grad();
      if (a.requires_grad()) a.accumulate_grad(g);
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        const std::size_t n = gb.size();
        for (std::size_t i = 0; i < g.size(); ++i) gb[bcast ? i % n : i] += g[i];
      }
    });
  }
  return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_binary(a, b, "sub", false);
  auto x = a.data();
  auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  Tensor result = make_output(a.shape(), std::move(out), "sub");
  if (needs_record({a, b})) {
    record_op(result, {a, b}, [a, b, result]() mutable {
      auto g = result.grad();
      if (a.requires_grad()) a.accumulate_grad(g);
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_binary(a, b, "mul", true);
  const bool bcast = row_broadcast(a, b);
  auto x = a.data();
  auto y = b.data();
  const std::size_t n = y.size();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[bcast ? i % n : i];
  Tensor result = make_output(a.shape(), std::move(out), "mul");
  if (needs_record({a, b})) {
    record_op(result, {a, b}, [a, b, result, bcast]() mutable {
      auto g = result.grad();
      auto x = a.data();
      auto y = b.data();
      const std::size_t n = y.size();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[bcast ? i % n : i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[bcast ? i % n : i] += g[i] * x[i];
      }
    });
  }
  return result;
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, "scale", [factor](double x) { return x * factor; },
      [factor](double, double) { return factor; });
}

Tensor div_scalar(const Tensor& a, double divisor) {
  if (divisor == 0.0) throw NumericError("div_scalar: division by zero");
  return scale(a, 1.0 / divisor);
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(
      a, "add_scalar", [value](double x) { return x + value; },
      [](double, double) { return 1.0; });
}

Tensor pow_scalar(const Tensor& a, double exponent) {
  return unary(
      a, "pow", [exponent](double x) { return std::pow(x, exponent); },
      [exponent](double x, double) {
        return exponent == 0.0 ? 0.0 : exponent * std::pow(x, exponent - 1.0);
      });
}

Tensor log(const Tensor& a) {
  return unary(
      a, "log", [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, "exp", [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, "tanh", [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  double total = 0.0;
  for (double v : a.data()) total += v;
  Tensor result = make_output({}, {total}, "sum");
  if (needs_record({a})) {
    record_op(result, {a}, [a, result]() mutable {
      if (!a.requires_grad()) return;
      const double g = result.grad()[0];
      for (double& v : a.grad_buffer()) v += g;
    });
  }
  return result;
}

Tensor mean(const Tensor& a) {
  require_defined(a, "mean");
  return div_scalar(sum(a), static_cast<double>(a.size()));
}

// ---------------------------------------------------------------------------
// Linear algebra and reshaping

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_to_string(a.shape()) +
                         " by " + shape_to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto x = a.data();
  auto y = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = x[i * k + p];
      if (s == 0.0) continue;
      const double* brow = y.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
    }
  }
  Tensor result = make_output({m, n}, std::move(out), "matmul");
  if (needs_record({a, b})) {
    record_op(result, {a, b}, [a, b, result, m, k, n]() mutable {
      auto g = result.grad();
      auto x = a.data();
      auto y = b.data();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = g.data() + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double* brow = y.data() + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[i * k + p] += acc;
          }
        }
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = g.data() + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double s = x[i * k + p];
            if (s == 0.0) continue;
            double* gbrow = gb.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += s * grow[j];
          }
        }
      }
    });
  }
  return result;
}

Tensor transpose(const Tensor& a) {
  require_defined(a, "transpose");
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  auto x = a.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  Tensor result = make_output({n, m}, std::move(out), "transpose");
  if (needs_record({a})) {
    record_op(result, {a}, [a, result, m, n]() mutable {
      if (!a.requires_grad()) return;
      auto g = result.grad();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
  }
  return result;
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(a.shape()) +
                         " as " + shape_to_string(shape));
  }
  std::vector<double> values(a.data().begin(), a.data().end());
  Tensor result = make_output(std::move(shape), std::move(values), "reshape");
  if (needs_record({a})) {
    record_op(result, {a}, [a, result]() mutable {
      if (a.requires_grad()) a.accumulate_grad(result.grad());
    });
  }
  return result;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  for (const auto& p : parts) require_defined(p, "concat");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) {
    throw DimensionError("concat: axis " + std::to_string(axis) +
                         " out of range for " + shape_to_string(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) ok = false;
    }
    if (!ok) {
      throw DimensionError("concat: incompatible shapes " + shape_to_string(first) +
                           " and " + shape_to_string(s) + " along axis " +
                           std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  const std::size_t out_stride = out_shape[axis] * inner;

  std::vector<double> out(shape_size(out_shape));
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t block = p.dim(axis) * inner;
    auto src = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + o * block, block, out.begin() + o * out_stride + offset);
    }
    offset += block;
  }
  Tensor result = make_output(out_shape, std::move(out), "concat");
  if (g_grad_enabled &&
      std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.requires_grad(); })) {
    result.set_requires_grad(true);
    Graph::current().record(result, [parts, result, axis, outer, inner, out_stride]() mutable {
      auto g = result.grad();
      std::size_t offset = 0;
      for (auto& p : parts) {
        const std::size_t block = p.dim(axis) * inner;
        if (p.requires_grad()) {
          auto gp = p.grad_buffer();
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < block; ++i)
              gp[o * block + i] += g[o * out_stride + offset + i];
        }
        offset += block;
      }
    });
  }
  return result;
}

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  require_defined(a, "slice_rows");
  require_rank(a, 2, "slice_rows");
  if (count == 0 || start + count > a.dim(0)) {
    throw DimensionError("slice_rows: rows [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of range for " +
                         shape_to_string(a.shape()));
  }
  const std::size_t n = a.dim(1);
  auto x = a.data();
  std::vector<double> out(x.begin() + start * n, x.begin() + (start + count) * n);
  Tensor result = make_output({count, n}, std::move(out), "slice_rows");
  if (needs_record({a})) {
    record_op(result, {a}, [a, result, start, n]() mutable {
      if (!a.requires_grad()) return;
      auto g = result.grad();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[start * n + i] += g[i];
    });
  }
  return result;
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  require_defined(a, "slice_cols");
  require_rank(a, 2, "slice_cols");
  if (count == 0 || start + count > a.dim(1)) {
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of range for " +
                         shape_to_string(a.shape()));
  }
  const std::size_t m = a.dim(0), n = a.dim(1);
  auto x = a.data();
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(x.begin() + i * n + start, count, out.begin() + i * count);
  Tensor result = make_output({m, count}, std::move(out), "slice_cols");
  if (needs_record({a})) {
    record_op(result, {a}, [a, result, start, count, m, n]() mutable {
      if (!a.requires_grad()) return;
      auto g = result.grad();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) ga[i * n + start + j] += g[i * count + j];
    });
  }
  return result;
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  require_defined(table, "gather_rows");
  require_rank(table, 2, "gather_rows");
  if (ids.empty()) throw DimensionError("gather_rows: no ids");
  const std::size_t rows = table.dim(0), n = table.dim(1);
  std::vector<int> idx(ids.begin(), ids.end());
  auto x = table.data();
  std::vector<double> out(idx.size() * n);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= rows) {
      throw DimensionError("gather_rows: id " + std::to_string(idx[r]) +
                           " out of range for table " + shape_to_string(table.shape()));
    }
    std::copy_n(x.begin() + idx[r] * n, n, out.begin() + r * n);
  }
  Tensor result = make_output({idx.size(), n}, std::move(out), "gather_rows");
  if (needs_record({table})) {
    record_op(result, {table}, [table, result, idx = std::move(idx), n]() mutable {
      if (!table.requires_grad()) return;
      auto g = result.grad();
      auto gt = table.grad_buffer();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < n; ++j) gt[idx[r] * n + j] += g[r * n + j];
    });
  }
  return result;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  require_defined(x, "softmax");
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) +
                         " out of range for " + shape_to_string(x.shape()));
  }
  const Shape& s = x.shape();
  const std::size_t len = s[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  auto v = x.data();
  std::vector<double> out(v.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, v[base + k * inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(v[base + k * inner] - mx);
        out[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= total;
    }
  }
  Tensor result = make_output(s, std::move(out), "softmax");
  if (needs_record({x})) {
    record_op(result, {x}, [x, result, outer, inner, len]() mutable {
      if (!x.requires_grad()) return;
      auto g = result.grad();
      auto y = result.data();
      auto gx = x.grad_buffer();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          double dot = 0.0;
          for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
          for (std::size_t k = 0; k < len; ++k) {
            const std::size_t i = base + k * inner;
            gx[i] += y[i] * (g[i] - dot);
          }
        }
      }
    });
  }
  return result;
}

MomentStats layer_norm_stats(std::span<const double> x) {
  if (x.empty()) throw DimensionError("layer_norm_stats: empty input");
  const double d = static_cast<double>(x.size());
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= d;
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  return {mu, std::sqrt(var / d)};
}

MomentStats layer_norm_stats(const Tensor& x) { return layer_norm_stats(x.data()); }

Tensor normalize_rows(const Tensor& x, double eps) {
  require_defined(x, "normalize_rows");
  if (x.rank() == 0) throw DimensionError("normalize_rows: scalar input");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  auto v = x.data();
  std::vector<double> out(v.size());
  std::vector<double> sigma(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto st = layer_norm_stats(v.subspan(r * d, d));
    sigma[r] = st.stddev;
    for (std::size_t k = 0; k < d; ++k)
      out[r * d + k] = (v[r * d + k] - st.mean) / (st.stddev + eps);
  }
  Tensor result = make_output(x.shape(), std::move(out), "normalize_rows");
  if (needs_record({x})) {
    record_op(result, {x}, [x, result, sigma = std::move(sigma), d, rows, eps]() mutable {
      if (!x.requires_grad()) return;
      auto g = result.grad();
      auto y = result.data();
      auto gx = x.grad_buffer();
      const double dd = static_cast<double>(d);
      for (std::size_t r = 0; r < rows; ++r) {
        const double s = sigma[r] + eps;
        double gmean = 0.0, gc = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          gmean += g[r * d + k];
          // centred value c_k = y_k * s
          gc += g[r * d + k] * y[r * d + k] * s;
        }
        gmean /= dd;
        for (std::size_t k = 0; k < d; ++k) {
          double delta = (g[r * d + k] - gmean) / s;
          if (sigma[r] > 0.0) {
            const double c = y[r * d + k] * s;
            delta -= c * gc / (dd * sigma[r] * s * s);
          }
          gx[r * d + k] += delta;
        }
      }
    });
  }
  return result;
}

Tensor conditional_grid(const Tensor& gamma, const Tensor& shift,
                        const Tensor& normed) {
  require_defined(gamma, "conditional_grid");
  require_defined(shift, "conditional_grid");
  require_defined(normed, "conditional_grid");
  require_rank(gamma, 2, "conditional_grid");
  if (shift.shape() != gamma.shape() || normed.shape() != gamma.shape()) {
    throw DimensionError("conditional_grid: shapes " + shape_to_string(gamma.shape()) +
                         ", " + shape_to_string(shift.shape()) + ", " +
                         shape_to_string(normed.shape()) + " differ");
  }
  const std::size_t n = gamma.dim(0), d = gamma.dim(1);
  auto ga = gamma.data();
  auto sh = shift.data();
  auto nm = normed.data();
  std::vector<double> out(n * n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < d; ++k)
        out[(i * n + j) * d + k] = ga[i * d + k] * nm[j * d + k] + sh[i * d + k];
  Tensor result = make_output({n, n, d}, std::move(out), "conditional_grid");
  if (needs_record({gamma, shift, normed})) {
    record_op(result, {gamma, shift, normed}, [gamma, shift, normed, result, n, d]() mutable {
      auto g = result.grad();
      auto ga = gamma.data();
      auto nm = normed.data();
      std::vector<double> dg(n * d, 0.0), ds(n * d, 0.0), dn(n * d, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t k = 0; k < d; ++k) {
            const double gv = g[(i * n + j) * d + k];
            dg[i * d + k] += gv * nm[j * d + k];
            ds[i * d + k] += gv;
            dn[j * d + k] += gv * ga[i * d + k];
          }
      if (gamma.requires_grad()) gamma.accumulate_grad(dg);
      if (shift.requires_grad()) shift.accumulate_grad(ds);
      if (normed.requires_grad()) normed.accumulate_grad(dn);
    });
  }
  return result;
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  require_defined(x, "conv2d");
  require_defined(kernel, "conv2d");
  require_rank(x, 3, "conv2d");
  require_rank(kernel, 4, "conv2d");
  const std::size_t k = kernel.dim(0);
  if (kernel.dim(1) != k) {
    throw DimensionError("conv2d: kernel must be square, got " +
                         shape_to_string(kernel.shape()));
  }
  if (k % 2 == 0) {
    throw DimensionError("conv2d: same padding needs an odd kernel size, got " +
                         std::to_string(k));
  }
  const std::size_t h = x.dim(0), w = x.dim(1), cin = x.dim(2);
  const std::size_t cout = kernel.dim(3);
  if (kernel.dim(2) != cin) {
    throw DimensionError("conv2d: input " + shape_to_string(x.shape()) +
                         " does not match kernel " + shape_to_string(kernel.shape()));
  }
  if (bias.defined() && bias.size() != cout) {
    throw DimensionError("conv2d: bias " + shape_to_string(bias.shape()) +
                         " does not match " + std::to_string(cout) + " output channels");
  }
  const long pad = static_cast<long>(k / 2);
  auto xv = x.data();
  auto kv = kernel.data();
  std::vector<double> out(h * w * cout, 0.0);
  for (std::size_t yy = 0; yy < h; ++yy) {
    for (std::size_t xx = 0; xx < w; ++xx) {
      double* o = out.data() + (yy * w + xx) * cout;
      if (bias.defined()) {
        auto bv = bias.data();
        for (std::size_t c = 0; c < cout; ++c) o[c] = bv[c];
      }
      for (std::size_t dy = 0; dy < k; ++dy) {
        const long sy = static_cast<long>(yy + dy) - pad;
        if (sy < 0 || sy >= static_cast<long>(h)) continue;
        for (std::size_t dx = 0; dx < k; ++dx) {
          const long sx = static_cast<long>(xx + dx) - pad;
          if (sx < 0 || sx >= static_cast<long>(w)) continue;
          const double* in = xv.data() + (sy * w + sx) * cin;
          const double* kk = kv.data() + (dy * k + dx) * cin * cout;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const double s = in[ci];
            if (s == 0.0) continue;
            const double* krow = kk + ci * cout;
            for (std::size_t c = 0; c < cout; ++c) o[c] += s * krow[c];
          }
        }
      }
    }
  }
  Tensor result = make_output({h, w, cout}, std::move(out), "conv2d");
  const bool with_bias = bias.defined();
  Tensor b = bias;
  if (needs_record({x, kernel}) || (with_bias && needs_record({bias}))) {
    result.set_requires_grad(true);
    Graph::current().record(result, [x, kernel, b, result, h, w, cin, cout, k, pad,
                                     with_bias]() mutable {
      auto g = result.grad();
      auto xv = x.data();
      auto kv = kernel.data();
      const bool gx_needed = x.requires_grad();
      const bool gk_needed = kernel.requires_grad();
      std::span<double> gx, gk;
      if (gx_needed) gx = x.grad_buffer();
      if (gk_needed) gk = kernel.grad_buffer();
      if (with_bias && b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t p = 0; p < h * w; ++p)
          for (std::size_t c = 0; c < cout; ++c) gb[c] += g[p * cout + c];
      }
      for (std::size_t yy = 0; yy < h; ++yy) {
        for (std::size_t xx = 0; xx < w; ++xx) {
          const double* go = g.data() + (yy * w + xx) * cout;
          for (std::size_t dy = 0; dy < k; ++dy) {
            const long sy = static_cast<long>(yy + dy) - pad;
            if (sy < 0 || sy >= static_cast<long>(h)) continue;
            for (std::size_t dx = 0; dx < k; ++dx) {
              const long sx = static_cast<long>(xx + dx) - pad;
              if (sx < 0 || sx >= static_cast<long>(w)) continue;
              const std::size_t in_off = (sy * w + sx) * cin;
              const std::size_t k_off = (dy * k + dx) * cin * cout;
              for (std::size_t ci = 0; ci < cin; ++ci) {
                const double* krow = kv.data() + k_off + ci * cout;
                if (gx_needed) {
                  double acc = 0.0;
                  for (std::size_t c = 0; c < cout; ++c) acc += go[c] * krow[c];
                  gx[in_off + ci] += acc;
                }
                if (gk_needed) {
                  const double s = xv[in_off + ci];
                  if (s == 0.0) continue;
                  double* gkrow = gk.data() + k_off + ci * cout;
                  for (std::size_t c = 0; c < cout; ++c) gkrow[c] += s * go[c];
                }
              }
            }
          }
        }
      }
    });
  }
  return result;
}

Tensor max_over_first_axis(const Tensor& x) {
  require_defined(x, "max_over_first_axis");
  require_rank(x, 3, "max_over_first_axis");
  const std::size_t a = x.dim(0), b = x.dim(1), c = x.dim(2);
  const std::size_t plane = b * c;
  auto v = x.data();
  std::vector<double> out(plane);
  std::vector<std::size_t> arg(plane, 0);
  for (std::size_t p = 0; p < plane; ++p) {
    double best = v[p];
    for (std::size_t i = 1; i < a; ++i) {
      if (v[i * plane + p] > best) {
        best = v[i * plane + p];
        arg[p] = i;
      }
    }
    out[p] = best;
  }
  Tensor result = make_output({b, c}, std::move(out), "max_over_first_axis");
  if (needs_record({x})) {
    record_op(result, {x}, [x, result, arg = std::move(arg), plane]() mutable {
      if (!x.requires_grad()) return;
      auto g = result.grad();
      auto gx = x.grad_buffer();
      for (std::size_t p = 0; p < plane; ++p) gx[arg[p] * plane + p] += g[p];
    });
  }
  return result;
}

Tensor mix_rows(const Tensor& table, const RowMixture& mixture) {
  require_defined(table, "mix_rows");
  require_rank(table, 2, "mix_rows");
  if (mixture.empty()) throw DimensionError("mix_rows: empty mixture");
  const std::size_t rows = table.dim(0), n = table.dim(1);
  auto x = table.data();
  std::vector<double> out(mixture.size() * n, 0.0);
  for (std::size_t r = 0; r < mixture.size(); ++r) {
    for (const auto& [row, weight] : mixture[r]) {
      if (row < 0 || static_cast<std::size_t>(row) >= rows) {
        throw DimensionError("mix_rows: row " + std::to_string(row) +
                             " out of range for " + shape_to_string(table.shape()));
      }
      for (std::size_t j = 0; j < n; ++j) out[r * n + j] += weight * x[row * n + j];
    }
  }
  Tensor result = make_output({mixture.size(), n}, std::move(out), "mix_rows");
  if (needs_record({table})) {
    record_op(result, {table}, [table, result, mixture, n]() mutable {
      if (!table.requires_grad()) return;
      auto g = result.grad();
      auto gt = table.grad_buffer();
      for (std::size_t r = 0; r < mixture.size(); ++r)
        for (const auto& [row, weight] : mixture[r])
          for (std::size_t j = 0; j < n; ++j) gt[row * n + j] += weight * g[r * n + j];
    });
  }
  return result;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

// ---------------------------------------------------------------------------
// Gradient checking

double finite_diff_check(const std::function<Tensor()>& loss_fn,
                         const std::vector<Coordinate>& coords, double eps) {
  if (!(eps >= 1e-6 && eps <= 1e-4)) {
    throw std::invalid_argument("finite_diff_check: step out of range");
  }
  Graph& graph = Graph::current();
  graph.clear();
  std::vector<Tensor> touched;
  for (const auto& c : coords) {
    Tensor t = c.tensor;
    if (!t.requires_grad()) {
      throw std::invalid_argument("finite_diff_check: coordinate tensor does not require grad");
    }
    if (c.index >= t.size()) throw DimensionError("finite_diff_check: index out of range");
    t.zero_grad();
    touched.push_back(t);
  }
  std::vector<double> analytic(coords.size(), 0.0);
  {
    Tensor loss = loss_fn();
    if (!std::isfinite(loss.item())) throw NumericError("finite_diff_check: non-finite loss");
    if (loss.requires_grad()) {
      graph.backward(loss);
      for (std::size_t i = 0; i < coords.size(); ++i) {
        if (coords[i].tensor.has_grad()) analytic[i] = coords[i].tensor.grad()[coords[i].index];
      }
    }
  }
  graph.clear();

  NoGradGuard no_grad;
  double worst = 0.0;
  for (std::size_t i = 0; i < coords.size(); ++i) {
    Tensor t = coords[i].tensor;
    double& slot = t.mutable_data()[coords[i].index];
    const double saved = slot;
    slot = saved + eps;
    const double plus = loss_fn().item();
    slot = saved - eps;
    const double minus = loss_fn().item();
    slot = saved;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      throw NumericError("finite_diff_check: non-finite loss");
    }
    const double numeric = (plus - minus) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
    worst = std::max(worst, err);
  }
  for (auto& t : touched) t.zero_grad();
  return worst;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                         double eps) {
  x.set_requires_grad(true);
  std::vector<Coordinate> coords;
  for (std::size_t i = 0; i < x.size(); ++i) coords.push_back({x, i});
  return finite_diff_check([&]() { return f(x); }, coords, eps);
}

// ---------------------------------------------------------------------------
// Text dump

void dump_tensor(std::ostream& out, const Tensor& t) {
  out << "shape:";
  for (std::size_t d : t.shape()) out << ' ' << d;
  out << "\ndata:";
  char buf[32];
  for (double v : t.data()) {
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    out << ' ' << std::string_view(buf, res.ptr - buf);
  }
  out << '\n';
}

Tensor parse_tensor(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("shape:", 0) != 0) {
    throw std::runtime_error("tensor dump: expected 'shape:' line");
  }
  Shape shape;
  {
    std::istringstream ss(line.substr(6));
    std::size_t d;
    while (ss >> d) shape.push_back(d);
  }
  if (!std::getline(in, line) || line.rfind("data:", 0) != 0) {
    throw std::runtime_error("tensor dump: expected 'data:' line");
  }
  std::vector<double> values;
  values.reserve(shape_size(shape));
  const char* p = line.data() + 5;
  const char* end = line.data() + line.size();
  while (p < end) {
    while (p < end && *p == ' ') ++p;
    if (p == end) break;
    double v;
    auto res = std::from_chars(p, end, v);
    if (res.ec != std::errc()) throw std::runtime_error("tensor dump: bad number");
    values.push_back(v);
    p = res.ptr;
  }
  return Tensor::from(std::move(shape), std::move(values));
}

}  // namespace mtner
