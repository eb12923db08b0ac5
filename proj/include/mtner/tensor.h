#ifndef MTNER_TENSOR_H_
#define MTNER_TENSOR_H_

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <iosfwd>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace mtner {

using Shape = std::vector<std::size_t>;

// Raised when operand shapes are incompatible.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised when an operation produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shape_to_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

// Dense row-major tensor of doubles. Copies share storage (handle semantics);
// use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const double> data() const;
  // Direct write access; bypasses the graph. Meant for optimizers and tests.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t i, std::size_t j) const;
  double at(std::size_t i, std::size_t j, std::size_t k) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const double> grad() const;
  // Allocates a zero gradient buffer on first use.
  // Gradients are scratch state shared by every handle, so writable through const ones.
  std::span<double> grad_buffer() const;
  void accumulate_grad(std::span<const double> delta) const;
  void zero_grad();
  void clear_grad();

  // Same values, no graph history, never requires grad.
  Tensor detach() const;
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  explicit Tensor(std::shared_ptr<Storage> impl) : impl_(std::move(impl)) {}

  std::shared_ptr<Storage> impl_;
};

// Append-only operation tape for one thread. Ops record a node whenever any
// input requires grad and gradient recording is enabled.
class Graph {
 public:
  static Graph& current();

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }
  void record(Tensor output, std::function<void()> backward);

  // Seeds d(loss)/d(loss) = 1 and runs node backward functions in exact
  // reverse append order. Leaf gradients accumulate across calls; interior
  // gradients are reset at the start of every call.
  void backward(const Tensor& loss);

 private:
  struct Node {
    Tensor output;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
};

void backward(const Tensor& loss);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Building blocks for fused operations defined outside the core.
Tensor make_output(Shape shape, std::vector<double> values, std::string_view op);
bool needs_record(std::initializer_list<Tensor> inputs);
void record_op(Tensor& output, std::initializer_list<Tensor> inputs,
               std::function<void()> backward);

// Basic arithmetic. add/mul accept b with the same shape as a, or b holding
// exactly the last dimension of a (broadcast over rows).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor div_scalar(const Tensor& a, double divisor);
Tensor add_scalar(const Tensor& a, double value);
Tensor pow_scalar(const Tensor& a, double exponent);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count);
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count);
Tensor gather_rows(const Tensor& table, std::span<const int> ids);

// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);

struct MomentStats {
  double mean = 0.0;
  double stddev = 0.0;
};
// Population statistics, 1/d normalisation.
MomentStats layer_norm_stats(std::span<const double> x);
MomentStats layer_norm_stats(const Tensor& x);

// (x - mean) / (stddev + eps) over the last axis of x.
Tensor normalize_rows(const Tensor& x, double eps);

// out[i][j] = gamma[i] * normed[j] + shift[i]; all inputs N x d, result N x N x d.
Tensor conditional_grid(const Tensor& gamma, const Tensor& shift,
                        const Tensor& normed);

// Same-padded 2-D cross-correlation. x: H x W x Cin, kernel: k x k x Cin x Cout,
// bias: Cout or undefined.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias);

// x: A x B x C -> B x C, maximum over the first axis.
Tensor max_over_first_axis(const Tensor& x);

// out[r] = sum over (row, weight) in mixture[r] of weight * table[row].
using RowMixture = std::vector<std::vector<std::pair<int, double>>>;
Tensor mix_rows(const Tensor& table, const RowMixture& mixture);

// x W + b for x: M x in, W: in x out, b: out (may be undefined).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Central-difference gradient check. Returns the maximum over the probed
// coordinates of |analytic - numeric| / max(1, |numeric|).
struct Coordinate {
  Tensor tensor;
  std::size_t index = 0;
};
double finite_diff_check(const std::function<Tensor()>& loss_fn,
                         const std::vector<Coordinate>& coords, double eps);
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         Tensor x, double eps);

// "shape: d1 d2 ...\ndata: v1 v2 ...\n"
void dump_tensor(std::ostream& out, const Tensor& t);
Tensor parse_tensor(std::istream& in);

}  // namespace mtner

#endif  // MTNER_TENSOR_H_
