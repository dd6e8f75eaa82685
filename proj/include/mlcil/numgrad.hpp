#pragma once

// Dense 64-bit tensors and a tape-based reverse-mode differentiator covering
// the handful of ops the prompt model and its losses need.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mlcil::numgrad {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

/// Row-major dense array. Rank 0 (empty shape) is a scalar.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double item() const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<const double> row(std::size_t r) const;
  std::span<double> row(std::size_t r);

  bool all_finite() const;
  void fill(double value);

  /// FNV-1a over the raw bytes of shape and data; detects any mutation.
  std::uint64_t checksum() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

class Graph;

/// Handle to a node recorded on a Graph.
class Var {
 public:
  Var() = default;

  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Records operations in execution order, which is already topological.
/// backward() may run once per graph; build a new graph for a new forward.
class Graph {
 public:
  /// Accumulates into input grads. `inputs` and `input_grads` are parallel to
  /// the node's input list; an input_grads entry is null when that input does
  /// not require a gradient.
  using BackwardFn = std::function<void(
      const Tensor& output, const Tensor& output_grad,
      std::span<const Tensor* const> inputs, std::span<Tensor* const> input_grads)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  Var parameter(Tensor value);

  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  void backward(Var root);

  const Tensor& value(Var v) const;
  /// Gradient of the last backward root wrt v; zeros if v got no gradient.
  const Tensor& grad(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  Var add_node(Node node);
  void check_owned(Var v) const;

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// Matrix ops.
Var matmul(Var a, Var b);
Var matvec(Var a, Var x);
Var transpose(Var a);
Var softmax_rows(Var a);
Var mean_rows(Var a);
Var sum_cols(Var a);
Var concat_rows(std::span<const Var> parts);
Var reshape(Var a, Shape shape);

// Elementwise ops (operands of equal shape).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
Var sigmoid(Var a);
Var log(Var a);
Var pow_scalar(Var a, double exponent);
Var clamp(Var a, double lo, double hi);

// Reductions and vector ops.
Var sum(Var a);
Var mean(Var a);
Var dot(Var u, Var v);
Var l2_normalize(Var v);
Var cosine(Var u, Var v);

// Plain (untracked) helpers.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_rows(const Tensor& a);
double dot(std::span<const double> u, std::span<const double> v);
double norm(std::span<const double> v);
double cosine(std::span<const double> u, std::span<const double> v);

/// Max over coordinates of |analytic - central difference| /
/// max(1e-8, |central difference|). `f` must rebuild the same function on
/// every call; inputs are handed to it as graph parameters.
using ScalarFn = std::function<Var(Graph&, std::span<const Var>)>;
double finite_diff_check(const ScalarFn& f, const std::vector<Tensor>& inputs,
                         double h = 1e-5);
double finite_diff_check(const std::function<Var(Graph&, Var)>& f,
                         const Tensor& x, double h = 1e-5);

}  // namespace mlcil::numgrad
