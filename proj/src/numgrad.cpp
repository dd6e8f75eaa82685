#include "mlcil/numgrad.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>

#include "mlcil/errors.hpp"

namespace mlcil::numgrad {

namespace {

std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

void require_rank(const Var& v, std::size_t rank, const char* op) {
  if (v.value().rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got " +
                         shape_string(v.shape()));
  }
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

Graph& common_graph(const Var& a, const Var& b) {
  if (&a.graph() != &b.graph()) {
    throw ContractError("operands belong to different graphs");
  }
  return a.graph();
}

template <typename Fwd, typename Bwd>
Var unary_elementwise(Var a, Fwd fwd, Bwd bwd) {
  Tensor out(a.shape());
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  return a.graph().record(
      std::move(out), {a},
      [bwd](const Tensor& y, const Tensor& gy, std::span<const Tensor* const> in,
            std::span<Tensor* const> gin) {
        if (!gin[0]) return;
        const Tensor& x = *in[0];
        Tensor& gx = *gin[0];
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] += gy[i] * bwd(x[i], y[i]);
      });
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------- Tensor

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(element_count(shape_), fill) {
  for (std::size_t d : shape_) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive");
  }
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (std::size_t d : shape_) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive");
  }
  if (element_count(shape_) != data_.size()) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_string(shape_));
  }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::vector<double> values) {
  return Tensor(Shape{rows, cols}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<double> flat;
  std::size_t cols = rows.size() ? rows.begin()->size() : 0;
  for (const auto& r : rows) {
    if (r.size() != cols) throw DimensionError("ragged matrix literal");
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return matrix(rows.size(), cols, std::move(flat));
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw DimensionError("rows() on " + shape_string(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw DimensionError("cols() on " + shape_string(shape_));
  return shape_[1];
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw DimensionError("item() on non-scalar " + shape_string(shape_));
  }
  return data_[0];
}

std::span<const double> Tensor::row(std::size_t r) const {
  const std::size_t c = cols();
  return std::span<const double>(data_).subspan(r * c, c);
}

std::span<double> Tensor::row(std::size_t r) {
  const std::size_t c = cols();
  return std::span<double>(data_).subspan(r * c, c);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

std::uint64_t Tensor::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (std::size_t d : shape_) {
    const std::uint64_t d64 = d;
    mix(&d64, sizeof d64);
  }
  mix(data_.data(), data_.size() * sizeof(double));
  return h;
}

// ---------------------------------------------------------------- Var / Graph

const Tensor& Var::value() const { return graph_->value(*this); }
bool Var::requires_grad() const { return graph_->requires_grad(*this); }

Var Graph::add_node(Node node) {
  if (backward_done_) {
    throw ContractError("graph already differentiated; build a new graph");
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Graph::check_owned(Var v) const {
  if (v.graph_ != this || v.id_ >= nodes_.size()) {
    throw ContractError("variable does not belong to this graph");
  }
}

Var Graph::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return add_node(std::move(n));
}

Var Graph::parameter(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return add_node(std::move(n));
}

Var Graph::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    check_owned(in);
    n.inputs.push_back(in.id_);
    n.requires_grad = n.requires_grad || nodes_[in.id_].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return add_node(std::move(n));
}

void Graph::backward(Var root) {
  check_owned(root);
  if (backward_done_) {
    throw ContractError("backward called twice on the same graph");
  }
  if (nodes_[root.id_].value.size() != 1) {
    throw ContractError("backward root must be scalar, got " +
                        shape_string(nodes_[root.id_].value.shape()));
  }
  backward_done_ = true;
  for (Node& n : nodes_) n.grad = Tensor(n.value.shape(), 0.0);
  nodes_[root.id_].grad[0] = 1.0;

  std::vector<const Tensor*> in_values;
  std::vector<Tensor*> in_grads;
  for (std::size_t i = root.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward) continue;
    in_values.clear();
    in_grads.clear();
    for (std::size_t id : n.inputs) {
      in_values.push_back(&nodes_[id].value);
      in_grads.push_back(nodes_[id].requires_grad ? &nodes_[id].grad : nullptr);
    }
    n.backward(n.value, n.grad, in_values, in_grads);
  }
}

const Tensor& Graph::value(Var v) const {
  check_owned(v);
  return nodes_[v.id_].value;
}

const Tensor& Graph::grad(Var v) const {
  check_owned(v);
  if (!backward_done_) throw ContractError("grad requested before backward");
  return nodes_[v.id_].grad;
}

bool Graph::requires_grad(Var v) const {
  check_owned(v);
  return nodes_[v.id_].requires_grad;
}

// ---------------------------------------------------------------- matrix ops

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * b[p * n + j];
    }
  }
  return out;
}

Var matmul(Var a, Var b) {
  Graph& g = common_graph(a, b);
  Tensor out = matmul(a.value(), b.value());
  return g.record(std::move(out), {a, b},
                  [](const Tensor&, const Tensor& gy, std::span<const Tensor* const> in,
                     std::span<Tensor* const> gin) {
                    const Tensor& A = *in[0];
                    const Tensor& B = *in[1];
                    const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
                    if (gin[0]) {
                      Tensor& gA = *gin[0];  // gy * B^T
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t p = 0; p < k; ++p) {
                          double s = 0.0;
                          for (std::size_t j = 0; j < n; ++j) s += gy[i * n + j] * B[p * n + j];
                          gA[i * k + p] += s;
                        }
                    }
                    if (gin[1]) {
                      Tensor& gB = *gin[1];  // A^T * gy
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t p = 0; p < k; ++p) {
                          const double aip = A[i * k + p];
                          for (std::size_t j = 0; j < n; ++j) gB[p * n + j] += aip * gy[i * n + j];
                        }
                    }
                  });
}

Var matvec(Var a, Var x) {
  require_rank(a, 2, "matvec");
  require_rank(x, 1, "matvec");
  const std::size_t k = x.shape()[0];
  Var col = matmul(a, reshape(x, Shape{k, 1}));
  return reshape(col, Shape{a.shape()[0]});
}

Var transpose(Var a) {
  require_rank(a, 2, "transpose");
  const Tensor& x = a.value();
  const std::size_t m = x.rows(), n = x.cols();
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return a.graph().record(std::move(out), {a},
                          [m, n](const Tensor&, const Tensor& gy,
                                 std::span<const Tensor* const>,
                                 std::span<Tensor* const> gin) {
                            if (!gin[0]) return;
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < n; ++j)
                                (*gin[0])[i * n + j] += gy[j * m + i];
                          });
}

Tensor softmax_rows(const Tensor& a) {
  if (a.rank() != 2) {
    throw DimensionError("softmax_rows: expected matrix, got " +
                         shape_string(a.shape()));
  }
  Tensor out(a.shape());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto in = a.row(r);
    auto o = out.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    for (double& v : o) v /= z;
  }
  return out;
}

Var softmax_rows(Var a) {
  require_rank(a, 2, "softmax_rows");
  if (!a.value().all_finite()) {
    throw NumericError("softmax_rows: non-finite input");
  }
  Tensor out = softmax_rows(a.value());
  // dx = y * (dy - <dy, y>) per row.
  return a.graph().record(std::move(out), {a},
                          [](const Tensor& y, const Tensor& gy,
                             std::span<const Tensor* const>,
                             std::span<Tensor* const> gin) {
                            if (!gin[0]) return;
                            Tensor& gx = *gin[0];
                            const std::size_t n = y.cols();
                            for (std::size_t r = 0; r < y.rows(); ++r) {
                              double s = 0.0;
                              for (std::size_t j = 0; j < n; ++j) s += gy[r * n + j] * y[r * n + j];
                              for (std::size_t j = 0; j < n; ++j)
                                gx[r * n + j] += y[r * n + j] * (gy[r * n + j] - s);
                            }
                          });
}

Var mean_rows(Var a) {
  require_rank(a, 2, "mean_rows");
  const Tensor& x = a.value();
  const std::size_t m = x.rows(), n = x.cols();
  Tensor out(Shape{n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += x[i * n + j];
  for (std::size_t j = 0; j < n; ++j) out[j] /= static_cast<double>(m);
  return a.graph().record(std::move(out), {a},
                          [m, n](const Tensor&, const Tensor& gy,
                                 std::span<const Tensor* const>,
                                 std::span<Tensor* const> gin) {
                            if (!gin[0]) return;
                            const double w = 1.0 / static_cast<double>(m);
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < n; ++j)
                                (*gin[0])[i * n + j] += gy[j] * w;
                          });
}

Var sum_cols(Var a) {
  require_rank(a, 2, "sum_cols");
  const Tensor& x = a.value();
  const std::size_t m = x.rows(), n = x.cols();
  Tensor out(Shape{m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += x[i * n + j];
  return a.graph().record(std::move(out), {a},
                          [m, n](const Tensor&, const Tensor& gy,
                                 std::span<const Tensor* const>,
                                 std::span<Tensor* const> gin) {
                            if (!gin[0]) return;
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < n; ++j)
                                (*gin[0])[i * n + j] += gy[i];
                          });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Graph& g = parts.front().graph();
  const Shape& first = parts.front().shape();
  const std::size_t n = first.empty() ? 1 : first.back();
  std::size_t total_rows = 0;
  std::vector<std::size_t> row_counts;
  std::vector<double> data;
  for (const Var& p : parts) {
    if (&p.graph() != &g) throw ContractError("concat_rows: mixed graphs");
    const Shape& s = p.shape();
    std::size_t rows = 0;
    if (s.size() == 1 && s[0] == n) {
      rows = 1;
    } else if (s.size() == 2 && s[1] == n) {
      rows = s[0];
    } else {
      throw DimensionError("concat_rows: incompatible part " + shape_string(s));
    }
    row_counts.push_back(rows);
    total_rows += rows;
    auto d = p.value().data();
    data.insert(data.end(), d.begin(), d.end());
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return g.record(Tensor(Shape{total_rows, n}, std::move(data)), std::move(inputs),
                  [](const Tensor&, const Tensor& gy, std::span<const Tensor* const> in,
                     std::span<Tensor* const> gin) {
                    std::size_t offset = 0;
                    for (std::size_t k = 0; k < in.size(); ++k) {
                      const std::size_t len = in[k]->size();
                      if (gin[k]) {
                        for (std::size_t i = 0; i < len; ++i) (*gin[k])[i] += gy[offset + i];
                      }
                      offset += len;
                    }
                  });
}

Var reshape(Var a, Shape shape) {
  if (element_count(shape) != a.value().size()) {
    throw DimensionError("reshape: " + shape_string(a.shape()) + " -> " +
                         shape_string(shape));
  }
  auto d = a.value().data();
  Tensor out(std::move(shape), std::vector<double>(d.begin(), d.end()));
  return a.graph().record(std::move(out), {a},
                          [](const Tensor&, const Tensor& gy,
                             std::span<const Tensor* const>,
                             std::span<Tensor* const> gin) {
                            if (!gin[0]) return;
                            for (std::size_t i = 0; i < gy.size(); ++i) (*gin[0])[i] += gy[i];
                          });
}

// ---------------------------------------------------------------- elementwise

Var add(Var a, Var b) {
  Graph& g = common_graph(a, b);
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return g.record(std::move(out), {a, b},
                  [](const Tensor&, const Tensor& gy, std::span<const Tensor* const>,
                     std::span<Tensor* const> gin) {
                    for (Tensor* gx : gin) {
                      if (!gx) continue;
                      for (std::size_t i = 0; i < gy.size(); ++i) (*gx)[i] += gy[i];
                    }
                  });
}

Var sub(Var a, Var b) {
  Graph& g = common_graph(a, b);
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return g.record(std::move(out), {a, b},
                  [](const Tensor&, const Tensor& gy, std::span<const Tensor* const>,
                     std::span<Tensor* const> gin) {
                    if (gin[0])
                      for (std::size_t i = 0; i < gy.size(); ++i) (*gin[0])[i] += gy[i];
                    if (gin[1])
                      for (std::size_t i = 0; i < gy.size(); ++i) (*gin[1])[i] -= gy[i];
                  });
}

Var mul(Var a, Var b) {
  Graph& g = common_graph(a, b);
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return g.record(std::move(out), {a, b},
                  [](const Tensor&, const Tensor& gy, std::span<const Tensor* const> in,
                     std::span<Tensor* const> gin) {
                    if (gin[0])
                      for (std::size_t i = 0; i < gy.size(); ++i) (*gin[0])[i] += gy[i] * (*in[1])[i];
                    if (gin[1])
                      for (std::size_t i = 0; i < gy.size(); ++i) (*gin[1])[i] += gy[i] * (*in[0])[i];
                  });
}

Var scale(Var a, double factor) {
  return unary_elementwise(
      a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Var add_scalar(Var a, double offset) {
  return unary_elementwise(
      a, [offset](double x) { return x + offset; },
      [](double, double) { return 1.0; });
}

Var sigmoid(Var a) {
  return unary_elementwise(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var log(Var a) {
  for (double x : a.value().data()) {
    if (!(x > 0.0)) throw ContractError("log of non-positive value");
  }
  return unary_elementwise(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Var pow_scalar(Var a, double exponent) {
  if (exponent == 0.0) {
    return unary_elementwise(
        a, [](double) { return 1.0; }, [](double, double) { return 0.0; });
  }
  return unary_elementwise(
      a, [exponent](double x) { return std::pow(x, exponent); },
      [exponent](double x, double) {
        return exponent * std::pow(x, exponent - 1.0);
      });
}

Var clamp(Var a, double lo, double hi) {
  return unary_elementwise(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------- reductions

Var sum(Var a) {
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  return a.graph().record(Tensor::scalar(s), {a},
                          [](const Tensor&, const Tensor& gy,
                             std::span<const Tensor* const>,
                             std::span<Tensor* const> gin) {
                            if (!gin[0]) return;
                            for (double& v : gin[0]->data()) v += gy[0];
                          });
}

Var mean(Var a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

double dot(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw DimensionError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
  return s;
}

double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double cosine(std::span<const double> u, std::span<const double> v) {
  const double nu = norm(u), nv = norm(v);
  if (nu == 0.0 || nv == 0.0) throw DegenerateVectorError("cosine of zero vector");
  return dot(u, v) / (nu * nv);
}

Var dot(Var u, Var v) {
  require_rank(u, 1, "dot");
  require_same_shape(u, v, "dot");
  return sum(mul(u, v));
}

Var l2_normalize(Var v) {
  require_rank(v, 1, "l2_normalize");
  const Tensor& x = v.value();
  const double n = norm(x.data());
  if (n == 0.0) throw DegenerateVectorError("l2_normalize of zero vector");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / n;
  // dx = (dy - y <dy, y>) / |x|
  return v.graph().record(std::move(out), {v},
                          [n](const Tensor& y, const Tensor& gy,
                              std::span<const Tensor* const>,
                              std::span<Tensor* const> gin) {
                            if (!gin[0]) return;
                            const double s = dot(gy.data(), y.data());
                            for (std::size_t i = 0; i < y.size(); ++i)
                              (*gin[0])[i] += (gy[i] - y[i] * s) / n;
                          });
}

Var cosine(Var u, Var v) {
  require_rank(u, 1, "cosine");
  require_same_shape(u, v, "cosine");
  if (norm(u.value().data()) == 0.0 || norm(v.value().data()) == 0.0) {
    throw DegenerateVectorError("cosine of zero vector");
  }
  return dot(l2_normalize(u), l2_normalize(v));
}

// ---------------------------------------------------------------- checker

double finite_diff_check(const ScalarFn& f, const std::vector<Tensor>& inputs,
                         double h) {
  std::vector<Tensor> analytic;
  {
    Graph g;
    std::vector<Var> vars;
    for (const Tensor& t : inputs) vars.push_back(g.parameter(t));
    Var out = f(g, vars);
    g.backward(out);
    for (const Var& v : vars) analytic.push_back(g.grad(v));
  }

  auto evaluate = [&f](const std::vector<Tensor>& xs) {
    Graph g;
    std::vector<Var> vars;
    for (const Tensor& t : xs) vars.push_back(g.constant(t));
    return f(g, vars).value().item();
  };

  double worst = 0.0;
  std::vector<Tensor> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double x0 = inputs[k][i];
      probe[k][i] = x0 + h;
      const double up = evaluate(probe);
      probe[k][i] = x0 - h;
      const double down = evaluate(probe);
      probe[k][i] = x0;
      const double numeric = (up - down) / (2.0 * h);
      const double err =
          std::abs(analytic[k][i] - numeric) / std::max(1e-8, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

double finite_diff_check(const std::function<Var(Graph&, Var)>& f,
                         const Tensor& x, double h) {
  return finite_diff_check(
      [&f](Graph& g, std::span<const Var> vars) { return f(g, vars[0]); },
      std::vector<Tensor>{x}, h);
}

}  // namespace mlcil::numgrad
