#pragma once

// Minimal reverse-mode differentiation over dense double matrices.
//
// A Tape records every intermediate value together with a closure that
// pushes the incoming gradient to its parents. Values that do not depend on
// any leaf created with `requires_grad` carry no closure, so frozen
// parameters cost nothing in the backward pass.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "textloc/errors.hpp"

namespace textloc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

namespace ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  bool valid() const { return tape != nullptr; }
};

class Tape {
 public:
  using Backprop = std::function<void(Tape&, const Matrix& grad)>;

  Var leaf(Matrix value, bool requires_grad = true) {
    return push(std::move(value), requires_grad, nullptr);
  }

  Var constant(Matrix value) { return push(std::move(value), false, nullptr); }

  // Records a derived value. `backprop` is dropped when no parent needs a
  // gradient.
  Var derived(Matrix value, std::initializer_list<Var> parents, Backprop backprop) {
    return derived(std::move(value), std::vector<Var>(parents), std::move(backprop));
  }

  Var derived(Matrix value, const std::vector<Var>& parents, Backprop backprop) {
    bool needs = false;
    for (const Var& p : parents) needs = needs || nodes_.at(p.id).needs_grad;
    return push(std::move(value), needs, needs ? std::move(backprop) : nullptr);
  }

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }

  // Gradient accumulated into `v` by the last backward(); empty when none
  // reached it.
  const Matrix& grad(Var v) const { return nodes_.at(v.id).grad; }

  void accumulate(Var v, const Matrix& g) {
    Node& n = nodes_.at(v.id);
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  // Seeds d(output)/d(output) = 1 for a 1x1 output and runs the tape backwards.
  void backward(Var output) {
    if (value(output).size() != 1) {
      throw ArgumentError("backward() requires a scalar output");
    }
    for (Node& n : nodes_) n.grad.resize(0, 0);
    nodes_.at(output.id).grad = Matrix::Ones(1, 1);
    for (std::size_t i = output.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backprop || n.grad.size() == 0) continue;
      const Matrix g = n.grad;
      n.backprop(*this, g);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    Backprop backprop;
  };

  Var push(Matrix value, bool needs_grad, Backprop backprop) {
    nodes_.push_back(Node{std::move(value), Matrix(), needs_grad, std::move(backprop)});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->value(*this); }

namespace detail {

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ArgumentError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                        std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                        std::to_string(b.cols()) + ")");
  }
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  if (a.value().cols() != b.value().rows()) throw ArgumentError("matmul: inner dimension mismatch");
  Matrix out = a.value() * b.value();
  return a.tape->derived(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.needs_grad(a)) t.accumulate(a, g * t.value(b).transpose());
    if (t.needs_grad(b)) t.accumulate(b, t.value(a).transpose() * g);
  });
}

// a * b^T
inline Var matmul_nt(Var a, Var b) {
  if (a.value().cols() != b.value().cols()) throw ArgumentError("matmul_nt: inner dimension mismatch");
  Matrix out = a.value() * b.value().transpose();
  return a.tape->derived(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.needs_grad(a)) t.accumulate(a, g * t.value(b));
    if (t.needs_grad(b)) t.accumulate(b, g.transpose() * t.value(a));
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "add");
  Matrix out = a.value() + b.value();
  return a.tape->derived(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

// Adds a 1 x n row to every row of a.
inline Var add_row(Var a, Var row) {
  if (row.value().rows() != 1 || row.value().cols() != a.value().cols()) {
    throw ArgumentError("add_row: row must be 1 x cols(a)");
  }
  Matrix out = a.value().rowwise() + row.value().row(0);
  return a.tape->derived(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    if (t.needs_grad(row)) t.accumulate(row, g.colwise().sum());
  });
}

inline Var scale(Var a, double s) {
  Matrix out = a.value() * s;
  return a.tape->derived(std::move(out), {a}, [a, s](Tape& t, const Matrix& g) { t.accumulate(a, g * s); });
}

inline Var silu(Var a) {
  const Matrix& x = a.value();
  Matrix sig = (1.0 + (-x.array()).exp()).inverse().matrix();
  Matrix out = (x.array() * sig.array()).matrix();
  return a.tape->derived(std::move(out), {a}, [a, sig](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(a);
    Matrix d = (sig.array() * (1.0 + x.array() * (1.0 - sig.array()))).matrix();
    t.accumulate(a, (g.array() * d.array()).matrix());
  });
}

// Row-wise numerically stable softmax.
inline Matrix softmax_rows_value(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

inline Var softmax_rows(Var a) {
  Matrix out = softmax_rows_value(a.value());
  const std::size_t self = a.tape->size();
  return a.tape->derived(std::move(out), {a}, [a, self](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(Var{&t, self});
    Eigen::VectorXd dots = (g.array() * y.array()).rowwise().sum().matrix();
    Matrix d = (y.array() * (g.colwise() - dots).array()).matrix();
    t.accumulate(a, d);
  });
}

inline Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.value().cols()) throw ArgumentError("slice_cols: out of range");
  Matrix out = a.value().middleCols(start, count);
  return a.tape->derived(std::move(out), {a}, [a, start, count](Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(t.value(a).rows(), t.value(a).cols());
    full.middleCols(start, count) = g;
    t.accumulate(a, full);
  });
}

inline Var hcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ArgumentError("hcat: no inputs");
  const Eigen::Index rows = parts.front().value().rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    if (p.value().rows() != rows) throw ArgumentError("hcat: row mismatch");
    cols += p.value().cols();
  }
  Matrix out(rows, cols);
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    out.middleCols(c, p.value().cols()) = p.value();
    c += p.value().cols();
  }
  return parts.front().tape->derived(std::move(out), parts, [parts](Tape& t, const Matrix& g) {
    Eigen::Index c = 0;
    for (const Var& p : parts) {
      const Eigen::Index n = t.value(p).cols();
      if (t.needs_grad(p)) t.accumulate(p, g.middleCols(c, n));
      c += n;
    }
  });
}

// Row gather: out.row(i) = a.row(index[i]). Used for embedding lookup.
inline Var gather_rows(Var a, std::vector<int> index) {
  Matrix out(static_cast<Eigen::Index>(index.size()), a.value().cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= a.value().rows()) throw ArgumentError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(index[i]);
  }
  return a.tape->derived(std::move(out), {a}, [a, index = std::move(index)](Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(t.value(a).rows(), t.value(a).cols());
    for (std::size_t i = 0; i < index.size(); ++i) full.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(a, full);
  });
}

// Mean over rows -> 1 x cols.
inline Var mean_rows(Var a) {
  const double n = static_cast<double>(a.value().rows());
  Matrix out = a.value().colwise().mean();
  return a.tape->derived(std::move(out), {a}, [a, n](Tape& t, const Matrix& g) {
    t.accumulate(a, Matrix(g.replicate(t.value(a).rows(), 1) / n));
  });
}

// Rows of `a` index a row-major height x width grid. Averages factor x factor
// blocks.
inline Var avg_pool(Var a, int height, int width, int factor) {
  if (factor <= 0 || height % factor != 0 || width % factor != 0 || a.value().rows() != height * width) {
    throw ArgumentError("avg_pool: grid does not divide by factor");
  }
  const int oh = height / factor;
  const int ow = width / factor;
  const double inv = 1.0 / (factor * factor);
  const Matrix& x = a.value();
  Matrix out = Matrix::Zero(oh * ow, x.cols());
  for (int y = 0; y < height; ++y) {
    for (int xx = 0; xx < width; ++xx) out.row((y / factor) * ow + xx / factor) += x.row(y * width + xx);
  }
  out *= inv;
  return a.tape->derived(std::move(out), {a}, [a, height, width, factor, ow, inv](Tape& t, const Matrix& g) {
    Matrix d(height * width, g.cols());
    for (int y = 0; y < height; ++y) {
      for (int xx = 0; xx < width; ++xx) d.row(y * width + xx) = g.row((y / factor) * ow + xx / factor) * inv;
    }
    t.accumulate(a, d);
  });
}

// Nearest-neighbour upsampling of a row-major height x width grid.
inline Var upsample_nearest(Var a, int height, int width, int factor) {
  if (a.value().rows() != height * width) throw ArgumentError("upsample_nearest: grid mismatch");
  const int oh = height * factor;
  const int ow = width * factor;
  const Matrix& x = a.value();
  Matrix out(oh * ow, x.cols());
  for (int y = 0; y < oh; ++y) {
    for (int xx = 0; xx < ow; ++xx) out.row(y * ow + xx) = x.row((y / factor) * width + xx / factor);
  }
  return a.tape->derived(std::move(out), {a}, [a, height, width, factor, oh, ow](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(height * width, g.cols());
    for (int y = 0; y < oh; ++y) {
      for (int xx = 0; xx < ow; ++xx) d.row((y / factor) * width + xx / factor) += g.row(y * ow + xx);
    }
    t.accumulate(a, d);
  });
}

// Mean squared error against a constant target -> 1x1.
inline Var mse(Var a, const Matrix& target) {
  detail::require_same_shape(a.value(), target, "mse");
  const double n = static_cast<double>(target.size());
  Matrix diff = a.value() - target;
  Matrix out(1, 1);
  out(0, 0) = diff.squaredNorm() / n;
  return a.tape->derived(std::move(out), {a}, [a, diff, n](Tape& t, const Matrix& g) {
    t.accumulate(a, diff * (2.0 * g(0, 0) / n));
  });
}

// sum_i weights[i] * scalars[i] -> 1x1.
inline Var weighted_sum(const std::vector<Var>& scalars, const std::vector<double>& weights) {
  if (scalars.empty() || scalars.size() != weights.size()) throw ArgumentError("weighted_sum: size mismatch");
  Matrix out = Matrix::Zero(1, 1);
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i].value().size() != 1) throw ArgumentError("weighted_sum: inputs must be scalars");
    out(0, 0) += weights[i] * scalars[i].value()(0, 0);
  }
  return scalars.front().tape->derived(std::move(out), scalars, [scalars, weights](Tape& t, const Matrix& g) {
    for (std::size_t i = 0; i < scalars.size(); ++i) t.accumulate(scalars[i], g * weights[i]);
  });
}

inline Var mean_of(const std::vector<Var>& scalars) {
  return weighted_sum(scalars, std::vector<double>(scalars.size(), 1.0 / static_cast<double>(scalars.size())));
}

}  // namespace ad
}  // namespace textloc
