#include "upc/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "upc/discrete_ot.hpp"
#include "upc/errors.hpp"

namespace upc::ad {

Tensor::Tensor(std::size_t r, std::size_t c, std::vector<double> values)
    : rows(r), cols(c), data(std::move(values)) {
  require(data.size() == rows * cols, "Tensor: value count does not match shape");
}

Var Tape::constant(Tensor value) { return leaf(std::move(value), false); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

const Tensor& Tape::value(Var v) const { return nodes_[v.id].value; }

double Tape::scalar(Var v) const {
  const Tensor& t = nodes_[v.id].value;
  require(t.size() == 1, "Tape::scalar: value is not 1x1");
  return t.data[0];
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.size() == n.value.size()) return n.grad;
  return Tensor(n.value.rows, n.value.cols);
}

Tensor& Tape::grad_slot(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.rows, n.value.cols);
  return n.grad;
}

Var Tape::push(Tensor value, std::vector<std::size_t> parents, Backward backward) {
  bool needs = false;
  for (std::size_t p : parents) needs = needs || nodes_[p].requires_grad;
  Node n;
  n.value = std::move(value);
  n.requires_grad = needs;
  if (needs) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

void Tape::backward(Var out) {
  if (consumed_) throw ContractError("Tape::backward: tape already consumed");
  consumed_ = true;
  require(out.tape == this, "Tape::backward: variable belongs to another tape");
  require(nodes_[out.id].value.size() == 1, "Tape::backward: output must be 1x1");
  if (!nodes_[out.id].requires_grad) return;
  grad_slot(out.id).data[0] = 1.0;
  for (std::size_t k = out.id + 1; k-- > 0;) {
    Node& n = nodes_[k];
    if (!n.requires_grad || !n.backward || n.grad.size() != n.value.size()) continue;
    n.backward(*this, k);
  }
}

namespace {

Tape& tape_of(Var a, Var b) {
  require(a.tape != nullptr && a.tape == b.tape, "autodiff: operands live on different tapes");
  return *a.tape;
}

bool wants(const Tape& t, Var v) { return t.node_requires_grad(v.id); }

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  require(A.cols == B.rows, "matmul: inner dimensions differ");
  const std::size_t n = A.rows, k = A.cols, m = B.cols;
  Tensor C(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = &C.data[i * m];
    for (std::size_t l = 0; l < k; ++l) {
      const double av = A.data[i * k + l];
      if (av == 0.0) continue;
      const double* brow = &B.data[l * m];
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
  return t.push(std::move(C), {a.id, b.id}, [a, b, n, k, m](Tape& tp, std::size_t self) {
    const Tensor& G = tp.node_grad(self);
    const Tensor& A = tp.node_value(a.id);
    const Tensor& B = tp.node_value(b.id);
    if (wants(tp, a)) {
      Tensor& GA = tp.grad_slot(a.id);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t l = 0; l < k; ++l) {
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += G.data[i * m + j] * B.data[l * m + j];
          GA.data[i * k + l] += s;
        }
      }
    }
    if (wants(tp, b)) {
      Tensor& GB = tp.grad_slot(b.id);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t l = 0; l < k; ++l) {
          const double av = A.data[i * k + l];
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < m; ++j) GB.data[l * m + j] += av * G.data[i * m + j];
        }
      }
    }
  });
}

Var add_bias(Var a, Var bias) {
  Tape& t = tape_of(a, bias);
  const Tensor& A = t.value(a);
  const Tensor& b = t.value(bias);
  require(b.rows == 1 && b.cols == A.cols, "add_bias: bias must be 1 x cols");
  Tensor C = A;
  for (std::size_t i = 0; i < C.rows; ++i) {
    for (std::size_t j = 0; j < C.cols; ++j) C.data[i * C.cols + j] += b.data[j];
  }
  return t.push(std::move(C), {a.id, bias.id}, [a, bias](Tape& tp, std::size_t self) {
    const Tensor& G = tp.node_grad(self);
    if (wants(tp, a)) {
      Tensor& GA = tp.grad_slot(a.id);
      for (std::size_t i = 0; i < G.size(); ++i) GA.data[i] += G.data[i];
    }
    if (wants(tp, bias)) {
      Tensor& GB = tp.grad_slot(bias.id);
      for (std::size_t i = 0; i < G.rows; ++i) {
        for (std::size_t j = 0; j < G.cols; ++j) GB.data[j] += G.data[i * G.cols + j];
      }
    }
  });
}

namespace {

Var add_scaled(Var a, Var b, double sb) {
  Tape& t = tape_of(a, b);
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  require(A.rows == B.rows && A.cols == B.cols, "add/sub: shapes differ");
  Tensor C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C.data[i] += sb * B.data[i];
  return t.push(std::move(C), {a.id, b.id}, [a, b, sb](Tape& tp, std::size_t self) {
    const Tensor& G = tp.node_grad(self);
    if (wants(tp, a)) {
      Tensor& GA = tp.grad_slot(a.id);
      for (std::size_t i = 0; i < G.size(); ++i) GA.data[i] += G.data[i];
    }
    if (wants(tp, b)) {
      Tensor& GB = tp.grad_slot(b.id);
      for (std::size_t i = 0; i < G.size(); ++i) GB.data[i] += sb * G.data[i];
    }
  });
}

// Elementwise op with derivative computed from (input, output).
template <class F, class D>
Var unary(Var a, F f, D dfdx) {
  Tape& t = *a.tape;
  const Tensor& A = t.value(a);
  Tensor C(A.rows, A.cols);
  for (std::size_t i = 0; i < A.size(); ++i) C.data[i] = f(A.data[i]);
  return t.push(std::move(C), {a.id}, [a, dfdx](Tape& tp, std::size_t self) {
    const Tensor& G = tp.node_grad(self);
    const Tensor& X = tp.node_value(a.id);
    const Tensor& Y = tp.node_value(self);
    Tensor& GA = tp.grad_slot(a.id);
    for (std::size_t i = 0; i < G.size(); ++i) GA.data[i] += G.data[i] * dfdx(X.data[i], Y.data[i]);
  });
}

}  // namespace

Var add(Var a, Var b) { return add_scaled(a, b, 1.0); }
Var sub(Var a, Var b) { return add_scaled(a, b, -1.0); }

Var scale(Var a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sqrt(Var a) {
  return unary(
      a,
      [](double x) {
        require(x >= 0.0, "sqrt: negative input");
        return std::sqrt(x);
      },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Var softplus_conjugate(Var a) {
  static const double two_log2 = 2.0 * std::log(2.0);
  return unary(
      a,
      [](double x) {
        // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
        return 2.0 * (std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)))) - two_log2;
      },
      [](double x, double) {
        return x >= 0.0 ? 2.0 / (1.0 + std::exp(-x)) : 2.0 * std::exp(x) / (1.0 + std::exp(x));
      });
}

Var reshape(Var a, std::size_t rows, std::size_t cols) {
  Tape& t = *a.tape;
  const Tensor& A = t.value(a);
  require(rows * cols == A.size(), "reshape: element count differs");
  Tensor C(rows, cols, A.data);
  return t.push(std::move(C), {a.id}, [a](Tape& tp, std::size_t self) {
    const Tensor& G = tp.node_grad(self);
    Tensor& GA = tp.grad_slot(a.id);
    for (std::size_t i = 0; i < G.size(); ++i) GA.data[i] += G.data[i];
  });
}

Var sum(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = t.value(a);
  double s = 0.0;
  for (double x : A.data) s += x;
  return t.push(Tensor(1, 1, s), {a.id}, [a](Tape& tp, std::size_t self) {
    const double g = tp.node_grad(self).data[0];
    Tensor& GA = tp.grad_slot(a.id);
    for (double& x : GA.data) x += g;
  });
}

Var mean(Var a) {
  const std::size_t n = a.tape->value(a).size();
  require(n > 0, "mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

namespace {

// Selects one entry per output slot; the gradient is routed back to it.
Var gather(Var a, Tensor out, std::vector<std::size_t> index) {
  Tape& t = *a.tape;
  return t.push(std::move(out), {a.id}, [a, index = std::move(index)](Tape& tp, std::size_t self) {
    const Tensor& G = tp.node_grad(self);
    Tensor& GA = tp.grad_slot(a.id);
    for (std::size_t k = 0; k < index.size(); ++k) GA.data[index[k]] += G.data[k];
  });
}

}  // namespace

Var max_pool_rows(Var a) {
  const Tensor& A = a.tape->value(a);
  require(A.rows > 0, "max_pool_rows: empty input");
  Tensor out(1, A.cols);
  std::vector<std::size_t> idx(A.cols);
  for (std::size_t j = 0; j < A.cols; ++j) {
    std::size_t best = j;
    for (std::size_t i = 1; i < A.rows; ++i) {
      if (A.data[i * A.cols + j] > A.data[best]) best = i * A.cols + j;
    }
    out.data[j] = A.data[best];
    idx[j] = best;
  }
  return gather(a, std::move(out), std::move(idx));
}

Var row_min(Var a) {
  const Tensor& A = a.tape->value(a);
  require(A.cols > 0, "row_min: empty rows");
  Tensor out(A.rows, 1);
  std::vector<std::size_t> idx(A.rows);
  for (std::size_t i = 0; i < A.rows; ++i) {
    std::size_t best = i * A.cols;
    for (std::size_t j = 1; j < A.cols; ++j) {
      if (A.data[i * A.cols + j] < A.data[best]) best = i * A.cols + j;
    }
    out.data[i] = A.data[best];
    idx[i] = best;
  }
  return gather(a, std::move(out), std::move(idx));
}

Var col_min(Var a) {
  const Tensor& A = a.tape->value(a);
  require(A.rows > 0, "col_min: empty columns");
  Tensor out(1, A.cols);
  std::vector<std::size_t> idx(A.cols);
  for (std::size_t j = 0; j < A.cols; ++j) {
    std::size_t best = j;
    for (std::size_t i = 1; i < A.rows; ++i) {
      if (A.data[i * A.cols + j] < A.data[best]) best = i * A.cols + j;
    }
    out.data[j] = A.data[best];
    idx[j] = best;
  }
  return gather(a, std::move(out), std::move(idx));
}

Var log_sum_exp(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = t.value(a);
  require(A.size() > 0, "log_sum_exp: empty tensor");
  const double mx = *std::max_element(A.data.begin(), A.data.end());
  double s = 0.0;
  for (double x : A.data) s += std::exp(x - mx);
  const double value = mx + std::log(s);
  return t.push(Tensor(1, 1, value), {a.id}, [a, value](Tape& tp, std::size_t self) {
    const double g = tp.node_grad(self).data[0];
    const Tensor& X = tp.node_value(a.id);
    Tensor& GA = tp.grad_slot(a.id);
    for (std::size_t i = 0; i < X.size(); ++i) GA.data[i] += g * std::exp(X.data[i] - value);
  });
}

Var pairwise_sq_dist(Var x, Var y) {
  Tape& t = tape_of(x, y);
  const Tensor& X = t.value(x);
  const Tensor& Y = t.value(y);
  require(X.cols == 3 && Y.cols == 3, "pairwise_sq_dist: inputs must be n x 3");
  const std::size_t n = X.rows, m = Y.rows;
  Tensor D(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    const double* p = &X.data[3 * i];
    for (std::size_t j = 0; j < m; ++j) {
      const double* q = &Y.data[3 * j];
      const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
      D.data[i * m + j] = dx * dx + dy * dy + dz * dz;
    }
  }
  return t.push(std::move(D), {x.id, y.id}, [x, y, n, m](Tape& tp, std::size_t self) {
    const Tensor& G = tp.node_grad(self);
    const Tensor& X = tp.node_value(x.id);
    const Tensor& Y = tp.node_value(y.id);
    const bool gx = wants(tp, x), gy = wants(tp, y);
    Tensor* GX = gx ? &tp.grad_slot(x.id) : nullptr;
    Tensor* GY = gy ? &tp.grad_slot(y.id) : nullptr;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        const double g = G.data[i * m + j];
        if (g == 0.0) continue;
        for (std::size_t c = 0; c < 3; ++c) {
          const double d = 2.0 * g * (X.data[3 * i + c] - Y.data[3 * j + c]);
          if (gx) GX->data[3 * i + c] += d;
          if (gy) GY->data[3 * j + c] -= d;
        }
      }
    }
  });
}

Var assignment_cost(Var x, Var y, bool squared_ground) {
  Tape& t = tape_of(x, y);
  const Tensor& X = t.value(x);
  const Tensor& Y = t.value(y);
  require(X.cols == 3 && Y.cols == 3, "assignment_cost: inputs must be n x 3");
  require(X.rows == Y.rows && X.rows > 0, "assignment_cost: clouds must have equal sizes");
  const std::size_t n = X.rows;
  std::vector<double> c(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 3; ++k) {
        const double d = X.data[3 * i + k] - Y.data[3 * j + k];
        s += d * d;
      }
      c[i * n + j] = squared_ground ? s : std::sqrt(s);
    }
  }
  const ot::Assignment match = ot::hungarian(c, n);
  const double value = match.value / static_cast<double>(n);
  return t.push(Tensor(1, 1, value), {x.id, y.id},
                [x, y, n, squared_ground, perm = match.col_of_row](Tape& tp, std::size_t self) {
                  const double g = tp.node_grad(self).data[0] / static_cast<double>(n);
                  const Tensor& X = tp.node_value(x.id);
                  const Tensor& Y = tp.node_value(y.id);
                  const bool gx = wants(tp, x), gy = wants(tp, y);
                  Tensor* GX = gx ? &tp.grad_slot(x.id) : nullptr;
                  Tensor* GY = gy ? &tp.grad_slot(y.id) : nullptr;
                  for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t j = perm[i];
                    double diff[3], s = 0.0;
                    for (std::size_t k = 0; k < 3; ++k) {
                      diff[k] = X.data[3 * i + k] - Y.data[3 * j + k];
                      s += diff[k] * diff[k];
                    }
                    double w;
                    if (squared_ground) {
                      w = 2.0;
                    } else {
                      const double r = std::sqrt(s);
                      w = r > 0.0 ? 1.0 / r : 0.0;
                    }
                    for (std::size_t k = 0; k < 3; ++k) {
                      if (gx) GX->data[3 * i + k] += g * w * diff[k];
                      if (gy) GY->data[3 * j + k] -= g * w * diff[k];
                    }
                  }
                });
}

}  // namespace upc::ad
