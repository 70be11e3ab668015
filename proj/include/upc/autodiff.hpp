#pragma once

#include <cstddef>
#include <functional>
#include <vector>

namespace upc::ad {

// Dense row-major matrix. Every quantity on the tape is 2-D; scalars are 1x1
// and point clouds are n x 3.
struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Tensor(std::size_t r, std::size_t c, std::vector<double> values);

  std::vector<std::size_t> shape() const { return {rows, cols}; }
  std::size_t size() const { return data.size(); }
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so a reverse
// sweep is a valid topological order. A tape may be differentiated once.
class Tape {
 public:
  Var constant(Tensor value);
  Var leaf(Tensor value, bool requires_grad = true);

  const Tensor& value(Var v) const;
  double scalar(Var v) const;
  // Accumulated gradient of the last backward pass; zeros for untouched nodes.
  Tensor grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(out)/d(out) = 1 (out must be 1x1) and sweeps backwards.
  // A second call throws ContractError.
  void backward(Var out);

  // Used by op implementations.
  using Backward = std::function<void(Tape&, std::size_t self)>;
  Var push(Tensor value, std::vector<std::size_t> parents, Backward backward);
  Tensor& grad_slot(std::size_t id);
  const Tensor& node_value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& node_grad(std::size_t id) const { return nodes_[id].grad; }
  bool node_requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Linear algebra and elementwise ops.
Var matmul(Var a, Var b);
Var add_bias(Var a, Var bias);  // bias is 1 x cols, broadcast over rows
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double s);
Var relu(Var a);
Var square(Var a);
// Elementwise sqrt with subgradient 0 at 0.
Var sqrt(Var a);
// 2 log(1 + e^x) - 2 log 2, elementwise: zero and unit slope at 0.
Var softplus_conjugate(Var a);
Var reshape(Var a, std::size_t rows, std::size_t cols);

// Reductions.
Var sum(Var a);
Var mean(Var a);
// Column-wise max over rows -> 1 x cols. Ties go to the lowest row index,
// which is also the row that receives the gradient.
Var max_pool_rows(Var a);
// Minimum of each row -> rows x 1 and of each column -> 1 x cols; ties go to
// the lowest index.
Var row_min(Var a);
Var col_min(Var a);
// log sum exp over all entries -> 1 x 1, evaluated with max subtraction.
Var log_sum_exp(Var a);

// |x_i - y_j|^2 for x: n x 3, y: m x 3 -> n x m.
Var pairwise_sq_dist(Var x, Var y);
// Optimal one-to-one matching cost (mean over points) with Euclidean or
// squared Euclidean ground cost; the gradient holds the matching fixed.
Var assignment_cost(Var x, Var y, bool squared_ground);

}  // namespace upc::ad
