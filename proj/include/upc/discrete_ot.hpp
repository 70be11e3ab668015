#pragma once

#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "upc/costs.hpp"

namespace upc::ot {

struct Histogram {
  std::vector<double> weights;

  Histogram() = default;
  explicit Histogram(std::vector<double> w) : weights(std::move(w)) {}
  static Histogram uniform(std::size_t n, double mass = 1.0);

  std::size_t size() const { return weights.size(); }
  double total_mass() const;
  double operator[](std::size_t i) const { return weights[i]; }
  // Nonnegative, finite, positive total.
  void validate() const;
};

struct CostMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> entries;  // row-major
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;

  CostMatrix() = default;
  CostMatrix(std::size_t r, std::size_t c, std::vector<double> e)
      : rows(r), cols(c), entries(std::move(e)) {}

  double operator()(std::size_t i, std::size_t j) const { return entries[i * cols + j]; }
  double max_abs() const;
  void validate() const;
};

struct Coupling {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> plan;  // row-major
  Histogram row_marginal;    // plan row sums
  Histogram col_marginal;    // plan column sums
  double objective = 0.0;    // <C, plan>
  // Entropic / KL-penalized objective for the scaling solvers; equals
  // `objective` for the exact solvers.
  double regularized_objective = 0.0;
  bool converged = true;
  double residual = 0.0;
  int iterations = 0;
  std::vector<double> dual_trace;  // per-iteration dual value when requested

  double operator()(std::size_t i, std::size_t j) const { return plan[i * cols + j]; }
  double total_mass() const;
};

struct SolverConfig {
  static constexpr double kInf = std::numeric_limits<double>::infinity();

  double epsilon = 1e-2;  // relative to the max-normalized cost
  double rho1 = kInf;     // KL penalty on the row marginal
  double rho2 = kInf;     // KL penalty on the column marginal
  int max_iters = 10000;
  double tol = 1e-6;
  // Geometric epsilon annealing from 1 before the final solve. Without it
  // small epsilon can stall in the slow sublinear phase.
  bool eps_scaling = true;
  bool record_trace = false;

  void validate() const;
};

// Pairwise cloud-level costs: entries[i][j] = cost(kind, X_i, Y_j).
CostMatrix cost_matrix(const costs::CostKind& kind, const std::vector<geo::PointCloud>& X,
                       const std::vector<geo::PointCloud>& Y);

struct Assignment {
  std::vector<std::size_t> col_of_row;
  std::vector<double> row_dual;
  std::vector<double> col_dual;
  double value = 0.0;  // sum of assigned costs
};

// Shortest augmenting path Hungarian method on an n x n row-major matrix.
Assignment hungarian(const std::vector<double>& cost, std::size_t n);
// Optimal assignment cost without tie-breaking (fast path used by EMD).
double assignment_value(const std::vector<double>& cost, std::size_t n);
// Lexicographically smallest permutation among all optimal assignments.
std::vector<std::size_t> lexicographic_optimal_assignment(const std::vector<double>& cost,
                                                          std::size_t n);

// Uniform-marginal exact assignment. objective = min assignment cost / m.
Coupling solve_exact_assignment(const CostMatrix& C);

// Exact transportation simplex (Bland's rule) for m, n <= 8.
Coupling solve_lp_small(const Histogram& a, const Histogram& b, const CostMatrix& C);

// Log-domain balanced Sinkhorn; requires equal total masses.
Coupling sinkhorn(const Histogram& a, const Histogram& b, const CostMatrix& C,
                  const SolverConfig& cfg = {});

// Generalized scaling for KL-relaxed marginals (exponent rho / (rho + eps)).
// rho = +inf on both sides runs the same path as sinkhorn.
Coupling unbalanced_sinkhorn(const Histogram& a, const Histogram& b, const CostMatrix& C,
                             const SolverConfig& cfg = {});

struct RescalingFactors {
  std::vector<double> source;  // row_mass_i / a_i
  std::vector<double> target;  // col_mass_j / b_j
};
RescalingFactors rescaling_factors(const Coupling& coupling, const Histogram& a,
                                   const Histogram& b);

// Fraction of plan mass moved between atoms with different labels.
double cross_class_mass(const Coupling& coupling, const std::vector<int>& source_labels,
                        const std::vector<int>& target_labels);

// CSV with header "row,col,mass,converged" (one line per nonzero entry) and
// "side,index,factor" for rescaling factors.
std::string coupling_to_csv(const Coupling& coupling);
std::string factors_to_csv(const RescalingFactors& factors);
std::string cost_matrix_to_csv(const CostMatrix& C);
CostMatrix cost_matrix_from_csv(const std::string& text);

}  // namespace upc::ot
