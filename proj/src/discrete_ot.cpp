#include "upc/discrete_ot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <sstream>

#include "upc/errors.hpp"

namespace upc::ot {

Histogram Histogram::uniform(std::size_t n, double mass) {
  require(n > 0, "Histogram::uniform: n must be positive");
  return Histogram(std::vector<double>(n, mass / static_cast<double>(n)));
}

double Histogram::total_mass() const {
  double s = 0.0;
  for (double w : weights) s += w;
  return s;
}

void Histogram::validate() const {
  require(!weights.empty(), "histogram is empty");
  for (double w : weights) {
    require(std::isfinite(w) && w >= 0.0, "histogram weights must be finite and nonnegative");
  }
  require(total_mass() > 0.0, "histogram total mass must be positive");
}

double CostMatrix::max_abs() const {
  double m = 0.0;
  for (double c : entries) m = std::max(m, std::abs(c));
  return m;
}

void CostMatrix::validate() const {
  require(rows > 0 && cols > 0, "cost matrix is empty");
  require(entries.size() == rows * cols, "cost matrix entry count does not match its shape");
  for (double c : entries) require(std::isfinite(c), "cost matrix has a non-finite entry");
}

double Coupling::total_mass() const {
  double s = 0.0;
  for (double p : plan) s += p;
  return s;
}

void SolverConfig::validate() const {
  if (!(epsilon > 0.0)) throw ConfigError("solver: epsilon must be positive");
  if (!(rho1 > 0.0) || !(rho2 > 0.0)) throw ConfigError("solver: rho must be positive");
  if (!(tol > 0.0)) throw ConfigError("solver: tol must be positive");
  if (max_iters < 1) throw ConfigError("solver: max_iters must be >= 1");
}

CostMatrix cost_matrix(const costs::CostKind& kind, const std::vector<geo::PointCloud>& X,
                       const std::vector<geo::PointCloud>& Y) {
  require(!X.empty() && !Y.empty(), "cost_matrix: empty pool");
  CostMatrix C(X.size(), Y.size(), std::vector<double>(X.size() * Y.size()));
  for (std::size_t i = 0; i < X.size(); ++i) {
    for (std::size_t j = 0; j < Y.size(); ++j) {
      const std::string where = " at (" + std::to_string(i) + ", " + std::to_string(j) + ")";
      try {
        C.entries[i * C.cols + j] = costs::cost(kind, X[i], Y[j]);
      } catch (const ContractError& e) {
        throw ContractError(e.what() + where);
      } catch (const NumericalError& e) {
        throw NumericalError(e.what() + where);
      } catch (const ConfigError& e) {
        throw ConfigError(e.what() + where);
      }
    }
  }
  return C;
}

// ---------------------------------------------------------------------------
// Assignment

Assignment hungarian(const std::vector<double>& cost, std::size_t n) {
  require(n > 0 && cost.size() == n * n, "hungarian: cost must be n x n");
  constexpr double kInf = std::numeric_limits<double>::infinity();
  // 1-based potentials/matching; column 0 is a virtual root.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  Assignment a;
  a.col_of_row.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) a.col_of_row[p[j] - 1] = j - 1;
  a.row_dual.assign(u.begin() + 1, u.end());
  a.col_dual.assign(v.begin() + 1, v.end());
  for (std::size_t i = 0; i < n; ++i) a.value += cost[i * n + a.col_of_row[i]];
  return a;
}

double assignment_value(const std::vector<double>& cost, std::size_t n) {
  return hungarian(cost, n).value;
}

std::vector<std::size_t> lexicographic_optimal_assignment(const std::vector<double>& cost,
                                                          std::size_t n) {
  const Assignment opt = hungarian(cost, n);
  double scale = 1.0;
  for (double c : cost) scale = std::max(scale, std::abs(c));
  const double tol = 1e-11 * scale * static_cast<double>(n);
  // Every perfect matching on zero-reduced-cost edges of an optimal dual is
  // optimal, so the search stays inside that subgraph.
  auto tight = [&](std::size_t i, std::size_t j) {
    return cost[i * n + j] - opt.row_dual[i] - opt.col_dual[j] <= tol;
  };
  std::vector<std::size_t> col_of = opt.col_of_row;
  std::vector<std::size_t> row_of(n);
  for (std::size_t i = 0; i < n; ++i) row_of[col_of[i]] = i;

  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < col_of[i]; ++j) {
      if (!tight(i, j) || row_of[j] < i) continue;
      // Re-match row_of[j] without touching rows < i, ending at col_of[i].
      const std::size_t start = row_of[j];
      const std::size_t target = col_of[i];
      std::vector<std::size_t> prev_row(n, n);  // column -> row that reached it
      std::vector<char> seen_col(n, 0);
      std::deque<std::size_t> queue{start};
      seen_col[j] = 1;
      bool found = false;
      while (!queue.empty() && !found) {
        const std::size_t r = queue.front();
        queue.pop_front();
        for (std::size_t c = 0; c < n; ++c) {
          if (seen_col[c] || !tight(r, c)) continue;
          if (row_of[c] < i) continue;
          seen_col[c] = 1;
          prev_row[c] = r;
          if (c == target) {
            found = true;
            break;
          }
          if (row_of[c] != i) queue.push_back(row_of[c]);
        }
      }
      if (!found) continue;
      // Walk back from target, shifting each row onto the column it reached.
      std::size_t c = target;
      while (true) {
        const std::size_t r = prev_row[c];
        const std::size_t old = col_of[r];
        col_of[r] = c;
        row_of[c] = r;
        if (r == start) break;
        c = old;
      }
      col_of[i] = j;
      row_of[j] = i;
      break;
    }
  }
  return col_of;
}

namespace {

Coupling make_coupling(std::size_t m, std::size_t n, std::vector<double> plan,
                       const CostMatrix& C) {
  Coupling out;
  out.rows = m;
  out.cols = n;
  out.plan = std::move(plan);
  out.row_marginal.weights.assign(m, 0.0);
  out.col_marginal.weights.assign(n, 0.0);
  double obj = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double p = out.plan[i * n + j];
      out.row_marginal.weights[i] += p;
      out.col_marginal.weights[j] += p;
      obj += p * C(i, j);
    }
  }
  out.objective = obj;
  out.regularized_objective = obj;
  return out;
}

}  // namespace

Coupling solve_exact_assignment(const CostMatrix& C) {
  C.validate();
  if (C.rows != C.cols) throw ContractError("solve_exact_assignment: matrix must be square");
  const std::size_t n = C.rows;
  const auto perm = lexicographic_optimal_assignment(C.entries, n);
  std::vector<double> plan(n * n, 0.0);
  const double w = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) plan[i * n + perm[i]] = w;
  Coupling out = make_coupling(n, n, std::move(plan), C);
  double value = 0.0;
  for (std::size_t i = 0; i < n; ++i) value += C(i, perm[i]);
  out.objective = value / static_cast<double>(n);
  out.regularized_objective = out.objective;
  return out;
}

// ---------------------------------------------------------------------------
// Transportation simplex

namespace {

void require_balanced(const Histogram& a, const Histogram& b, const char* who) {
  const double ma = a.total_mass(), mb = b.total_mass();
  if (std::abs(ma - mb) > 1e-9 * std::max(1.0, std::max(ma, mb))) {
    throw ContractError(std::string(who) + ": total masses differ");
  }
}

}  // namespace

Coupling solve_lp_small(const Histogram& a, const Histogram& b, const CostMatrix& C) {
  a.validate();
  b.validate();
  C.validate();
  const std::size_t m = a.size(), n = b.size();
  require(C.rows == m && C.cols == n, "solve_lp_small: dimensions do not match histograms");
  require(m <= 8 && n <= 8, "solve_lp_small: instances are limited to 8 x 8");
  require_balanced(a, b, "solve_lp_small");

  std::vector<double> x(m * n, 0.0);
  std::vector<char> basic(m * n, 0);
  {
    // Northwest corner start: exactly m + n - 1 basic cells forming a tree.
    std::vector<double> s = a.weights, d = b.weights;
    std::size_t i = 0, j = 0;
    while (true) {
      double q;
      if (i == m - 1) {
        q = d[j];
      } else if (j == n - 1) {
        q = s[i];
      } else {
        q = std::min(s[i], d[j]);
      }
      q = std::max(q, 0.0);
      x[i * n + j] = q;
      basic[i * n + j] = 1;
      s[i] -= q;
      d[j] -= q;
      if (i == m - 1 && j == n - 1) break;
      if (i == m - 1) {
        ++j;
      } else if (j == n - 1) {
        ++i;
      } else if (s[i] <= d[j]) {
        s[i] = 0.0;
        ++i;
      } else {
        d[j] = 0.0;
        ++j;
      }
    }
  }

  const double tol = 1e-12 * (1.0 + C.max_abs());
  // Tree nodes: rows are 0..m-1, columns m..m+n-1.
  const std::size_t nodes = m + n;
  std::vector<double> pot(nodes);
  std::vector<std::size_t> parent(nodes);
  std::vector<char> seen(nodes);
  auto build_tree = [&](std::size_t root) {
    std::fill(seen.begin(), seen.end(), 0);
    std::fill(parent.begin(), parent.end(), nodes);
    std::deque<std::size_t> q{root};
    seen[root] = 1;
    pot[root] = 0.0;
    while (!q.empty()) {
      const std::size_t u = q.front();
      q.pop_front();
      if (u < m) {
        for (std::size_t j = 0; j < n; ++j) {
          if (!basic[u * n + j] || seen[m + j]) continue;
          seen[m + j] = 1;
          parent[m + j] = u;
          pot[m + j] = C(u, j) - pot[u];  // v_j = C_uj - u_u
          q.push_back(m + j);
        }
      } else {
        const std::size_t j = u - m;
        for (std::size_t i = 0; i < m; ++i) {
          if (!basic[i * n + j] || seen[i]) continue;
          seen[i] = 1;
          parent[i] = u;
          pot[i] = C(i, j) - pot[u];
          q.push_back(i);
        }
      }
    }
  };

  int iterations = 0;
  for (; iterations < 10000; ++iterations) {
    build_tree(0);
    std::size_t enter = m * n;
    for (std::size_t k = 0; k < m * n && enter == m * n; ++k) {
      if (basic[k]) continue;
      const std::size_t i = k / n, j = k % n;
      if (C(i, j) - pot[i] - pot[m + j] < -tol) enter = k;
    }
    if (enter == m * n) break;

    // Tree path from column node back to the entering row; the cycle is the
    // entering cell followed by alternating -/+ cells along this path.
    const std::size_t ei = enter / n, ej = enter % n;
    build_tree(ei);
    std::vector<std::size_t> cycle{enter};
    std::size_t node = m + ej;
    while (node != ei) {
      const std::size_t up = parent[node];
      const std::size_t cell = node < m ? node * n + (up - m) : up * n + (node - m);
      cycle.push_back(cell);
      node = up;
    }
    double theta = std::numeric_limits<double>::infinity();
    std::size_t leave = m * n;
    for (std::size_t k = 1; k < cycle.size(); k += 2) {
      const double v = x[cycle[k]];
      if (v < theta || (v == theta && cycle[k] < leave)) {
        theta = v;
        leave = cycle[k];
      }
    }
    for (std::size_t k = 0; k < cycle.size(); ++k) {
      x[cycle[k]] += (k % 2 == 0) ? theta : -theta;
    }
    x[leave] = 0.0;
    basic[enter] = 1;
    basic[leave] = 0;
  }
  for (double& v : x) v = std::max(v, 0.0);
  Coupling out = make_coupling(m, n, std::move(x), C);
  out.iterations = iterations;
  out.converged = iterations < 10000;
  return out;
}

// ---------------------------------------------------------------------------
// Scaling solvers

namespace {

double lse(const std::vector<double>& v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

double safe_log(double w) {
  return w > 0.0 ? std::log(w) : -std::numeric_limits<double>::infinity();
}

struct ScalingProblem {
  std::size_t m, n;
  std::vector<double> log_a, log_b, a, b;
  std::vector<double> cost;  // max-normalized
  double scale;
  double rho1, rho2;  // in normalized units
};

// Exponent rho / (rho + eps); exactly 1 for rho = +inf.
double damping(double rho, double eps) {
  return std::isinf(rho) ? 1.0 : rho / (rho + eps);
}

struct ScalingState {
  std::vector<double> f, g;
};

void update_f(const ScalingProblem& P, double eps, ScalingState& s, std::vector<double>& buf) {
  const double lam = damping(P.rho1, eps);
  buf.resize(P.n);
  for (std::size_t i = 0; i < P.m; ++i) {
    for (std::size_t j = 0; j < P.n; ++j) {
      buf[j] = P.log_b[j] + (s.g[j] - P.cost[i * P.n + j]) / eps;
    }
    s.f[i] = -lam * eps * lse(buf);
  }
}

void update_g(const ScalingProblem& P, double eps, ScalingState& s, std::vector<double>& buf) {
  const double lam = damping(P.rho2, eps);
  buf.resize(P.m);
  for (std::size_t j = 0; j < P.n; ++j) {
    for (std::size_t i = 0; i < P.m; ++i) {
      buf[i] = P.log_a[i] + (s.f[i] - P.cost[i * P.n + j]) / eps;
    }
    s.g[j] = -lam * eps * lse(buf);
  }
}

std::vector<double> plan_of(const ScalingProblem& P, double eps, const ScalingState& s) {
  std::vector<double> plan(P.m * P.n, 0.0);
  for (std::size_t i = 0; i < P.m; ++i) {
    for (std::size_t j = 0; j < P.n; ++j) {
      if (P.a[i] <= 0.0 || P.b[j] <= 0.0) continue;
      plan[i * P.n + j] =
          std::exp(P.log_a[i] + P.log_b[j] + (s.f[i] + s.g[j] - P.cost[i * P.n + j]) / eps);
    }
  }
  return plan;
}

// Max violation of the soft marginal conditions pi0 = a exp(-f / rho1),
// pi1 = b exp(-g / rho2); for rho = inf these are the hard marginals.
double residual_of(const ScalingProblem& P, const ScalingState& s,
                   const std::vector<double>& plan) {
  double r = 0.0;
  for (std::size_t i = 0; i < P.m; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < P.n; ++j) row += plan[i * P.n + j];
    const double want = std::isinf(P.rho1) ? P.a[i] : P.a[i] * std::exp(-s.f[i] / P.rho1);
    r = std::max(r, std::abs(row - want));
  }
  for (std::size_t j = 0; j < P.n; ++j) {
    double col = 0.0;
    for (std::size_t i = 0; i < P.m; ++i) col += plan[i * P.n + j];
    const double want = std::isinf(P.rho2) ? P.b[j] : P.b[j] * std::exp(-s.g[j] / P.rho2);
    r = std::max(r, std::abs(col - want));
  }
  return r;
}

double dual_value(const ScalingProblem& P, double eps, const ScalingState& s,
                  const std::vector<double>& plan) {
  double d = 0.0;
  for (std::size_t i = 0; i < P.m; ++i) {
    d += std::isinf(P.rho1) ? P.a[i] * s.f[i]
                            : -P.rho1 * P.a[i] * (std::exp(-s.f[i] / P.rho1) - 1.0);
  }
  for (std::size_t j = 0; j < P.n; ++j) {
    d += std::isinf(P.rho2) ? P.b[j] * s.g[j]
                            : -P.rho2 * P.b[j] * (std::exp(-s.g[j] / P.rho2) - 1.0);
  }
  double mass = 0.0, ref = 0.0;
  for (double p : plan) mass += p;
  for (double ai : P.a) {
    for (double bj : P.b) ref += ai * bj;
  }
  return d - eps * (mass - ref);
}

double kl(double p, double q) {
  if (p <= 0.0) return q;
  return p * std::log(p / q) - p + q;
}

Coupling run_scaling(const Histogram& a, const Histogram& b, const CostMatrix& C,
                     const SolverConfig& cfg) {
  cfg.validate();
  a.validate();
  b.validate();
  C.validate();
  require(C.rows == a.size() && C.cols == b.size(), "scaling solver: dimensions do not match");

  ScalingProblem P;
  P.m = a.size();
  P.n = b.size();
  P.a = a.weights;
  P.b = b.weights;
  for (double w : P.a) P.log_a.push_back(safe_log(w));
  for (double w : P.b) P.log_b.push_back(safe_log(w));
  P.scale = C.max_abs() > 0.0 ? C.max_abs() : 1.0;
  P.cost.resize(C.entries.size());
  for (std::size_t k = 0; k < C.entries.size(); ++k) P.cost[k] = C.entries[k] / P.scale;
  P.rho1 = cfg.rho1;
  P.rho2 = cfg.rho2;

  ScalingState s{std::vector<double>(P.m, 0.0), std::vector<double>(P.n, 0.0)};
  std::vector<double> buf;

  if (cfg.eps_scaling && cfg.epsilon < 1.0) {
    for (double e = 1.0; e > cfg.epsilon * 1.5; e *= 0.5) {
      for (int it = 0; it < 50; ++it) {
        update_f(P, e, s, buf);
        update_g(P, e, s, buf);
      }
    }
  }

  const double eps = cfg.epsilon;
  ScalingState best = s;
  double best_res = std::numeric_limits<double>::infinity();
  Coupling out;
  int it = 0;
  for (; it < cfg.max_iters; ++it) {
    update_f(P, eps, s, buf);
    update_g(P, eps, s, buf);
    const auto plan = plan_of(P, eps, s);
    const double res = residual_of(P, s, plan);
    if (cfg.record_trace) out.dual_trace.push_back(P.scale * dual_value(P, eps, s, plan));
    if (res < best_res) {
      best_res = res;
      best = s;
    }
    if (!std::isfinite(res)) break;
    if (res <= cfg.tol) {
      ++it;
      break;
    }
  }

  auto trace = std::move(out.dual_trace);
  out = make_coupling(P.m, P.n, plan_of(P, eps, best), C);
  out.dual_trace = std::move(trace);
  out.residual = best_res;
  out.converged = best_res <= cfg.tol;
  out.iterations = it;

  double reg = 0.0;
  for (std::size_t i = 0; i < P.m; ++i) {
    for (std::size_t j = 0; j < P.n; ++j) {
      const double p = out.plan[i * P.n + j];
      reg += p * P.cost[i * P.n + j] + eps * kl(p, P.a[i] * P.b[j]);
    }
  }
  if (!std::isinf(P.rho1)) {
    for (std::size_t i = 0; i < P.m; ++i) reg += P.rho1 * kl(out.row_marginal[i], P.a[i]);
  }
  if (!std::isinf(P.rho2)) {
    for (std::size_t j = 0; j < P.n; ++j) reg += P.rho2 * kl(out.col_marginal[j], P.b[j]);
  }
  out.regularized_objective = P.scale * reg;
  return out;
}

}  // namespace

Coupling sinkhorn(const Histogram& a, const Histogram& b, const CostMatrix& C,
                  const SolverConfig& cfg) {
  a.validate();
  b.validate();
  require_balanced(a, b, "sinkhorn");
  SolverConfig balanced = cfg;
  balanced.rho1 = SolverConfig::kInf;
  balanced.rho2 = SolverConfig::kInf;
  return run_scaling(a, b, C, balanced);
}

Coupling unbalanced_sinkhorn(const Histogram& a, const Histogram& b, const CostMatrix& C,
                             const SolverConfig& cfg) {
  return run_scaling(a, b, C, cfg);
}

RescalingFactors rescaling_factors(const Coupling& coupling, const Histogram& a,
                                   const Histogram& b) {
  require(a.size() == coupling.rows && b.size() == coupling.cols,
          "rescaling_factors: dimensions do not match");
  RescalingFactors f;
  for (std::size_t i = 0; i < a.size(); ++i) {
    require(a[i] > 0.0, "rescaling_factors: zero source weight at " + std::to_string(i));
    f.source.push_back(coupling.row_marginal[i] / a[i]);
  }
  for (std::size_t j = 0; j < b.size(); ++j) {
    require(b[j] > 0.0, "rescaling_factors: zero target weight at " + std::to_string(j));
    f.target.push_back(coupling.col_marginal[j] / b[j]);
  }
  return f;
}

double cross_class_mass(const Coupling& coupling, const std::vector<int>& source_labels,
                        const std::vector<int>& target_labels) {
  require(source_labels.size() == coupling.rows && target_labels.size() == coupling.cols,
          "cross_class_mass: label arrays do not match plan dimensions");
  double cross = 0.0, total = 0.0;
  for (std::size_t i = 0; i < coupling.rows; ++i) {
    for (std::size_t j = 0; j < coupling.cols; ++j) {
      const double p = coupling(i, j);
      total += p;
      if (source_labels[i] != target_labels[j]) cross += p;
    }
  }
  return total > 0.0 ? cross / total : 0.0;
}

std::string coupling_to_csv(const Coupling& coupling) {
  std::ostringstream os;
  os << "row,col,mass,converged\n";
  char buf[128];
  for (std::size_t i = 0; i < coupling.rows; ++i) {
    for (std::size_t j = 0; j < coupling.cols; ++j) {
      const double p = coupling(i, j);
      if (p == 0.0) continue;
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%d\n", i, j, p, coupling.converged ? 1 : 0);
      os << buf;
    }
  }
  return os.str();
}

std::string factors_to_csv(const RescalingFactors& factors) {
  std::ostringstream os;
  os << "side,index,factor\n";
  char buf[128];
  for (std::size_t i = 0; i < factors.source.size(); ++i) {
    std::snprintf(buf, sizeof buf, "source,%zu,%.17g\n", i, factors.source[i]);
    os << buf;
  }
  for (std::size_t j = 0; j < factors.target.size(); ++j) {
    std::snprintf(buf, sizeof buf, "target,%zu,%.17g\n", j, factors.target[j]);
    os << buf;
  }
  return os.str();
}

std::string cost_matrix_to_csv(const CostMatrix& C) {
  std::ostringstream os;
  char buf[64];
  for (std::size_t i = 0; i < C.rows; ++i) {
    for (std::size_t j = 0; j < C.cols; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", C(i, j));
      os << (j ? "," : "") << buf;
    }
    os << '\n';
  }
  return os.str();
}

CostMatrix cost_matrix_from_csv(const std::string& text) {
  CostMatrix C;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<double> row;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      while (end && (*end == ' ' || *end == '\t')) ++end;
      if (end == cell.c_str() || (end && *end != '\0')) {
        throw ParseError("malformed matrix entry '" + cell + "'", line_no);
      }
      row.push_back(v);
    }
    if (C.rows == 0) {
      C.cols = row.size();
    } else if (row.size() != C.cols) {
      throw ParseError("ragged matrix row", line_no);
    }
    C.entries.insert(C.entries.end(), row.begin(), row.end());
    ++C.rows;
  }
  if (C.rows == 0) throw ValidationError("empty cost matrix");
  for (double c : C.entries) {
    if (!std::isfinite(c)) throw ValidationError("non-finite cost matrix entry");
  }
  return C;
}

}  // namespace upc::ot
