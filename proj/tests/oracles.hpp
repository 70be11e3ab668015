#pragma once

// Independent reference implementations used only by the tests. None of them
// call into the library's solvers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <vector>

namespace oracle {

struct Assignment {
  std::vector<std::size_t> perm;  // lexicographically first optimum
  double value = 0.0;
};

// Exhaustive search over all n! permutations of a row-major n x n matrix.
inline Assignment brute_assignment(const std::vector<double>& cost, std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  Assignment best;
  best.value = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += cost[i * n + p[i]];
    if (s < best.value) {
      best.value = s;
      best.perm = p;
    }
  } while (std::next_permutation(p.begin(), p.end()));
  return best;
}

// Minimum of <C, P> over the basic feasible solutions of the transportation
// polytope, found by enumerating every (m + n - 1)-subset of cells and
// keeping the ones that form a spanning tree with a nonnegative solution.
inline double lp_vertex_enumeration(const std::vector<double>& a, const std::vector<double>& b,
                                    const std::vector<double>& C,
                                    std::vector<double>* plan_out = nullptr) {
  const std::size_t m = a.size(), n = b.size(), cells = m * n, k = m + n - 1;
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> choose(cells, 0);
  std::fill(choose.begin(), choose.begin() + static_cast<long>(k), 1);
  std::sort(choose.begin(), choose.end(), std::greater<int>());
  do {
    std::vector<double> ra = a, cb = b, x(cells, 0.0);
    std::vector<char> basic(cells, 0), done(cells, 0);
    for (std::size_t c = 0; c < cells; ++c) basic[c] = static_cast<char>(choose[c]);
    std::size_t solved = 0;
    bool progress = true;
    while (progress && solved < k) {
      progress = false;
      for (std::size_t i = 0; i < m && !progress; ++i) {
        std::size_t cnt = 0, last = 0;
        for (std::size_t j = 0; j < n; ++j) {
          if (basic[i * n + j] && !done[i * n + j]) {
            ++cnt;
            last = j;
          }
        }
        if (cnt == 1) {
          const std::size_t c = i * n + last;
          x[c] = ra[i];
          ra[i] = 0.0;
          cb[last] -= x[c];
          done[c] = 1;
          ++solved;
          progress = true;
        }
      }
      for (std::size_t j = 0; j < n && !progress; ++j) {
        std::size_t cnt = 0, last = 0;
        for (std::size_t i = 0; i < m; ++i) {
          if (basic[i * n + j] && !done[i * n + j]) {
            ++cnt;
            last = i;
          }
        }
        if (cnt == 1) {
          const std::size_t c = last * n + j;
          x[c] = cb[j];
          cb[j] = 0.0;
          ra[last] -= x[c];
          done[c] = 1;
          ++solved;
          progress = true;
        }
      }
    }
    if (solved != k) continue;
    bool ok = true;
    for (double v : ra) ok = ok && std::abs(v) < 1e-12;
    for (double v : cb) ok = ok && std::abs(v) < 1e-12;
    for (double v : x) ok = ok && v > -1e-12;
    if (!ok) continue;
    double obj = 0.0;
    for (std::size_t c = 0; c < cells; ++c) obj += C[c] * x[c];
    if (obj < best) {
      best = obj;
      if (plan_out) *plan_out = x;
    }
  } while (std::prev_permutation(choose.begin(), choose.end()));
  return best;
}

// Plain-domain generalized scaling for
//   <C', P> + eps KL(P | a x b) + rho1 KL(P1 | a) + rho2 KL(P2 | b),
// C' = C / max|C|, started from the given positive scalings.
inline std::vector<double> uot_scaling(const std::vector<double>& a, const std::vector<double>& b,
                                       const std::vector<double>& C, double eps, double rho1,
                                       double rho2, int iters, std::vector<double> u,
                                       std::vector<double> v) {
  const std::size_t m = a.size(), n = b.size();
  double scale = 0.0;
  for (double c : C) scale = std::max(scale, std::abs(c));
  if (scale == 0.0) scale = 1.0;
  std::vector<double> K(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) K[i * n + j] = a[i] * b[j] * std::exp(-C[i * n + j] / scale / eps);
  }
  const double e1 = std::isinf(rho1) ? 1.0 : rho1 / (rho1 + eps);
  const double e2 = std::isinf(rho2) ? 1.0 : rho2 / (rho2 + eps);
  for (int it = 0; it < iters; ++it) {
    for (std::size_t i = 0; i < m; ++i) {
      double kv = 0.0;
      for (std::size_t j = 0; j < n; ++j) kv += K[i * n + j] * v[j];
      u[i] = std::pow(a[i] / kv, e1);
    }
    for (std::size_t j = 0; j < n; ++j) {
      double ku = 0.0;
      for (std::size_t i = 0; i < m; ++i) ku += K[i * n + j] * u[i];
      v[j] = std::pow(b[j] / ku, e2);
    }
  }
  std::vector<double> P(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) P[i * n + j] = u[i] * K[i * n + j] * v[j];
  }
  return P;
}

// Largest |d objective / d P_ij| of the eps-KL UOT objective at P (in
// normalized cost units). Zero exactly at the optimum.
inline double uot_kkt_residual(const std::vector<double>& a, const std::vector<double>& b,
                               const std::vector<double>& C, const std::vector<double>& P,
                               double eps, double rho1, double rho2) {
  const std::size_t m = a.size(), n = b.size();
  double scale = 0.0;
  for (double c : C) scale = std::max(scale, std::abs(c));
  if (scale == 0.0) scale = 1.0;
  std::vector<double> r(m, 0.0), c(n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      r[i] += P[i * n + j];
      c[j] += P[i * n + j];
    }
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double g = C[i * n + j] / scale + eps * std::log(P[i * n + j] / (a[i] * b[j])) +
                       rho1 * std::log(r[i] / a[i]) + rho2 * std::log(c[j] / b[j]);
      worst = std::max(worst, std::abs(g));
    }
  }
  return worst;
}

}  // namespace oracle
