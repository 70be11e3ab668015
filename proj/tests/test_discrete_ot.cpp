#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "upc/discrete_ot.hpp"
#include "upc/errors.hpp"

using namespace upc;
using namespace upc::ot;

namespace {

CostMatrix random_matrix(std::mt19937_64& gen, std::size_t m, std::size_t n) {
  std::uniform_real_distribution<double> U(0.0, 1.0);
  CostMatrix C(m, n, {});
  for (std::size_t k = 0; k < m * n; ++k) C.entries.push_back(U(gen));
  return C;
}

Histogram random_hist(std::mt19937_64& gen, std::size_t n, double mass = 1.0) {
  std::uniform_real_distribution<double> U(0.2, 1.0);
  std::vector<double> w(n);
  double s = 0;
  for (auto& x : w) s += (x = U(gen));
  for (auto& x : w) x *= mass / s;
  return Histogram(w);
}

double max_marginal_violation(const Coupling& p, const Histogram& a, const Histogram& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(p.row_marginal[i] - a[i]));
  for (std::size_t j = 0; j < b.size(); ++j) worst = std::max(worst, std::abs(p.col_marginal[j] - b[j]));
  return worst;
}

geo::PointCloud cloud_at(double x) { return geo::PointCloud({{x, 0, 0}, {x, 1, 0}}); }

}  // namespace

TEST_CASE("histograms and matrices validate") {
  CHECK_THROWS_AS(Histogram({0.5, -0.1}).validate(), ContractError);
  CHECK_THROWS_AS(Histogram({0.0, 0.0}).validate(), ContractError);
  CHECK(Histogram::uniform(4, 2.0).total_mass() == doctest::Approx(2.0));
  CostMatrix bad(1, 2, {0.0, std::nan("")});
  CHECK_THROWS(bad.validate());
}

TEST_CASE("cost_matrix") {
  std::vector<geo::PointCloud> X{cloud_at(0), cloud_at(1), cloud_at(3), cloud_at(-2)};
  std::vector<geo::PointCloud> Y{cloud_at(0.5), cloud_at(2), cloud_at(-1), cloud_at(4)};
  const auto kind = costs::CostKind::cd_l1();
  const auto self = cost_matrix(kind, X, X);
  for (std::size_t i = 0; i < 4; ++i) CHECK(self(i, i) == 0.0);
  const auto one = cost_matrix(kind, {X[1]}, {Y[2]});
  CHECK(one(0, 0) == costs::cost(kind, X[1], Y[2]));
  const auto C = cost_matrix(kind, X, Y);
  REQUIRE(C.rows == 4);
  REQUIRE(C.cols == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) CHECK(C(i, j) == costs::cost(kind, X[i], Y[j]));
  }
  // Errors name the offending entry.
  std::vector<geo::PointCloud> odd{geo::PointCloud({{0, 0, 0}})};
  try {
    cost_matrix(costs::CostKind::l2(), X, odd);
    FAIL("expected an error");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("(0, 0)") != std::string::npos);
  }
}

TEST_CASE("solve_exact_assignment") {
  CHECK(solve_exact_assignment(CostMatrix(3, 3, std::vector<double>(9, 0.0))).objective == 0.0);
  const auto id = solve_exact_assignment(CostMatrix(2, 2, {0, 1, 1, 0}));
  CHECK(id.objective == 0.0);
  CHECK(id(0, 0) == 0.5);
  CHECK(id(1, 1) == 0.5);
  CHECK_THROWS_AS(solve_exact_assignment(CostMatrix(2, 3, {0, 0, 0, 0, 0, 0})), ContractError);

  SUBCASE("8x8 against all 8! permutations") {
    std::mt19937_64 gen(1);
    for (int trial = 0; trial < 3; ++trial) {
      const auto C = random_matrix(gen, 8, 8);
      const auto brute = oracle::brute_assignment(C.entries, 8);
      const auto plan = solve_exact_assignment(C);
      CHECK(plan.objective * 8.0 == doctest::Approx(brute.value).epsilon(1e-12));
      for (std::size_t i = 0; i < 8; ++i) CHECK(plan(i, brute.perm[i]) == 0.125);
    }
  }
  SUBCASE("ties resolve to the lexicographically smallest optimum") {
    // Integer costs with many ties.
    std::mt19937_64 gen(2);
    std::uniform_int_distribution<int> U(0, 2);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> c(36);
      for (auto& x : c) x = U(gen);
      const auto brute = oracle::brute_assignment(c, 6);
      CHECK(lexicographic_optimal_assignment(c, 6) == brute.perm);
    }
  }
  SUBCASE("agrees with the LP on uniform square instances") {
    std::mt19937_64 gen(3);
    for (std::size_t n = 1; n <= 6; ++n) {
      const auto C = random_matrix(gen, n, n);
      const auto u = Histogram::uniform(n);
      CHECK(std::abs(solve_exact_assignment(C).objective - solve_lp_small(u, u, C).objective) < 1e-9);
    }
  }
}

TEST_CASE("solve_lp_small") {
  const auto one = solve_lp_small(Histogram({2.5}), Histogram({2.5}), CostMatrix(1, 1, {0.4}));
  CHECK(one(0, 0) == 2.5);
  CHECK(one.objective == doctest::Approx(1.0));
  const auto u = Histogram::uniform(2);
  const auto diag = solve_lp_small(u, u, CostMatrix(2, 2, {0, 1, 1, 0}));
  CHECK(diag(0, 0) == 0.5);
  CHECK(diag(0, 1) == 0.0);
  CHECK(diag.objective == 0.0);

  const auto p = solve_lp_small(Histogram({0.7, 0.3}), Histogram({0.5, 0.5}),
                                CostMatrix(2, 2, {0, 1, 1, 0}));
  CHECK(p(0, 0) == doctest::Approx(0.5));
  CHECK(p(0, 1) == doctest::Approx(0.2));
  CHECK(p(1, 0) == doctest::Approx(0.0));
  CHECK(p(1, 1) == doctest::Approx(0.3));
  CHECK(p.objective == doctest::Approx(0.2));
  std::vector<double> vertex;
  CHECK(oracle::lp_vertex_enumeration({0.7, 0.3}, {0.5, 0.5}, {0, 1, 1, 0}, &vertex) ==
        doctest::Approx(0.2));

  CHECK_THROWS_AS(solve_lp_small(Histogram({1.0}), Histogram({0.5, 0.4}), CostMatrix(1, 2, {0, 0})),
                  ContractError);
  CHECK_THROWS_AS(solve_lp_small(Histogram::uniform(9), Histogram::uniform(9),
                                 CostMatrix(9, 9, std::vector<double>(81, 0.0))),
                  ContractError);

  SUBCASE("vertex enumeration oracle") {
    std::mt19937_64 gen(4);
    for (int trial = 0; trial < 60; ++trial) {
      const std::size_t m = 1 + trial % 4, n = 1 + (trial / 4) % 4;
      const auto C = random_matrix(gen, m, n);
      const auto a = random_hist(gen, m), b = random_hist(gen, n);
      const auto plan = solve_lp_small(a, b, C);
      CHECK(plan.objective ==
            doctest::Approx(oracle::lp_vertex_enumeration(a.weights, b.weights, C.entries)).epsilon(1e-9));
      CHECK(max_marginal_violation(plan, a, b) < 1e-12);
      for (double x : plan.plan) CHECK(x >= 0.0);
    }
  }
}

TEST_CASE("sinkhorn") {
  const auto one = sinkhorn(Histogram({3.0}), Histogram({3.0}), CostMatrix(1, 1, {0.7}));
  CHECK(one(0, 0) == doctest::Approx(3.0).epsilon(1e-12));

  SolverConfig cfg;
  cfg.epsilon = 1e-3;
  const auto u = Histogram::uniform(2);
  const auto p = sinkhorn(u, u, CostMatrix(2, 2, {0, 1, 1, 0}), cfg);
  CHECK(p.converged);
  CHECK(std::abs(p.objective - 0.0) < 1e-3);

  CHECK_THROWS_AS(sinkhorn(Histogram({1.0}), Histogram({2.0}), CostMatrix(1, 1, {0.0})),
                  ContractError);

  SUBCASE("marginal violation within tol on 100 random 6x6 instances") {
    std::mt19937_64 gen(5);
    for (int trial = 0; trial < 100; ++trial) {
      const auto C = random_matrix(gen, 6, 6);
      const auto a = random_hist(gen, 6), b = random_hist(gen, 6);
      SolverConfig c;
      const auto plan = sinkhorn(a, b, C, c);
      CHECK(plan.converged);
      CHECK(plan.residual <= c.tol);
      CHECK(max_marginal_violation(plan, a, b) <= c.tol);
    }
  }
  SUBCASE("objective is bounded below by the LP up to the entropic margin") {
    std::mt19937_64 gen(6);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t m = 2 + trial % 7, n = 2 + (trial / 7) % 7;
      const auto C = random_matrix(gen, m, n);
      const auto a = random_hist(gen, m), b = random_hist(gen, n);
      SolverConfig c;
      const auto plan = sinkhorn(a, b, C, c);
      const double lp = solve_lp_small(a, b, C).objective;
      const double margin = c.epsilon * C.max_abs() * std::log(double(m * n));
      CHECK(plan.objective >= lp - margin - 1e-9);
      CHECK(plan.objective <= lp + margin + 1e-9);
    }
  }
  SUBCASE("the dual value never decreases") {
    std::mt19937_64 gen(7);
    const auto C = random_matrix(gen, 5, 7);
    const auto a = random_hist(gen, 5), b = random_hist(gen, 7);
    SolverConfig c;
    c.record_trace = true;
    c.tol = 1e-12;
    c.max_iters = 300;
    const auto plan = sinkhorn(a, b, C, c);
    REQUIRE(plan.dual_trace.size() > 10);
    for (std::size_t k = 1; k < plan.dual_trace.size(); ++k) {
      CHECK(plan.dual_trace[k] >= plan.dual_trace[k - 1] - 1e-12);
    }
  }
  SUBCASE("non-convergence returns a flagged best iterate") {
    std::mt19937_64 gen(8);
    const auto C = random_matrix(gen, 5, 5);
    const auto a = random_hist(gen, 5), b = random_hist(gen, 5);
    SolverConfig c;
    c.max_iters = 2;
    c.tol = 1e-15;
    const auto plan = sinkhorn(a, b, C, c);
    CHECK_FALSE(plan.converged);
    CHECK(plan.residual > c.tol);
    CHECK(std::isfinite(plan.residual));
  }
  SUBCASE("small epsilon stays finite") {
    std::mt19937_64 gen(9);
    const auto C = random_matrix(gen, 8, 8);
    const auto a = random_hist(gen, 8), b = random_hist(gen, 8);
    SolverConfig c;
    c.epsilon = 1e-4;
    const auto plan = sinkhorn(a, b, C, c);
    for (double x : plan.plan) CHECK(std::isfinite(x));
    CHECK(plan.objective - solve_lp_small(a, b, C).objective < 1e-3);
  }
}

TEST_CASE("unbalanced_sinkhorn") {
  SUBCASE("infinite penalties run the balanced path exactly") {
    std::mt19937_64 gen(10);
    const auto C = random_matrix(gen, 4, 5);
    const auto a = random_hist(gen, 4), b = random_hist(gen, 5);
    const auto bal = sinkhorn(a, b, C);
    const auto unb = unbalanced_sinkhorn(a, b, C);
    CHECK(bal.plan == unb.plan);
    CHECK(bal.iterations == unb.iterations);
  }
  SUBCASE("rho = 1e8 matches balanced sinkhorn") {
    std::mt19937_64 gen(11);
    const auto C = random_matrix(gen, 2, 2);
    const auto u = Histogram::uniform(2);
    SolverConfig c;
    c.rho1 = c.rho2 = 1e8;
    const auto unb = unbalanced_sinkhorn(u, u, C, c);
    const auto bal = sinkhorn(u, u, C);
    for (std::size_t k = 0; k < 4; ++k) CHECK(std::abs(unb.plan[k] - bal.plan[k]) < 1e-4);
  }
  SUBCASE("an expensive outlier is left behind") {
    // Source atom 3 carries half the mass and costs 100 to reach anything.
    const Histogram a({1.0 / 6, 1.0 / 6, 1.0 / 6, 0.5});
    const Histogram b = Histogram::uniform(3);
    CostMatrix C(4, 3, {0.2, 0.9, 0.5, 0.7, 0.1, 0.4, 0.6, 0.3, 0.0, 100, 100, 100});
    SolverConfig c;
    c.epsilon = 0.05;
    c.rho1 = c.rho2 = 0.1;
    c.tol = 1e-10;
    const auto plan = unbalanced_sinkhorn(a, b, C, c);
    CHECK(plan.converged);
    CHECK(plan.row_marginal[3] < 0.01 * a[3]);
    const auto f = rescaling_factors(plan, a, b);
    CHECK(f.source[3] < 0.01);
    CHECK(oracle::uot_kkt_residual(a.weights, b.weights, C.entries, plan.plan, 0.05, 0.1, 0.1) <= 1e-6);
    // Long plain-domain runs from different starts land on the same plan.
    std::mt19937_64 gen(12);
    std::uniform_real_distribution<double> U(0.1, 10.0);
    for (int start = 0; start < 3; ++start) {
      std::vector<double> u0(4), v0(3);
      for (auto& x : u0) x = U(gen);
      for (auto& x : v0) x = U(gen);
      const auto ref = oracle::uot_scaling(a.weights, b.weights, C.entries, 0.05, 0.1, 0.1, 20000, u0, v0);
      for (std::size_t k = 0; k < ref.size(); ++k) CHECK(std::abs(ref[k] - plan.plan[k]) < 1e-8);
    }
  }
  SUBCASE("KKT residual on random 4x4 instances") {
    std::mt19937_64 gen(13);
    for (int trial = 0; trial < 25; ++trial) {
      const auto C = random_matrix(gen, 4, 4);
      const auto a = random_hist(gen, 4, 1.3), b = random_hist(gen, 4, 0.8);
      SolverConfig c;
      c.epsilon = 0.05;
      c.rho1 = 0.5;
      c.rho2 = 2.0;
      // The stopping rule bounds mass gaps; stationarity needs a tighter one.
      c.tol = 1e-9;
      const auto plan = unbalanced_sinkhorn(a, b, C, c);
      CHECK(plan.converged);
      CHECK(oracle::uot_kkt_residual(a.weights, b.weights, C.entries, plan.plan, 0.05, 0.5, 2.0) <= 1e-6);
    }
  }
}

TEST_CASE("rescaling factors") {
  std::mt19937_64 gen(14);
  const auto C = random_matrix(gen, 4, 6);
  const auto a = random_hist(gen, 4), b = random_hist(gen, 6);
  SolverConfig cfg;
  const auto bal = sinkhorn(a, b, C, cfg);
  const auto f = rescaling_factors(bal, a, b);
  for (double x : f.source) CHECK(std::abs(x - 1.0) < 1e-4);
  for (double x : f.target) CHECK(std::abs(x - 1.0) < 1e-4);

  cfg.rho1 = 0.3;
  cfg.rho2 = 0.3;
  const auto unb = unbalanced_sinkhorn(a, b, C, cfg);
  const auto g = rescaling_factors(unb, a, b);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(g.source[i] >= 0.0);
    CHECK(g.source[i] * a[i] == doctest::Approx(unb.row_marginal[i]).epsilon(1e-14));
  }
  for (std::size_t j = 0; j < 6; ++j) CHECK(g.target[j] * b[j] == doctest::Approx(unb.col_marginal[j]).epsilon(1e-14));
  CHECK_THROWS_AS(rescaling_factors(bal, Histogram({0.0, 0.5, 0.25, 0.25}), b), ContractError);
}

TEST_CASE("cross_class_mass") {
  Coupling block;
  block.rows = block.cols = 2;
  block.plan = {0.5, 0.0, 0.0, 0.5};
  CHECK(cross_class_mass(block, {0, 1}, {0, 1}) == 0.0);
  Coupling anti = block;
  anti.plan = {0.0, 0.5, 0.5, 0.0};
  CHECK(cross_class_mass(anti, {0, 1}, {0, 1}) == 1.0);
  CHECK_THROWS_AS(cross_class_mass(block, {0}, {0, 1}), ContractError);

  SUBCASE("imbalanced two-cluster instance: UOT moves less across classes") {
    // Sources: 2 atoms of class 0, 2 of class 1 at equal weight; the target
    // underweights class 1 so balanced OT must push class-1 mass... the
    // other way round.
    const Histogram a({0.25, 0.25, 0.25, 0.25});
    const Histogram b({0.4, 0.4, 0.1, 0.1});
    CostMatrix C(4, 4, {0.1, 0.2, 1.0, 1.1, 0.2, 0.1, 1.1, 1.0, 1.0, 1.1, 0.1, 0.2, 1.1, 1.0, 0.2, 0.1});
    const std::vector<int> la{0, 0, 1, 1}, lb{0, 0, 1, 1};
    const auto ot_plan = solve_lp_small(a, b, C);
    SolverConfig c;
    c.epsilon = 0.01;
    c.rho1 = c.rho2 = 0.1;
    const auto uot = unbalanced_sinkhorn(a, b, C, c);
    CHECK(uot.converged);
    CHECK(cross_class_mass(ot_plan, la, lb) == doctest::Approx(0.3));
    CHECK(cross_class_mass(uot, la, lb) < cross_class_mass(ot_plan, la, lb));
  }
}

TEST_CASE("permutation equivariance") {
  std::mt19937_64 gen(15);
  const auto C = random_matrix(gen, 5, 4);
  const auto a = random_hist(gen, 5), b = random_hist(gen, 4);
  const std::vector<std::size_t> perm{3, 0, 4, 2, 1};
  CostMatrix Cp(5, 4, {});
  std::vector<double> ap;
  for (std::size_t i : perm) {
    ap.push_back(a[i]);
    for (std::size_t j = 0; j < 4; ++j) Cp.entries.push_back(C(i, j));
  }
  SolverConfig cfg;
  cfg.rho1 = 0.2;
  cfg.rho2 = 0.7;
  const auto p = unbalanced_sinkhorn(a, b, C, cfg);
  const auto q = unbalanced_sinkhorn(Histogram(ap), b, Cp, cfg);
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t j = 0; j < 4; ++j) CHECK(q(r, j) == doctest::Approx(p(perm[r], j)).epsilon(1e-9));
  }
  const auto lp = solve_lp_small(a, b, C), lq = solve_lp_small(Histogram(ap), b, Cp);
  CHECK(lq.objective == doctest::Approx(lp.objective).epsilon(1e-12));
}

TEST_CASE("CSV round trips") {
  CostMatrix C(2, 3, {0.1, 1.0 / 3.0, 2.0, 5.0, 0.0, 1e-9});
  const auto back = cost_matrix_from_csv(cost_matrix_to_csv(C));
  CHECK(back.rows == 2);
  CHECK(back.cols == 3);
  CHECK(back.entries == C.entries);
  CHECK(cost_matrix_from_csv("# header comment\n1,2\n3,4\n").entries == std::vector<double>{1, 2, 3, 4});
  CHECK_THROWS_AS(cost_matrix_from_csv("1,2\n3\n"), ParseError);
  CHECK_THROWS_AS(cost_matrix_from_csv("1,x\n"), ParseError);
  const auto p = solve_lp_small(Histogram({0.7, 0.3}), Histogram({0.5, 0.5}), CostMatrix(2, 2, {0, 1, 1, 0}));
  const std::string csv = coupling_to_csv(p);
  CHECK(csv.rfind("row,col,mass,converged\n", 0) == 0);
  CHECK(csv.find("0,1,0.19999999999999996,1") != std::string::npos);
}
