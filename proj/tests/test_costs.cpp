#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "upc/costs.hpp"
#include "upc/discrete_ot.hpp"
#include "upc/errors.hpp"

using namespace upc;
using namespace upc::costs;
using geo::Point3;

namespace {

PointCloud random_cloud(std::mt19937_64& gen, std::size_t n, double spread = 1.0) {
  std::normal_distribution<double> N(0.0, spread);
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i) c.points.push_back({N(gen), N(gen), N(gen)});
  return c;
}

PointCloud shuffled(PointCloud c, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::shuffle(c.points.begin(), c.points.end(), gen);
  return c;
}

// Naive oracles written without the library's nearest-neighbor helper.
double dist2(const Point3& a, const Point3& b) {
  double s = 0;
  for (int k = 0; k < 3; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return s;
}

std::vector<double> naive_min_sq(const PointCloud& x, const PointCloud& y) {
  std::vector<double> out;
  for (const auto& p : x.points) {
    double best = 1e300;
    for (const auto& q : y.points) best = std::min(best, dist2(p, q));
    out.push_back(best);
  }
  return out;
}

double naive_cd_l2(const PointCloud& x, const PointCloud& y) {
  double s = 0;
  for (double v : naive_min_sq(x, y)) s += v;
  for (double v : naive_min_sq(y, x)) s += v;
  return s;
}

double naive_cd_l1(const PointCloud& x, const PointCloud& y) {
  double f = 0, b = 0;
  for (double v : naive_min_sq(x, y)) f += std::sqrt(v);
  for (double v : naive_min_sq(y, x)) b += std::sqrt(v);
  return 0.5 * (f / double(x.size()) + b / double(y.size()));
}

double naive_infocd_dir(const PointCloud& x, const PointCloud& y, double tau, double tau_p,
                        double lambda) {
  const auto sq = naive_min_sq(x, y);
  double denom = 0;
  for (double v : sq) denom += std::exp(-std::sqrt(v) / tau);
  double s = 0;
  for (double v : sq) s += std::sqrt(v) / tau_p + lambda * std::log(denom);
  return s / double(y.size());
}

double naive_fscore(const PointCloud& x, const PointCloud& y, double alpha) {
  auto frac = [&](const PointCloud& a, const PointCloud& b) {
    double hit = 0;
    for (double v : naive_min_sq(a, b)) hit += std::sqrt(v) < alpha ? 1 : 0;
    return hit / double(a.size());
  };
  const double p = frac(x, y), r = frac(y, x);
  return p + r == 0 ? 0.0 : 200.0 * p * r / (p + r);
}

double brute_emd(const PointCloud& x, const PointCloud& y, bool squared) {
  std::vector<std::size_t> perm(x.size());
  std::iota(perm.begin(), perm.end(), 0);
  double best = 1e300;
  do {
    double s = 0;
    for (std::size_t i = 0; i < perm.size(); ++i) {
      const double d2 = dist2(x[i], y[perm[i]]);
      s += squared ? d2 : std::sqrt(d2);
    }
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / double(x.size());
}

const PointCloud kOrigin({{0, 0, 0}});
const PointCloud kUnitX({{1, 0, 0}});
const PointCloud kTwo({{0, 0, 0}, {2, 0, 0}});

}  // namespace

TEST_CASE("l2_paired") {
  CHECK(l2_paired(kTwo, kTwo) == 0.0);
  CHECK(l2_paired(kOrigin, kUnitX) == 1.0);
  CHECK_THROWS_AS(l2_paired(kTwo, kOrigin), ContractError);
  std::mt19937_64 gen(1);
  const auto x = random_cloud(gen, 16), y = random_cloud(gen, 16);
  double oracle = 0;
  for (int k = 0; k < 3; ++k) {
    for (std::size_t n = 0; n < 16; ++n) oracle += (x[n][k] - y[n][k]) * (x[n][k] - y[n][k]);
  }
  CHECK(std::abs(l2_paired(x, y) - oracle) < 1e-12);
  // Index-paired: reordering one cloud changes the value.
  CHECK(std::abs(l2_paired(shuffled(x, 3), y) - l2_paired(x, y)) > 1e-6);
}

TEST_CASE("chamfer_l2 and its forward half") {
  CHECK(chamfer_l2(kTwo, kTwo) == 0.0);
  CHECK(chamfer_l2(kOrigin, kUnitX) == 2.0);
  CHECK(chamfer_l2_fwd(kOrigin, kUnitX) == 1.0);
  const PointCloud mid({{1, 0, 0}});
  CHECK(chamfer_l2(kTwo, mid) == 3.0);
  CHECK(chamfer_l2_fwd(kTwo, mid) == 2.0);
  CHECK_THROWS_AS(chamfer_l2(PointCloud{}, mid), ContractError);
}

TEST_CASE("chamfer_l1") {
  CHECK(chamfer_l1(kTwo, kTwo) == 0.0);
  CHECK(chamfer_l1(kOrigin, kUnitX) == 1.0);
  CHECK(chamfer_l1(kTwo, PointCloud({{1, 0, 0}})) == 1.0);
  // Same point set with a duplicate: still zero.
  CHECK(chamfer_l1(kTwo, PointCloud({{0, 0, 0}, {2, 0, 0}, {2, 0, 0}})) == 0.0);
  CHECK_THROWS_AS(chamfer_l1(kTwo, PointCloud{}), ContractError);
}

TEST_CASE("infocd") {
  SUBCASE("singletons: each direction is d/tau' - d/tau") {
    const PointCloud p({{0.3, -1.0, 2.0}}), q({{1.0, 0.5, 1.0}});
    const double d = std::sqrt(dist2(p[0], q[0]));
    InfoCdParams ip{2.0, 1.0, 1.0};
    CHECK(infocd_directional(p, q, ip) == doctest::Approx(d / 1.0 - d / 2.0).epsilon(1e-14));
    CHECK(infocd(p, q, ip) == doctest::Approx(d).epsilon(1e-14));
  }
  SUBCASE("identical clouds reach the zero-distance limit") {
    std::mt19937_64 gen(4);
    for (std::size_t n : {1u, 3u, 17u}) {
      const auto x = random_cloud(gen, n);
      // Every min distance is 0, so each term is lambda * log(n) and the
      // direction averages n of them over |y| = n.
      const double per_dir = -(1.0 / double(n)) * double(n) * std::log(1.0 / double(n));
      CHECK(infocd(x, x) == doctest::Approx(2.0 * per_dir).epsilon(1e-12));
    }
  }
  SUBCASE("scaling both clouds changes the value") {
    std::mt19937_64 gen(5);
    const auto x = random_cloud(gen, 8), y = random_cloud(gen, 8);
    PointCloud x2 = x, y2 = y;
    for (auto& p : x2.points) p = {2 * p[0], 2 * p[1], 2 * p[2]};
    for (auto& p : y2.points) p = {2 * p[0], 2 * p[1], 2 * p[2]};
    CHECK(std::abs(infocd(x2, y2) - infocd(x, y)) > 1e-6);
  }
  SUBCASE("far-apart clouds stay finite") {
    std::mt19937_64 gen(6);
    auto x = random_cloud(gen, 10), y = random_cloud(gen, 10);
    for (auto& p : y.points) p[0] += 1e4;
    const double v = infocd(x, y, {0.01, 1.0, 1.0});
    CHECK(std::isfinite(v));
    // Without the max shift the denominator underflows to zero.
    CHECK_FALSE(std::isfinite(naive_infocd_dir(x, y, 0.01, 1.0, 1.0)));
  }
}

TEST_CASE("fscore") {
  std::mt19937_64 gen(7);
  const auto x = random_cloud(gen, 12);
  CHECK(fscore(x, x, {1e-3}) == 100.0);
  PointCloud far = x;
  for (auto& p : far.points) p[1] += 10.0;
  CHECK(fscore(x, far, {1.0}) == 0.0);
  CHECK(fscore(kTwo, kOrigin, {1.0}) == doctest::Approx(200.0 / 3.0).epsilon(1e-4));
  CHECK(std::abs(fscore(kTwo, kOrigin, {1.0}) - 66.67) < 0.01);
  CHECK_THROWS_AS(fscore(x, x, {0.0}), ConfigError);
}

TEST_CASE("emd matches permutation enumeration and the exact assignment solver") {
  std::mt19937_64 gen(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + trial % 7;
    const auto x = random_cloud(gen, n), y = random_cloud(gen, n);
    CHECK(emd(x, y) == doctest::Approx(brute_emd(x, y, false)).epsilon(1e-12));
    CHECK(emd(x, y, EmdGround::sq_euclid) == doctest::Approx(brute_emd(x, y, true)).epsilon(1e-12));
    ot::CostMatrix C(n, n, {});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) C.entries.push_back(std::sqrt(dist2(x[i], y[j])));
    }
    CHECK(cost(CostKind::emd(), x, y) ==
          doctest::Approx(ot::solve_exact_assignment(C).objective).epsilon(1e-12));
  }
  CHECK_THROWS_AS(emd(kTwo, kOrigin), ContractError);
}

TEST_CASE("brute-force equivalence on clouds up to 64 points") {
  std::mt19937_64 gen(9);
  for (int trial = 0; trial < 30; ++trial) {
    std::uniform_int_distribution<std::size_t> size(1, 64);
    const auto x = random_cloud(gen, size(gen)), y = random_cloud(gen, size(gen));
    const auto sq = nearest_sq_distances(x, y);
    const auto oracle = naive_min_sq(x, y);
    for (std::size_t i = 0; i < sq.size(); ++i) CHECK(sq[i] == oracle[i]);
    CHECK(std::abs(chamfer_l2(x, y) - naive_cd_l2(x, y)) < 1e-9);
    double fwd = 0;
    for (double v : oracle) fwd += v;
    CHECK(std::abs(chamfer_l2_fwd(x, y) - fwd) < 1e-9);
    CHECK(std::abs(chamfer_l1(x, y) - naive_cd_l1(x, y)) < 1e-9);
    for (double lambda : {1.0, 1e-7}) {
      InfoCdParams ip{2.0, 1.0, lambda};
      const double oracle_info = naive_infocd_dir(x, y, 2.0, 1.0, lambda) +
                                 naive_infocd_dir(y, x, 2.0, 1.0, lambda);
      CHECK(std::abs(infocd(x, y, ip) - oracle_info) < 1e-9);
    }
    CHECK(std::abs(fscore(x, y, {0.8}) - naive_fscore(x, y, 0.8)) < 1e-9);
  }
}

TEST_CASE("symmetry and permutation invariance") {
  std::mt19937_64 gen(10);
  const auto x = random_cloud(gen, 7), y = random_cloud(gen, 7);
  const auto xs = shuffled(x, 1), ys = shuffled(y, 2);
  const std::vector<CostKind> kinds{CostKind::cd_l2(), CostKind::cd_l1(), CostKind::info_cd(),
                                    CostKind::emd(), CostKind::emd(EmdGround::sq_euclid)};
  for (const auto& k : kinds) {
    CAPTURE(k.name());
    CHECK(cost(k, x, y) == doctest::Approx(cost(k, y, x)).epsilon(1e-12));
    CHECK(cost(k, xs, ys) == doctest::Approx(cost(k, x, y)).epsilon(1e-12));
  }
  CHECK(fscore(x, y, {1.0}) == fscore(y, x, {1.0}));
  CHECK(fscore(xs, ys, {1.0}) == fscore(x, y, {1.0}));
}

TEST_CASE("costs are nonnegative; infocd(x, x) is empirically minimal") {
  std::mt19937_64 gen(11);
  std::uniform_int_distribution<std::size_t> size(1, 6);
  int violations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = size(gen);
    const auto x = random_cloud(gen, n), y = random_cloud(gen, n, 0.5);
    CHECK(chamfer_l2(x, y) >= 0.0);
    CHECK(chamfer_l1(x, y) >= 0.0);
    CHECK(emd(x, y) >= 0.0);
    CHECK(l2_paired(x, y) >= 0.0);
    if (infocd(x, x) > infocd(x, y) + 1e-9) ++violations;
  }
  CHECK(violations == 0);
}

TEST_CASE("cost applies the global intensity") {
  const PointCloud far({{10, 0, 0}});
  CostKind k = CostKind::l2();
  k.intensity = 0.044;
  CHECK(cost(k, kOrigin, far) == doctest::Approx(4.4).epsilon(1e-14));
  std::mt19937_64 gen(12);
  const auto x = random_cloud(gen, 9), y = random_cloud(gen, 9);
  for (auto base : {CostKind::cd_l1(), CostKind::cd_l2(), CostKind::info_cd(), CostKind::emd()}) {
    CAPTURE(base.name());
    CostKind one = base, hi = base, lo = base;
    one.intensity = 1.0;
    hi.intensity = 0.25;
    lo.intensity = 0.02;
    CostKind plain = base;
    CHECK(cost(one, x, y) == cost(plain, x, y));
    CHECK(cost(hi, x, y) / cost(lo, x, y) == doctest::Approx(12.5).epsilon(1e-12));
  }
}

TEST_CASE("cost kinds parse and validate") {
  CHECK(cost_kind_from_string("chamfer-l1").variant == CostVariant::chamfer_l1);
  CHECK(cost_kind_from_string("chamfer_l2").variant == CostVariant::chamfer_l2);
  CHECK(cost_kind_from_string("emd-sq").ground == EmdGround::sq_euclid);
  CHECK_THROWS_AS(cost_kind_from_string("hausdorff"), ConfigError);
  CostKind k = CostKind::info_cd();
  k.infocd.tau = 0.0;
  CHECK_THROWS_AS(k.validate(), ConfigError);
  k = CostKind::cd_l1();
  k.intensity = -1.0;
  CHECK_THROWS_AS(k.validate(), ConfigError);
  for (auto kind : {CostKind::l2(), CostKind::cd_l2(), CostKind::cd_l2_fwd(), CostKind::cd_l1(),
                    CostKind::info_cd(), CostKind::emd(), CostKind::emd(EmdGround::sq_euclid)}) {
    const auto back = cost_kind_from_string(kind.name());
    CHECK(back.variant == kind.variant);
    CHECK(back.ground == kind.ground);
  }
}
