#include "upc/costs.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "upc/discrete_ot.hpp"
#include "upc/errors.hpp"

namespace upc::costs {

void CostKind::validate() const {
  if (!(intensity > 0.0)) throw ConfigError("cost intensity must be positive");
  if (variant == CostVariant::infocd) {
    if (!(infocd.tau > 0.0) || !(infocd.tau_prime > 0.0)) {
      throw ConfigError("InfoCD temperatures must be positive");
    }
    if (!(infocd.scale_lambda >= 0.0)) throw ConfigError("InfoCD lambda must be nonnegative");
  }
}

std::string CostKind::name() const {
  switch (variant) {
    case CostVariant::l2_paired: return "l2";
    case CostVariant::chamfer_l2: return "chamfer-l2";
    case CostVariant::chamfer_l2_fwd: return "chamfer-l2-fwd";
    case CostVariant::chamfer_l1: return "chamfer-l1";
    case CostVariant::infocd: return "infocd";
    case CostVariant::emd: return ground == EmdGround::euclid ? "emd" : "emd-sq";
  }
  return "unknown";
}

CostKind cost_kind_from_string(const std::string& raw) {
  std::string name = raw;
  std::replace(name.begin(), name.end(), '_', '-');
  if (name == "l2" || name == "l2-paired") return CostKind::l2();
  if (name == "chamfer-l2" || name == "cd-l2") return CostKind::cd_l2();
  if (name == "chamfer-l2-fwd" || name == "cd-l2-fwd") return CostKind::cd_l2_fwd();
  if (name == "chamfer-l1" || name == "cd-l1") return CostKind::cd_l1();
  if (name == "infocd") return CostKind::info_cd();
  if (name == "emd") return CostKind::emd(EmdGround::euclid);
  if (name == "emd-sq") return CostKind::emd(EmdGround::sq_euclid);
  throw ConfigError("unknown cost kind '" + raw + "'");
}

namespace {

void require_nonempty(const PointCloud& x, const PointCloud& y, const char* what) {
  if (x.empty() || y.empty()) throw ContractError(std::string(what) + ": empty cloud");
}

double sum(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

}  // namespace

std::vector<double> nearest_sq_distances(const PointCloud& x, const PointCloud& y) {
  require_nonempty(x, y, "nearest_sq_distances");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : y.points) best = std::min(best, geo::squared_distance(x[i], q));
    out[i] = best;
  }
  return out;
}

double l2_paired(const PointCloud& x, const PointCloud& y) {
  if (x.size() != y.size()) {
    throw ContractError("l2_paired: size mismatch (" + std::to_string(x.size()) + " vs " +
                        std::to_string(y.size()) + ")");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += geo::squared_distance(x[i], y[i]);
  return s;
}

double chamfer_l2_fwd(const PointCloud& x, const PointCloud& y) {
  return sum(nearest_sq_distances(x, y));
}

double chamfer_l2(const PointCloud& x, const PointCloud& y) {
  return chamfer_l2_fwd(x, y) + chamfer_l2_fwd(y, x);
}

double chamfer_l1(const PointCloud& x, const PointCloud& y) {
  auto mean_dist = [](const std::vector<double>& sq) {
    double s = 0.0;
    for (double v : sq) s += std::sqrt(v);
    return s / static_cast<double>(sq.size());
  };
  return 0.5 * (mean_dist(nearest_sq_distances(x, y)) + mean_dist(nearest_sq_distances(y, x)));
}

double infocd_directional(const PointCloud& x, const PointCloud& y, const InfoCdParams& p) {
  require_nonempty(x, y, "infocd");
  const auto sq = nearest_sq_distances(x, y);
  std::vector<double> d(sq.size());
  double d_min = std::numeric_limits<double>::infinity();
  for (std::size_t m = 0; m < sq.size(); ++m) {
    d[m] = std::sqrt(sq[m]);
    d_min = std::min(d_min, d[m]);
  }
  // log sum_k exp(-d_k / tau), shifted by the largest exponent.
  double acc = 0.0;
  for (double dk : d) acc += std::exp(-(dk - d_min) / p.tau);
  const double lse = -d_min / p.tau + std::log(acc);

  double total = 0.0;
  for (std::size_t m = 0; m < d.size(); ++m) {
    const double term = d[m] / p.tau_prime + p.scale_lambda * lse;
    if (!std::isfinite(term)) {
      throw NumericalError("infocd: non-finite term at index " + std::to_string(m));
    }
    total += term;
  }
  return total / static_cast<double>(y.size());
}

double infocd(const PointCloud& x, const PointCloud& y, const InfoCdParams& p) {
  return infocd_directional(x, y, p) + infocd_directional(y, x, p);
}

double emd(const PointCloud& x, const PointCloud& y, EmdGround ground) {
  require_nonempty(x, y, "emd");
  if (x.size() != y.size()) throw ContractError("emd: clouds must have equal sizes");
  const std::size_t n = x.size();
  std::vector<double> c(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double sq = geo::squared_distance(x[i], y[j]);
      c[i * n + j] = ground == EmdGround::euclid ? std::sqrt(sq) : sq;
    }
  }
  return ot::assignment_value(c, n) / static_cast<double>(n);
}

double fscore(const PointCloud& x, const PointCloud& y, const MetricConfig& cfg) {
  require_nonempty(x, y, "fscore");
  if (!(cfg.fscore_alpha > 0.0)) throw ConfigError("fscore: alpha must be positive");
  const double a2 = cfg.fscore_alpha * cfg.fscore_alpha;
  auto fraction_within = [a2](const std::vector<double>& sq) {
    std::size_t hit = 0;
    for (double v : sq) hit += v < a2 ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(sq.size());
  };
  const double precision = fraction_within(nearest_sq_distances(x, y));
  const double recall = fraction_within(nearest_sq_distances(y, x));
  if (precision + recall == 0.0) return 0.0;
  return 100.0 * 2.0 * precision * recall / (precision + recall);
}

double cost(const CostKind& kind, const PointCloud& x, const PointCloud& y) {
  kind.validate();
  double base = 0.0;
  switch (kind.variant) {
    case CostVariant::l2_paired: base = l2_paired(x, y); break;
    case CostVariant::chamfer_l2: base = chamfer_l2(x, y); break;
    case CostVariant::chamfer_l2_fwd: base = chamfer_l2_fwd(x, y); break;
    case CostVariant::chamfer_l1: base = chamfer_l1(x, y); break;
    case CostVariant::infocd: base = infocd(x, y, kind.infocd); break;
    case CostVariant::emd: base = emd(x, y, kind.ground); break;
  }
  return kind.intensity * base;
}

}  // namespace upc::costs
