#pragma once

#include <string>
#include <vector>

#include "upc/geometry.hpp"

namespace upc::costs {

using geo::PointCloud;

enum class CostVariant { l2_paired, chamfer_l2, chamfer_l2_fwd, chamfer_l1, infocd, emd };
enum class EmdGround { euclid, sq_euclid };

struct InfoCdParams {
  double tau = 2.0;        // denominator temperature
  double tau_prime = 1.0;  // numerator temperature
  // Exponent on the log-sum-exp denominator. 1 reproduces the printed
  // formula; the reference InfoCD code uses 1e-7.
  double scale_lambda = 1.0;
};

struct CostKind {
  CostVariant variant = CostVariant::chamfer_l1;
  InfoCdParams infocd;
  EmdGround ground = EmdGround::euclid;
  double intensity = 1.0;  // global multiplier c = intensity * base

  void validate() const;
  std::string name() const;

  static CostKind of(CostVariant v) {
    CostKind k;
    k.variant = v;
    return k;
  }
  static CostKind l2() { return of(CostVariant::l2_paired); }
  static CostKind cd_l2() { return of(CostVariant::chamfer_l2); }
  static CostKind cd_l2_fwd() { return of(CostVariant::chamfer_l2_fwd); }
  static CostKind cd_l1() { return of(CostVariant::chamfer_l1); }
  static CostKind info_cd(InfoCdParams p = {}) {
    CostKind k = of(CostVariant::infocd);
    k.infocd = p;
    return k;
  }
  static CostKind emd(EmdGround g = EmdGround::euclid) {
    CostKind k = of(CostVariant::emd);
    k.ground = g;
    return k;
  }
};

// Parses "l2", "chamfer-l2", "chamfer-l2-fwd", "chamfer-l1", "infocd",
// "emd", "emd-sq" (underscores accepted). Throws ConfigError otherwise.
CostKind cost_kind_from_string(const std::string& name);

struct MetricConfig {
  double fscore_alpha = 0.01;
};

// For each point of x, the squared distance to its nearest neighbor in y.
// Ties resolve to the lowest index in y.
std::vector<double> nearest_sq_distances(const PointCloud& x, const PointCloud& y);

double l2_paired(const PointCloud& x, const PointCloud& y);
double chamfer_l2(const PointCloud& x, const PointCloud& y);
double chamfer_l2_fwd(const PointCloud& x, const PointCloud& y);
double chamfer_l1(const PointCloud& x, const PointCloud& y);

// One direction of InfoCD with d_m = min_n |x_m - y_n| (Euclidean):
//   (1/|y|) * sum_m [ d_m / tau' + lambda * log sum_k exp(-d_k / tau) ]
// The log-sum-exp is evaluated with max subtraction.
double infocd_directional(const PointCloud& x, const PointCloud& y, const InfoCdParams& p = {});
double infocd(const PointCloud& x, const PointCloud& y, const InfoCdParams& p = {});

// Mean ground cost of the optimal one-to-one matching. Requires |x| = |y|.
double emd(const PointCloud& x, const PointCloud& y, EmdGround ground = EmdGround::euclid);

// F-score in percent; 0 when both precision and recall are 0.
double fscore(const PointCloud& x, const PointCloud& y, const MetricConfig& cfg = {});

// intensity * base(x, y)
double cost(const CostKind& kind, const PointCloud& x, const PointCloud& y);

}  // namespace upc::costs
