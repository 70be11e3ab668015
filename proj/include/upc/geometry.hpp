#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace upc::geo {

using Point3 = std::array<double, 3>;

inline Point3 operator-(const Point3& a, const Point3& b) {
  return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}
inline double dot(const Point3& a, const Point3& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}
inline double squared_distance(const Point3& a, const Point3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

struct PointCloud {
  std::vector<Point3> points;
  std::optional<int> class_label;

  PointCloud() = default;
  explicit PointCloud(std::vector<Point3> pts, std::optional<int> label = std::nullopt)
      : points(std::move(pts)), class_label(label) {}

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  const Point3& operator[](std::size_t i) const { return points[i]; }

  // Throws ValidationError when empty or when a coordinate is not finite.
  void validate() const;

  friend bool operator==(const PointCloud&, const PointCloud&) = default;
};

struct BoundingBox {
  Point3 lo;
  Point3 hi;
  double diagonal() const;
};
BoundingBox bounding_box(const PointCloud& cloud);

// Affine map p -> (p - center) / scale produced by normalize_unit.
struct UnitTransform {
  Point3 center{0.0, 0.0, 0.0};
  double scale = 1.0;

  Point3 apply(const Point3& p) const;
  Point3 invert(const Point3& p) const;
  PointCloud apply(const PointCloud& cloud) const;
  PointCloud invert(const PointCloud& cloud) const;
};

// Transform that centers the bounding box at the origin and scales its
// largest half-extent to 1. Identity for clouds already normalized to
// within 1e-12, so normalize_unit is idempotent.
UnitTransform unit_transform(const PointCloud& cloud);
PointCloud normalize_unit(const PointCloud& cloud);

enum class ShapeKind { sphere, box, cylinder, torus, two_planes };

std::string to_string(ShapeKind kind);
// Throws ConfigError for unknown names.
ShapeKind shape_kind_from_string(const std::string& name);
const std::vector<ShapeKind>& all_shape_kinds();

struct ShapeSpec {
  ShapeKind kind = ShapeKind::sphere;
  // Per-axis scale. sphere: semi-axes; box: half-extents; cylinder: radius in
  // x/y from scale[0], half-height scale[2]; torus: major radius scale[0],
  // tube radius scale[1]; two_planes: half-extents of the L-shaped pair.
  Point3 scale{1.0, 1.0, 1.0};
  std::size_t n_points = 1024;
  std::uint64_t seed = 0;

  void validate() const;
};

// Uniform samples on the shape surface in the shape's own coordinates.
PointCloud sample_surface(const ShapeSpec& spec);
// sample_surface followed by normalize_unit.
PointCloud generate_shape(const ShapeSpec& spec);

// Keeps points with <p, normal> <= offset, preserving order.
// Throws ContractError for a zero normal, DegenerateCropError when empty.
PointCloud crop_halfspace(const PointCloud& cloud, const Point3& normal, double offset);

// Exactly n points: without replacement when n <= |cloud| (a prefix of a
// seeded Fisher-Yates shuffle), with replacement otherwise.
PointCloud resample(const PointCloud& cloud, std::size_t n, std::uint64_t seed);

// XYZ ("x y z" per line, '#' comments) or ASCII PLY, chosen by extension.
PointCloud read_cloud(const std::filesystem::path& path);
// Always XYZ; written with round-trip precision.
void write_cloud(const PointCloud& cloud, const std::filesystem::path& path);

PointCloud parse_xyz(const std::string& text);
PointCloud parse_ply(const std::string& text);

struct CloudPair {
  PointCloud incomplete;
  PointCloud complete_gt;
};

struct LabeledDataset {
  std::vector<CloudPair> pairs;  // class label carried on both clouds
  std::vector<std::string> class_names;
  std::vector<double> class_weights_source;
  std::vector<double> class_weights_target;

  std::size_t num_classes() const { return class_names.size(); }
  // Throws ValidationError when weights are negative or do not sum to 1.
  void validate() const;
};

struct CropConfig {
  double min_kept = 0.4;
  double max_kept = 0.7;
  int max_attempts = 1000;
};

// Random half-space crop whose kept fraction lies in [min_kept, max_kept].
// Planes outside the band are re-drawn.
PointCloud random_crop(const PointCloud& cloud, std::uint64_t seed, const CropConfig& cfg = {});

struct PairConfig {
  std::size_t n_complete = 64;
  std::size_t n_incomplete = 64;
  std::size_t n_surface = 2048;  // dense surface sample the crop is taken from
  CropConfig crop;
};

// Complete cloud normalized to the unit box; the incomplete cloud is a crop
// of the same surface sample mapped through the same transform.
CloudPair make_pair(const ShapeSpec& spec, const PairConfig& cfg, std::uint64_t seed);

// pairs_per_class instances of each class with per-instance random scales in
// [0.5, 1] per axis. Class weights follow the realized counts.
LabeledDataset make_shape_dataset(const std::vector<ShapeKind>& classes,
                                  std::size_t pairs_per_class, const PairConfig& cfg,
                                  std::uint64_t seed);

// Planar toy task: unit circles in z = 0 and their halves cut by a random
// line through the center.
LabeledDataset make_circle_dataset(std::size_t n_pairs, std::size_t n_points, std::uint64_t seed);

}  // namespace upc::geo
