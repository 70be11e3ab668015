#include "upc/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "upc/errors.hpp"
#include "upc/rng.hpp"

namespace upc::geo {

void PointCloud::validate() const {
  if (points.empty()) throw ValidationError("empty cloud");
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (double c : points[i]) {
      if (!std::isfinite(c)) {
        throw ValidationError("non-finite coordinate at point " + std::to_string(i));
      }
    }
  }
}

double BoundingBox::diagonal() const { return std::sqrt(squared_distance(lo, hi)); }

BoundingBox bounding_box(const PointCloud& cloud) {
  require(!cloud.empty(), "bounding_box: empty cloud");
  BoundingBox box{cloud[0], cloud[0]};
  for (const auto& p : cloud.points) {
    for (int a = 0; a < 3; ++a) {
      box.lo[a] = std::min(box.lo[a], p[a]);
      box.hi[a] = std::max(box.hi[a], p[a]);
    }
  }
  return box;
}

Point3 UnitTransform::apply(const Point3& p) const {
  return {(p[0] - center[0]) / scale, (p[1] - center[1]) / scale, (p[2] - center[2]) / scale};
}

Point3 UnitTransform::invert(const Point3& p) const {
  return {p[0] * scale + center[0], p[1] * scale + center[1], p[2] * scale + center[2]};
}

PointCloud UnitTransform::apply(const PointCloud& cloud) const {
  PointCloud out;
  out.class_label = cloud.class_label;
  out.points.reserve(cloud.size());
  for (const auto& p : cloud.points) out.points.push_back(apply(p));
  return out;
}

PointCloud UnitTransform::invert(const PointCloud& cloud) const {
  PointCloud out;
  out.class_label = cloud.class_label;
  out.points.reserve(cloud.size());
  for (const auto& p : cloud.points) out.points.push_back(invert(p));
  return out;
}

UnitTransform unit_transform(const PointCloud& cloud) {
  cloud.validate();
  const BoundingBox box = bounding_box(cloud);
  UnitTransform t;
  double half = 0.0;
  bool centered = true;
  for (int a = 0; a < 3; ++a) {
    t.center[a] = 0.5 * (box.lo[a] + box.hi[a]);
    half = std::max(half, 0.5 * (box.hi[a] - box.lo[a]));
    centered = centered && std::abs(t.center[a]) <= 1e-12;
  }
  if (centered && std::abs(half - 1.0) <= 1e-12) return UnitTransform{};
  t.scale = half > 0.0 ? half : 1.0;
  return t;
}

PointCloud normalize_unit(const PointCloud& cloud) { return unit_transform(cloud).apply(cloud); }

namespace {

const std::vector<std::pair<ShapeKind, std::string>>& kind_names() {
  static const std::vector<std::pair<ShapeKind, std::string>> names = {
      {ShapeKind::sphere, "sphere"},
      {ShapeKind::box, "box"},
      {ShapeKind::cylinder, "cylinder"},
      {ShapeKind::torus, "torus"},
      {ShapeKind::two_planes, "two_planes"},
  };
  return names;
}

Point3 random_unit_vector(Rng& rng) {
  for (;;) {
    Point3 v{rng.normal(), rng.normal(), rng.normal()};
    const double n = std::sqrt(dot(v, v));
    if (n > 1e-12) return {v[0] / n, v[1] / n, v[2] / n};
  }
}

// Index drawn proportionally to the given nonnegative weights.
std::size_t pick_weighted(Rng& rng, const std::vector<double>& weights) {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  return weights.size() - 1;
}

Point3 sample_ellipsoid(Rng& rng, const Point3& s) {
  // Rejection on the sphere parametrization gives the uniform surface measure.
  const double a = s[0], b = s[1], c = s[2];
  const double g_max = std::max({b * c, a * c, a * b});
  for (;;) {
    const Point3 u = random_unit_vector(rng);
    const double g = std::sqrt((b * c * u[0]) * (b * c * u[0]) + (a * c * u[1]) * (a * c * u[1]) +
                               (a * b * u[2]) * (a * b * u[2]));
    if (rng.uniform() * g_max <= g) return {a * u[0], b * u[1], c * u[2]};
  }
}

Point3 sample_box(Rng& rng, const Point3& s) {
  const double ax = 4.0 * s[1] * s[2], ay = 4.0 * s[0] * s[2], az = 4.0 * s[0] * s[1];
  const std::size_t face = pick_weighted(rng, {ax, ax, ay, ay, az, az});
  const int axis = static_cast<int>(face / 2);
  const double sign = (face % 2 == 0) ? 1.0 : -1.0;
  Point3 p{};
  for (int a = 0; a < 3; ++a) p[a] = rng.uniform(-s[a], s[a]);
  p[axis] = sign * s[axis];
  return p;
}

Point3 sample_cylinder(Rng& rng, const Point3& s) {
  const double r = s[0], h = s[2];
  const double lateral = 2.0 * M_PI * r * 2.0 * h;
  const double cap = M_PI * r * r;
  const std::size_t part = pick_weighted(rng, {lateral, cap, cap});
  const double theta = rng.uniform(0.0, 2.0 * M_PI);
  if (part == 0) return {r * std::cos(theta), r * std::sin(theta), rng.uniform(-h, h)};
  const double rho = r * std::sqrt(rng.uniform());
  return {rho * std::cos(theta), rho * std::sin(theta), part == 1 ? h : -h};
}

Point3 sample_torus(Rng& rng, const Point3& s) {
  const double big = s[0], tube = s[1];
  double theta;
  for (;;) {
    theta = rng.uniform(0.0, 2.0 * M_PI);
    if (rng.uniform() * (big + tube) <= big + tube * std::cos(theta)) break;
  }
  const double phi = rng.uniform(0.0, 2.0 * M_PI);
  const double ring = big + tube * std::cos(theta);
  return {ring * std::cos(phi), ring * std::sin(phi), tube * std::sin(theta)};
}

Point3 sample_two_planes(Rng& rng, const Point3& s) {
  // Floor z = -sz and wall x = -sx sharing the edge along y.
  const double floor_area = 4.0 * s[0] * s[1], wall_area = 4.0 * s[1] * s[2];
  if (pick_weighted(rng, {floor_area, wall_area}) == 0) {
    return {rng.uniform(-s[0], s[0]), rng.uniform(-s[1], s[1]), -s[2]};
  }
  return {-s[0], rng.uniform(-s[1], s[1]), rng.uniform(-s[2], s[2])};
}

}  // namespace

std::string to_string(ShapeKind kind) {
  for (const auto& [k, name] : kind_names()) {
    if (k == kind) return name;
  }
  return "unknown";
}

ShapeKind shape_kind_from_string(const std::string& name) {
  for (const auto& [k, n] : kind_names()) {
    if (n == name) return k;
  }
  throw ConfigError("unknown shape kind '" + name + "'");
}

const std::vector<ShapeKind>& all_shape_kinds() {
  static const std::vector<ShapeKind> kinds = {ShapeKind::sphere, ShapeKind::box,
                                               ShapeKind::cylinder, ShapeKind::torus,
                                               ShapeKind::two_planes};
  return kinds;
}

void ShapeSpec::validate() const {
  if (n_points < 8) throw ConfigError("ShapeSpec: n_points must be >= 8");
  for (double s : scale) {
    if (!(s > 0.0) || !std::isfinite(s)) throw ConfigError("ShapeSpec: scales must be positive");
  }
  if (kind == ShapeKind::torus && !(scale[1] < scale[0])) {
    throw ConfigError("ShapeSpec: torus tube radius must be below the major radius");
  }
}

PointCloud sample_surface(const ShapeSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  PointCloud cloud;
  cloud.points.reserve(spec.n_points);
  for (std::size_t i = 0; i < spec.n_points; ++i) {
    switch (spec.kind) {
      case ShapeKind::sphere: cloud.points.push_back(sample_ellipsoid(rng, spec.scale)); break;
      case ShapeKind::box: cloud.points.push_back(sample_box(rng, spec.scale)); break;
      case ShapeKind::cylinder: cloud.points.push_back(sample_cylinder(rng, spec.scale)); break;
      case ShapeKind::torus: cloud.points.push_back(sample_torus(rng, spec.scale)); break;
      case ShapeKind::two_planes: cloud.points.push_back(sample_two_planes(rng, spec.scale)); break;
      default: throw ConfigError("unknown shape kind");
    }
  }
  return cloud;
}

PointCloud generate_shape(const ShapeSpec& spec) { return normalize_unit(sample_surface(spec)); }

PointCloud crop_halfspace(const PointCloud& cloud, const Point3& normal, double offset) {
  require(dot(normal, normal) > 0.0, "crop_halfspace: normal must be nonzero");
  PointCloud out;
  out.class_label = cloud.class_label;
  for (const auto& p : cloud.points) {
    if (dot(p, normal) <= offset) out.points.push_back(p);
  }
  if (out.empty()) throw DegenerateCropError("crop_halfspace: no point survived the crop");
  return out;
}

PointCloud resample(const PointCloud& cloud, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ConfigError("resample: n must be positive");
  require(!cloud.empty(), "resample: empty cloud");
  Rng rng(seed);
  PointCloud out;
  out.class_label = cloud.class_label;
  out.points.reserve(n);
  if (n <= cloud.size()) {
    std::vector<std::size_t> idx(cloud.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = i + rng.below(idx.size() - i);
      std::swap(idx[i], idx[j]);
      out.points.push_back(cloud[idx[i]]);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) out.points.push_back(cloud[rng.below(cloud.size())]);
  }
  return out;
}

namespace {

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> tokens;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) tokens.push_back(tok);
  return tokens;
}

bool parse_double(const std::string& tok, double& out) {
  char* end = nullptr;
  out = std::strtod(tok.c_str(), &end);
  return end != tok.c_str() && *end == '\0';
}

Point3 parse_point(const std::vector<std::string>& tokens, std::size_t line_no) {
  Point3 p{};
  for (int a = 0; a < 3; ++a) {
    if (!parse_double(tokens[a], p[a])) {
      throw ParseError("malformed coordinate '" + tokens[a] + "'", line_no);
    }
    if (!std::isfinite(p[a])) {
      throw ValidationError("non-finite coordinate (line " + std::to_string(line_no) + ")");
    }
  }
  return p;
}

}  // namespace

PointCloud parse_xyz(const std::string& text) {
  PointCloud cloud;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto tokens = split_ws(line);
    if (tokens.empty()) continue;
    if (tokens.size() != 3) {
      throw ParseError("expected 3 coordinates, got " + std::to_string(tokens.size()), line_no);
    }
    cloud.points.push_back(parse_point(tokens, line_no));
  }
  if (cloud.empty()) throw ValidationError("empty cloud");
  return cloud;
}

PointCloud parse_ply(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  auto next_line = [&]() -> bool {
    if (!std::getline(in, line)) return false;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  };
  if (!next_line() || line != "ply") throw ParseError("missing 'ply' magic", 1);

  struct Element {
    std::string name;
    std::size_t count = 0;
    std::vector<std::string> properties;
  };
  std::vector<Element> elements;
  bool ascii = false;
  for (;;) {
    if (!next_line()) throw ParseError("unterminated PLY header", line_no);
    const auto tokens = split_ws(line);
    if (tokens.empty() || tokens[0] == "comment" || tokens[0] == "obj_info") continue;
    if (tokens[0] == "end_header") break;
    if (tokens[0] == "format") {
      if (tokens.size() < 2 || tokens[1] != "ascii") {
        throw ParseError("only ASCII PLY is supported", line_no);
      }
      ascii = true;
    } else if (tokens[0] == "element") {
      if (tokens.size() != 3) throw ParseError("malformed element line", line_no);
      Element e;
      e.name = tokens[1];
      try {
        e.count = std::stoul(tokens[2]);
      } catch (const std::exception&) {
        throw ParseError("malformed element count", line_no);
      }
      elements.push_back(e);
    } else if (tokens[0] == "property") {
      if (elements.empty() || tokens.size() < 3) throw ParseError("stray property", line_no);
      if (tokens[1] == "list") {
        elements.back().properties.push_back("<list>");
      } else {
        elements.back().properties.push_back(tokens.back());
      }
    } else {
      throw ParseError("unexpected header keyword '" + tokens[0] + "'", line_no);
    }
  }
  if (!ascii) throw ParseError("missing format line", line_no);

  PointCloud cloud;
  for (const auto& e : elements) {
    if (e.name != "vertex") {
      for (std::size_t i = 0; i < e.count; ++i) {
        if (!next_line()) throw ParseError("truncated PLY body", line_no);
      }
      continue;
    }
    std::array<int, 3> col{-1, -1, -1};
    for (std::size_t k = 0; k < e.properties.size(); ++k) {
      if (e.properties[k] == "x") col[0] = static_cast<int>(k);
      if (e.properties[k] == "y") col[1] = static_cast<int>(k);
      if (e.properties[k] == "z") col[2] = static_cast<int>(k);
    }
    if (col[0] < 0 || col[1] < 0 || col[2] < 0) {
      throw ParseError("vertex element lacks x/y/z", line_no);
    }
    for (std::size_t i = 0; i < e.count; ++i) {
      if (!next_line()) throw ParseError("truncated PLY body", line_no);
      const auto tokens = split_ws(line);
      if (tokens.size() < e.properties.size()) throw ParseError("short vertex line", line_no);
      cloud.points.push_back(parse_point({tokens[col[0]], tokens[col[1]], tokens[col[2]]}, line_no));
    }
  }
  if (cloud.empty()) throw ValidationError("empty cloud");
  return cloud;
}

PointCloud read_cloud(const std::filesystem::path& path) {
  const std::string text = slurp(path);
  if (path.extension() == ".ply") return parse_ply(text);
  return parse_xyz(text);
}

void write_cloud(const PointCloud& cloud, const std::filesystem::path& path) {
  cloud.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  char buf[96];
  for (const auto& p : cloud.points) {
    std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g\n", p[0], p[1], p[2]);
    out << buf;
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void LabeledDataset::validate() const {
  if (class_names.empty()) throw ValidationError("dataset has no classes");
  auto check = [&](const std::vector<double>& w, const char* which) {
    if (w.size() != class_names.size()) {
      throw ValidationError(std::string(which) + " weights do not match class count");
    }
    double sum = 0.0;
    for (double x : w) {
      if (!(x >= 0.0)) throw ValidationError(std::string(which) + " weights must be nonnegative");
      sum += x;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ValidationError(std::string(which) + " weights must sum to 1");
  };
  check(class_weights_source, "source");
  check(class_weights_target, "target");
}

PointCloud random_crop(const PointCloud& cloud, std::uint64_t seed, const CropConfig& cfg) {
  require(!cloud.empty(), "random_crop: empty cloud");
  Rng rng(seed);
  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    const Point3 n = random_unit_vector(rng);
    double lo = dot(cloud[0], n), hi = lo;
    for (const auto& p : cloud.points) {
      lo = std::min(lo, dot(p, n));
      hi = std::max(hi, dot(p, n));
    }
    const double offset = rng.uniform(lo, hi);
    std::size_t kept = 0;
    for (const auto& p : cloud.points) kept += dot(p, n) <= offset ? 1 : 0;
    const double frac = static_cast<double>(kept) / static_cast<double>(cloud.size());
    if (frac >= cfg.min_kept && frac <= cfg.max_kept) return crop_halfspace(cloud, n, offset);
  }
  throw DegenerateCropError("random_crop: no plane within the kept-fraction band");
}

CloudPair make_pair(const ShapeSpec& spec, const PairConfig& cfg, std::uint64_t seed) {
  ShapeSpec dense = spec;
  dense.n_points = std::max(cfg.n_surface, spec.n_points);
  dense.seed = derive_seed(seed, "surface");
  const PointCloud surface = sample_surface(dense);

  PointCloud complete = resample(surface, cfg.n_complete, derive_seed(seed, "complete"));
  const UnitTransform t = unit_transform(complete);
  complete = t.apply(complete);
  const PointCloud cropped = random_crop(surface, derive_seed(seed, "crop"), cfg.crop);
  PointCloud incomplete = t.apply(resample(cropped, cfg.n_incomplete, derive_seed(seed, "incomplete")));
  return {std::move(incomplete), std::move(complete)};
}

namespace {

void set_uniform_weights(LabeledDataset& ds) {
  std::vector<double> counts(ds.num_classes(), 0.0);
  for (const auto& p : ds.pairs) counts[static_cast<std::size_t>(*p.complete_gt.class_label)] += 1.0;
  const double total = static_cast<double>(ds.pairs.size());
  for (auto& c : counts) c /= total;
  ds.class_weights_source = counts;
  ds.class_weights_target = counts;
}

}  // namespace

LabeledDataset make_shape_dataset(const std::vector<ShapeKind>& classes,
                                  std::size_t pairs_per_class, const PairConfig& cfg,
                                  std::uint64_t seed) {
  if (classes.empty()) throw ConfigError("make_shape_dataset: no classes");
  if (pairs_per_class == 0) throw ConfigError("make_shape_dataset: pairs per class must be positive");
  LabeledDataset ds;
  for (ShapeKind k : classes) ds.class_names.push_back(to_string(k));
  for (std::size_t c = 0; c < classes.size(); ++c) {
    for (std::size_t i = 0; i < pairs_per_class; ++i) {
      const std::uint64_t inst =
          derive_seed(seed, "pair/" + ds.class_names[c] + "/" + std::to_string(i));
      Rng rng(derive_seed(inst, "scale"));
      ShapeSpec spec;
      spec.kind = classes[c];
      for (auto& s : spec.scale) s = rng.uniform(0.5, 1.0);
      if (spec.kind == ShapeKind::torus) spec.scale[1] = spec.scale[0] * rng.uniform(0.2, 0.45);
      spec.n_points = cfg.n_surface;
      CloudPair pair = make_pair(spec, cfg, inst);
      pair.incomplete.class_label = static_cast<int>(c);
      pair.complete_gt.class_label = static_cast<int>(c);
      ds.pairs.push_back(std::move(pair));
    }
  }
  set_uniform_weights(ds);
  return ds;
}

LabeledDataset make_circle_dataset(std::size_t n_pairs, std::size_t n_points, std::uint64_t seed) {
  if (n_pairs == 0) throw ConfigError("make_circle_dataset: n_pairs must be positive");
  if (n_points < 8) throw ConfigError("make_circle_dataset: n_points must be >= 8");
  LabeledDataset ds;
  ds.class_names = {"circle"};
  for (std::size_t i = 0; i < n_pairs; ++i) {
    const std::uint64_t inst = derive_seed(seed, "circle/" + std::to_string(i));
    Rng rng(derive_seed(inst, "surface"));
    PointCloud ring;
    for (std::size_t k = 0; k < 1024; ++k) {
      const double a = rng.uniform(0.0, 2.0 * M_PI);
      ring.points.push_back({std::cos(a), std::sin(a), 0.0});
    }
    PointCloud complete = resample(ring, n_points, derive_seed(inst, "complete"));
    const UnitTransform t = unit_transform(complete);
    complete = t.apply(complete);
    const double cut = rng.uniform(0.0, 2.0 * M_PI);
    const PointCloud half = crop_halfspace(ring, {std::cos(cut), std::sin(cut), 0.0}, 0.0);
    PointCloud incomplete = t.apply(resample(half, n_points, derive_seed(inst, "incomplete")));
    incomplete.class_label = 0;
    complete.class_label = 0;
    ds.pairs.push_back({std::move(incomplete), std::move(complete)});
  }
  set_uniform_weights(ds);
  return ds;
}

}  // namespace upc::geo
