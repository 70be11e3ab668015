#include "upc/cli.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <openssl/evp.h>

#include "upc/costs.hpp"
#include "upc/errors.hpp"
#include "upc/json_util.hpp"
#include "upc/rng.hpp"

namespace upc::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void write_atomic(const fs::path& path, const std::string& text) {
  fs::path tmp = path;
  tmp += ".tmp";
  write_file(tmp, text);
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename '" + tmp.string() + "': " + ec.message());
}

json read_json_file(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw IoError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

// Errors from a file carry its name.
geo::PointCloud read_cloud_named(const fs::path& path) {
  try {
    return geo::read_cloud(path);
  } catch (const IoError& e) {
    const std::string msg = e.what();
    if (msg.find(path.string()) != std::string::npos) throw;
    throw IoError(path.string() + ": " + msg);
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

json penalty_to_json(double rho) {
  if (std::isinf(rho) && rho > 0) return "inf";
  return rho;
}

double penalty_from_json(const json& v, const std::string& key) {
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) {
    const std::string s = v.get<std::string>();
    if (s == "inf" || s == "infinity") return std::numeric_limits<double>::infinity();
    try {
      std::size_t used = 0;
      const double x = std::stod(s, &used);
      if (used == s.size()) return x;
    } catch (const std::exception&) {
    }
  }
  throw ConfigError("config key '" + key + "' must be a number or \"inf\"");
}

std::vector<std::string> without(std::vector<std::string> keys, const std::string& drop) {
  keys.erase(std::remove(keys.begin(), keys.end(), drop), keys.end());
  return keys;
}

const std::vector<std::string> kSections{"trainer", "solver", "retrieval", "imbalance"};

}  // namespace

// ---------------------------------------------------------------------------
// Config

void Config::validate() const {
  trainer.validate();
  solver.validate();
  retrieval.validate();
  imbalance.validate();
  if (solver_method != "sinkhorn" && solver_method != "unbalanced" && solver_method != "exact" &&
      solver_method != "lp") {
    throw ConfigError("solver.method must be one of sinkhorn, unbalanced, exact, lp (got '" +
                      solver_method + "')");
  }
}

Config default_config() {
  Config c;
  c.trainer.seed = c.seed;
  c.retrieval.seed = c.seed;
  c.imbalance.seed = c.seed;
  return c;
}

json to_json(const Config& c) {
  json t = trainer::to_json(c.trainer);
  t.erase("seed");
  json r = exp::to_json(c.retrieval);
  r.erase("seed");
  json im = exp::to_json(c.imbalance);
  im.erase("seed");
  json s{{"method", c.solver_method},
         {"epsilon", c.solver.epsilon},
         {"rho1", penalty_to_json(c.solver.rho1)},
         {"rho2", penalty_to_json(c.solver.rho2)},
         {"max_iters", c.solver.max_iters},
         {"tol", c.solver.tol},
         {"eps_scaling", c.solver.eps_scaling}};
  return json{{"seed", c.seed}, {"trainer", t}, {"solver", s}, {"retrieval", r}, {"imbalance", im}};
}

Config config_from_json(const json& j, const Config& base) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& item : j.items()) {
    if (item.key() == "seed") continue;
    if (std::find(kSections.begin(), kSections.end(), item.key()) == kSections.end()) {
      throw ConfigError("unknown config key '" + item.key() + "'");
    }
  }
  Config c = base;
  read_key(j, "seed", c.seed, "config");
  if (j.contains("trainer")) {
    const json& t = j.at("trainer");
    check_keys(t, without(trainer::trainer_config_keys(), "seed"), "trainer");
    c.trainer = trainer::trainer_config_from_json(t, base.trainer);
  }
  if (j.contains("retrieval")) {
    const json& r = j.at("retrieval");
    check_keys(r, {"kinds", "k"}, "retrieval");
    c.retrieval = exp::retrieval_config_from_json(r, base.retrieval);
  }
  if (j.contains("imbalance")) {
    const json& im = j.at("imbalance");
    check_keys(im, without(exp::imbalance_spec_keys(), "seed"), "imbalance");
    c.imbalance = exp::imbalance_spec_from_json(im, base.imbalance);
  }
  if (j.contains("solver")) {
    const json& s = j.at("solver");
    const std::string sec = "solver";
    check_keys(s, {"method", "epsilon", "rho1", "rho2", "max_iters", "tol", "eps_scaling"}, sec);
    read_key(s, "method", c.solver_method, sec);
    read_key(s, "epsilon", c.solver.epsilon, sec);
    if (s.contains("rho1")) c.solver.rho1 = penalty_from_json(s.at("rho1"), "solver.rho1");
    if (s.contains("rho2")) c.solver.rho2 = penalty_from_json(s.at("rho2"), "solver.rho2");
    read_key(s, "max_iters", c.solver.max_iters, sec);
    read_key(s, "tol", c.solver.tol, sec);
    read_key(s, "eps_scaling", c.solver.eps_scaling, sec);
  }
  c.trainer.seed = c.seed;
  c.retrieval.seed = c.seed;
  c.imbalance.seed = c.seed;
  c.validate();
  return c;
}

namespace {

json parse_scalar(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return text;
  }
}

}  // namespace

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json* slot = nullptr;
  const auto dot = key.find('.');
  if (dot == std::string::npos) {
    if (key != "seed") throw ConfigError("unknown config key '" + key + "'");
    slot = &doc["seed"];
  } else {
    const std::string sec = key.substr(0, dot);
    const std::string name = key.substr(dot + 1);
    if (!doc.contains(sec) || !doc[sec].is_object()) {
      throw ConfigError("unknown config key '" + key + "'");
    }
    if (!doc[sec].contains(name)) throw ConfigError("unknown config key '" + key + "'");
    slot = &doc[sec][name];
  }
  json value = parse_scalar(text);
  if (slot->is_array() && !value.is_array()) {
    json arr = json::array();
    if (value.is_string()) {
      std::stringstream ss(text);
      std::string part;
      while (std::getline(ss, part, ',')) {
        if (!part.empty()) arr.push_back(parse_scalar(part));
      }
    } else {
      arr.push_back(value);
    }
    value = arr;
  }
  *slot = value;
}

std::string describe_config_keys(const Config& defaults) {
  const json doc = to_json(defaults);
  std::ostringstream os;
  os << "Config keys (set with --set key=value or a --config JSON file):\n";
  os << "  seed = " << doc.at("seed").dump() << "\n";
  for (const auto& sec : kSections) {
    for (const auto& item : doc.at(sec).items()) {
      os << "  " << sec << "." << item.key() << " = " << item.value().dump() << "\n";
    }
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Checksums and manifests

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("sha256 failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_file(path)); }

json to_json(const RunManifest& m) {
  json outs = json::array();
  for (const auto& o : m.outputs) outs.push_back(json{{"path", o.path}, {"sha256", o.sha256}});
  return json{{"command", m.command},   {"args", m.args},         {"config", m.config},
              {"seed", m.seed},         {"version", m.version},   {"started", m.started},
              {"finished", m.finished}, {"status", m.status},     {"message", m.message},
              {"outputs", outs}};
}

RunManifest manifest_from_json(const json& j) {
  RunManifest m;
  try {
    m.command = j.at("command").get<std::string>();
    m.args = j.at("args");
    m.config = j.at("config");
    m.seed = j.at("seed").get<std::uint64_t>();
    m.version = j.at("version").get<std::string>();
    m.started = j.at("started").get<std::string>();
    m.finished = j.at("finished").get<std::string>();
    m.status = j.at("status").get<std::string>();
    m.message = j.value("message", "");
    for (const auto& o : j.at("outputs")) {
      m.outputs.push_back({o.at("path").get<std::string>(), o.at("sha256").get<std::string>()});
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed manifest: ") + e.what());
  }
  return m;
}

void write_manifest(const RunManifest& m, const fs::path& path) {
  write_atomic(path, to_json(m).dump(2) + "\n");
}

RunManifest read_manifest(const fs::path& path) { return manifest_from_json(read_json_file(path)); }

// ---------------------------------------------------------------------------
// Dataset directories

std::vector<std::string> write_dataset(const geo::LabeledDataset& dataset, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "clouds", ec);
  if (ec) throw IoError("cannot create '" + (dir / "clouds").string() + "': " + ec.message());
  std::vector<std::string> files;
  std::string index = "path_incomplete,path_complete,class\n";
  for (std::size_t i = 0; i < dataset.pairs.size(); ++i) {
    const auto& p = dataset.pairs[i];
    const int label = p.complete_gt.class_label.value_or(0);
    if (label < 0 || static_cast<std::size_t>(label) >= dataset.class_names.size()) {
      throw ContractError("write_dataset: pair " + std::to_string(i) + " has no valid class");
    }
    char stem[32];
    std::snprintf(stem, sizeof stem, "clouds/%05zu", i);
    const std::string inc = std::string(stem) + "_incomplete.xyz";
    const std::string com = std::string(stem) + "_complete.xyz";
    geo::write_cloud(p.incomplete, dir / inc);
    geo::write_cloud(p.complete_gt, dir / com);
    files.push_back(inc);
    files.push_back(com);
    index += inc + "," + com + "," + dataset.class_names[static_cast<std::size_t>(label)] + "\n";
  }
  write_file(dir / "index.csv", index);
  files.push_back("index.csv");
  return files;
}

geo::LabeledDataset load_dataset(const fs::path& dir) {
  const fs::path index_path = dir / "index.csv";
  if (!fs::exists(index_path)) throw IoError("no index.csv in '" + dir.string() + "'");
  std::istringstream in(read_file(index_path));
  std::string line;
  std::size_t lineno = 0;
  geo::LabeledDataset ds;
  std::vector<std::size_t> counts;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (lineno == 1) {
      if (line != "path_incomplete,path_complete,class") {
        throw ParseError(index_path.string() + ": unexpected header", lineno);
      }
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string part;
    while (std::getline(ss, part, ',')) f.push_back(part);
    if (f.size() != 3 || f[0].empty() || f[1].empty() || f[2].empty()) {
      throw ParseError(index_path.string() + ": expected 3 fields", lineno);
    }
    auto it = std::find(ds.class_names.begin(), ds.class_names.end(), f[2]);
    if (it == ds.class_names.end()) {
      ds.class_names.push_back(f[2]);
      counts.push_back(0);
      it = ds.class_names.end() - 1;
    }
    const int label = static_cast<int>(it - ds.class_names.begin());
    ++counts[static_cast<std::size_t>(label)];
    geo::CloudPair p;
    p.incomplete = read_cloud_named(dir / f[0]);
    p.complete_gt = read_cloud_named(dir / f[1]);
    p.incomplete.class_label = label;
    p.complete_gt.class_label = label;
    ds.pairs.push_back(std::move(p));
  }
  if (ds.pairs.empty()) throw IoError("'" + index_path.string() + "' lists no pairs");
  for (std::size_t c : counts) {
    const double w = static_cast<double>(c) / static_cast<double>(ds.pairs.size());
    ds.class_weights_source.push_back(w);
    ds.class_weights_target.push_back(w);
  }
  ds.validate();
  return ds;
}

fs::path resolve_path(const fs::path& p) {
  const char* root = std::getenv(kOutputRootEnv);
  if (p.is_relative() && root != nullptr && *root != '\0') return fs::path(root) / p;
  return p;
}

// ---------------------------------------------------------------------------
// Commands

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  bool desk = false;
  std::string out = ".";
  std::optional<int> epochs;
};

// Tracks one run's outputs; writes the manifest on finish (also on failure,
// listing whatever exists by then).
struct Run {
  RunManifest manifest;
  fs::path dir;
  std::vector<std::string> files;
  bool written = false;

  void finish(const std::string& status, const std::string& message = "") {
    manifest.status = status;
    manifest.message = message;
    manifest.finished = utc_now();
    manifest.outputs.clear();
    for (const auto& f : files) {
      if (fs::exists(dir / f)) manifest.outputs.push_back({f, sha256_file(dir / f)});
    }
    write_manifest(manifest, dir / "manifest.json");
    written = true;
  }
};

Config resolve_config(const Common& c) {
  Config base = default_config();
  if (c.desk) {
    base.trainer = exp::desk_trainer_config();
    base.trainer.seed = base.seed;
  }
  json doc = to_json(base);
  if (!c.config_path.empty()) {
    json file = read_json_file(c.config_path);
    // A run manifest works as a config file.
    if (file.is_object() && file.contains("command") && file.contains("config")) {
      file = file.at("config");
    }
    if (!file.is_object()) throw ConfigError("config file must hold a JSON object");
    for (const auto& item : file.items()) {
      if (item.key() == "seed") {
        doc["seed"] = item.value();
      } else if (std::find(kSections.begin(), kSections.end(), item.key()) != kSections.end()) {
        if (!item.value().is_object()) {
          throw ConfigError("config section '" + item.key() + "' must be an object");
        }
        for (const auto& kv : item.value().items()) doc[item.key()][kv.key()] = kv.value();
      } else {
        throw ConfigError("unknown config key '" + item.key() + "'");
      }
    }
  }
  for (const auto& s : c.sets) apply_override(doc, s);
  if (c.epochs) doc["trainer"]["epochs"] = *c.epochs;
  if (c.seed) doc["seed"] = *c.seed;
  return config_from_json(doc, base);
}

Run start_run(const std::string& command, const Config& cfg, const fs::path& dir, json args) {
  Run r;
  r.dir = dir;
  r.manifest.command = command;
  r.manifest.args = std::move(args);
  r.manifest.config = to_json(cfg);
  r.manifest.seed = cfg.seed;
  r.manifest.started = utc_now();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  return r;
}

void add_output(Run& run, const std::string& rel, const std::string& text) {
  write_file(run.dir / rel, text);
  run.files.push_back(rel);
}

std::vector<geo::ShapeKind> parse_classes(const std::string& list) {
  std::vector<geo::ShapeKind> kinds;
  std::stringstream ss(list);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part.empty()) continue;
    const auto k = geo::shape_kind_from_string(part);
    if (std::find(kinds.begin(), kinds.end(), k) != kinds.end()) {
      throw ConfigError("duplicate class '" + part + "'");
    }
    kinds.push_back(k);
  }
  if (kinds.empty()) throw ConfigError("--classes is empty");
  return kinds;
}

double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double x = std::stod(s, &used);
    if (used == s.size()) return x;
  } catch (const std::exception&) {
  }
  throw ConfigError(what + ": '" + s + "' is not a number");
}

std::string fixed9(double x) { return fmt("%.9f", x); }

// Shared by every subcommand.
void add_common(CLI::App* sub, Common& c, bool with_out = true) {
  sub->add_option("--config", c.config_path, "JSON config file (or a run manifest)");
  sub->add_option("--set", c.sets, "Override one config key: section.key=value")
      ->expected(1)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  sub->add_option("--seed", c.seed, "Master seed (overrides the config)");
  sub->add_flag("--desk", c.desk, "Start from the desk-scale trainer preset");
  if (with_out) sub->add_option("--out", c.out, "Run directory (relative to $UPC_OUTPUT_ROOT)");
}

// gen --------------------------------------------------------------------

struct GenArgs {
  std::string classes = "sphere,box,cylinder,torus,two_planes";
  long long pairs = 10;
  long long points = 64;
  bool force = false;
};

int cmd_gen(const Common& common, const GenArgs& a, std::optional<Run>& run, std::ostream& out) {
  const Config cfg = resolve_config(common);
  if (a.pairs <= 0) throw ConfigError("--pairs must be positive");
  if (a.points <= 0) throw ConfigError("--points must be positive");
  const fs::path dir = resolve_path(common.out);
  if (fs::exists(dir) && !fs::is_empty(dir) && !a.force) {
    throw IoError("refusing to write into non-empty directory '" + dir.string() +
                  "' (use --force)");
  }
  const auto n_pairs = static_cast<std::size_t>(a.pairs);
  const auto n_points = static_cast<std::size_t>(a.points);
  geo::LabeledDataset ds;
  const std::uint64_t seed = derive_seed(cfg.seed, "gen");
  if (a.classes == "circle") {
    ds = geo::make_circle_dataset(n_pairs, n_points, seed);
  } else {
    geo::PairConfig pc;
    pc.n_complete = n_points;
    pc.n_incomplete = n_points;
    ds = geo::make_shape_dataset(parse_classes(a.classes), n_pairs, pc, seed);
  }
  run = start_run("gen", cfg, dir,
                  json{{"classes", a.classes}, {"pairs", a.pairs}, {"points", a.points},
                       {"out", common.out}});
  run->files = write_dataset(ds, dir);
  run->finish("ok");
  out << "wrote " << ds.pairs.size() << " pairs to " << dir.string() << "\n";
  return kExitOk;
}

// cost -------------------------------------------------------------------

struct CostArgs {
  std::string kind = "chamfer-l1";
  double intensity = 1.0;
  double tau = 2.0;
  double tau_prime = 1.0;
  double lambda = 1.0;
  std::vector<std::string> files;
  bool matrix = false;
  std::vector<std::string> rows;
  std::vector<std::string> cols;
};

int cmd_cost(const Common& common, const CostArgs& a, std::optional<Run>& run, std::ostream& out) {
  const Config cfg = resolve_config(common);
  costs::CostKind kind = costs::cost_kind_from_string(a.kind);
  kind.intensity = a.intensity;
  kind.infocd = {a.tau, a.tau_prime, a.lambda};
  kind.validate();
  json args{{"kind", a.kind},     {"intensity", a.intensity}, {"tau", a.tau},
            {"tau_prime", a.tau_prime}, {"lambda", a.lambda}, {"files", a.files},
            {"matrix", a.matrix}, {"rows", a.rows},           {"cols", a.cols},
            {"out", common.out}};
  if (a.matrix) {
    if (a.rows.empty()) throw ConfigError("--matrix needs --rows");
    const auto& col_files = a.cols.empty() ? a.rows : a.cols;
    std::vector<geo::PointCloud> X, Y;
    for (const auto& f : a.rows) X.push_back(read_cloud_named(f));
    for (const auto& f : col_files) Y.push_back(read_cloud_named(f));
    ot::CostMatrix C = ot::cost_matrix(kind, X, Y);
    for (const auto& f : a.rows) C.row_labels.push_back(fs::path(f).filename().string());
    for (const auto& f : col_files) C.col_labels.push_back(fs::path(f).filename().string());
    run = start_run("cost", cfg, resolve_path(common.out), args);
    add_output(*run, "cost_matrix.csv", ot::cost_matrix_to_csv(C));
    run->finish("ok");
    out << "wrote " << C.rows << "x" << C.cols << " cost matrix to "
        << (run->dir / "cost_matrix.csv").string() << "\n";
    return kExitOk;
  }
  if (a.files.size() != 2) throw ConfigError("cost needs exactly two cloud files (or --matrix)");
  const auto x = read_cloud_named(a.files[0]);
  const auto y = read_cloud_named(a.files[1]);
  const std::string value = fixed9(costs::cost(kind, x, y));
  run = start_run("cost", cfg, resolve_path(common.out), args);
  add_output(*run, "cost.txt", value + "\n");
  run->finish("ok");
  out << value << "\n";
  return kExitOk;
}

// ot ---------------------------------------------------------------------

struct OtArgs {
  std::string cost_file;
  std::string random;  // "M,N"
  std::vector<double> a;
  std::vector<double> b;
  std::string method;
  std::optional<double> epsilon;
  std::string rho;
};

int cmd_ot(Common common, const OtArgs& args, std::optional<Run>& run, std::ostream& out,
           std::ostream& err) {
  if (!args.method.empty()) common.sets.push_back("solver.method=" + args.method);
  if (args.epsilon) common.sets.push_back("solver.epsilon=" + fmt("%.17g", *args.epsilon));
  if (!args.rho.empty()) {
    common.sets.push_back("solver.rho1=\"" + args.rho + "\"");
    common.sets.push_back("solver.rho2=\"" + args.rho + "\"");
  }
  const Config cfg = resolve_config(common);
  if (args.cost_file.empty() == args.random.empty()) {
    throw ConfigError("ot needs exactly one of --cost FILE or --random M,N");
  }
  ot::CostMatrix C;
  if (!args.cost_file.empty()) {
    try {
      C = ot::cost_matrix_from_csv(read_file(args.cost_file));
    } catch (const IoError& e) {
      throw IoError(args.cost_file + ": " + e.what());
    }
  } else {
    const auto comma = args.random.find(',');
    if (comma == std::string::npos) throw ConfigError("--random expects M,N");
    const double m = parse_double(args.random.substr(0, comma), "--random");
    const double n = parse_double(args.random.substr(comma + 1), "--random");
    if (m < 1 || n < 1 || m != std::floor(m) || n != std::floor(n)) {
      throw ConfigError("--random expects positive integers M,N");
    }
    C.rows = static_cast<std::size_t>(m);
    C.cols = static_cast<std::size_t>(n);
    Rng rng(derive_seed(cfg.seed, "ot.random"));
    for (std::size_t i = 0; i < C.rows * C.cols; ++i) C.entries.push_back(rng.uniform());
  }
  C.validate();
  const ot::Histogram a = args.a.empty() ? ot::Histogram::uniform(C.rows) : ot::Histogram(args.a);
  const ot::Histogram b = args.b.empty() ? ot::Histogram::uniform(C.cols) : ot::Histogram(args.b);
  if (a.size() != C.rows || b.size() != C.cols) {
    throw ConfigError("masses do not match the cost matrix shape");
  }
  a.validate();
  b.validate();

  ot::Coupling plan;
  const std::string& method = cfg.solver_method;
  if (method == "sinkhorn") {
    plan = ot::sinkhorn(a, b, C, cfg.solver);
  } else if (method == "unbalanced") {
    plan = ot::unbalanced_sinkhorn(a, b, C, cfg.solver);
  } else if (method == "exact") {
    if (!args.a.empty() || !args.b.empty()) {
      throw ConfigError("method 'exact' solves uniform assignment; drop --a/--b");
    }
    plan = ot::solve_exact_assignment(C);
  } else {
    plan = ot::solve_lp_small(a, b, C);
  }
  const auto factors = ot::rescaling_factors(plan, a, b);

  json jargs{{"cost", args.cost_file}, {"random", args.random}, {"a", args.a},
             {"b", args.b},            {"out", common.out}};
  run = start_run("ot", cfg, resolve_path(common.out), jargs);
  add_output(*run, "coupling.csv", ot::coupling_to_csv(plan));
  add_output(*run, "factors.csv", ot::factors_to_csv(factors));

  err << "method=" << method << " iterations=" << plan.iterations
      << " residual=" << fmt("%.3g", plan.residual)
      << " converged=" << (plan.converged ? "true" : "false")
      << " objective=" << fmt("%.9g", plan.objective)
      << " mass=" << fmt("%.9g", plan.total_mass()) << "\n";
  if (!plan.converged) {
    run->finish("not_converged", "solver stopped at max_iters before reaching tol");
    return kExitNumerical;
  }
  run->finish("ok");
  out << "wrote " << (run->dir / "coupling.csv").string() << "\n";
  return kExitOk;
}

// train / eval -------------------------------------------------------------

std::string metrics_csv(const std::vector<std::pair<std::string, double>>& rows) {
  std::string s = "metric,value\n";
  for (const auto& [k, v] : rows) s += k + "," + fmt("%.17g", v) + "\n";
  return s;
}

struct TrainArgs {
  std::string data;
  std::string resume;
};

int cmd_train(const Common& common, const TrainArgs& a, std::optional<Run>& run,
              std::ostream& out, std::ostream& err) {
  Config cfg = resolve_config(common);
  const auto ds = load_dataset(resolve_path(a.data));
  std::optional<trainer::TrainState> resume;
  if (!a.resume.empty()) resume = trainer::load_checkpoint(resolve_path(a.resume));

  run = start_run("train", cfg, resolve_path(common.out),
                  json{{"data", a.data}, {"resume", a.resume}, {"out", common.out}});
  cfg.trainer.checkpoint_path = run->dir / "checkpoint.json";
  run->files.push_back("checkpoint.json");
  const auto res = trainer::train(ds, cfg.trainer, resume);
  add_output(*run, "train_log.csv", res.state.log.to_csv());
  const auto& m = res.final_metrics;
  std::vector<std::pair<std::string, double>> rows{
      {"iterations", static_cast<double>(res.state.iteration)},
      {"diverged", res.diverged ? 1.0 : 0.0}};
  if (!res.diverged) {
    rows.push_back({"val_cd_l1", m.cd_l1});
    rows.push_back({"val_fscore", m.fscore});
    rows.push_back({"val_residual", m.median_residual});
  }
  if (res.best_iter >= 0) {
    rows.push_back({"best_val_cd_l1", res.best_val_cd_l1});
    rows.push_back({"best_iter", static_cast<double>(res.best_iter)});
  }
  add_output(*run, "metrics.csv", metrics_csv(rows));
  if (res.diverged) {
    run->finish("diverged", res.message);
    err << "training diverged: " << res.message << "\n";
    return kExitNumerical;
  }
  run->finish("ok");
  out << "iterations " << res.state.iteration << " val_cd_l1 " << fmt("%.6g", m.cd_l1)
      << " val_fscore " << fmt("%.6g", m.fscore) << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "val";
};

int cmd_eval(const Common& common, const EvalArgs& a, std::optional<Run>& run, std::ostream& out) {
  const Config cfg = resolve_config(common);
  const auto state = trainer::load_checkpoint(resolve_path(a.checkpoint));
  const auto ds = load_dataset(resolve_path(a.data));
  std::vector<geo::CloudPair> pairs;
  if (a.split == "val") {
    pairs = trainer::split_pairs(ds, cfg.trainer.val_fraction, derive_seed(cfg.seed, "split")).val;
  } else {
    pairs = ds.pairs;
  }
  if (pairs.empty()) throw ConfigError("eval: the selected split is empty");
  run = start_run("eval", cfg, resolve_path(common.out),
                  json{{"checkpoint", a.checkpoint}, {"data", a.data}, {"split", a.split},
                       {"out", common.out}});
  const costs::MetricConfig mc{cfg.trainer.fscore_alpha};
  std::string csv = "pair,class,cd_l1,fscore\n";
  double cd = 0.0, fs_sum = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    const auto tx = trainer::complete(state.params_T, p.incomplete);
    const double c = costs::chamfer_l1(tx, p.complete_gt);
    const double f = costs::fscore(tx, p.complete_gt, mc);
    cd += c;
    fs_sum += f;
    const int label = p.complete_gt.class_label.value_or(0);
    csv += std::to_string(i) + "," + ds.class_names.at(static_cast<std::size_t>(label)) + "," +
           fmt("%.17g", c) + "," + fmt("%.17g", f) + "\n";
  }
  const double n = static_cast<double>(pairs.size());
  add_output(*run, "eval.csv", csv);
  add_output(*run, "metrics.csv",
             metrics_csv({{"pairs", n}, {"cd_l1", cd / n}, {"fscore", fs_sum / n}}));
  run->finish("ok");
  out << "pairs " << pairs.size() << " cd_l1 " << fmt("%.6g", cd / n) << " fscore "
      << fmt("%.6g", fs_sum / n) << "\n";
  return kExitOk;
}

// bench / sweep ------------------------------------------------------------

struct BenchArgs {
  std::string which;
  std::string data;
  std::string mode = "discrete";
};

int cmd_bench(const Common& common, const BenchArgs& a, std::optional<Run>& run,
              std::ostream& out) {
  const Config cfg = resolve_config(common);
  exp::ResultTable table;
  json args{{"which", a.which}, {"data", a.data}, {"mode", a.mode}, {"out", common.out}};
  if (a.which == "retrieval") {
    if (a.data.empty()) throw ConfigError("bench retrieval needs --data");
    const auto ds = load_dataset(resolve_path(a.data));
    run = start_run("bench", cfg, resolve_path(common.out), args);
    table = exp::cost_retrieval_eval(ds, cfg.retrieval).table;
  } else {
    const auto mode = a.mode == "neural" ? exp::ImbalanceMode::neural : exp::ImbalanceMode::discrete;
    run = start_run("bench", cfg, resolve_path(common.out), args);
    table = exp::imbalance_bench(cfg.imbalance, mode, cfg.trainer);
  }
  add_output(*run, "results.csv", table.to_csv());
  run->finish("ok");
  out << "wrote " << table.rows.size() << " rows to " << (run->dir / "results.csv").string()
      << "\n";
  return kExitOk;
}

struct SweepArgs {
  std::string which;
  std::string data;
  std::vector<std::string> values;
  std::vector<std::uint64_t> seeds;
  int jobs = 1;
};

int cmd_sweep(const Common& common, const SweepArgs& a, std::optional<Run>& run,
              std::ostream& out) {
  const Config cfg = resolve_config(common);
  if (a.jobs < 1) throw ConfigError("--jobs must be >= 1");
  std::vector<std::string> values = a.values;
  if (values.empty()) {
    if (a.which == "tau") values = {"0.02", "0.025", "0.044", "0.1", "0.25"};
    if (a.which == "mixture") values = {"0", "0.5"};
    if (a.which == "cost") values = {"infocd", "chamfer-l2", "l2"};
  }

  // Each grid point is an independent cell with its own label.
  struct Cell {
    std::string label;
    std::string table_cell;
    double number = 0.0;
    costs::CostKind kind;
  };
  std::vector<Cell> cells;
  for (const auto& v : values) {
    Cell c;
    if (a.which == "cost") {
      const auto colon = v.find(':');
      c.kind = costs::cost_kind_from_string(v.substr(0, colon));
      c.kind.infocd = cfg.trainer.cost.infocd;
      c.kind.intensity = colon == std::string::npos
                             ? cfg.trainer.cost.intensity
                             : parse_double(v.substr(colon + 1), "cost intensity");
      c.kind.validate();
      c.label = c.kind.name();
      c.table_cell = c.kind.name();
    } else {
      c.number = parse_double(v, a.which);
      c.label = exp::format_number(c.number);
      c.table_cell = (a.which == "tau" ? "tau=" : "mixture=") + c.label;
    }
    cells.push_back(c);
  }
  if (a.which == "tau") {
    std::sort(cells.begin(), cells.end(),
              [](const Cell& x, const Cell& y) { return x.number < y.number; });
  }
  for (std::size_t i = 0; i < cells.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (cells[i].table_cell == cells[j].table_cell) {
        throw ConfigError("duplicate sweep value '" + cells[i].label + "'");
      }
    }
  }
  if (cells.empty()) throw ConfigError("sweep grid is empty");

  if (a.data.empty()) throw ConfigError("sweep needs --data");
  const auto ds = load_dataset(resolve_path(a.data));
  run = start_run("sweep", cfg, resolve_path(common.out),
                  json{{"which", a.which}, {"data", a.data}, {"values", values},
                       {"seeds", a.seeds}, {"out", common.out}});

  std::vector<exp::ResultTable> tables(cells.size());
  std::vector<std::exception_ptr> errors(cells.size());
  auto run_one = [&](std::size_t i) {
    try {
      const Cell& c = cells[i];
      if (a.which == "tau") {
        tables[i] = exp::tau_sweep(ds, cfg.trainer, {c.number}, a.seeds);
      } else if (a.which == "mixture") {
        tables[i] = exp::mixture_ablation(ds, cfg.trainer, {c.number}, a.seeds);
      } else {
        tables[i] = exp::cost_ablation(ds, {c.kind}, cfg.trainer, a.seeds);
      }
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(a.jobs), cells.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < cells.size(); ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) run_one(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  exp::ResultTable all;
  for (const auto& t : tables) all.append(t);
  const bool multi = a.seeds.size() > 1;
  std::string wide = a.which + ",cd_l1,fscore,best_cd_l1,diverged\n";
  for (const auto& c : cells) {
    const std::string cell = multi ? c.table_cell + "/mean" : c.table_cell;
    wide += c.label;
    for (const char* metric : {"cd_l1", "fscore", "best_cd_l1", "diverged"}) {
      wide += "," + fmt("%.9g", all.value(cell, metric));
    }
    wide += "\n";
  }
  add_output(*run, "results.csv", all.to_csv());
  add_output(*run, "sweep.csv", wide);
  run->finish("ok");
  out << "wrote " << cells.size() << " sweep rows to " << (run->dir / "sweep.csv").string()
      << "\n";
  return kExitOk;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ContractError*>(&e)) {
    return kExitConfig;
  }
  if (dynamic_cast<const NumericalError*>(&e) || dynamic_cast<const DegenerateCropError*>(&e)) {
    return kExitNumerical;
  }
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const ValidationError*>(&e) ||
      dynamic_cast<const fs::filesystem_error*>(&e)) {
    return kExitIo;
  }
  return 1;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Unbalanced optimal transport for unpaired point cloud completion"};
  app.require_subcommand(1);
  const std::string footer = "\n" + describe_config_keys(default_config()) +
                             "\nExit codes: 0 ok, 2 configuration error, 3 numerical abort or "
                             "non-convergence, 4 I/O error.";
  app.footer(footer);

  Common common;
  GenArgs gen;
  CostArgs cost;
  OtArgs ota;
  TrainArgs tra;
  EvalArgs eva;
  BenchArgs bench;
  SweepArgs sweep;

  auto* g = app.add_subcommand("gen", "Write a synthetic dataset directory");
  add_common(g, common);
  g->add_option("--classes", gen.classes, "Comma list of shapes, or 'circle' for the planar toy")
      ->capture_default_str();
  g->add_option("--pairs", gen.pairs, "Pairs per class (total for 'circle')")->capture_default_str();
  g->add_option("--points", gen.points, "Points per cloud")->capture_default_str();
  g->add_flag("--force", gen.force, "Write into a non-empty directory");

  auto* c = app.add_subcommand("cost", "Cost between two clouds, or a cost matrix");
  add_common(c, common);
  c->add_option("files", cost.files, "Two cloud files (.xyz or .ply)");
  c->add_option("--kind", cost.kind,
                "l2, chamfer-l2, chamfer-l2-fwd, chamfer-l1, infocd, emd, emd-sq")
      ->capture_default_str();
  c->add_option("--intensity", cost.intensity, "Global cost multiplier")->capture_default_str();
  c->add_option("--tau", cost.tau, "InfoCD denominator temperature")->capture_default_str();
  c->add_option("--tau-prime", cost.tau_prime, "InfoCD numerator temperature")
      ->capture_default_str();
  c->add_option("--lambda", cost.lambda, "InfoCD log-sum-exp exponent")->capture_default_str();
  c->add_flag("--matrix", cost.matrix, "Write cost_matrix.csv for --rows x --cols");
  c->add_option("--rows", cost.rows, "Row cloud files")->delimiter(',');
  c->add_option("--cols", cost.cols, "Column cloud files (default: --rows)")->delimiter(',');

  auto* o = app.add_subcommand("ot", "Solve a discrete OT / UOT problem");
  add_common(o, common);
  o->add_option("--cost", ota.cost_file, "Cost matrix CSV");
  o->add_option("--random", ota.random, "Random uniform M,N cost matrix from the seed");
  o->add_option("--a", ota.a, "Row masses (default uniform, total 1)")->delimiter(',');
  o->add_option("--b", ota.b, "Column masses (default uniform, total 1)")->delimiter(',');
  o->add_option("--method", ota.method, "sinkhorn, unbalanced, exact or lp (solver.method)");
  o->add_option("--epsilon", ota.epsilon, "Entropic regularization (solver.epsilon)");
  o->add_option("--rho", ota.rho, "KL penalty on both marginals, 'inf' for balanced");

  auto* t = app.add_subcommand("train", "Train the map and potential networks");
  add_common(t, common);
  t->add_option("--data", tra.data, "Dataset directory from 'gen'")->required();
  t->add_option("--resume", tra.resume, "Checkpoint to resume from");

  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  add_common(e, common);
  e->add_option("--checkpoint", eva.checkpoint, "checkpoint.json from 'train'")->required();
  e->add_option("--data", eva.data, "Dataset directory from 'gen'")->required();
  e->add_option("--split", eva.split, "val or all")
      ->check(CLI::IsMember({"val", "all"}))
      ->capture_default_str();

  auto* b = app.add_subcommand("bench", "Retrieval or class-imbalance benchmark");
  add_common(b, common);
  b->add_option("which", bench.which, "retrieval or imbalance")
      ->required()
      ->check(CLI::IsMember({"retrieval", "imbalance"}));
  b->add_option("--data", bench.data, "Dataset directory (retrieval)");
  b->add_option("--mode", bench.mode, "discrete or neural (imbalance)")
      ->check(CLI::IsMember({"discrete", "neural"}))
      ->capture_default_str();

  auto* s = app.add_subcommand("sweep", "Train one cell per grid value");
  add_common(s, common);
  s->add_option("which", sweep.which, "tau, mixture or cost")
      ->required()
      ->check(CLI::IsMember({"tau", "mixture", "cost"}));
  s->add_option("--data", sweep.data, "Dataset directory from 'gen'")->required();
  s->add_option("--values", sweep.values,
                "Grid (default tau 0.02,0.025,0.044,0.1,0.25; mixture 0,0.5; "
                "cost infocd,chamfer-l2,l2, each optionally name:intensity)")
      ->delimiter(',');
  s->add_option("--seeds", sweep.seeds, "Seeds per cell (default: the master seed)")
      ->delimiter(',');
  s->add_option("--jobs", sweep.jobs, "Cells trained concurrently")->capture_default_str();

  for (auto* sub : {t, b, s}) {
    sub->add_option("--epochs", common.epochs, "Shorthand for --set trainer.epochs=N");
  }
  for (auto* sub : {g, c, o, t, e, b, s}) sub->footer(footer);

  std::vector<std::string> storage = args;
  std::vector<char*> argv;
  for (auto& a : storage) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex, out, err);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex, out, err);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex, out, err);
    return kExitConfig;
  }

  std::optional<Run> run;
  try {
    if (g->parsed()) return cmd_gen(common, gen, run, out);
    if (c->parsed()) return cmd_cost(common, cost, run, out);
    if (o->parsed()) return cmd_ot(common, ota, run, out, err);
    if (t->parsed()) return cmd_train(common, tra, run, out, err);
    if (e->parsed()) return cmd_eval(common, eva, run, out);
    if (b->parsed()) return cmd_bench(common, bench, run, out);
    return cmd_sweep(common, sweep, run, out);
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    if (run && !run->written) {
      try {
        run->finish("failed", ex.what());
      } catch (const std::exception&) {
        // the original error is the one worth reporting
      }
    }
    return exit_code_for(ex);
  }
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace upc::cli
