#include "upc/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "upc/errors.hpp"
#include "upc/json_util.hpp"
#include "upc/rng.hpp"

namespace upc::exp {

using nlohmann::json;

void ResultTable::add(const std::string& experiment, const std::string& cell, std::uint64_t seed,
                      const std::string& config_hash, const std::string& metric, double value) {
  rows.push_back({experiment, cell, seed, config_hash, metric, value});
}

void ResultTable::append(const ResultTable& other) {
  rows.insert(rows.end(), other.rows.begin(), other.rows.end());
}

std::optional<double> ResultTable::find(const std::string& cell, const std::string& metric) const {
  for (const auto& r : rows) {
    if (r.cell == cell && r.metric == metric) return r.value;
  }
  return std::nullopt;
}

double ResultTable::value(const std::string& cell, const std::string& metric) const {
  const auto v = find(cell, metric);
  if (!v) throw ContractError("result table has no row " + cell + " / " + metric);
  return *v;
}

std::string ResultTable::to_csv() const {
  std::ostringstream os;
  os << "experiment,cell,seed,config_hash,metric,value\n";
  char buf[40];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g", r.value);
    os << r.experiment << ',' << r.cell << ',' << r.seed << ',' << r.config_hash << ','
       << r.metric << ',' << buf << '\n';
  }
  return os.str();
}

ResultTable ResultTable::from_csv(const std::string& text) {
  ResultTable t;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1) {
      if (line != "experiment,cell,seed,config_hash,metric,value") {
        throw ParseError("unexpected result table header", line_no);
      }
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 6) throw ParseError("expected 6 fields", line_no);
    try {
      t.rows.push_back({f[0], f[1], std::stoull(f[2]), f[3], f[4], std::stod(f[5])});
    } catch (const std::exception&) {
      throw ParseError("malformed numeric field", line_no);
    }
  }
  return t;
}

std::string config_hash(const json& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(config.dump())));
  return buf;
}

std::string format_number(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", x);
  return buf;
}

trainer::TrainerConfig desk_trainer_config() {
  trainer::TrainerConfig c;
  c.lr_T = 1e-4;
  c.lr_v = 1e-4;
  c.epochs = 100;
  c.map_arch.point_widths = {3, 32, 64};
  c.map_arch.head_widths = {128};
  c.map_arch.n_out = 64;
  c.potential_arch.point_widths = {3, 32, 64};
  c.potential_arch.head_widths = {128};
  c.fscore_alpha = 0.1;
  c.seed = 1;
  return c;
}

// ---------------------------------------------------------------------------
// Retrieval

void RetrievalConfig::validate() const {
  if (kinds.empty()) throw ConfigError("retrieval: no cost kinds");
  if (k < 1) throw ConfigError("retrieval: k must be >= 1");
  for (const auto& kind : kinds) kind.validate();
}

json to_json(const RetrievalConfig& cfg) {
  json kinds = json::array();
  for (const auto& k : cfg.kinds) kinds.push_back(k.name());
  return json{{"kinds", kinds}, {"k", cfg.k}, {"seed", cfg.seed}};
}

RetrievalConfig retrieval_config_from_json(const json& j, RetrievalConfig c) {
  const std::string sec = "retrieval";
  check_keys(j, {"kinds", "k", "seed"}, sec);
  if (j.contains("kinds")) {
    std::vector<std::string> names;
    read_key(j, "kinds", names, sec);
    c.kinds.clear();
    for (const auto& n : names) c.kinds.push_back(costs::cost_kind_from_string(n));
  }
  read_key(j, "k", c.k, sec);
  read_key(j, "seed", c.seed, sec);
  c.validate();
  return c;
}

RetrievalResult cost_retrieval_eval(const geo::LabeledDataset& dataset,
                                    const RetrievalConfig& cfg) {
  cfg.validate();
  const std::size_t n = dataset.pairs.size();
  if (n < cfg.k) throw ContractError("retrieval: pool smaller than k");
  RetrievalResult res;
  res.pool_order.resize(n);
  for (std::size_t i = 0; i < n; ++i) res.pool_order[i] = i;
  Rng rng(derive_seed(cfg.seed, "retrieval.shuffle"));
  for (std::size_t i = n - 1; i > 0; --i) std::swap(res.pool_order[i], res.pool_order[rng.below(i + 1)]);

  const std::string hash = config_hash(to_json(cfg));
  const std::size_t n_classes = std::max<std::size_t>(dataset.num_classes(), 1);
  for (const auto& kind : cfg.kinds) {
    std::vector<double> class_sum(n_classes, 0.0), class_cnt(n_classes, 0.0);
    double total = 0.0;
    auto& nbrs = res.neighbors[kind.name()];
    for (std::size_t q = 0; q < n; ++q) {
      const auto& x = dataset.pairs[q].incomplete;
      std::vector<std::pair<double, std::size_t>> scored(n);
      for (std::size_t p = 0; p < n; ++p) {
        scored[p] = {costs::cost(kind, x, dataset.pairs[res.pool_order[p]].complete_gt), p};
      }
      std::partial_sort(scored.begin(), scored.begin() + cfg.k, scored.end());
      std::vector<std::size_t> top;
      for (std::size_t t = 0; t < cfg.k; ++t) top.push_back(scored[t].second);
      nbrs.push_back(top);
      const auto& best = dataset.pairs[res.pool_order[top[0]]].complete_gt;
      const double gap = costs::chamfer_l1(best, dataset.pairs[q].complete_gt);
      const std::size_t c = static_cast<std::size_t>(x.class_label.value_or(0));
      class_sum[c] += gap;
      class_cnt[c] += 1.0;
      total += gap;
    }
    for (std::size_t c = 0; c < n_classes; ++c) {
      if (class_cnt[c] == 0.0) continue;
      const std::string name = c < dataset.class_names.size() ? dataset.class_names[c]
                                                              : std::to_string(c);
      res.table.add("retrieval", kind.name() + "/" + name, cfg.seed, hash, "gap",
                    class_sum[c] / class_cnt[c]);
    }
    res.table.add("retrieval", kind.name() + "/all", cfg.seed, hash, "gap",
                  total / static_cast<double>(n));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Imbalance

void ImbalanceSpec::validate() const {
  if (!(p1 > 0.0) || !(p2 > 0.0)) throw ConfigError("imbalance: proportions must be positive");
  if (ratios.empty()) throw ConfigError("imbalance: empty ratio grid");
  for (double r : ratios) {
    if (!(r > 0.0)) throw ConfigError("imbalance: ratios must be positive");
  }
  if (class1 == class2) throw ConfigError("imbalance: the two classes must differ");
  if (atoms_per_class == 0) throw ConfigError("imbalance: atoms_per_class must be positive");
  if (2 * atoms_per_class > 8) throw ConfigError("imbalance: at most 4 atoms per class");
  if (!(epsilon > 0.0) || !(rho > 0.0)) throw ConfigError("imbalance: epsilon and rho must be positive");
  if (source_class1 < 5) {
    throw ConfigError("imbalance: class '" + geo::to_string(class1) + "' needs at least 5 samples");
  }
  if (source_class2 < 5) {
    throw ConfigError("imbalance: class '" + geo::to_string(class2) + "' needs at least 5 samples");
  }
  if (points < 8) throw ConfigError("imbalance: points must be >= 8");
}

json to_json(const ImbalanceSpec& s) {
  return json{{"class1", geo::to_string(s.class1)},
              {"class2", geo::to_string(s.class2)},
              {"p1", s.p1},
              {"p2", s.p2},
              {"ratios", s.ratios},
              {"seed", s.seed},
              {"atoms_per_class", s.atoms_per_class},
              {"epsilon", s.epsilon},
              {"rho", s.rho},
              {"source_class1", s.source_class1},
              {"source_class2", s.source_class2},
              {"points", s.points}};
}

const std::vector<std::string>& imbalance_spec_keys() {
  static const std::vector<std::string> keys{
      "class1", "class2",  "p1",  "p2",           "ratios",        "seed",
      "atoms_per_class", "epsilon", "rho", "source_class1", "source_class2", "points"};
  return keys;
}

ImbalanceSpec imbalance_spec_from_json(const json& j, ImbalanceSpec s) {
  const std::string sec = "imbalance";
  check_keys(j, imbalance_spec_keys(), sec);
  if (j.contains("class1")) {
    std::string name;
    read_key(j, "class1", name, sec);
    s.class1 = geo::shape_kind_from_string(name);
  }
  if (j.contains("class2")) {
    std::string name;
    read_key(j, "class2", name, sec);
    s.class2 = geo::shape_kind_from_string(name);
  }
  read_key(j, "p1", s.p1, sec);
  read_key(j, "p2", s.p2, sec);
  read_key(j, "ratios", s.ratios, sec);
  read_key(j, "seed", s.seed, sec);
  read_key(j, "atoms_per_class", s.atoms_per_class, sec);
  read_key(j, "epsilon", s.epsilon, sec);
  read_key(j, "rho", s.rho, sec);
  read_key(j, "source_class1", s.source_class1, sec);
  read_key(j, "source_class2", s.source_class2, sec);
  read_key(j, "points", s.points, sec);
  s.validate();
  return s;
}

namespace {

geo::PairConfig pair_config(std::size_t points) {
  geo::PairConfig pc;
  pc.n_complete = points;
  pc.n_incomplete = points;
  return pc;
}

// Two-class dataset with the requested instance counts.
geo::LabeledDataset two_class_dataset(const ImbalanceSpec& spec, std::size_t n1, std::size_t n2,
                                      std::uint64_t seed) {
  const auto pc = pair_config(spec.points);
  auto d1 = geo::make_shape_dataset({spec.class1}, n1, pc, derive_seed(seed, "class1"));
  auto d2 = geo::make_shape_dataset({spec.class2}, n2, pc, derive_seed(seed, "class2"));
  geo::LabeledDataset ds;
  ds.class_names = {geo::to_string(spec.class1), geo::to_string(spec.class2)};
  for (auto& p : d1.pairs) ds.pairs.push_back(p);
  for (auto& p : d2.pairs) {
    p.incomplete.class_label = 1;
    p.complete_gt.class_label = 1;
    ds.pairs.push_back(p);
  }
  const double total = static_cast<double>(n1 + n2);
  ds.class_weights_source = {static_cast<double>(n1) / total, static_cast<double>(n2) / total};
  ds.class_weights_target = ds.class_weights_source;
  return ds;
}

}  // namespace

ImbalanceInstance make_imbalance_instance(const ImbalanceSpec& spec, double r) {
  spec.validate();
  const std::size_t m = spec.atoms_per_class;
  // Source and target atoms are distinct instances of the same two classes.
  const auto src = two_class_dataset(spec, m, m, derive_seed(spec.seed, "discrete.source"));
  const auto tgt = two_class_dataset(spec, m, m, derive_seed(spec.seed, "discrete.target"));
  ImbalanceInstance inst;
  std::vector<geo::PointCloud> xs, ys;
  for (const auto& p : src.pairs) {
    xs.push_back(p.incomplete);
    inst.source_labels.push_back(*p.incomplete.class_label);
  }
  for (const auto& p : tgt.pairs) {
    ys.push_back(p.complete_gt);
    inst.target_labels.push_back(*p.complete_gt.class_label);
  }
  auto weights = [m](double w1, double w2) {
    const double total = w1 + w2;
    std::vector<double> w;
    for (std::size_t i = 0; i < m; ++i) w.push_back(w1 / total / static_cast<double>(m));
    for (std::size_t i = 0; i < m; ++i) w.push_back(w2 / total / static_cast<double>(m));
    return ot::Histogram(w);
  };
  inst.a = weights(spec.p1, spec.p2);
  inst.b = weights(spec.p1, spec.p2 * r);
  inst.cost = ot::cost_matrix(costs::CostKind::cd_l1(), xs, ys);
  return inst;
}

namespace {

struct CellOutcome {
  double cd_l1 = 0.0;
  double fscore = 0.0;
  double best_cd_l1 = 0.0;
  bool diverged = false;
};

CellOutcome run_cell(const trainer::TrainData& data, const trainer::TrainerConfig& cfg) {
  const auto res = trainer::train(data, cfg);
  CellOutcome o;
  o.diverged = res.diverged;
  // A diverged run reports the metrics of its last finite state.
  const auto m = res.diverged
                     ? trainer::validate(res.state.params_T, res.state.params_v, data.val, cfg)
                     : res.final_metrics;
  o.cd_l1 = m.cd_l1;
  o.fscore = m.fscore;
  o.best_cd_l1 = std::isnan(res.best_val_cd_l1) ? m.cd_l1 : res.best_val_cd_l1;
  return o;
}

void add_cell(ResultTable& t, const std::string& experiment, const std::string& cell,
              std::uint64_t seed, const std::string& hash, const CellOutcome& o) {
  t.add(experiment, cell, seed, hash, "cd_l1", o.cd_l1);
  t.add(experiment, cell, seed, hash, "fscore", o.fscore);
  t.add(experiment, cell, seed, hash, "best_cd_l1", o.best_cd_l1);
  t.add(experiment, cell, seed, hash, "diverged", o.diverged ? 1.0 : 0.0);
}

// Runs one configuration over every seed; per-seed rows use "<cell>" when a
// single seed is given and "<cell>/seed=<s>" otherwise, plus "<cell>/mean".
void run_seeds(ResultTable& t, const std::string& experiment, const std::string& cell,
               const geo::LabeledDataset& dataset, trainer::TrainerConfig cfg,
               const std::vector<std::uint64_t>& seeds) {
  const std::vector<std::uint64_t> ss = seeds.empty() ? std::vector<std::uint64_t>{cfg.seed} : seeds;
  CellOutcome mean;
  for (std::uint64_t s : ss) {
    cfg.seed = s;
    const auto o = run_cell(trainer::make_train_data(dataset, cfg), cfg);
    const std::string hash = config_hash(trainer::to_json(cfg));
    add_cell(t, experiment, ss.size() == 1 ? cell : cell + "/seed=" + std::to_string(s), s, hash, o);
    mean.cd_l1 += o.cd_l1 / static_cast<double>(ss.size());
    mean.fscore += o.fscore / static_cast<double>(ss.size());
    mean.best_cd_l1 += o.best_cd_l1 / static_cast<double>(ss.size());
    mean.diverged = mean.diverged || o.diverged;
  }
  if (ss.size() > 1) {
    cfg.seed = ss.front();
    add_cell(t, experiment, cell + "/mean", ss.front(), config_hash(trainer::to_json(cfg)), mean);
  }
}

}  // namespace

ResultTable imbalance_bench(const ImbalanceSpec& spec, ImbalanceMode mode,
                            const trainer::TrainerConfig& base) {
  spec.validate();
  ResultTable t;
  if (mode == ImbalanceMode::discrete) {
    const std::string hash = config_hash(to_json(spec));
    for (double r : spec.ratios) {
      const auto inst = make_imbalance_instance(spec, r);
      const std::string cell = "r=" + format_number(r);
      const auto ot_plan = ot::solve_lp_small(inst.a, inst.b, inst.cost);
      ot::SolverConfig sc;
      sc.epsilon = spec.epsilon;
      sc.rho1 = spec.rho;
      sc.rho2 = spec.rho;
      const auto uot_plan = ot::unbalanced_sinkhorn(inst.a, inst.b, inst.cost, sc);
      t.add("imbalance", cell + "/ot", spec.seed, hash, "cross_class_mass",
            ot::cross_class_mass(ot_plan, inst.source_labels, inst.target_labels));
      t.add("imbalance", cell + "/uot", spec.seed, hash, "cross_class_mass",
            ot::cross_class_mass(uot_plan, inst.source_labels, inst.target_labels));
      t.add("imbalance", cell + "/uot", spec.seed, hash, "residual", uot_plan.residual);
      t.add("imbalance", cell + "/uot", spec.seed, hash, "converged", uot_plan.converged ? 1 : 0);
    }
    return t;
  }

  // Neural: one source set at natural proportions, target class 2 scaled by r.
  const auto source = two_class_dataset(spec, spec.source_class1, spec.source_class2,
                                        derive_seed(spec.seed, "neural.source"));
  const auto base_data = trainer::make_train_data(source, base);
  std::size_t train1 = 0, train2 = 0;
  for (const auto& c : base_data.source) (*c.class_label == 0 ? train1 : train2) += 1;
  for (auto conj : {trainer::ConjugateKind::softplus_shifted, trainer::ConjugateKind::identity}) {
    trainer::TrainerConfig cfg = base;
    cfg.conjugate = conj;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    double best_lo = lo, best_hi = hi;
    for (double r : spec.ratios) {
      const std::size_t n2 = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::llround(static_cast<double>(train2) * r)));
      const auto target = two_class_dataset(spec, train1, n2, derive_seed(spec.seed, "neural.target"));
      trainer::TrainData data;
      data.source = base_data.source;
      data.val = base_data.val;
      for (const auto& p : target.pairs) data.target.push_back(p.complete_gt);
      json h = trainer::to_json(cfg);
      h["imbalance"] = to_json(spec);
      h["r"] = r;
      const auto o = run_cell(data, cfg);
      add_cell(t, "imbalance", "r=" + format_number(r) + "/" + trainer::to_string(conj), cfg.seed,
               config_hash(h), o);
      lo = std::min(lo, o.cd_l1);
      hi = std::max(hi, o.cd_l1);
      best_lo = std::min(best_lo, o.best_cd_l1);
      best_hi = std::max(best_hi, o.best_cd_l1);
    }
    json h = trainer::to_json(cfg);
    h["imbalance"] = to_json(spec);
    const std::string cell = "spread/" + trainer::to_string(conj);
    t.add("imbalance", cell, cfg.seed, config_hash(h), "cd_l1", hi - lo);
    t.add("imbalance", cell, cfg.seed, config_hash(h), "best_cd_l1", best_hi - best_lo);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Ablations

ResultTable cost_ablation(const geo::LabeledDataset& dataset,
                          const std::vector<costs::CostKind>& kinds,
                          const trainer::TrainerConfig& cfg,
                          const std::vector<std::uint64_t>& seeds) {
  if (kinds.empty()) throw ConfigError("cost_ablation: no cost kinds");
  ResultTable t;
  for (const auto& kind : kinds) {
    trainer::TrainerConfig c = cfg;
    c.cost = kind;
    run_seeds(t, "cost_ablation", kind.name(), dataset, c, seeds);
  }
  return t;
}

ResultTable mixture_ablation(const geo::LabeledDataset& dataset, const trainer::TrainerConfig& cfg,
                             const std::vector<double>& mixtures,
                             const std::vector<std::uint64_t>& seeds) {
  if (mixtures.empty()) throw ConfigError("mixture_ablation: no mixture values");
  ResultTable t;
  for (double m : mixtures) {
    trainer::TrainerConfig c = cfg;
    c.mixture_prob = m;
    run_seeds(t, "mixture_ablation", "mixture=" + format_number(m), dataset, c, seeds);
  }
  return t;
}

ResultTable tau_sweep(const geo::LabeledDataset& dataset, const trainer::TrainerConfig& cfg,
                      const std::vector<double>& taus, const std::vector<std::uint64_t>& seeds) {
  if (taus.empty()) throw ConfigError("tau_sweep: empty grid");
  for (double tau : taus) {
    if (!(tau > 0.0)) throw ConfigError("tau_sweep: tau must be positive");
  }
  std::vector<double> grid = taus;
  std::sort(grid.begin(), grid.end());
  if (std::adjacent_find(grid.begin(), grid.end()) != grid.end()) {
    throw ConfigError("tau_sweep: duplicate tau");
  }
  ResultTable t;
  for (double tau : grid) {
    trainer::TrainerConfig c = cfg;
    c.cost.intensity = tau;
    const std::string cell = "tau=" + format_number(tau);
    run_seeds(t, "tau_sweep", cell, dataset, c, seeds);
    t.add("tau_sweep", cell, c.seed, config_hash(trainer::to_json(c)), "tau", tau);
  }
  return t;
}

}  // namespace upc::exp
