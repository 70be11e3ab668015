#include "upc/uot_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "upc/errors.hpp"
#include "upc/json_util.hpp"

namespace upc::trainer {

using nlohmann::json;

std::string to_string(ConjugateKind kind) {
  return kind == ConjugateKind::identity ? "identity" : "softplus";
}

ConjugateKind conjugate_kind_from_string(const std::string& name) {
  if (name == "softplus" || name == "softplus_shifted") return ConjugateKind::softplus_shifted;
  if (name == "identity") return ConjugateKind::identity;
  throw ConfigError("unknown conjugate '" + name + "'");
}

double DivergenceConjugate::operator()(double x) const {
  if (kind == ConjugateKind::identity) return x;
  return 2.0 * (std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)))) - 2.0 * std::log(2.0);
}

double DivergenceConjugate::derivative(double x) const {
  if (kind == ConjugateKind::identity) return 1.0;
  return x >= 0.0 ? 2.0 / (1.0 + std::exp(-x)) : 2.0 * std::exp(x) / (1.0 + std::exp(x));
}

ad::Var DivergenceConjugate::apply(ad::Var x) const {
  return kind == ConjugateKind::identity ? x : ad::softplus_conjugate(x);
}

costs::CostKind TrainerConfig::default_cost() {
  costs::InfoCdParams p;
  p.tau = 2.0;
  p.tau_prime = 1.0;
  p.scale_lambda = 1e-7;
  auto k = costs::CostKind::info_cd(p);
  k.intensity = 0.044;
  return k;
}

double TrainerConfig::effective_grad_clip() const {
  if (grad_clip >= 0.0) return grad_clip;
  return conjugate == ConjugateKind::identity ? 1.0 : 0.0;
}

void TrainerConfig::validate() const {
  if (!(lr_T > 0.0) || !(lr_v > 0.0)) throw ConfigError("trainer: learning rates must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("trainer: betas must lie in [0, 1)");
  }
  if (batch_size == 0) throw ConfigError("trainer: batch_size must be positive");
  if (epochs < 0) throw ConfigError("trainer: epochs must be nonnegative");
  if (!(dl_weight >= 0.0)) throw ConfigError("trainer: dl_weight must be nonnegative");
  if (!(mixture_prob >= 0.0 && mixture_prob <= 1.0)) {
    throw ConfigError("trainer: mixture_prob must lie in [0, 1]");
  }
  if (validate_every <= 0) throw ConfigError("trainer: validate_every must be positive");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw ConfigError("trainer: val_fraction must lie in (0, 1)");
  }
  if (!(fscore_alpha > 0.0)) throw ConfigError("trainer: fscore_alpha must be positive");
  if (checkpoint_every < 0) throw ConfigError("trainer: checkpoint_every must be nonnegative");
  cost.validate();
  map_arch.validate();
  potential_arch.validate();
  if (map_arch.kind != nn::NetKind::map || potential_arch.kind != nn::NetKind::potential) {
    throw ConfigError("trainer: network kinds are swapped");
  }
}

const std::vector<std::string>& trainer_config_keys() {
  static const std::vector<std::string> keys{
      "lr_T",         "lr_v",           "beta1",          "beta2",
      "batch_size",   "epochs",         "cost",           "cost_intensity",
      "infocd_tau",   "infocd_tau_prime", "infocd_lambda", "dl_weight",
      "mixture_prob", "conjugate",      "grad_clip",      "map_point_widths",
      "map_head_widths", "n_out",       "potential_point_widths", "potential_head_widths",
      "validate_every", "val_fraction", "fscore_alpha",   "checkpoint_every",
      "seed"};
  return keys;
}

json to_json(const TrainerConfig& c) {
  return json{{"lr_T", c.lr_T},
              {"lr_v", c.lr_v},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"batch_size", c.batch_size},
              {"epochs", c.epochs},
              {"cost", c.cost.name()},
              {"cost_intensity", c.cost.intensity},
              {"infocd_tau", c.cost.infocd.tau},
              {"infocd_tau_prime", c.cost.infocd.tau_prime},
              {"infocd_lambda", c.cost.infocd.scale_lambda},
              {"dl_weight", c.dl_weight},
              {"mixture_prob", c.mixture_prob},
              {"conjugate", to_string(c.conjugate)},
              {"grad_clip", c.grad_clip},
              {"map_point_widths", c.map_arch.point_widths},
              {"map_head_widths", c.map_arch.head_widths},
              {"n_out", c.map_arch.n_out},
              {"potential_point_widths", c.potential_arch.point_widths},
              {"potential_head_widths", c.potential_arch.head_widths},
              {"validate_every", c.validate_every},
              {"val_fraction", c.val_fraction},
              {"fscore_alpha", c.fscore_alpha},
              {"checkpoint_every", c.checkpoint_every},
              {"seed", c.seed}};
}

TrainerConfig trainer_config_from_json(const json& j, TrainerConfig c) {
  const std::string sec = "trainer";
  check_keys(j, trainer_config_keys(), sec);
  read_key(j, "lr_T", c.lr_T, sec);
  read_key(j, "lr_v", c.lr_v, sec);
  read_key(j, "beta1", c.beta1, sec);
  read_key(j, "beta2", c.beta2, sec);
  read_key(j, "batch_size", c.batch_size, sec);
  read_key(j, "epochs", c.epochs, sec);
  if (j.contains("cost")) {
    std::string name;
    read_key(j, "cost", name, sec);
    const costs::CostKind parsed = costs::cost_kind_from_string(name);
    c.cost.variant = parsed.variant;
    c.cost.ground = parsed.ground;
  }
  read_key(j, "cost_intensity", c.cost.intensity, sec);
  read_key(j, "infocd_tau", c.cost.infocd.tau, sec);
  read_key(j, "infocd_tau_prime", c.cost.infocd.tau_prime, sec);
  read_key(j, "infocd_lambda", c.cost.infocd.scale_lambda, sec);
  read_key(j, "dl_weight", c.dl_weight, sec);
  read_key(j, "mixture_prob", c.mixture_prob, sec);
  if (j.contains("conjugate")) {
    std::string name;
    read_key(j, "conjugate", name, sec);
    c.conjugate = conjugate_kind_from_string(name);
  }
  read_key(j, "grad_clip", c.grad_clip, sec);
  read_key(j, "map_point_widths", c.map_arch.point_widths, sec);
  read_key(j, "map_head_widths", c.map_arch.head_widths, sec);
  read_key(j, "n_out", c.map_arch.n_out, sec);
  read_key(j, "potential_point_widths", c.potential_arch.point_widths, sec);
  read_key(j, "potential_head_widths", c.potential_arch.head_widths, sec);
  read_key(j, "validate_every", c.validate_every, sec);
  read_key(j, "val_fraction", c.val_fraction, sec);
  read_key(j, "fscore_alpha", c.fscore_alpha, sec);
  read_key(j, "checkpoint_every", c.checkpoint_every, sec);
  read_key(j, "seed", c.seed, sec);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Density loss

namespace {

struct DensityParts {
  std::size_t n = 0;
  std::vector<std::size_t> nbr;  // n * k neighbor indices
  std::vector<double> m;         // mean neighbor distance per point
  double mbar = 0.0;
  double var = 0.0;
  double diag = 0.0;
  std::size_t lo_idx[3]{}, hi_idx[3]{};
};

DensityParts density_parts(const std::vector<double>& p, std::size_t n) {
  constexpr std::size_t k = kDensityNeighbors;
  require(n >= k + 1, "density_loss: needs at least " + std::to_string(k + 1) + " points");
  DensityParts d;
  d.n = n;
  d.nbr.resize(n * k);
  d.m.assign(n, 0.0);
  std::vector<std::pair<double, std::size_t>> cand(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t c = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double s = 0.0;
      for (std::size_t t = 0; t < 3; ++t) {
        const double diff = p[3 * i + t] - p[3 * j + t];
        s += diff * diff;
      }
      cand[c++] = {s, j};
    }
    std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
    double acc = 0.0;
    for (std::size_t t = 0; t < k; ++t) {
      d.nbr[i * k + t] = cand[t].second;
      acc += std::sqrt(cand[t].first);
    }
    d.m[i] = acc / static_cast<double>(k);
    d.mbar += d.m[i];
  }
  d.mbar /= static_cast<double>(n);
  for (double mi : d.m) d.var += (mi - d.mbar) * (mi - d.mbar);
  d.var /= static_cast<double>(n);
  double diag2 = 0.0;
  for (std::size_t t = 0; t < 3; ++t) {
    std::size_t lo = 0, hi = 0;
    for (std::size_t i = 1; i < n; ++i) {
      if (p[3 * i + t] < p[3 * lo + t]) lo = i;
      if (p[3 * i + t] > p[3 * hi + t]) hi = i;
    }
    d.lo_idx[t] = lo;
    d.hi_idx[t] = hi;
    const double e = p[3 * hi + t] - p[3 * lo + t];
    diag2 += e * e;
  }
  d.diag = std::sqrt(diag2);
  return d;
}

double density_value(const DensityParts& d) {
  return d.diag > 0.0 ? d.var / (d.diag * d.diag) : 0.0;
}

}  // namespace

double density_loss(const PointCloud& cloud) {
  std::vector<double> p;
  p.reserve(3 * cloud.size());
  for (const auto& q : cloud.points) p.insert(p.end(), q.begin(), q.end());
  return density_value(density_parts(p, cloud.size()));
}

ad::Var density_loss(ad::Var cloud) {
  ad::Tape& tape = *cloud.tape;
  const ad::Tensor& P = tape.value(cloud);
  require(P.cols == 3, "density_loss: input must be n x 3");
  DensityParts parts = density_parts(P.data, P.rows);
  const double value = density_value(parts);
  return tape.push(ad::Tensor(1, 1, value), {cloud.id},
                   [cloud, parts = std::move(parts)](ad::Tape& tp, std::size_t self) {
                     if (!(parts.diag > 0.0)) return;
                     constexpr std::size_t k = kDensityNeighbors;
                     const double g = tp.node_grad(self).data[0];
                     const ad::Tensor& P = tp.node_value(cloud.id);
                     ad::Tensor& G = tp.grad_slot(cloud.id);
                     const std::size_t n = parts.n;
                     const double D2 = parts.diag * parts.diag;
                     for (std::size_t i = 0; i < n; ++i) {
                       const double dm = g * 2.0 * (parts.m[i] - parts.mbar) /
                                         (static_cast<double>(n) * D2) / static_cast<double>(k);
                       if (dm == 0.0) continue;
                       for (std::size_t t = 0; t < k; ++t) {
                         const std::size_t j = parts.nbr[i * k + t];
                         double diff[3], r2 = 0.0;
                         for (std::size_t c = 0; c < 3; ++c) {
                           diff[c] = P.data[3 * i + c] - P.data[3 * j + c];
                           r2 += diff[c] * diff[c];
                         }
                         const double r = std::sqrt(r2);
                         if (!(r > 0.0)) continue;
                         for (std::size_t c = 0; c < 3; ++c) {
                           G.data[3 * i + c] += dm * diff[c] / r;
                           G.data[3 * j + c] -= dm * diff[c] / r;
                         }
                       }
                     }
                     // d/dD of var / D^2, routed through the extreme coordinates.
                     const double dD = -2.0 * g * parts.var / (D2 * parts.diag);
                     for (std::size_t c = 0; c < 3; ++c) {
                       const std::size_t hi = parts.hi_idx[c], lo = parts.lo_idx[c];
                       const double e = P.data[3 * hi + c] - P.data[3 * lo + c];
                       G.data[3 * hi + c] += dD * e / parts.diag;
                       G.data[3 * lo + c] -= dD * e / parts.diag;
                     }
                   });
}

// ---------------------------------------------------------------------------
// Differentiable costs

namespace {

ad::Var infocd_direction(ad::Var d, std::size_t n_other, const costs::InfoCdParams& p) {
  // d: per-point nearest distances (column or row vector).
  const std::size_t n = d.tape->value(d).size();
  ad::Var numer = ad::scale(ad::sum(d), 1.0 / p.tau_prime);
  ad::Var lse = ad::log_sum_exp(ad::scale(d, -1.0 / p.tau));
  ad::Var total = ad::add(numer, ad::scale(lse, p.scale_lambda * static_cast<double>(n)));
  return ad::scale(total, 1.0 / static_cast<double>(n_other));
}

}  // namespace

ad::Var cost_var(const costs::CostKind& kind, ad::Var x, ad::Var y) {
  kind.validate();
  const std::size_t nx = x.tape->value(x).rows;
  const std::size_t ny = y.tape->value(y).rows;
  require(nx > 0 && ny > 0, "cost: empty cloud");
  ad::Var base;
  switch (kind.variant) {
    case costs::CostVariant::l2_paired:
      if (nx != ny) {
        throw ContractError("l2_paired: size mismatch (" + std::to_string(nx) + " vs " +
                            std::to_string(ny) + ")");
      }
      base = ad::sum(ad::square(ad::sub(x, y)));
      break;
    case costs::CostVariant::chamfer_l2_fwd:
      base = ad::sum(ad::row_min(ad::pairwise_sq_dist(x, y)));
      break;
    case costs::CostVariant::chamfer_l2: {
      ad::Var D = ad::pairwise_sq_dist(x, y);
      base = ad::add(ad::sum(ad::row_min(D)), ad::sum(ad::col_min(D)));
      break;
    }
    case costs::CostVariant::chamfer_l1: {
      ad::Var D = ad::pairwise_sq_dist(x, y);
      base = ad::scale(ad::add(ad::mean(ad::sqrt(ad::row_min(D))), ad::mean(ad::sqrt(ad::col_min(D)))),
                       0.5);
      break;
    }
    case costs::CostVariant::infocd: {
      ad::Var D = ad::pairwise_sq_dist(x, y);
      ad::Var dx = ad::sqrt(ad::row_min(D));  // points of x against y
      ad::Var dy = ad::sqrt(ad::col_min(D));  // points of y against x
      base = ad::add(infocd_direction(dx, ny, kind.infocd), infocd_direction(dy, nx, kind.infocd));
      break;
    }
    case costs::CostVariant::emd:
      base = ad::assignment_cost(x, y, kind.ground == costs::EmdGround::sq_euclid);
      break;
  }
  return kind.intensity == 1.0 ? base : ad::scale(base, kind.intensity);
}

// ---------------------------------------------------------------------------
// Losses

namespace {

void require_batch(const std::vector<PointCloud>& b, const char* what) {
  if (b.empty()) throw ContractError(std::string(what) + ": empty batch");
}

}  // namespace

LossResult loss_T(const std::vector<PointCloud>& batch_x, const nn::NetParams& params_T,
                  const nn::NetParams& params_v, const TrainerConfig& cfg) {
  require_batch(batch_x, "loss_T");
  ad::Tape tape;
  const nn::BoundNet T = nn::bind(tape, params_T, true);
  const nn::BoundNet v = nn::bind(tape, params_v, false);
  LossResult r;
  std::vector<ad::Var> terms;
  for (const auto& x : batch_x) {
    ad::Var X = nn::cloud_to_var(tape, x);
    ad::Var Y = nn::forward(T, X);
    ad::Var c = cost_var(cfg.cost, X, Y);
    ad::Var pot = nn::forward(v, Y);
    ad::Var term = ad::sub(c, pot);
    r.cost += tape.scalar(c);
    r.potential += tape.scalar(pot);
    if (cfg.dl_weight > 0.0) {
      ad::Var dl = density_loss(Y);
      r.density += tape.scalar(dl);
      term = ad::add(term, ad::scale(dl, cfg.dl_weight));
    }
    terms.push_back(term);
  }
  ad::Var total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
  const double inv = 1.0 / static_cast<double>(batch_x.size());
  total = ad::scale(total, inv);
  r.value = tape.scalar(total);
  r.cost *= inv;
  r.potential *= inv;
  r.density *= inv;
  tape.backward(total);
  r.grads = nn::gradients(tape, T);
  return r;
}

LossResult loss_v(const std::vector<PointCloud>& batch_x, const std::vector<PointCloud>& batch_y,
                  const nn::NetParams& params_T, const nn::NetParams& params_v,
                  const TrainerConfig& cfg) {
  require_batch(batch_x, "loss_v");
  require_batch(batch_y, "loss_v");
  const DivergenceConjugate psi{cfg.conjugate};
  ad::Tape tape;
  const nn::BoundNet T = nn::bind(tape, params_T, false);
  const nn::BoundNet v = nn::bind(tape, params_v, true);
  LossResult r;
  ad::Var src;
  for (std::size_t i = 0; i < batch_x.size(); ++i) {
    ad::Var X = nn::cloud_to_var(tape, batch_x[i]);
    ad::Var Y = nn::forward(T, X);
    ad::Var c = cost_var(cfg.cost, X, Y);
    ad::Var pot = nn::forward(v, Y);
    r.cost += tape.scalar(c);
    r.potential += tape.scalar(pot);
    ad::Var term = psi.apply(ad::sub(pot, c));
    src = i == 0 ? term : ad::add(src, term);
  }
  ad::Var tgt;
  for (std::size_t j = 0; j < batch_y.size(); ++j) {
    ad::Var pot = nn::forward(v, nn::cloud_to_var(tape, batch_y[j]));
    ad::Var term = psi.apply(ad::scale(pot, -1.0));
    tgt = j == 0 ? term : ad::add(tgt, term);
  }
  const double ix = 1.0 / static_cast<double>(batch_x.size());
  const double iy = 1.0 / static_cast<double>(batch_y.size());
  ad::Var total = ad::add(ad::scale(src, ix), ad::scale(tgt, iy));
  r.value = tape.scalar(total);
  r.cost *= ix;
  r.potential *= ix;
  tape.backward(total);
  r.grads = nn::gradients(tape, v);
  return r;
}

// ---------------------------------------------------------------------------
// Sampling

SourceBatch sample_source(const std::vector<PointCloud>& incomplete,
                          const std::vector<PointCloud>& complete, const TrainerConfig& cfg,
                          Rng& rng) {
  require(!incomplete.empty() && !complete.empty(), "sample_source: empty pool");
  SourceBatch b;
  for (std::size_t k = 0; k < cfg.batch_size; ++k) {
    const bool from_complete = rng.bernoulli(cfg.mixture_prob);
    const auto& pool = from_complete ? complete : incomplete;
    b.clouds.push_back(pool[rng.below(pool.size())]);
    b.from_complete.push_back(from_complete);
  }
  return b;
}

SourceBatch sample_source(const std::vector<geo::CloudPair>& pairs, const TrainerConfig& cfg,
                          Rng& rng) {
  require(!pairs.empty(), "sample_source: no pairs");
  std::vector<PointCloud> inc, com;
  for (const auto& p : pairs) {
    inc.push_back(p.incomplete);
    com.push_back(p.complete_gt);
  }
  return sample_source(inc, com, cfg, rng);
}

SourceBatch sample_source(const std::vector<geo::CloudPair>& pairs, const TrainerConfig& cfg,
                          std::uint64_t seed) {
  Rng rng(seed);
  return sample_source(pairs, cfg, rng);
}

std::vector<PointCloud> sample_target(const std::vector<PointCloud>& complete, std::size_t n,
                                      Rng& rng) {
  require(!complete.empty(), "sample_target: empty pool");
  std::vector<PointCloud> out;
  for (std::size_t k = 0; k < n; ++k) out.push_back(complete[rng.below(complete.size())]);
  return out;
}

// ---------------------------------------------------------------------------
// Log and checkpoints

namespace {

std::string fmt(double x) {
  if (std::isnan(x)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace

std::string TrainLog::to_csv() const {
  std::ostringstream os;
  os << "iter,loss_T,loss_v,dl,val_cd_l1,val_fscore,val_residual\n";
  for (const auto& r : rows) {
    os << r.iter << ',' << fmt(r.loss_T) << ',' << fmt(r.loss_v) << ',' << fmt(r.dl) << ','
       << fmt(r.val_cd_l1) << ',' << fmt(r.val_fscore) << ',' << fmt(r.val_residual) << '\n';
  }
  return os.str();
}

namespace {

json opt_double(double x) { return std::isnan(x) ? json(nullptr) : json(x); }
double from_opt(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

}  // namespace

json to_json(const TrainState& s) {
  json rows = json::array();
  for (const auto& r : s.log.rows) {
    rows.push_back(json::array({r.iter, r.loss_T, r.loss_v, r.dl, opt_double(r.val_cd_l1),
                                opt_double(r.val_fscore), opt_double(r.val_residual)}));
  }
  return json{{"params_T", nn::to_json(s.params_T)},
              {"params_v", nn::to_json(s.params_v)},
              {"adam_T", nn::to_json(s.adam_T)},
              {"adam_v", nn::to_json(s.adam_v)},
              {"rng_state", s.rng_state},
              {"iteration", s.iteration},
              {"log", rows}};
}

TrainState train_state_from_json(const json& j) {
  TrainState s;
  s.params_T = nn::params_from_json(j.at("params_T"));
  s.params_v = nn::params_from_json(j.at("params_v"));
  s.adam_T = nn::adam_from_json(j.at("adam_T"));
  s.adam_v = nn::adam_from_json(j.at("adam_v"));
  s.rng_state = j.at("rng_state").get<std::string>();
  s.iteration = j.at("iteration").get<std::int64_t>();
  for (const auto& r : j.at("log")) {
    LogRow row;
    row.iter = r.at(0).get<std::int64_t>();
    row.loss_T = r.at(1).get<double>();
    row.loss_v = r.at(2).get<double>();
    row.dl = r.at(3).get<double>();
    row.val_cd_l1 = from_opt(r.at(4));
    row.val_fscore = from_opt(r.at(5));
    row.val_residual = from_opt(r.at(6));
    s.log.rows.push_back(row);
  }
  return s;
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out << to_json(state).dump();
    if (!out) throw IoError("failed writing checkpoint " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place: " + path.string());
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  try {
    return train_state_from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Training

Split split_pairs(const geo::LabeledDataset& dataset, double val_fraction, std::uint64_t seed) {
  const std::size_t n = dataset.pairs.size();
  require(n >= 2, "split_pairs: need at least two pairs");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = n - 1; i > 0; --i) std::swap(idx[i], idx[rng.below(i + 1)]);
  std::size_t n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  n_val = std::clamp<std::size_t>(n_val, 1, n - 1);
  Split s;
  for (std::size_t k = 0; k < n; ++k) {
    (k < n_val ? s.val : s.train).push_back(dataset.pairs[idx[k]]);
  }
  return s;
}

PointCloud complete(const nn::NetParams& params_T, const PointCloud& cloud) {
  return nn::forward_map(params_T, cloud);
}

namespace {

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + mid));
  return m;
}

double residual_with_potentials(const PointCloud& x, const PointCloud& tx, double v_tx,
                                const std::vector<PointCloud>& pool,
                                const std::vector<double>& v_pool, const costs::CostKind& cost) {
  const double lhs = costs::cost(cost, x, tx) - v_tx;
  double best = lhs;
  for (std::size_t k = 0; k < pool.size(); ++k) {
    best = std::min(best, costs::cost(cost, x, pool[k]) - v_pool[k]);
  }
  return lhs - best;
}

}  // namespace

double c_transform_residual(const nn::NetParams& params_T, const nn::NetParams& params_v,
                            const PointCloud& x, const std::vector<PointCloud>& pool,
                            const TrainerConfig& cfg) {
  const PointCloud tx = complete(params_T, x);
  std::vector<double> v_pool;
  for (const auto& y : pool) v_pool.push_back(nn::forward_potential(params_v, y));
  return residual_with_potentials(x, tx, nn::forward_potential(params_v, tx), pool, v_pool,
                                  cfg.cost);
}

ValidationMetrics validate(const nn::NetParams& params_T, const nn::NetParams& params_v,
                           const std::vector<geo::CloudPair>& val, const TrainerConfig& cfg) {
  require(!val.empty(), "validate: empty validation split");
  ValidationMetrics m;
  std::vector<PointCloud> pool;
  std::vector<double> v_pool;
  for (const auto& p : val) {
    pool.push_back(p.complete_gt);
    v_pool.push_back(nn::forward_potential(params_v, p.complete_gt));
  }
  std::vector<double> residuals;
  costs::MetricConfig mc{cfg.fscore_alpha};
  const bool pool_ok = cfg.cost.variant != costs::CostVariant::l2_paired ||
                       pool.front().size() == params_T.arch.n_out;
  for (const auto& p : val) {
    const PointCloud tx = complete(params_T, p.incomplete);
    m.cd_l1 += costs::chamfer_l1(tx, p.complete_gt);
    m.fscore += costs::fscore(tx, p.complete_gt, mc);
    if (pool_ok && (cfg.cost.variant != costs::CostVariant::l2_paired ||
                    p.incomplete.size() == tx.size())) {
      residuals.push_back(residual_with_potentials(p.incomplete, tx,
                                                   nn::forward_potential(params_v, tx), pool,
                                                   v_pool, cfg.cost));
    }
  }
  m.cd_l1 /= static_cast<double>(val.size());
  m.fscore /= static_cast<double>(val.size());
  m.median_residual = median(residuals);
  return m;
}

TrainState initial_state(const TrainerConfig& cfg) {
  cfg.validate();
  TrainState s;
  s.params_T = nn::init_params(cfg.map_arch, derive_seed(cfg.seed, "init.T"));
  s.params_v = nn::init_params(cfg.potential_arch, derive_seed(cfg.seed, "init.v"));
  s.adam_T = nn::make_adam(s.params_T, cfg.lr_T, cfg.beta1, cfg.beta2);
  s.adam_v = nn::make_adam(s.params_v, cfg.lr_v, cfg.beta1, cfg.beta2);
  s.rng_state = Rng(derive_seed(cfg.seed, "sampler")).state();
  return s;
}

std::int64_t iterations_per_epoch(std::size_t n_train, const TrainerConfig& cfg) {
  return static_cast<std::int64_t>((n_train + cfg.batch_size - 1) / cfg.batch_size);
}

TrainData make_train_data(const geo::LabeledDataset& dataset, const TrainerConfig& cfg) {
  cfg.validate();
  const Split split = split_pairs(dataset, cfg.val_fraction, derive_seed(cfg.seed, "split"));
  TrainData d;
  for (const auto& p : split.train) {
    d.source.push_back(p.incomplete);
    d.target.push_back(p.complete_gt);
  }
  d.val = split.val;
  return d;
}

TrainResult train(const geo::LabeledDataset& dataset, const TrainerConfig& cfg,
                  const std::optional<TrainState>& resume) {
  return train(make_train_data(dataset, cfg), cfg, resume);
}

TrainResult train(const TrainData& data, const TrainerConfig& cfg,
                  const std::optional<TrainState>& resume) {
  cfg.validate();
  if (data.source.size() < cfg.batch_size || data.target.size() < cfg.batch_size) {
    throw ConfigError("trainer: training pools have fewer clouds than batch_size");
  }
  require(!data.val.empty(), "trainer: empty validation split");
  if (cfg.cost.variant == costs::CostVariant::l2_paired ||
      cfg.cost.variant == costs::CostVariant::emd) {
    auto check = [&](const PointCloud& c) {
      if (c.size() != cfg.map_arch.n_out) {
        throw ConfigError("trainer: " + cfg.cost.name() + " needs every cloud to have n_out points");
      }
    };
    for (const auto& c : data.source) check(c);
    for (const auto& c : data.target) check(c);
    for (const auto& p : data.val) check(p.incomplete);
  }

  TrainResult result;
  TrainState state = resume ? *resume : initial_state(cfg);
  Rng rng(0);
  rng.restore(state.rng_state);
  const double clip = cfg.effective_grad_clip();
  const std::int64_t total = cfg.epochs * iterations_per_epoch(data.source.size(), cfg);
  result.total_iterations = total;

  auto record_validation = [&](LogRow& row) {
    const auto m = validate(state.params_T, state.params_v, data.val, cfg);
    row.val_cd_l1 = m.cd_l1;
    row.val_fscore = m.fscore;
    row.val_residual = m.median_residual;
    if (std::isnan(result.best_val_cd_l1) || m.cd_l1 < result.best_val_cd_l1) {
      result.best_val_cd_l1 = m.cd_l1;
      result.best_val_fscore = m.fscore;
      result.best_iter = row.iter;
    }
  };
  for (const auto& row : state.log.rows) {
    if (!std::isnan(row.val_cd_l1) &&
        (std::isnan(result.best_val_cd_l1) || row.val_cd_l1 < result.best_val_cd_l1)) {
      result.best_val_cd_l1 = row.val_cd_l1;
      result.best_val_fscore = row.val_fscore;
      result.best_iter = row.iter;
    }
  }

  while (state.iteration < total) {
    TrainState before = state;
    const auto src = sample_source(data.source, data.target, cfg, rng);
    const auto tgt = sample_target(data.target, cfg.batch_size, rng);
    LogRow row;
    row.iter = state.iteration + 1;
    try {
      auto lt = loss_T(src.clouds, state.params_T, state.params_v, cfg);
      if (!std::isfinite(lt.value) || std::abs(lt.value) > 1e6) {
        throw NumericalError("loss_T diverged at iteration " + std::to_string(row.iter));
      }
      if (clip > 0.0) nn::clip_grad_norm(lt.grads, clip);
      nn::adam_step(state.adam_T, state.params_T, lt.grads);
      auto lv = loss_v(src.clouds, tgt, state.params_T, state.params_v, cfg);
      if (!std::isfinite(lv.value) || std::abs(lv.value) > 1e6) {
        throw NumericalError("loss_v diverged at iteration " + std::to_string(row.iter));
      }
      if (clip > 0.0) nn::clip_grad_norm(lv.grads, clip);
      nn::adam_step(state.adam_v, state.params_v, lv.grads);
      row.loss_T = lt.value;
      row.loss_v = lv.value;
      row.dl = lt.density;
      state.iteration = row.iter;
      state.rng_state = rng.state();
      if (row.iter % cfg.validate_every == 0 || row.iter == total) record_validation(row);
      state.params_T.validate();
      state.params_v.validate();
    } catch (const NumericalError& e) {
      result.state = std::move(before);
      result.diverged = true;
      result.message = e.what();
      if (!cfg.checkpoint_path.empty()) save_checkpoint(result.state, cfg.checkpoint_path);
      return result;
    }
    state.log.rows.push_back(row);
    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_path.empty() &&
        state.iteration % cfg.checkpoint_every == 0) {
      save_checkpoint(state, cfg.checkpoint_path);
    }
  }
  result.final_metrics = validate(state.params_T, state.params_v, data.val, cfg);
  result.state = std::move(state);
  if (!cfg.checkpoint_path.empty()) save_checkpoint(result.state, cfg.checkpoint_path);
  return result;
}

}  // namespace upc::trainer
