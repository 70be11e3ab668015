#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "upc/costs.hpp"
#include "upc/discrete_ot.hpp"
#include "upc/geometry.hpp"
#include "upc/uot_trainer.hpp"

namespace upc::exp {

struct ResultRow {
  std::string experiment;
  std::string cell;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string metric;
  double value = 0.0;
};

struct ResultTable {
  std::vector<ResultRow> rows;

  void add(const std::string& experiment, const std::string& cell, std::uint64_t seed,
           const std::string& config_hash, const std::string& metric, double value);
  void append(const ResultTable& other);
  // First matching row; throws ContractError when absent.
  double value(const std::string& cell, const std::string& metric) const;
  std::optional<double> find(const std::string& cell, const std::string& metric) const;
  // Header: experiment,cell,seed,config_hash,metric,value
  std::string to_csv() const;
  static ResultTable from_csv(const std::string& text);
};

// 16 hex digits of fnv1a64 over the compact JSON dump.
std::string config_hash(const nlohmann::json& config);

// Smaller networks and a larger step than the full-scale defaults; what the
// harnesses use on a single CPU core.
trainer::TrainerConfig desk_trainer_config();

// ---------------------------------------------------------------------------
// Cost-minimizer retrieval

struct RetrievalConfig {
  std::vector<costs::CostKind> kinds{costs::CostKind::l2(), costs::CostKind::cd_l2(),
                                     costs::CostKind::cd_l1(), costs::CostKind::info_cd(),
                                     costs::CostKind::emd()};
  std::size_t k = 3;
  std::uint64_t seed = 0;  // pool shuffle

  void validate() const;
};
nlohmann::json to_json(const RetrievalConfig& cfg);
RetrievalConfig retrieval_config_from_json(const nlohmann::json& j, RetrievalConfig base = {});

struct RetrievalResult {
  ResultTable table;
  // kind name -> per query, the pool indices (into `pool_order`) of the k
  // lowest-cost complete clouds, best first.
  std::map<std::string, std::vector<std::vector<std::size_t>>> neighbors;
  // pool position -> dataset pair index
  std::vector<std::size_t> pool_order;
};

// For each incomplete x, g(x) = argmin_y c(x, y) over the shuffled pool of
// complete clouds; reports cd_l1(g(x), y_gt(x)) per class ("<kind>/<class>")
// and overall ("<kind>/all"), metric "gap".
RetrievalResult cost_retrieval_eval(const geo::LabeledDataset& dataset,
                                    const RetrievalConfig& cfg);

// ---------------------------------------------------------------------------
// Class imbalance

enum class ImbalanceMode { discrete, neural };

struct ImbalanceSpec {
  geo::ShapeKind class1 = geo::ShapeKind::cylinder;
  geo::ShapeKind class2 = geo::ShapeKind::torus;
  double p1 = 6.4;   // natural proportion of class 1
  double p2 = 21.3;  // natural proportion of class 2 (target side scaled by r)
  std::vector<double> ratios{0.3, 0.5, 0.7, 1.0};
  std::uint64_t seed = 0;

  // discrete: atoms per class on each side and solver settings
  std::size_t atoms_per_class = 4;
  double epsilon = 0.01;
  double rho = 0.1;

  // neural: source instances per class at natural proportions
  std::size_t source_class1 = 30;
  std::size_t source_class2 = 100;
  std::size_t points = 64;

  void validate() const;
};
nlohmann::json to_json(const ImbalanceSpec& spec);
ImbalanceSpec imbalance_spec_from_json(const nlohmann::json& j, ImbalanceSpec base = {});
const std::vector<std::string>& imbalance_spec_keys();

// One two-cluster instance: source atoms at natural proportions, target
// atoms with class 2 scaled by r; cost = chamfer_l1(incomplete, complete).
struct ImbalanceInstance {
  ot::Histogram a;
  ot::Histogram b;
  ot::CostMatrix cost;
  std::vector<int> source_labels;
  std::vector<int> target_labels;
};
ImbalanceInstance make_imbalance_instance(const ImbalanceSpec& spec, double r);

// discrete: rows "r=<r>/ot" and "r=<r>/uot" with cross_class_mass (and the
// UOT residual); neural: rows "r=<r>/softplus" and "r=<r>/identity" with
// cd_l1 / fscore, plus "spread/<conjugate>" rows (max - min over r).
ResultTable imbalance_bench(const ImbalanceSpec& spec, ImbalanceMode mode,
                            const trainer::TrainerConfig& cfg = desk_trainer_config());

// ---------------------------------------------------------------------------
// Neural ablations. Each cell trains from the same seed(s); rows carry
// cd_l1, fscore (at cfg.fscore_alpha), best_cd_l1 and diverged per seed, and
// "<cell>/mean" rows when more than one seed is given.

ResultTable cost_ablation(const geo::LabeledDataset& dataset,
                          const std::vector<costs::CostKind>& kinds,
                          const trainer::TrainerConfig& cfg,
                          const std::vector<std::uint64_t>& seeds = {});
ResultTable mixture_ablation(const geo::LabeledDataset& dataset, const trainer::TrainerConfig& cfg,
                             const std::vector<double>& mixtures = {0.0, 0.5},
                             const std::vector<std::uint64_t>& seeds = {});
ResultTable tau_sweep(const geo::LabeledDataset& dataset, const trainer::TrainerConfig& cfg,
                      const std::vector<double>& taus = {0.02, 0.025, 0.044, 0.1, 0.25},
                      const std::vector<std::uint64_t>& seeds = {});

// Cell label helpers shared with the CLI.
std::string format_number(double x);

}  // namespace upc::exp
