#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "upc/autodiff.hpp"
#include "upc/costs.hpp"
#include "upc/geometry.hpp"
#include "upc/nn.hpp"
#include "upc/rng.hpp"

namespace upc::trainer {

using geo::PointCloud;

enum class ConjugateKind { softplus_shifted, identity };

std::string to_string(ConjugateKind kind);
ConjugateKind conjugate_kind_from_string(const std::string& name);  // ConfigError

// Convex conjugate of the marginal divergence.
//   softplus_shifted: 2 log(1 + e^x) - 2 log 2
//   identity:         x (recovers the balanced semi-dual)
struct DivergenceConjugate {
  ConjugateKind kind = ConjugateKind::softplus_shifted;

  double operator()(double x) const;
  double derivative(double x) const;
  ad::Var apply(ad::Var x) const;
};

struct TrainerConfig {
  double lr_T = 1e-5;
  double lr_v = 1e-5;
  double beta1 = 0.95;
  double beta2 = 0.999;
  std::size_t batch_size = 4;
  int epochs = 100;
  costs::CostKind cost = default_cost();
  double dl_weight = 10.5;
  double mixture_prob = 0.5;
  ConjugateKind conjugate = ConjugateKind::softplus_shifted;
  // Global gradient-norm clip for both networks. Negative means automatic:
  // 1.0 with the identity conjugate, off otherwise.
  double grad_clip = -1.0;
  nn::SetNetArch map_arch = nn::SetNetArch::map_default();
  nn::SetNetArch potential_arch = nn::SetNetArch::potential_default();
  int validate_every = 200;  // iterations; the final iteration is always validated
  double val_fraction = 0.2;
  double fscore_alpha = 0.01;
  int checkpoint_every = 0;  // iterations; 0 disables periodic checkpoints
  std::filesystem::path checkpoint_path;
  std::uint64_t seed = 0;

  // InfoCD with tau = 2, lambda = 1e-7 and intensity 0.044.
  static costs::CostKind default_cost();

  double effective_grad_clip() const;
  void validate() const;  // throws ConfigError
};

// Flat JSON encoding (checkpoint_path is runtime-only and not encoded).
// Decoding starts from `base`, overrides present keys and rejects unknown ones.
nlohmann::json to_json(const TrainerConfig& cfg);
TrainerConfig trainer_config_from_json(const nlohmann::json& j, TrainerConfig base = {});
const std::vector<std::string>& trainer_config_keys();

// Normalized k-nearest-neighbor spacing variance:
//   m_i = mean distance from p_i to its k nearest neighbors
//   dl  = var_i(m_i) / diag(bbox)^2
// Scale invariant; zero when every point sees the same neighbor spacing.
inline constexpr std::size_t kDensityNeighbors = 4;
double density_loss(const PointCloud& cloud);
ad::Var density_loss(ad::Var cloud);

// Differentiable cost on the tape, matching costs::cost(kind, x, y).
ad::Var cost_var(const costs::CostKind& kind, ad::Var x, ad::Var y);

struct LossResult {
  double value = 0.0;
  double cost = 0.0;       // batch mean of c(x, T(x))
  double potential = 0.0;  // batch mean of v(T(x))
  double density = 0.0;    // batch mean of dl(T(x))
  nn::Grads grads;         // for the network being trained
};

// mean_x [ c(x, T(x)) - v(T(x)) + dl_weight * dl(T(x)) ]; gradients for T.
LossResult loss_T(const std::vector<PointCloud>& batch_x, const nn::NetParams& params_T,
                  const nn::NetParams& params_v, const TrainerConfig& cfg);
// mean_x Psi1*(-c(x, T(x)) + v(T(x))) + mean_y Psi2*(-v(y)); gradients for v.
LossResult loss_v(const std::vector<PointCloud>& batch_x, const std::vector<PointCloud>& batch_y,
                  const nn::NetParams& params_T, const nn::NetParams& params_v,
                  const TrainerConfig& cfg);

struct SourceBatch {
  std::vector<PointCloud> clouds;
  std::vector<bool> from_complete;
};
// Each element is a complete cloud with probability mixture_prob and an
// incomplete one otherwise, drawn uniformly from the given pairs.
SourceBatch sample_source(const std::vector<geo::CloudPair>& pairs, const TrainerConfig& cfg,
                          Rng& rng);
SourceBatch sample_source(const std::vector<geo::CloudPair>& pairs, const TrainerConfig& cfg,
                          std::uint64_t seed);
// Same draw from explicit pools: the complete component comes from the
// target pool.
SourceBatch sample_source(const std::vector<PointCloud>& incomplete,
                          const std::vector<PointCloud>& complete, const TrainerConfig& cfg,
                          Rng& rng);
std::vector<PointCloud> sample_target(const std::vector<PointCloud>& complete, std::size_t n,
                                      Rng& rng);

struct LogRow {
  std::int64_t iter = 0;
  double loss_T = 0.0;
  double loss_v = 0.0;
  double dl = 0.0;
  // NaN when the row carries no validation.
  double val_cd_l1 = std::numeric_limits<double>::quiet_NaN();
  double val_fscore = std::numeric_limits<double>::quiet_NaN();
  double val_residual = std::numeric_limits<double>::quiet_NaN();
};

struct TrainLog {
  std::vector<LogRow> rows;
  std::string to_csv() const;
};

// Deterministic 80/20 style split of the pair indices.
struct Split {
  std::vector<geo::CloudPair> train;
  std::vector<geo::CloudPair> val;
};
Split split_pairs(const geo::LabeledDataset& dataset, double val_fraction, std::uint64_t seed);

struct TrainState {
  nn::NetParams params_T;
  nn::NetParams params_v;
  nn::AdamState adam_T;
  nn::AdamState adam_v;
  std::string rng_state;
  std::int64_t iteration = 0;
  TrainLog log;
};
nlohmann::json to_json(const TrainState& state);
TrainState train_state_from_json(const nlohmann::json& j);
// Write-temp-then-rename.
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);

struct ValidationMetrics {
  double cd_l1 = 0.0;
  double fscore = 0.0;
  double median_residual = 0.0;
};
ValidationMetrics validate(const nn::NetParams& params_T, const nn::NetParams& params_v,
                           const std::vector<geo::CloudPair>& val, const TrainerConfig& cfg);

struct TrainResult {
  TrainState state;  // last finite state
  bool diverged = false;
  std::string message;
  double best_val_cd_l1 = std::numeric_limits<double>::quiet_NaN();
  double best_val_fscore = std::numeric_limits<double>::quiet_NaN();
  std::int64_t best_iter = -1;
  ValidationMetrics final_metrics;
  std::int64_t total_iterations = 0;
};

TrainState initial_state(const TrainerConfig& cfg);
std::int64_t iterations_per_epoch(std::size_t n_train, const TrainerConfig& cfg);

// Alternating updates: one step on loss_T, then one on loss_v, per iteration.
// Resumes from `resume` when given. Stops at the first iteration whose loss
// is non-finite or exceeds 1e6 in magnitude and returns the state before it.
TrainResult train(const geo::LabeledDataset& dataset, const TrainerConfig& cfg,
                  const std::optional<TrainState>& resume = std::nullopt);

// Unpaired training data: source incomplete clouds, target complete clouds
// (possibly with different class proportions) and paired validation clouds.
struct TrainData {
  std::vector<PointCloud> source;
  std::vector<PointCloud> target;
  std::vector<geo::CloudPair> val;
};
TrainData make_train_data(const geo::LabeledDataset& dataset, const TrainerConfig& cfg);
TrainResult train(const TrainData& data, const TrainerConfig& cfg,
                  const std::optional<TrainState>& resume = std::nullopt);

PointCloud complete(const nn::NetParams& params_T, const PointCloud& cloud);

// [c(x, T(x)) - v(T(x))] - min over pool + {T(x)} of [c(x, y) - v(y)].
double c_transform_residual(const nn::NetParams& params_T, const nn::NetParams& params_v,
                            const PointCloud& x, const std::vector<PointCloud>& pool,
                            const TrainerConfig& cfg);

}  // namespace upc::trainer
