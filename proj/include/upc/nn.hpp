#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "upc/autodiff.hpp"
#include "upc/geometry.hpp"

namespace upc::nn {

using ad::Tensor;
using ad::Var;

enum class NetKind { map, potential };

// Per-point MLP -> max-pool over points -> MLP head. ReLU after every layer
// except the last head layer.
struct SetNetArch {
  NetKind kind = NetKind::map;
  std::vector<std::size_t> point_widths{3, 64, 128};  // first entry must be 3
  std::vector<std::size_t> head_widths{128};          // hidden head layers
  std::size_t n_out = 256;                            // map output points

  std::size_t output_dim() const { return kind == NetKind::map ? 3 * n_out : 1; }
  std::size_t num_layers() const;  // point layers + head layers (incl. output)
  void validate() const;           // throws ConfigError

  static SetNetArch map_default() { return {}; }
  static SetNetArch potential_default() {
    SetNetArch a;
    a.kind = NetKind::potential;
    return a;
  }
  friend bool operator==(const SetNetArch&, const SetNetArch&) = default;
};

// Weights W_l (in x out) and biases b_l (1 x out), layer by layer, point
// layers first.
struct NetParams {
  SetNetArch arch;
  std::vector<Tensor> tensors;

  std::size_t num_parameters() const;
  void validate() const;  // shapes chain and values are finite
  friend bool operator==(const NetParams&, const NetParams&) = default;
};
using MapNetParams = NetParams;
using PotentialNetParams = NetParams;
using Grads = std::vector<Tensor>;

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
NetParams init_params(const SetNetArch& arch, std::uint64_t seed);
NetParams zero_params(const SetNetArch& arch);

// Parameters placed on a tape.
struct BoundNet {
  const SetNetArch* arch = nullptr;
  std::vector<Var> vars;
};
BoundNet bind(ad::Tape& tape, const NetParams& params, bool requires_grad);
Grads gradients(const ad::Tape& tape, const BoundNet& net);

Var cloud_to_var(ad::Tape& tape, const geo::PointCloud& cloud);
geo::PointCloud var_to_cloud(const ad::Tape& tape, Var v);

// Network output on the tape: n_out x 3 for maps, 1 x 1 for potentials.
// A non-finite activation throws NumericalError naming the layer.
Var forward(const BoundNet& net, Var cloud);

// One-shot evaluation helpers (fresh tape, no gradients).
geo::PointCloud forward_map(const NetParams& params, const geo::PointCloud& cloud);
double forward_potential(const NetParams& params, const geo::PointCloud& cloud);

struct AdamState {
  double beta1 = 0.95;
  double beta2 = 0.999;
  double lr = 1e-5;
  double eps_hat = 1e-8;
  std::int64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  friend bool operator==(const AdamState&, const AdamState&) = default;
};
AdamState make_adam(const NetParams& params, double lr, double beta1 = 0.95, double beta2 = 0.999);
// Bias-corrected Adam update. Throws ContractError on shape mismatch.
void adam_step(AdamState& state, NetParams& params, const Grads& grads);

double grad_norm(const Grads& grads);
// Rescales grads in place so that their global norm is at most max_norm.
void clip_grad_norm(Grads& grads, double max_norm);

// Checkpoint encoding; doubles survive the round trip bit for bit.
nlohmann::json to_json(const Tensor& t);
Tensor tensor_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SetNetArch& arch);
SetNetArch arch_from_json(const nlohmann::json& j);
nlohmann::json to_json(const NetParams& params);
NetParams params_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AdamState& state);
AdamState adam_from_json(const nlohmann::json& j);

}  // namespace upc::nn
