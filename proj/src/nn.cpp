#include "upc/nn.hpp"

#include <cmath>

#include "upc/errors.hpp"
#include "upc/rng.hpp"

namespace upc::nn {

using nlohmann::json;

std::size_t SetNetArch::num_layers() const {
  return (point_widths.size() - 1) + head_widths.size() + 1;
}

void SetNetArch::validate() const {
  if (point_widths.size() < 2 || point_widths.front() != 3) {
    throw ConfigError("network: point widths must start at 3 and have at least one layer");
  }
  for (std::size_t w : point_widths) {
    if (w == 0) throw ConfigError("network: layer widths must be positive");
  }
  for (std::size_t w : head_widths) {
    if (w == 0) throw ConfigError("network: layer widths must be positive");
  }
  if (kind == NetKind::map && n_out == 0) throw ConfigError("network: n_out must be positive");
}

namespace {

// (fan_in, fan_out) per layer in evaluation order.
std::vector<std::pair<std::size_t, std::size_t>> layer_dims(const SetNetArch& a) {
  std::vector<std::pair<std::size_t, std::size_t>> dims;
  for (std::size_t l = 0; l + 1 < a.point_widths.size(); ++l) {
    dims.emplace_back(a.point_widths[l], a.point_widths[l + 1]);
  }
  std::size_t in = a.point_widths.back();
  for (std::size_t w : a.head_widths) {
    dims.emplace_back(in, w);
    in = w;
  }
  dims.emplace_back(in, a.output_dim());
  return dims;
}

}  // namespace

std::size_t NetParams::num_parameters() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.size();
  return n;
}

void NetParams::validate() const {
  arch.validate();
  const auto dims = layer_dims(arch);
  require(tensors.size() == 2 * dims.size(), "network: tensor count does not match architecture");
  for (std::size_t l = 0; l < dims.size(); ++l) {
    const Tensor& W = tensors[2 * l];
    const Tensor& b = tensors[2 * l + 1];
    require(W.rows == dims[l].first && W.cols == dims[l].second,
            "network: weight shape mismatch at layer " + std::to_string(l));
    require(b.rows == 1 && b.cols == dims[l].second,
            "network: bias shape mismatch at layer " + std::to_string(l));
    for (const Tensor* t : {&W, &b}) {
      for (double x : t->data) {
        if (!std::isfinite(x)) {
          throw NumericalError("network: non-finite parameter at layer " + std::to_string(l));
        }
      }
    }
  }
}

NetParams init_params(const SetNetArch& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(seed);
  NetParams p{arch, {}};
  for (const auto& [in, out] : layer_dims(arch)) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Tensor W(in, out), b(1, out);
    for (double& x : W.data) x = rng.uniform(-bound, bound);
    for (double& x : b.data) x = rng.uniform(-bound, bound);
    p.tensors.push_back(std::move(W));
    p.tensors.push_back(std::move(b));
  }
  return p;
}

NetParams zero_params(const SetNetArch& arch) {
  arch.validate();
  NetParams p{arch, {}};
  for (const auto& [in, out] : layer_dims(arch)) {
    p.tensors.emplace_back(in, out);
    p.tensors.emplace_back(1, out);
  }
  return p;
}

BoundNet bind(ad::Tape& tape, const NetParams& params, bool requires_grad) {
  params.validate();
  BoundNet net{&params.arch, {}};
  for (const auto& t : params.tensors) net.vars.push_back(tape.leaf(t, requires_grad));
  return net;
}

Grads gradients(const ad::Tape& tape, const BoundNet& net) {
  Grads g;
  for (Var v : net.vars) g.push_back(tape.grad(v));
  return g;
}

Var cloud_to_var(ad::Tape& tape, const geo::PointCloud& cloud) {
  Tensor t(cloud.size(), 3);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (std::size_t k = 0; k < 3; ++k) t.data[3 * i + k] = cloud[i][k];
  }
  return tape.constant(std::move(t));
}

geo::PointCloud var_to_cloud(const ad::Tape& tape, Var v) {
  const Tensor& t = tape.value(v);
  require(t.cols == 3, "var_to_cloud: value is not n x 3");
  geo::PointCloud c;
  c.points.resize(t.rows);
  for (std::size_t i = 0; i < t.rows; ++i) {
    c.points[i] = {t.data[3 * i], t.data[3 * i + 1], t.data[3 * i + 2]};
  }
  return c;
}

namespace {

void check_finite(const ad::Tape& tape, Var v, std::size_t layer) {
  for (double x : tape.value(v).data) {
    if (!std::isfinite(x)) {
      throw NumericalError("network: non-finite activation at layer " + std::to_string(layer));
    }
  }
}

}  // namespace

Var forward(const BoundNet& net, Var cloud) {
  const SetNetArch& a = *net.arch;
  ad::Tape& tape = *cloud.tape;
  require(tape.value(cloud).cols == 3 && tape.value(cloud).rows > 0,
          "forward: input must be a nonempty n x 3 cloud");
  const std::size_t n_point = a.point_widths.size() - 1;
  const std::size_t n_layers = a.num_layers();
  Var h = cloud;
  std::size_t layer = 0;
  for (; layer < n_point; ++layer) {
    h = ad::relu(ad::add_bias(ad::matmul(h, net.vars[2 * layer]), net.vars[2 * layer + 1]));
    check_finite(tape, h, layer);
  }
  h = ad::max_pool_rows(h);
  for (; layer < n_layers; ++layer) {
    h = ad::add_bias(ad::matmul(h, net.vars[2 * layer]), net.vars[2 * layer + 1]);
    if (layer + 1 < n_layers) h = ad::relu(h);
    check_finite(tape, h, layer);
  }
  if (a.kind == NetKind::map) h = ad::reshape(h, a.n_out, 3);
  return h;
}

geo::PointCloud forward_map(const NetParams& params, const geo::PointCloud& cloud) {
  require(params.arch.kind == NetKind::map, "forward_map: parameters are not a map network");
  ad::Tape tape;
  const BoundNet net = bind(tape, params, false);
  return var_to_cloud(tape, forward(net, cloud_to_var(tape, cloud)));
}

double forward_potential(const NetParams& params, const geo::PointCloud& cloud) {
  require(params.arch.kind == NetKind::potential,
          "forward_potential: parameters are not a potential network");
  ad::Tape tape;
  const BoundNet net = bind(tape, params, false);
  return tape.scalar(forward(net, cloud_to_var(tape, cloud)));
}

AdamState make_adam(const NetParams& params, double lr, double beta1, double beta2) {
  if (!(lr > 0.0)) throw ConfigError("adam: learning rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("adam: betas must lie in [0, 1)");
  }
  AdamState s;
  s.lr = lr;
  s.beta1 = beta1;
  s.beta2 = beta2;
  for (const auto& t : params.tensors) {
    s.m.emplace_back(t.rows, t.cols);
    s.v.emplace_back(t.rows, t.cols);
  }
  return s;
}

void adam_step(AdamState& s, NetParams& params, const Grads& grads) {
  require(grads.size() == params.tensors.size() && s.m.size() == params.tensors.size() &&
              s.v.size() == params.tensors.size(),
          "adam_step: parameter/gradient count mismatch");
  for (std::size_t k = 0; k < grads.size(); ++k) {
    require(grads[k].rows == params.tensors[k].rows && grads[k].cols == params.tensors[k].cols &&
                s.m[k].size() == grads[k].size() && s.v[k].size() == grads[k].size(),
            "adam_step: shape mismatch at tensor " + std::to_string(k));
  }
  ++s.step;
  const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t k = 0; k < grads.size(); ++k) {
    auto& p = params.tensors[k].data;
    auto& m = s.m[k].data;
    auto& v = s.v[k].data;
    const auto& g = grads[k].data;
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
      v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
      p[i] -= s.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + s.eps_hat);
    }
  }
}

double grad_norm(const Grads& grads) {
  double s = 0.0;
  for (const auto& t : grads) {
    for (double x : t.data) s += x * x;
  }
  return std::sqrt(s);
}

void clip_grad_norm(Grads& grads, double max_norm) {
  const double n = grad_norm(grads);
  if (!(n > max_norm)) return;
  const double f = max_norm / n;
  for (auto& t : grads) {
    for (double& x : t.data) x *= f;
  }
}

json to_json(const Tensor& t) {
  return json{{"rows", t.rows}, {"cols", t.cols}, {"data", t.data}};
}

Tensor tensor_from_json(const json& j) {
  return Tensor(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                j.at("data").get<std::vector<double>>());
}

json to_json(const SetNetArch& a) {
  return json{{"kind", a.kind == NetKind::map ? "map" : "potential"},
              {"point_widths", a.point_widths},
              {"head_widths", a.head_widths},
              {"n_out", a.n_out}};
}

SetNetArch arch_from_json(const json& j) {
  SetNetArch a;
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "map") {
    a.kind = NetKind::map;
  } else if (kind == "potential") {
    a.kind = NetKind::potential;
  } else {
    throw ValidationError("unknown network kind '" + kind + "'");
  }
  a.point_widths = j.at("point_widths").get<std::vector<std::size_t>>();
  a.head_widths = j.at("head_widths").get<std::vector<std::size_t>>();
  a.n_out = j.at("n_out").get<std::size_t>();
  return a;
}

json to_json(const NetParams& p) {
  json tensors = json::array();
  for (const auto& t : p.tensors) tensors.push_back(to_json(t));
  return json{{"arch", to_json(p.arch)}, {"tensors", tensors}};
}

NetParams params_from_json(const json& j) {
  NetParams p;
  p.arch = arch_from_json(j.at("arch"));
  for (const auto& t : j.at("tensors")) p.tensors.push_back(tensor_from_json(t));
  p.validate();
  return p;
}

json to_json(const AdamState& s) {
  json m = json::array(), v = json::array();
  for (const auto& t : s.m) m.push_back(to_json(t));
  for (const auto& t : s.v) v.push_back(to_json(t));
  return json{{"beta1", s.beta1}, {"beta2", s.beta2}, {"lr", s.lr}, {"eps_hat", s.eps_hat},
              {"step", s.step},   {"m", m},           {"v", v}};
}

AdamState adam_from_json(const json& j) {
  AdamState s;
  s.beta1 = j.at("beta1").get<double>();
  s.beta2 = j.at("beta2").get<double>();
  s.lr = j.at("lr").get<double>();
  s.eps_hat = j.at("eps_hat").get<double>();
  s.step = j.at("step").get<std::int64_t>();
  for (const auto& t : j.at("m")) s.m.push_back(tensor_from_json(t));
  for (const auto& t : j.at("v")) s.v.push_back(tensor_from_json(t));
  return s;
}

}  // namespace upc::nn
