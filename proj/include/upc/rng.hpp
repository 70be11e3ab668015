#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace upc {

std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t splitmix64(std::uint64_t x);

/// Seed for an independent stream: splitmix64(master ^ fnv1a64(component)).
/// Every component that draws random numbers gets its own stream so that
/// adding draws in one place never perturbs another.
std::uint64_t derive_seed(std::uint64_t master, std::string_view component);

// Thin wrapper over mt19937_64. Conversions to doubles/ints are written out
// explicitly so streams are identical across standard library vendors.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  // Uniform on [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer on [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  std::string state() const;
  void restore(const std::string& state);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace upc
