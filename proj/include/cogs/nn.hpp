#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cogs/tensor.hpp"

namespace cogs {

using Rng = std::mt19937_64;

// Derives an independent stream from a base seed and a label.
uint64_t derive_seed(uint64_t seed, std::string_view label);

double normal(Rng& rng, double mean = 0.0, double stddev = 1.0);
double uniform(Rng& rng, double lo = 0.0, double hi = 1.0);

}  // namespace cogs

namespace cogs::nn {

using ag::Shape;
using ag::Tensor;

enum class Init { kZeros, kOnes, kNormal, kUniform };

// Named, ordered parameter collection. Names are unique; insertion order is
// the serialization order.
class ParamStore {
 public:
  // kNormal draws N(0, scale^2); kUniform draws U(-scale, scale).
  Tensor add(const std::string& name, Shape shape, Init init, Rng& rng,
             double scale = 0.0);
  // Adds a parameter with explicit values.
  Tensor insert(const std::string& name, Shape shape, std::vector<double> values);
  Tensor get(const std::string& name) const;
  bool contains(const std::string& name) const;

  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  size_t total_elements() const;

  // Copies share tensors; clone() does not.
  ParamStore clone() const;

  void zero_grad();
  // Rounds every value to the nearest float32 so checkpoints reload exactly.
  void round_to_float();
  void set_requires_grad(bool on);

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // 0 disables clipping
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions opts);

  // Applies one update from the accumulated gradients; returns the global
  // gradient norm before clipping.
  double step();
  void zero_grad();
  AdamOptions& options() { return opts_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamOptions opts_;
  int64_t t_ = 0;
};

std::vector<Tensor> params_of(const ParamStore& store);

}  // namespace cogs::nn
