#include "cogs/nn.hpp"

#include <cmath>

#include "cogs/error.hpp"

namespace cogs {

uint64_t derive_seed(uint64_t seed, std::string_view label) {
  // FNV-1a over the label, mixed with the seed through splitmix64.
  uint64_t h = 14695981039346656037ULL;
  for (char c : label) {
    h ^= static_cast<uint8_t>(c);
    h *= 1099511628211ULL;
  }
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL + h;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double normal(Rng& rng, double mean, double stddev) {
  std::normal_distribution<double> dist(mean, stddev);
  return dist(rng);
}

double uniform(Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  return dist(rng);
}

}  // namespace cogs

namespace cogs::nn {

Tensor ParamStore::add(const std::string& name, Shape shape, Init init, Rng& rng, double scale) {
  COGS_CHECK(!contains(name), ErrorKind::kConfig, "duplicate parameter " + name);
  std::vector<double> values(ag::numel_of(shape));
  for (double& v : values) {
    switch (init) {
      case Init::kZeros: v = 0.0; break;
      case Init::kOnes: v = 1.0; break;
      case Init::kNormal: v = normal(rng, 0.0, scale); break;
      case Init::kUniform: v = uniform(rng, -scale, scale); break;
    }
  }
  Tensor t = Tensor::from(std::move(shape), std::move(values), true);
  items_.emplace_back(name, t);
  return t;
}

Tensor ParamStore::insert(const std::string& name, Shape shape, std::vector<double> values) {
  COGS_CHECK(!contains(name), ErrorKind::kConfig, "duplicate parameter " + name);
  COGS_CHECK(ag::numel_of(shape) == values.size(), ErrorKind::kShape,
             "parameter " + name + ": values do not match shape " + ag::shape_str(shape));
  Tensor t = Tensor::from(std::move(shape), std::move(values), true);
  items_.emplace_back(name, t);
  return t;
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [n, t] : items_) {
    Tensor c = out.insert(n, t.shape(), t.values());
    c.node()->requires_grad = t.requires_grad();
  }
  return out;
}

Tensor ParamStore::get(const std::string& name) const {
  for (const auto& [n, t] : items_)
    if (n == name) return t;
  throw Error(ErrorKind::kNotFound, "no parameter named " + name);
}

bool ParamStore::contains(const std::string& name) const {
  for (const auto& item : items_)
    if (item.first == name) return true;
  return false;
}

size_t ParamStore::total_elements() const {
  size_t n = 0;
  for (const auto& item : items_) n += item.second.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& item : items_) item.second.zero_grad();
}

void ParamStore::round_to_float() {
  for (auto& item : items_)
    for (double& v : item.second.mutable_value()) v = static_cast<double>(static_cast<float>(v));
}

void ParamStore::set_requires_grad(bool on) {
  for (auto& item : items_) item.second.node()->requires_grad = on;
}

std::vector<Tensor> params_of(const ParamStore& store) {
  std::vector<Tensor> out;
  for (const auto& item : store.items()) out.push_back(item.second);
  return out;
}

Adam::Adam(std::vector<Tensor> params, AdamOptions opts)
    : params_(std::move(params)), opts_(opts) {
  for (const Tensor& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

double Adam::step() {
  double sq = 0.0;
  for (Tensor& p : params_)
    for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  COGS_CHECK(std::isfinite(norm), ErrorKind::kNumeric, "non-finite gradient norm");
  const double clip = (opts_.clip_norm > 0.0 && norm > opts_.clip_norm) ? opts_.clip_norm / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, double(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, double(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto value = params_[i].mutable_value();
    auto grad = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t j = 0; j < value.size(); ++j) {
      const double g = grad[j] * clip;
      m[j] = opts_.beta1 * m[j] + (1.0 - opts_.beta1) * g;
      v[j] = opts_.beta2 * v[j] + (1.0 - opts_.beta2) * g * g;
      value[j] -= opts_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + opts_.eps);
    }
  }
  return norm;
}

}  // namespace cogs::nn
