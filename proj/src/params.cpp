#include "params.hpp"

#include <cmath>

#include "errors.hpp"

namespace topiq {

Tensor& ParamStore::add(const std::string& name, Tensor init) {
  auto [it, inserted] = params.emplace(name, std::move(init));
  if (!inserted) throw UsageError("ParamStore: duplicate parameter '" + name + "'");
  return it->second;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw UsageError("ParamStore: no parameter '" + name + "'");
  return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw UsageError("ParamStore: no parameter '" + name + "'");
  return it->second;
}

std::vector<std::string> ParamStore::names_with_prefix(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [name, t] : params)
    if (name.rfind(prefix, 0) == 0) out.push_back(name);
  return out;
}

TensorMap ParamStore::snapshot() const {
  TensorMap m;
  for (const auto& [name, t] : params) {
    Tensor copy;
    copy.shape = t.shape;
    copy.values = t.values;
    m.emplace(name, std::move(copy));
  }
  return m;
}

void ParamStore::load(const TensorMap& m) {
  for (const auto& [name, t] : m) {
    auto it = params.find(name);
    if (it == params.end()) continue;  // checkpoint may carry more than this model uses
    if (it->second.shape != t.shape)
      throw DataError("checkpoint shape mismatch for '" + name + "'");
    it->second.values = t.values;
  }
}

void ParamStore::zero_grads() {
  for (auto& [name, t] : params) t.grad.clear();
}

VarId TapeBinding::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  Tensor& p = store_.at(name);
  Tensor leaf;
  leaf.shape = p.shape;
  leaf.values = p.values;
  bool rg = trainable_ ? trainable_(name) : true;
  VarId id = tape_.leaf(std::move(leaf), rg);
  bound_.emplace(name, id);
  return id;
}

void TapeBinding::harvest() {
  for (const auto& [name, id] : bound_) {
    const std::vector<double>& g = tape_.grad(id);
    if (g.empty()) continue;
    Tensor& p = store_.at(name);
    p.ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i];
  }
}

void Adam::step(ParamStore& store, const std::vector<std::string>& trainable,
                double clip_norm) {
  double sq = 0.0;
  for (const std::string& name : trainable) {
    const Tensor& p = store.at(name);
    for (double g : p.grad) sq += g * g;
  }
  double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("Adam: non-finite gradient norm");
  double scale = norm > clip_norm ? clip_norm / norm : 1.0;

  ++t;
  double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (const std::string& name : trainable) {
    Tensor& p = store.at(name);
    // dense semantics: a parameter unused this step sees gradient zero
    bool has_grad = !p.grad.empty();
    auto& [m, v] = moments[name];
    if (m.empty()) {
      m.assign(p.values.size(), 0.0);
      v.assign(p.values.size(), 0.0);
    }
    for (size_t i = 0; i < p.values.size(); ++i) {
      double g = has_grad ? p.grad[i] * scale : 0.0;
      m[i] = beta1 * m[i] + (1.0 - beta1) * g;
      v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
      double mhat = m[i] / c1;
      double vhat = v[i] / c2;
      p.values[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
    p.grad.clear();
  }
}

}  // namespace topiq
