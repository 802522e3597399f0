#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "tensor.hpp"

namespace topiq {

// Named parameter tensors. Gradients accumulate in Tensor::grad between
// optimizer steps.
struct ParamStore {
  std::map<std::string, Tensor> params;

  Tensor& add(const std::string& name, Tensor init);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const { return params.count(name) != 0; }
  std::vector<std::string> names_with_prefix(const std::string& prefix) const;

  TensorMap snapshot() const;
  // copies values for every matching name; shape mismatch is an error
  void load(const TensorMap& m);
  void zero_grads();
};

// Binds store parameters to tape leaves, one leaf per name per tape, so
// parameters shared between submodules (the codebook aliasing) accumulate
// gradients on a single node. Frozen parameters become constants.
class TapeBinding {
 public:
  TapeBinding(Tape& tape, ParamStore& store,
              std::function<bool(const std::string&)> trainable = nullptr)
      : tape_(tape), store_(store), trainable_(std::move(trainable)) {}

  VarId operator()(const std::string& name);
  // after backward(): adds tape gradients onto the store tensors' grad
  void harvest();
  const std::map<std::string, VarId>& bound() const { return bound_; }
  ParamStore& store() { return store_; }

 private:
  Tape& tape_;
  ParamStore& store_;
  std::function<bool(const std::string&)> trainable_;
  std::map<std::string, VarId> bound_;
};

// Adam with bias correction; gradients are clipped to a global L2 norm first.
struct Adam {
  double lr;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t t = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments;

  explicit Adam(double lr_) : lr(lr_) {}
  // consumes and zeroes the grads of `trainable`
  void step(ParamStore& store, const std::vector<std::string>& trainable,
            double clip_norm);
};

}  // namespace topiq
