#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace topiq {

// Dense 64-bit real tensor, row-major. grad is either empty or matches
// values element for element.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> values;
  std::vector<double> grad;

  Tensor() = default;
  Tensor(std::vector<int64_t> s, std::vector<double> v);

  static Tensor zeros(std::vector<int64_t> shape);
  static Tensor full(std::vector<int64_t> shape, double value);
  static Tensor scalar(double value);
  static Tensor randn(std::vector<int64_t> shape, Rng& rng, double stddev = 1.0);

  int64_t numel() const;
  int64_t rank() const { return static_cast<int64_t>(shape.size()); }
  // 2-D accessors
  int64_t rows() const;
  int64_t cols() const;
  double at(int64_t r, int64_t c) const { return values[r * cols() + c]; }
  double& at(int64_t r, int64_t c) { return values[r * cols() + c]; }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  bool all_finite() const;
  void zero_grad();
  void ensure_grad();
};

using VarId = int32_t;
constexpr VarId kNoVar = -1;  // sentinel for optional tape inputs

// Reverse-mode tape. Ops append nodes; node ids grow monotonically and every
// op's inputs precede it, so a reverse scan is a reverse topological order.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  VarId leaf(Tensor value, bool requires_grad);
  VarId constant(Tensor value) { return leaf(std::move(value), false); }

  // linear algebra
  VarId matmul(VarId a, VarId b);         // [p,q]x[q,r] -> [p,r]
  VarId matmul_nt(VarId a, VarId b);      // [p,q]x[r,q]^T -> [p,r]
  // elementwise
  VarId add(VarId a, VarId b);
  VarId sub(VarId a, VarId b);
  VarId mul(VarId a, VarId b);
  VarId scale(VarId a, double s);
  VarId exp(VarId a);
  VarId log_floored(VarId a, double floor);
  VarId sigmoid(VarId a);
  VarId gelu(VarId a);
  // structure
  VarId bias_add(VarId x, VarId bias);    // [r,c] + [c]
  VarId concat(int axis, const std::vector<VarId>& parts);  // axis 0 rows, 1 cols
  VarId slice_rows(VarId x, int64_t start, int64_t count);
  VarId repeat_rows(VarId x, int64_t n);  // [1,c] -> [n,c]
  VarId transpose(VarId x);
  VarId embedding(VarId table, const std::vector<int>& ids);  // [V,E] -> [m,E]
  // normalization / attention
  VarId softmax_rows(VarId x);
  VarId masked_softmax_rows(VarId x, const std::vector<uint8_t>& col_mask);
  VarId layer_norm(VarId x, VarId gain, VarId bias);  // per row, eps 1e-5
  // reductions / losses (scalar outputs, shape {1})
  VarId sum(VarId x);
  VarId mean(VarId x);
  VarId sum_squares(VarId x);
  VarId l2_norm(VarId x);
  VarId mse(VarId a, VarId b);
  VarId cross_entropy_logits(VarId logits, const std::vector<int>& targets);
  VarId bce_logits(VarId logits, const std::vector<double>& targets);
  // gradient routing
  VarId stop_gradient(VarId x);
  VarId straight_through(VarId z_q, VarId z_e);

  const Tensor& val(VarId id) const { return nodes_[id].value; }
  double scalar_val(VarId id) const;
  bool requires_grad(VarId id) const { return nodes_[id].requires_grad; }
  // valid after backward(); empty for nodes the loss does not reach
  const std::vector<double>& grad(VarId id) const { return nodes_[id].grad; }

  void backward(VarId root);
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::function<void()> back;
  };

  std::vector<Node> nodes_;

  VarId push(Tensor value, bool requires_grad, std::function<void()> back);
  std::vector<double>& grad_buf(VarId id);
  const std::vector<double>& out_grad(VarId id) const { return nodes_[id].grad; }
  void check_2d(VarId id, const char* op) const;
};

// Central-difference verification of analytic gradients. `f` re-evaluates the
// scalar objective from the parameters' current values; each parameter's
// Tensor::grad must already hold the analytic gradient.
struct FdFailure {
  std::string param;
  int64_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct FdReport {
  double max_rel_err = 0.0;
  int64_t coords_checked = 0;
  std::vector<FdFailure> failures;
  bool pass() const { return failures.empty(); }
};

FdReport finite_diff_check(const std::function<double()>& f,
                           const std::vector<std::pair<std::string, Tensor*>>& params,
                           double eps, double rel_tol);

}  // namespace topiq
