#include "tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace topiq {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

constexpr double kLayerNormEps = 1e-5;
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

std::string shape_str(const Tensor& t) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < t.shape.size(); ++i) {
    if (i) os << ",";
    os << t.shape[i];
  }
  os << "]";
  return os.str();
}

}  // namespace

Tensor::Tensor(std::vector<int64_t> s, std::vector<double> v)
    : shape(std::move(s)), values(std::move(v)) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  if (n != static_cast<int64_t>(values.size()))
    throw UsageError("tensor values length does not match shape " + shape_str(*this));
}

Tensor Tensor::zeros(std::vector<int64_t> shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  Tensor t;
  t.shape = std::move(shape);
  t.values.assign(static_cast<size_t>(n), 0.0);
  return t;
}

Tensor Tensor::full(std::vector<int64_t> shape, double value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.values.begin(), t.values.end(), value);
  return t;
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::randn(std::vector<int64_t> shape, Rng& rng, double stddev) {
  Tensor t = zeros(std::move(shape));
  for (double& v : t.values) v = stddev * rng.normal();
  return t;
}

int64_t Tensor::numel() const { return static_cast<int64_t>(values.size()); }

int64_t Tensor::rows() const {
  if (shape.size() != 2) throw UsageError("rows() on non-2D tensor " + shape_str(*this));
  return shape[0];
}

int64_t Tensor::cols() const {
  if (shape.size() != 2) throw UsageError("cols() on non-2D tensor " + shape_str(*this));
  return shape[1];
}

bool Tensor::all_finite() const {
  for (double v : values)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::zero_grad() { grad.assign(values.size(), 0.0); }

void Tensor::ensure_grad() {
  if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
}

// ---------------------------------------------------------------------------
// Tape

VarId Tape::push(Tensor value, bool requires_grad, std::function<void()> back) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<VarId>(nodes_.size() - 1);
}

std::vector<double>& Tape::grad_buf(VarId id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value.values.size())
    n.grad.assign(n.value.values.size(), 0.0);
  return n.grad;
}

VarId Tape::leaf(Tensor value, bool requires_grad) {
  return push(std::move(value), requires_grad, nullptr);
}

double Tape::scalar_val(VarId id) const {
  const Tensor& t = nodes_[id].value;
  if (t.numel() != 1) throw UsageError("scalar_val on non-scalar tensor");
  return t.values[0];
}

void Tape::check_2d(VarId id, const char* op) const {
  if (nodes_[id].value.shape.size() != 2)
    throw UsageError(std::string(op) + ": expected 2-D tensor, got " +
                     shape_str(nodes_[id].value));
}

VarId Tape::matmul(VarId a, VarId b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  const Tensor& ta = nodes_[a].value;
  const Tensor& tb = nodes_[b].value;
  if (ta.cols() != tb.rows())
    throw UsageError("matmul: inner dimensions disagree " + shape_str(ta) + " x " +
                     shape_str(tb));
  int64_t p = ta.rows(), q = ta.cols(), r = tb.cols();
  Tensor out = Tensor::zeros({p, r});
  {
    CMatMap A(ta.values.data(), p, q), B(tb.values.data(), q, r);
    MatMap C(out.values.data(), p, r);
    C.noalias() = A * B;
  }
  bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  VarId id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[id].back = [this, a, b, id, p, q, r]() {
      CMatMap G(out_grad(id).data(), p, r);
      if (nodes_[a].requires_grad) {
        CMatMap B(nodes_[b].value.values.data(), q, r);
        MatMap GA(grad_buf(a).data(), p, q);
        GA.noalias() += G * B.transpose();
      }
      if (nodes_[b].requires_grad) {
        CMatMap A(nodes_[a].value.values.data(), p, q);
        MatMap GB(grad_buf(b).data(), q, r);
        GB.noalias() += A.transpose() * G;
      }
    };
  }
  return id;
}

VarId Tape::matmul_nt(VarId a, VarId b) {
  check_2d(a, "matmul_nt");
  check_2d(b, "matmul_nt");
  const Tensor& ta = nodes_[a].value;
  const Tensor& tb = nodes_[b].value;
  if (ta.cols() != tb.cols())
    throw UsageError("matmul_nt: inner dimensions disagree " + shape_str(ta) + " x " +
                     shape_str(tb) + "^T");
  int64_t p = ta.rows(), q = ta.cols(), r = tb.rows();
  Tensor out = Tensor::zeros({p, r});
  {
    CMatMap A(ta.values.data(), p, q), B(tb.values.data(), r, q);
    MatMap C(out.values.data(), p, r);
    C.noalias() = A * B.transpose();
  }
  bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  VarId id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[id].back = [this, a, b, id, p, q, r]() {
      CMatMap G(out_grad(id).data(), p, r);
      if (nodes_[a].requires_grad) {
        CMatMap B(nodes_[b].value.values.data(), r, q);
        MatMap GA(grad_buf(a).data(), p, q);
        GA.noalias() += G * B;
      }
      if (nodes_[b].requires_grad) {
        CMatMap A(nodes_[a].value.values.data(), p, q);
        MatMap GB(grad_buf(b).data(), r, q);
        GB.noalias() += G.transpose() * A;
      }
    };
  }
  return id;
}

VarId Tape::add(VarId a, VarId b) {
  const Tensor& ta = nodes_[a].value;
  const Tensor& tb = nodes_[b].value;
  if (!ta.same_shape(tb))
    throw UsageError("add: shape mismatch " + shape_str(ta) + " vs " + shape_str(tb));
  Tensor out = ta;
  for (size_t i = 0; i < out.values.size(); ++i) out.values[i] += tb.values[i];
  bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  VarId id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[id].back = [this, a, b, id]() {
      const std::vector<double>& g = out_grad(id);
      if (nodes_[a].requires_grad) {
        std::vector<double>& ga = grad_buf(a);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (nodes_[b].requires_grad) {
        std::vector<double>& gb = grad_buf(b);
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    };
  }
  return id;
}

VarId Tape::sub(VarId a, VarId b) {
  const Tensor& ta = nodes_[a].value;
  const Tensor& tb = nodes_[b].value;
  if (!ta.same_shape(tb))
    throw UsageError("sub: shape mismatch " + shape_str(ta) + " vs " + shape_str(tb));
  Tensor out = ta;
  for (size_t i = 0; i < out.values.size(); ++i) out.values[i] -= tb.values[i];
  bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  VarId id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[id].back = [this, a, b, id]() {
      const std::vector<double>& g = out_grad(id);
      if (nodes_[a].requires_grad) {
        std::vector<double>& ga = grad_buf(a);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (nodes_[b].requires_grad) {
        std::vector<double>& gb = grad_buf(b);
        for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    };
  }
  return id;
}

VarId Tape::mul(VarId a, VarId b) {
  const Tensor& ta = nodes_[a].value;
  const Tensor& tb = nodes_[b].value;
  if (!ta.same_shape(tb))
    throw UsageError("mul: shape mismatch " + shape_str(ta) + " vs " + shape_str(tb));
  Tensor out = ta;
  for (size_t i = 0; i < out.values.size(); ++i) out.values[i] *= tb.values[i];
  bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  VarId id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[id].back = [this, a, b, id]() {
      const std::vector<double>& g = out_grad(id);
      if (nodes_[a].requires_grad) {
        std::vector<double>& ga = grad_buf(a);
        const std::vector<double>& vb = nodes_[b].value.values;
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
      }
      if (nodes_[b].requires_grad) {
        std::vector<double>& gb = grad_buf(b);
        const std::vector<double>& va = nodes_[a].value.values;
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
      }
    };
  }
  return id;
}

VarId Tape::scale(VarId a, double s) {
  Tensor out = nodes_[a].value;
  for (double& v : out.values) v *= s;
  bool rg = nodes_[a].requires_grad;
  VarId id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[id].back = [this, a, id, s]() {
      const std::vector<double>& g = out_grad(id);
      std::vector<double>& ga = grad_buf(a);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    };
  }
  return id;
}

VarId Tape::exp(VarId a) {
  Tensor out = nodes_[a].value;
  for (double& v : out.values) v = std::exp(v);
  bool rg = nodes_[a].requires_grad;
  VarId id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[id].back = [this, a, id]() {
      const std::vector<double>& g = out_grad(id);
      const std::vector<double>& y = nodes_[id].value.values;
      std::vector<double>& ga = grad_buf(a);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    };
  }
  return id;
}

VarId Tape::log_floored(VarId a, double floor) {
  if (floor <= 0.0) throw UsageError("log_floored: floor must be positive");
  Tensor out = nodes_[a].value;
  for (double& v : out.values) v = std::log(std::max(v, floor));
  bool rg = nodes_[a].requires_grad;
  VarId id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[id].back = [this, a, id, floor]() {
      const std::vector<double>& g = out_grad(id);
      const std::vector<double>& x = nodes_[a].value.values;
      std::vector<double>& ga = grad_buf(a);
      for (size_t i = 0; i < g.size(); ++i)
        if (x[i] > floor) ga[i] += g[i] / x[i];
    };
  }
  return id;
}

VarId Tape::sigmoid(VarId a) {
  Tensor out = nodes_[a].value;
  for (double& v : out.values)
    v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                 : std::exp(v) / (1.0 + std::exp(v));
  bool rg = nodes_[a].requires_grad;
  VarId id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[id].back = [this, a, id]() {
      const std::vector<double>& g = out_grad(id);
      const std::vector<double>& y = nodes_[id].value.values;
      std::vector<double>& ga = grad_buf(a);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
    };
  }
  return id;
}

VarId Tape::gelu(VarId a) {
  Tensor out = nodes_[a].value;
  for (double& v : out.values) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  bool rg = nodes_[a].requires_grad;
  VarId id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[id].back = [this, a, id]() {
      const std::vector<double>& g = out_grad(id);
      const std::vector<double>& x = nodes_[a].value.values;
      std::vector<double>& ga = grad_buf(a);
      for (size_t i = 0; i < g.size(); ++i) {
        double cdf = 0.5 * (1.0 + std::erf(x[i] * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * x[i] * x[i]);
        ga[i] += g[i] * (cdf + x[i] * pdf);
      }
    };
  }
  return id;
}

VarId Tape::bias_add(VarId x, VarId bias) {
  check_2d(x, "bias_add");
  const Tensor& tx = nodes_[x].value;
  const Tensor& tb = nodes_[bias].value;
  if (tb.rank() != 1 || tb.shape[0] != tx.cols())
    throw UsageError("bias_add: bias shape " + shape_str(tb) + " does not match " +
                     shape_str(tx));
  int64_t r = tx.rows(), c = tx.cols();
  Tensor out = tx;
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out.values[i * c + j] += tb.values[j];
  bool rg = nodes_[x].requires_grad || nodes_[bias].requires_grad;
  VarId id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[id].back = [this, x, bias, id, r, c]() {
      const std::vector<double>& g = out_grad(id);
      if (nodes_[x].requires_grad) {
        std::vector<double>& gx = grad_buf(x);
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (nodes_[bias].requires_grad) {
        std::vector<double>& gb = grad_buf(bias);
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
      }
    };
  }
  return id;
}

VarId Tape::concat(int axis, const std::vector<VarId>& parts) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  if (axis != 0 && axis != 1) throw UsageError("concat: axis must be 0 or 1");
  for (VarId p : parts) check_2d(p, "concat");
  int64_t rows0 = nodes_[parts[0]].value.rows();
  int64_t cols0 = nodes_[parts[0]].value.cols();
  int64_t total = 0;
  for (VarId p : parts) {
    const Tensor& t = nodes_[p].value;
    if (axis == 1 && t.rows() != rows0)
      throw UsageError("concat cols: row counts differ");
    if (axis == 0 && t.cols() != cols0)
      throw UsageError("concat rows: column counts differ");
    total += (axis == 1) ? t.cols() : t.rows();
  }
  Tensor out = (axis == 1) ? Tensor::zeros({rows0, total}) : Tensor::zeros({total, cols0});
  if (axis == 1) {
    int64_t off = 0;
    for (VarId p : parts) {
      const Tensor& t = nodes_[p].value;
      int64_t c = t.cols();
      for (int64_t i = 0; i < rows0; ++i)
        std::copy(t.values.begin() + i * c, t.values.begin() + (i + 1) * c,
                  out.values.begin() + i * total + off);
      off += c;
    }
  } else {
    int64_t off = 0;
    for (VarId p : parts) {
      const Tensor& t = nodes_[p].value;
      std::copy(t.values.begin(), t.values.end(), out.values.begin() + off * cols0);
      off += t.rows();
    }
  }
  bool rg = false;
  for (VarId p : parts) rg = rg || nodes_[p].requires_grad;
  VarId id = push(std::move(out), rg, nullptr);
  if (rg) {
    std::vector<VarId> ps = parts;
    nodes_[id].back = [this, ps, id, axis, rows0, cols0, total]() {
      const std::vector<double>& g = out_grad(id);
      int64_t off = 0;
      for (VarId p : ps) {
        const Tensor& t = nodes_[p].value;
        if (axis == 1) {
          int64_t c = t.cols();
          if (nodes_[p].requires_grad) {
            std::vector<double>& gp = grad_buf(p);
            for (int64_t i = 0; i < rows0; ++i)
              for (int64_t j = 0; j < c; ++j) gp[i * c + j] += g[i * total + off + j];
          }
          off += c;
        } else {
          if (nodes_[p].requires_grad) {
            std::vector<double>& gp = grad_buf(p);
            for (size_t k = 0; k < gp.size(); ++k) gp[k] += g[off * cols0 + k];
          }
          off += t.rows();
        }
      }
    };
  }
  return id;
}

VarId Tape::slice_rows(VarId x, int64_t start, int64_t count) {
  check_2d(x, "slice_rows");
  const Tensor& tx = nodes_[x].value;
  if (start < 0 || count < 1 || start + count > tx.rows())
    throw UsageError("slice_rows: range out of bounds");
  int64_t c = tx.cols();
  Tensor out = Tensor::zeros({count, c});
  std::copy(tx.values.begin() + start * c, tx.values.begin() + (start + count) * c,
            out.values.begin());
  bool rg = nodes_[x].requires_grad;
  VarId id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[id].back = [this, x, id, start, c]() {
      const std::vector<double>& g = out_grad(id);
      std::vector<double>& gx = grad_buf(x);
      for (size_t k = 0; k < g.size(); ++k) gx[start * c + k] += g[k];
    };
  }
  return id;
}

VarId Tape::repeat_rows(VarId x, int64_t n) {
  check_2d(x, "repeat_rows");
  const Tensor& tx = nodes_[x].value;
  if (tx.rows() != 1) throw UsageError("repeat_rows: input must have a single row");
  if (n < 1) throw UsageError("repeat_rows: n must be >= 1");
  int64_t c = tx.cols();
  Tensor out = Tensor::zeros({n, c});
  for (int64_t i = 0; i < n; ++i)
    std::copy(tx.values.begin(), tx.values.end(), out.values.begin() + i * c);
  bool rg = nodes_[x].requires_grad;
  VarId id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[id].back = [this, x, id, n, c]() {
      const std::vector<double>& g = out_grad(id);
      std::vector<double>& gx = grad_buf(x);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c; ++j) gx[j] += g[i * c + j];
    };
  }
  return id;
}

VarId Tape::transpose(VarId x) {
  check_2d(x, "transpose");
  const Tensor& tx = nodes_[x].value;
  int64_t r = tx.rows(), c = tx.cols();
  Tensor out = Tensor::zeros({c, r});
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out.values[j * r + i] = tx.values[i * c + j];
  bool rg = nodes_[x].requires_grad;
  VarId id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[id].back = [this, x, id, r, c]() {
      const std::vector<double>& g = out_grad(id);
      std::vector<double>& gx = grad_buf(x);
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
    };
  }
  return id;
}

VarId Tape::embedding(VarId table, const std::vector<int>& ids) {
  check_2d(table, "embedding");
  const Tensor& tt = nodes_[table].value;
  int64_t v = tt.rows(), e = tt.cols();
  int64_t m = static_cast<int64_t>(ids.size());
  if (m == 0) throw UsageError("embedding: empty id list");
  for (int idx : ids)
    if (idx < 0 || idx >= v) throw UsageError("embedding: id out of range");
  Tensor out = Tensor::zeros({m, e});
  for (int64_t i = 0; i < m; ++i)
    std::copy(tt.values.begin() + ids[i] * e, tt.values.begin() + (ids[i] + 1) * e,
              out.values.begin() + i * e);
  bool rg = nodes_[table].requires_grad;
  VarId id = push(std::move(out), rg, nullptr);
  if (rg) {
    std::vector<int> ids_copy = ids;
    nodes_[id].back = [this, table, id, ids_copy, e]() {
      const std::vector<double>& g = out_grad(id);
      std::vector<double>& gt = grad_buf(table);
      for (size_t i = 0; i < ids_copy.size(); ++i)
        for (int64_t j = 0; j < e; ++j) gt[ids_copy[i] * e + j] += g[i * e + j];
    };
  }
  return id;
}

VarId Tape::softmax_rows(VarId x) {
  check_2d(x, "softmax_rows");
  const Tensor& tx = nodes_[x].value;
  if (!tx.all_finite()) throw NumericError("softmax_rows: non-finite input");
  int64_t r = tx.rows(), c = tx.cols();
  Tensor out = Tensor::zeros({r, c});
  for (int64_t i = 0; i < r; ++i) {
    const double* row = tx.values.data() + i * c;
    double* orow = out.values.data() + i * c;
    double mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      orow[j] = std::exp(row[j] - mx);
      z += orow[j];
    }
    for (int64_t j = 0; j < c; ++j) orow[j] /= z;
  }
  bool rg = nodes_[x].requires_grad;
  VarId id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[id].back = [this, x, id, r, c]() {
      const std::vector<double>& g = out_grad(id);
      const std::vector<double>& s = nodes_[id].value.values;
      std::vector<double>& gx = grad_buf(x);
      for (int64_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (int64_t j = 0; j < c; ++j) dot += g[i * c + j] * s[i * c + j];
        for (int64_t j = 0; j < c; ++j)
          gx[i * c + j] += s[i * c + j] * (g[i * c + j] - dot);
      }
    };
  }
  return id;
}

VarId Tape::masked_softmax_rows(VarId x, const std::vector<uint8_t>& col_mask) {
  check_2d(x, "masked_softmax_rows");
  const Tensor& tx = nodes_[x].value;
  int64_t r = tx.rows(), c = tx.cols();
  if (static_cast<int64_t>(col_mask.size()) != c)
    throw UsageError("masked_softmax_rows: mask length must equal column count");
  if (!tx.all_finite()) throw NumericError("masked_softmax_rows: non-finite input");
  bool any = false;
  for (uint8_t m : col_mask) any = any || (m != 0);
  if (!any) throw UsageError("masked_softmax_rows: all columns masked");
  Tensor out = Tensor::zeros({r, c});
  for (int64_t i = 0; i < r; ++i) {
    const double* row = tx.values.data() + i * c;
    double* orow = out.values.data() + i * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < c; ++j)
      if (col_mask[j]) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      if (col_mask[j]) {
        orow[j] = std::exp(row[j] - mx);
        z += orow[j];
      }
    }
    for (int64_t j = 0; j < c; ++j)
      if (col_mask[j]) orow[j] /= z;
  }
  bool rg = nodes_[x].requires_grad;
  VarId id = push(std::move(out), rg, nullptr);
  if (rg) {
    std::vector<uint8_t> mask = col_mask;
    nodes_[id].back = [this, x, id, r, c, mask]() {
      const std::vector<double>& g = out_grad(id);
      const std::vector<double>& s = nodes_[id].value.values;
      std::vector<double>& gx = grad_buf(x);
      for (int64_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (int64_t j = 0; j < c; ++j)
          if (mask[j]) dot += g[i * c + j] * s[i * c + j];
        for (int64_t j = 0; j < c; ++j)
          if (mask[j]) gx[i * c + j] += s[i * c + j] * (g[i * c + j] - dot);
      }
    };
  }
  return id;
}

VarId Tape::layer_norm(VarId x, VarId gain, VarId bias) {
  check_2d(x, "layer_norm");
  const Tensor& tx = nodes_[x].value;
  const Tensor& tg = nodes_[gain].value;
  const Tensor& tb = nodes_[bias].value;
  int64_t r = tx.rows(), c = tx.cols();
  if (tg.rank() != 1 || tg.shape[0] != c || tb.rank() != 1 || tb.shape[0] != c)
    throw UsageError("layer_norm: gain/bias must be vectors of the feature width");
  Tensor out = Tensor::zeros({r, c});
  std::vector<double> xhat(static_cast<size_t>(r * c));
  std::vector<double> inv_sigma(static_cast<size_t>(r));
  for (int64_t i = 0; i < r; ++i) {
    const double* row = tx.values.data() + i * c;
    double m = 0.0;
    for (int64_t j = 0; j < c; ++j) m += row[j];
    m /= static_cast<double>(c);
    double var = 0.0;
    for (int64_t j = 0; j < c; ++j) var += (row[j] - m) * (row[j] - m);
    var /= static_cast<double>(c);
    double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_sigma[i] = is;
    for (int64_t j = 0; j < c; ++j) {
      double xh = (row[j] - m) * is;
      xhat[i * c + j] = xh;
      out.values[i * c + j] = xh * tg.values[j] + tb.values[j];
    }
  }
  bool rg = nodes_[x].requires_grad || nodes_[gain].requires_grad ||
            nodes_[bias].requires_grad;
  VarId id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[id].back = [this, x, gain, bias, id, r, c, xhat = std::move(xhat),
                       inv_sigma = std::move(inv_sigma)]() {
      const std::vector<double>& g = out_grad(id);
      const std::vector<double>& gv = nodes_[gain].value.values;
      if (nodes_[gain].requires_grad) {
        std::vector<double>& gg = grad_buf(gain);
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * xhat[i * c + j];
      }
      if (nodes_[bias].requires_grad) {
        std::vector<double>& gb = grad_buf(bias);
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
      }
      if (nodes_[x].requires_grad) {
        std::vector<double>& gx = grad_buf(x);
        for (int64_t i = 0; i < r; ++i) {
          double mean_gy = 0.0, mean_gyxh = 0.0;
          for (int64_t j = 0; j < c; ++j) {
            double gy = g[i * c + j] * gv[j];
            mean_gy += gy;
            mean_gyxh += gy * xhat[i * c + j];
          }
          mean_gy /= static_cast<double>(c);
          mean_gyxh /= static_cast<double>(c);
          for (int64_t j = 0; j < c; ++j) {
            double gy = g[i * c + j] * gv[j];
            gx[i * c + j] +=
                inv_sigma[i] * (gy - mean_gy - xhat[i * c + j] * mean_gyxh);
          }
        }
      }
    };
  }
  return id;
}

VarId Tape::sum(VarId x) {
  const Tensor& tx = nodes_[x].value;
  double s = std::accumulate(tx.values.begin(), tx.values.end(), 0.0);
  bool rg = nodes_[x].requires_grad;
  VarId id = push(Tensor::scalar(s), rg, nullptr);
  if (rg) {
    nodes_[id].back = [this, x, id]() {
      double g = out_grad(id)[0];
      std::vector<double>& gx = grad_buf(x);
      for (double& v : gx) v += g;
    };
  }
  return id;
}

VarId Tape::mean(VarId x) {
  const Tensor& tx = nodes_[x].value;
  int64_t n = tx.numel();
  double s = std::accumulate(tx.values.begin(), tx.values.end(), 0.0) /
             static_cast<double>(n);
  bool rg = nodes_[x].requires_grad;
  VarId id = push(Tensor::scalar(s), rg, nullptr);
  if (rg) {
    nodes_[id].back = [this, x, id, n]() {
      double g = out_grad(id)[0] / static_cast<double>(n);
      std::vector<double>& gx = grad_buf(x);
      for (double& v : gx) v += g;
    };
  }
  return id;
}

VarId Tape::sum_squares(VarId x) {
  const Tensor& tx = nodes_[x].value;
  double s = 0.0;
  for (double v : tx.values) s += v * v;
  bool rg = nodes_[x].requires_grad;
  VarId id = push(Tensor::scalar(s), rg, nullptr);
  if (rg) {
    nodes_[id].back = [this, x, id]() {
      double g = out_grad(id)[0];
      const std::vector<double>& xv = nodes_[x].value.values;
      std::vector<double>& gx = grad_buf(x);
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += 2.0 * g * xv[i];
    };
  }
  return id;
}

VarId Tape::l2_norm(VarId x) {
  const Tensor& tx = nodes_[x].value;
  double s = 0.0;
  for (double v : tx.values) s += v * v;
  double norm = std::sqrt(s);
  bool rg = nodes_[x].requires_grad;
  VarId id = push(Tensor::scalar(norm), rg, nullptr);
  if (rg) {
    nodes_[id].back = [this, x, id, norm]() {
      if (norm == 0.0) return;
      double g = out_grad(id)[0];
      const std::vector<double>& xv = nodes_[x].value.values;
      std::vector<double>& gx = grad_buf(x);
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g * xv[i] / norm;
    };
  }
  return id;
}

VarId Tape::mse(VarId a, VarId b) {
  const Tensor& ta = nodes_[a].value;
  const Tensor& tb = nodes_[b].value;
  if (!ta.same_shape(tb))
    throw UsageError("mse: shape mismatch " + shape_str(ta) + " vs " + shape_str(tb));
  int64_t n = ta.numel();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double d = ta.values[i] - tb.values[i];
    s += d * d;
  }
  s /= static_cast<double>(n);
  bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  VarId id = push(Tensor::scalar(s), rg, nullptr);
  if (rg) {
    nodes_[id].back = [this, a, b, id, n]() {
      double g = 2.0 * out_grad(id)[0] / static_cast<double>(n);
      const std::vector<double>& va = nodes_[a].value.values;
      const std::vector<double>& vb = nodes_[b].value.values;
      if (nodes_[a].requires_grad) {
        std::vector<double>& ga = grad_buf(a);
        for (int64_t i = 0; i < n; ++i) ga[i] += g * (va[i] - vb[i]);
      }
      if (nodes_[b].requires_grad) {
        std::vector<double>& gb = grad_buf(b);
        for (int64_t i = 0; i < n; ++i) gb[i] -= g * (va[i] - vb[i]);
      }
    };
  }
  return id;
}

VarId Tape::cross_entropy_logits(VarId logits, const std::vector<int>& targets) {
  check_2d(logits, "cross_entropy_logits");
  const Tensor& tl = nodes_[logits].value;
  int64_t m = tl.rows(), c = tl.cols();
  if (static_cast<int64_t>(targets.size()) != m)
    throw UsageError("cross_entropy_logits: one target per row required");
  for (int t : targets)
    if (t < 0 || t >= c) throw UsageError("cross_entropy_logits: target out of range");
  std::vector<double> probs(static_cast<size_t>(m * c));
  double loss = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    const double* row = tl.values.data() + i * c;
    double mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(row[j] - mx);
      z += probs[i * c + j];
    }
    for (int64_t j = 0; j < c; ++j) probs[i * c + j] /= z;
    loss += std::log(z) + mx - row[targets[i]];
  }
  loss /= static_cast<double>(m);  // mean over rows
  bool rg = nodes_[logits].requires_grad;
  VarId id = push(Tensor::scalar(loss), rg, nullptr);
  if (rg) {
    std::vector<int> tg = targets;
    nodes_[id].back = [this, logits, id, m, c, probs = std::move(probs), tg]() {
      double g = out_grad(id)[0] / static_cast<double>(m);
      std::vector<double>& gl = grad_buf(logits);
      for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < c; ++j) gl[i * c + j] += g * probs[i * c + j];
        gl[i * c + tg[i]] -= g;
      }
    };
  }
  return id;
}

VarId Tape::bce_logits(VarId logits, const std::vector<double>& targets) {
  const Tensor& tl = nodes_[logits].value;
  int64_t m = tl.numel();
  if (static_cast<int64_t>(targets.size()) != m)
    throw UsageError("bce_logits: one target per logit required");
  double loss = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    double x = tl.values[i];
    // softplus(x) - y*x, stable form
    loss += std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))) - targets[i] * x;
  }
  loss /= static_cast<double>(m);  // mean over elements
  bool rg = nodes_[logits].requires_grad;
  VarId id = push(Tensor::scalar(loss), rg, nullptr);
  if (rg) {
    std::vector<double> tg = targets;
    nodes_[id].back = [this, logits, id, m, tg]() {
      double g = out_grad(id)[0] / static_cast<double>(m);
      const std::vector<double>& x = nodes_[logits].value.values;
      std::vector<double>& gl = grad_buf(logits);
      for (int64_t i = 0; i < m; ++i) {
        double s = x[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-x[i]))
                               : std::exp(x[i]) / (1.0 + std::exp(x[i]));
        gl[i] += g * (s - tg[i]);
      }
    };
  }
  return id;
}

VarId Tape::stop_gradient(VarId x) {
  Tensor out = nodes_[x].value;
  return push(std::move(out), false, nullptr);
}

VarId Tape::straight_through(VarId z_q, VarId z_e) {
  const Tensor& tq = nodes_[z_q].value;
  const Tensor& te = nodes_[z_e].value;
  if (!tq.same_shape(te))
    throw UsageError("straight_through: shape mismatch " + shape_str(tq) + " vs " +
                     shape_str(te));
  Tensor out = tq;
  bool rg = nodes_[z_e].requires_grad;
  VarId id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[id].back = [this, z_e, id]() {
      const std::vector<double>& g = out_grad(id);
      std::vector<double>& ge = grad_buf(z_e);
      for (size_t i = 0; i < g.size(); ++i) ge[i] += g[i];
    };
  }
  return id;
}

void Tape::backward(VarId root) {
  if (root < 0 || root >= static_cast<VarId>(nodes_.size()))
    throw UsageError("backward: invalid root");
  if (nodes_[root].value.numel() != 1)
    throw UsageError("backward: root must be a scalar");
  if (!nodes_[root].requires_grad)
    throw UsageError("backward: root has no gradient path");
  if (!nodes_[root].value.all_finite())
    throw NumericError("backward: non-finite loss");
  grad_buf(root)[0] = 1.0;
  for (VarId i = root; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty() || !n.back) continue;
    n.back();
  }
}

// ---------------------------------------------------------------------------
// finite differences

FdReport finite_diff_check(const std::function<double()>& f,
                           const std::vector<std::pair<std::string, Tensor*>>& params,
                           double eps, double rel_tol) {
  FdReport report;
  for (const auto& [name, p] : params) {
    if (p->grad.size() != p->values.size())
      throw UsageError("finite_diff_check: parameter '" + name +
                       "' has no analytic gradient");
    for (size_t i = 0; i < p->values.size(); ++i) {
      double saved = p->values[i];
      p->values[i] = saved + eps;
      double f_plus = f();
      p->values[i] = saved - eps;
      double f_minus = f();
      p->values[i] = saved;
      double numeric = (f_plus - f_minus) / (2.0 * eps);
      double analytic = p->grad[i];
      double denom = std::max({std::abs(analytic), std::abs(numeric), 1.0});
      double rel = std::abs(analytic - numeric) / denom;
      report.max_rel_err = std::max(report.max_rel_err, rel);
      ++report.coords_checked;
      if (rel > rel_tol)
        report.failures.push_back({name, static_cast<int64_t>(i), analytic, numeric, rel});
    }
  }
  return report;
}

}  // namespace topiq
