#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fgn/common.hpp"
#include "fgn/tensor.hpp"

namespace fgn {

// Handle into a Tape.  Only meaningful together with the tape that issued it.
struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

namespace detail {

inline double sign0(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

// C (+)= op(A) * op(B).  Every output element accumulates its terms in a
// fixed order no matter how the loops vectorize or where the buffers land,
// so products are bitwise reproducible across allocations (library gemm/gemv
// kernels peel loops by runtime alignment and round differently from one
// heap layout to the next).  Explicit std::fma keeps the kernels fast
// without reintroducing contraction variance.
inline void product_acc(const Tensor& A, bool tA, const Tensor& B, bool tB, Tensor& C, bool acc) {
  int64_t n = tA ? A.shape[1] : A.shape[0];
  int64_t k = tA ? A.shape[0] : A.shape[1];
  int64_t m = tB ? B.shape[0] : B.shape[1];
  if (!acc) std::fill(C.data.begin(), C.data.end(), 0.0);
  const double* a = A.data.data();
  const double* b = B.data.data();
  double* c = C.data.data();
  if (!tA && !tB) {
    for (int64_t i = 0; i < n; ++i)
      for (int64_t p = 0; p < k; ++p) {
        double av = a[i * k + p];
        const double* br = b + p * m;
        double* cr = c + i * m;
        for (int64_t j = 0; j < m; ++j) cr[j] = std::fma(av, br[j], cr[j]);
      }
  } else if (tA && !tB) {
    // op(A)[i,p] = A[p,i] with A stored [k,n]
    for (int64_t p = 0; p < k; ++p)
      for (int64_t i = 0; i < n; ++i) {
        double av = a[p * n + i];
        const double* br = b + p * m;
        double* cr = c + i * m;
        for (int64_t j = 0; j < m; ++j) cr[j] = std::fma(av, br[j], cr[j]);
      }
  } else if (!tA && tB) {
    // op(B)[p,j] = B[j,p] with B stored [m,k]; transpose once so the inner
    // loop stays unit-stride
    std::vector<double> bt(static_cast<size_t>(k * m));
    for (int64_t j = 0; j < m; ++j)
      for (int64_t p = 0; p < k; ++p) bt[static_cast<size_t>(p * m + j)] = b[j * k + p];
    for (int64_t i = 0; i < n; ++i)
      for (int64_t p = 0; p < k; ++p) {
        double av = a[i * k + p];
        const double* br = bt.data() + p * m;
        double* cr = c + i * m;
        for (int64_t j = 0; j < m; ++j) cr[j] = std::fma(av, br[j], cr[j]);
      }
  } else {
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < m; ++j) {
        double s = c[i * m + j];
        for (int64_t p = 0; p < k; ++p) s = std::fma(a[p * n + i], b[j * k + p], s);
        c[i * m + j] = s;
      }
  }
}
}  // namespace detail

struct LayerNormResult {
  Var normalized;
  Tensor mean;     // per row
  Tensor inv_std;  // per row, 1/sqrt(var + eps)
};

struct AttentionParams {
  Var wq, wk, wv, wo;
};

// Reverse-mode autodiff tape.  Records a DAG of float64 tensor operations in
// execution order; backward() walks it once in reverse.  Gradients accumulate
// by += into lazily allocated buffers, so nodes that do not influence the
// root are skipped entirely.
class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;              // empty until some consumer touches it
    std::vector<double> aux;  // op-specific cache for backward
    std::vector<Var> inputs;
    std::function<void(Tape&, Node&)> backward;  // null for leaves
  };

  Var leaf(Tensor v) { return push(std::move(v), {}, nullptr); }

  const Tensor& value(Var v) const { return node(v).value; }

  // Zero tensor if the last backward pass never reached this node.
  Tensor grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.data.empty()) return Tensor::zeros(n.value.shape);
    return n.grad;
  }

  // Nullptr when untouched; borrows storage, invalidated by further recording.
  const Tensor* grad_ptr(Var v) const {
    const Node& n = node(v);
    return n.grad.data.empty() ? nullptr : &n.grad;
  }

  int64_t size() const { return static_cast<int64_t>(nodes_.size()); }

  void clear_grads() {
    for (Node& n : nodes_) {
      n.grad.shape.clear();
      n.grad.data.clear();
    }
  }

  void backward(Var root) {
    if (node(root).value.numel() != 1)
      throw ContractViolation("backward: root must be scalar, got shape " +
                              node(root).value.shape_str());
    backward_component(root, 0);
  }

  // Seeds d(root[index]) = 1 and propagates.  Grads from any previous
  // backward pass on this tape are discarded first.
  void backward_component(Var root, int64_t index) {
    Node& r = node(root);
    if (index < 0 || index >= r.value.numel())
      throw ContractViolation("backward: seed index out of range");
    clear_grads();
    grad_buf(root).data[static_cast<size_t>(index)] = 1.0;
    for (int32_t i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.backward && !n.grad.data.empty()) n.backward(*this, n);
    }
  }

  // ---- elementwise ----

  Var add(Var a, Var b) { return binary_same_shape(a, b, "add", 1.0, 1.0, false); }
  Var sub(Var a, Var b) { return binary_same_shape(a, b, "sub", 1.0, -1.0, false); }

  Var mul(Var a, Var b) {
    require_same_shape(a, b, "mul");
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    Tensor out = Tensor::zeros(x.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = x.data[i] * y.data[i];
    return push(std::move(out), {a, b}, [](Tape& t, Node& n) {
      const Tensor& x = t.value(n.inputs[0]);
      const Tensor& y = t.value(n.inputs[1]);
      Tensor& ga = t.grad_buf(n.inputs[0]);
      Tensor& gb = t.grad_buf(n.inputs[1]);
      for (size_t i = 0; i < n.grad.data.size(); ++i) {
        ga.data[i] += n.grad.data[i] * y.data[i];
        gb.data[i] += n.grad.data[i] * x.data[i];
      }
    });
  }

  Var scale(Var x, double s) { return affine_scalar(x, s, 0.0); }

  Var affine_scalar(Var x, double mul, double add) {
    const Tensor& xv = value(x);
    Tensor out = Tensor::zeros(xv.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = xv.data[i] * mul + add;
    return push(std::move(out), {x}, [mul](Tape& t, Node& n) {
      Tensor& g = t.grad_buf(n.inputs[0]);
      for (size_t i = 0; i < n.grad.data.size(); ++i) g.data[i] += n.grad.data[i] * mul;
    });
  }

  Var gelu(Var x) {
    const Tensor& xv = value(x);
    Tensor out = Tensor::zeros(xv.shape);
    for (size_t i = 0; i < out.data.size(); ++i) {
      double v = xv.data[i];
      out.data[i] = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
    }
    return push(std::move(out), {x}, [](Tape& t, Node& n) {
      const Tensor& x = t.value(n.inputs[0]);
      Tensor& g = t.grad_buf(n.inputs[0]);
      constexpr double inv_sqrt_2pi = 0.3989422804014327;
      for (size_t i = 0; i < n.grad.data.size(); ++i) {
        double v = x.data[i];
        double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
        double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
        g.data[i] += n.grad.data[i] * (cdf + v * pdf);
      }
    });
  }

  // |a - b| with subgradient 0 at ties.
  Var abs_diff(Var a, Var b) {
    require_same_shape(a, b, "abs_diff");
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    Tensor out = Tensor::zeros(x.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::fabs(x.data[i] - y.data[i]);
    return push(std::move(out), {a, b}, [](Tape& t, Node& n) {
      const Tensor& x = t.value(n.inputs[0]);
      const Tensor& y = t.value(n.inputs[1]);
      Tensor& ga = t.grad_buf(n.inputs[0]);
      Tensor& gb = t.grad_buf(n.inputs[1]);
      for (size_t i = 0; i < n.grad.data.size(); ++i) {
        double s = detail::sign0(x.data[i] - y.data[i]);
        ga.data[i] += n.grad.data[i] * s;
        gb.data[i] -= n.grad.data[i] * s;
      }
    });
  }

  // ---- linear algebra ----

  Var matmul(Var x, Var w) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(w);
    if (xv.rank() != 2 || wv.rank() != 2)
      throw ContractViolation("matmul: rank-2 operands required, got " + xv.shape_str() + " x " +
                              wv.shape_str());
    if (xv.shape[1] != wv.shape[0])
      throw ContractViolation("matmul: inner dimensions differ, " + xv.shape_str() + " x " +
                              wv.shape_str());
    Tensor out = Tensor::zeros({xv.shape[0], wv.shape[1]});
    detail::product_acc(xv, false, wv, false, out, false);
    return push(std::move(out), {x, w}, [](Tape& t, Node& n) {
      const Tensor& x = t.value(n.inputs[0]);
      const Tensor& w = t.value(n.inputs[1]);
      detail::product_acc(n.grad, false, w, true, t.grad_buf(n.inputs[0]), true);
      detail::product_acc(x, true, n.grad, false, t.grad_buf(n.inputs[1]), true);
    });
  }

  // x [n,k] * w [k,m] + b [m] broadcast across rows.
  Var affine(Var x, Var w, Var b) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(w);
    const Tensor& bv = value(b);
    if (xv.rank() != 2 || wv.rank() != 2 || xv.shape[1] != wv.shape[0])
      throw ContractViolation("affine: bad operand shapes " + xv.shape_str() + " x " +
                              wv.shape_str());
    if (bv.rank() != 1 || bv.shape[0] != wv.shape[1])
      throw ContractViolation("affine: bias shape " + bv.shape_str() + " does not match output");
    Tensor out = Tensor::zeros({xv.shape[0], wv.shape[1]});
    detail::product_acc(xv, false, wv, false, out, false);
    for (int64_t r = 0; r < out.shape[0]; ++r)
      for (int64_t c = 0; c < out.shape[1]; ++c) out.at(r, c) += bv.at(c);
    return push(std::move(out), {x, w, b}, [](Tape& t, Node& n) {
      const Tensor& x = t.value(n.inputs[0]);
      const Tensor& w = t.value(n.inputs[1]);
      detail::product_acc(n.grad, false, w, true, t.grad_buf(n.inputs[0]), true);
      detail::product_acc(x, true, n.grad, false, t.grad_buf(n.inputs[1]), true);
      Tensor& gb = t.grad_buf(n.inputs[2]);
      for (int64_t r = 0; r < n.grad.shape[0]; ++r)
        for (int64_t c = 0; c < n.grad.shape[1]; ++c) gb.at(c) += n.grad.at(r, c);
    });
  }

  // Per-row normalization of a rank-2 tensor to zero mean, unit variance.
  LayerNormResult layer_norm(Var x, double eps = 1e-5) {
    const Tensor& xv = value(x);
    if (xv.rank() != 2) throw ContractViolation("layer_norm: rank-2 input required");
    int64_t R = xv.shape[0], C = xv.shape[1];
    Tensor out = Tensor::zeros(xv.shape);
    Tensor mean = Tensor::zeros({R});
    Tensor inv_std = Tensor::zeros({R});
    for (int64_t r = 0; r < R; ++r) {
      double m = 0.0;
      for (int64_t c = 0; c < C; ++c) m += xv.at(r, c);
      m /= static_cast<double>(C);
      double var = 0.0;
      for (int64_t c = 0; c < C; ++c) {
        double d = xv.at(r, c) - m;
        var += d * d;
      }
      var /= static_cast<double>(C);
      double is = 1.0 / std::sqrt(var + eps);
      mean.at(r) = m;
      inv_std.at(r) = is;
      for (int64_t c = 0; c < C; ++c) out.at(r, c) = (xv.at(r, c) - m) * is;
    }
    std::vector<double> aux;
    aux.reserve(static_cast<size_t>(R));
    for (int64_t r = 0; r < R; ++r) aux.push_back(inv_std.at(r));
    Var y = push(std::move(out), {x}, [](Tape& t, Node& n) {
      int64_t R = n.value.shape[0], C = n.value.shape[1];
      Tensor& gx = t.grad_buf(n.inputs[0]);
      double invC = 1.0 / static_cast<double>(C);
      for (int64_t r = 0; r < R; ++r) {
        double is = n.aux[static_cast<size_t>(r)];
        double gsum = 0.0, gysum = 0.0;
        for (int64_t c = 0; c < C; ++c) {
          gsum += n.grad.at(r, c);
          gysum += n.grad.at(r, c) * n.value.at(r, c);
        }
        gsum *= invC;
        gysum *= invC;
        for (int64_t c = 0; c < C; ++c)
          gx.at(r, c) += is * (n.grad.at(r, c) - gsum - n.value.at(r, c) * gysum);
      }
    });
    node(y).aux = std::move(aux);
    return {y, std::move(mean), std::move(inv_std)};
  }

  // out[r,:] = h[r,:] * gamma[g,:] + beta[g,:] where rows are split into
  // equal consecutive groups, one per gamma/beta row.  gamma of rank 1 (or a
  // single row) broadcasts across all rows.
  Var block_scale_shift(Var h, Var gamma, Var beta) {
    const Tensor& hv = value(h);
    const Tensor& gv = value(gamma);
    const Tensor& bv = value(beta);
    if (hv.rank() != 2) throw ContractViolation("block_scale_shift: rank-2 input required");
    auto dims = [&](const Tensor& t, const char* what) -> std::pair<int64_t, int64_t> {
      if (t.rank() == 1) return {1, t.shape[0]};
      if (t.rank() == 2) return {t.shape[0], t.shape[1]};
      throw ContractViolation(std::string("block_scale_shift: ") + what + " must be rank 1 or 2");
    };
    auto [gG, gd] = dims(gv, "gamma");
    auto [bG, bd] = dims(bv, "beta");
    if (gG != bG || gd != bd || gd != hv.shape[1])
      throw ContractViolation("block_scale_shift: gamma " + gv.shape_str() + " / beta " +
                              bv.shape_str() + " incompatible with input " + hv.shape_str());
    if (hv.shape[0] % gG != 0)
      throw ContractViolation("block_scale_shift: rows not divisible into " + std::to_string(gG) +
                              " groups");
    int64_t R = hv.shape[0], C = hv.shape[1], G = gG, per = R / gG;
    Tensor out = Tensor::zeros(hv.shape);
    for (int64_t r = 0; r < R; ++r) {
      int64_t g = r / per;
      for (int64_t c = 0; c < C; ++c)
        out.at(r, c) = hv.at(r, c) * gv.data[static_cast<size_t>(g * C + c)] +
                       bv.data[static_cast<size_t>(g * C + c)];
    }
    Var y = push(std::move(out), {h, gamma, beta}, [](Tape& t, Node& n) {
      const Tensor& hv = t.value(n.inputs[0]);
      const Tensor& gv = t.value(n.inputs[1]);
      int64_t R = hv.shape[0], C = hv.shape[1];
      int64_t G = static_cast<int64_t>(n.aux[0]);
      int64_t per = R / G;
      Tensor& gh = t.grad_buf(n.inputs[0]);
      Tensor& gg = t.grad_buf(n.inputs[1]);
      Tensor& gb = t.grad_buf(n.inputs[2]);
      for (int64_t r = 0; r < R; ++r) {
        int64_t g = r / per;
        for (int64_t c = 0; c < C; ++c) {
          double go = n.grad.at(r, c);
          gh.at(r, c) += go * gv.data[static_cast<size_t>(g * C + c)];
          gg.data[static_cast<size_t>(g * C + c)] += go * hv.at(r, c);
          gb.data[static_cast<size_t>(g * C + c)] += go;
        }
      }
    });
    node(y).aux = {static_cast<double>(G)};
    return y;
  }

  // Single-group convenience form: gamma and beta apply to every row.
  Var cond_scale_shift(Var h, Var gamma, Var beta) { return block_scale_shift(h, gamma, beta); }

  // ---- shape ----

  Var reshape(Var x, std::vector<int64_t> shape) {
    const Tensor& xv = value(x);
    Tensor out;
    out.shape = std::move(shape);
    int64_t n = 1;
    for (int64_t d : out.shape) {
      if (d <= 0) throw ContractViolation("reshape: non-positive dimension");
      n *= d;
    }
    if (out.shape.empty() || n != xv.numel())
      throw ContractViolation("reshape: element count mismatch");
    out.data = xv.data;
    return push(std::move(out), {x}, [](Tape& t, Node& n) {
      Tensor& g = t.grad_buf(n.inputs[0]);
      for (size_t i = 0; i < n.grad.data.size(); ++i) g.data[i] += n.grad.data[i];
    });
  }

  Var concat(std::span<const Var> xs, int axis) {
    if (xs.empty()) throw ContractViolation("concat: no inputs");
    if (axis != 0 && axis != 1) throw ContractViolation("concat: axis must be 0 or 1");
    for (Var v : xs)
      if (value(v).rank() != 2) throw ContractViolation("concat: rank-2 inputs required");
    int64_t R0 = value(xs[0]).shape[0], C0 = value(xs[0]).shape[1];
    int64_t R = 0, C = 0;
    if (axis == 1) {
      R = R0;
      for (Var v : xs) {
        if (value(v).shape[0] != R) throw ContractViolation("concat: row counts differ");
        C += value(v).shape[1];
      }
    } else {
      C = C0;
      for (Var v : xs) {
        if (value(v).shape[1] != C) throw ContractViolation("concat: column counts differ");
        R += value(v).shape[0];
      }
    }
    Tensor out = Tensor::zeros({R, C});
    std::vector<double> aux{static_cast<double>(axis)};
    if (axis == 1) {
      int64_t off = 0;
      for (Var v : xs) {
        const Tensor& t = value(v);
        for (int64_t r = 0; r < R; ++r)
          for (int64_t c = 0; c < t.shape[1]; ++c) out.at(r, off + c) = t.at(r, c);
        aux.push_back(static_cast<double>(off));
        off += t.shape[1];
      }
    } else {
      int64_t off = 0;
      for (Var v : xs) {
        const Tensor& t = value(v);
        for (int64_t r = 0; r < t.shape[0]; ++r)
          for (int64_t c = 0; c < C; ++c) out.at(off + r, c) = t.at(r, c);
        aux.push_back(static_cast<double>(off));
        off += t.shape[0];
      }
    }
    Var y = push(std::move(out), std::vector<Var>(xs.begin(), xs.end()), [](Tape& t, Node& n) {
      int axis = static_cast<int>(n.aux[0]);
      for (size_t i = 0; i < n.inputs.size(); ++i) {
        const Tensor& xin = t.value(n.inputs[i]);
        Tensor& g = t.grad_buf(n.inputs[i]);
        int64_t off = static_cast<int64_t>(n.aux[i + 1]);
        if (axis == 1) {
          for (int64_t r = 0; r < xin.shape[0]; ++r)
            for (int64_t c = 0; c < xin.shape[1]; ++c) g.at(r, c) += n.grad.at(r, off + c);
        } else {
          for (int64_t r = 0; r < xin.shape[0]; ++r)
            for (int64_t c = 0; c < xin.shape[1]; ++c) g.at(r, c) += n.grad.at(off + r, c);
        }
      }
    });
    node(y).aux = std::move(aux);
    return y;
  }

  // ---- reductions ----

  Var reduce_mean(Var x, int axis) {
    const Tensor& xv = value(x);
    if (xv.rank() != 2) throw ContractViolation("reduce_mean: rank-2 input required");
    if (axis != 0 && axis != 1) throw ContractViolation("reduce_mean: axis must be 0 or 1");
    int64_t R = xv.shape[0], C = xv.shape[1];
    Tensor out = Tensor::zeros({axis == 0 ? C : R});
    if (axis == 0) {
      for (int64_t r = 0; r < R; ++r)
        for (int64_t c = 0; c < C; ++c) out.at(c) += xv.at(r, c);
      for (int64_t c = 0; c < C; ++c) out.at(c) /= static_cast<double>(R);
    } else {
      for (int64_t r = 0; r < R; ++r) {
        for (int64_t c = 0; c < C; ++c) out.at(r) += xv.at(r, c);
        out.at(r) /= static_cast<double>(C);
      }
    }
    Var y = push(std::move(out), {x}, [](Tape& t, Node& n) {
      const Tensor& xv = t.value(n.inputs[0]);
      Tensor& g = t.grad_buf(n.inputs[0]);
      int64_t R = xv.shape[0], C = xv.shape[1];
      int axis = static_cast<int>(n.aux[0]);
      if (axis == 0) {
        double invR = 1.0 / static_cast<double>(R);
        for (int64_t r = 0; r < R; ++r)
          for (int64_t c = 0; c < C; ++c) g.at(r, c) += n.grad.at(c) * invR;
      } else {
        double invC = 1.0 / static_cast<double>(C);
        for (int64_t r = 0; r < R; ++r)
          for (int64_t c = 0; c < C; ++c) g.at(r, c) += n.grad.at(r) * invC;
      }
    });
    node(y).aux = {static_cast<double>(axis)};
    return y;
  }

  Var sum_all(Var x) {
    const Tensor& xv = value(x);
    double s = 0.0;
    for (double v : xv.data) s += v;
    // no finite check here: a diverged loss must reach the training loop,
    // which rolls back and reports the failure
    Tensor out = Tensor::zeros({1});
    out.data[0] = s;
    return push(std::move(out), {x}, [](Tape& t, Node& n) {
      Tensor& g = t.grad_buf(n.inputs[0]);
      for (double& v : g.data) v += n.grad.data[0];
    });
  }

  Var mean_all(Var x) {
    int64_t n = value(x).numel();
    return scale(sum_all(x), 1.0 / static_cast<double>(n));
  }

  // ---- ring-lattice ops ----

  // Concatenates, per row, the features of neighbor rows at the given ring
  // offsets.  Rows are interpreted as consecutive blocks of `block_rows`
  // sites (0 means one block spanning all rows); offsets wrap within a block.
  Var gather_ring(Var x, std::span<const int64_t> offsets, int64_t block_rows = 0) {
    const Tensor& xv = value(x);
    if (xv.rank() != 2) throw ContractViolation("gather_ring: rank-2 input required");
    if (offsets.empty()) throw ContractViolation("gather_ring: empty offset list");
    int64_t R = xv.shape[0], C = xv.shape[1];
    int64_t K = block_rows == 0 ? R : block_rows;
    if (K <= 0 || R % K != 0) throw ContractViolation("gather_ring: rows not divisible by block");
    int64_t no = static_cast<int64_t>(offsets.size());
    Tensor out = Tensor::zeros({R, no * C});
    std::vector<double> aux;
    aux.reserve(static_cast<size_t>(no) + 1);
    aux.push_back(static_cast<double>(K));
    for (int64_t o : offsets) aux.push_back(static_cast<double>(o));
    for (int64_t r = 0; r < R; ++r) {
      int64_t base = (r / K) * K, site = r - base;
      for (int64_t oi = 0; oi < no; ++oi) {
        int64_t src = base + mod(site + offsets[static_cast<size_t>(oi)], K);
        for (int64_t c = 0; c < C; ++c) out.at(r, oi * C + c) = xv.at(src, c);
      }
    }
    Var y = push(std::move(out), {x}, [](Tape& t, Node& n) {
      const Tensor& xv = t.value(n.inputs[0]);
      Tensor& g = t.grad_buf(n.inputs[0]);
      int64_t R = xv.shape[0], C = xv.shape[1];
      int64_t K = static_cast<int64_t>(n.aux[0]);
      int64_t no = static_cast<int64_t>(n.aux.size()) - 1;
      for (int64_t r = 0; r < R; ++r) {
        int64_t base = (r / K) * K, site = r - base;
        for (int64_t oi = 0; oi < no; ++oi) {
          int64_t src = base + mod(site + static_cast<int64_t>(n.aux[static_cast<size_t>(oi) + 1]), K);
          for (int64_t c = 0; c < C; ++c) g.at(src, c) += n.grad.at(r, oi * C + c);
        }
      }
    });
    node(y).aux = std::move(aux);
    return y;
  }

  // Multi-head attention over a ring neighborhood: each site attends to the
  // sites at offsets -window..window on its ring (wrapping).  q, k, v are
  // [R, d_model] with d_model divisible by heads; rows form blocks of
  // `block_rows` sites (0 means a single block).
  Var ring_attend(Var q, Var k, Var v, int64_t window, int64_t heads, int64_t block_rows = 0) {
    const Tensor& qv = value(q);
    const Tensor& kv = value(k);
    const Tensor& vv = value(v);
    if (qv.rank() != 2 || !qv.same_shape(kv) || !qv.same_shape(vv))
      throw ContractViolation("ring_attend: q/k/v must share a rank-2 shape");
    if (window < 1) throw ContractViolation("ring_attend: window must be >= 1");
    if (heads < 1 || qv.shape[1] % heads != 0)
      throw ConfigError("ring_attend: model width " + std::to_string(qv.shape[1]) +
                        " not divisible by " + std::to_string(heads) + " heads");
    int64_t R = qv.shape[0], D = qv.shape[1];
    int64_t K = block_rows == 0 ? R : block_rows;
    if (K <= 0 || R % K != 0) throw ContractViolation("ring_attend: rows not divisible by block");
    int64_t H = heads, dh = D / H, no = 2 * window + 1;
    double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor out = Tensor::zeros({R, D});
    std::vector<double> aux(static_cast<size_t>(4 + R * H * no));
    aux[0] = static_cast<double>(K);
    aux[1] = static_cast<double>(window);
    aux[2] = static_cast<double>(H);
    aux[3] = inv_scale;
    std::vector<double> scores(static_cast<size_t>(no));
    for (int64_t r = 0; r < R; ++r) {
      int64_t base = (r / K) * K, site = r - base;
      for (int64_t h = 0; h < H; ++h) {
        double smax = -1e300;
        for (int64_t oi = 0; oi < no; ++oi) {
          int64_t src = base + mod(site + oi - window, K);
          double s = 0.0;
          for (int64_t c = 0; c < dh; ++c) s += qv.at(r, h * dh + c) * kv.at(src, h * dh + c);
          s *= inv_scale;
          scores[static_cast<size_t>(oi)] = s;
          if (s > smax) smax = s;
        }
        double z = 0.0;
        for (int64_t oi = 0; oi < no; ++oi) {
          double e = std::exp(scores[static_cast<size_t>(oi)] - smax);
          scores[static_cast<size_t>(oi)] = e;
          z += e;
        }
        double* alpha = &aux[static_cast<size_t>(4 + (r * H + h) * no)];
        for (int64_t oi = 0; oi < no; ++oi) {
          double a = scores[static_cast<size_t>(oi)] / z;
          alpha[oi] = a;
          int64_t src = base + mod(site + oi - window, K);
          for (int64_t c = 0; c < dh; ++c) out.at(r, h * dh + c) += a * vv.at(src, h * dh + c);
        }
      }
    }
    Var y = push(std::move(out), {q, k, v}, [](Tape& t, Node& n) {
      const Tensor& qv = t.value(n.inputs[0]);
      const Tensor& kv = t.value(n.inputs[1]);
      const Tensor& vv = t.value(n.inputs[2]);
      Tensor& gq = t.grad_buf(n.inputs[0]);
      Tensor& gk = t.grad_buf(n.inputs[1]);
      Tensor& gv = t.grad_buf(n.inputs[2]);
      int64_t R = qv.shape[0], D = qv.shape[1];
      int64_t K = static_cast<int64_t>(n.aux[0]);
      int64_t window = static_cast<int64_t>(n.aux[1]);
      int64_t H = static_cast<int64_t>(n.aux[2]);
      double inv_scale = n.aux[3];
      int64_t dh = D / H, no = 2 * window + 1;
      std::vector<double> dalpha(static_cast<size_t>(no));
      for (int64_t r = 0; r < R; ++r) {
        int64_t base = (r / K) * K, site = r - base;
        for (int64_t h = 0; h < H; ++h) {
          const double* alpha = &n.aux[static_cast<size_t>(4 + (r * H + h) * no)];
          double dot = 0.0;
          for (int64_t oi = 0; oi < no; ++oi) {
            int64_t src = base + mod(site + oi - window, K);
            double da = 0.0;
            for (int64_t c = 0; c < dh; ++c) da += n.grad.at(r, h * dh + c) * vv.at(src, h * dh + c);
            dalpha[static_cast<size_t>(oi)] = da;
            dot += da * alpha[oi];
            for (int64_t c = 0; c < dh; ++c)
              gv.at(src, h * dh + c) += alpha[oi] * n.grad.at(r, h * dh + c);
          }
          for (int64_t oi = 0; oi < no; ++oi) {
            int64_t src = base + mod(site + oi - window, K);
            double ds = alpha[oi] * (dalpha[static_cast<size_t>(oi)] - dot) * inv_scale;
            for (int64_t c = 0; c < dh; ++c) {
              gq.at(r, h * dh + c) += ds * kv.at(src, h * dh + c);
              gk.at(src, h * dh + c) += ds * qv.at(r, h * dh + c);
            }
          }
        }
      }
    });
    node(y).aux = std::move(aux);
    return y;
  }

  // Full attention block: project x to q/k/v, attend over the ring window,
  // project the context back.
  Var local_attention(Var x, int64_t window, int64_t heads, const AttentionParams& p,
                      int64_t block_rows = 0) {
    Var q = matmul(x, p.wq);
    Var k = matmul(x, p.wk);
    Var v = matmul(x, p.wv);
    Var ctx = ring_attend(q, k, v, window, heads, block_rows);
    return matmul(ctx, p.wo);
  }

  // ---- loss ----

  // Fair-CRPS training loss.  pred is [B*N, K]: B batch elements, each with
  // N exchangeable samples (sample index varies fastest).  targets is [B, K],
  // site_weights is [K] (empty for uniform).  Returns the scalar
  //   (1/B) sum_b (1/K) sum_k a_k * fairCRPS({pred[b,:,k]}, targets[b,k]).
  Var fair_crps_loss(Var pred, const Tensor& targets, const Tensor& site_weights,
                     int64_t n_samples) {
    const Tensor& pv = value(pred);
    if (pv.rank() != 2) throw ContractViolation("fair_crps_loss: rank-2 predictions required");
    if (n_samples < 2)
      throw ContractViolation("fair_crps_loss: needs at least 2 samples per batch element");
    if (pv.shape[0] % n_samples != 0)
      throw ContractViolation("fair_crps_loss: rows not divisible by sample count");
    int64_t B = pv.shape[0] / n_samples, K = pv.shape[1], N = n_samples;
    if (targets.rank() != 2 || targets.shape[0] != B || targets.shape[1] != K)
      throw ContractViolation("fair_crps_loss: targets shape " + targets.shape_str() +
                              " does not match predictions");
    if (!site_weights.data.empty() && (site_weights.rank() != 1 || site_weights.shape[0] != K))
      throw ContractViolation("fair_crps_loss: site weight shape mismatch");
    std::vector<double> aux;
    aux.reserve(static_cast<size_t>(2 + B * K + K));
    aux.push_back(static_cast<double>(N));
    aux.push_back(static_cast<double>(B));
    for (double y : targets.data) aux.push_back(y);
    for (int64_t k = 0; k < K; ++k)
      aux.push_back(site_weights.data.empty() ? 1.0 : site_weights.at(k));
    double loss = 0.0;
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t k = 0; k < K; ++k) {
        double y = targets.at(b, k);
        double a = site_weights.data.empty() ? 1.0 : site_weights.at(k);
        double skill = 0.0, pair = 0.0;
        for (int64_t n = 0; n < N; ++n) {
          double x = pv.at(b * N + n, k);
          skill += std::fabs(x - y);
          for (int64_t m = 0; m < N; ++m) pair += std::fabs(x - pv.at(b * N + m, k));
        }
        loss += a * (skill / static_cast<double>(N) -
                     pair / (2.0 * static_cast<double>(N) * static_cast<double>(N - 1)));
      }
    }
    loss /= static_cast<double>(B) * static_cast<double>(K);
    Tensor lt = Tensor::zeros({1});  // skip the finite check; see sum_all
    lt.data[0] = loss;
    Var out = push(std::move(lt), {pred}, [](Tape& t, Node& n) {
      const Tensor& pv = t.value(n.inputs[0]);
      Tensor& g = t.grad_buf(n.inputs[0]);
      int64_t N = static_cast<int64_t>(n.aux[0]);
      int64_t B = static_cast<int64_t>(n.aux[1]);
      int64_t K = pv.shape[1];
      const double* targets = &n.aux[2];
      const double* weights = &n.aux[static_cast<size_t>(2 + B * K)];
      double go = n.grad.data[0] / (static_cast<double>(B) * static_cast<double>(K));
      for (int64_t b = 0; b < B; ++b) {
        for (int64_t k = 0; k < K; ++k) {
          double y = targets[b * K + k];
          double a = weights[k];
          for (int64_t s = 0; s < N; ++s) {
            double x = pv.at(b * N + s, k);
            double d = detail::sign0(x - y) / static_cast<double>(N);
            double pair = 0.0;
            for (int64_t m = 0; m < N; ++m) pair += detail::sign0(x - pv.at(b * N + m, k));
            d -= pair / (static_cast<double>(N) * static_cast<double>(N - 1));
            g.at(b * N + s, k) += go * a * d;
          }
        }
      }
    });
    node(out).aux = std::move(aux);
    return out;
  }

 private:
  std::vector<Node> nodes_;

  static int64_t mod(int64_t a, int64_t m) {
    int64_t r = a % m;
    return r < 0 ? r + m : r;
  }

  Node& node(Var v) {
    if (!v.valid() || v.id >= size()) throw ContractViolation("tape: invalid var handle");
    return nodes_[static_cast<size_t>(v.id)];
  }
  const Node& node(Var v) const {
    if (!v.valid() || v.id >= size()) throw ContractViolation("tape: invalid var handle");
    return nodes_[static_cast<size_t>(v.id)];
  }

  Tensor& grad_buf(Var v) {
    Node& n = node(v);
    if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
    return n.grad;
  }

  Var push(Tensor value, std::vector<Var> inputs, std::function<void(Tape&, Node&)> backward) {
    for (Var in : inputs)
      if (!in.valid() || in.id >= size())
        throw ContractViolation("tape: operation input does not precede it");
    Node n;
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
  }

  Var binary_same_shape(Var a, Var b, const char* name, double ca, double cb, bool) {
    require_same_shape(a, b, name);
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    Tensor out = Tensor::zeros(x.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = ca * x.data[i] + cb * y.data[i];
    return push(std::move(out), {a, b}, [ca, cb](Tape& t, Node& n) {
      Tensor& ga = t.grad_buf(n.inputs[0]);
      Tensor& gb = t.grad_buf(n.inputs[1]);
      for (size_t i = 0; i < n.grad.data.size(); ++i) {
        ga.data[i] += ca * n.grad.data[i];
        gb.data[i] += cb * n.grad.data[i];
      }
    });
  }

  void require_same_shape(Var a, Var b, const char* name) {
    if (!value(a).same_shape(value(b)))
      throw ContractViolation(std::string(name) + ": shape mismatch " + value(a).shape_str() +
                              " vs " + value(b).shape_str());
  }
};

}  // namespace fgn
