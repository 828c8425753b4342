// Copyright 2026 The sdbev Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "sdbev/tensor.hpp"

namespace sdbev::ad {

// Reverse-mode autodiff on coarse tensor ops. Each forward call builds a DAG
// of shared_ptr nodes; backward() releases nothing, the graph dies with the
// last Var referencing it. Single-threaded per graph; independent graphs may
// run on different threads.

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor val;
  Tensor grad;  // allocated lazily, same shape as val
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;  // scatters node.grad into parents

  Tensor& g() {
    if (grad.v.empty()) grad = Tensor::zeros(val.shape);
    return grad;
  }
};

inline Var make_node(Tensor val, std::vector<Var> parents, std::function<void(Node&)> back) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p && p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backward_fn = std::move(back);
  return n;
}

inline Var constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->val = std::move(t);
  return n;
}

inline Var leaf(Tensor t) {
  auto n = std::make_shared<Node>();
  n->val = std::move(t);
  n->requires_grad = true;
  return n;
}

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->val.same_shape(b->val))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a->val.shape_str() +
                                " vs " + b->val.shape_str());
}

// ---- elementwise binary ----

inline Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out = a->val;
  for (std::int64_t i = 0; i < out.numel(); ++i) out.v[i] += b->val.v[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    const auto& g = n.grad.v;
    if (n.parents[0]->requires_grad) {
      auto& ga = n.parents[0]->g().v;
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (n.parents[1]->requires_grad) {
      auto& gb = n.parents[1]->g().v;
      for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a->val;
  for (std::int64_t i = 0; i < out.numel(); ++i) out.v[i] -= b->val.v[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    const auto& g = n.grad.v;
    if (n.parents[0]->requires_grad) {
      auto& ga = n.parents[0]->g().v;
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (n.parents[1]->requires_grad) {
      auto& gb = n.parents[1]->g().v;
      for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out = a->val;
  for (std::int64_t i = 0; i < out.numel(); ++i) out.v[i] *= b->val.v[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    const auto& g = n.grad.v;
    const auto& av = n.parents[0]->val.v;
    const auto& bv = n.parents[1]->val.v;
    if (n.parents[0]->requires_grad) {
      auto& ga = n.parents[0]->g().v;
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (n.parents[1]->requires_grad) {
      auto& gb = n.parents[1]->g().v;
      for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

// ---- elementwise unary ----

namespace detail {
template <class F, class DF>
Var unary(const Var& x, F f, DF df) {
  Tensor out = x->val;
  for (auto& e : out.v) e = f(e);
  Tensor saved_out = out;  // some derivatives want the output
  return make_node(std::move(out), {x}, [df, saved_out](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& gx = n.parents[0]->g().v;
    const auto& xv = n.parents[0]->val.v;
    const auto& g = n.grad.v;
    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], saved_out.v[i]);
  });
}
}  // namespace detail

inline Var relu(const Var& x) {
  return detail::unary(
      x, [](double e) { return e > 0.0 ? e : 0.0; },
      [](double xi, double) { return xi > 0.0 ? 1.0 : 0.0; });
}

/// x * sigmoid(x). The model uses this smooth gate instead of relu so every
/// learnable path stays C1 and finite-difference checks are meaningful.
inline Var silu(const Var& x) {
  auto sig = [](double e) {
    return e >= 0.0 ? 1.0 / (1.0 + std::exp(-e)) : std::exp(e) / (1.0 + std::exp(e));
  };
  return detail::unary(
      x, [sig](double e) { return e * sig(e); },
      [sig](double xi, double) {
        const double s = sig(xi);
        return s * (1.0 + xi * (1.0 - s));
      });
}

inline Var sigmoid(const Var& x) {
  return detail::unary(
      x,
      [](double e) { return e >= 0.0 ? 1.0 / (1.0 + std::exp(-e)) : std::exp(e) / (1.0 + std::exp(e)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Var exp_(const Var& x) {
  return detail::unary(x, [](double e) { return std::exp(e); },
                       [](double, double y) { return y; });
}

inline Var log_(const Var& x) {
  return detail::unary(x, [](double e) { return std::log(e); },
                       [](double xi, double) { return 1.0 / xi; });
}

/// log(1 + exp(x)), overflow-safe.
inline Var softplus(const Var& x) {
  return detail::unary(
      x, [](double e) { return e > 0.0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e)); },
      [](double xi, double) {
        return xi >= 0.0 ? 1.0 / (1.0 + std::exp(-xi)) : std::exp(xi) / (1.0 + std::exp(xi));
      });
}

inline Var abs_(const Var& x) {
  return detail::unary(x, [](double e) { return std::fabs(e); },
                       [](double xi, double) { return xi > 0.0 ? 1.0 : (xi < 0.0 ? -1.0 : 0.0); });
}

inline Var square(const Var& x) {
  return detail::unary(x, [](double e) { return e * e; },
                       [](double xi, double) { return 2.0 * xi; });
}

/// x^p for x > 0 (used for focal modulators and rsqrt).
inline Var powc(const Var& x, double p) {
  return detail::unary(x, [p](double e) { return std::pow(e, p); },
                       [p](double xi, double) { return p * std::pow(xi, p - 1.0); });
}

inline Var scalar_mul(const Var& x, double c) {
  return detail::unary(x, [c](double e) { return c * e; }, [c](double, double) { return c; });
}

inline Var scalar_add(const Var& x, double c) {
  return detail::unary(x, [c](double e) { return e + c; }, [](double, double) { return 1.0; });
}

inline Var neg(const Var& x) { return scalar_mul(x, -1.0); }

// ---- matrix ops ----

inline Var matmul(const Var& a, const Var& b) {
  if (a->val.rank() != 2 || b->val.rank() != 2 || a->val.dim(1) != b->val.dim(0))
    throw std::invalid_argument("matmul: bad shapes " + a->val.shape_str() + " x " +
                                b->val.shape_str());
  const int m = a->val.dim(0), k = a->val.dim(1), nn = b->val.dim(1);
  Tensor out({m, nn});
  const double* A = a->val.data();
  const double* B = b->val.data();
  double* C = out.data();
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      const double* brow = B + p * nn;
      double* crow = C + i * nn;
      for (int j = 0; j < nn; ++j) crow[j] += aip * brow[j];
    }
  return make_node(std::move(out), {a, b}, [m, k, nn](Node& n) {
    const double* G = n.grad.data();
    if (n.parents[0]->requires_grad) {  // ga = g . b^T
      double* GA = n.parents[0]->g().data();
      const double* B = n.parents[1]->val.data();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < nn; ++j) {
          const double gij = G[i * nn + j];
          for (int p = 0; p < k; ++p) GA[i * k + p] += gij * B[p * nn + j];
        }
    }
    if (n.parents[1]->requires_grad) {  // gb = a^T . g
      double* GB = n.parents[1]->g().data();
      const double* A = n.parents[0]->val.data();
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          const double* grow = G + i * nn;
          double* gbrow = GB + p * nn;
          for (int j = 0; j < nn; ++j) gbrow[j] += aip * grow[j];
        }
    }
  });
}

inline Var transpose(const Var& x) {
  if (x->val.rank() != 2) throw std::invalid_argument("transpose: rank != 2");
  const int m = x->val.dim(0), nn = x->val.dim(1);
  Tensor out({nn, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < nn; ++j) out.at(j, i) = x->val.at(i, j);
  return make_node(std::move(out), {x}, [m, nn](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& gx = n.parents[0]->g();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < nn; ++j) gx.at(i, j) += n.grad.at(j, i);
  });
}

inline Var reshape(const Var& x, std::vector<int> shape) {
  if (Tensor::count(shape) != x->val.numel())
    throw std::invalid_argument("reshape: element count mismatch");
  Tensor out(std::move(shape), x->val.v);
  return make_node(std::move(out), {x}, [](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& gx = n.parents[0]->g().v;
    for (size_t i = 0; i < gx.size(); ++i) gx[i] += n.grad.v[i];
  });
}

// ---- row/column broadcasts over [m, n] matrices ----

/// out[i,j] = x[i,j] * s[i]
inline Var rowwise_scale(const Var& x, const Var& s) {
  const int m = x->val.dim(0), nn = x->val.dim(1);
  if (s->val.numel() != m) throw std::invalid_argument("rowwise_scale: bad scale length");
  Tensor out = x->val;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < nn; ++j) out.at(i, j) *= s->val.at(i);
  return make_node(std::move(out), {x, s}, [m, nn](Node& n) {
    const auto& xv = n.parents[0]->val;
    const auto& sv = n.parents[1]->val;
    if (n.parents[0]->requires_grad) {
      auto& gx = n.parents[0]->g();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < nn; ++j) gx.at(i, j) += n.grad.at(i, j) * sv.at(i);
    }
    if (n.parents[1]->requires_grad) {
      auto& gs = n.parents[1]->g();
      for (int i = 0; i < m; ++i) {
        double acc = 0.0;
        for (int j = 0; j < nn; ++j) acc += n.grad.at(i, j) * xv.at(i, j);
        gs.at(i) += acc;
      }
    }
  });
}

/// out[i,j] = x[i,j] + s[i]
inline Var rowwise_shift(const Var& x, const Var& s) {
  const int m = x->val.dim(0), nn = x->val.dim(1);
  if (s->val.numel() != m) throw std::invalid_argument("rowwise_shift: bad shift length");
  Tensor out = x->val;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < nn; ++j) out.at(i, j) += s->val.at(i);
  return make_node(std::move(out), {x, s}, [m, nn](Node& n) {
    if (n.parents[0]->requires_grad) {
      auto& gx = n.parents[0]->g();
      for (std::int64_t i = 0; i < n.grad.numel(); ++i) gx.v[i] += n.grad.v[i];
    }
    if (n.parents[1]->requires_grad) {
      auto& gs = n.parents[1]->g();
      for (int i = 0; i < m; ++i) {
        double acc = 0.0;
        for (int j = 0; j < nn; ++j) acc += n.grad.at(i, j);
        gs.at(i) += acc;
      }
    }
  });
}

/// out[i,j] = x[i,j] * v[j]
inline Var colwise_scale(const Var& x, const Var& v) {
  const int m = x->val.dim(0), nn = x->val.dim(1);
  if (v->val.numel() != nn) throw std::invalid_argument("colwise_scale: bad vector length");
  Tensor out = x->val;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < nn; ++j) out.at(i, j) *= v->val.at(j);
  return make_node(std::move(out), {x, v}, [m, nn](Node& n) {
    const auto& xv = n.parents[0]->val;
    const auto& vv = n.parents[1]->val;
    if (n.parents[0]->requires_grad) {
      auto& gx = n.parents[0]->g();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < nn; ++j) gx.at(i, j) += n.grad.at(i, j) * vv.at(j);
    }
    if (n.parents[1]->requires_grad) {
      auto& gv = n.parents[1]->g();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < nn; ++j) gv.at(j) += n.grad.at(i, j) * xv.at(i, j);
    }
  });
}

/// out[i,j] = x[i,j] + v[j]
inline Var colwise_shift(const Var& x, const Var& v) {
  const int m = x->val.dim(0), nn = x->val.dim(1);
  if (v->val.numel() != nn) throw std::invalid_argument("colwise_shift: bad vector length");
  Tensor out = x->val;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < nn; ++j) out.at(i, j) += v->val.at(j);
  return make_node(std::move(out), {x, v}, [m, nn](Node& n) {
    if (n.parents[0]->requires_grad) {
      auto& gx = n.parents[0]->g();
      for (std::int64_t i = 0; i < n.grad.numel(); ++i) gx.v[i] += n.grad.v[i];
    }
    if (n.parents[1]->requires_grad) {
      auto& gv = n.parents[1]->g();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < nn; ++j) gv.at(j) += n.grad.at(i, j);
    }
  });
}

/// Row means of [m, n] -> [m].
inline Var mean_cols(const Var& x) {
  const int m = x->val.dim(0), nn = x->val.dim(1);
  Tensor out({m});
  for (int i = 0; i < m; ++i) {
    double acc = 0.0;
    for (int j = 0; j < nn; ++j) acc += x->val.at(i, j);
    out.at(i) = acc / nn;
  }
  return make_node(std::move(out), {x}, [m, nn](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& gx = n.parents[0]->g();
    for (int i = 0; i < m; ++i) {
      const double gi = n.grad.at(i) / nn;
      for (int j = 0; j < nn; ++j) gx.at(i, j) += gi;
    }
  });
}

// ---- reductions ----

inline Var sum_all(const Var& x) {
  double acc = 0.0;
  for (double e : x->val.v) acc += e;
  return make_node(Tensor::scalar(acc), {x}, [](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& gx = n.parents[0]->g().v;
    const double g = n.grad.at(0);
    for (auto& e : gx) e += g;
  });
}

inline Var mean_all(const Var& x) {
  return scalar_mul(sum_all(x), 1.0 / static_cast<double>(x->val.numel()));
}

// ---- slicing / concatenation ----

inline Var slice_rows(const Var& x, int r0, int r1) {
  const int m = x->val.dim(0), nn = x->val.dim(1);
  if (r0 < 0 || r1 > m || r0 >= r1) throw std::invalid_argument("slice_rows: bad range");
  Tensor out({r1 - r0, nn});
  std::copy(x->val.v.begin() + static_cast<size_t>(r0) * nn,
            x->val.v.begin() + static_cast<size_t>(r1) * nn, out.v.begin());
  return make_node(std::move(out), {x}, [r0, nn](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& gx = n.parents[0]->g();
    const int rows = n.grad.dim(0);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < nn; ++j) gx.at(r0 + i, j) += n.grad.at(i, j);
  });
}

inline Var slice_cols(const Var& x, int c0, int c1) {
  const int m = x->val.dim(0), nn = x->val.dim(1);
  if (c0 < 0 || c1 > nn || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
  Tensor out({m, c1 - c0});
  for (int i = 0; i < m; ++i)
    for (int j = c0; j < c1; ++j) out.at(i, j - c0) = x->val.at(i, j);
  return make_node(std::move(out), {x}, [c0](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& gx = n.parents[0]->g();
    const int rows = n.grad.dim(0), cols = n.grad.dim(1);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) gx.at(i, c0 + j) += n.grad.at(i, j);
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  const int nn = parts[0]->val.dim(1);
  int m = 0;
  for (const auto& p : parts) {
    if (p->val.rank() != 2 || p->val.dim(1) != nn)
      throw std::invalid_argument("concat_rows: column mismatch");
    m += p->val.dim(0);
  }
  Tensor out({m, nn});
  size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p->val.v.begin(), p->val.v.end(), out.v.begin() + off);
    off += p->val.v.size();
  }
  return make_node(std::move(out), parts, [](Node& n) {
    size_t off = 0;
    for (auto& p : n.parents) {
      const size_t cnt = p->val.v.size();
      if (p->requires_grad) {
        auto& gp = p->g().v;
        for (size_t i = 0; i < cnt; ++i) gp[i] += n.grad.v[off + i];
      }
      off += cnt;
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  const int m = parts[0]->val.dim(0);
  int nn = 0;
  for (const auto& p : parts) {
    if (p->val.rank() != 2 || p->val.dim(0) != m)
      throw std::invalid_argument("concat_cols: row mismatch");
    nn += p->val.dim(1);
  }
  Tensor out({m, nn});
  int coff = 0;
  for (const auto& p : parts) {
    const int pc = p->val.dim(1);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < pc; ++j) out.at(i, coff + j) = p->val.at(i, j);
    coff += pc;
  }
  return make_node(std::move(out), parts, [m](Node& n) {
    int coff = 0;
    for (auto& p : n.parents) {
      const int pc = p->val.dim(1);
      if (p->requires_grad) {
        auto& gp = p->g();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < pc; ++j) gp.at(i, j) += n.grad.at(i, coff + j);
      }
      coff += pc;
    }
  });
}

inline Var gather_rows(const Var& x, std::vector<int> idx) {
  const int nn = x->val.dim(1);
  Tensor out({static_cast<int>(idx.size()), nn});
  for (size_t i = 0; i < idx.size(); ++i)
    for (int j = 0; j < nn; ++j) out.at(static_cast<int>(i), j) = x->val.at(idx[i], j);
  return make_node(std::move(out), {x}, [idx, nn](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& gx = n.parents[0]->g();
    for (size_t i = 0; i < idx.size(); ++i)
      for (int j = 0; j < nn; ++j) gx.at(idx[i], j) += n.grad.at(static_cast<int>(i), j);
  });
}

// ---- softmax ----

inline Var softmax_rows(const Var& x) {
  const int m = x->val.dim(0), nn = x->val.dim(1);
  Tensor out = x->val;
  for (int i = 0; i < m; ++i) {
    double mx = out.at(i, 0);
    for (int j = 1; j < nn; ++j) mx = std::max(mx, out.at(i, j));
    double z = 0.0;
    for (int j = 0; j < nn; ++j) {
      out.at(i, j) = std::exp(out.at(i, j) - mx);
      z += out.at(i, j);
    }
    for (int j = 0; j < nn; ++j) out.at(i, j) /= z;
  }
  Tensor probs = out;
  return make_node(std::move(out), {x}, [m, nn, probs](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& gx = n.parents[0]->g();
    for (int i = 0; i < m; ++i) {
      double dot = 0.0;
      for (int j = 0; j < nn; ++j) dot += probs.at(i, j) * n.grad.at(i, j);
      for (int j = 0; j < nn; ++j) gx.at(i, j) += probs.at(i, j) * (n.grad.at(i, j) - dot);
    }
  });
}

// ---- 2D convolution over [N, Cin, H, W] ----

namespace detail {

/// Valid output-x range [lo, hi) for one kernel column: keeps ix in bounds so
/// the inner loops run branch-free.
inline void conv_x_range(int W, int Wo, int stride, int off, int& lo, int& hi) {
  // ix = ox * stride + off must satisfy 0 <= ix < W
  lo = off < 0 ? (-off + stride - 1) / stride : 0;
  hi = Wo;
  if (off + (Wo - 1) * stride >= W) hi = (W - off + stride - 1) / stride;
  if (hi < lo) hi = lo;
}

}  // namespace detail

inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad, int dilation = 1) {
  const int N = x->val.dim(0), Ci = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
  const int Co = w->val.dim(0), kh = w->val.dim(2), kw = w->val.dim(3);
  if (w->val.dim(1) != Ci || b->val.numel() != Co)
    throw std::invalid_argument("conv2d: weight/bias shape mismatch");
  const int Ho = (H + 2 * pad - dilation * (kh - 1) - 1) / stride + 1;
  const int Wo = (W + 2 * pad - dilation * (kw - 1) - 1) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv2d: empty output");
  Tensor out({N, Co, Ho, Wo});
  const double* X = x->val.data();
  const double* Wt = w->val.data();
  double* O = out.data();
  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Co; ++co) {
      double* oplane = O + (static_cast<size_t>(n) * Co + co) * Ho * Wo;
      const double bias = b->val.at(co);
      for (int i = 0; i < Ho * Wo; ++i) oplane[i] = bias;
      for (int ci = 0; ci < Ci; ++ci) {
        const double* xplane = X + (static_cast<size_t>(n) * Ci + ci) * H * W;
        const double* wrow = Wt + ((static_cast<size_t>(co) * Ci + ci) * kh) * kw;
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            const double wv = wrow[ky * kw + kx];
            if (wv == 0.0) continue;
            const int offx = kx * dilation - pad;
            int lo, hi;
            detail::conv_x_range(W, Wo, stride, offx, lo, hi);
            for (int oy = 0; oy < Ho; ++oy) {
              const int iy = oy * stride - pad + ky * dilation;
              if (iy < 0 || iy >= H) continue;
              const double* xr = xplane + static_cast<size_t>(iy) * W;
              double* orow = oplane + static_cast<size_t>(oy) * Wo;
              if (stride == 1) {
                for (int ox = lo; ox < hi; ++ox) orow[ox] += wv * xr[ox + offx];
              } else {
                for (int ox = lo; ox < hi; ++ox) orow[ox] += wv * xr[ox * stride + offx];
              }
            }
          }
      }
    }
  return make_node(std::move(out), {x, w, b},
                   [N, Ci, H, W, Co, kh, kw, Ho, Wo, stride, pad, dilation](Node& nd) {
    const bool need_x = nd.parents[0]->requires_grad;
    const bool need_w = nd.parents[1]->requires_grad;
    const bool need_b = nd.parents[2]->requires_grad;
    Tensor* gx = need_x ? &nd.parents[0]->g() : nullptr;
    Tensor* gw = need_w ? &nd.parents[1]->g() : nullptr;
    Tensor* gb = need_b ? &nd.parents[2]->g() : nullptr;
    const double* X = nd.parents[0]->val.data();
    const double* Wt = nd.parents[1]->val.data();
    const double* G = nd.grad.data();
    for (int n = 0; n < N; ++n)
      for (int co = 0; co < Co; ++co) {
        const double* gplane = G + (static_cast<size_t>(n) * Co + co) * Ho * Wo;
        if (need_b) {
          double acc = 0.0;
          for (int i = 0; i < Ho * Wo; ++i) acc += gplane[i];
          gb->at(co) += acc;
        }
        for (int ci = 0; ci < Ci; ++ci) {
          const double* xplane = X + (static_cast<size_t>(n) * Ci + ci) * H * W;
          double* gxplane = need_x ? gx->data() + (static_cast<size_t>(n) * Ci + ci) * H * W
                                   : nullptr;
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
              const size_t widx = ((static_cast<size_t>(co) * Ci + ci) * kh + ky) * kw + kx;
              const double wv = Wt[widx];
              const int offx = kx * dilation - pad;
              int lo, hi;
              detail::conv_x_range(W, Wo, stride, offx, lo, hi);
              double wacc = 0.0;
              for (int oy = 0; oy < Ho; ++oy) {
                const int iy = oy * stride - pad + ky * dilation;
                if (iy < 0 || iy >= H) continue;
                const double* xr = xplane + static_cast<size_t>(iy) * W;
                const double* grow = gplane + static_cast<size_t>(oy) * Wo;
                if (need_x) {
                  double* gxr = gxplane + static_cast<size_t>(iy) * W;
                  if (stride == 1) {
                    for (int ox = lo; ox < hi; ++ox) {
                      wacc += grow[ox] * xr[ox + offx];
                      gxr[ox + offx] += wv * grow[ox];
                    }
                  } else {
                    for (int ox = lo; ox < hi; ++ox) {
                      wacc += grow[ox] * xr[ox * stride + offx];
                      gxr[ox * stride + offx] += wv * grow[ox];
                    }
                  }
                } else {
                  if (stride == 1) {
                    for (int ox = lo; ox < hi; ++ox) wacc += grow[ox] * xr[ox + offx];
                  } else {
                    for (int ox = lo; ox < hi; ++ox) wacc += grow[ox] * xr[ox * stride + offx];
                  }
                }
              }
              if (need_w) gw->v[widx] += wacc;
            }
        }
      }
  });
}

// ---- layout / pooling ops used by the model ----

/// [N, C, H, W] -> [N*H*W, C]; token t = (n*H+y)*W+x carries the C features.
inline Var nchw_to_tokens(const Var& x) {
  const int N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
  Tensor out({N * H * W, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int xw = 0; xw < W; ++xw) out.at((n * H + y) * W + xw, c) = x->val.at(n, c, y, xw);
  return make_node(std::move(out), {x}, [N, C, H, W](Node& nd) {
    if (!nd.parents[0]->requires_grad) return;
    auto& gx = nd.parents[0]->g();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
          for (int xw = 0; xw < W; ++xw)
            gx.at(n, c, y, xw) += nd.grad.at((n * H + y) * W + xw, c);
  });
}

/// [N, C, H, W] -> [C, N*H*W]; row c concatenates that channel over all views.
inline Var regroup_class_major(const Var& x) {
  const int N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
  const int L = N * H * W;
  Tensor out({C, L});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int p = 0; p < H * W; ++p)
        out.at(c, n * H * W + p) = x->val.v[((static_cast<size_t>(n) * C + c) * H * W) + p];
  return make_node(std::move(out), {x}, [N, C, H, W](Node& nd) {
    if (!nd.parents[0]->requires_grad) return;
    auto& gx = nd.parents[0]->g();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int p = 0; p < H * W; ++p)
          gx.v[((static_cast<size_t>(n) * C + c) * H * W) + p] += nd.grad.at(c, n * H * W + p);
  });
}

/// Adaptive average pooling of each row from length L to K.
/// Chunk i covers [floor(i*L/K), ceil((i+1)*L/K)).
inline Var adaptive_avg_pool_rows(const Var& x, int K) {
  const int C = x->val.dim(0), L = x->val.dim(1);
  if (K <= 0) throw std::invalid_argument("adaptive_avg_pool_rows: K <= 0");
  Tensor out({C, K});
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < K; ++i) {
      const int s = static_cast<int>((static_cast<std::int64_t>(i) * L) / K);
      const int e = static_cast<int>((static_cast<std::int64_t>(i + 1) * L + K - 1) / K);
      double acc = 0.0;
      for (int j = s; j < e; ++j) acc += x->val.at(c, j);
      out.at(c, i) = acc / (e - s);
    }
  return make_node(std::move(out), {x}, [C, L, K](Node& nd) {
    if (!nd.parents[0]->requires_grad) return;
    auto& gx = nd.parents[0]->g();
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < K; ++i) {
        const int s = static_cast<int>((static_cast<std::int64_t>(i) * L) / K);
        const int e = static_cast<int>((static_cast<std::int64_t>(i + 1) * L + K - 1) / K);
        const double g = nd.grad.at(c, i) / (e - s);
        for (int j = s; j < e; ++j) gx.at(c, j) += g;
      }
  });
}

/// pe[t, :] = view[t / P, :] + pos[t % P, :] for t in [0, N*P).
inline Var build_pe(const Var& view_emb, const Var& pos_emb) {
  const int N = view_emb->val.dim(0), d = view_emb->val.dim(1), P = pos_emb->val.dim(0);
  if (pos_emb->val.dim(1) != d) throw std::invalid_argument("build_pe: dim mismatch");
  Tensor out({N * P, d});
  for (int n = 0; n < N; ++n)
    for (int p = 0; p < P; ++p)
      for (int j = 0; j < d; ++j)
        out.at(n * P + p, j) = view_emb->val.at(n, j) + pos_emb->val.at(p, j);
  return make_node(std::move(out), {view_emb, pos_emb}, [N, P, d](Node& nd) {
    if (nd.parents[0]->requires_grad) {
      auto& gv = nd.parents[0]->g();
      for (int n = 0; n < N; ++n)
        for (int p = 0; p < P; ++p)
          for (int j = 0; j < d; ++j) gv.at(n, j) += nd.grad.at(n * P + p, j);
    }
    if (nd.parents[1]->requires_grad) {
      auto& gp = nd.parents[1]->g();
      for (int n = 0; n < N; ++n)
        for (int p = 0; p < P; ++p)
          for (int j = 0; j < d; ++j) gp.at(p, j) += nd.grad.at(n * P + p, j);
    }
  });
}

/// Assemble per-query patches into a BEV grid.
/// x is [G*G, C*s*s] with patch layout (c, py, px); query q owns cell (q/G, q%G).
inline Var tile_patches(const Var& x, int G, int s, int C) {
  if (x->val.dim(0) != G * G || x->val.dim(1) != C * s * s)
    throw std::invalid_argument("tile_patches: shape mismatch");
  Tensor out({C, G * s, G * s});
  for (int q = 0; q < G * G; ++q) {
    const int gy = q / G, gx = q % G;
    for (int c = 0; c < C; ++c)
      for (int py = 0; py < s; ++py)
        for (int px = 0; px < s; ++px)
          out.at(c, gy * s + py, gx * s + px) = x->val.at(q, (c * s + py) * s + px);
  }
  return make_node(std::move(out), {x}, [G, s, C](Node& nd) {
    if (!nd.parents[0]->requires_grad) return;
    auto& gx = nd.parents[0]->g();
    for (int q = 0; q < G * G; ++q) {
      const int gy = q / G, gxc = q % G;
      for (int c = 0; c < C; ++c)
        for (int py = 0; py < s; ++py)
          for (int px = 0; px < s; ++px)
            gx.at(q, (c * s + py) * s + px) += nd.grad.at(c, gy * s + py, gxc * s + px);
    }
  });
}

// ---- composites ----

inline Var linear(const Var& x, const Var& w, const Var& b) {
  return colwise_shift(matmul(x, w), b);
}

inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  Var mu = mean_cols(x);
  Var xc = rowwise_shift(x, neg(mu));
  Var var = mean_cols(square(xc));
  Var inv = powc(scalar_add(var, eps), -0.5);
  Var xhat = rowwise_scale(xc, inv);
  return colwise_shift(colwise_scale(xhat, gamma), beta);
}

/// Sum of a list of scalar vars.
inline Var add_n(const std::vector<Var>& xs) {
  if (xs.empty()) return constant(Tensor::scalar(0.0));
  Var acc = xs[0];
  for (size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return acc;
}

// ---- backward ----

inline void backward(const Var& root) {
  if (root->val.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
  if (!root->requires_grad) return;
  // Iterative topological order over the requires_grad subgraph.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx].get();
      ++idx;
      if (p && p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->g().at(0) = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.v.empty()) n->backward_fn(*n);
  }
}

}  // namespace sdbev::ad
