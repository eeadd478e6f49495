#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "tbattr/autograd.hpp"

namespace tbattr {

namespace detail {

// C[M,N] += A[M,K] * B[K,N]
inline void gemm_nn(int M, int N, int K, const double* A, const double* B, double* C) {
  for (int i = 0; i < M; ++i) {
    double* c = C + static_cast<std::size_t>(i) * N;
    const double* a = A + static_cast<std::size_t>(i) * K;
    for (int k = 0; k < K; ++k) {
      const double av = a[k];
      if (av == 0.0) continue;
      const double* b = B + static_cast<std::size_t>(k) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
inline void gemm_nt(int M, int N, int K, const double* A, const double* B, double* C) {
  for (int i = 0; i < M; ++i) {
    const double* a = A + static_cast<std::size_t>(i) * K;
    double* c = C + static_cast<std::size_t>(i) * N;
    for (int j = 0; j < N; ++j) {
      const double* b = B + static_cast<std::size_t>(j) * K;
      double acc = 0.0;
      for (int k = 0; k < K; ++k) acc += a[k] * b[k];
      c[j] += acc;
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
inline void gemm_tn(int M, int N, int K, const double* A, const double* B, double* C) {
  for (int k = 0; k < K; ++k) {
    const double* a = A + static_cast<std::size_t>(k) * M;
    const double* b = B + static_cast<std::size_t>(k) * N;
    for (int i = 0; i < M; ++i) {
      const double av = a[i];
      if (av == 0.0) continue;
      double* c = C + static_cast<std::size_t>(i) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

inline void require_same(const Var& a, const Var& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  detail::require_same(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      Node& p = parent(self, k);
      if (!p.requires_grad) continue;
      Tensor& g = p.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    if (parent(self, 0).requires_grad) {
      Tensor& g = parent(self, 0).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (parent(self, 1).requires_grad) {
      Tensor& g = parent(self, 1).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      Tensor& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      Tensor& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

inline Var scale(const Var& a, double c) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= c;
  return make_op(std::move(out), {a}, [c](Node& self) {
    Tensor& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
  });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return make_op(Tensor::scalar(s), {a}, [](Node& self) {
    Tensor& g = parent(self, 0).grad_buffer();
    const double d = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d;
  });
}

inline Var mean(const Var& a) {
  if (a.size() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

inline Var relu(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return make_op(std::move(out), {a}, [](Node& self) {
    Node& p = parent(self, 0);
    Tensor& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (p.value[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

inline Var sigmoid(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = detail::sigmoid(v);
  return make_op(std::move(out), {a}, [](Node& self) {
    Tensor& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double y = self.value[i];
      g[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

inline Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_op(std::move(out), {a}, [](Node& self) {
    Tensor& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// out.flat[i] = x.flat[index[i]]. Every permutation, slice and transpose goes through here.
inline Var gather(const Var& x, std::vector<std::size_t> index, Shape out_shape) {
  if (shape_size(out_shape) != index.size()) throw ShapeError("gather: index count does not match shape");
  Tensor out(std::move(out_shape));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= x.size()) throw ShapeError("gather: index out of range");
    out[i] = x.value()[index[i]];
  }
  return make_op(std::move(out), {x}, [index = std::move(index)](Node& self) {
    Tensor& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < index.size(); ++i) g[index[i]] += self.grad[i];
  });
}

// Concatenates along axis 0; trailing dimensions must agree.
inline Var concat(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("concat of nothing");
  Shape tail(xs[0].shape().begin() + 1, xs[0].shape().end());
  int lead = 0;
  for (const auto& x : xs) {
    Shape t(x.shape().begin() + 1, x.shape().end());
    if (t != tail) throw ShapeError("concat: trailing dims differ " + shape_str(x.shape()));
    lead += x.dim(0);
  }
  Shape shape{lead};
  shape.insert(shape.end(), tail.begin(), tail.end());
  Tensor out(shape);
  std::size_t off = 0;
  for (const auto& x : xs) {
    std::copy(x.value().data(), x.value().data() + x.size(), out.data() + off);
    off += x.size();
  }
  return make_op(std::move(out), xs, [](Node& self) {
    std::size_t off = 0;
    for (auto& p : self.parents) {
      const std::size_t n = p->value.size();
      if (p->requires_grad) {
        Tensor& g = p->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

// Rows [start, start+count) along axis 0.
inline Var slice(const Var& x, int start, int count) {
  if (start < 0 || count < 0 || start + count > x.dim(0)) throw ShapeError("slice out of range");
  const std::size_t inner = x.size() / static_cast<std::size_t>(x.dim(0));
  std::vector<std::size_t> idx(inner * static_cast<std::size_t>(count));
  std::iota(idx.begin(), idx.end(), inner * static_cast<std::size_t>(start));
  Shape shape = x.shape();
  shape[0] = count;
  return gather(x, std::move(idx), std::move(shape));
}

// Rank-2 transpose.
inline Var transpose(const Var& x) {
  require_rank(x.value(), 2, "transpose");
  const int r = x.dim(0), c = x.dim(1);
  std::vector<std::size_t> idx(x.size());
  for (int j = 0; j < c; ++j)
    for (int i = 0; i < r; ++i) idx[static_cast<std::size_t>(j) * r + i] = static_cast<std::size_t>(i) * c + j;
  return gather(x, std::move(idx), {c, r});
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
  require_rank(a.value(), 2, "matmul lhs");
  require_rank(b.value(), 2, "matmul rhs");
  const int M = a.dim(0), K = a.dim(1), N = b.dim(1);
  if (b.dim(0) != K) throw ShapeError("matmul: inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor out({M, N});
  detail::gemm_nn(M, N, K, a.value().data(), b.value().data(), out.data());
  return make_op(std::move(out), {a, b}, [M, N, K](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) detail::gemm_nt(M, K, N, self.grad.data(), pb.value.data(), pa.grad_buffer().data());
    if (pb.requires_grad) detail::gemm_tn(K, N, M, pa.value.data(), self.grad.data(), pb.grad_buffer().data());
  });
}

// x[R,in] -> x W^T + b, W[out,in], b[out] (b may be undefined).
inline Var affine(const Var& x, const Var& w, const Var& b) {
  require_rank(x.value(), 2, "affine input");
  require_rank(w.value(), 2, "affine weight");
  const int R = x.dim(0), in = x.dim(1), outd = w.dim(0);
  if (w.dim(1) != in) throw ShapeError("affine: input width " + std::to_string(in) + " vs weight " + shape_str(w.shape()));
  if (b.defined() && b.shape() != Shape{outd}) throw ShapeError("affine: bias shape " + shape_str(b.shape()));
  Tensor out({R, outd});
  detail::gemm_nt(R, outd, in, x.value().data(), w.value().data(), out.data());
  if (b.defined()) {
    for (int r = 0; r < R; ++r)
      for (int o = 0; o < outd; ++o) out.at(r, o) += b.value()[static_cast<std::size_t>(o)];
  }
  std::vector<Var> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return make_op(std::move(out), parents, [R, in, outd](Node& self) {
    Node& px = parent(self, 0);
    Node& pw = parent(self, 1);
    if (px.requires_grad) detail::gemm_nn(R, in, outd, self.grad.data(), pw.value.data(), px.grad_buffer().data());
    if (pw.requires_grad) detail::gemm_tn(outd, in, R, self.grad.data(), px.value.data(), pw.grad_buffer().data());
    if (self.parents.size() > 2 && parent(self, 2).requires_grad) {
      Tensor& gb = parent(self, 2).grad_buffer();
      for (int r = 0; r < R; ++r)
        for (int o = 0; o < outd; ++o) gb[static_cast<std::size_t>(o)] += self.grad[static_cast<std::size_t>(r) * outd + o];
    }
  });
}

// Softmax over the last axis of a rank-2 tensor.
inline Var softmax_rows(const Var& x) {
  require_rank(x.value(), 2, "softmax_rows");
  const int R = x.dim(0), C = x.dim(1);
  Tensor out({R, C});
  for (int r = 0; r < R; ++r) {
    double mx = x.value().at(r, 0);
    for (int c = 1; c < C; ++c) mx = std::max(mx, x.value().at(r, c));
    double z = 0.0;
    for (int c = 0; c < C; ++c) z += (out.at(r, c) = std::exp(x.value().at(r, c) - mx));
    for (int c = 0; c < C; ++c) out.at(r, c) /= z;
  }
  return make_op(std::move(out), {x}, [R, C](Node& self) {
    Tensor& g = parent(self, 0).grad_buffer();
    for (int r = 0; r < R; ++r) {
      double dot = 0.0;
      for (int c = 0; c < C; ++c) dot += self.grad.at(r, c) * self.value.at(r, c);
      for (int c = 0; c < C; ++c) g.at(r, c) += self.value.at(r, c) * (self.grad.at(r, c) - dot);
    }
  });
}

inline Var dot(const Var& a, const Var& b) {
  detail::require_same(a, b, "dot");
  return sum(mul(a, b));
}

// Σ_i weights[i] * maps[i], weights a vector of length maps.size().
inline Var weighted_sum(const std::vector<Var>& maps, const Var& weights) {
  if (maps.empty()) throw ShapeError("weighted_sum of nothing");
  if (weights.size() != maps.size()) throw ShapeError("weighted_sum: weight count differs from map count");
  for (const auto& m : maps) detail::require_same(m, maps[0], "weighted_sum");
  Tensor out(maps[0].shape());
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const double w = weights.value()[i];
    const Tensor& m = maps[i].value();
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += w * m[j];
  }
  std::vector<Var> parents = maps;
  parents.push_back(weights);
  return make_op(std::move(out), parents, [n = maps.size()](Node& self) {
    Node& pw = parent(self, n);
    for (std::size_t i = 0; i < n; ++i) {
      Node& pm = parent(self, i);
      if (pm.requires_grad) {
        Tensor& g = pm.grad_buffer();
        const double w = pw.value[i];
        for (std::size_t j = 0; j < g.size(); ++j) g[j] += w * self.grad[j];
      }
      if (pw.requires_grad) {
        double acc = 0.0;
        for (std::size_t j = 0; j < self.grad.size(); ++j) acc += pm.value[j] * self.grad[j];
        pw.grad_buffer()[i] += acc;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution and spatial ops on (C, H, W) maps
// ---------------------------------------------------------------------------

struct ConvSpec {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

namespace detail {

inline void im2col(const double* x, int cin, int H, int W, int k, int stride, int pad, int Ho, int Wo,
                   double* col) {
  const int n = Ho * Wo;
  for (int c = 0; c < cin; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        double* row = col + static_cast<std::size_t>((c * k + ky) * k + kx) * n;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            row[oy * Wo + ox] = (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                    ? x[(static_cast<std::size_t>(c) * H + iy) * W + ix]
                                    : 0.0;
          }
        }
      }
}

inline void col2im(const double* col, int cin, int H, int W, int k, int stride, int pad, int Ho, int Wo,
                   double* x) {
  const int n = Ho * Wo;
  for (int c = 0; c < cin; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const double* row = col + static_cast<std::size_t>((c * k + ky) * k + kx) * n;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) x[(static_cast<std::size_t>(c) * H + iy) * W + ix] += row[oy * Wo + ox];
          }
        }
      }
}

}  // namespace detail

// x (Cin, H, W), w (Cout, Cin/groups, k, k), b (Cout) or undefined; zero padding.
inline Var conv2d(const Var& x, const Var& w, const Var& b, ConvSpec spec) {
  require_rank(x.value(), 3, "conv2d input");
  require_rank(w.value(), 4, "conv2d weight");
  const int cin = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int cout = w.dim(0), k = w.dim(2), G = spec.groups;
  if (G < 1 || cin % G != 0 || cout % G != 0) throw ShapeError("conv2d: channels not divisible by groups");
  const int cin_g = cin / G, cout_g = cout / G;
  if (w.dim(1) != cin_g || w.dim(3) != k) {
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " does not fit input " + shape_str(x.shape()));
  }
  if (b.defined() && b.shape() != Shape{cout}) throw ShapeError("conv2d: bias shape " + shape_str(b.shape()));
  const int Ho = (H + 2 * spec.padding - k) / spec.stride + 1;
  const int Wo = (W + 2 * spec.padding - k) / spec.stride + 1;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d: empty output for input " + shape_str(x.shape()));

  const int n = Ho * Wo;
  const int rows = cin_g * k * k;
  const bool pointwise = (k == 1 && spec.stride == 1 && spec.padding == 0);
  Tensor out({cout, Ho, Wo});
  std::vector<double> col(pointwise ? 0 : static_cast<std::size_t>(rows) * n);
  for (int g = 0; g < G; ++g) {
    const double* xg = x.value().data() + static_cast<std::size_t>(g) * cin_g * H * W;
    const double* src = xg;
    if (!pointwise) {
      detail::im2col(xg, cin_g, H, W, k, spec.stride, spec.padding, Ho, Wo, col.data());
      src = col.data();
    }
    detail::gemm_nn(cout_g, n, rows, w.value().data() + static_cast<std::size_t>(g) * cout_g * rows, src,
                    out.data() + static_cast<std::size_t>(g) * cout_g * n);
  }
  if (b.defined()) {
    for (int c = 0; c < cout; ++c) {
      double* o = out.data() + static_cast<std::size_t>(c) * n;
      for (int i = 0; i < n; ++i) o[i] += b.value()[static_cast<std::size_t>(c)];
    }
  }

  std::vector<Var> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return make_op(std::move(out), parents, [=](Node& self) {
    Node& px = parent(self, 0);
    Node& pw = parent(self, 1);
    std::vector<double> colbuf(pointwise ? 0 : static_cast<std::size_t>(rows) * n);
    for (int g = 0; g < G; ++g) {
      const double* gout = self.grad.data() + static_cast<std::size_t>(g) * cout_g * n;
      const double* xg = px.value.data() + static_cast<std::size_t>(g) * cin_g * H * W;
      if (pw.requires_grad) {
        const double* src = xg;
        if (!pointwise) {
          detail::im2col(xg, cin_g, H, W, k, spec.stride, spec.padding, Ho, Wo, colbuf.data());
          src = colbuf.data();
        }
        detail::gemm_nt(cout_g, rows, n, gout, src,
                        pw.grad_buffer().data() + static_cast<std::size_t>(g) * cout_g * rows);
      }
      if (px.requires_grad) {
        const double* wg = pw.value.data() + static_cast<std::size_t>(g) * cout_g * rows;
        double* gx = px.grad_buffer().data() + static_cast<std::size_t>(g) * cin_g * H * W;
        if (pointwise) {
          detail::gemm_tn(rows, n, cout_g, wg, gout, gx);
        } else {
          std::fill(colbuf.begin(), colbuf.end(), 0.0);
          detail::gemm_tn(rows, n, cout_g, wg, gout, colbuf.data());
          detail::col2im(colbuf.data(), cin_g, H, W, k, spec.stride, spec.padding, Ho, Wo, gx);
        }
      }
    }
    if (self.parents.size() > 2 && parent(self, 2).requires_grad) {
      Tensor& gb = parent(self, 2).grad_buffer();
      for (int c = 0; c < cout; ++c) {
        const double* go = self.grad.data() + static_cast<std::size_t>(c) * n;
        double acc = 0.0;
        for (int i = 0; i < n; ++i) acc += go[i];
        gb[static_cast<std::size_t>(c)] += acc;
      }
    }
  });
}

namespace detail {

// Normalizes `count` groups, each a strided set of elements, with per-channel affine.
// Element j of group g sits at base(g) + offsets[j]; channel_of maps it to its affine channel.
struct NormPlan {
  std::vector<std::vector<std::size_t>> members;
  std::vector<std::vector<int>> channel;
};

inline Var normalize(const Var& x, const Var& gamma, const Var& beta, double eps, NormPlan plan) {
  Tensor out(x.shape());
  std::vector<double> inv_std(plan.members.size());
  Tensor xhat(x.shape());
  for (std::size_t g = 0; g < plan.members.size(); ++g) {
    const auto& idx = plan.members[g];
    const double m = static_cast<double>(idx.size());
    double mu = 0.0;
    for (auto i : idx) mu += x.value()[i];
    mu /= m;
    double var = 0.0;
    for (auto i : idx) var += (x.value()[i] - mu) * (x.value()[i] - mu);
    var /= m;
    inv_std[g] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const auto i = idx[j];
      const int c = plan.channel[g][j];
      xhat[i] = (x.value()[i] - mu) * inv_std[g];
      out[i] = gamma.value()[static_cast<std::size_t>(c)] * xhat[i] + beta.value()[static_cast<std::size_t>(c)];
    }
  }
  return make_op(std::move(out), {x, gamma, beta},
                 [plan = std::move(plan), inv_std = std::move(inv_std), xhat = std::move(xhat)](Node& self) {
                   Node& px = parent(self, 0);
                   Node& pg = parent(self, 1);
                   Node& pb = parent(self, 2);
                   for (std::size_t g = 0; g < plan.members.size(); ++g) {
                     const auto& idx = plan.members[g];
                     const double m = static_cast<double>(idx.size());
                     double sum_d = 0.0, sum_dx = 0.0;
                     for (std::size_t j = 0; j < idx.size(); ++j) {
                       const auto i = idx[j];
                       const int c = plan.channel[g][j];
                       const double d = self.grad[i] * pg.value[static_cast<std::size_t>(c)];
                       sum_d += d;
                       sum_dx += d * xhat[i];
                       if (pg.requires_grad) pg.grad_buffer()[static_cast<std::size_t>(c)] += self.grad[i] * xhat[i];
                       if (pb.requires_grad) pb.grad_buffer()[static_cast<std::size_t>(c)] += self.grad[i];
                     }
                     if (!px.requires_grad) continue;
                     Tensor& gx = px.grad_buffer();
                     for (std::size_t j = 0; j < idx.size(); ++j) {
                       const auto i = idx[j];
                       const int c = plan.channel[g][j];
                       const double d = self.grad[i] * pg.value[static_cast<std::size_t>(c)];
                       gx[i] += inv_std[g] * (d - sum_d / m - xhat[i] * sum_dx / m);
                     }
                   }
                 });
}

}  // namespace detail

// Group normalization over (C/groups, H, W) blocks with per-channel gamma/beta.
inline Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, double eps = 1e-5) {
  require_rank(x.value(), 3, "group_norm");
  const int C = x.dim(0), HW = x.dim(1) * x.dim(2);
  if (groups < 1 || C % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) throw ShapeError("group_norm: affine shape");
  const int cg = C / groups;
  detail::NormPlan plan;
  plan.members.resize(static_cast<std::size_t>(groups));
  plan.channel.resize(static_cast<std::size_t>(groups));
  for (int g = 0; g < groups; ++g) {
    for (int c = g * cg; c < (g + 1) * cg; ++c)
      for (int i = 0; i < HW; ++i) {
        plan.members[static_cast<std::size_t>(g)].push_back(static_cast<std::size_t>(c) * HW + i);
        plan.channel[static_cast<std::size_t>(g)].push_back(c);
      }
  }
  return detail::normalize(x, gamma, beta, eps, std::move(plan));
}

// Layer normalization across channels, independently at every spatial location.
inline Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  require_rank(x.value(), 3, "layer_norm_channels");
  const int C = x.dim(0), HW = x.dim(1) * x.dim(2);
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) throw ShapeError("layer_norm: affine shape");
  detail::NormPlan plan;
  plan.members.resize(static_cast<std::size_t>(HW));
  plan.channel.resize(static_cast<std::size_t>(HW));
  for (int i = 0; i < HW; ++i)
    for (int c = 0; c < C; ++c) {
      plan.members[static_cast<std::size_t>(i)].push_back(static_cast<std::size_t>(c) * HW + i);
      plan.channel[static_cast<std::size_t>(i)].push_back(c);
    }
  return detail::normalize(x, gamma, beta, eps, std::move(plan));
}

// Average pooling with an s x s window and stride s.
inline Var avg_pool(const Var& x, int s) {
  require_rank(x.value(), 3, "avg_pool");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (s < 1 || H % s != 0 || W % s != 0) {
    throw ShapeError("avg_pool: ratio " + std::to_string(s) + " does not divide " + shape_str(x.shape()));
  }
  if (s == 1) return x;
  const int Ho = H / s, Wo = W / s;
  const double inv = 1.0 / (s * s);
  Tensor out({C, Ho, Wo});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx) out.at(c, y / s, xx / s) += x.value().at(c, y, xx) * inv;
  return make_op(std::move(out), {x}, [=](Node& self) {
    Tensor& g = parent(self, 0).grad_buffer();
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) g.at(c, y, xx) += self.grad.at(c, y / s, xx / s) * inv;
  });
}

inline Var upsample_nearest(const Var& x, int factor) {
  require_rank(x.value(), 3, "upsample_nearest");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  std::vector<std::size_t> idx;
  idx.reserve(static_cast<std::size_t>(C) * H * W * factor * factor);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H * factor; ++y)
      for (int xx = 0; xx < W * factor; ++xx)
        idx.push_back((static_cast<std::size_t>(c) * H + y / factor) * W + xx / factor);
  return gather(x, std::move(idx), {C, H * factor, W * factor});
}

// (C, H, W) -> (C): spatial mean.
inline Var global_avg_pool(const Var& x) {
  require_rank(x.value(), 3, "global_avg_pool");
  const int C = x.dim(0), HW = x.dim(1) * x.dim(2);
  Tensor out({C});
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    for (int i = 0; i < HW; ++i) s += x.value()[static_cast<std::size_t>(c) * HW + i];
    out[static_cast<std::size_t>(c)] = s / HW;
  }
  return make_op(std::move(out), {x}, [C, HW](Node& self) {
    Tensor& g = parent(self, 0).grad_buffer();
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < HW; ++i) g[static_cast<std::size_t>(c) * HW + i] += self.grad[static_cast<std::size_t>(c)] / HW;
  });
}

// Reorders channels: output channel j is input channel perm[j].
inline Var permute_channels(const Var& x, const std::vector<int>& perm) {
  require_rank(x.value(), 3, "permute_channels");
  const int C = x.dim(0);
  const std::size_t HW = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  if (static_cast<int>(perm.size()) != C) throw ShapeError("permute_channels: permutation length");
  std::vector<std::size_t> idx(x.size());
  for (int j = 0; j < C; ++j)
    for (std::size_t i = 0; i < HW; ++i) idx[static_cast<std::size_t>(j) * HW + i] = static_cast<std::size_t>(perm[static_cast<std::size_t>(j)]) * HW + i;
  return gather(x, std::move(idx), x.shape());
}

// ---------------------------------------------------------------------------
// RoI alignment
// ---------------------------------------------------------------------------

using Box4 = std::array<double, 4>;

struct RoiAlignSpec {
  double spatial_scale = 1.0;
  int output_size = 7;
  int sampling_ratio = 2;
};

namespace detail {

struct Tap {
  std::size_t offset;
  double weight;
};

// Bilinear taps for a continuous location (x, y) in cell-center coordinates.
inline void bilinear_taps(int H, int W, double y, double x, double w, std::vector<Tap>& taps) {
  if (y < -1.0 || y > H || x < -1.0 || x > W) return;
  y = std::max(y, 0.0);
  x = std::max(x, 0.0);
  int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
  int y1, x1;
  if (y0 >= H - 1) {
    y0 = y1 = H - 1;
    y = y0;
  } else {
    y1 = y0 + 1;
  }
  if (x0 >= W - 1) {
    x0 = x1 = W - 1;
    x = x0;
  } else {
    x1 = x0 + 1;
  }
  const double ly = y - y0, lx = x - x0, hy = 1.0 - ly, hx = 1.0 - lx;
  taps.push_back({static_cast<std::size_t>(y0) * W + x0, w * hy * hx});
  taps.push_back({static_cast<std::size_t>(y0) * W + x1, w * hy * lx});
  taps.push_back({static_cast<std::size_t>(y1) * W + x0, w * ly * hx});
  taps.push_back({static_cast<std::size_t>(y1) * W + x1, w * ly * lx});
}

}  // namespace detail

// Pixel-aligned RoI Align: boxes are image-space [x1, y1, x2, y2]; output (R, C*P*P),
// column c*P*P + py*P + px.
inline Var roi_align(const Var& x, const std::vector<Box4>& boxes, RoiAlignSpec spec) {
  require_rank(x.value(), 3, "roi_align");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int P = spec.output_size, S = spec.sampling_ratio;
  const int R = static_cast<int>(boxes.size());
  const std::size_t HW = static_cast<std::size_t>(H) * W;

  // taps[r * P * P + bin]
  std::vector<std::vector<detail::Tap>> taps(static_cast<std::size_t>(R) * P * P);
  for (int r = 0; r < R; ++r) {
    const Box4& b = boxes[static_cast<std::size_t>(r)];
    if (!(b[2] > b[0]) || !(b[3] > b[1])) throw DegenerateBox("roi_align: box has no area");
    const double x0 = b[0] * spec.spatial_scale - 0.5, y0 = b[1] * spec.spatial_scale - 0.5;
    const double bw = (b[2] - b[0]) * spec.spatial_scale / P, bh = (b[3] - b[1]) * spec.spatial_scale / P;
    const double w = 1.0 / (S * S);
    for (int py = 0; py < P; ++py)
      for (int px = 0; px < P; ++px) {
        auto& t = taps[(static_cast<std::size_t>(r) * P + py) * P + px];
        for (int iy = 0; iy < S; ++iy)
          for (int ix = 0; ix < S; ++ix) {
            const double sy = y0 + py * bh + (iy + 0.5) * bh / S;
            const double sx = x0 + px * bw + (ix + 0.5) * bw / S;
            detail::bilinear_taps(H, W, sy, sx, w, t);
          }
      }
  }

  const int cols = C * P * P;
  Tensor out({R, cols});
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) {
      const double* xc = x.value().data() + static_cast<std::size_t>(c) * HW;
      for (int bin = 0; bin < P * P; ++bin) {
        double acc = 0.0;
        for (const auto& t : taps[static_cast<std::size_t>(r) * P * P + bin]) acc += t.weight * xc[t.offset];
        out.at(r, c * P * P + bin) = acc;
      }
    }
  return make_op(std::move(out), {x}, [=, taps = std::move(taps)](Node& self) {
    Tensor& g = parent(self, 0).grad_buffer();
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) {
        double* gc = g.data() + static_cast<std::size_t>(c) * HW;
        for (int bin = 0; bin < P * P; ++bin) {
          const double d = self.grad.at(r, c * P * P + bin);
          if (d == 0.0) continue;
          for (const auto& t : taps[static_cast<std::size_t>(r) * P * P + bin]) gc[t.offset] += t.weight * d;
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Losses (all return shape [1])
// ---------------------------------------------------------------------------

// Binary cross-entropy on probabilities clamped to [eps, 1-eps]; Σ w_j * bce_j / normalizer.
inline Var bce_on_probabilities(const Var& p, std::vector<double> targets, std::vector<double> weights,
                                double normalizer, double eps = 1e-7) {
  if (targets.size() != p.size() || weights.size() != p.size()) throw ShapeError("bce: length mismatch");
  double loss = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (weights[i] == 0.0) continue;
    const double q = std::clamp(p.value()[i], eps, 1.0 - eps);
    loss -= weights[i] * (targets[i] * std::log(q) + (1.0 - targets[i]) * std::log(1.0 - q));
  }
  if (normalizer > 0.0) loss /= normalizer;
  return make_op(Tensor::scalar(loss), {p}, [=](Node& self) {
    Node& pp = parent(self, 0);
    Tensor& g = pp.grad_buffer();
    const double d = self.grad[0] / (normalizer > 0.0 ? normalizer : 1.0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = pp.value[i];
      if (weights[i] == 0.0 || v < eps || v > 1.0 - eps) continue;
      g[i] -= d * weights[i] * (targets[i] / v - (1.0 - targets[i]) / (1.0 - v));
    }
  });
}

// Sigmoid cross-entropy on logits; Σ w_j * loss_j / normalizer.
inline Var bce_with_logits(const Var& logits, std::vector<double> targets, std::vector<double> weights,
                           double normalizer) {
  if (targets.size() != logits.size() || weights.size() != logits.size()) throw ShapeError("bce_with_logits: length mismatch");
  double loss = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (weights[i] == 0.0) continue;
    const double z = logits.value()[i];
    loss += weights[i] * (std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z))));
  }
  if (normalizer > 0.0) loss /= normalizer;
  return make_op(Tensor::scalar(loss), {logits}, [=](Node& self) {
    Node& pz = parent(self, 0);
    Tensor& g = pz.grad_buffer();
    const double d = self.grad[0] / (normalizer > 0.0 ? normalizer : 1.0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (weights[i] == 0.0) continue;
      g[i] += d * weights[i] * (detail::sigmoid(pz.value[i]) - targets[i]);
    }
  });
}

// Softmax cross-entropy over rows of logits (R, K); Σ_r -log p[r, label_r] / normalizer.
inline Var softmax_cross_entropy(const Var& logits, std::vector<int> labels, double normalizer) {
  require_rank(logits.value(), 2, "softmax_cross_entropy");
  const int R = logits.dim(0), K = logits.dim(1);
  if (static_cast<int>(labels.size()) != R) throw ShapeError("softmax_cross_entropy: label count");
  Tensor prob({R, K});
  double loss = 0.0;
  for (int r = 0; r < R; ++r) {
    double mx = logits.value().at(r, 0);
    for (int k = 1; k < K; ++k) mx = std::max(mx, logits.value().at(r, k));
    double z = 0.0;
    for (int k = 0; k < K; ++k) z += std::exp(logits.value().at(r, k) - mx);
    for (int k = 0; k < K; ++k) prob.at(r, k) = std::exp(logits.value().at(r, k) - mx) / z;
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= K) throw ShapeError("softmax_cross_entropy: label out of range");
    loss -= logits.value().at(r, y) - mx - std::log(z);
  }
  const double norm = normalizer > 0.0 ? normalizer : 1.0;
  loss /= norm;
  return make_op(Tensor::scalar(loss), {logits}, [=, prob = std::move(prob)](Node& self) {
    Tensor& g = parent(self, 0).grad_buffer();
    const double d = self.grad[0] / norm;
    for (int r = 0; r < R; ++r)
      for (int k = 0; k < K; ++k)
        g.at(r, k) += d * (prob.at(r, k) - (labels[static_cast<std::size_t>(r)] == k ? 1.0 : 0.0));
  });
}

inline double smooth_l1_value(double x, double beta) {
  const double a = std::abs(x);
  return a < beta ? 0.5 * x * x / beta : a - 0.5 * beta;
}

// Σ smooth_l1(pred - target) / normalizer over every element.
inline Var smooth_l1(const Var& pred, const Tensor& target, double beta, double normalizer) {
  require_shape(target, pred.shape(), "smooth_l1 target");
  double loss = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) loss += smooth_l1_value(pred.value()[i] - target[i], beta);
  const double norm = normalizer > 0.0 ? normalizer : 1.0;
  loss /= norm;
  return make_op(Tensor::scalar(loss), {pred}, [=](Node& self) {
    Node& pp = parent(self, 0);
    Tensor& g = pp.grad_buffer();
    const double d = self.grad[0] / norm;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double r = pp.value[i] - target[i];
      g[i] += d * (std::abs(r) < beta ? r / beta : (r > 0 ? 1.0 : -1.0));
    }
  });
}

}  // namespace tbattr
