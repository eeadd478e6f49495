#pragma once

// Independent reference implementations used as test oracles. Plain loops over raw
// values only; nothing here calls the library's differentiable ops.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tbattr/tbattr.hpp"

namespace oracle {

using tbattr::Tensor;

inline double cell(const Tensor& t, int c, int y, int x) { return t.at(c, y, x); }

// Mean over s x s windows.
inline Tensor avg_pool(const Tensor& x, int s) {
  const int C = x.dim(0), H = x.dim(1) / s, W = x.dim(2) / s;
  Tensor out({C, H, W});
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        double acc = 0;
        for (int a = 0; a < s; ++a)
          for (int b = 0; b < s; ++b) acc += cell(x, c, i * s + a, j * s + b);
        out.at(c, i, j) = acc / (s * s);
      }
  return out;
}

// Direct convolution with zero padding.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, int stride, int pad, int groups) {
  const int Cin = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int Cout = w.dim(0), cpg = w.dim(1), k = w.dim(2);
  const int Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  const int out_per_group = Cout / groups;
  Tensor out({Cout, Ho, Wo});
  for (int o = 0; o < Cout; ++o) {
    const int g = o / out_per_group;
    for (int i = 0; i < Ho; ++i)
      for (int j = 0; j < Wo; ++j) {
        double acc = bias ? (*bias)[static_cast<std::size_t>(o)] : 0.0;
        for (int ci = 0; ci < cpg; ++ci)
          for (int a = 0; a < k; ++a)
            for (int b = 0; b < k; ++b) {
              const int y = i * stride + a - pad, xx = j * stride + b - pad;
              if (y < 0 || y >= H || xx < 0 || xx >= W) continue;
              const std::size_t widx = ((static_cast<std::size_t>(o) * cpg + ci) * k + a) * k + b;
              acc += w[widx] * cell(x, g * cpg + ci, y, xx);
            }
        out.at(o, i, j) = acc;
      }
  }
  (void)Cin;
  return out;
}

inline Tensor pointwise(const Tensor& x, const Tensor& w, const Tensor& b) { return conv2d(x, w, &b, 1, 0, 1); }

// softmax(q k^T / sqrt(d)) v with explicit loops; q (n, d), k and v (m, d) as row lists.
inline std::vector<std::vector<double>> attention(const std::vector<std::vector<double>>& q,
                                                  const std::vector<std::vector<double>>& k,
                                                  const std::vector<std::vector<double>>& v) {
  const std::size_t d = q.empty() ? 0 : q[0].size();
  std::vector<std::vector<double>> out(q.size(), std::vector<double>(v.empty() ? 0 : v[0].size(), 0.0));
  for (std::size_t i = 0; i < q.size(); ++i) {
    std::vector<double> logit(k.size());
    double mx = -1e300;
    for (std::size_t j = 0; j < k.size(); ++j) {
      double dotp = 0;
      for (std::size_t t = 0; t < d; ++t) dotp += q[i][t] * k[j][t];
      logit[j] = dotp / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, logit[j]);
    }
    double z = 0;
    for (auto& l : logit) z += (l = std::exp(l - mx));
    for (std::size_t j = 0; j < k.size(); ++j)
      for (std::size_t t = 0; t < out[i].size(); ++t) out[i][t] += logit[j] / z * v[j][t];
  }
  return out;
}

// Channels [c0, c0 + n) of a map as token rows in row-major spatial order.
inline std::vector<std::vector<double>> tokens(const Tensor& m, int c0, int n) {
  std::vector<std::vector<double>> rows;
  for (int y = 0; y < m.dim(1); ++y)
    for (int x = 0; x < m.dim(2); ++x) {
      std::vector<double> r;
      for (int c = c0; c < c0 + n; ++c) r.push_back(cell(m, c, y, x));
      rows.push_back(r);
    }
  return rows;
}

// Multi-head cross-attention read straight from the parameter store.
inline Tensor mca(const tbattr::ParamStore& ps, const std::string& prefix, const Tensor& x, const Tensor& y, int s,
                  int head_dim) {
  auto P = [&](const char* n) { return ps.get(prefix + "." + n).value(); };
  const Tensor yd = s > 1 ? avg_pool(y, s) : y;
  const Tensor q = pointwise(x, P("q.w"), P("q.b"));
  const Tensor k = pointwise(yd, P("k.w"), P("k.b"));
  const Tensor v = pointwise(yd, P("v.w"), P("v.b"));
  const int E = q.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor merged({E, H, W});
  for (int h = 0; h < E / head_dim; ++h) {
    auto o = attention(tokens(q, h * head_dim, head_dim), tokens(k, h * head_dim, head_dim),
                       tokens(v, h * head_dim, head_dim));
    for (int t = 0; t < H * W; ++t)
      for (int c = 0; c < head_dim; ++c) merged.at(h * head_dim + c, t / W, t % W) = o[static_cast<std::size_t>(t)][static_cast<std::size_t>(c)];
  }
  return pointwise(merged, P("phi.w"), P("phi.b"));
}

// Channel concatenation.
inline Tensor concat(const std::vector<Tensor>& xs) {
  int C = 0;
  for (const auto& t : xs) C += t.dim(0);
  Tensor out({C, xs[0].dim(1), xs[0].dim(2)});
  int c0 = 0;
  for (const auto& t : xs) {
    for (int c = 0; c < t.dim(0); ++c)
      for (int y = 0; y < t.dim(1); ++y)
        for (int x = 0; x < t.dim(2); ++x) out.at(c0 + c, y, x) = t.at(c, y, x);
    c0 += t.dim(0);
  }
  return out;
}

inline std::vector<double> gap(const Tensor& m) {
  std::vector<double> g(static_cast<std::size_t>(m.dim(0)), 0.0);
  for (int c = 0; c < m.dim(0); ++c) {
    for (int y = 0; y < m.dim(1); ++y)
      for (int x = 0; x < m.dim(2); ++x) g[static_cast<std::size_t>(c)] += m.at(c, y, x);
    g[static_cast<std::size_t>(c)] /= m.dim(1) * m.dim(2);
  }
  return g;
}

inline std::vector<double> affine(const Tensor& w, const Tensor& b, const std::vector<double>& x) {
  std::vector<double> out(static_cast<std::size_t>(w.dim(0)));
  for (int o = 0; o < w.dim(0); ++o) {
    double acc = b[static_cast<std::size_t>(o)];
    for (int i = 0; i < w.dim(1); ++i) acc += w.at(o, i) * x[static_cast<std::size_t>(i)];
    out[static_cast<std::size_t>(o)] = acc;
  }
  return out;
}

// Per-location normalisation over channels with affine gamma/beta.
inline Tensor layer_norm_channels(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  Tensor out(x.shape());
  const int C = x.dim(0);
  for (int y = 0; y < x.dim(1); ++y)
    for (int xx = 0; xx < x.dim(2); ++xx) {
      double m = 0, v = 0;
      for (int c = 0; c < C; ++c) m += x.at(c, y, xx);
      m /= C;
      for (int c = 0; c < C; ++c) v += (x.at(c, y, xx) - m) * (x.at(c, y, xx) - m);
      v /= C;
      for (int c = 0; c < C; ++c) {
        out.at(c, y, xx) = (x.at(c, y, xx) - m) / std::sqrt(v + eps) * gamma[static_cast<std::size_t>(c)] +
                           beta[static_cast<std::size_t>(c)];
      }
    }
  return out;
}

// A2-Attn composed from the oracles above.
inline std::vector<Tensor> attr_attr(const tbattr::ParamStore& ps, const std::string& prefix,
                                     const std::vector<Tensor>& f, int s, int head_dim) {
  const Tensor y = pointwise(concat(f), ps.get(prefix + ".y.w").value(), ps.get(prefix + ".y.b").value());
  std::vector<Tensor> out;
  for (const auto& fi : f) out.push_back(mca(ps, prefix + ".mca", fi, y, s, head_dim));
  return out;
}

// AT-Attn composed from the oracles above.
inline Tensor attr_tb(const tbattr::ParamStore& ps, const std::string& prefix, const std::vector<Tensor>& f,
                      const Tensor& tb, int s, int head_dim) {
  auto P = [&](const std::string& n) { return ps.get(prefix + "." + n).value(); };
  const auto B = affine(P("tb_proj.w"), P("tb_proj.b"), gap(tb));
  Tensor X(f[0].shape());
  for (const auto& fi : f) {
    const auto A = affine(P("attr_proj.w"), P("attr_proj.b"), gap(fi));
    double si = 0;
    for (std::size_t t = 0; t < A.size(); ++t) si += A[t] * B[t];
    for (std::size_t e = 0; e < X.size(); ++e) X[e] += si * fi[e];
  }
  const Tensor att = mca(ps, prefix + ".mca", X, tb, s, head_dim);
  Tensor out = layer_norm_channels(att, P("norm.gamma"), P("norm.beta"));
  for (std::size_t e = 0; e < out.size(); ++e) out[e] += tb[e];
  return out;
}

// Bilinear sample with zero outside [-1, H] x [-1, W] and edge clamping inside.
inline double bilinear(const Tensor& m, int c, double y, double x) {
  const int H = m.dim(1), W = m.dim(2);
  if (y < -1.0 || y > H || x < -1.0 || x > W) return 0.0;
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
  const double ly = y - y0, lx = x - x0;
  return (1 - ly) * (1 - lx) * m.at(c, y0, x0) + (1 - ly) * lx * m.at(c, y0, x1) + ly * (1 - lx) * m.at(c, y1, x0) +
         ly * lx * m.at(c, y1, x1);
}

// RoI align with half-pixel offset, bins of equal size, ratio x ratio samples per bin.
inline std::vector<double> roi_align(const Tensor& m, const tbattr::Box4& box, double scale, int P, int ratio) {
  const double x0 = box[0] * scale - 0.5, y0 = box[1] * scale - 0.5;
  const double bw = (box[2] - box[0]) * scale / P, bh = (box[3] - box[1]) * scale / P;
  std::vector<double> out;
  for (int c = 0; c < m.dim(0); ++c)
    for (int i = 0; i < P; ++i)
      for (int j = 0; j < P; ++j) {
        double acc = 0;
        for (int a = 0; a < ratio; ++a)
          for (int b = 0; b < ratio; ++b) {
            acc += bilinear(m, c, y0 + i * bh + (a + 0.5) * bh / ratio, x0 + j * bw + (b + 0.5) * bw / ratio);
          }
        out.push_back(acc / (ratio * ratio));
      }
  return out;
}

// AP by explicit enumeration: for every cutoff k the top-k detections are matched from
// scratch, and each recall step is weighted by the best precision at any cutoff whose
// recall is at least as large.
inline double brute_force_ap(const std::vector<std::vector<tbattr::Detection>>& dets,
                             const std::vector<std::vector<tbattr::BoundingBox>>& gts, double thr = 0.5) {
  struct Item {
    double score;
    std::size_t img, idx;
  };
  std::vector<Item> all;
  std::size_t n_gt = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    n_gt += gts[i].size();
    for (std::size_t k = 0; k < dets[i].size(); ++k) all.push_back({dets[i][k].score, i, k});
  }
  if (n_gt == 0) return 0.0;
  // insertion sort: descending score, ties keep input order
  for (std::size_t a = 1; a < all.size(); ++a)
    for (std::size_t b = a; b > 0 && all[b - 1].score < all[b].score; --b) std::swap(all[b - 1], all[b]);

  auto pr_at = [&](std::size_t k) {
    std::vector<std::vector<int>> taken(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) taken[i].assign(gts[i].size(), 0);
    int tp = 0;
    for (std::size_t r = 0; r < k; ++r) {
      const auto& it = all[r];
      int best = -1;
      double best_iou = -1;
      for (std::size_t g = 0; g < gts[it.img].size(); ++g) {
        const auto& a = dets[it.img][it.idx].box;
        const auto& b = gts[it.img][g];
        const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
        const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
        const double inter = iw > 0 && ih > 0 ? iw * ih : 0.0;
        const double u = (a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min) - inter;
        const double v = u > 0 ? inter / u : 0.0;
        if (v > best_iou) {
          best_iou = v;
          best = static_cast<int>(g);
        }
      }
      if (best >= 0 && best_iou >= thr && !taken[it.img][static_cast<std::size_t>(best)]) {
        taken[it.img][static_cast<std::size_t>(best)] = 1;
        ++tp;
      }
    }
    return std::pair<double, double>{static_cast<double>(tp) / n_gt, k ? static_cast<double>(tp) / k : 1.0};
  };

  std::vector<std::pair<double, double>> pts;
  for (std::size_t k = 1; k <= all.size(); ++k) pts.push_back(pr_at(k));
  double ap = 0, prev_r = 0;
  for (const auto& [r, p] : pts) {
    if (r > prev_r) {
      double best_p = 0;
      for (const auto& [r2, p2] : pts)
        if (r2 >= r) best_p = std::max(best_p, p2);
      ap += (r - prev_r) * best_p;
      prev_r = r;
    }
  }
  (void)prev_r;
  return ap;
}

}  // namespace oracle
