#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tbattr/backbone.hpp"

namespace tbattr {

// (d, H, W) -> (H*W, d): the row-major token sequence of a map.
inline Var to_sequence(const Var& map) {
  require_rank(map.value(), 3, "to_sequence");
  return transpose(reshape(map, {map.dim(0), map.dim(1) * map.dim(2)}));
}

// Single head: SoftMax(Q K^T / sqrt(d)) V with the softmax over keys. Inputs are already
// projected maps of d channels; queries keep the full resolution of q_map. Returns (n, d).
inline Var cross_attention_head(const Var& q_map, const Var& k_map, const Var& v_map) {
  require_rank(q_map.value(), 3, "attention query");
  require_rank(k_map.value(), 3, "attention key");
  if (k_map.shape() != v_map.shape()) throw ShapeError("attention: key and value maps differ in shape");
  const int d = q_map.dim(0);
  if (k_map.dim(0) != d) throw ShapeError("attention: query and key head dims differ");
  Var q = to_sequence(q_map);
  Var k = to_sequence(k_map);
  Var v = to_sequence(v_map);
  Var logits = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
  return matmul(softmax_rows(logits), v);
}

// Largest power-of-two ratio <= requested that divides both spatial dims.
inline int effective_downsample(int requested, int H, int W) {
  int s = std::max(1, requested);
  while (s > 1 && (H % s != 0 || W % s != 0 || H / s < 1 || W / s < 1)) s /= 2;
  return s;
}

// Key/value ratio at a pyramid level: base at level 2, halved per level above it.
inline int downsample_for_level(int base, int level) { return std::max(1, base >> (level - kMinLevel)); }

inline Var kv_downsample(const Var& y, int s) { return avg_pool(y, s); }

// Multi-head cross-attention: 1x1 projections of x to queries and of the downsampled y
// to keys/values, heads of width head_dim, concatenated and passed through the output
// projection Phi (1x1, with bias). Output has x's spatial size.
class MultiHeadCrossAttention {
 public:
  MultiHeadCrossAttention() = default;
  MultiHeadCrossAttention(ParamStore& ps, Rng& rng, std::string prefix, int query_channels, int kv_channels,
                          int embed_channels, int out_channels, int head_dim)
      : prefix_(std::move(prefix)), cq_(query_channels), ckv_(kv_channels), embed_(embed_channels),
        out_(out_channels), head_dim_(head_dim) {
    if (head_dim <= 0 || embed_channels % head_dim != 0) {
      throw ConfigError("attention: " + std::to_string(embed_channels) + " channels are not a multiple of head_dim " +
                        std::to_string(head_dim));
    }
    auto proj = [&](const char* n, int in, int out) {
      ps.add(prefix_ + "." + n + ".w", normal_tensor({out, in, 1, 1}, std::sqrt(1.0 / in), rng));
      ps.add(prefix_ + "." + n + ".b", Tensor({out}));
    };
    proj("q", cq_, embed_);
    proj("k", ckv_, embed_);
    proj("v", ckv_, embed_);
    proj("phi", embed_, out_);
  }

  int heads() const { return embed_ / head_dim_; }
  int head_dim() const { return head_dim_; }
  const std::string& prefix() const { return prefix_; }

  Var forward(const ParamStore& ps, const Var& x, const Var& y, int s) const {
    require_rank(x.value(), 3, "attention x");
    require_rank(y.value(), 3, "attention y");
    if (x.dim(0) != cq_ || y.dim(0) != ckv_) {
      throw ShapeError("attention " + prefix_ + ": expected " + std::to_string(cq_) + "/" + std::to_string(ckv_) +
                       " channels, got " + std::to_string(x.dim(0)) + "/" + std::to_string(y.dim(0)));
    }
    const int H = x.dim(1), W = x.dim(2);
    Var yd = kv_downsample(y, s);
    Var q = conv2d(x, ps.get(prefix_ + ".q.w"), ps.get(prefix_ + ".q.b"), {});
    Var k = conv2d(yd, ps.get(prefix_ + ".k.w"), ps.get(prefix_ + ".k.b"), {});
    Var v = conv2d(yd, ps.get(prefix_ + ".v.w"), ps.get(prefix_ + ".v.b"), {});
    std::vector<Var> heads;
    for (int h = 0; h < this->heads(); ++h) {
      const int c0 = h * head_dim_;
      Var o = cross_attention_head(slice(q, c0, head_dim_), slice(k, c0, head_dim_), slice(v, c0, head_dim_));
      heads.push_back(transpose(o));  // (d, n)
    }
    Var merged = reshape(concat(heads), {embed_, H, W});
    return conv2d(merged, ps.get(prefix_ + ".phi.w"), ps.get(prefix_ + ".phi.b"), {});
  }

 private:
  std::string prefix_;
  int cq_ = 0, ckv_ = 0, embed_ = 0, out_ = 0, head_dim_ = 1;
};

inline Var multi_head_cross_attention(const MultiHeadCrossAttention& mca, const ParamStore& ps, const Var& x,
                                      const Var& y, int s) {
  return mca.forward(ps, x, y, s);
}

// A2-Attn: each attribute map queries Y, a 1x1 projection of all attribute maps
// concatenated, down to C_a channels. F_i' = MCA(F_i, Y) with one shared MCA.
class AttrAttrAttention {
 public:
  AttrAttrAttention() = default;
  AttrAttrAttention(ParamStore& ps, Rng& rng, std::string prefix, int n_attributes, int channels, int head_dim)
      : prefix_(std::move(prefix)), n_(n_attributes), c_(channels),
        mca_(ps, rng, prefix_ + ".mca", channels, channels, channels, channels, head_dim) {
    ps.add(prefix_ + ".y.w", normal_tensor({c_, n_ * c_, 1, 1}, std::sqrt(1.0 / (n_ * c_)), rng));
    ps.add(prefix_ + ".y.b", Tensor({c_}));
  }

  const MultiHeadCrossAttention& mca() const { return mca_; }

  Var project(const ParamStore& ps, const std::vector<Var>& features) const {
    return conv2d(concat(features), ps.get(prefix_ + ".y.w"), ps.get(prefix_ + ".y.b"), {});
  }

  std::vector<Var> forward(const ParamStore& ps, const std::vector<Var>& features, int s) const {
    if (static_cast<int>(features.size()) != n_) throw ShapeError("A2-Attn: expected " + std::to_string(n_) + " attribute maps");
    for (const auto& f : features) {
      if (f.shape() != features[0].shape()) throw ShapeError("A2-Attn: attribute maps differ in shape");
    }
    Var y = project(ps, features);
    std::vector<Var> out;
    for (const auto& f : features) out.push_back(mca_.forward(ps, f, y, s));
    return out;
  }

 private:
  std::string prefix_;
  int n_ = 0, c_ = 0;
  MultiHeadCrossAttention mca_;
};

inline std::vector<Var> attr_attr_attention(const AttrAttrAttention& a2, const ParamStore& ps,
                                            const std::vector<Var>& features, int s) {
  return a2.forward(ps, features, s);
}

struct SimilarityWeights {
  std::vector<Var> attribute_vectors;  // A_i
  Var tb_vector;                       // B
  Var weights;                         // s_i = A_i . B, shape (N_a)
};

// A_i = proj_a(GAP(F_i)), B = proj_b(GAP(F_tb)), s_i = A_i . B.
inline SimilarityWeights compute_similarity_weights(const std::vector<Var>& features, const Var& tb_feature,
                                                    const Var& attr_w, const Var& attr_b, const Var& tb_w,
                                                    const Var& tb_b) {
  if (attr_w.dim(0) != tb_w.dim(0)) throw ShapeError("similarity: projection output dims differ");
  auto project = [](const Var& map, const Var& w, const Var& b) {
    Var g = global_avg_pool(map);
    return reshape(affine(reshape(g, {1, g.dim(0)}), w, b), {w.dim(0)});
  };
  SimilarityWeights sw;
  sw.tb_vector = project(tb_feature, tb_w, tb_b);
  std::vector<Var> scores;
  for (const auto& f : features) {
    sw.attribute_vectors.push_back(project(f, attr_w, attr_b));
    scores.push_back(dot(sw.attribute_vectors.back(), sw.tb_vector));
  }
  sw.weights = concat(scores);
  return sw;
}

// AT-Attn: F_tb' = F_tb + LayerNorm(MCA(sum_i s_i F_i, F_tb)).
class AttrTbAttention {
 public:
  AttrTbAttention() = default;
  AttrTbAttention(ParamStore& ps, Rng& rng, std::string prefix, int n_attributes, int attr_channels, int tb_channels,
                  int proj_dim, int head_dim, bool normalize_weights)
      : prefix_(std::move(prefix)), n_(n_attributes), normalize_(normalize_weights),
        mca_(ps, rng, prefix_ + ".mca", attr_channels, tb_channels, tb_channels, tb_channels, head_dim) {
    ps.add(prefix_ + ".attr_proj.w", normal_tensor({proj_dim, attr_channels}, std::sqrt(1.0 / attr_channels), rng));
    ps.add(prefix_ + ".attr_proj.b", Tensor({proj_dim}));
    ps.add(prefix_ + ".tb_proj.w", normal_tensor({proj_dim, tb_channels}, std::sqrt(1.0 / tb_channels), rng));
    ps.add(prefix_ + ".tb_proj.b", Tensor({proj_dim}));
    ps.add(prefix_ + ".norm.gamma", Tensor({tb_channels}, 1.0));
    ps.add(prefix_ + ".norm.beta", Tensor({tb_channels}));
  }

  const MultiHeadCrossAttention& mca() const { return mca_; }
  const std::string& prefix() const { return prefix_; }

  SimilarityWeights similarity(const ParamStore& ps, const std::vector<Var>& features, const Var& tb) const {
    return compute_similarity_weights(features, tb, ps.get(prefix_ + ".attr_proj.w"), ps.get(prefix_ + ".attr_proj.b"),
                                      ps.get(prefix_ + ".tb_proj.w"), ps.get(prefix_ + ".tb_proj.b"));
  }

  // X = sum_i s_i F_i (softmax over i first when normalize_weights is set).
  Var aggregate(const ParamStore& ps, const std::vector<Var>& features, const Var& tb) const {
    Var s = similarity(ps, features, tb).weights;
    if (normalize_) s = reshape(softmax_rows(reshape(s, {1, s.dim(0)})), {s.dim(0)});
    return weighted_sum(features, s);
  }

  Var forward(const ParamStore& ps, const std::vector<Var>& features, const Var& tb, int s) const {
    if (static_cast<int>(features.size()) != n_) throw ShapeError("AT-Attn: expected " + std::to_string(n_) + " attribute maps");
    for (const auto& f : features) {
      if (f.dim(1) != tb.dim(1) || f.dim(2) != tb.dim(2)) throw ShapeError("AT-Attn: attribute and TB maps differ spatially");
    }
    Var x = aggregate(ps, features, tb);
    Var attended = mca_.forward(ps, x, tb, s);
    return add(tb, layer_norm_channels(attended, ps.get(prefix_ + ".norm.gamma"), ps.get(prefix_ + ".norm.beta")));
  }

 private:
  std::string prefix_;
  int n_ = 0;
  bool normalize_ = false;
  MultiHeadCrossAttention mca_;
};

inline Var attr_tb_attention(const AttrTbAttention& at, const ParamStore& ps, const std::vector<Var>& features,
                             const Var& tb_feature, int s) {
  return at.forward(ps, features, tb_feature, s);
}

}  // namespace tbattr
