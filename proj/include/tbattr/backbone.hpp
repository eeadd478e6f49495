#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tbattr/ops.hpp"
#include "tbattr/params.hpp"

namespace tbattr {

inline constexpr int kMinLevel = 2;
inline constexpr int kMaxLevel = 5;

struct FeatureMap {
  Var values;  // (C, H, W)
  int stride = 1;

  int channels() const { return values.dim(0); }
  int height() const { return values.dim(1); }
  int width() const { return values.dim(2); }
};

// Level l in [2, 5] has stride 2^l.
using FeaturePyramid = std::map<int, FeatureMap>;

inline const FeatureMap& level_of(const FeaturePyramid& p, int level) {
  auto it = p.find(level);
  if (it == p.end()) throw MissingLevel(level);
  return it->second;
}

struct BackboneConfig {
  std::string preset = "tiny";
  int stem_width = 8;
  std::vector<int> widths{8, 16, 32, 64};  // output channels of C2..C5
  std::vector<int> depths{1, 1, 1, 1};     // residual blocks per stage
  bool bottleneck = false;
  int fpn_channels = 64;
};

inline BackboneConfig backbone_preset(const std::string& name, int width = 8, int depth = 1) {
  BackboneConfig cfg;
  cfg.preset = name;
  if (name == "tiny") {
    cfg.stem_width = width;
    cfg.widths = {width, 2 * width, 4 * width, 8 * width};
    cfg.depths = {depth, depth, depth, depth};
    cfg.fpn_channels = 64;
  } else if (name == "resnet50_like") {
    cfg.stem_width = 64;
    cfg.widths = {256, 512, 1024, 2048};
    cfg.depths = {3, 4, 6, 3};
    cfg.bottleneck = true;
    cfg.fpn_channels = 256;
  } else {
    throw ConfigError("unknown backbone preset '" + name + "' (expected tiny or resnet50_like)");
  }
  return cfg;
}

namespace detail {

inline int norm_groups(int channels) { return channels % 4 == 0 ? 4 : 1; }

// conv (no bias) -> group norm, parameters registered under prefix.
struct ConvNorm {
  std::string prefix;
  ConvSpec spec;
  int out = 0;

  ConvNorm() = default;
  ConvNorm(ParamStore& ps, Rng& rng, std::string name, int in, int out_channels, int k, int stride)
      : prefix(std::move(name)), spec{stride, k / 2, 1}, out(out_channels) {
    ps.add(prefix + ".w", he_conv(out, in, k, rng));
    ps.add(prefix + ".gn.gamma", Tensor({out}, 1.0));
    ps.add(prefix + ".gn.beta", Tensor({out}, 0.0));
  }

  Var operator()(const ParamStore& ps, const Var& x) const {
    Var y = conv2d(x, ps.get(prefix + ".w"), Var(), spec);
    return group_norm(y, norm_groups(out), ps.get(prefix + ".gn.gamma"), ps.get(prefix + ".gn.beta"));
  }
};

struct ResidualBlock {
  std::vector<ConvNorm> main;
  std::optional<ConvNorm> shortcut;

  Var operator()(const ParamStore& ps, const Var& x) const {
    Var y = x;
    for (std::size_t i = 0; i < main.size(); ++i) {
      y = main[i](ps, y);
      if (i + 1 < main.size()) y = relu(y);
    }
    return relu(add(y, shortcut ? (*shortcut)(ps, x) : x));
  }
};

}  // namespace detail

// Residual network producing C2..C5 at strides 4, 8, 16, 32.
class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneConfig& cfg, ParamStore& ps, Rng& rng, const std::string& prefix = "backbone") : cfg_(cfg) {
    stem_.emplace_back(ps, rng, prefix + ".stem0", 1, cfg.stem_width, 3, 2);
    stem_.emplace_back(ps, rng, prefix + ".stem1", cfg.stem_width, cfg.stem_width, 3, 2);
    int in = cfg.stem_width;
    for (int s = 0; s < 4; ++s) {
      const int out = cfg.widths[static_cast<std::size_t>(s)];
      std::vector<detail::ResidualBlock> blocks;
      for (int b = 0; b < cfg.depths[static_cast<std::size_t>(s)]; ++b) {
        const int stride = (s > 0 && b == 0) ? 2 : 1;
        const std::string name = prefix + ".c" + std::to_string(s + 2) + ".b" + std::to_string(b);
        detail::ResidualBlock blk;
        if (cfg.bottleneck) {
          const int mid = std::max(1, out / 4);
          blk.main.emplace_back(ps, rng, name + ".conv0", in, mid, 1, 1);
          blk.main.emplace_back(ps, rng, name + ".conv1", mid, mid, 3, stride);
          blk.main.emplace_back(ps, rng, name + ".conv2", mid, out, 1, 1);
        } else {
          blk.main.emplace_back(ps, rng, name + ".conv0", in, out, 3, stride);
          blk.main.emplace_back(ps, rng, name + ".conv1", out, out, 3, 1);
        }
        if (stride != 1 || in != out) blk.shortcut.emplace(ps, rng, name + ".proj", in, out, 1, stride);
        blocks.push_back(std::move(blk));
        in = out;
      }
      stages_.push_back(std::move(blocks));
    }
  }

  const BackboneConfig& config() const { return cfg_; }

  FeaturePyramid forward(const ParamStore& ps, const Var& image) const {
    require_rank(image.value(), 3, "backbone input");
    const int H = image.dim(1), W = image.dim(2);
    if (H % 32 != 0 || W % 32 != 0 || H == 0 || W == 0) {
      throw ShapeError("backbone input " + std::to_string(H) + "x" + std::to_string(W) + " is not divisible by 32");
    }
    Var x = image;
    for (const auto& s : stem_) x = relu(s(ps, x));
    FeaturePyramid out;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      for (const auto& blk : stages_[s]) x = blk(ps, x);
      const int level = static_cast<int>(s) + kMinLevel;
      out[level] = FeatureMap{x, 1 << level};
    }
    return out;
  }

 private:
  BackboneConfig cfg_;
  std::vector<detail::ConvNorm> stem_;
  std::vector<std::vector<detail::ResidualBlock>> stages_;
};

inline FeaturePyramid extract_stage_features(const Backbone& backbone, const ParamStore& ps, const Var& image) {
  return backbone.forward(ps, image);
}

// Top-down merge: P5 = lateral(C5); P_l = lateral(C_l) + upsample2x(P_{l+1}).
class FeaturePyramidNetwork {
 public:
  FeaturePyramidNetwork() = default;
  FeaturePyramidNetwork(const std::vector<int>& in_channels, int out_channels, ParamStore& ps, Rng& rng,
                        const std::string& prefix = "fpn")
      : prefix_(prefix), out_(out_channels) {
    for (int l = kMinLevel; l <= kMaxLevel; ++l) {
      const int in = in_channels[static_cast<std::size_t>(l - kMinLevel)];
      ps.add(name(l, "w"), normal_tensor({out_channels, in, 1, 1}, std::sqrt(1.0 / in), rng));
      ps.add(name(l, "b"), Tensor({out_channels}));
    }
  }

  int channels() const { return out_; }

  FeaturePyramid forward(const ParamStore& ps, const FeaturePyramid& stages) const {
    FeaturePyramid out;
    Var above;
    for (int l = kMaxLevel; l >= kMinLevel; --l) {
      const FeatureMap& c = level_of(stages, l);
      Var lateral = conv2d(c.values, ps.get(name(l, "w")), ps.get(name(l, "b")), {});
      Var p = above.defined() ? add(lateral, upsample_nearest(above, 2)) : lateral;
      out[l] = FeatureMap{p, c.stride};
      above = p;
    }
    return out;
  }

 private:
  std::string name(int level, const char* what) const { return prefix_ + ".lateral" + std::to_string(level) + "." + what; }

  std::string prefix_;
  int out_ = 0;
};

inline FeaturePyramid build_fpn_pyramid(const FeaturePyramidNetwork& fpn, const ParamStore& ps,
                                        const FeaturePyramid& stages) {
  return fpn.forward(ps, stages);
}

}  // namespace tbattr
