#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tbattr/backbone.hpp"
#include "tbattr/data_model.hpp"

namespace tbattr {

struct AttributeConfig {
  int n_attributes = kDefaultAttributes;  // N_a
  int channels_per_attribute = 8;         // C_a
  int kernel_size = 3;                    // group convolution kernel
  bool group_conv = true;                 // false: ordinary convolutions, no shuffle

  int total_channels() const { return n_attributes * channels_per_attribute; }
};

// Per-level attribute maps F_1..F_{N_a}, each (C_a, H, W).
using AttributeFeatureSet = std::map<int, std::vector<Var>>;

// Output position k * groups + b takes input channel b * n + k, where n = channels / groups
// (reshape to (groups, n), transpose, flatten).
inline std::vector<int> channel_shuffle_permutation(int channels, int groups) {
  if (groups < 1 || channels % groups != 0) {
    throw ShapeError("channel_shuffle: " + std::to_string(channels) + " channels not divisible by " +
                     std::to_string(groups) + " groups");
  }
  const int n = channels / groups;
  std::vector<int> perm(static_cast<std::size_t>(channels));
  for (int b = 0; b < groups; ++b)
    for (int k = 0; k < n; ++k) perm[static_cast<std::size_t>(k * groups + b)] = b * n + k;
  return perm;
}

inline Var channel_shuffle(const Var& x, int groups) {
  require_rank(x.value(), 3, "channel_shuffle");
  return permute_channels(x, channel_shuffle_permutation(x.dim(0), groups));
}

// 1x1 projection to C_a*N_a channels, then two (group) convolutions with N_a groups,
// channel shuffle after the second. Each conv is followed by group norm (one group
// per attribute) and ReLU.
class AttributeBlock {
 public:
  AttributeBlock() = default;
  AttributeBlock(const AttributeConfig& cfg, int in_channels, ParamStore& ps, Rng& rng, std::string prefix)
      : cfg_(cfg), in_(in_channels), prefix_(std::move(prefix)) {
    if (cfg.n_attributes < 1 || cfg.channels_per_attribute < 1) throw ConfigError("attribute block needs N_a >= 1 and C_a >= 1");
    const int C = cfg.total_channels();
    const int groups = cfg.group_conv ? cfg.n_attributes : 1;
    const int k = cfg.kernel_size;
    ps.add(prefix_ + ".proj.w", he_conv(C, in_channels, 1, rng));
    ps.add(prefix_ + ".proj.b", Tensor({C}));
    for (const char* g : {"gconv0", "gconv1"}) {
      ps.add(prefix_ + "." + g + ".w", he_conv(C, C / groups, k, rng));
      ps.add(prefix_ + "." + g + ".b", Tensor({C}));
    }
    for (const char* n : {"norm0", "norm1", "norm2"}) {
      ps.add(prefix_ + "." + n + ".gamma", Tensor({C}, 1.0));
      ps.add(prefix_ + "." + n + ".beta", Tensor({C}));
    }
  }

  const AttributeConfig& config() const { return cfg_; }

  std::vector<Var> forward(const ParamStore& ps, const Var& c_i) const {
    require_rank(c_i.value(), 3, "attribute block input");
    if (c_i.dim(0) != in_) {
      throw ShapeError("attribute block expects " + std::to_string(in_) + " input channels, got " + std::to_string(c_i.dim(0)));
    }
    const int Na = cfg_.n_attributes;
    const int groups = cfg_.group_conv ? Na : 1;
    auto norm = [&](const Var& x, const char* n) {
      return relu(group_norm(x, Na, ps.get(prefix_ + "." + n + ".gamma"), ps.get(prefix_ + "." + n + ".beta")));
    };
    Var x = norm(conv2d(c_i, ps.get(prefix_ + ".proj.w"), ps.get(prefix_ + ".proj.b"), {}), "norm0");
    const ConvSpec g{1, cfg_.kernel_size / 2, groups};
    x = norm(conv2d(x, ps.get(prefix_ + ".gconv0.w"), ps.get(prefix_ + ".gconv0.b"), g), "norm1");
    x = norm(conv2d(x, ps.get(prefix_ + ".gconv1.w"), ps.get(prefix_ + ".gconv1.b"), g), "norm2");
    if (cfg_.group_conv) x = channel_shuffle(x, Na);

    std::vector<Var> maps;
    for (int i = 0; i < Na; ++i) maps.push_back(slice(x, i * cfg_.channels_per_attribute, cfg_.channels_per_attribute));
    return maps;
  }

 private:
  AttributeConfig cfg_;
  int in_ = 0;
  std::string prefix_;
};

inline std::vector<Var> attribute_block_forward(const AttributeBlock& block, const ParamStore& ps, const Var& c_i) {
  return block.forward(ps, c_i);
}

// Per-level GAP of the concatenated attribute maps, concatenated in level order 2..5.
inline Var fuse_attribute_scales(const AttributeFeatureSet& sets) {
  std::vector<Var> parts;
  for (int l = kMinLevel; l <= kMaxLevel; ++l) {
    auto it = sets.find(l);
    if (it == sets.end()) throw MissingLevel(l);
    parts.push_back(global_avg_pool(concat(it->second)));
  }
  return concat(parts);
}

// Affine map then logistic: probabilities of each attribute.
inline Var classify_attributes(const Var& fused, const Var& weight, const Var& bias) {
  require_rank(fused.value(), 1, "classify_attributes input");
  if (weight.dim(1) != fused.dim(0)) {
    throw ShapeError("classifier expects " + std::to_string(weight.dim(1)) + " features, got " + std::to_string(fused.dim(0)));
  }
  Var logits = affine(reshape(fused, {1, fused.dim(0)}), weight, bias);
  return reshape(sigmoid(logits), {weight.dim(0)});
}

inline constexpr double kBceEpsilon = 1e-7;

// Mean BCE over attributes and over masked-in samples. Samples with mask false, or
// without labels, contribute nothing; a batch with none masked in yields 0.
inline Var attribute_bce_loss(const std::vector<Var>& probabilities,
                              const std::vector<std::optional<std::vector<int>>>& labels,
                              const std::vector<bool>& mask) {
  if (probabilities.size() != labels.size() || probabilities.size() != mask.size()) {
    throw ShapeError("attribute_bce_loss: batch sizes differ");
  }
  std::vector<Var> used;
  std::vector<double> targets, weights;
  for (std::size_t s = 0; s < probabilities.size(); ++s) {
    if (!mask[s] || !labels[s]) continue;
    const auto& y = *labels[s];
    if (y.size() != probabilities[s].size()) throw ShapeError("attribute_bce_loss: label length differs from prediction");
    used.push_back(probabilities[s]);
    for (int v : y) targets.push_back(v);
  }
  if (used.empty()) return constant(Tensor::scalar(0.0));
  weights.assign(targets.size(), 1.0);
  const double count = static_cast<double>(targets.size());
  return bce_on_probabilities(concat(used), std::move(targets), std::move(weights), count, kBceEpsilon);
}

inline Var attribute_bce_loss(const Var& probabilities, const std::vector<int>& labels) {
  return attribute_bce_loss({probabilities}, {labels}, {true});
}

}  // namespace tbattr
