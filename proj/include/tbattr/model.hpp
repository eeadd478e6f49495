#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tbattr/attention.hpp"
#include "tbattr/attribute_branch.hpp"
#include "tbattr/detector.hpp"
#include "tbattr/image_io.hpp"

namespace tbattr {

enum class ScaleMode { single, multi };

inline const char* to_string(ScaleMode m) { return m == ScaleMode::single ? "single" : "multi"; }

inline ScaleMode parse_scale_mode(const std::string& s) {
  if (s == "single") return ScaleMode::single;
  if (s == "multi") return ScaleMode::multi;
  throw ConfigError("scale_mode must be single or multi, got '" + s + "'");
}

struct Ablation {
  bool group_conv = true;
  bool a2_attn = true;
  bool at_attn = true;

  bool operator==(const Ablation&) const = default;
};

struct ModelConfig {
  BackboneConfig backbone = backbone_preset("tiny");
  AttributeConfig attributes;
  DetectorConfig detector;
  Ablation ablation;
  ScaleMode scale_mode = ScaleMode::multi;
  int head_dim = 8;
  int downsample_base = 16;
  int proj_dim = 0;  // 0 selects C_a
  bool normalize_weights = false;

  int effective_proj_dim() const { return proj_dim > 0 ? proj_dim : attributes.channels_per_attribute; }

  // Levels where the attention modules run.
  std::vector<int> interaction_levels() const {
    if (scale_mode == ScaleMode::single) return {kMaxLevel};
    return {2, 3, 4, 5};
  }
};

struct ForwardOutput {
  FeaturePyramid stages;
  FeaturePyramid pyramid;  // merged, then refined by AT-Attn where it runs
  AttributeFeatureSet attributes;
  Var attribute_probs;  // (N_a)
};

struct ImageLoss {
  std::optional<DetectionLoss> detection;  // absent without detection supervision
  Var attribute_probs;
};

struct Prediction {
  std::vector<double> attribute_probs;
  std::vector<Detection> detections;
};

// The full network: backbone, FPN, per-level attribute blocks, optional A2-Attn and
// AT-Attn, attribute classifier, and the two-stage detector. Owns its parameters.
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.attributes.group_conv = cfg.ablation.group_conv;
    Rng rng(seed, 0x5eed);
    backbone_ = Backbone(cfg_.backbone, ps_, rng);
    fpn_ = FeaturePyramidNetwork(cfg_.backbone.widths, cfg_.backbone.fpn_channels, ps_, rng);
    const int Na = cfg_.attributes.n_attributes, Ca = cfg_.attributes.channels_per_attribute;
    const int P = cfg_.backbone.fpn_channels;
    const auto levels = cfg_.interaction_levels();
    for (int l = kMinLevel; l <= kMaxLevel; ++l) {
      const std::string tag = ".l" + std::to_string(l);
      blocks_[l] = AttributeBlock(cfg_.attributes, cfg_.backbone.widths[static_cast<std::size_t>(l - kMinLevel)], ps_, rng,
                                  "attr" + tag);
      if (std::find(levels.begin(), levels.end(), l) == levels.end()) continue;
      if (cfg_.ablation.a2_attn) a2_[l] = AttrAttrAttention(ps_, rng, "a2" + tag, Na, Ca, cfg_.head_dim);
      if (cfg_.ablation.at_attn) {
        at_[l] = AttrTbAttention(ps_, rng, "at" + tag, Na, Ca, P, cfg_.effective_proj_dim(), cfg_.head_dim,
                                 cfg_.normalize_weights);
      }
    }
    const int fused = (kMaxLevel - kMinLevel + 1) * Na * Ca;
    ps_.add("classifier.w", normal_tensor({Na, fused}, std::sqrt(1.0 / fused), rng));
    ps_.add("classifier.b", Tensor({Na}));
    rpn_ = RpnHead(cfg_.detector, P, ps_, rng);
    head_ = DetectionHead(P * cfg_.detector.roi_output_size * cfg_.detector.roi_output_size, ps_, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return ps_; }
  const ParamStore& params() const { return ps_; }
  const RpnHead& rpn() const { return rpn_; }
  const DetectionHead& head() const { return head_; }

  int downsample_at(int level, int H, int W) const {
    return effective_downsample(downsample_for_level(cfg_.downsample_base, level), H, W);
  }

  // refine_detection false skips AT-Attn (its output only feeds the detector).
  ForwardOutput forward(const Var& image, bool refine_detection = true) const {
    ForwardOutput out;
    out.stages = backbone_.forward(ps_, image);
    out.pyramid = fpn_.forward(ps_, out.stages);
    for (int l = kMinLevel; l <= kMaxLevel; ++l) {
      const FeatureMap& c = level_of(out.stages, l);
      std::vector<Var> maps = blocks_.at(l).forward(ps_, c.values);
      const int s = downsample_at(l, c.height(), c.width());
      if (auto it = a2_.find(l); it != a2_.end()) maps = it->second.forward(ps_, maps, s);
      if (auto it = at_.find(l); refine_detection && it != at_.end()) {
        FeatureMap& p = out.pyramid[l];
        p.values = it->second.forward(ps_, maps, p.values, s);
      }
      out.attributes[l] = std::move(maps);
    }
    out.attribute_probs = classify_attributes(fuse_attribute_scales(out.attributes), ps_.get("classifier.w"),
                                              ps_.get("classifier.b"));
    return out;
  }

  // Forward pass plus this image's detection loss (sampling drawn from rng).
  ImageLoss image_loss(const XrayRecord& r, const Tensor& image, Rng& rng) const {
    const bool supervised = r.has_detection_supervision();
    ForwardOutput f = forward(constant(image), supervised);
    ImageLoss out;
    out.attribute_probs = f.attribute_probs;
    if (!supervised) return out;

    const std::vector<BoundingBox> gts = r.detection_targets();
    const DetectorConfig& dc = cfg_.detector;
    RpnOutput ro = rpn_.forward(ps_, f.pyramid);
    AnchorTargets at = sample_anchor_targets(ro.anchors, gts, dc, rng);
    auto proposals = generate_proposals(ro.anchors, ro.objectness.value(), ro.deltas.value(), r.width, r.height, dc,
                                        dc.rpn_nms_thresh);
    RoiTargets rt = sample_roi_targets(proposals, gts, dc, rng);
    HeadOutput ho;
    if (!rt.boxes.empty()) ho = head_.forward(ps_, roi_features(f.pyramid, rt.boxes, dc));
    out.detection = detection_loss(ro, at, ho, rt, dc.smooth_l1_beta);
    return out;
  }

  Prediction predict(const Tensor& image) const {
    ForwardOutput f = forward(constant(image), true);
    Prediction p;
    const auto& pv = f.attribute_probs.value().values();
    p.attribute_probs.assign(pv.begin(), pv.end());
    const int H = image.dim(1), W = image.dim(2);
    const DetectorConfig& dc = cfg_.detector;
    RpnOutput ro = rpn_.forward(ps_, f.pyramid);
    auto proposals = generate_proposals(ro.anchors, ro.objectness.value(), ro.deltas.value(), W, H, dc, dc.rpn_nms_thresh);
    if (proposals.empty()) return p;
    std::vector<BoundingBox> rois;
    for (const auto& pr : proposals) rois.push_back(pr.box);
    HeadOutput ho = head_.forward(ps_, roi_features(f.pyramid, rois, dc));
    p.detections = postprocess_detections(rois, ho, W, H, dc);
    return p;
  }

 private:
  ModelConfig cfg_;
  ParamStore ps_;
  Backbone backbone_;
  FeaturePyramidNetwork fpn_;
  std::map<int, AttributeBlock> blocks_;
  std::map<int, AttrAttrAttention> a2_;
  std::map<int, AttrTbAttention> at_;
  RpnHead rpn_;
  DetectionHead head_;
};

}  // namespace tbattr
