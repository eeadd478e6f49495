#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "tbattr/backbone.hpp"
#include "tbattr/data_model.hpp"

namespace tbattr {

struct DetectorConfig {
  // Anchors: side = size_per_stride * stride * scale, for every scale x aspect (h/w).
  double anchor_size_per_stride = 2.0;
  std::vector<double> anchor_scales{1.0, 2.0};
  std::vector<double> anchor_aspects{1.0, 2.0, 0.5};

  int rpn_pre_nms_topk = 1000;
  int rpn_post_nms_topk = 256;
  double rpn_nms_thresh = 0.7;
  int rpn_batch_size = 256;
  double rpn_positive_fraction = 0.5;
  double rpn_pos_iou = 0.7;
  double rpn_neg_iou = 0.3;

  int roi_batch_size = 64;
  double roi_positive_fraction = 0.25;
  double roi_fg_iou = 0.5;
  int roi_output_size = 7;
  int roi_sampling_ratio = 2;
  double roi_canonical_size = 224.0;
  int roi_canonical_level = 4;
  std::array<double, 4> head_box_weights{10.0, 10.0, 5.0, 5.0};

  double smooth_l1_beta = 1.0;
  double score_thresh = 0.05;
  double det_nms_thresh = 0.5;
  int max_detections = 100;

  int anchors_per_location() const { return static_cast<int>(anchor_scales.size() * anchor_aspects.size()); }
};

// ---------------------------------------------------------------------------
// Boxes
// ---------------------------------------------------------------------------

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

struct Anchor {
  double cx = 0, cy = 0, width = 0, height = 0;
  int level = kMinLevel;

  BoundingBox box() const { return {cx - 0.5 * width, cy - 0.5 * height, cx + 0.5 * width, cy + 0.5 * height}; }
};

using BoxDelta = std::array<double, 4>;  // dx, dy, dw, dh
inline constexpr BoxDelta kUnitWeights{1.0, 1.0, 1.0, 1.0};
inline const double kDeltaClamp = std::log(1000.0 / 16.0);

inline BoxDelta encode_box(double cx, double cy, double w, double h, const BoundingBox& target,
                           const std::array<double, 4>& weights = kUnitWeights) {
  const double tw = target.width(), th = target.height();
  const double tx = target.x_min + 0.5 * tw, ty = target.y_min + 0.5 * th;
  return {weights[0] * (tx - cx) / w, weights[1] * (ty - cy) / h, weights[2] * std::log(tw / w),
          weights[3] * std::log(th / h)};
}

inline BoundingBox decode_box(double cx, double cy, double w, double h, const BoxDelta& d,
                              const std::array<double, 4>& weights = kUnitWeights) {
  const double dw = std::min(d[2] / weights[2], kDeltaClamp), dh = std::min(d[3] / weights[3], kDeltaClamp);
  const double ncx = cx + (d[0] / weights[0]) * w, ncy = cy + (d[1] / weights[1]) * h;
  const double nw = w * std::exp(dw), nh = h * std::exp(dh);
  return {ncx - 0.5 * nw, ncy - 0.5 * nh, ncx + 0.5 * nw, ncy + 0.5 * nh};
}

inline BoxDelta encode_box(const Anchor& a, const BoundingBox& t, const std::array<double, 4>& w = kUnitWeights) {
  return encode_box(a.cx, a.cy, a.width, a.height, t, w);
}

inline BoundingBox decode_box(const Anchor& a, const BoxDelta& d, const std::array<double, 4>& w = kUnitWeights) {
  return decode_box(a.cx, a.cy, a.width, a.height, d, w);
}

inline BoxDelta encode_box(const BoundingBox& ref, const BoundingBox& t, const std::array<double, 4>& w = kUnitWeights) {
  return encode_box(ref.x_min + 0.5 * ref.width(), ref.y_min + 0.5 * ref.height(), ref.width(), ref.height(), t, w);
}

inline BoundingBox decode_box(const BoundingBox& ref, const BoxDelta& d, const std::array<double, 4>& w = kUnitWeights) {
  return decode_box(ref.x_min + 0.5 * ref.width(), ref.y_min + 0.5 * ref.height(), ref.width(), ref.height(), d, w);
}

inline BoundingBox clip_box(const BoundingBox& b, int width, int height) {
  return {std::clamp(b.x_min, 0.0, double(width)), std::clamp(b.y_min, 0.0, double(height)),
          std::clamp(b.x_max, 0.0, double(width)), std::clamp(b.y_max, 0.0, double(height))};
}

// Anchors of one level in (y, x, anchor) order, matching the RPN output rows.
inline std::vector<Anchor> generate_anchors(int level, int H, int W, const DetectorConfig& cfg) {
  const double stride = 1 << level;
  std::vector<Anchor> out;
  out.reserve(static_cast<std::size_t>(H) * W * cfg.anchors_per_location());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (double sc : cfg.anchor_scales)
        for (double r : cfg.anchor_aspects) {
          const double side = cfg.anchor_size_per_stride * stride * sc;
          out.push_back({(x + 0.5) * stride, (y + 0.5) * stride, side / std::sqrt(r), side * std::sqrt(r), level});
        }
  return out;
}

// ---------------------------------------------------------------------------
// Assignment and suppression
// ---------------------------------------------------------------------------

enum class AnchorLabel { negative = 0, positive = 1, ignore = -1 };

struct AnchorAssignment {
  std::vector<AnchorLabel> labels;
  std::vector<int> matched_gt;  // -1 when no gt
  std::vector<double> max_iou;
};

// IoU >= pos_thr: positive; IoU <= neg_thr: negative; otherwise ignore. The best anchor of
// every gt (ties included) is positive as well.
inline AnchorAssignment assign_anchors(const std::vector<BoundingBox>& anchors, const std::vector<BoundingBox>& gts,
                                       double pos_thr = 0.7, double neg_thr = 0.3) {
  if (!(0.0 <= neg_thr && neg_thr < pos_thr && pos_thr <= 1.0)) throw ConfigError("assign_anchors: need 0 <= neg < pos <= 1");
  const std::size_t n = anchors.size();
  AnchorAssignment a{std::vector<AnchorLabel>(n, AnchorLabel::negative), std::vector<int>(n, -1), std::vector<double>(n, 0.0)};
  if (gts.empty()) return a;

  std::vector<double> gt_best(gts.size(), 0.0);
  std::vector<std::vector<double>> ious(n, std::vector<double>(gts.size()));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(anchors[i], gts[g]);
      ious[i][g] = v;
      if (v > a.max_iou[i]) {
        a.max_iou[i] = v;
        a.matched_gt[i] = static_cast<int>(g);
      }
      gt_best[g] = std::max(gt_best[g], v);
    }
  for (std::size_t i = 0; i < n; ++i) {
    if (a.matched_gt[i] < 0) a.matched_gt[i] = 0;
    if (a.max_iou[i] >= pos_thr) a.labels[i] = AnchorLabel::positive;
    else if (a.max_iou[i] <= neg_thr) a.labels[i] = AnchorLabel::negative;
    else a.labels[i] = AnchorLabel::ignore;
  }
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (gt_best[g] <= 0.0) continue;
    for (std::size_t i = 0; i < n; ++i) {
      if (ious[i][g] == gt_best[g]) {
        a.labels[i] = AnchorLabel::positive;
        a.matched_gt[i] = static_cast<int>(g);
      }
    }
  }
  return a;
}

inline AnchorAssignment assign_anchors(const std::vector<Anchor>& anchors, const std::vector<BoundingBox>& gts,
                                       double pos_thr = 0.7, double neg_thr = 0.3) {
  std::vector<BoundingBox> boxes;
  boxes.reserve(anchors.size());
  for (const auto& a : anchors) boxes.push_back(a.box());
  return assign_anchors(boxes, gts, pos_thr, neg_thr);
}

// Greedy suppression in descending score order; equal scores keep the lower index first.
// Returns kept indices in that order.
inline std::vector<std::size_t> nms(const std::vector<BoundingBox>& boxes, const std::vector<double>& scores,
                                    double iou_thr) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> keep;
  std::vector<bool> dead(boxes.size(), false);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (dead[i]) continue;
    keep.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (!dead[j] && iou(boxes[i], boxes[j]) > iou_thr) dead[j] = true;
    }
  }
  return keep;
}

struct Proposal {
  BoundingBox box;
  double objectness = 0;
};

struct Detection {
  BoundingBox box;
  double score = 0;
};

inline std::vector<Detection> nms_filter(const std::vector<Detection>& dets, double iou_thr = 0.5) {
  std::vector<BoundingBox> boxes;
  std::vector<double> scores;
  for (const auto& d : dets) {
    boxes.push_back(d.box);
    scores.push_back(d.score);
  }
  std::vector<Detection> out;
  for (auto i : nms(boxes, scores, iou_thr)) out.push_back(dets[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Region proposal network
// ---------------------------------------------------------------------------

struct RpnOutput {
  Var objectness;  // (N) logits over all anchors of all levels
  Var deltas;      // (N, 4)
  std::vector<Anchor> anchors;
};

// Shared over levels: 3x3 conv + ReLU, then 1x1 objectness (A) and 1x1 deltas (4A).
class RpnHead {
 public:
  RpnHead() = default;
  RpnHead(const DetectorConfig& cfg, int channels, ParamStore& ps, Rng& rng, std::string prefix = "rpn")
      : cfg_(cfg), prefix_(std::move(prefix)) {
    const int A = cfg.anchors_per_location();
    ps.add(prefix_ + ".conv.w", normal_tensor({channels, channels, 3, 3}, 0.01, rng));
    ps.add(prefix_ + ".conv.b", Tensor({channels}));
    ps.add(prefix_ + ".cls.w", normal_tensor({A, channels, 1, 1}, 0.01, rng));
    ps.add(prefix_ + ".cls.b", Tensor({A}));
    ps.add(prefix_ + ".reg.w", normal_tensor({4 * A, channels, 1, 1}, 0.01, rng));
    ps.add(prefix_ + ".reg.b", Tensor({4 * A}));
  }

  const DetectorConfig& config() const { return cfg_; }

  RpnOutput forward(const ParamStore& ps, const FeaturePyramid& pyramid) const {
    const int A = cfg_.anchors_per_location();
    std::vector<Var> obj, del;
    RpnOutput out;
    for (int l = kMinLevel; l <= kMaxLevel; ++l) {
      const FeatureMap& p = level_of(pyramid, l);
      const int H = p.height(), W = p.width();
      Var t = relu(conv2d(p.values, ps.get(prefix_ + ".conv.w"), ps.get(prefix_ + ".conv.b"), {1, 1, 1}));
      Var cls = conv2d(t, ps.get(prefix_ + ".cls.w"), ps.get(prefix_ + ".cls.b"), {});
      Var reg = conv2d(t, ps.get(prefix_ + ".reg.w"), ps.get(prefix_ + ".reg.b"), {});
      const std::size_t HW = static_cast<std::size_t>(H) * W;
      std::vector<std::size_t> ci, ri;
      for (std::size_t loc = 0; loc < HW; ++loc)
        for (int a = 0; a < A; ++a) {
          ci.push_back(static_cast<std::size_t>(a) * HW + loc);
          for (int j = 0; j < 4; ++j) ri.push_back(static_cast<std::size_t>(a * 4 + j) * HW + loc);
        }
      const int n = static_cast<int>(HW) * A;
      obj.push_back(gather(cls, std::move(ci), {n}));
      del.push_back(gather(reg, std::move(ri), {n, 4}));
      auto anchors = generate_anchors(l, H, W, cfg_);
      out.anchors.insert(out.anchors.end(), anchors.begin(), anchors.end());
    }
    out.objectness = concat(obj);
    out.deltas = concat(del);
    return out;
  }

 private:
  DetectorConfig cfg_;
  std::string prefix_;
};

// Per level: top-k by objectness, decode, clip; then joint NMS and top post_nms_topk.
inline std::vector<Proposal> generate_proposals(const std::vector<Anchor>& anchors, const Tensor& objectness,
                                                const Tensor& deltas, int image_width, int image_height,
                                                const DetectorConfig& cfg, double nms_thresh) {
  std::vector<BoundingBox> boxes;
  std::vector<double> scores;
  for (int l = kMinLevel; l <= kMaxLevel; ++l) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < anchors.size(); ++i)
      if (anchors[i].level == l) idx.push_back(i);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return objectness[a] > objectness[b]; });
    if (static_cast<int>(idx.size()) > cfg.rpn_pre_nms_topk) idx.resize(static_cast<std::size_t>(cfg.rpn_pre_nms_topk));
    for (auto i : idx) {
      const BoxDelta d{deltas[i * 4], deltas[i * 4 + 1], deltas[i * 4 + 2], deltas[i * 4 + 3]};
      BoundingBox b = clip_box(decode_box(anchors[i], d), image_width, image_height);
      if (b.width() < 1e-2 || b.height() < 1e-2) continue;
      boxes.push_back(b);
      scores.push_back(detail::sigmoid(objectness[i]));
    }
  }
  std::vector<Proposal> out;
  for (auto i : nms(boxes, scores, nms_thresh)) {
    if (static_cast<int>(out.size()) >= cfg.rpn_post_nms_topk) break;
    out.push_back({boxes[i], scores[i]});
  }
  return out;
}

inline std::vector<Proposal> rpn_forward(const RpnHead& head, const ParamStore& ps, const FeaturePyramid& pyramid,
                                         int image_width, int image_height) {
  RpnOutput o = head.forward(ps, pyramid);
  return generate_proposals(o.anchors, o.objectness.value(), o.deltas.value(), image_width, image_height, head.config(),
                            head.config().rpn_nms_thresh);
}

// ---------------------------------------------------------------------------
// RoI features and the box head
// ---------------------------------------------------------------------------

// Standard FPN level assignment by box scale.
inline int roi_level(const BoundingBox& b, const DetectorConfig& cfg) {
  const double s = std::sqrt(std::max(b.area(), 1e-12));
  const int k = static_cast<int>(std::floor(cfg.roi_canonical_level + std::log2(s / cfg.roi_canonical_size + 1e-8)));
  return std::clamp(k, kMinLevel, kMaxLevel);
}

// (R, C * P * P) aligned features, rows in the order of boxes.
inline Var roi_features(const FeaturePyramid& pyramid, const std::vector<BoundingBox>& boxes, const DetectorConfig& cfg) {
  if (boxes.empty()) throw ShapeError("roi_features: no boxes");
  std::vector<Var> parts;
  std::vector<std::size_t> source_row(boxes.size());
  std::size_t row = 0;
  int cols = 0;
  for (int l = kMinLevel; l <= kMaxLevel; ++l) {
    std::vector<Box4> lb;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      if (roi_level(boxes[i], cfg) != l) continue;
      const auto& b = boxes[i];
      lb.push_back({b.x_min, b.y_min, b.x_max, b.y_max});
      source_row[i] = row++;
    }
    if (lb.empty()) continue;
    const FeatureMap& f = level_of(pyramid, l);
    parts.push_back(roi_align(f.values, lb, {1.0 / f.stride, cfg.roi_output_size, cfg.roi_sampling_ratio}));
    cols = parts.back().dim(1);
  }
  Var stacked = concat(parts);
  std::vector<std::size_t> idx;
  idx.reserve(boxes.size() * static_cast<std::size_t>(cols));
  for (std::size_t i = 0; i < boxes.size(); ++i)
    for (int c = 0; c < cols; ++c) idx.push_back(source_row[i] * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c));
  return gather(stacked, std::move(idx), {static_cast<int>(boxes.size()), cols});
}

inline Var roi_extract(const FeaturePyramid& pyramid, const BoundingBox& box, const DetectorConfig& cfg) {
  if (!(box.x_max > box.x_min) || !(box.y_max > box.y_min)) throw DegenerateBox("roi_extract: box has zero area");
  Var f = roi_features(pyramid, {box}, cfg);
  return reshape(f, {f.dim(1)});
}

struct HeadOutput {
  Var class_logits;  // (R, 2): background, tb
  Var deltas;        // (R, 4)
};

class DetectionHead {
 public:
  DetectionHead() = default;
  DetectionHead(int in_features, ParamStore& ps, Rng& rng, std::string prefix = "head") : prefix_(std::move(prefix)) {
    ps.add(prefix_ + ".cls.w", normal_tensor({2, in_features}, 0.01, rng));
    ps.add(prefix_ + ".cls.b", Tensor({2}));
    ps.add(prefix_ + ".reg.w", normal_tensor({4, in_features}, 0.001, rng));
    ps.add(prefix_ + ".reg.b", Tensor({4}));
  }

  HeadOutput forward(const ParamStore& ps, const Var& patches) const {
    require_rank(patches.value(), 2, "detection head input");
    return {affine(patches, ps.get(prefix_ + ".cls.w"), ps.get(prefix_ + ".cls.b")),
            affine(patches, ps.get(prefix_ + ".reg.w"), ps.get(prefix_ + ".reg.b"))};
  }

 private:
  std::string prefix_;
};

inline HeadOutput detection_head_forward(const DetectionHead& head, const ParamStore& ps, const Var& patches) {
  return head.forward(ps, patches);
}

inline std::vector<double> class_probabilities(const Tensor& logits, int row) {
  const double a = logits.at(row, 0), b = logits.at(row, 1);
  const double m = std::max(a, b);
  const double ea = std::exp(a - m), eb = std::exp(b - m);
  return {ea / (ea + eb), eb / (ea + eb)};
}

// ---------------------------------------------------------------------------
// Training targets and the detection loss
// ---------------------------------------------------------------------------

struct AnchorTargets {
  std::vector<std::size_t> sampled;    // anchor indices contributing to the objectness loss
  std::vector<double> labels;          // 1 / 0 per sampled anchor
  std::vector<std::size_t> positives;  // anchor indices with a regression target
  std::vector<BoxDelta> deltas;        // per positive
};

inline AnchorTargets sample_anchor_targets(const std::vector<Anchor>& anchors, const std::vector<BoundingBox>& gts,
                                           const DetectorConfig& cfg, Rng& rng) {
  AnchorAssignment a = assign_anchors(anchors, gts, cfg.rpn_pos_iou, cfg.rpn_neg_iou);
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (a.labels[i] == AnchorLabel::positive) pos.push_back(i);
    else if (a.labels[i] == AnchorLabel::negative) neg.push_back(i);
  }
  rng.shuffle(pos);
  rng.shuffle(neg);
  const std::size_t max_pos = static_cast<std::size_t>(cfg.rpn_batch_size * cfg.rpn_positive_fraction);
  pos.resize(std::min(pos.size(), max_pos));
  neg.resize(std::min(neg.size(), static_cast<std::size_t>(cfg.rpn_batch_size) - pos.size()));
  std::sort(pos.begin(), pos.end());
  std::sort(neg.begin(), neg.end());

  AnchorTargets t;
  for (auto i : pos) {
    t.sampled.push_back(i);
    t.labels.push_back(1.0);
    t.positives.push_back(i);
    t.deltas.push_back(encode_box(anchors[i], gts[static_cast<std::size_t>(a.matched_gt[i])]));
  }
  for (auto i : neg) {
    t.sampled.push_back(i);
    t.labels.push_back(0.0);
  }
  return t;
}

struct RoiTargets {
  std::vector<BoundingBox> boxes;  // sampled RoIs
  std::vector<int> labels;         // 1 tb, 0 background
  std::vector<BoxDelta> deltas;    // per RoI; only rows with label 1 are used
};

// Proposals plus the gt boxes themselves, labelled by IoU >= roi_fg_iou, then sampled.
inline RoiTargets sample_roi_targets(const std::vector<Proposal>& proposals, const std::vector<BoundingBox>& gts,
                                     const DetectorConfig& cfg, Rng& rng) {
  std::vector<BoundingBox> cand;
  for (const auto& p : proposals) cand.push_back(p.box);
  cand.insert(cand.end(), gts.begin(), gts.end());
  std::vector<std::size_t> fg, bg;
  std::vector<int> match(cand.size(), -1);
  for (std::size_t i = 0; i < cand.size(); ++i) {
    double best = 0.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(cand[i], gts[g]);
      if (v > best) {
        best = v;
        match[i] = static_cast<int>(g);
      }
    }
    (best >= cfg.roi_fg_iou ? fg : bg).push_back(i);
  }
  rng.shuffle(fg);
  rng.shuffle(bg);
  const std::size_t max_fg = static_cast<std::size_t>(cfg.roi_batch_size * cfg.roi_positive_fraction);
  fg.resize(std::min(fg.size(), max_fg));
  bg.resize(std::min(bg.size(), static_cast<std::size_t>(cfg.roi_batch_size) - fg.size()));
  std::sort(fg.begin(), fg.end());
  std::sort(bg.begin(), bg.end());

  RoiTargets t;
  for (auto i : fg) {
    t.boxes.push_back(cand[i]);
    t.labels.push_back(1);
    t.deltas.push_back(encode_box(cand[i], gts[static_cast<std::size_t>(match[i])], cfg.head_box_weights));
  }
  for (auto i : bg) {
    t.boxes.push_back(cand[i]);
    t.labels.push_back(0);
    t.deltas.push_back({0, 0, 0, 0});
  }
  return t;
}

struct DetectionLoss {
  Var rpn_cls, rpn_reg, head_cls, head_reg;
  Var total;  // Loss_det
};

// Objectness BCE over sampled anchors plus smooth-L1 over positive anchors (both divided
// by the sampled anchor count), and softmax CE over sampled RoIs plus smooth-L1 over
// foreground RoIs (divided by the RoI count). Ignored anchors never enter.
inline DetectionLoss detection_loss(const RpnOutput& rpn, const AnchorTargets& at, const HeadOutput& head,
                                    const RoiTargets& rt, double beta = 1.0) {
  DetectionLoss L;
  const double n_anchor = std::max<double>(1.0, static_cast<double>(at.sampled.size()));
  const double n_roi = std::max<double>(1.0, static_cast<double>(rt.labels.size()));
  auto zero = [] { return constant(Tensor::scalar(0.0)); };

  if (!at.sampled.empty()) {
    Var logits = gather(rpn.objectness, at.sampled, {static_cast<int>(at.sampled.size())});
    L.rpn_cls = bce_with_logits(logits, at.labels, std::vector<double>(at.sampled.size(), 1.0), n_anchor);
  } else {
    L.rpn_cls = zero();
  }
  if (!at.positives.empty()) {
    std::vector<std::size_t> idx;
    Tensor target({static_cast<int>(at.positives.size()), 4});
    for (std::size_t k = 0; k < at.positives.size(); ++k)
      for (int j = 0; j < 4; ++j) {
        idx.push_back(at.positives[k] * 4 + static_cast<std::size_t>(j));
        target[k * 4 + static_cast<std::size_t>(j)] = at.deltas[k][static_cast<std::size_t>(j)];
      }
    L.rpn_reg = smooth_l1(gather(rpn.deltas, std::move(idx), target.shape()), target, beta, n_anchor);
  } else {
    L.rpn_reg = zero();
  }

  if (!rt.labels.empty()) {
    L.head_cls = softmax_cross_entropy(head.class_logits, rt.labels, n_roi);
    std::vector<std::size_t> idx;
    std::vector<double> tv;
    for (std::size_t r = 0; r < rt.labels.size(); ++r) {
      if (rt.labels[r] != 1) continue;
      for (int j = 0; j < 4; ++j) {
        idx.push_back(r * 4 + static_cast<std::size_t>(j));
        tv.push_back(rt.deltas[r][static_cast<std::size_t>(j)]);
      }
    }
    if (!idx.empty()) {
      const int rows = static_cast<int>(idx.size() / 4);
      Tensor target({rows, 4}, std::move(tv));
      L.head_reg = smooth_l1(gather(head.deltas, std::move(idx), {rows, 4}), target, beta, n_roi);
    } else {
      L.head_reg = zero();
    }
  } else {
    L.head_cls = zero();
    L.head_reg = zero();
  }
  L.total = add(add(L.rpn_cls, L.rpn_reg), add(L.head_cls, L.head_reg));
  return L;
}

// Scores proposals with the head, decodes, clips, thresholds and suppresses.
inline std::vector<Detection> postprocess_detections(const std::vector<BoundingBox>& rois, const HeadOutput& head,
                                                     int image_width, int image_height, const DetectorConfig& cfg) {
  std::vector<Detection> dets;
  for (std::size_t r = 0; r < rois.size(); ++r) {
    const double score = class_probabilities(head.class_logits.value(), static_cast<int>(r))[1];
    if (score < cfg.score_thresh) continue;
    const Tensor& d = head.deltas.value();
    const BoxDelta delta{d.at(static_cast<int>(r), 0), d.at(static_cast<int>(r), 1), d.at(static_cast<int>(r), 2),
                         d.at(static_cast<int>(r), 3)};
    BoundingBox b = clip_box(decode_box(rois[r], delta, cfg.head_box_weights), image_width, image_height);
    if (b.width() < 1e-2 || b.height() < 1e-2) continue;
    dets.push_back({b, score});
  }
  dets = nms_filter(dets, cfg.det_nms_thresh);
  if (static_cast<int>(dets.size()) > cfg.max_detections) dets.resize(static_cast<std::size_t>(cfg.max_detections));
  return dets;
}

}  // namespace tbattr
