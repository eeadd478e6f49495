#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "tbattr/evaluation.hpp"
#include "tbattr/model.hpp"
#include "tbattr/synthetic.hpp"

namespace tbattr {

struct LossBreakdown {
  double loss_det = 0;
  double loss_cls = 0;
  double lambda = 1;
  double total = 0;

  bool operator==(const LossBreakdown&) const = default;
};

inline LossBreakdown joint_loss(double loss_det, double loss_cls, double lambda) {
  return {loss_det, loss_cls, lambda, loss_det + lambda * loss_cls};
}

struct TrainConfig {
  ModelConfig model;
  int epochs = 60;
  int batch_size = 8;
  double initial_lr = 1e-3;
  int lr_decay_every = 20;
  double lr_decay_factor = 10.0;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  double lambda = 1.0;
  int val_every = 1;
  int max_steps = 0;  // 0: no cap

  void validate() const {
    if (epochs < 1 || batch_size < 1 || lr_decay_every < 1 || val_every < 1 || max_steps < 0) {
      throw ConfigError("epochs, batch_size, lr_decay_every and val_every must be positive");
    }
    if (!(initial_lr > 0) || !(lr_decay_factor > 0) || weight_decay < 0 || lambda < 0) {
      throw ConfigError("initial_lr and lr_decay_factor must be positive; weight_decay and lambda nonnegative");
    }
  }
};

// initial_lr / factor^floor(epoch / every).
inline double lr_at_epoch(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch >= cfg.epochs) {
    throw OutOfRange("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) + ")");
  }
  return cfg.initial_lr / std::pow(cfg.lr_decay_factor, epoch / cfg.lr_decay_every);
}

// Records with their decoded images, aligned by index.
struct TrainingData {
  DatasetManifest manifest;
  std::vector<Tensor> images;

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < manifest.records.size(); ++i)
      if (manifest.records[i].split == s) out.push_back(i);
    return out;
  }
};

inline TrainingData load_training_data(const std::filesystem::path& manifest_path) {
  TrainingData d;
  d.manifest = load_manifest(manifest_path);
  for (const auto& r : d.manifest.records) {
    const auto p = resolve_image(manifest_path, r);
    if (!std::filesystem::exists(p)) throw MissingFile(p.string());
    GrayImage img = read_png(p);
    if (img.width != r.width || img.height != r.height) {
      throw InvalidSize(p.string() + " is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                        ", manifest says " + std::to_string(r.width) + "x" + std::to_string(r.height));
    }
    d.images.push_back(image_to_tensor(img));
  }
  return d;
}

inline TrainingData training_data(const SyntheticDataset& ds) {
  TrainingData d{ds.manifest, {}};
  for (const auto& img : ds.images) d.images.push_back(image_to_tensor(img));
  return d;
}

struct Sample {
  const XrayRecord* record = nullptr;
  const Tensor* image = nullptr;
};

using Batch = std::vector<Sample>;

inline Batch make_batch(const TrainingData& data, const std::vector<std::size_t>& idx) {
  Batch b;
  for (auto i : idx) b.push_back({&data.manifest.records[i], &data.images[i]});
  return b;
}

// Shuffled batches of batch_size; a batch lacking a box-supervised or an attribute-
// supervised record gets one drawn from the pool, whenever such records exist.
inline std::vector<std::vector<std::size_t>> stratified_batches(const DatasetManifest& m,
                                                                 std::vector<std::size_t> pool, int batch_size,
                                                                 Rng& rng) {
  rng.shuffle(pool);
  std::vector<std::size_t> boxed, attributed;
  for (auto i : pool) {
    if (m.records[i].boxes) boxed.push_back(i);
    if (m.records[i].attributes) attributed.push_back(i);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t s = 0; s < pool.size(); s += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> b(pool.begin() + static_cast<std::ptrdiff_t>(s),
                               pool.begin() + static_cast<std::ptrdiff_t>(std::min(pool.size(), s + batch_size)));
    auto lacks = [&](auto pred) { return std::none_of(b.begin(), b.end(), pred); };
    if (!boxed.empty() && lacks([&](std::size_t i) { return m.records[i].boxes.has_value(); })) {
      b.push_back(boxed[rng.index(boxed.size())]);
    }
    if (!attributed.empty() && lacks([&](std::size_t i) { return m.records[i].attributes.has_value(); })) {
      b.push_back(attributed[rng.index(attributed.size())]);
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

struct BatchLoss {
  Var det;    // mean per-image detection loss over detection-supervised samples
  Var cls;    // attribute BCE over attribute-labelled samples
  Var total;  // det + lambda * cls
  LossBreakdown breakdown;
};

inline BatchLoss batch_loss(const Model& model, const Batch& batch, double lambda, Rng& rng) {
  if (batch.empty()) throw EmptyBatch();
  std::vector<Var> det_terms, probs;
  std::vector<std::optional<std::vector<int>>> labels;
  std::vector<bool> mask;
  for (const auto& s : batch) {
    ImageLoss l = model.image_loss(*s.record, *s.image, rng);
    if (l.detection) det_terms.push_back(l.detection->total);
    probs.push_back(l.attribute_probs);
    labels.push_back(s.record->attributes);
    mask.push_back(s.record->has_attributes());
  }
  BatchLoss out;
  if (det_terms.empty()) {
    out.det = constant(Tensor::scalar(0.0));
  } else {
    out.det = scale(sum(concat(det_terms)), 1.0 / static_cast<double>(det_terms.size()));
  }
  out.cls = attribute_bce_loss(probs, labels, mask);
  out.total = add(out.det, scale(out.cls, lambda));
  out.breakdown = joint_loss(out.det.value()[0], out.cls.value()[0], lambda);
  return out;
}

// One optimizer step on the batch; returns the pre-step losses.
inline LossBreakdown train_step(Model& model, Adam& opt, const Batch& batch, double lambda, double lr, Rng& rng) {
  if (batch.empty()) throw EmptyBatch();
  model.params().zero_grad();
  BatchLoss l = batch_loss(model, batch, lambda, rng);
  backward(l.total);
  opt.step(model.params(), lr);
  return l.breakdown;
}

// ---------------------------------------------------------------------------
// Evaluation of a model on a split
// ---------------------------------------------------------------------------

struct SplitEvaluation {
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  double f_score = std::numeric_limits<double>::quiet_NaN();
  double map = std::numeric_limits<double>::quiet_NaN();
  ApResult ap;
  std::vector<std::size_t> indices;
  std::vector<Prediction> predictions;
};

// Attribute metrics over attribute-labelled records; mAP over detection-supervised records.
inline SplitEvaluation evaluate_model(const Model& model, const TrainingData& data, const std::vector<std::size_t>& idx) {
  SplitEvaluation ev;
  ev.indices = idx;
  Matrix probs;
  LabelMatrix labels;
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<BoundingBox>> gts;
  for (auto i : idx) {
    const XrayRecord& r = data.manifest.records[i];
    ev.predictions.push_back(model.predict(data.images[i]));
    const Prediction& p = ev.predictions.back();
    if (r.attributes) {
      probs.push_back(p.attribute_probs);
      labels.push_back(*r.attributes);
    }
    if (r.has_detection_supervision()) {
      dets.push_back(p.detections);
      gts.push_back(r.detection_targets());
    }
  }
  if (!probs.empty()) {
    ev.accuracy = compute_accuracy(probs, labels);
    ev.f_score = compute_f_score(probs, labels);
  }
  if (!gts.empty()) {
    ev.ap = average_precision(dets, gts);
    ev.map = ev.ap.ap;
  }
  return ev;
}

// ---------------------------------------------------------------------------
// Checkpoints and logs
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json params_to_json(const ParamStore& ps) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [name, v] : ps) {
    const auto vals = v.value().values();
    j[name] = {{"shape", v.shape()}, {"data", std::vector<double>(vals.begin(), vals.end())}};
  }
  return j;
}

inline void load_params(ParamStore& ps, const nlohmann::json& j) {
  for (auto& [name, v] : ps) {
    if (!j.contains(name)) throw ConfigError("checkpoint lacks parameter " + name);
    const auto& e = j.at(name);
    if (e.at("shape").get<Shape>() != v.shape()) throw ShapeError("checkpoint shape mismatch for " + name);
    const auto data = e.at("data").get<std::vector<double>>();
    auto dst = v.mutable_value().values();
    if (data.size() != dst.size()) throw ShapeError("checkpoint size mismatch for " + name);
    std::copy(data.begin(), data.end(), dst.begin());
  }
  for (const auto& [name, _] : j.items()) {
    if (!ps.contains(name)) throw ConfigError("checkpoint has unexpected parameter " + name);
  }
}

struct EpochMetrics {
  int epoch = 0;
  double loss_det = 0, loss_cls = 0, total = 0;
  double val_acc = std::numeric_limits<double>::quiet_NaN();
  double val_f1 = std::numeric_limits<double>::quiet_NaN();
  double val_map = std::numeric_limits<double>::quiet_NaN();
};

inline constexpr const char* kMetricsHeader = "epoch,loss_det,loss_cls,total,val_acc,val_f1,val_map";

inline std::string format_metric(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& rows) {
  std::ofstream out(path);
  if (!out) throw MissingFile(path.string());
  out << kMetricsHeader << '\n';
  for (const auto& r : rows) {
    out << r.epoch << ',' << format_metric(r.loss_det) << ',' << format_metric(r.loss_cls) << ','
        << format_metric(r.total) << ',' << format_metric(r.val_acc) << ',' << format_metric(r.val_f1) << ','
        << format_metric(r.val_map) << '\n';
  }
}

struct TrainResult {
  Model model;
  std::vector<EpochMetrics> epochs;
  std::vector<LossBreakdown> steps;
};

using StepCallback = std::function<void(int step, int epoch, const LossBreakdown&)>;

// Epoch loop over the train split with the step schedule, validating every val_every
// epochs (and after the last). Writes checkpoint.json and metrics.csv when out_dir is set.
inline TrainResult run_training(const TrainingData& data, const TrainConfig& cfg,
                                const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                                const nlohmann::ordered_json& config_echo = {}, const StepCallback& on_step = {}) {
  cfg.validate();
  const auto train_idx = data.indices(Split::train);
  if (train_idx.empty()) throw EmptySplit(Split::train);
  const auto val_idx = data.indices(Split::val);

  TrainResult res{Model(cfg.model, cfg.seed), {}, {}};
  Adam opt(AdamOptions{0.9, 0.999, 1e-8, cfg.weight_decay});
  Rng order_rng(cfg.seed, 0xba7c4);
  Rng sample_rng(cfg.seed, 0x5a3b1e);
  int step = 0;
  bool capped = false;
  for (int e = 0; e < cfg.epochs && !capped; ++e) {
    const double lr = lr_at_epoch(e, cfg);
    EpochMetrics m;
    m.epoch = e;
    int n = 0;
    for (const auto& idx : stratified_batches(data.manifest, train_idx, cfg.batch_size, order_rng)) {
      LossBreakdown l = train_step(res.model, opt, make_batch(data, idx), cfg.lambda, lr, sample_rng);
      res.steps.push_back(l);
      if (on_step) on_step(step, e, l);
      m.loss_det += l.loss_det;
      m.loss_cls += l.loss_cls;
      m.total += l.total;
      ++n;
      if (++step == cfg.max_steps) {
        capped = true;
        break;
      }
    }
    m.loss_det /= n;
    m.loss_cls /= n;
    m.total /= n;
    const bool last = capped || e + 1 == cfg.epochs;
    if (!val_idx.empty() && ((e + 1) % cfg.val_every == 0 || last)) {
      SplitEvaluation ev = evaluate_model(res.model, data, val_idx);
      m.val_acc = ev.accuracy;
      m.val_f1 = ev.f_score;
      m.val_map = ev.map;
    }
    res.epochs.push_back(m);
  }

  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    nlohmann::ordered_json ck;
    ck["config"] = config_echo;
    ck["params"] = params_to_json(res.model.params());
    std::ofstream(*out_dir / "checkpoint.json") << ck.dump() << '\n';
    write_metrics_csv(*out_dir / "metrics.csv", res.epochs);
  }
  return res;
}

}  // namespace tbattr
