#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "tbattr/synthetic.hpp"
#include "tbattr/training.hpp"

namespace tbattr {

enum class ValueType { integer, real, boolean, text };

struct ConfigKey {
  const char* name;
  const char* fallback;
  ValueType type;
};

// Every recognised key with its default. fpn.channels, attn.head_dim and attr.channels
// follow the backbone preset unless set explicitly.
inline const std::vector<ConfigKey>& config_schema() {
  using V = ValueType;
  static const std::vector<ConfigKey> keys{
      {"seed", "0", V::integer},
      {"epochs", "60", V::integer},
      {"batch_size", "8", V::integer},
      {"initial_lr", "1e-3", V::real},
      {"lr_decay_every", "20", V::integer},
      {"lr_decay_factor", "10", V::real},
      {"weight_decay", "1e-4", V::real},
      {"lambda", "1.0", V::real},
      {"val_every", "1", V::integer},
      {"max_steps", "0", V::integer},
      {"scale_mode", "multi", V::text},
      {"ablation.group_conv", "true", V::boolean},
      {"ablation.a2_attn", "true", V::boolean},
      {"ablation.at_attn", "true", V::boolean},
      {"backbone.preset", "tiny", V::text},
      {"backbone.width", "8", V::integer},
      {"backbone.depth", "1", V::integer},
      {"fpn.channels", "64", V::integer},
      {"attr.n_attributes", "7", V::integer},
      {"attr.channels", "8", V::integer},
      {"attr.kernel_size", "3", V::integer},
      {"attn.head_dim", "8", V::integer},
      {"attn.downsample_base", "16", V::integer},
      {"atattn.normalize_weights", "false", V::boolean},
      {"atattn.proj_dim", "0", V::integer},
      {"anchor.size_per_stride", "2", V::real},
      {"rpn.pre_nms_topk", "1000", V::integer},
      {"rpn.post_nms_topk", "256", V::integer},
      {"rpn.nms_thresh", "0.7", V::real},
      {"rpn.batch_size", "256", V::integer},
      {"rpn.positive_fraction", "0.5", V::real},
      {"rpn.pos_iou", "0.7", V::real},
      {"rpn.neg_iou", "0.3", V::real},
      {"roi.batch_size", "64", V::integer},
      {"roi.positive_fraction", "0.25", V::real},
      {"roi.fg_iou", "0.5", V::real},
      {"det.score_thresh", "0.05", V::real},
      {"det.nms_thresh", "0.5", V::real},
      {"det.max_detections", "100", V::integer},
      {"data.manifest", "", V::text},
      {"synth.seed", "0", V::integer},
      {"synth.n", "16", V::integer},
      {"synth.size", "64", V::integer},
      {"synth.tb_fraction", "0.5", V::real},
      {"synth.attribute_only_fraction", "0.25", V::real},
      {"synth.box_only_fraction", "0.25", V::real},
      {"synth.val_fraction", "0.15", V::real},
  };
  return keys;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline const ConfigKey* find_key(const std::string& name) {
  for (const auto& k : config_schema())
    if (name == k.name) return &k;
  return nullptr;
}

inline void check_value(const ConfigKey& k, const std::string& v) {
  auto bad = [&] { return ConfigError("key " + std::string(k.name) + ": cannot parse '" + v + "'"); };
  char* end = nullptr;
  switch (k.type) {
    case ValueType::integer:
      std::strtoll(v.c_str(), &end, 10);
      if (v.empty() || *end) throw bad();
      break;
    case ValueType::real:
      std::strtod(v.c_str(), &end);
      if (v.empty() || *end) throw bad();
      break;
    case ValueType::boolean:
      if (v != "true" && v != "false" && v != "1" && v != "0") throw bad();
      break;
    case ValueType::text:
      break;
  }
}

}  // namespace detail

// Flat key = value configuration; later sources override earlier ones.
class Config {
 public:
  Config() {
    for (const auto& k : config_schema()) values_[k.name] = k.fallback;
  }

  void set(const std::string& key, const std::string& value) {
    const ConfigKey* k = detail::find_key(key);
    if (!k) throw ConfigError("unknown config key '" + key + "'");
    detail::check_value(*k, value);
    values_[key] = value;
    explicit_.insert(key);
  }

  // "key=value"
  void apply_override(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
    set(detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }

  // Lines "key = value"; '#' starts a comment.
  void load_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingFile(path.string());
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      line = detail::trim(line);
      if (line.empty()) continue;
      try {
        apply_override(line);
      } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ":" + std::to_string(n) + ": " + e.what());
      }
    }
  }

  bool is_explicit(const std::string& key) const { return explicit_.count(key) != 0; }

  std::string get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    if (!is_explicit(key) && values_.at("backbone.preset") == "resnet50_like") {
      if (key == "fpn.channels") return "256";
      if (key == "attn.head_dim" || key == "attr.channels") return "32";
    }
    return it->second;
  }

  long long get_int(const std::string& key) const { return std::strtoll(get(key).c_str(), nullptr, 10); }
  double get_double(const std::string& key) const { return std::strtod(get(key).c_str(), nullptr); }
  bool get_bool(const std::string& key) const {
    const std::string v = get(key);
    return v == "true" || v == "1";
  }

  // Resolved values of every key, in schema order.
  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    for (const auto& k : config_schema()) {
      switch (k.type) {
        case ValueType::integer: j[k.name] = get_int(k.name); break;
        case ValueType::real: j[k.name] = get_double(k.name); break;
        case ValueType::boolean: j[k.name] = get_bool(k.name); break;
        case ValueType::text: j[k.name] = get(k.name); break;
      }
    }
    return j;
  }

  std::string to_text() const {
    std::string s;
    for (const auto& k : config_schema()) s += std::string(k.name) + " = " + get(k.name) + "\n";
    return s;
  }

 private:
  std::map<std::string, std::string> values_;
  std::set<std::string> explicit_;
};

inline ModelConfig model_config(const Config& c) {
  ModelConfig m;
  m.backbone = backbone_preset(c.get("backbone.preset"), static_cast<int>(c.get_int("backbone.width")),
                               static_cast<int>(c.get_int("backbone.depth")));
  m.backbone.fpn_channels = static_cast<int>(c.get_int("fpn.channels"));
  m.attributes.n_attributes = static_cast<int>(c.get_int("attr.n_attributes"));
  m.attributes.channels_per_attribute = static_cast<int>(c.get_int("attr.channels"));
  m.attributes.kernel_size = static_cast<int>(c.get_int("attr.kernel_size"));
  m.ablation = {c.get_bool("ablation.group_conv"), c.get_bool("ablation.a2_attn"), c.get_bool("ablation.at_attn")};
  m.attributes.group_conv = m.ablation.group_conv;
  m.scale_mode = parse_scale_mode(c.get("scale_mode"));
  m.head_dim = static_cast<int>(c.get_int("attn.head_dim"));
  m.downsample_base = static_cast<int>(c.get_int("attn.downsample_base"));
  m.normalize_weights = c.get_bool("atattn.normalize_weights");
  m.proj_dim = static_cast<int>(c.get_int("atattn.proj_dim"));

  DetectorConfig& d = m.detector;
  d.anchor_size_per_stride = c.get_double("anchor.size_per_stride");
  d.rpn_pre_nms_topk = static_cast<int>(c.get_int("rpn.pre_nms_topk"));
  d.rpn_post_nms_topk = static_cast<int>(c.get_int("rpn.post_nms_topk"));
  d.rpn_nms_thresh = c.get_double("rpn.nms_thresh");
  d.rpn_batch_size = static_cast<int>(c.get_int("rpn.batch_size"));
  d.rpn_positive_fraction = c.get_double("rpn.positive_fraction");
  d.rpn_pos_iou = c.get_double("rpn.pos_iou");
  d.rpn_neg_iou = c.get_double("rpn.neg_iou");
  d.roi_batch_size = static_cast<int>(c.get_int("roi.batch_size"));
  d.roi_positive_fraction = c.get_double("roi.positive_fraction");
  d.roi_fg_iou = c.get_double("roi.fg_iou");
  d.score_thresh = c.get_double("det.score_thresh");
  d.det_nms_thresh = c.get_double("det.nms_thresh");
  d.max_detections = static_cast<int>(c.get_int("det.max_detections"));
  return m;
}

inline TrainConfig train_config(const Config& c) {
  TrainConfig t;
  t.model = model_config(c);
  t.epochs = static_cast<int>(c.get_int("epochs"));
  t.batch_size = static_cast<int>(c.get_int("batch_size"));
  t.initial_lr = c.get_double("initial_lr");
  t.lr_decay_every = static_cast<int>(c.get_int("lr_decay_every"));
  t.lr_decay_factor = c.get_double("lr_decay_factor");
  t.weight_decay = c.get_double("weight_decay");
  t.seed = static_cast<std::uint64_t>(c.get_int("seed"));
  t.lambda = c.get_double("lambda");
  t.val_every = static_cast<int>(c.get_int("val_every"));
  t.max_steps = static_cast<int>(c.get_int("max_steps"));
  t.validate();
  return t;
}

inline SynthOptions synth_options(const Config& c) {
  SynthOptions s;
  s.seed = static_cast<std::uint64_t>(c.get_int("synth.seed"));
  s.n_records = static_cast<int>(c.get_int("synth.n"));
  s.image_size = static_cast<int>(c.get_int("synth.size"));
  s.n_attributes = static_cast<int>(c.get_int("attr.n_attributes"));
  s.tb_fraction = c.get_double("synth.tb_fraction");
  s.attribute_only_fraction = c.get_double("synth.attribute_only_fraction");
  s.box_only_fraction = c.get_double("synth.box_only_fraction");
  s.val_fraction = c.get_double("synth.val_fraction");
  return s;
}

// Rebuilds a Config from a checkpoint's config echo.
inline Config config_from_json(const nlohmann::json& j) {
  Config c;
  for (const auto& [k, v] : j.items()) {
    if (!detail::find_key(k)) continue;
    if (v.is_string()) c.set(k, v.get<std::string>());
    else if (v.is_boolean()) c.set(k, v.get<bool>() ? "true" : "false");
    else if (v.is_number_integer()) c.set(k, std::to_string(v.get<long long>()));
    else c.set(k, v.dump());
  }
  return c;
}

}  // namespace tbattr
