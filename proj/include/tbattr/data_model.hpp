#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tbattr/errors.hpp"

namespace tbattr {

inline constexpr int kDefaultAttributes = 7;

enum class Split { train, val };
enum class Label { healthy, sick_non_tb, tb };

inline const char* to_string(Split s) { return s == Split::train ? "train" : "val"; }

inline const char* to_string(Label l) {
  switch (l) {
    case Label::healthy: return "healthy";
    case Label::sick_non_tb: return "sick_non_tb";
    case Label::tb: return "tb";
  }
  return "?";
}

inline std::optional<Split> parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  return std::nullopt;
}

inline std::optional<Label> parse_label(const std::string& s) {
  if (s == "healthy") return Label::healthy;
  if (s == "sick_non_tb") return Label::sick_non_tb;
  if (s == "tb") return Label::tb;
  return std::nullopt;
}

// Corner box in continuous pixel coordinates, origin top-left. Category is always tb.
struct BoundingBox {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool operator==(const BoundingBox&) const = default;
};

struct XrayRecord {
  std::string image_path;
  int width = 0;
  int height = 0;
  Split split = Split::train;
  Label label = Label::healthy;
  std::optional<std::vector<int>> attributes;
  std::optional<std::vector<BoundingBox>> boxes;

  bool has_attributes() const { return attributes.has_value(); }

  // Boxes present, or a negative label (the whole image is background).
  bool has_detection_supervision() const { return boxes.has_value() || label != Label::tb; }

  std::vector<BoundingBox> detection_targets() const { return boxes.value_or(std::vector<BoundingBox>{}); }

  bool operator==(const XrayRecord&) const = default;
};

struct DatasetManifest {
  std::vector<XrayRecord> records;
  int n_attributes = kDefaultAttributes;

  std::size_t count(Split s) const {
    std::size_t n = 0;
    for (const auto& r : records) n += r.split == s;
    return n;
  }

  bool operator==(const DatasetManifest&) const = default;
};

struct Violation {
  std::string code;
  std::string detail;
};

struct ValidationResult {
  std::vector<Violation> violations;

  bool ok() const { return violations.empty(); }
  bool has(const std::string& code) const {
    for (const auto& v : violations)
      if (v.code == code) return true;
    return false;
  }
  std::string summary() const {
    std::string s;
    for (const auto& v : violations) s += (s.empty() ? "" : "; ") + v.code + (v.detail.empty() ? "" : " (" + v.detail + ")");
    return s;
  }
};

// Collects every violated record invariant.
inline ValidationResult validate_record(const XrayRecord& r, int n_attributes) {
  ValidationResult res;
  auto add = [&](std::string code, std::string detail = {}) { res.violations.push_back({std::move(code), std::move(detail)}); };

  if (r.image_path.empty()) add("empty image path");
  if (r.width <= 0 || r.height <= 0) add("non-positive image size");

  if (r.attributes) {
    if (static_cast<int>(r.attributes->size()) != n_attributes) {
      add("attribute length", std::to_string(r.attributes->size()) + " != " + std::to_string(n_attributes));
    }
    for (int v : *r.attributes) {
      if (v != 0 && v != 1) {
        add("non-binary attribute");
        break;
      }
    }
  }

  if (r.boxes) {
    for (std::size_t i = 0; i < r.boxes->size(); ++i) {
      const auto& b = (*r.boxes)[i];
      const std::string which = "box " + std::to_string(i);
      if (!std::isfinite(b.x_min) || !std::isfinite(b.y_min) || !std::isfinite(b.x_max) || !std::isfinite(b.y_max)) {
        add("non-finite box", which);
        continue;
      }
      if (!(b.x_min < b.x_max) || !(b.y_min < b.y_max)) add("degenerate box", which);
      if (b.x_min < 0 || b.y_min < 0 || b.x_max > r.width || b.y_max > r.height) add("box outside image", which);
    }
    if (r.label == Label::healthy && !r.boxes->empty()) add("healthy record has boxes");
    if (r.label == Label::sick_non_tb && !r.boxes->empty()) add("sick_non_tb record has boxes");
    if (r.label == Label::tb && r.boxes->empty()) add("tb record has empty box list");
  }

  if (!r.attributes && !r.has_detection_supervision()) add("no supervision");
  return res;
}

// ---------------------------------------------------------------------------
// Line-delimited JSON wire format
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json record_to_json(const XrayRecord& r) {
  nlohmann::ordered_json j;
  j["image_path"] = r.image_path;
  j["width"] = r.width;
  j["height"] = r.height;
  j["split"] = to_string(r.split);
  j["label"] = to_string(r.label);
  j["attributes"] = r.attributes ? nlohmann::ordered_json(*r.attributes) : nlohmann::ordered_json(nullptr);
  if (r.boxes) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& b : *r.boxes) arr.push_back({b.x_min, b.y_min, b.x_max, b.y_max});
    j["boxes"] = std::move(arr);
  } else {
    j["boxes"] = nullptr;
  }
  return j;
}

inline XrayRecord record_from_json(const nlohmann::json& j, std::size_t line) {
  static const char* const keys[] = {"image_path", "width", "height", "split", "label", "attributes", "boxes"};
  if (!j.is_object()) throw MalformedRecord(line, "record is not a JSON object");
  if (j.size() != std::size(keys)) throw MalformedRecord(line, "expected exactly 7 keys");
  for (const char* k : keys)
    if (!j.contains(k)) throw MalformedRecord(line, std::string("missing key ") + k);

  XrayRecord r;
  try {
    if (!j["image_path"].is_string()) throw MalformedRecord(line, "image_path must be a string");
    if (!j["width"].is_number_integer() || !j["height"].is_number_integer()) throw MalformedRecord(line, "width/height must be integers");
    r.image_path = j["image_path"].get<std::string>();
    r.width = j["width"].get<int>();
    r.height = j["height"].get<int>();
    auto split = parse_split(j["split"].is_string() ? j["split"].get<std::string>() : "");
    if (!split) throw MalformedRecord(line, "split must be \"train\" or \"val\"");
    r.split = *split;
    auto label = parse_label(j["label"].is_string() ? j["label"].get<std::string>() : "");
    if (!label) throw MalformedRecord(line, "unknown label");
    r.label = *label;

    const auto& a = j["attributes"];
    if (!a.is_null()) {
      if (!a.is_array()) throw MalformedRecord(line, "attributes must be an array or null");
      std::vector<int> attrs;
      for (const auto& v : a) {
        if (!v.is_number_integer()) throw MalformedRecord(line, "attribute values must be integers");
        attrs.push_back(v.get<int>());
      }
      r.attributes = std::move(attrs);
    }

    const auto& b = j["boxes"];
    if (!b.is_null()) {
      if (!b.is_array()) throw MalformedRecord(line, "boxes must be an array or null");
      std::vector<BoundingBox> boxes;
      for (const auto& box : b) {
        if (!box.is_array() || box.size() != 4) throw MalformedRecord(line, "box must be [x_min, y_min, x_max, y_max]");
        for (const auto& c : box)
          if (!c.is_number()) throw MalformedRecord(line, "box coordinates must be numbers");
        boxes.push_back({box[0].get<double>(), box[1].get<double>(), box[2].get<double>(), box[3].get<double>()});
      }
      r.boxes = std::move(boxes);
    }
  } catch (const nlohmann::json::exception& e) {
    throw MalformedRecord(line, e.what());
  }
  return r;
}

struct EmptySplit : Error {
  explicit EmptySplit(Split s) : Error(std::string("manifest has no ") + to_string(s) + " records") {}
};

inline DatasetManifest parse_manifest(std::istream& in, int n_attributes = kDefaultAttributes) {
  DatasetManifest m;
  m.n_attributes = n_attributes;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw MalformedRecord(line, e.what());
    }
    XrayRecord r = record_from_json(j, line);
    if (auto v = validate_record(r, n_attributes); !v.ok()) throw MalformedRecord(line, v.summary());
    m.records.push_back(std::move(r));
  }
  if (m.records.empty()) throw EmptyManifest();
  if (m.count(Split::train) == 0) throw EmptySplit(Split::train);
  if (m.count(Split::val) == 0) throw EmptySplit(Split::val);
  return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path, int n_attributes = kDefaultAttributes) {
  if (!std::filesystem::is_regular_file(path)) throw MissingFile(path.string());
  std::ifstream in(path);
  if (!in) throw MissingFile(path.string());
  return parse_manifest(in, n_attributes);
}

inline std::string format_manifest(const DatasetManifest& m) {
  std::string out;
  for (const auto& r : m.records) out += record_to_json(r).dump() + "\n";
  return out;
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << format_manifest(m);
}

// Image paths in a manifest are relative to the manifest's directory unless absolute.
inline std::filesystem::path resolve_image(const std::filesystem::path& manifest_path, const XrayRecord& r) {
  std::filesystem::path p(r.image_path);
  return p.is_absolute() ? p : manifest_path.parent_path() / p;
}

}  // namespace tbattr
