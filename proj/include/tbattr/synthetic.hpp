#pragma once

// Desk-scale stand-in for the attribute-labeled and box-labeled chest X-ray corpora.
//
// Rendering rule (fixed, so attribute bits are recoverable from pixels):
//   * background: 0.30 + 0.10 * y/S plus N(0, 0.02) noise, in [0, 1] intensity units;
//   * attribute k set: a disc of radius S/6 filled with sinusoidal stripes of period
//     4 px and amplitude 0.12, oriented at angle k * pi / N_a;
//   * tb records only: bright lesions of amplitude 0.45 with a flat top and a quartic
//     edge falloff that reaches zero at the lesion radius. One lesion, or two when
//     attribute min(5, N_a-1) ("multiple nodules") is set; radius in [S/16, S/10],
//     times 1.5 when attribute min(1, N_a-1) ("consolidation") is set.
// Healthy records carry no attribute bits. tb records carry at least one. Each box is
// the bounding square of one lesion disc; lesions never overlap.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <vector>

#include "tbattr/data_model.hpp"
#include "tbattr/image_io.hpp"
#include "tbattr/random.hpp"

namespace tbattr {

struct SynthOptions {
  std::uint64_t seed = 0;
  int n_records = 16;
  int image_size = 64;
  int n_attributes = kDefaultAttributes;
  double tb_fraction = 0.5;
  double attribute_only_fraction = 0.25;  // attributes present, boxes null
  double box_only_fraction = 0.25;        // boxes present, attributes null
  double val_fraction = 0.15;
};

struct Lesion {
  double cx = 0, cy = 0, radius = 0;

  // Bounding box of the lesion's nonzero support.
  BoundingBox support() const { return {cx - radius, cy - radius, cx + radius, cy + radius}; }
};

struct SyntheticDataset {
  DatasetManifest manifest;
  std::vector<GrayImage> images;
  std::vector<std::vector<Lesion>> lesions;
  std::vector<std::vector<int>> true_attributes;  // regardless of what the manifest reveals
};

namespace detail {

inline void render_stripes(std::vector<double>& img, int S, double cx, double cy, double radius, double angle) {
  const double kx = std::cos(angle), ky = std::sin(angle);
  const double omega = 2.0 * std::numbers::pi / 4.0;
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      if (dx * dx + dy * dy >= radius * radius) continue;
      img[static_cast<std::size_t>(y) * S + x] += 0.12 * std::sin(omega * (dx * kx + dy * ky));
    }
}

inline void render_lesion(std::vector<double>& img, int S, const Lesion& l) {
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const double dx = x + 0.5 - l.cx, dy = y + 0.5 - l.cy;
      const double d2 = (dx * dx + dy * dy) / (l.radius * l.radius);
      if (d2 >= 1.0) continue;
      img[static_cast<std::size_t>(y) * S + x] += 0.45 * (1.0 - d2 * d2);
    }
}

}  // namespace detail

inline SyntheticDataset synthesize_dataset(const SynthOptions& opt) {
  if (opt.n_records < 2) throw InvalidSize("synthesize_dataset needs at least 2 records");
  if (opt.image_size <= 0 || opt.image_size % 32 != 0) {
    throw InvalidSize("image size " + std::to_string(opt.image_size) + " is not a positive multiple of 32");
  }
  if (opt.n_attributes < 1) throw InvalidSize("n_attributes must be positive");

  const int S = opt.image_size;
  const int Na = opt.n_attributes;
  const int multi_bit = std::min(5, Na - 1);
  const int large_bit = std::min(1, Na - 1);
  const int n_val = std::clamp(static_cast<int>(std::lround(opt.n_records * opt.val_fraction)), 1, opt.n_records - 1);
  const int n_train = opt.n_records - n_val;

  SyntheticDataset ds;
  ds.manifest.n_attributes = Na;
  for (int i = 0; i < opt.n_records; ++i) {
    Rng rng(opt.seed, static_cast<std::uint64_t>(i));
    XrayRecord r;
    char name[32];
    std::snprintf(name, sizeof name, "images/%06d.png", i);
    r.image_path = name;
    r.width = r.height = S;
    r.split = i < n_train ? Split::train : Split::val;

    const double u = rng.uniform();
    r.label = u < opt.tb_fraction ? Label::tb
              : u < opt.tb_fraction + (1.0 - opt.tb_fraction) / 2 ? Label::healthy
                                                                  : Label::sick_non_tb;

    std::vector<int> bits(static_cast<std::size_t>(Na), 0);
    if (r.label != Label::healthy) {
      for (int& b : bits) b = rng.bernoulli(0.35) ? 1 : 0;
      if (r.label == Label::tb && std::count(bits.begin(), bits.end(), 1) == 0) bits[rng.index(bits.size())] = 1;
      if (r.label == Label::sick_non_tb) {
        bits[static_cast<std::size_t>(multi_bit)] = 0;
        bits[static_cast<std::size_t>(large_bit)] = 0;
      }
    }

    std::vector<double> img(static_cast<std::size_t>(S) * S);
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) img[static_cast<std::size_t>(y) * S + x] = 0.30 + 0.10 * y / S + 0.02 * rng.normal();

    for (int k = 0; k < Na; ++k) {
      if (!bits[static_cast<std::size_t>(k)]) continue;
      const double rad = S / 6.0;
      detail::render_stripes(img, S, rng.uniform(rad, S - rad), rng.uniform(rad, S - rad), rad,
                             k * std::numbers::pi / Na);
    }

    std::vector<Lesion> lesions;
    if (r.label == Label::tb) {
      const int count = 1 + bits[static_cast<std::size_t>(multi_bit)];
      for (int n = 0; n < count; ++n) {
        double radius = rng.uniform(S / 16.0, S / 10.0) * (bits[static_cast<std::size_t>(large_bit)] ? 1.5 : 1.0);
        for (int attempt = 0;; ++attempt) {
          Lesion l{rng.uniform(radius + 1.0, S - radius - 1.0), rng.uniform(radius + 1.0, S - radius - 1.0), radius};
          bool clear = true;
          for (const auto& o : lesions) {
            if (std::hypot(l.cx - o.cx, l.cy - o.cy) < l.radius + o.radius + 2.0) clear = false;
          }
          if (clear) {
            lesions.push_back(l);
            break;
          }
          if (attempt % 20 == 19) radius *= 0.8;
        }
      }
      for (const auto& l : lesions) detail::render_lesion(img, S, l);
    }

    GrayImage gray{S, S, std::vector<std::uint8_t>(img.size())};
    for (std::size_t p = 0; p < img.size(); ++p) {
      gray.pixels[p] = static_cast<std::uint8_t>(std::lround(std::clamp(img[p], 0.0, 1.0) * 255.0));
    }

    const double v = rng.uniform();
    const bool attr_only = v < opt.attribute_only_fraction;
    const bool box_only = !attr_only && v < opt.attribute_only_fraction + opt.box_only_fraction;
    if (!box_only) r.attributes = bits;
    if (!attr_only) {
      std::vector<BoundingBox> boxes;
      for (const auto& l : lesions) boxes.push_back(l.support());
      r.boxes = std::move(boxes);
    }

    ds.manifest.records.push_back(std::move(r));
    ds.images.push_back(std::move(gray));
    ds.lesions.push_back(std::move(lesions));
    ds.true_attributes.push_back(std::move(bits));
  }
  return ds;
}

// Writes manifest.jsonl and images/ under dir; returns the manifest path.
inline std::filesystem::path write_dataset(const SyntheticDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  for (std::size_t i = 0; i < ds.images.size(); ++i) write_png(dir / ds.manifest.records[i].image_path, ds.images[i]);
  const auto path = dir / "manifest.jsonl";
  save_manifest(ds.manifest, path);
  return path;
}

// SHA-256 over the manifest text followed by every encoded image.
inline std::string dataset_digest(const SyntheticDataset& ds) {
  const std::string text = format_manifest(ds.manifest);
  std::vector<std::uint8_t> bytes(text.begin(), text.end());
  for (const auto& img : ds.images) {
    auto png = encode_png(img);
    bytes.insert(bytes.end(), png.begin(), png.end());
  }
  return sha256_hex(bytes);
}

}  // namespace tbattr
