#include <gtest/gtest.h>

#include <filesystem>

#include "pinned.hpp"
#include "tbattr/tbattr.hpp"

using namespace tbattr;

namespace {

SynthOptions small(std::uint64_t seed = 0, int n = 10, int size = 64) {
  SynthOptions o;
  o.seed = seed;
  o.n_records = n;
  o.image_size = size;
  return o;
}

}  // namespace

TEST(Synthetic, Deterministic) {
  const auto a = synthesize_dataset(small());
  const auto b = synthesize_dataset(small());
  EXPECT_EQ(a.manifest, b.manifest);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(format_manifest(a.manifest), format_manifest(b.manifest));
  EXPECT_NE(dataset_digest(a), dataset_digest(synthesize_dataset(small(1))));
}

TEST(Synthetic, PinnedDigest) { EXPECT_EQ(dataset_digest(synthesize_dataset(small())), kPinnedDigest); }

TEST(Synthetic, RecordsValidateAndBothSplitsPresent) {
  const auto ds = synthesize_dataset(small(3, 40));
  EXPECT_GT(ds.manifest.count(Split::train), 0u);
  EXPECT_GT(ds.manifest.count(Split::val), 0u);
  for (const auto& r : ds.manifest.records) {
    const auto v = validate_record(r, ds.manifest.n_attributes);
    EXPECT_TRUE(v.ok()) << r.image_path << ": " << v.summary();
  }
}

TEST(Synthetic, BoxesInsideImage) {
  const auto ds = synthesize_dataset(small(5, 60, 64));
  for (const auto& r : ds.manifest.records)
    for (const auto& b : r.detection_targets()) {
      EXPECT_GE(b.x_min, 0);
      EXPECT_GE(b.y_min, 0);
      EXPECT_LT(b.x_max, 64);
      EXPECT_LT(b.y_max, 64);
    }
}

TEST(Synthetic, EachBoxMatchesExactlyOneBlob) {
  const auto ds = synthesize_dataset(small(7, 60));
  int checked = 0;
  for (std::size_t i = 0; i < ds.manifest.records.size(); ++i) {
    for (const auto& b : ds.manifest.records[i].detection_targets()) {
      int hits = 0;
      for (const auto& l : ds.lesions[i]) {
        const auto s = l.support();
        if (iou(b, s) >= 0.5) ++hits;
      }
      EXPECT_EQ(hits, 1);
      ++checked;
    }
  }
  EXPECT_GT(checked, 0);
}

TEST(Synthetic, BlobsAreBright) {
  const auto ds = synthesize_dataset(small(9, 30));
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    double mean = 0;
    for (auto p : ds.images[i].pixels) mean += p;
    mean /= static_cast<double>(ds.images[i].pixels.size());
    for (const auto& l : ds.lesions[i]) {
      EXPECT_GT(ds.images[i].at(static_cast<int>(l.cx), static_cast<int>(l.cy)), mean + 60) << "record " << i;
    }
  }
}

TEST(Synthetic, HealthyRecordsHaveNoBitsAndNoBlobs) {
  const auto ds = synthesize_dataset(small(11, 60));
  for (std::size_t i = 0; i < ds.manifest.records.size(); ++i) {
    const auto& r = ds.manifest.records[i];
    if (r.label != Label::tb) {
      EXPECT_TRUE(ds.lesions[i].empty());
    }
    if (r.label == Label::healthy) {
      for (int b : ds.true_attributes[i]) EXPECT_EQ(b, 0);
    }
    if (r.has_attributes()) {
      EXPECT_EQ(*r.attributes, ds.true_attributes[i]);
    }
  }
}

TEST(Synthetic, SupervisionFractions) {
  SynthOptions o = small(2, 200);
  o.attribute_only_fraction = 0.0;
  o.box_only_fraction = 0.0;
  for (const auto& r : synthesize_dataset(o).manifest.records) {
    EXPECT_TRUE(r.has_attributes());
    EXPECT_TRUE(r.boxes.has_value());
  }
  o.attribute_only_fraction = 1.0;
  for (const auto& r : synthesize_dataset(o).manifest.records) EXPECT_FALSE(r.boxes.has_value());
}

TEST(Synthetic, InvalidSize) {
  EXPECT_THROW(synthesize_dataset(small(0, 10, 100)), InvalidSize);
  EXPECT_THROW(synthesize_dataset(small(0, 1, 64)), InvalidSize);
}

TEST(Synthetic, WrittenCorpusLoadsBack) {
  const auto ds = synthesize_dataset(small(4, 6, 32));
  const auto dir = std::filesystem::temp_directory_path() / "tbattr_test_synth";
  std::filesystem::remove_all(dir);
  const auto path = write_dataset(ds, dir);
  const auto m = load_manifest(path, ds.manifest.n_attributes);
  EXPECT_EQ(m, ds.manifest);
  EXPECT_EQ(read_png(resolve_image(path, m.records[3])), ds.images[3]);
}
