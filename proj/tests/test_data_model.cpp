#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "tbattr/tbattr.hpp"

using namespace tbattr;

namespace {

XrayRecord tb_record() {
  XrayRecord r;
  r.image_path = "images/a.png";
  r.width = r.height = 64;
  r.split = Split::train;
  r.label = Label::tb;
  r.attributes = std::vector<int>{1, 0, 0, 1, 0, 0, 0};
  r.boxes = std::vector<BoundingBox>{{10, 12, 30, 28}};
  return r;
}

DatasetManifest two_split_manifest(int n_train, int n_val) {
  DatasetManifest m;
  for (int i = 0; i < n_train + n_val; ++i) {
    XrayRecord r = tb_record();
    r.image_path = "images/" + std::to_string(i) + ".png";
    r.split = i < n_train ? Split::train : Split::val;
    if (i % 3 == 1) {
      r.label = Label::healthy;
      r.boxes = std::vector<BoundingBox>{};
      r.attributes.reset();
    } else if (i % 3 == 2) {
      r.boxes.reset();
    }
    m.records.push_back(r);
  }
  return m;
}

std::filesystem::path temp_file(const std::string& name, const std::string& text) {
  auto dir = std::filesystem::temp_directory_path() / "tbattr_test_data_model";
  std::filesystem::create_directories(dir);
  auto p = dir / name;
  std::ofstream(p) << text;
  return p;
}

}  // namespace

TEST(ValidateRecord, ValidTbRecordIsOk) {
  const auto v = validate_record(tb_record(), 7);
  EXPECT_TRUE(v.ok()) << v.summary();
}

TEST(ValidateRecord, DegenerateBox) {
  XrayRecord r = tb_record();
  (*r.boxes)[0].x_max = (*r.boxes)[0].x_min;
  EXPECT_TRUE(validate_record(r, 7).has("degenerate box"));
}

TEST(ValidateRecord, HealthyWithBoxes) {
  XrayRecord r = tb_record();
  r.label = Label::healthy;
  EXPECT_TRUE(validate_record(r, 7).has("healthy record has boxes"));
}

TEST(ValidateRecord, ReportsEveryViolation) {
  XrayRecord r = tb_record();
  r.label = Label::healthy;
  r.width = 0;
  r.attributes = std::vector<int>{1, 2};
  (*r.boxes)[0] = {5, 5, 5, 9};
  const auto v = validate_record(r, 7);
  EXPECT_TRUE(v.has("non-positive image size"));
  EXPECT_TRUE(v.has("attribute length"));
  EXPECT_TRUE(v.has("non-binary attribute"));
  EXPECT_TRUE(v.has("degenerate box"));
  EXPECT_TRUE(v.has("healthy record has boxes"));
}

TEST(ValidateRecord, TbWithoutAnySupervision) {
  XrayRecord r = tb_record();
  r.attributes.reset();
  r.boxes.reset();
  EXPECT_TRUE(validate_record(r, 7).has("no supervision"));
  r.label = Label::healthy;
  EXPECT_TRUE(validate_record(r, 7).ok());
}

TEST(Manifest, CountsBySplit) {
  std::istringstream in(format_manifest(two_split_manifest(1700, 300)));
  const DatasetManifest m = parse_manifest(in);
  EXPECT_EQ(m.count(Split::train), 1700u);
  EXPECT_EQ(m.count(Split::val), 300u);
}

TEST(Manifest, SaveLoadRoundTrip) {
  DatasetManifest m = two_split_manifest(5, 2);
  (*m.records[0].boxes)[0] = {0.125, 1.5, 33.75, 40.0625};
  const auto path = std::filesystem::temp_directory_path() / "tbattr_test_data_model" / "rt.jsonl";
  save_manifest(m, path);
  EXPECT_EQ(load_manifest(path), m);
}

TEST(Manifest, EmptyFile) {
  EXPECT_THROW(load_manifest(temp_file("empty.jsonl", "")), EmptyManifest);
  EXPECT_THROW(load_manifest(temp_file("blank.jsonl", "\n  \n")), EmptyManifest);
}

TEST(Manifest, MissingFile) {
  EXPECT_THROW(load_manifest("/nonexistent/manifest.jsonl"), MissingFile);
}

TEST(Manifest, ShortAttributeVectorIsMalformedWithLineNumber) {
  DatasetManifest m = two_split_manifest(3, 1);
  m.records[2].attributes = std::vector<int>(6, 0);
  std::istringstream in(format_manifest(m));
  try {
    parse_manifest(in);
    FAIL() << "expected MalformedRecord";
  } catch (const MalformedRecord& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(Manifest, SchemaErrors) {
  const std::string good = record_to_json(tb_record()).dump();
  for (const std::string& bad : {std::string("not json"), std::string("[1,2]"),
                                 std::string(R"({"image_path":"a","width":1})"),
                                 std::string(R"({"image_path":"a","width":64,"height":64,"split":"test","label":"tb","attributes":null,"boxes":[[1,1,2,2]]})"),
                                 std::string(R"({"image_path":"a","width":64,"height":64,"split":"val","label":"tb","attributes":null,"boxes":[[1,1,2]]})")}) {
    std::istringstream in(good + "\n" + bad + "\n");
    EXPECT_THROW(parse_manifest(in), MalformedRecord) << bad;
  }
}

TEST(Manifest, BothSplitsRequired) {
  std::istringstream only_train(format_manifest(two_split_manifest(4, 0)));
  EXPECT_THROW(parse_manifest(only_train), EmptySplit);
  DatasetManifest v = two_split_manifest(0, 3);
  std::istringstream only_val(format_manifest(v));
  EXPECT_THROW(parse_manifest(only_val), EmptySplit);
}

TEST(Record, DetectionSupervision) {
  XrayRecord r = tb_record();
  EXPECT_TRUE(r.has_detection_supervision());
  r.boxes.reset();
  EXPECT_FALSE(r.has_detection_supervision());
  EXPECT_TRUE(r.detection_targets().empty());
  r.label = Label::sick_non_tb;
  EXPECT_TRUE(r.has_detection_supervision());
}
