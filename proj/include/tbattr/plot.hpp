#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tbattr/errors.hpp"
#include "tbattr/image_io.hpp"
#include "tbattr/config.hpp"
#include "tbattr/training.hpp"

namespace tbattr {

// One parsed training log.
struct MetricsLog {
  std::string name;
  std::filesystem::path path;
  std::vector<EpochMetrics> rows;
};

inline MetricsLog read_metrics_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MalformedLog(path.string() + ": cannot open");
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != kMetricsHeader) {
    throw MalformedLog(path.string() + ": header is not '" + std::string(kMetricsHeader) + "'");
  }
  MetricsLog log{path.stem().string(), path, {}};
  for (std::size_t n = 2; std::getline(in, line); ++n) {
    line = detail::trim(line);
    if (line.empty()) continue;
    std::vector<double> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (cell.empty() || *end) throw MalformedLog(path.string() + ":" + std::to_string(n) + ": bad value '" + cell + "'");
      f.push_back(v);
    }
    if (f.size() != 7) throw MalformedLog(path.string() + ":" + std::to_string(n) + ": expected 7 columns");
    log.rows.push_back({static_cast<int>(f[0]), f[1], f[2], f[3], f[4], f[5], f[6]});
  }
  return log;
}

// score,recall,precision rows.
inline std::vector<PrPoint> read_pr_curve(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::string line;
  if (!in || !std::getline(in, line) || detail::trim(line) != "score,recall,precision") {
    throw MalformedLog(path.string() + ": not a PR curve file");
  }
  std::vector<PrPoint> pts;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    PrPoint p;
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf", &p.score, &p.recall, &p.precision) != 3) {
      throw MalformedLog(path.string() + ": bad row '" + line + "'");
    }
    pts.push_back(p);
  }
  return pts;
}

inline void write_pr_curve(const std::filesystem::path& path, const std::vector<PrPoint>& curve) {
  std::ofstream out(path);
  if (!out) throw MissingFile(path.string());
  out << "score,recall,precision\n";
  char buf[96];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f\n", p.score, p.recall, p.precision);
    out << buf;
  }
}

namespace plot {

using Color = std::array<std::uint8_t, 3>;

inline const std::vector<Color>& palette() {
  static const std::vector<Color> p{{31, 119, 180}, {214, 39, 40},  {44, 160, 44},  {255, 127, 14}, {148, 103, 189},
                                    {140, 86, 75},  {227, 119, 194}, {127, 127, 127}, {188, 189, 34}, {23, 190, 207}};
  return p;
}

// 5x7 glyphs, one byte per row, bit 4 is the leftmost column. Lower case renders as upper.
inline const std::array<std::uint8_t, 7>& glyph(char ch) {
  static const std::map<char, std::array<std::uint8_t, 7>> font{
      {' ', {0, 0, 0, 0, 0, 0, 0}},
      {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}}, {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
      {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}}, {'D', {0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E}},
      {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}}, {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
      {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}}, {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}}, {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
      {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}}, {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
      {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}}, {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
      {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
      {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}}, {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
      {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}}, {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
      {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
      {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}}, {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
      {'Y', {0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04}}, {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
      {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}}, {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}}, {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
      {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}}, {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
      {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}}, {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
      {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}}, {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
      {'.', {0, 0, 0, 0, 0, 0x0C, 0x0C}},                {'-', {0, 0, 0, 0x1F, 0, 0, 0}},
      {'_', {0, 0, 0, 0, 0, 0, 0x1F}},                   {':', {0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0}},
      {'/', {0, 0x01, 0x02, 0x04, 0x08, 0x10, 0}},       {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}},
      {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}}, {'+', {0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0}},
      {'=', {0, 0, 0x1F, 0, 0x1F, 0, 0}},                {'%', {0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03}},
      {'?', {0x0E, 0x11, 0x01, 0x02, 0x04, 0, 0x04}},
  };
  auto it = font.find(static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
  return it == font.end() ? font.at('?') : it->second;
}

inline void text(RgbImage& img, int x, int y, const std::string& s, Color c = {0, 0, 0}) {
  for (char ch : s) {
    const auto& g = glyph(ch);
    for (int r = 0; r < 7; ++r)
      for (int col = 0; col < 5; ++col)
        if (g[static_cast<std::size_t>(r)] & (0x10 >> col)) img.set(x + col, y + r, c[0], c[1], c[2]);
    x += 6;
  }
}

inline int text_width(const std::string& s) { return static_cast<int>(s.size()) * 6; }

inline void line(RgbImage& img, int x0, int y0, int x1, int y1, Color c, int thickness = 1) {
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    for (int t = 0; t < thickness; ++t) {
      img.set(x0, y0 + t, c[0], c[1], c[2]);
      img.set(x0 + t, y0, c[0], c[1], c[2]);
    }
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

inline std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;  // NaN y values are skipped
};

// Axes with min/max tick labels on a region of the image.
struct Panel {
  int x = 0, y = 0, w = 0, h = 0;
  std::string title, x_label;
  bool fixed_unit_y = false;  // y range [0, 1]
};

inline void draw_panel(RgbImage& img, const Panel& p, const std::vector<Series>& series) {
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const auto& s : series)
    for (auto [x, y] : s.points) {
      if (std::isnan(y) || std::isnan(x)) continue;
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  if (p.fixed_unit_y || !std::isfinite(ymin)) {
    ymin = 0;
    ymax = 1;
  }
  if (!std::isfinite(xmin)) {
    xmin = 0;
    xmax = 1;
  }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;

  const Color axis{0, 0, 0}, grid{225, 225, 225};
  for (int k = 1; k < 4; ++k) {
    const int gy = p.y + p.h * k / 4;
    line(img, p.x, gy, p.x + p.w, gy, grid);
  }
  line(img, p.x, p.y, p.x, p.y + p.h, axis);
  line(img, p.x, p.y + p.h, p.x + p.w, p.y + p.h, axis);
  text(img, p.x, p.y - 12, p.title);
  text(img, p.x - text_width(tick_label(ymax)) - 4, p.y, tick_label(ymax));
  text(img, p.x - text_width(tick_label(ymin)) - 4, p.y + p.h - 7, tick_label(ymin));
  text(img, p.x, p.y + p.h + 4, tick_label(xmin));
  text(img, p.x + p.w - text_width(tick_label(xmax)), p.y + p.h + 4, tick_label(xmax));
  text(img, p.x + (p.w - text_width(p.x_label)) / 2, p.y + p.h + 4, p.x_label);

  auto px = [&](double x) { return p.x + static_cast<int>(std::lround((x - xmin) / (xmax - xmin) * p.w)); };
  auto py = [&](double y) { return p.y + p.h - static_cast<int>(std::lround((y - ymin) / (ymax - ymin) * p.h)); };
  for (std::size_t i = 0; i < series.size(); ++i) {
    const Color c = palette()[i % palette().size()];
    bool have = false;
    int lx = 0, ly = 0;
    for (auto [x, y] : series[i].points) {
      if (std::isnan(y)) {
        have = false;
        continue;
      }
      const int cx = px(x), cy = py(y);
      if (have) line(img, lx, ly, cx, cy, c, 2);
      else line(img, cx, cy, cx, cy, c, 2);
      lx = cx;
      ly = cy;
      have = true;
    }
  }
}

inline void draw_legend(RgbImage& img, int x, int y, const std::vector<std::string>& labels) {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const Color c = palette()[i % palette().size()];
    const int ly = y + static_cast<int>(i) * 12;
    line(img, x, ly + 3, x + 14, ly + 3, c, 2);
    text(img, x + 18, ly, labels[i]);
  }
}

}  // namespace plot

// Legend names: file stems, prefixed with the parent directory where stems collide.
inline std::vector<std::string> legend_names(const std::vector<MetricsLog>& logs) {
  std::map<std::string, int> seen;
  for (const auto& l : logs) ++seen[l.name];
  std::vector<std::string> out;
  for (const auto& l : logs) {
    out.push_back(seen[l.name] > 1 ? l.path.parent_path().filename().string() + "/" + l.name : l.name);
  }
  return out;
}

// loss_curve.png and val_metrics.png over all logs, plus pr_curve_<name>.png for every
// log with a pr_curve.csv beside it. Returns the files written.
inline std::vector<std::filesystem::path> emit_plots(const std::vector<std::filesystem::path>& log_paths,
                                                     const std::filesystem::path& out_dir) {
  if (log_paths.empty()) return {};
  std::vector<MetricsLog> logs;
  for (const auto& p : log_paths) logs.push_back(read_metrics_log(p));
  const auto names = legend_names(logs);
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;

  const int legend_w = 12 + 6 * static_cast<int>(std::max_element(names.begin(), names.end(), [](auto& a, auto& b) {
                                                   return a.size() < b.size();
                                                 })->size()) + 24;
  {
    RgbImage img(560 + legend_w, 360);
    std::vector<plot::Series> s;
    for (std::size_t i = 0; i < logs.size(); ++i) {
      plot::Series ser{names[i], {}};
      for (const auto& r : logs[i].rows) ser.points.emplace_back(r.epoch, r.total);
      s.push_back(std::move(ser));
    }
    plot::draw_panel(img, {60, 30, 480, 290, "total loss", "epoch"}, s);
    plot::draw_legend(img, 560, 30, names);
    written.push_back(out_dir / "loss_curve.png");
    write_png(written.back(), img);
  }
  {
    RgbImage img(560 + legend_w, 3 * 170 + 20);
    const char* titles[] = {"val accuracy", "val f-score", "val map"};
    for (int k = 0; k < 3; ++k) {
      std::vector<plot::Series> s;
      for (std::size_t i = 0; i < logs.size(); ++i) {
        plot::Series ser{names[i], {}};
        for (const auto& r : logs[i].rows) ser.points.emplace_back(r.epoch, k == 0 ? r.val_acc : k == 1 ? r.val_f1 : r.val_map);
        s.push_back(std::move(ser));
      }
      plot::draw_panel(img, {60, 30 + 170 * k, 480, 120, titles[k], "epoch", true}, s);
    }
    plot::draw_legend(img, 560, 30, names);
    written.push_back(out_dir / "val_metrics.png");
    write_png(written.back(), img);
  }
  for (std::size_t i = 0; i < logs.size(); ++i) {
    const auto pr = logs[i].path.parent_path() / "pr_curve.csv";
    if (!std::filesystem::exists(pr)) continue;
    plot::Series ser{names[i], {}};
    for (const auto& p : read_pr_curve(pr)) ser.points.emplace_back(p.recall, p.precision);
    RgbImage img(560 + legend_w, 360);
    plot::draw_panel(img, {60, 30, 480, 290, "precision vs recall", "recall", true}, {ser});
    plot::draw_legend(img, 560, 30, {names[i]});
    std::string file = names[i];
    std::replace(file.begin(), file.end(), '/', '_');
    written.push_back(out_dir / ("pr_curve_" + file + ".png"));
    write_png(written.back(), img);
  }
  return written;
}

}  // namespace tbattr
