#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "tbattr/detector.hpp"
#include "tbattr/model.hpp"

namespace tbattr {

using Matrix = std::vector<std::vector<double>>;
using LabelMatrix = std::vector<std::vector<int>>;

namespace detail {

inline void require_same_grid(const Matrix& p, const LabelMatrix& y, const char* what) {
  if (p.size() != y.size()) throw ShapeError(std::string(what) + ": sample counts differ");
  if (p.empty()) throw ShapeError(std::string(what) + ": no samples");
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i].size() != y[i].size() || p[i].size() != p[0].size()) {
      throw ShapeError(std::string(what) + ": row " + std::to_string(i) + " has a mismatched width");
    }
  }
}

}  // namespace detail

// Fraction of cells where (p >= threshold) equals the label.
inline double compute_accuracy(const Matrix& probabilities, const LabelMatrix& labels, double threshold = 0.5) {
  detail::require_same_grid(probabilities, labels, "compute_accuracy");
  std::size_t right = 0, total = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t j = 0; j < labels[i].size(); ++j) {
      right += static_cast<int>(probabilities[i][j] >= threshold) == labels[i][j];
      ++total;
    }
  return total ? static_cast<double>(right) / static_cast<double>(total) : 0.0;
}

// Macro F1 over attribute columns; a column with no predicted and no true positives scores 0.
inline double compute_f_score(const Matrix& probabilities, const LabelMatrix& labels, double threshold = 0.5) {
  detail::require_same_grid(probabilities, labels, "compute_f_score");
  const std::size_t cols = labels[0].size();
  if (cols == 0) return 0.0;
  double acc = 0.0;
  for (std::size_t j = 0; j < cols; ++j) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const bool pred = probabilities[i][j] >= threshold;
      const bool truth = labels[i][j] == 1;
      tp += pred && truth;
      fp += pred && !truth;
      fn += !pred && truth;
    }
    const double p = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double r = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    acc += p + r > 0 ? 2 * p * r / (p + r) : 0.0;
  }
  return acc / static_cast<double>(cols);
}

struct PrPoint {
  double score = 0;
  double recall = 0;
  double precision = 0;
};

struct ApResult {
  double ap = 0;
  std::size_t n_gt = 0;
  std::vector<PrPoint> curve;  // one point per ranked detection
};

// Detections of all images ranked by score (ties: image order, then list order). Each
// detection matches the gt of highest IoU in its image; a hit needs IoU >= iou_thr and
// that gt still unmatched. AP is the area under the precision envelope.
inline ApResult average_precision(const std::vector<std::vector<Detection>>& detections,
                                  const std::vector<std::vector<BoundingBox>>& gts, double iou_thr = 0.5) {
  if (detections.size() != gts.size()) throw ShapeError("compute_map: image counts differ");
  ApResult res;
  struct Ranked {
    double score;
    std::size_t image, index;
  };
  std::vector<Ranked> ranked;
  for (std::size_t i = 0; i < detections.size(); ++i) {
    res.n_gt += gts[i].size();
    for (std::size_t k = 0; k < detections[i].size(); ++k) ranked.push_back({detections[i][k].score, i, k});
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });
  if (res.n_gt == 0) return res;

  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);
  double tp = 0, fp = 0;
  for (const auto& r : ranked) {
    const BoundingBox& box = detections[r.image][r.index].box;
    double best = -1.0;
    std::size_t best_g = 0;
    for (std::size_t g = 0; g < gts[r.image].size(); ++g) {
      const double v = iou(box, gts[r.image][g]);
      if (v > best) {
        best = v;
        best_g = g;
      }
    }
    if (best >= iou_thr && !used[r.image][best_g]) {
      used[r.image][best_g] = true;
      tp += 1;
    } else {
      fp += 1;
    }
    res.curve.push_back({r.score, tp / static_cast<double>(res.n_gt), tp / (tp + fp)});
  }

  double envelope = 0.0, prev_recall = 0.0;
  std::vector<double> env(res.curve.size());
  for (std::size_t k = res.curve.size(); k-- > 0;) {
    envelope = std::max(envelope, res.curve[k].precision);
    env[k] = envelope;
  }
  for (std::size_t k = 0; k < res.curve.size(); ++k) {
    res.ap += (res.curve[k].recall - prev_recall) * env[k];
    prev_recall = res.curve[k].recall;
  }
  return res;
}

// Single foreground class: mAP is the AP of tb.
inline double compute_map(const std::vector<std::vector<Detection>>& detections,
                          const std::vector<std::vector<BoundingBox>>& gts, double iou_thr = 0.5) {
  return average_precision(detections, gts, iou_thr).ap;
}

struct MeanStd {
  double mean = 0;
  double std = 0;
};

// Sample standard deviation (n - 1); 0 for a single value.
inline MeanStd aggregate_runs(const std::vector<double>& values) {
  if (values.empty()) throw EmptyList();
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() == 1) return {mean, 0.0};
  double ss = 0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1))};
}

inline std::string format_mean_std(const MeanStd& m) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f±%.2f", m.mean, m.std);
  return buf;
}

// Metrics of one training run, as fractions in [0, 1].
struct RunMetrics {
  double f_score = 0;
  double accuracy = 0;
  double map = 0;
};

// Percent-scale summary over runs.
struct EvalReport {
  MeanStd f_score, accuracy, map;
  std::size_t n_runs = 0;
  Ablation flags;
};

inline EvalReport make_eval_report(const std::vector<RunMetrics>& runs, const Ablation& flags = {}) {
  if (runs.empty()) throw EmptyList();
  std::vector<double> f, a, m;
  for (const auto& r : runs) {
    f.push_back(100.0 * r.f_score);
    a.push_back(100.0 * r.accuracy);
    m.push_back(100.0 * r.map);
  }
  return {aggregate_runs(f), aggregate_runs(a), aggregate_runs(m), runs.size(), flags};
}

// One cell of the ablation grid.
struct AblationRow {
  std::string method;  // Baseline, SingleScale or MultiScale
  ScaleMode scale_mode = ScaleMode::multi;
  Ablation flags;

  std::string key() const {
    if (method == "Baseline") return "baseline";
    return std::string(to_string(scale_mode)) + "_gc" + std::to_string(flags.group_conv) + "_a2" +
           std::to_string(flags.a2_attn) + "_at" + std::to_string(flags.at_attn);
  }
};

// Baseline, then SingleScale and MultiScale each with one component dropped in turn and
// finally all three.
inline std::vector<AblationRow> ablation_grid() {
  std::vector<AblationRow> rows{{"Baseline", ScaleMode::multi, {false, false, false}}};
  for (ScaleMode m : {ScaleMode::single, ScaleMode::multi}) {
    const std::string name = m == ScaleMode::single ? "SingleScale" : "MultiScale";
    for (Ablation a : {Ablation{false, true, true}, Ablation{true, false, true}, Ablation{true, true, false},
                       Ablation{true, true, true}}) {
      rows.push_back({name, m, a});
    }
  }
  return rows;
}

struct AblationReport {
  std::vector<std::pair<AblationRow, EvalReport>> rows;

  std::string to_csv() const {
    std::ostringstream os;
    os << "method,scale_mode,detector,group_conv,a2_attn,at_attn,f_score,accuracy,map,n_runs\n";
    for (const auto& [row, rep] : rows) {
      os << row.method << ',' << (row.method == "Baseline" ? "-" : to_string(row.scale_mode)) << ",Two-stage Model,"
         << mark(row.flags.group_conv) << ',' << mark(row.flags.a2_attn) << ',' << mark(row.flags.at_attn) << ','
         << format_mean_std(rep.f_score) << ',' << format_mean_std(rep.accuracy) << ',' << format_mean_std(rep.map) << ','
         << rep.n_runs << '\n';
    }
    return os.str();
  }

  std::string to_text() const {
    std::vector<std::vector<std::string>> cells{
        {"Methods", "Detector", "GroupConv", "A2-Attn", "AT-Attn", "F-score", "Accuracy", "mAP"}};
    std::string prev;
    for (const auto& [row, rep] : rows) {
      cells.push_back({row.method == prev ? "" : row.method, "Two-stage Model", mark(row.flags.group_conv),
                       mark(row.flags.a2_attn), mark(row.flags.at_attn), format_mean_std(rep.f_score),
                       format_mean_std(rep.accuracy), format_mean_std(rep.map)});
      prev = row.method;
    }
    std::vector<std::size_t> width(cells[0].size(), 0);
    for (const auto& r : cells)
      for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], display_width(r[c]));
    std::ostringstream os;
    os << "Results (%) mean±std\n";
    for (const auto& r : cells) {
      std::string line;
      for (std::size_t c = 0; c < r.size(); ++c) {
        line += r[c];
        if (c + 1 < r.size()) line += std::string(width[c] - display_width(r[c]) + 2, ' ');
      }
      os << line << '\n';
    }
    return os.str();
  }

  static std::string mark(bool on) { return on ? "✓" : "✗"; }

  // Code points, counting every non-continuation byte.
  static std::size_t display_width(const std::string& s) {
    std::size_t n = 0;
    for (unsigned char ch : s) n += (ch & 0xC0) != 0x80;
    return n;
  }
};

// Rows of the grid that are present, in grid order; the baseline must be present.
inline AblationReport ablation_report(const std::map<std::string, EvalReport>& results) {
  if (!results.count("baseline")) throw MissingBaseline();
  AblationReport rep;
  for (const auto& row : ablation_grid()) {
    auto it = results.find(row.key());
    if (it != results.end()) rep.rows.emplace_back(row, it->second);
  }
  return rep;
}

inline AblationReport ablation_report(const std::map<std::string, std::vector<RunMetrics>>& runs) {
  std::map<std::string, EvalReport> reports;
  std::map<std::string, Ablation> flags;
  for (const auto& row : ablation_grid()) flags[row.key()] = row.flags;
  for (const auto& [k, v] : runs) reports[k] = make_eval_report(v, flags[k]);
  return ablation_report(reports);
}

}  // namespace tbattr
