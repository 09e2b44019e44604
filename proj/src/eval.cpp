#include "corrdet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "corrdet/data.hpp"
#include "corrdet/geometry.hpp"

namespace corrdet {

double average_precision(const std::vector<bool>& hits, std::size_t num_gt) {
  if (num_gt == 0) return 0.0;
  std::vector<double> precision;
  std::vector<double> recall;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < hits.size(); ++i) {
    if (hits[i]) ++tp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }
  // Precision envelope, then sum over recall steps.
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    if (recall[i] > prev_recall) {
      ap += (recall[i] - prev_recall) * precision[i];
      prev_recall = recall[i];
    }
  }
  return ap;
}

namespace {

double mean_or_nan(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

void check_sizes(std::size_t a, std::size_t b) {
  if (a != b) {
    throw Error(Errc::kShapeMismatch, std::to_string(a) + " detection lists for " + std::to_string(b) + " images");
  }
}

}  // namespace

APReport evaluate_map(std::span<const std::vector<Detection>> detections,
                      std::span<const std::vector<Annotation>> ground_truth, const ClassSplit& split,
                      double iou_threshold, std::uint64_t seed) {
  check_sizes(detections.size(), ground_truth.size());
  std::set<ClassId> classes;
  for (const auto& gts : ground_truth) {
    for (const Annotation& a : gts) classes.insert(a.class_id);
  }

  struct Ranked {
    double score;
    std::size_t image;
    std::size_t index;
  };
  APReport report;
  report.seed = seed;
  for (ClassId cls : classes) {
    std::vector<Ranked> ranked;
    std::vector<std::vector<XYXYBox>> gt_boxes(ground_truth.size());
    std::size_t num_gt = 0;
    for (std::size_t i = 0; i < ground_truth.size(); ++i) {
      for (const Annotation& a : ground_truth[i]) {
        if (a.class_id == cls) {
          gt_boxes[i].push_back(cxcywh_to_xyxy(a.box));
          ++num_gt;
        }
      }
      for (std::size_t j = 0; j < detections[i].size(); ++j) {
        if (detections[i][j].class_id == cls) ranked.push_back({detections[i][j].score, i, j});
      }
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });

    std::vector<std::vector<bool>> claimed(ground_truth.size());
    for (std::size_t i = 0; i < ground_truth.size(); ++i) claimed[i].assign(gt_boxes[i].size(), false);
    std::vector<bool> hits;
    hits.reserve(ranked.size());
    for (const Ranked& r : ranked) {
      const XYXYBox box = cxcywh_to_xyxy(detections[r.image][r.index].box);
      double best = -1.0;
      std::size_t best_k = 0;
      for (std::size_t k = 0; k < gt_boxes[r.image].size(); ++k) {
        const double o = iou(box, gt_boxes[r.image][k]);
        if (o > best) {
          best = o;
          best_k = k;
        }
      }
      const bool hit = best >= iou_threshold && !claimed[r.image][best_k];
      if (hit) claimed[r.image][best_k] = true;
      hits.push_back(hit);
    }
    report.per_class[cls] = average_precision(hits, num_gt);
  }

  std::vector<double> novel;
  std::vector<double> base;
  std::vector<double> all;
  for (const auto& [cls, ap] : report.per_class) {
    all.push_back(ap);
    if (split.is_novel(cls)) novel.push_back(ap);
    if (split.is_base(cls)) base.push_back(ap);
  }
  report.novel_map = mean_or_nan(novel);
  report.base_map = mean_or_nan(base);
  report.overall_map = mean_or_nan(all);
  return report;
}

PairConfusion& PairConfusion::operator+=(const PairConfusion& o) {
  x_as_x += o.x_as_x;
  x_as_y += o.x_as_y;
  x_as_other += o.x_as_other;
  x_missed += o.x_missed;
  y_as_y += o.y_as_y;
  y_as_x += o.y_as_x;
  y_as_other += o.y_as_other;
  y_missed += o.y_missed;
  return *this;
}

std::vector<PairConfusion> confusion_pairs(std::span<const std::vector<Detection>> detections,
                                           std::span<const std::vector<Annotation>> ground_truth,
                                           std::span<const std::pair<ClassId, ClassId>> pairs,
                                           double iou_threshold) {
  check_sizes(detections.size(), ground_truth.size());
  std::vector<PairConfusion> out;
  for (const auto& [x, y] : pairs) {
    PairConfusion pc;
    pc.x = x;
    pc.y = y;
    for (std::size_t i = 0; i < ground_truth.size(); ++i) {
      for (const Annotation& a : ground_truth[i]) {
        if (a.class_id != x && a.class_id != y) continue;
        const XYXYBox gt = cxcywh_to_xyxy(a.box);
        double best = -1.0;
        const Detection* match = nullptr;
        for (const Detection& d : detections[i]) {
          const double o = iou(gt, cxcywh_to_xyxy(d.box));
          if (o > best) {
            best = o;
            match = &d;
          }
        }
        const bool found = match != nullptr && best >= iou_threshold;
        if (a.class_id == x) {
          if (!found) {
            ++pc.x_missed;
          } else if (match->class_id == x) {
            ++pc.x_as_x;
          } else if (match->class_id == y) {
            ++pc.x_as_y;
          } else {
            ++pc.x_as_other;
          }
        } else {
          if (!found) {
            ++pc.y_missed;
          } else if (match->class_id == y) {
            ++pc.y_as_y;
          } else if (match->class_id == x) {
            ++pc.y_as_x;
          } else {
            ++pc.y_as_other;
          }
        }
      }
    }
    out.push_back(pc);
  }
  return out;
}

RunStat summarize(std::span<const double> values) {
  RunStat s;
  s.runs = static_cast<int>(values.size());
  if (values.empty()) {
    s.mean = s.stddev = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  // Shifted by the first value so identical runs give exactly zero spread.
  const double shift = values.front();
  double sum = 0.0;
  double sq = 0.0;
  for (double v : values) {
    sum += v - shift;
    sq += (v - shift) * (v - shift);
  }
  const auto n = static_cast<double>(values.size());
  s.mean = shift + sum / n;
  if (values.size() > 1) s.stddev = std::sqrt(std::max(0.0, (sq - sum * sum / n) / (n - 1.0)));
  return s;
}

MultiRunReport multi_run_report(std::span<const APReport> runs) {
  if (runs.size() < 2) throw Error(Errc::kInvalidConfig, "multi-run report needs at least two runs");
  MultiRunReport out;
  std::map<ClassId, std::vector<double>> cells;
  std::vector<double> novel;
  std::vector<double> base;
  std::vector<double> all;
  for (const APReport& r : runs) {
    for (const auto& [cls, ap] : r.per_class) cells[cls].push_back(ap);
    novel.push_back(r.novel_map);
    base.push_back(r.base_map);
    all.push_back(r.overall_map);
    out.seeds.push_back(r.seed);
  }
  for (const auto& [cls, values] : cells) out.per_class[cls] = summarize(values);
  out.novel = summarize(novel);
  out.base = summarize(base);
  out.overall = summarize(all);
  return out;
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path);
  if (!out) throw Error(Errc::kIoError, "cannot open " + path.string() + " for writing");
  out.precision(6);
  out << std::fixed;
  return out;
}

}  // namespace

void write_ap_csv(const APReport& report, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "class_id,class_name,ap50,seed\n";
  for (const auto& [cls, ap] : report.per_class) {
    out << to_int(cls) << ',' << class_name(cls) << ',' << ap << ',' << report.seed << '\n';
  }
  out << "-1,novel_mean," << report.novel_map << ',' << report.seed << '\n';
  out << "-1,base_mean," << report.base_map << ',' << report.seed << '\n';
  out << "-1,overall_mean," << report.overall_map << ',' << report.seed << '\n';
  if (!out) throw Error(Errc::kIoError, "failed writing " + path.string());
}

void write_multi_run_csv(const MultiRunReport& report, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "class_id,class_name,mean_ap50,stddev_ap50,runs\n";
  for (const auto& [cls, s] : report.per_class) {
    out << to_int(cls) << ',' << class_name(cls) << ',' << s.mean << ',' << s.stddev << ',' << s.runs << '\n';
  }
  out << "-1,novel_mean," << report.novel.mean << ',' << report.novel.stddev << ',' << report.novel.runs << '\n';
  out << "-1,base_mean," << report.base.mean << ',' << report.base.stddev << ',' << report.base.runs << '\n';
  out << "-1,overall_mean," << report.overall.mean << ',' << report.overall.stddev << ',' << report.overall.runs
      << '\n';
  if (!out) throw Error(Errc::kIoError, "failed writing " + path.string());
}

void write_confusion_csv(std::span<const PairConfusion> confusion, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "gt,pred_x,pred_y,pred_other,missed,x,y\n";
  for (const PairConfusion& c : confusion) {
    out << class_name(c.x) << ',' << c.x_as_x << ',' << c.x_as_y << ',' << c.x_as_other << ',' << c.x_missed << ','
        << class_name(c.x) << ',' << class_name(c.y) << '\n';
    out << class_name(c.y) << ',' << c.y_as_x << ',' << c.y_as_y << ',' << c.y_as_other << ',' << c.y_missed << ','
        << class_name(c.x) << ',' << class_name(c.y) << '\n';
  }
  if (!out) throw Error(Errc::kIoError, "failed writing " + path.string());
}

std::string format_ap_table(const APReport& report) {
  std::ostringstream os;
  os.precision(4);
  os << std::fixed;
  os << "class               AP50\n";
  for (const auto& [cls, ap] : report.per_class) {
    std::string name = class_name(cls);
    name.resize(std::max<std::size_t>(name.size(), 18), ' ');
    os << name << "  " << ap << '\n';
  }
  os << "novel mAP50         " << report.novel_map << '\n';
  os << "base mAP50          " << report.base_map << '\n';
  os << "overall mAP50       " << report.overall_map << '\n';
  return os.str();
}

std::string format_multi_run_table(const MultiRunReport& report) {
  std::ostringstream os;
  os.precision(4);
  os << std::fixed;
  os << "class               mean AP50   stddev\n";
  auto row = [&os](std::string name, const RunStat& s) {
    name.resize(std::max<std::size_t>(name.size(), 18), ' ');
    os << name << "  " << s.mean << "      " << s.stddev << '\n';
  };
  for (const auto& [cls, s] : report.per_class) row(class_name(cls), s);
  row("novel mAP50", report.novel);
  row("base mAP50", report.base);
  row("overall mAP50", report.overall);
  return os.str();
}

}  // namespace corrdet
