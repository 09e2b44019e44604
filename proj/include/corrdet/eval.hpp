#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "corrdet/core.hpp"
#include "corrdet/targetgen.hpp"

namespace corrdet {

/// Per-class AP at one IoU threshold. Classes without ground truth are absent;
/// a mean over an empty group is NaN.
struct APReport {
  std::map<ClassId, double> per_class;
  double novel_map = 0.0;
  double base_map = 0.0;
  double overall_map = 0.0;
  std::uint64_t seed = 0;
};

/// All-points interpolated area under the precision/recall curve. `hits` is in
/// descending score order.
double average_precision(const std::vector<bool>& hits, std::size_t num_gt);

/// detections[i] and ground_truth[i] describe the same image. Per class, detections
/// are ranked by score (ties: image, then detection order); each one is a hit when its
/// best-overlapping ground truth of that class has IoU >= threshold and is still unclaimed.
APReport evaluate_map(std::span<const std::vector<Detection>> detections,
                      std::span<const std::vector<Annotation>> ground_truth, const ClassSplit& split,
                      double iou_threshold = 0.5, std::uint64_t seed = 0);

/// Label confusion for one class pair. Each ground-truth object takes the label of its
/// best-IoU detection (>= threshold) of any class.
struct PairConfusion {
  ClassId x{};
  ClassId y{};
  // GT-x row
  int x_as_x = 0;
  int x_as_y = 0;
  int x_as_other = 0;
  int x_missed = 0;
  // GT-y row
  int y_as_y = 0;
  int y_as_x = 0;
  int y_as_other = 0;
  int y_missed = 0;

  int cross() const { return x_as_y + y_as_x; }
  PairConfusion& operator+=(const PairConfusion& o);
};

std::vector<PairConfusion> confusion_pairs(std::span<const std::vector<Detection>> detections,
                                           std::span<const std::vector<Annotation>> ground_truth,
                                           std::span<const std::pair<ClassId, ClassId>> pairs,
                                           double iou_threshold = 0.5);

struct RunStat {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation
  int runs = 0;
};

struct MultiRunReport {
  std::map<ClassId, RunStat> per_class;
  RunStat novel;
  RunStat base;
  RunStat overall;
  std::vector<std::uint64_t> seeds;
};

/// Mean and sample stddev of every cell over >= 2 runs. Throws kInvalidConfig otherwise.
MultiRunReport multi_run_report(std::span<const APReport> runs);

RunStat summarize(std::span<const double> values);

void write_ap_csv(const APReport& report, const std::filesystem::path& path);
void write_multi_run_csv(const MultiRunReport& report, const std::filesystem::path& path);
void write_confusion_csv(std::span<const PairConfusion> confusion, const std::filesystem::path& path);
std::string format_ap_table(const APReport& report);
std::string format_multi_run_table(const MultiRunReport& report);

}  // namespace corrdet
