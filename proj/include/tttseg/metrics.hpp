#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tttseg/tensor.hpp"

namespace tttseg {

// Integer class-index mask over an H x W grid.
struct LabelMask {
  Tensor labels;  // [H x W], values in [0, num_classes)
  std::size_t num_classes = 2;

  void validate() const;
};

// Dice similarity for one class: 2|P and G| / (|P| + |G|).
// Both empty -> 1.0, exactly one empty -> 0.0.
double dsc(const LabelMask& pred, const LabelMask& gt, int cls);

// Normalized surface distance at tolerance tau (pixel units). A class pixel
// is boundary when any 4-neighbor has a different class or lies outside the
// image. Fraction of boundary pixels of each mask within tau of the other
// mask's boundary, Euclidean center-to-center, exact all-pairs distances.
// Both boundaries empty -> 1.0, exactly one empty -> 0.0.
double nsd(const LabelMask& pred, const LabelMask& gt, int cls, double tau);

// Detection-style F1 over connected components (4-connectivity) of binary
// masks (nonzero = foreground), greedy one-to-one matching by descending IoU
// at the given threshold. Both masks empty -> 1.0.
double instance_f1(const LabelMask& pred, const LabelMask& gt, double iou_threshold = 0.5);

struct ClassAggregate {
  int cls = 0;
  double mean_dsc = 0.0;
  double mean_nsd = 0.0;
  std::size_t samples = 0;
};

// Per-class and aggregate metrics with the empty-mask conventions counted so
// aggregates stay auditable. Two labelled aggregations are reported: per-class
// (average over samples per class, then over classes) and per-case (average
// over foreground classes per sample, then over samples).
struct MetricsReport {
  double tau = 1.0;
  double iou_threshold = 0.5;
  std::vector<ClassAggregate> per_class;  // foreground classes
  double mean_dsc_per_class = 0.0;
  double mean_nsd_per_class = 0.0;
  double mean_dsc_per_case = 0.0;
  double mean_nsd_per_case = 0.0;
  std::optional<double> mean_instance_f1;
  std::size_t num_samples = 0;
  std::size_t both_empty_pairs = 0;  // (sample, class) pairs scored by convention
  std::size_t one_empty_pairs = 0;

  std::string to_json() const;
};

// Accumulates per-sample metrics into a report.
class MetricsAccumulator {
 public:
  MetricsAccumulator(std::size_t num_classes, double tau, bool with_instance_f1,
                     double iou_threshold = 0.5);

  void add(const LabelMask& pred, const LabelMask& gt);
  MetricsReport finalize() const;

 private:
  std::size_t num_classes_;
  double tau_;
  bool with_f1_;
  double iou_threshold_;
  std::vector<double> dsc_sums_;  // per foreground class
  std::vector<double> nsd_sums_;
  std::vector<double> case_dsc_;  // per sample
  std::vector<double> case_nsd_;
  std::vector<double> f1_;
  std::size_t both_empty_ = 0;
  std::size_t one_empty_ = 0;
};

}  // namespace tttseg
