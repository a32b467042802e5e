#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "muonseg/geometry.hpp"

namespace muonseg {

template <typename T>
class Model;

using ClassCounts = std::array<std::array<std::int64_t, kNumClasses>, kNumClasses>;

// Voxel counts[truth][pred], summed over any number of volumes.
struct ConfusionCounts {
  ClassCounts counts{};

  void add(const LabelGrid& pred, const LabelGrid& truth);
  void merge(const ConfusionCounts& other);
  std::int64_t total() const;
  std::int64_t truth_size(int c) const;
  std::int64_t pred_size(int c) const;
};

// Hard-set overlap with the empty conventions: both empty -> 1, one empty -> 0.
double dice(const LabelGrid& pred, const LabelGrid& truth, int c);
double iou(const LabelGrid& pred, const LabelGrid& truth, int c);

inline constexpr std::array<int, 4> kDefectClasses{1, 2, 3, 4};

struct SegMetrics {
  std::array<double, kNumClasses> dice{};
  std::array<double, kNumClasses> iou{};
  std::array<bool, kNumClasses> present{};  // class occurs in the truth
  double overall_accuracy = 0.0;
  double dice_micro = 0.0;  // equals accuracy for single-label maps
  double dice_mean = 0.0;   // unweighted mean over the six classes
  double defect_mean_dice = 0.0;
  std::array<std::array<double, kNumClasses>, kNumClasses> confusion{};  // row-normalised
  ClassCounts counts{};

  static SegMetrics from_counts(const ConfusionCounts& counts);
};

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;
};

struct DetectionMetrics {
  int positives = 0;
  int negatives = 0;
  double threshold = 0.0;  // positive when score > threshold
  double sensitivity = 0.0;
  double specificity = 0.0;
  double precision = 0.0;  // 0 when nothing is flagged
  double auc = 0.0;            // Mann-Whitney, ties count half
  double auc_trapezoid = 0.0;  // area under the swept curve
  std::vector<RocPoint> roc;
};

// positive[i] is nonzero for positive volumes.
DetectionMetrics roc_auc(std::span<const double> scores, std::span<const std::uint8_t> positive,
                         double threshold = 0.0);

// Voxels of a [6, V] probability map whose argmax is c (first max wins).
std::int64_t volume_score(std::span<const float> probs, int c);
double mean_probability(std::span<const float> probs, int c);

struct VolumeResult {
  int volume_index = -1;
  LabelGrid pred;
  LabelGrid truth;
  std::array<double, kNumClasses> score{};      // argmax counts
  std::array<double, kNumClasses> mean_prob{};
  double forward_ms = 0.0;
};

struct EvaluationReport {
  SegMetrics seg;
  std::array<std::optional<DetectionMetrics>, kNumClasses> detection;  // defect classes only
  std::vector<VolumeResult> volumes;
  std::vector<std::string> errors;  // per-volume failures that were skipped
  double timing_mean_ms = 0.0;
  double timing_std_ms = 0.0;
};

struct EvalInput {
  int volume_index = -1;
  std::span<const float> stream1;  // normalised, 9 x 20^3
  std::span<const float> stream2;  // normalised, 40 x 20^3
  const LabelGrid* truth = nullptr;
};

// Softmax probabilities [6, 20^3] of one volume, eval mode.
std::vector<float> predict_probabilities(Model<float>& model, std::span<const float> stream1,
                                         std::span<const float> stream2);
LabelGrid argmax_labels(std::span<const float> probs);

// Runs the frozen model on every volume and aggregates the metrics.
EvaluationReport evaluate_volumes(Model<float>& model, std::span<const EvalInput> inputs);

// Aggregation over precomputed predictions (also the truth-as-prediction path).
EvaluationReport summarize(std::vector<VolumeResult> volumes);

// metrics.json, per_class.csv, confusion.csv, roc_<class>.csv, timing.csv.
void write_report(const std::filesystem::path& dir, const EvaluationReport& report);

// One SVG per z index with truth, prediction and error panels. Returns the
// number of error pixels per slice.
std::vector<int> export_slices(const std::filesystem::path& dir, const LabelGrid& pred,
                               const LabelGrid& truth, std::span<const int> z_indices,
                               const std::string& prefix = "slice");

std::string class_name(int c);

}  // namespace muonseg
