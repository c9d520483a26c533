#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace gendistill {

/// K x K pixel confusion matrix; rows are ground truth, columns prediction.
/// Pixels labelled kIgnoreIndex are skipped.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int64_t num_classes);

  /// predictions and labels: integer tensors of identical shape.
  void update(const torch::Tensor& predictions, const torch::Tensor& labels);
  void reset();

  int64_t num_classes() const { return num_classes_; }
  int64_t at(int64_t truth, int64_t predicted) const { return counts_[truth * num_classes_ + predicted]; }
  int64_t row_sum(int64_t truth) const;
  int64_t total() const;

  /// IoU per class in [0,1]; classes with an empty union report NaN.
  std::vector<double> per_class_iou() const;
  /// Mean IoU over classes with a non-empty union, in percent.
  double mean_iou() const;
  /// Correct pixels / all counted pixels, in percent.
  double pixel_accuracy() const;

 private:
  int64_t num_classes_;
  std::vector<int64_t> counts_;
};

struct EpochLosses {
  int64_t epoch = 0;
  double mse = 0.0;
  double at = 0.0;
  double ld = 0.0;
  double total = 0.0;
};

/// Outcome of one run. metrics.json carries everything except wall-clock
/// time, which goes to a timing sidecar so reruns compare byte-for-byte.
struct MetricsReport {
  std::string run_id;
  std::string kind;
  std::vector<EpochLosses> epochs;
  std::map<std::string, double> final_metrics;
  std::map<std::string, uint64_t> seeds;
  double wall_clock_seconds = 0.0;
  nlohmann::json config = nlohmann::json::object();

  nlohmann::json to_json(bool include_timing = false) const;
  static MetricsReport from_json(const nlohmann::json& j);

  /// "epoch,mse,at,ld,total" rows.
  std::string losses_csv() const;

  /// Writes metrics.json, losses.csv and timing.json into `dir`.
  void write(const std::string& dir) const;
  static MetricsReport read(const std::string& dir);
};

/// Serializes with sorted keys and fixed float formatting for stable bytes.
std::string stable_dump(const nlohmann::json& j);

}  // namespace gendistill
