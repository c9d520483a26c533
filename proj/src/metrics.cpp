#include "gendistill/metrics.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "gendistill/errors.hpp"
#include "gendistill/losses.hpp"

namespace gendistill {

ConfusionMatrix::ConfusionMatrix(int64_t num_classes)
    : num_classes_(num_classes), counts_(static_cast<size_t>(num_classes * num_classes), 0) {
  if (num_classes < 1) throw ConfigError("confusion matrix needs at least one class");
}

void ConfusionMatrix::update(const torch::Tensor& predictions, const torch::Tensor& labels) {
  if (predictions.sizes() != labels.sizes()) throw ShapeError("confusion matrix: prediction/label shape mismatch");
  const auto pred = predictions.to(torch::kLong).contiguous().flatten();
  const auto truth = labels.to(torch::kLong).contiguous().flatten();
  const auto* p = pred.data_ptr<int64_t>();
  const auto* t = truth.data_ptr<int64_t>();
  for (int64_t i = 0; i < pred.numel(); ++i) {
    if (t[i] == kIgnoreIndex) continue;
    if (t[i] < 0 || t[i] >= num_classes_ || p[i] < 0 || p[i] >= num_classes_) {
      throw ConfigError("confusion matrix: class id outside [0, " + std::to_string(num_classes_ - 1) + "]");
    }
    ++counts_[t[i] * num_classes_ + p[i]];
  }
}

void ConfusionMatrix::reset() { std::fill(counts_.begin(), counts_.end(), 0); }

int64_t ConfusionMatrix::row_sum(int64_t truth) const {
  int64_t s = 0;
  for (int64_t j = 0; j < num_classes_; ++j) s += at(truth, j);
  return s;
}

int64_t ConfusionMatrix::total() const {
  int64_t s = 0;
  for (auto c : counts_) s += c;
  return s;
}

std::vector<double> ConfusionMatrix::per_class_iou() const {
  std::vector<double> iou(num_classes_);
  for (int64_t k = 0; k < num_classes_; ++k) {
    int64_t col = 0;
    for (int64_t i = 0; i < num_classes_; ++i) col += at(i, k);
    const int64_t inter = at(k, k);
    const int64_t uni = row_sum(k) + col - inter;
    iou[k] = uni == 0 ? std::numeric_limits<double>::quiet_NaN() : static_cast<double>(inter) / uni;
  }
  return iou;
}

double ConfusionMatrix::mean_iou() const {
  double sum = 0.0;
  int64_t n = 0;
  for (double v : per_class_iou()) {
    if (std::isnan(v)) continue;
    sum += v;
    ++n;
  }
  return n == 0 ? 0.0 : 100.0 * sum / static_cast<double>(n);
}

double ConfusionMatrix::pixel_accuracy() const {
  const int64_t all = total();
  if (all == 0) return 0.0;
  int64_t correct = 0;
  for (int64_t k = 0; k < num_classes_; ++k) correct += at(k, k);
  return 100.0 * static_cast<double>(correct) / static_cast<double>(all);
}

nlohmann::json MetricsReport::to_json(bool include_timing) const {
  nlohmann::json j;
  j["run_id"] = run_id;
  j["kind"] = kind;
  auto& rows = j["epochs"] = nlohmann::json::array();
  for (const auto& e : epochs) {
    rows.push_back({{"epoch", e.epoch}, {"mse", e.mse}, {"at", e.at}, {"ld", e.ld}, {"total", e.total}});
  }
  j["final_metrics"] = final_metrics;
  j["seeds"] = seeds;
  j["config"] = config;
  if (include_timing) j["wall_clock_seconds"] = wall_clock_seconds;
  return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.run_id = j.value("run_id", "");
  r.kind = j.value("kind", "");
  for (const auto& row : j.value("epochs", nlohmann::json::array())) {
    r.epochs.push_back({row.at("epoch").get<int64_t>(), row.at("mse").get<double>(), row.at("at").get<double>(),
                        row.at("ld").get<double>(), row.at("total").get<double>()});
  }
  const auto finals = j.value("final_metrics", nlohmann::json::object());
  for (const auto& [k, v] : finals.items()) {
    r.final_metrics[k] = v.is_number() ? v.get<double>() : std::numeric_limits<double>::quiet_NaN();
  }
  const auto seeds = j.value("seeds", nlohmann::json::object());
  for (const auto& [k, v] : seeds.items()) r.seeds[k] = v.get<uint64_t>();
  r.config = j.value("config", nlohmann::json::object());
  r.wall_clock_seconds = j.value("wall_clock_seconds", 0.0);
  return r;
}

std::string MetricsReport::losses_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,mse,at,ld,total\n";
  for (const auto& e : epochs) out << e.epoch << ',' << e.mse << ',' << e.at << ',' << e.ld << ',' << e.total << '\n';
  return out.str();
}

std::string stable_dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

void MetricsReport::write(const std::string& dir) const {
  std::filesystem::create_directories(dir);
  const std::filesystem::path root(dir);
  std::ofstream(root / "metrics.json") << stable_dump(to_json(false));
  std::ofstream(root / "losses.csv") << losses_csv();
  std::ofstream(root / "timing.json") << stable_dump({{"wall_clock_seconds", wall_clock_seconds}});
}

MetricsReport MetricsReport::read(const std::string& dir) {
  const std::filesystem::path root(dir);
  std::ifstream in(root / "metrics.json");
  if (!in) throw FormatError("no metrics.json in " + dir);
  auto j = nlohmann::json::parse(in);
  std::ifstream timing(root / "timing.json");
  if (timing) j["wall_clock_seconds"] = nlohmann::json::parse(timing).value("wall_clock_seconds", 0.0);
  return from_json(j);
}

}  // namespace gendistill
