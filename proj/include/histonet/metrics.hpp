#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "histonet/backbone.hpp"
#include "histonet/data.hpp"
#include "histonet/preprocess.hpp"

namespace histonet::metrics {

// Binary counts with malignant (1) as the positive class.
struct ConfusionMatrix {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t tn = 0;
  std::int64_t fn = 0;
  std::int64_t total() const { return tp + fp + tn + fn; }
};

ConfusionMatrix confusion(const std::vector<int>& labels, const std::vector<int>& predictions);

struct Scores {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  // 0/0 rates are reported as 0 with the corresponding flag set, so reports
  // stay machine-readable without NaNs.
  bool degenerate_precision = false;
  bool degenerate_recall = false;
};

Scores scores(const ConfusionMatrix& cm);

struct RocResult {
  // (fpr, tpr) points from (0,0) to (1,1); thresholds[i] is the score cut
  // producing points[i] (+inf for the (0,0) anchor). Equal scores collapse
  // into one step.
  std::vector<std::pair<double, double>> points;
  std::vector<double> thresholds;
  double auc = 0.0;
};

// Threshold sweep over descending distinct scores; AUC by the trapezoid rule,
// which equals the Mann-Whitney statistic with ties half-weighted.
RocResult roc_auc(const std::vector<int>& labels, const std::vector<double>& scores);

struct EvalEntry {
  ConfusionMatrix cm;
  Scores sc;
  RocResult roc;
};

struct EvalReport {
  std::map<std::string, EvalEntry> per_magnification;  // key: "40X", ...
  EvalEntry overall;

  std::string to_json() const;
  // threshold,fpr,tpr rows for one magnification key or "overall".
  std::string roc_csv(const std::string& key) const;
};

// Eval-mode predictions over the selected split: softmax class-1 probability
// as the ROC score, argmax as the prediction; one entry per magnification
// present plus the overall pool.
EvalReport evaluate(const backbone::Model& model, const data::Manifest& dataset,
                    data::Split split, const preprocess::PreprocessConfig& pp_cfg,
                    int batch_size);

}  // namespace histonet::metrics
