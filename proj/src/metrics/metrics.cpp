#include "histonet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "histonet/errors.hpp"
#include "histonet/ops.hpp"

namespace histonet::metrics {

ConfusionMatrix confusion(const std::vector<int>& labels, const std::vector<int>& predictions) {
  if (labels.size() != predictions.size()) {
    throw DataError("confusion: labels and predictions differ in length");
  }
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    const int p = predictions[i];
    if ((y != 0 && y != 1) || (p != 0 && p != 1)) {
      throw DataError("confusion: labels and predictions must be binary");
    }
    if (y == 1) {
      p == 1 ? ++cm.tp : ++cm.fn;
    } else {
      p == 1 ? ++cm.fp : ++cm.tn;
    }
  }
  return cm;
}

Scores scores(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw DataError("scores: empty confusion matrix");
  Scores s;
  s.accuracy = static_cast<double>(cm.tp + cm.tn) / static_cast<double>(cm.total());
  if (cm.tp + cm.fp == 0) {
    s.degenerate_precision = true;
  } else {
    s.precision = static_cast<double>(cm.tp) / static_cast<double>(cm.tp + cm.fp);
  }
  if (cm.tp + cm.fn == 0) {
    s.degenerate_recall = true;
  } else {
    s.recall = static_cast<double>(cm.tp) / static_cast<double>(cm.tp + cm.fn);
  }
  if (s.precision + s.recall > 0.0) {
    s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
  }
  return s;
}

RocResult roc_auc(const std::vector<int>& labels, const std::vector<double>& score_values) {
  if (labels.size() != score_values.size()) {
    throw DataError("roc_auc: labels and scores differ in length");
  }
  std::int64_t n_pos = 0;
  std::int64_t n_neg = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw DataError("roc_auc: labels must be binary");
    y == 1 ? ++n_pos : ++n_neg;
  }
  if (n_pos == 0 || n_neg == 0) {
    throw DataError("roc_auc: needs at least one positive and one negative label");
  }
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return score_values[a] > score_values[b];
  });

  RocResult r;
  r.points.emplace_back(0.0, 0.0);
  r.thresholds.push_back(std::numeric_limits<double>::infinity());
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double s = score_values[order[i]];
    // Everything tied at this score flips to predicted-positive in one step.
    while (i < order.size() && score_values[order[i]] == s) {
      labels[order[i]] == 1 ? ++tp : ++fp;
      ++i;
    }
    r.points.emplace_back(static_cast<double>(fp) / static_cast<double>(n_neg),
                          static_cast<double>(tp) / static_cast<double>(n_pos));
    r.thresholds.push_back(s);
  }
  for (std::size_t k = 1; k < r.points.size(); ++k) {
    const auto [x0, y0] = r.points[k - 1];
    const auto [x1, y1] = r.points[k];
    r.auc += (x1 - x0) * (y0 + y1) / 2.0;
  }
  return r;
}

namespace {

nlohmann::json entry_json(const EvalEntry& e) {
  nlohmann::json j;
  j["confusion"] = {{"tp", e.cm.tp}, {"fp", e.cm.fp}, {"tn", e.cm.tn}, {"fn", e.cm.fn}};
  j["accuracy"] = e.sc.accuracy;
  j["precision"] = e.sc.precision;
  j["recall"] = e.sc.recall;
  j["f1"] = e.sc.f1;
  j["degenerate_precision"] = e.sc.degenerate_precision;
  j["degenerate_recall"] = e.sc.degenerate_recall;
  j["auc"] = e.roc.auc;
  j["roc_points"] = nlohmann::json::array();
  for (const auto& [fpr, tpr] : e.roc.points) {
    j["roc_points"].push_back({fpr, tpr});
  }
  return j;
}

}  // namespace

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["overall"] = entry_json(overall);
  j["per_magnification"] = nlohmann::json::object();
  for (const auto& [key, entry] : per_magnification) {
    j["per_magnification"][key] = entry_json(entry);
  }
  return j.dump();
}

std::string EvalReport::roc_csv(const std::string& key) const {
  const EvalEntry* entry = nullptr;
  if (key == "overall") {
    entry = &overall;
  } else {
    const auto it = per_magnification.find(key);
    if (it == per_magnification.end()) {
      throw DataError("no ROC data for magnification '" + key + "'");
    }
    entry = &it->second;
  }
  std::string out = "threshold,fpr,tpr\n";
  for (std::size_t i = 0; i < entry->roc.points.size(); ++i) {
    char line[128];
    std::snprintf(line, sizeof(line), "%.17g,%.17g,%.17g\n", entry->roc.thresholds[i],
                  entry->roc.points[i].first, entry->roc.points[i].second);
    out += line;
  }
  return out;
}

EvalReport evaluate(const backbone::Model& model, const data::Manifest& dataset,
                    data::Split split, const preprocess::PreprocessConfig& pp_cfg,
                    int batch_size) {
  const auto bs = data::batches(dataset, split, std::nullopt, batch_size, /*seed=*/0, pp_cfg,
                                /*augment=*/false);
  struct Row {
    int label;
    int prediction;
    double score;
    data::Magnification mag;
  };
  std::vector<Row> rows;
  for (const data::Batch& batch : bs) {
    const Tensor logits = backbone::forward(model, batch.inputs, /*training=*/false);
    const double* lg = logits.values().data();
    const double* lb = batch.labels.values().data();
    for (std::int64_t i = 0; i < batch.inputs.dim(0); ++i) {
      const double l0 = lg[2 * i];
      const double l1 = lg[2 * i + 1];
      const double m = l0 > l1 ? l0 : l1;
      const double e0 = std::exp(l0 - m);
      const double e1 = std::exp(l1 - m);
      Row row;
      row.label = static_cast<int>(lb[i]);
      row.prediction = l1 > l0 ? 1 : 0;
      row.score = e1 / (e0 + e1);  // softmax class-1 probability
      row.mag = dataset.records[batch.indices[static_cast<std::size_t>(i)]].magnification;
      rows.push_back(row);
    }
  }

  const auto build_entry = [](const std::vector<Row>& rs) {
    std::vector<int> labels;
    std::vector<int> preds;
    std::vector<double> scs;
    for (const Row& r : rs) {
      labels.push_back(r.label);
      preds.push_back(r.prediction);
      scs.push_back(r.score);
    }
    EvalEntry e;
    e.cm = confusion(labels, preds);
    e.sc = scores(e.cm);
    e.roc = roc_auc(labels, scs);
    return e;
  };

  EvalReport report;
  report.overall = build_entry(rows);
  for (int mi = 0; mi < data::kNumMagnifications; ++mi) {
    const auto mag = static_cast<data::Magnification>(mi);
    std::vector<Row> subset;
    for (const Row& r : rows) {
      if (r.mag == mag) subset.push_back(r);
    }
    if (subset.empty()) continue;
    report.per_magnification[data::magnification_name(mag)] = build_entry(subset);
  }
  return report;
}

}  // namespace histonet::metrics
