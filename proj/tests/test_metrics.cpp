#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "histonet/backbone.hpp"
#include "histonet/data.hpp"
#include "histonet/errors.hpp"
#include "histonet/metrics.hpp"
#include "histonet/preprocess.hpp"
#include "histonet/rng.hpp"

#include "test_util.hpp"

using namespace histonet;
namespace mt = histonet::metrics;
namespace fs = std::filesystem;

TEST_CASE("confusion: counts the four cells") {
  const mt::ConfusionMatrix cm = mt::confusion({1, 1, 0, 0, 1}, {1, 0, 0, 1, 1});
  CHECK(cm.tp == 2);
  CHECK(cm.fn == 1);
  CHECK(cm.tn == 1);
  CHECK(cm.fp == 1);
  CHECK(cm.total() == 5);

  CHECK_THROWS_AS(mt::confusion({1, 0}, {1}), DataError);
  CHECK_THROWS_AS(mt::confusion({1, 2}, {1, 0}), DataError);
  CHECK_THROWS_AS(mt::confusion({1, 0}, {1, -1}), DataError);
}

TEST_CASE("confusion: agrees with a counting loop on random data") {
  Rng rng(301);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<int> labels(50), preds(50);
    for (int i = 0; i < 50; ++i) {
      labels[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(2));
      preds[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(2));
    }
    const mt::ConfusionMatrix cm = mt::confusion(labels, preds);
    std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (int i = 0; i < 50; ++i) {
      const int y = labels[static_cast<std::size_t>(i)];
      const int p = preds[static_cast<std::size_t>(i)];
      tp += (y == 1 && p == 1);
      fn += (y == 1 && p == 0);
      fp += (y == 0 && p == 1);
      tn += (y == 0 && p == 0);
    }
    CHECK(cm.tp == tp);
    CHECK(cm.fp == fp);
    CHECK(cm.tn == tn);
    CHECK(cm.fn == fn);
  }
}

TEST_CASE("scores: pinned fixture tp=40 fp=10 fn=20 tn=30") {
  mt::ConfusionMatrix cm;
  cm.tp = 40;
  cm.fp = 10;
  cm.fn = 20;
  cm.tn = 30;
  const mt::Scores s = mt::scores(cm);
  CHECK(s.accuracy == 0.7);
  CHECK(s.precision == 0.8);
  CHECK(s.recall == 2.0 / 3.0);
  CHECK(std::fabs(s.f1 - 8.0 / 11.0) <= 1e-15);
  CHECK_FALSE(s.degenerate_precision);
  CHECK_FALSE(s.degenerate_recall);
}

TEST_CASE("scores: degenerate denominators report zero with flags") {
  mt::ConfusionMatrix none_predicted;  // tp + fp == 0
  none_predicted.tn = 5;
  none_predicted.fn = 5;
  const mt::Scores a = mt::scores(none_predicted);
  CHECK(a.precision == 0.0);
  CHECK(a.degenerate_precision);
  CHECK_FALSE(a.degenerate_recall);
  CHECK(a.recall == 0.0);  // tp / (tp + fn) = 0 / 10
  CHECK(a.f1 == 0.0);

  mt::ConfusionMatrix no_positives;  // tp + fn == 0
  no_positives.tn = 6;
  no_positives.fp = 4;
  const mt::Scores b = mt::scores(no_positives);
  CHECK(b.degenerate_recall);
  CHECK(b.recall == 0.0);
  CHECK(b.precision == 0.0);
  CHECK(b.f1 == 0.0);

  CHECK_THROWS_AS(mt::scores(mt::ConfusionMatrix{}), DataError);
}

TEST_CASE("roc: perfect, inverted, and tied score sets") {
  {
    const mt::RocResult r = mt::roc_auc({1, 1, 0, 0}, {0.9, 0.8, 0.2, 0.1});
    CHECK(r.auc == 1.0);
    CHECK(r.points.front() == std::pair<double, double>{0.0, 0.0});
    CHECK(r.points.back() == std::pair<double, double>{1.0, 1.0});
    CHECK(r.thresholds.front() == std::numeric_limits<double>::infinity());
  }
  {
    const mt::RocResult r = mt::roc_auc({0, 0, 1, 1}, {0.9, 0.8, 0.2, 0.1});
    CHECK(r.auc == 0.0);
  }
  {
    // All scores equal: one diagonal step, half credit.
    const mt::RocResult r = mt::roc_auc({1, 0, 1, 0}, {0.5, 0.5, 0.5, 0.5});
    REQUIRE(r.points.size() == 2);
    CHECK(r.points[1] == std::pair<double, double>{1.0, 1.0});
    CHECK(r.auc == 0.5);
    CHECK(r.thresholds[1] == 0.5);
  }
}

TEST_CASE("roc: equals the pairwise Mann-Whitney construction on 200 random sets") {
  Rng rng(302);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 4 + static_cast<int>(rng.uniform_int(24));
    std::vector<int> labels(static_cast<std::size_t>(n));
    std::vector<double> scores(static_cast<std::size_t>(n));
    int pos = 0;
    for (int i = 0; i < n; ++i) {
      labels[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(2));
      pos += labels[static_cast<std::size_t>(i)];
      // Half the trials snap scores to a coarse grid to force tie handling.
      const double s = rng.uniform01();
      scores[static_cast<std::size_t>(i)] =
          trial % 2 == 0 ? std::round(s * 4.0) / 4.0 : s;
    }
    if (pos == 0 || pos == n) {
      CHECK_THROWS_AS(mt::roc_auc(labels, scores), DataError);
      continue;
    }

    const mt::RocResult r = mt::roc_auc(labels, scores);
    double pairs = 0.0;
    std::int64_t total_pairs = 0;
    for (int i = 0; i < n; ++i) {
      if (labels[static_cast<std::size_t>(i)] != 1) continue;
      for (int j = 0; j < n; ++j) {
        if (labels[static_cast<std::size_t>(j)] != 0) continue;
        ++total_pairs;
        const double sp = scores[static_cast<std::size_t>(i)];
        const double sn = scores[static_cast<std::size_t>(j)];
        pairs += sp > sn ? 1.0 : (sp == sn ? 0.5 : 0.0);
      }
    }
    const double mann_whitney = pairs / static_cast<double>(total_pairs);
    CHECK(std::fabs(r.auc - mann_whitney) <= 1e-12);

    // Curve sanity: monotone, anchored, thresholds strictly descending.
    CHECK(r.points.front() == std::pair<double, double>{0.0, 0.0});
    CHECK(r.points.back() == std::pair<double, double>{1.0, 1.0});
    for (std::size_t k = 1; k < r.points.size(); ++k) {
      CHECK(r.points[k].first >= r.points[k - 1].first);
      CHECK(r.points[k].second >= r.points[k - 1].second);
      CHECK(r.thresholds[k] < r.thresholds[k - 1]);
    }
  }
}

TEST_CASE("roc: rejects degenerate inputs") {
  CHECK_THROWS_AS(mt::roc_auc({1, 1}, {0.3, 0.4}), DataError);
  CHECK_THROWS_AS(mt::roc_auc({0, 0}, {0.3, 0.4}), DataError);
  CHECK_THROWS_AS(mt::roc_auc({0, 1}, {0.3}), DataError);
  CHECK_THROWS_AS(mt::roc_auc({0, 2}, {0.3, 0.4}), DataError);
  CHECK_THROWS_AS(mt::roc_auc({}, {}), DataError);
}

TEST_CASE("evaluate: per-magnification report over a synthetic dataset") {
  const fs::path root = fs::temp_directory_path() / "histonet_metrics_eval";
  fs::remove_all(root);
  data::generate_synthetic(root.string(), 3, 32, 32, 83);
  data::Manifest m = data::scan_dataset(root.string());
  m = data::split_stratified(m, 1.0, 0.0, 0.0, 4, false);

  preprocess::PreprocessConfig pp;
  pp.pad = 0;
  pp.median_kernel = 1;
  pp.clahe_tile_rows = 4;
  pp.clahe_tile_cols = 4;
  pp.target_h = 24;
  pp.target_w = 24;

  backbone::ModelConfig mc;
  mc.stem_channels = 4;
  mc.stages = {{8, 1, 2, 2.0, 0.25}};
  mc.head.hidden = 8;
  mc.seed = 15;
  const backbone::Model model = backbone::build_model(mc);

  const mt::EvalReport report = mt::evaluate(model, m, data::Split::train, pp, 8);

  CHECK(report.overall.cm.total() == 24);
  REQUIRE(report.per_magnification.size() == 4);
  std::int64_t sum = 0;
  for (const char* mag : {"40X", "100X", "200X", "400X"}) {
    REQUIRE(report.per_magnification.count(mag) == 1);
    const auto& entry = report.per_magnification.at(mag);
    CHECK(entry.cm.total() == 6);
    sum += entry.cm.total();
    CHECK(entry.roc.points.front() == std::pair<double, double>{0.0, 0.0});
    CHECK(entry.roc.points.back() == std::pair<double, double>{1.0, 1.0});
    CHECK(entry.roc.auc >= 0.0);
    CHECK(entry.roc.auc <= 1.0);
  }
  CHECK(sum == report.overall.cm.total());

  // Deterministic: a second evaluation renders identical JSON.
  const mt::EvalReport again = mt::evaluate(model, m, data::Split::train, pp, 8);
  CHECK(report.to_json() == again.to_json());

  // JSON parses and carries the expected fields.
  const auto parsed = nlohmann::json::parse(report.to_json());
  CHECK(parsed["overall"]["confusion"]["tp"].is_number());
  CHECK(parsed["overall"]["roc_points"].size() == report.overall.roc.points.size());
  CHECK(parsed["per_magnification"].size() == 4);

  // ROC CSV: header plus one row per point; unknown keys are rejected.
  const std::string csv = report.roc_csv("overall");
  CHECK(csv.rfind("threshold,fpr,tpr\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') ==
        1 + static_cast<std::ptrdiff_t>(report.overall.roc.points.size()));
  CHECK(csv.find("inf") != std::string::npos);
  CHECK_NOTHROW(report.roc_csv("40X"));
  CHECK_THROWS_AS(report.roc_csv("25X"), DataError);

  fs::remove_all(root);
}
