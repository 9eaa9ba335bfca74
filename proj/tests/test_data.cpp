#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "histonet/data.hpp"
#include "histonet/errors.hpp"
#include "histonet/image.hpp"
#include "histonet/preprocess.hpp"
#include "histonet/rng.hpp"
#include "histonet/tensor.hpp"

#include "test_util.hpp"

using namespace histonet;
namespace fs = std::filesystem;

namespace {

fs::path temp_tree(const std::string& tag) {
  const fs::path root = fs::temp_directory_path() / ("histonet_data_" + tag);
  fs::remove_all(root);
  return root;
}

// Content hash of every regular file under root, keyed by relative path.
std::map<std::string, std::uint64_t> tree_digest(const fs::path& root) {
  std::map<std::string, std::uint64_t> digest;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    std::ifstream in(entry.path(), std::ios::binary);
    std::uint64_t h = 1469598103934665603ull;
    char ch;
    while (in.get(ch)) {
      h ^= static_cast<unsigned char>(ch);
      h *= 1099511628211ull;
    }
    digest[fs::relative(entry.path(), root).string()] = h;
  }
  return digest;
}

data::Manifest synthetic_manifest(int per_stratum, std::initializer_list<int> labels,
                                  std::initializer_list<data::Magnification> mags) {
  data::Manifest m;
  int serial = 0;
  for (int label : labels) {
    for (const auto mag : mags) {
      for (int i = 0; i < per_stratum; ++i) {
        data::SampleRecord r;
        r.path = "mem/" + std::to_string(serial++) + ".pgm";
        r.label = label;
        r.magnification = mag;
        r.patient_id = "p" + std::to_string(label) + "_" + std::to_string(i / 5);
        m.records.push_back(r);
      }
    }
  }
  return m;
}

double variance_of_laplacian(const Image& img) {
  // 4-neighbor Laplacian over the interior of the first channel.
  const int h = img.height, w = img.width, c = img.channels;
  std::vector<double> lap;
  lap.reserve(static_cast<std::size_t>((h - 2) * (w - 2)));
  const auto px = [&](int y, int x) {
    return static_cast<double>(img.pixels[static_cast<std::size_t>((y * w + x) * c)]);
  };
  for (int y = 1; y + 1 < h; ++y)
    for (int x = 1; x + 1 < w; ++x)
      lap.push_back(4.0 * px(y, x) - px(y - 1, x) - px(y + 1, x) - px(y, x - 1) - px(y, x + 1));
  double mean = 0.0;
  for (double v : lap) mean += v;
  mean /= static_cast<double>(lap.size());
  double var = 0.0;
  for (double v : lap) var += (v - mean) * (v - mean);
  return var / static_cast<double>(lap.size());
}

}  // namespace

TEST_CASE("synthetic generator: n=1 yields 8 files in the expected tree") {
  const fs::path root = temp_tree("n1");
  data::generate_synthetic(root.string(), 1, 32, 32, 5);
  int files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (entry.is_regular_file()) ++files;
  }
  CHECK(files == 8);
  for (const char* cls : {"benign", "malignant"}) {
    for (const char* mag : {"40X", "100X", "200X", "400X"}) {
      const fs::path dir = root / cls / mag;
      CHECK(fs::is_directory(dir));
    }
  }
  CHECK_THROWS_AS(data::generate_synthetic(root.string(), 0, 32, 32, 5), ConfigError);
  CHECK_THROWS_AS(data::generate_synthetic(root.string(), 1, 8, 8, 5), ConfigError);
  fs::remove_all(root);
}

TEST_CASE("synthetic generator: same seed is byte-identical, new seed is not") {
  const fs::path a = temp_tree("seed_a");
  const fs::path b = temp_tree("seed_b");
  const fs::path c = temp_tree("seed_c");
  data::generate_synthetic(a.string(), 2, 32, 32, 11);
  data::generate_synthetic(b.string(), 2, 32, 32, 11);
  data::generate_synthetic(c.string(), 2, 32, 32, 12);
  CHECK(tree_digest(a) == tree_digest(b));
  CHECK(tree_digest(a) != tree_digest(c));
  fs::remove_all(a);
  fs::remove_all(b);
  fs::remove_all(c);
}

TEST_CASE("synthetic generator: variance-of-Laplacian separates the classes") {
  const fs::path root = temp_tree("vol");
  data::generate_synthetic(root.string(), 6, 64, 64, 23);
  const data::Manifest m = data::scan_dataset(root.string());
  REQUIRE(m.records.size() == 48);

  std::vector<std::pair<double, int>> scored;
  for (const auto& r : m.records) {
    scored.emplace_back(variance_of_laplacian(load_image(r.path)), r.label);
  }
  std::sort(scored.begin(), scored.end());
  // Best single-threshold classifier: speckle (label 1) sits above.
  std::size_t best_correct = 0;
  for (std::size_t cut = 0; cut <= scored.size(); ++cut) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < scored.size(); ++i) {
      const int predicted = i >= cut ? 1 : 0;
      if (predicted == scored[i].second) ++correct;
    }
    best_correct = std::max(best_correct, correct);
  }
  const double accuracy = static_cast<double>(best_correct) / static_cast<double>(scored.size());
  CHECK(accuracy >= 0.99);
  fs::remove_all(root);
}

TEST_CASE("scan: records, labels, counts, and fingerprint determinism") {
  const fs::path root = temp_tree("scan");
  data::generate_synthetic(root.string(), 2, 32, 32, 31);
  const data::Manifest m1 = data::scan_dataset(root.string());
  const data::Manifest m2 = data::scan_dataset(root.string());

  CHECK(m1.records.size() == 16);
  CHECK(m1.warnings.empty());
  CHECK(m1.fingerprint() == m2.fingerprint());
  CHECK(std::is_sorted(m1.records.begin(), m1.records.end(),
                       [](const auto& a, const auto& b) { return a.path < b.path; }));
  for (int label : {0, 1}) {
    for (int mi = 0; mi < data::kNumMagnifications; ++mi) {
      CHECK(m1.count(label, static_cast<data::Magnification>(mi), data::Split::train) == 2);
    }
  }
  for (const auto& r : m1.records) {
    CHECK((r.path.find("benign") != std::string::npos) == (r.label == 0));
    CHECK(!r.patient_id.empty());
  }
  fs::remove_all(root);
  CHECK_THROWS_AS(data::scan_dataset(root.string()), IoError);
}

TEST_CASE("scan: empty tree and undecodable files") {
  const fs::path root = temp_tree("scan_edge");
  fs::create_directories(root);
  const data::Manifest empty = data::scan_dataset(root.string());
  CHECK(empty.records.empty());

  fs::create_directories(root / "benign" / "40X" / "p0");
  {
    std::ofstream out(root / "benign" / "40X" / "p0" / "junk.pgm");
    out << "this is not an image";
  }
  const data::Manifest m = data::scan_dataset(root.string());
  CHECK(m.records.empty());
  REQUIRE(m.warnings.size() == 1);
  CHECK(m.warnings[0].find("junk.pgm") != std::string::npos);
  fs::remove_all(root);
}

TEST_CASE("split: fractions (1,0,0) keep everything in train") {
  data::Manifest m = synthetic_manifest(5, {0, 1}, {data::Magnification::x40});
  for (auto& r : m.records) r.split = data::Split::test;  // must be overwritten
  const data::Manifest out = data::split_stratified(m, 1.0, 0.0, 0.0, 7, false);
  for (const auto& r : out.records) CHECK(r.split == data::Split::train);
}

TEST_CASE("split: largest-remainder counts are exact per stratum") {
  // 100 records per stratum at (0.7, 0.15, 0.15) -> exactly 70/15/15.
  {
    const data::Manifest m = synthetic_manifest(
        100, {0, 1}, {data::Magnification::x40, data::Magnification::x200});
    const data::Manifest out = data::split_stratified(m, 0.7, 0.15, 0.15, 13, false);
    for (int label : {0, 1}) {
      for (const auto mag : {data::Magnification::x40, data::Magnification::x200}) {
        CHECK(out.count(label, mag, data::Split::train) == 70);
        CHECK(out.count(label, mag, data::Split::val) == 15);
        CHECK(out.count(label, mag, data::Split::test) == 15);
      }
    }
  }
  // 7 records at (0.5, 0.25, 0.25): floors (3,1,1), the two largest
  // remainders (val, test) pick up the leftovers -> (3,2,2).
  {
    const data::Manifest m = synthetic_manifest(7, {1}, {data::Magnification::x100});
    const data::Manifest out = data::split_stratified(m, 0.5, 0.25, 0.25, 13, false);
    CHECK(out.count(1, data::Magnification::x100, data::Split::train) == 3);
    CHECK(out.count(1, data::Magnification::x100, data::Split::val) == 2);
    CHECK(out.count(1, data::Magnification::x100, data::Split::test) == 2);
  }
}

TEST_CASE("split: deterministic under seed, reshuffled by a new seed") {
  const data::Manifest m = synthetic_manifest(40, {0, 1}, {data::Magnification::x40});
  const auto key = [](const data::Manifest& mm) {
    std::vector<int> splits;
    for (const auto& r : mm.records) splits.push_back(static_cast<int>(r.split));
    return splits;
  };
  CHECK(key(data::split_stratified(m, 0.6, 0.2, 0.2, 5, false)) ==
        key(data::split_stratified(m, 0.6, 0.2, 0.2, 5, false)));
  CHECK(key(data::split_stratified(m, 0.6, 0.2, 0.2, 5, false)) !=
        key(data::split_stratified(m, 0.6, 0.2, 0.2, 6, false)));
}

TEST_CASE("split: by_patient keeps each patient in one split") {
  const fs::path root = temp_tree("bypatient");
  data::generate_synthetic(root.string(), 10, 32, 32, 41);  // 2 patients per class
  const data::Manifest m = data::scan_dataset(root.string());
  const data::Manifest out = data::split_stratified(m, 0.5, 0.5, 0.0, 9, true);

  std::map<std::string, std::set<data::Split>> seen;
  for (const auto& r : out.records) {
    seen[std::to_string(r.label) + "|" + r.patient_id].insert(r.split);
  }
  CHECK(seen.size() == 4);  // 2 patients x 2 classes
  for (const auto& [patient, splits] : seen) CHECK(splits.size() == 1);
  fs::remove_all(root);
}

TEST_CASE("split: validation of fractions and stratum sizes") {
  const data::Manifest m = synthetic_manifest(1, {0}, {data::Magnification::x40});
  CHECK_THROWS_AS(data::split_stratified(m, 0.5, 0.4, 0.2, 1, false), ConfigError);  // sum > 1
  CHECK_THROWS_AS(data::split_stratified(m, 0.0, 0.5, 0.5, 1, false), ConfigError);  // no train
  CHECK_THROWS_AS(data::split_stratified(m, -0.2, 0.6, 0.6, 1, false), ConfigError);
  // One image cannot populate a requested validation split.
  CHECK_THROWS_WITH_AS(data::split_stratified(m, 0.8, 0.2, 0.0, 1, false),
                       doctest::Contains("stratum"), SplitError);
}

TEST_CASE("manifest: csv round trip preserves records and fingerprint") {
  const fs::path root = temp_tree("manifest");
  data::generate_synthetic(root.string(), 2, 32, 32, 51);
  data::Manifest m = data::scan_dataset(root.string());
  m = data::split_stratified(m, 0.5, 0.5, 0.0, 2, false);

  const fs::path csv = root / "manifest.csv";
  data::save_manifest(csv.string(), m);
  const data::Manifest back = data::load_manifest(csv.string());
  REQUIRE(back.records.size() == m.records.size());
  CHECK(back.fingerprint() == m.fingerprint());
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    CHECK(back.records[i].path == m.records[i].path);
    CHECK(back.records[i].label == m.records[i].label);
    CHECK(back.records[i].magnification == m.records[i].magnification);
    CHECK(back.records[i].patient_id == m.records[i].patient_id);
    CHECK(back.records[i].split == m.records[i].split);
  }
  CHECK_THROWS_AS(data::load_manifest((root / "missing.csv").string()), IoError);
  {
    std::ofstream bad(csv);
    bad << "# {}\npath,label,magnification,patient_id,split\nx,2,40X,p,train\n";
  }
  CHECK_THROWS_AS(data::load_manifest(csv.string()), DataError);
  fs::remove_all(root);
}

TEST_CASE("batches: batch shapes, order determinism, and label multiset") {
  const fs::path root = temp_tree("batches");
  data::generate_synthetic(root.string(), 3, 32, 32, 61);
  data::Manifest m = data::scan_dataset(root.string());
  m = data::split_stratified(m, 1.0, 0.0, 0.0, 3, false);

  preprocess::PreprocessConfig pp;
  pp.pad = 0;
  pp.median_kernel = 1;
  pp.clahe_tile_rows = 4;
  pp.clahe_tile_cols = 4;
  pp.target_h = 24;
  pp.target_w = 24;

  // 24 train records; batch_size larger than the selection -> one batch.
  const auto single =
      data::batches(m, data::Split::train, std::nullopt, 64, 5, pp, /*augment=*/false);
  REQUIRE(single.size() == 1);
  CHECK(single[0].inputs.shape() == Shape{24, 1, 24, 24});
  CHECK(single[0].labels.shape() == Shape{24});
  REQUIRE(single[0].indices.size() == 24);

  // Batch rows map back to manifest records.
  for (std::size_t i = 0; i < 24; ++i) {
    CHECK(single[0].labels.values()[i] ==
          static_cast<double>(m.records[single[0].indices[i]].label));
  }

  // Partial final batch: 24 = 5 * 4 + 4.
  const auto parts = data::batches(m, data::Split::train, std::nullopt, 5, 5, pp, false);
  REQUIRE(parts.size() == 5);
  CHECK(parts.back().inputs.dim(0) == 4);

  // Same seed, same order; different seed, different order.
  const auto again = data::batches(m, data::Split::train, std::nullopt, 5, 5, pp, false);
  for (std::size_t b = 0; b < parts.size(); ++b) CHECK(parts[b].indices == again[b].indices);
  const auto other = data::batches(m, data::Split::train, std::nullopt, 5, 6, pp, false);
  bool any_differ = false;
  for (std::size_t b = 0; b < parts.size(); ++b)
    if (parts[b].indices != other[b].indices) any_differ = true;
  CHECK(any_differ);

  // Label multiset equality against the manifest selection.
  std::multiset<double> emitted;
  for (const auto& batch : parts)
    for (double v : batch.labels.values()) emitted.insert(v);
  std::multiset<double> expected;
  for (const auto& r : m.records)
    if (r.split == data::Split::train) expected.insert(static_cast<double>(r.label));
  CHECK(emitted == expected);

  // Magnification filter narrows the selection.
  const auto only40 =
      data::batches(m, data::Split::train, data::Magnification::x40, 64, 5, pp, false);
  REQUIRE(only40.size() == 1);
  CHECK(only40[0].inputs.dim(0) == 6);

  // Empty selections and bad batch sizes are rejected.
  CHECK_THROWS_AS(data::batches(m, data::Split::test, std::nullopt, 4, 5, pp, false), DataError);
  CHECK_THROWS_AS(data::batches(m, data::Split::train, std::nullopt, 0, 5, pp, false),
                  ConfigError);
  fs::remove_all(root);
}

TEST_CASE("batches: augmentation is seed-deterministic and train-only knobs apply") {
  const fs::path root = temp_tree("batches_aug");
  data::generate_synthetic(root.string(), 2, 32, 32, 71);
  data::Manifest m = data::scan_dataset(root.string());
  m = data::split_stratified(m, 1.0, 0.0, 0.0, 3, false);

  preprocess::PreprocessConfig pp;
  pp.pad = 0;
  pp.median_kernel = 1;
  pp.clahe_tile_rows = 4;
  pp.clahe_tile_cols = 4;
  pp.target_h = 24;
  pp.target_w = 24;

  const auto a = data::batches(m, data::Split::train, std::nullopt, 8, 9, pp, /*augment=*/true);
  const auto b = data::batches(m, data::Split::train, std::nullopt, 8, 9, pp, /*augment=*/true);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto va = a[i].inputs.values();
    const auto vb = b[i].inputs.values();
    CHECK(std::equal(va.begin(), va.end(), vb.begin()));
  }

  // Augmented pixels differ from the un-augmented pipeline for some sample.
  const auto plain = data::batches(m, data::Split::train, std::nullopt, 8, 9, pp, false);
  bool differs = false;
  for (std::size_t i = 0; i < a.size() && !differs; ++i) {
    const auto va = a[i].inputs.values();
    const auto vp = plain[i].inputs.values();
    differs = !std::equal(va.begin(), va.end(), vp.begin());
  }
  CHECK(differs);
  fs::remove_all(root);
}
