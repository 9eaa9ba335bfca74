#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "histonet/preprocess.hpp"
#include "histonet/tensor.hpp"

namespace histonet::data {

enum class Magnification { x40 = 0, x100 = 1, x200 = 2, x400 = 3 };
enum class Split { train = 0, val = 1, test = 2 };

inline constexpr int kNumMagnifications = 4;

std::string magnification_name(Magnification m);   // "40X", "100X", ...
Magnification magnification_from_name(const std::string& s);
std::string split_name(Split s);
Split split_from_name(const std::string& s);

struct SampleRecord {
  std::string path;
  int label = 0;  // 0 = benign, 1 = malignant
  Magnification magnification = Magnification::x40;
  std::string patient_id;
  Split split = Split::train;
};

struct Manifest {
  std::vector<SampleRecord> records;
  std::vector<std::string> warnings;  // undecodable or misplaced files, skipped

  // Content hash over the ordered records; identical trees scan identically.
  std::uint64_t fingerprint() const;
  std::int64_t count(int label, Magnification mag, Split split) const;
  std::int64_t count_split(Split split) const;
};

// Walks root/{benign,malignant}/{40X,100X,200X,400X}/<patient_id>/<files>,
// keeping every decodable image, in lexicographic path order. All records
// start in the train split.
Manifest scan_dataset(const std::string& root);

// Largest-remainder stratified assignment by (label, magnification) — or by
// patient within label when by_patient, so no patient spans two splits.
// Fractions must be non-negative and sum to 1 with train > 0.
Manifest split_stratified(const Manifest& m, double train_frac, double val_frac,
                          double test_frac, std::uint64_t seed, bool by_patient);

// CSV with a `# {json}` metadata first line (fingerprint, counts).
void save_manifest(const std::string& path, const Manifest& m);
Manifest load_manifest(const std::string& path);

struct Batch {
  Tensor inputs;                     // (b, C, H, W)
  Tensor labels;                     // (b), values 0.0 / 1.0
  std::vector<std::size_t> indices;  // per-row index into Manifest::records
};

// One epoch of seeded-shuffled minibatches over the selected records, the
// final partial batch included. Preprocessing runs per the config; `augment`
// draws per-sample augmentation (train split only — callers pass false when
// evaluating). Empty selection -> DataError.
std::vector<Batch> batches(const Manifest& m, Split split, std::optional<Magnification> mag,
                           int batch_size, std::uint64_t seed,
                           const preprocess::PreprocessConfig& cfg, bool augment);

// Writes a synthetic two-class dataset tree: class 0 = smooth low-frequency
// blob images, class 1 = high-frequency speckle with dark nuclei ellipses;
// n_per_class images per (class, magnification), magnification simulated by
// blur strength. Deterministic in seed.
void generate_synthetic(const std::string& root, int n_per_class, int height, int width,
                        std::uint64_t seed);

}  // namespace histonet::data
