#include "histonet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "histonet/errors.hpp"
#include "histonet/image.hpp"
#include "histonet/rng.hpp"
#include "histonet/serial.hpp"

namespace fs = std::filesystem;

namespace histonet::data {

std::string magnification_name(Magnification m) {
  switch (m) {
    case Magnification::x40: return "40X";
    case Magnification::x100: return "100X";
    case Magnification::x200: return "200X";
    case Magnification::x400: return "400X";
  }
  throw ConfigError("unknown magnification");
}

Magnification magnification_from_name(const std::string& s) {
  if (s == "40X") return Magnification::x40;
  if (s == "100X") return Magnification::x100;
  if (s == "200X") return Magnification::x200;
  if (s == "400X") return Magnification::x400;
  throw ConfigError("unknown magnification: " + s);
}

std::string split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  throw ConfigError("unknown split");
}

Split split_from_name(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split: " + s);
}

std::uint64_t Manifest::fingerprint() const {
  std::string blob;
  for (const SampleRecord& r : records) {
    blob += r.path;
    blob += '|';
    blob += std::to_string(r.label);
    blob += '|';
    blob += magnification_name(r.magnification);
    blob += '|';
    blob += r.patient_id;
    blob += '|';
    blob += split_name(r.split);
    blob += '\n';
  }
  return serial::fnv1a64(blob);
}

std::int64_t Manifest::count(int label, Magnification mag, Split split) const {
  std::int64_t n = 0;
  for (const SampleRecord& r : records) {
    if (r.label == label && r.magnification == mag && r.split == split) ++n;
  }
  return n;
}

std::int64_t Manifest::count_split(Split split) const {
  std::int64_t n = 0;
  for (const SampleRecord& r : records) {
    if (r.split == split) ++n;
  }
  return n;
}

Manifest scan_dataset(const std::string& root) {
  if (!fs::exists(root) || !fs::is_directory(root)) {
    throw IoError("dataset root is not a readable directory: " + root);
  }
  Manifest m;
  struct Candidate {
    std::string path;
    int label;
    Magnification mag;
    std::string patient_id;
  };
  std::vector<Candidate> candidates;
  for (const auto& [class_name, label] :
       std::vector<std::pair<std::string, int>>{{"benign", 0}, {"malignant", 1}}) {
    const fs::path class_dir = fs::path(root) / class_name;
    if (!fs::is_directory(class_dir)) continue;
    for (int mi = 0; mi < kNumMagnifications; ++mi) {
      const auto mag = static_cast<Magnification>(mi);
      const fs::path mag_dir = class_dir / magnification_name(mag);
      if (!fs::is_directory(mag_dir)) continue;
      for (const auto& patient_entry : fs::directory_iterator(mag_dir)) {
        if (!patient_entry.is_directory()) {
          m.warnings.push_back("not inside a patient directory, skipped: " +
                               patient_entry.path().string());
          continue;
        }
        const std::string patient_id = patient_entry.path().filename().string();
        for (const auto& file_entry : fs::recursive_directory_iterator(patient_entry.path())) {
          if (!file_entry.is_regular_file()) continue;
          candidates.push_back(
              {file_entry.path().string(), label, mag, patient_id});
        }
      }
    }
  }
  std::sort(candidates.begin(), candidates.end(),
            [](const Candidate& a, const Candidate& b) { return a.path < b.path; });
  std::sort(m.warnings.begin(), m.warnings.end());
  for (const Candidate& c : candidates) {
    try {
      (void)load_image(c.path);
    } catch (const Error& e) {
      m.warnings.push_back("undecodable, skipped: " + c.path + " (" + e.what() + ")");
      continue;
    }
    m.records.push_back({c.path, c.label, c.mag, c.patient_id, Split::train});
  }
  return m;
}

namespace {

// Largest-remainder apportionment of n into three non-negative fractions.
std::array<std::int64_t, 3> apportion(std::int64_t n, const std::array<double, 3>& fracs) {
  std::array<std::int64_t, 3> counts{};
  std::array<double, 3> remainders{};
  std::int64_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = static_cast<double>(n) * fracs[i];
    counts[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(std::floor(exact));
    remainders[static_cast<std::size_t>(i)] = exact - std::floor(exact);
    assigned += counts[static_cast<std::size_t>(i)];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return remainders[static_cast<std::size_t>(a)] > remainders[static_cast<std::size_t>(b)];
  });
  for (std::int64_t left = n - assigned; left > 0; --left) {
    counts[static_cast<std::size_t>(order[static_cast<std::size_t>((n - assigned) - left)])] += 1;
  }
  return counts;
}

void validate_fractions(double train_frac, double val_frac, double test_frac) {
  if (train_frac <= 0.0 || val_frac < 0.0 || test_frac < 0.0) {
    throw ConfigError("split fractions must be non-negative with train > 0");
  }
  if (std::fabs(train_frac + val_frac + test_frac - 1.0) > 1e-9) {
    throw ConfigError("split fractions must sum to 1");
  }
}

}  // namespace

Manifest split_stratified(const Manifest& m, double train_frac, double val_frac,
                          double test_frac, std::uint64_t seed, bool by_patient) {
  validate_fractions(train_frac, val_frac, test_frac);
  const std::array<double, 3> fracs{train_frac, val_frac, test_frac};
  Manifest out = m;

  // Unit = what gets assigned to one split wholesale: a single image, or a
  // whole patient (all magnifications) when by_patient.
  // Stratum = the population the fractions apply to: (label, magnification)
  // for images, label for patients.
  std::map<std::string, std::vector<std::string>> strata;  // stratum -> unit keys
  std::map<std::string, std::vector<std::size_t>> unit_records;
  for (std::size_t i = 0; i < out.records.size(); ++i) {
    const SampleRecord& r = out.records[i];
    const std::string unit =
        by_patient ? std::to_string(r.label) + "|" + r.patient_id
                   : std::to_string(r.label) + "|" + magnification_name(r.magnification) + "|" +
                         std::to_string(i);
    if (unit_records[unit].empty()) {
      const std::string stratum =
          by_patient ? std::to_string(r.label)
                     : std::to_string(r.label) + "|" + magnification_name(r.magnification);
      strata[stratum].push_back(unit);
    }
    unit_records[unit].push_back(i);
  }

  std::uint64_t stratum_index = 0;
  for (auto& [stratum, units] : strata) {
    const auto n = static_cast<std::int64_t>(units.size());
    const auto counts = apportion(n, fracs);
    for (int s = 0; s < 3; ++s) {
      if (fracs[static_cast<std::size_t>(s)] > 0.0 && counts[static_cast<std::size_t>(s)] == 0) {
        throw SplitError("stratum '" + stratum + "' has " + std::to_string(n) +
                         (by_patient ? " patients" : " images") +
                         ", too few to populate the " + split_name(static_cast<Split>(s)) +
                         " split");
      }
    }
    Rng rng(mix_seed(seed, stratum_index++));
    // Fisher-Yates with our own Rng: std::shuffle is implementation-defined.
    for (std::size_t i = units.size(); i > 1; --i) {
      std::swap(units[i - 1], units[static_cast<std::size_t>(rng.uniform_int(i))]);
    }
    std::int64_t cursor = 0;
    for (int s = 0; s < 3; ++s) {
      for (std::int64_t k = 0; k < counts[static_cast<std::size_t>(s)]; ++k) {
        for (std::size_t ri : unit_records[units[static_cast<std::size_t>(cursor)]]) {
          out.records[ri].split = static_cast<Split>(s);
        }
        ++cursor;
      }
    }
  }
  return out;
}

void save_manifest(const std::string& path, const Manifest& m) {
  nlohmann::json meta;
  meta["fingerprint"] = m.fingerprint();
  meta["records"] = m.records.size();
  meta["warnings"] = m.warnings;
  std::string text = "# " + meta.dump() + "\n";
  text += "path,label,magnification,patient_id,split\n";
  for (const SampleRecord& r : m.records) {
    if (r.path.find(',') != std::string::npos || r.patient_id.find(',') != std::string::npos) {
      throw DataError("manifest fields must not contain commas: " + r.path);
    }
    text += r.path + "," + std::to_string(r.label) + "," + magnification_name(r.magnification) +
            "," + r.patient_id + "," + split_name(r.split) + "\n";
  }
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

Manifest load_manifest(const std::string& path) {
  const std::vector<std::uint8_t> bytes = read_file_bytes(path);
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  std::string line;
  Manifest m;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {  // column header
      header_seen = true;
      continue;
    }
    std::array<std::string, 5> fields;
    std::size_t start = 0;
    for (int f = 0; f < 5; ++f) {
      const std::size_t comma = line.find(',', start);
      if (f < 4 && comma == std::string::npos) {
        throw DataError("malformed manifest line: " + line);
      }
      fields[static_cast<std::size_t>(f)] =
          line.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      start = comma + 1;
    }
    SampleRecord r;
    r.path = fields[0];
    if (fields[1] != "0" && fields[1] != "1") {
      throw DataError("manifest label must be 0 or 1: " + line);
    }
    r.label = fields[1] == "1" ? 1 : 0;
    try {
      r.magnification = magnification_from_name(fields[2]);
      r.split = split_from_name(fields[4]);
    } catch (const ConfigError& e) {
      throw DataError(std::string("malformed manifest line: ") + e.what());
    }
    r.patient_id = fields[3];
    m.records.push_back(std::move(r));
  }
  return m;
}

std::vector<Batch> batches(const Manifest& m, Split split, std::optional<Magnification> mag,
                           int batch_size, std::uint64_t seed,
                           const preprocess::PreprocessConfig& cfg, bool augment) {
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  cfg.validate();
  std::vector<std::size_t> selection;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const SampleRecord& r = m.records[i];
    if (r.split != split) continue;
    if (mag && r.magnification != *mag) continue;
    selection.push_back(i);
  }
  if (selection.empty()) {
    throw DataError("no records selected for split '" + split_name(split) + "'" +
                    (mag ? " at " + magnification_name(*mag) : ""));
  }
  Rng rng(seed);
  for (std::size_t i = selection.size(); i > 1; --i) {
    std::swap(selection[i - 1], selection[static_cast<std::size_t>(rng.uniform_int(i))]);
  }

  std::vector<Batch> out;
  std::int64_t channels = -1;
  for (std::size_t begin = 0; begin < selection.size();
       begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end =
        std::min(selection.size(), begin + static_cast<std::size_t>(batch_size));
    const auto b = static_cast<std::int64_t>(end - begin);
    Tensor inputs;
    Tensor labels = Tensor::zeros({b});
    std::vector<std::size_t> indices(selection.begin() + static_cast<std::ptrdiff_t>(begin),
                                     selection.begin() + static_cast<std::ptrdiff_t>(end));
    double* lp = labels.values_mut().data();
    for (std::size_t k = begin; k < end; ++k) {
      const SampleRecord& r = m.records[selection[k]];
      const Image img = load_image(r.path);
      const Tensor t = preprocess::run_pipeline(
          img, cfg, augment, mix_seed(seed, static_cast<std::uint64_t>(selection[k])));
      if (!inputs.defined()) {
        channels = t.dim(0);
        inputs = Tensor::zeros({b, channels, t.dim(1), t.dim(2)});
      }
      if (t.shape() != Shape{channels, inputs.dim(2), inputs.dim(3)}) {
        throw DataError("inconsistent image channels/extents in batch: " + r.path);
      }
      std::copy_n(t.values().data(), static_cast<std::size_t>(t.numel()),
                  inputs.values_mut().data() +
                      static_cast<std::size_t>(k - begin) * t.numel());
      lp[k - begin] = static_cast<double>(r.label);
    }
    out.push_back({inputs, labels, std::move(indices)});
  }
  return out;
}

namespace {

void box_blur(std::vector<double>& img, int h, int w, int passes) {
  std::vector<double> tmp(img.size());
  for (int p = 0; p < passes; ++p) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int sy = std::clamp(y + dy, 0, h - 1);
            const int sx = std::clamp(x + dx, 0, w - 1);
            acc += img[static_cast<std::size_t>(sy * w + sx)];
          }
        }
        tmp[static_cast<std::size_t>(y * w + x)] = acc / 9.0;
      }
    }
    img.swap(tmp);
  }
}

Image render_to_image(const std::vector<double>& buf, int h, int w) {
  Image img = Image::create(h, w, 1);
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const double r = std::floor(buf[i] + 0.5);
    img.pixels[i] = static_cast<std::uint8_t>(std::clamp(r, 0.0, 255.0));
  }
  return img;
}

std::vector<double> synth_benign(Rng& rng, int h, int w) {
  std::vector<double> buf(static_cast<std::size_t>(h) * w, 200.0);
  const int bumps = 3 + static_cast<int>(rng.uniform_int(3));
  for (int k = 0; k < bumps; ++k) {
    const double cy = rng.uniform(0.0, h - 1.0);
    const double cx = rng.uniform(0.0, w - 1.0);
    const double sigma = rng.uniform(8.0, 16.0);
    const double amp = -rng.uniform(30.0, 70.0);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
        buf[static_cast<std::size_t>(y * w + x)] += amp * std::exp(-d2 / (2.0 * sigma * sigma));
      }
    }
  }
  // Gentle illumination gradient so benign images are not all alike.
  const double gy = rng.uniform(-0.15, 0.15);
  const double gx = rng.uniform(-0.15, 0.15);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      buf[static_cast<std::size_t>(y * w + x)] += gy * y + gx * x;
    }
  }
  return buf;
}

std::vector<double> synth_malignant(Rng& rng, int h, int w) {
  std::vector<double> buf(static_cast<std::size_t>(h) * w);
  for (double& v : buf) v = 150.0 + rng.uniform(-55.0, 55.0);  // speckle
  const int nuclei = 6 + static_cast<int>(rng.uniform_int(5));
  for (int k = 0; k < nuclei; ++k) {
    const double cy = rng.uniform(4.0, h - 5.0);
    const double cx = rng.uniform(4.0, w - 5.0);
    const double a = rng.uniform(6.0, 12.0);   // major semi-axis
    const double b = rng.uniform(2.0, 4.0);    // minor semi-axis
    const double theta = rng.uniform(0.0, 3.14159265358979323846);
    const double dark = rng.uniform(40.0, 80.0);
    const double ct = std::cos(theta);
    const double st = std::sin(theta);
    const int reach = static_cast<int>(a) + 1;
    for (int y = std::max(0, static_cast<int>(cy) - reach);
         y < std::min(h, static_cast<int>(cy) + reach + 1); ++y) {
      for (int x = std::max(0, static_cast<int>(cx) - reach);
           x < std::min(w, static_cast<int>(cx) + reach + 1); ++x) {
        const double u = (x - cx) * ct + (y - cy) * st;
        const double v = -(x - cx) * st + (y - cy) * ct;
        if ((u * u) / (a * a) + (v * v) / (b * b) <= 1.0) {
          buf[static_cast<std::size_t>(y * w + x)] = dark + rng.uniform(-5.0, 5.0);
        }
      }
    }
  }
  return buf;
}

}  // namespace

void generate_synthetic(const std::string& root, int n_per_class, int height, int width,
                        std::uint64_t seed) {
  if (n_per_class < 1) throw ConfigError("n_per_class must be >= 1");
  if (height < 16 || width < 16) throw ConfigError("synthetic images must be at least 16x16");
  constexpr int kImagesPerPatient = 5;
  constexpr std::array<int, kNumMagnifications> kBlurPasses{3, 2, 1, 0};
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create dataset root: " + root + " (" + ec.message() + ")");
  for (int label = 0; label < 2; ++label) {
    const std::string class_name = label == 0 ? "benign" : "malignant";
    for (int mi = 0; mi < kNumMagnifications; ++mi) {
      const auto mag = static_cast<Magnification>(mi);
      for (int i = 0; i < n_per_class; ++i) {
        const std::string patient =
            (label == 0 ? "patient_b" : "patient_m") + std::to_string(i / kImagesPerPatient);
        const fs::path dir =
            fs::path(root) / class_name / magnification_name(mag) / patient;
        fs::create_directories(dir, ec);
        if (ec) throw IoError("cannot create directory: " + dir.string());
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(label * kNumMagnifications + mi),
                         static_cast<std::uint64_t>(i)));
        std::vector<double> buf =
            label == 0 ? synth_benign(rng, height, width) : synth_malignant(rng, height, width);
        box_blur(buf, height, width, kBlurPasses[static_cast<std::size_t>(mi)]);
        char name[32];
        std::snprintf(name, sizeof(name), "img_%04d.pgm", i);
        save_pgm((dir / name).string(), render_to_image(buf, height, width));
      }
    }
  }
}

}  // namespace histonet::data
