// Command-line front end tying the library together: synthetic data
// generation, preprocessing, training, evaluation, gradient verification, and
// artifact consistency reports.
//
// Configuration model: every pipeline command resolves a RunConfig from (in
// increasing precedence) built-in defaults, an optional JSON config file
// (--config), and individual CLI flags. The resolved config's hash is
// embedded in every artifact the command writes, and `report` re-derives the
// hashes to verify a run directory is internally consistent.
//
// Exit codes: 0 success, 1 check failure (failed gradcheck / inconsistent
// artifacts), 2 configuration errors, 3 data or I/O errors, 4 numeric
// failures.

#include <CLI11.hpp>
#include <json.hpp>

#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <histonet/backbone.hpp>
#include <histonet/data.hpp>
#include <histonet/errors.hpp>
#include <histonet/gradcheck.hpp>
#include <histonet/image.hpp>
#include <histonet/metrics.hpp>
#include <histonet/preprocess.hpp>
#include <histonet/serial.hpp>
#include <histonet/tensor.hpp>
#include <histonet/training.hpp>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace histonet;

namespace {

// ---------------------------------------------------------------------------
// Small file helpers.

std::string read_text_file(const std::string& path) {
  const std::vector<std::uint8_t> bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

void write_text_file(const std::string& path, const std::string& text) {
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, v);
  return std::string(buf);
}

// ---------------------------------------------------------------------------
// RunConfig: the merged, fully-resolved settings of one command invocation.
// Machine-local paths (data root, output directory) are deliberately kept out
// of the hashed config so identical runs hash identically across machines.

struct DataConfig {
  double train_frac = 0.7;
  double val_frac = 0.15;
  double test_frac = 0.15;
  bool by_patient = false;
  std::uint64_t split_seed = 0;
};

struct RunConfig {
  DataConfig data;
  preprocess::PreprocessConfig pp;
  backbone::ModelConfig model;
  training::TrainConfig train;
  std::uint64_t seed = 0;

  json to_json_obj() const {
    json j;
    j["data"] = {{"train_frac", data.train_frac},
                 {"val_frac", data.val_frac},
                 {"test_frac", data.test_frac},
                 {"by_patient", data.by_patient},
                 {"split_seed", data.split_seed}};
    j["preprocess"] = json::parse(pp.to_json());
    j["model"] = json::parse(model.to_json());
    j["train"] = json::parse(train.to_json());
    j["seed"] = seed;
    return j;
  }

  std::string hash() const { return serial::config_hash_hex(to_json_obj().dump()); }

  // Builds from a sparse config object: absent sections and keys keep their
  // defaults. A top-level "seed" propagates to any section that does not set
  // its own, so one number can seed the whole run.
  static RunConfig from_json_obj(const json& j) {
    if (!j.is_object()) throw ConfigError("run config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
      (void)value;
      if (key != "data" && key != "preprocess" && key != "model" && key != "train" &&
          key != "seed") {
        throw ConfigError("unknown run config section '" + key + "'");
      }
    }
    RunConfig rc;
    try {
      if (j.contains("data")) {
        const json& d = j.at("data");
        for (const auto& [key, value] : d.items()) {
          (void)value;
          if (key != "train_frac" && key != "val_frac" && key != "test_frac" &&
              key != "by_patient" && key != "split_seed") {
            throw ConfigError("unknown data config key '" + key + "'");
          }
        }
        rc.data.train_frac = d.value("train_frac", rc.data.train_frac);
        rc.data.val_frac = d.value("val_frac", rc.data.val_frac);
        rc.data.test_frac = d.value("test_frac", rc.data.test_frac);
        rc.data.by_patient = d.value("by_patient", rc.data.by_patient);
        rc.data.split_seed = d.value("split_seed", rc.data.split_seed);
      }
      if (j.contains("preprocess")) {
        rc.pp = preprocess::PreprocessConfig::from_json(j.at("preprocess").dump());
      }
      if (j.contains("model")) {
        rc.model = backbone::ModelConfig::from_json(j.at("model").dump());
      }
      if (j.contains("train")) {
        rc.train = training::TrainConfig::from_json(j.at("train").dump());
      }
      if (j.contains("seed")) {
        rc.seed = j.at("seed").get<std::uint64_t>();
        if (!j.contains("model") || !j.at("model").contains("seed")) rc.model.seed = rc.seed;
        if (!j.contains("train") || !j.at("train").contains("seed")) rc.train.seed = rc.seed;
        if (!j.contains("preprocess") || !j.at("preprocess").contains("seed")) {
          rc.pp.seed = rc.seed;
        }
      }
    } catch (const json::exception& e) {
      throw ConfigError(std::string("malformed run config: ") + e.what());
    }
    if (!(rc.data.train_frac > 0.0) || rc.data.val_frac < 0.0 || rc.data.test_frac < 0.0 ||
        std::abs(rc.data.train_frac + rc.data.val_frac + rc.data.test_frac - 1.0) > 1e-9) {
      throw ConfigError(
          "split fractions must be non-negative, sum to 1, and keep the train fraction "
          "positive");
    }
    return rc;
  }
};

// ---------------------------------------------------------------------------
// Flag overrides. Each pipeline command registers the subset it supports;
// values the user actually passed are written into the sparse config object
// before resolution, so file settings and flags flow through one code path
// and the library parsers validate everything.

struct FlagOverrides {
  // preprocess
  int pad = 0;
  int median_kernel = 0;
  int clahe_tiles = 0;
  double clahe_clip = 0.0;
  int target_size = 0;
  // model
  std::string attention;
  int stem_channels = 0;
  int head_hidden = 0;
  int head_layers = 0;
  double dropout = 0.0;
  // train
  std::string optimizer;
  double lr = 0.0;
  int batch_size = 0;
  int max_epochs = 0;
  int patience = 0;
  double momentum = 0.0;
  // data
  double train_frac = 0.0;
  double val_frac = 0.0;
  double test_frac = 0.0;
  bool by_patient = false;
  std::uint64_t split_seed = 0;
  // global
  std::uint64_t seed = 0;

  CLI::Option* pad_o = nullptr;
  CLI::Option* median_o = nullptr;
  CLI::Option* tiles_o = nullptr;
  CLI::Option* clip_o = nullptr;
  CLI::Option* target_o = nullptr;
  CLI::Option* attention_o = nullptr;
  CLI::Option* stem_o = nullptr;
  CLI::Option* hidden_o = nullptr;
  CLI::Option* layers_o = nullptr;
  CLI::Option* dropout_o = nullptr;
  CLI::Option* optimizer_o = nullptr;
  CLI::Option* lr_o = nullptr;
  CLI::Option* batch_o = nullptr;
  CLI::Option* epochs_o = nullptr;
  CLI::Option* patience_o = nullptr;
  CLI::Option* momentum_o = nullptr;
  CLI::Option* train_frac_o = nullptr;
  CLI::Option* val_frac_o = nullptr;
  CLI::Option* test_frac_o = nullptr;
  CLI::Option* by_patient_o = nullptr;
  CLI::Option* split_seed_o = nullptr;
  CLI::Option* seed_o = nullptr;

  void add_seed_flag(CLI::App* sub) {
    seed_o = sub->add_option("--seed", seed,
                             "Global seed; overrides the model, training, and preprocessing "
                             "seeds together");
  }

  void add_preprocess_flags(CLI::App* sub) {
    pad_o = sub->add_option("--pad", pad, "Zero-padding rows/columns");
    median_o = sub->add_option("--median-kernel", median_kernel, "Median filter size (odd)");
    tiles_o = sub->add_option("--clahe-tiles", clahe_tiles, "CLAHE tile grid (N x N)");
    clip_o = sub->add_option("--clahe-clip", clahe_clip, "CLAHE clip limit");
    target_o = sub->add_option("--target-size", target_size, "Resize target (N x N)");
  }

  void add_model_flags(CLI::App* sub) {
    attention_o = sub->add_option("--attention", attention, "Attention mechanism")
                      ->check(CLI::IsMember({"none", "cbam", "self", "deformable"}));
    stem_o = sub->add_option("--stem-channels", stem_channels, "Stem convolution width");
    hidden_o = sub->add_option("--head-hidden", head_hidden, "Classifier hidden width");
    layers_o = sub->add_option("--head-layers", head_layers, "Classifier dense layers (2 or 3)");
    dropout_o = sub->add_option("--dropout", dropout, "Classifier dropout probability");
  }

  void add_train_flags(CLI::App* sub) {
    optimizer_o = sub->add_option("--optimizer", optimizer, "Optimizer")
                      ->check(CLI::IsMember({"sgd", "adam"}));
    lr_o = sub->add_option("--lr", lr, "Learning rate");
    batch_o = sub->add_option("--batch-size", batch_size, "Minibatch size");
    epochs_o = sub->add_option("--max-epochs", max_epochs, "Maximum training epochs");
    patience_o = sub->add_option("--patience", patience, "Early-stopping patience (epochs)");
    momentum_o = sub->add_option("--momentum", momentum, "SGD momentum");
  }

  void add_data_flags(CLI::App* sub) {
    train_frac_o = sub->add_option("--train-frac", train_frac, "Training split fraction");
    val_frac_o = sub->add_option("--val-frac", val_frac, "Validation split fraction");
    test_frac_o = sub->add_option("--test-frac", test_frac, "Test split fraction");
    by_patient_o = sub->add_flag("--by-patient", by_patient,
                                 "Keep each patient's images within a single split");
    split_seed_o = sub->add_option("--split-seed", split_seed,
                                   "Split assignment seed (kept separate from --seed so "
                                   "evaluation can recover the training split)");
  }

  void apply(json& j) const {
    auto passed = [](const CLI::Option* o) { return o != nullptr && o->count() > 0; };
    if (passed(pad_o)) j["preprocess"]["pad"] = pad;
    if (passed(median_o)) j["preprocess"]["median_kernel"] = median_kernel;
    if (passed(tiles_o)) j["preprocess"]["clahe_tiles"] = {clahe_tiles, clahe_tiles};
    if (passed(clip_o)) j["preprocess"]["clahe_clip_limit"] = clahe_clip;
    if (passed(target_o)) j["preprocess"]["target_size"] = {target_size, target_size};
    if (passed(attention_o)) j["model"]["attention"] = attention;
    if (passed(stem_o)) j["model"]["stem_channels"] = stem_channels;
    if (passed(hidden_o)) j["model"]["head"]["hidden"] = head_hidden;
    if (passed(layers_o)) j["model"]["head"]["dense_layers"] = head_layers;
    if (passed(dropout_o)) j["model"]["head"]["dropout_p"] = dropout;
    if (passed(optimizer_o)) j["train"]["optimizer"] = optimizer;
    if (passed(lr_o)) j["train"]["learning_rate"] = lr;
    if (passed(batch_o)) j["train"]["batch_size"] = batch_size;
    if (passed(epochs_o)) j["train"]["max_epochs"] = max_epochs;
    if (passed(patience_o)) j["train"]["early_stopping_patience"] = patience;
    if (passed(momentum_o)) j["train"]["sgd_momentum"] = momentum;
    if (passed(train_frac_o)) j["data"]["train_frac"] = train_frac;
    if (passed(val_frac_o)) j["data"]["val_frac"] = val_frac;
    if (passed(test_frac_o)) j["data"]["test_frac"] = test_frac;
    if (passed(by_patient_o)) j["data"]["by_patient"] = true;
    if (passed(split_seed_o)) j["data"]["split_seed"] = split_seed;
    if (passed(seed_o)) {
      j["seed"] = seed;
      for (const char* section : {"model", "train", "preprocess"}) {
        if (j.contains(section)) j[section].erase("seed");
      }
    }
  }
};

json load_sparse_config(const std::string& config_path) {
  if (config_path.empty()) return json::object();
  const std::string text = read_text_file(config_path);  // IoError when unreadable
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + config_path + " is not valid JSON: " + e.what());
  }
}

RunConfig resolve_config(const std::string& config_path, const FlagOverrides& flags,
                         const json* base = nullptr) {
  json j = base != nullptr ? *base : json::object();
  if (!config_path.empty()) j = load_sparse_config(config_path);
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  flags.apply(j);
  return RunConfig::from_json_obj(j);
}

// ---------------------------------------------------------------------------
// Checkpoint header access (shared by eval and report).

json read_checkpoint_header(const std::string& path) {
  const std::vector<std::uint8_t> bytes = read_file_bytes(path);
  if (bytes.size() < 4) throw DataError("checkpoint too short: " + path);
  const std::uint32_t header_len = serial::read_u32le(bytes.data());
  if (bytes.size() < 4 + static_cast<std::size_t>(header_len)) {
    throw DataError("checkpoint header truncated: " + path);
  }
  try {
    return json::parse(std::string(reinterpret_cast<const char*>(bytes.data()) + 4, header_len));
  } catch (const json::exception&) {
    throw DataError("checkpoint header is not valid JSON: " + path);
  }
}

// ---------------------------------------------------------------------------
// synth

int cmd_synth(const std::string& out, int n_per_class, int size, std::uint64_t seed) {
  data::generate_synthetic(out, n_per_class, size, size, seed);
  const data::Manifest m = data::scan_dataset(out);
  std::printf("wrote %zu images under %s\n", m.records.size(), out.c_str());
  for (int label = 0; label < 2; ++label) {
    std::printf("  %-9s", label == 0 ? "benign" : "malignant");
    for (int mi = 0; mi < data::kNumMagnifications; ++mi) {
      const auto mag = static_cast<data::Magnification>(mi);
      std::printf(" %s %" PRId64, data::magnification_name(mag).c_str(),
                  m.count(label, mag, data::Split::train));
    }
    std::printf("\n");
  }
  std::printf("fingerprint %s\n", hex64(m.fingerprint()).c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// preprocess

Image heatmap_from_tensor(const Tensor& t) {
  const int h = static_cast<int>(t.dim(1));
  const int w = static_cast<int>(t.dim(2));
  Image img = Image::create(h, w, 1);
  const auto vals = t.values();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double v = std::floor(vals[static_cast<std::size_t>(y * w + x)] * 255.0 + 0.5);
      img.at(y, x, 0) = static_cast<std::uint8_t>(std::min(255.0, std::max(0.0, v)));
    }
  }
  return img;
}

int cmd_preprocess(const std::string& in_dir, const std::string& out_dir, const RunConfig& rc) {
  if (!fs::exists(in_dir)) throw IoError("input directory does not exist: " + in_dir);
  if (!fs::is_directory(in_dir)) throw IoError("input path is not a directory: " + in_dir);
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(in_dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path().string());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) {
    std::printf("no images found in %s; nothing to do\n", in_dir.c_str());
    return 0;
  }
  fs::create_directories(out_dir);
  const std::string pp_hash = serial::config_hash_hex(rc.pp.to_json());
  for (const std::string& path : files) {
    const Image img = load_image(path);
    const Tensor t = preprocess::run_pipeline(img, rc.pp, /*training=*/false);
    const std::string stem = fs::path(path).stem().string();
    serial::save_tensor_raw((fs::path(out_dir) / (stem + ".f64")).string(), t, pp_hash);
    save_pgm((fs::path(out_dir) / (stem + "_heatmap.pgm")).string(), heatmap_from_tensor(t));
  }
  json cfg_record;
  cfg_record["config"] = json::parse(rc.pp.to_json());
  cfg_record["config_hash"] = pp_hash;
  write_text_file((fs::path(out_dir) / "preprocess_config.json").string(),
                  cfg_record.dump(2) + "\n");
  std::printf("processed %zu image(s) -> %s\n", files.size(), out_dir.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// train

json runconfig_record(const RunConfig& rc, const std::string& data_root, const std::string& out,
                      std::uint64_t dataset_fingerprint) {
  json j;
  j["config"] = rc.to_json_obj();
  j["config_hash"] = rc.hash();
  j["paths"] = {{"data", data_root}, {"out", out}};
  j["dataset_fingerprint"] = hex64(dataset_fingerprint);
  return j;
}

int cmd_train(const std::string& data_root, const std::string& out, const RunConfig& rc) {
  const data::Manifest scanned = data::scan_dataset(data_root);
  for (const std::string& w : scanned.warnings) std::cerr << "warning: " << w << "\n";
  if (scanned.records.empty()) throw DataError("no usable images under " + data_root);
  const data::Manifest m =
      data::split_stratified(scanned, rc.data.train_frac, rc.data.val_frac, rc.data.test_frac,
                             rc.data.split_seed, rc.data.by_patient);
  backbone::Model model = backbone::build_model(rc.model);
  std::printf("dataset: %zu images (train %" PRId64 ", val %" PRId64 ", test %" PRId64 ")\n",
              m.records.size(), m.count_split(data::Split::train),
              m.count_split(data::Split::val), m.count_split(data::Split::test));
  std::printf("model: %" PRId64 " parameters, config hash %s\n", model.parameter_count(),
              rc.hash().c_str());
  const training::TrainLog log = training::train(model, m, rc.pp, rc.train);
  fs::create_directories(out);
  backbone::save_model((fs::path(out) / "checkpoint.bin").string(), model);
  write_text_file((fs::path(out) / "train_log.csv").string(), log.to_csv());
  write_text_file((fs::path(out) / "train_log.json").string(), log.to_json());
  write_text_file((fs::path(out) / "runconfig.json").string(),
                  runconfig_record(rc, data_root, out, m.fingerprint()).dump(2) + "\n");
  const training::EpochLog& best = log.epochs.at(static_cast<std::size_t>(log.best_epoch - 1));
  std::printf("trained %zu epoch(s); best epoch %d (val loss %.6f, val acc %.4f)\n",
              log.epochs.size(), log.best_epoch, log.best_val_loss, best.val_acc);
  std::printf("artifacts written to %s\n", out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// eval

void print_entry(const std::string& name, const metrics::EvalEntry& e) {
  std::printf("%-10s n %5" PRId64 "  acc %.4f  precision %.4f  recall %.4f  f1 %.4f  auc %.4f\n",
              name.c_str(), e.cm.total(), e.sc.accuracy, e.sc.precision, e.sc.recall, e.sc.f1,
              e.roc.auc);
}

int cmd_eval(const std::string& checkpoint, const std::string& data_root,
             const std::string& split_name, const std::string& out,
             const std::string& config_path, const FlagOverrides& flags) {
  // Settings recorded at training time are the default baseline, so a bare
  // `eval --checkpoint ...` reproduces the training-time split and
  // preprocessing; --config or flags override.
  json base = json::object();
  json trainside_pp;
  std::uint64_t trainside_fingerprint = 0;
  bool have_trainside = false;
  const fs::path sidecar = fs::path(checkpoint).parent_path() / "runconfig.json";
  if (fs::exists(sidecar)) {
    try {
      const json rec = json::parse(read_text_file(sidecar.string()));
      if (rec.contains("config") && rec.at("config").is_object()) {
        base = rec.at("config");
        if (base.contains("preprocess")) trainside_pp = base.at("preprocess");
        if (rec.contains("dataset_fingerprint")) {
          trainside_fingerprint =
              std::stoull(rec.at("dataset_fingerprint").get<std::string>(), nullptr, 16);
        }
        have_trainside = true;
      }
    } catch (const std::exception&) {
      std::cerr << "warning: ignoring unreadable " << sidecar.string() << "\n";
    }
  }
  const RunConfig rc = resolve_config(config_path, flags, &base);
  if (have_trainside && !trainside_pp.is_null() &&
      serial::config_hash_hex(trainside_pp.dump()) != serial::config_hash_hex(rc.pp.to_json())) {
    std::cerr << "warning: preprocessing settings differ from those recorded at training "
                 "time; metrics may not be comparable\n";
  }

  const backbone::Model model = backbone::load_model(checkpoint);
  const json header = read_checkpoint_header(checkpoint);
  const std::string checkpoint_hash = header.value("config_hash", std::string());

  const data::Manifest scanned = data::scan_dataset(data_root);
  for (const std::string& w : scanned.warnings) std::cerr << "warning: " << w << "\n";
  const data::Manifest m =
      data::split_stratified(scanned, rc.data.train_frac, rc.data.val_frac, rc.data.test_frac,
                             rc.data.split_seed, rc.data.by_patient);
  if (have_trainside && trainside_fingerprint != 0 && m.fingerprint() != trainside_fingerprint) {
    std::cerr << "warning: dataset or split differs from the one recorded at training time\n";
  }
  const data::Split split = data::split_from_name(split_name);
  const metrics::EvalReport report =
      metrics::evaluate(model, m, split, rc.pp, rc.train.batch_size);

  fs::create_directories(out);
  json doc;
  doc["config"] = rc.to_json_obj();
  doc["config_hash"] = rc.hash();
  doc["checkpoint_config_hash"] = checkpoint_hash;
  doc["split"] = split_name;
  doc["report"] = json::parse(report.to_json());
  write_text_file((fs::path(out) / "eval_report.json").string(), doc.dump(2) + "\n");
  write_text_file((fs::path(out) / "roc_overall.csv").string(), report.roc_csv("overall"));
  for (const auto& [key, entry] : report.per_magnification) {
    (void)entry;
    write_text_file((fs::path(out) / ("roc_" + key + ".csv")).string(), report.roc_csv(key));
  }

  std::printf("%s split of %s:\n", split_name.c_str(), data_root.c_str());
  print_entry("overall", report.overall);
  for (const auto& [key, entry] : report.per_magnification) print_entry(key, entry);
  std::printf("report written to %s\n", out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

int cmd_gradcheck(const std::string& which, std::uint64_t seed, int num_seeds, bool corrupt) {
  const gradcheck::Report r =
      corrupt ? gradcheck::run_corrupted(seed) : gradcheck::run(which, seed, num_seeds);
  std::fputs(r.to_table().c_str(), stdout);
  return r.all_pass() ? 0 : 1;
}

// ---------------------------------------------------------------------------
// report

struct ArtifactRow {
  std::string name;
  std::string kind;
  bool ok = true;
  std::string detail;
};

void check_self_hashed(const json& doc, const std::string& what, ArtifactRow& row) {
  if (!doc.contains("config") || !doc.contains("config_hash")) {
    row.ok = false;
    row.detail = what + " lacks config/config_hash fields";
    return;
  }
  const std::string recomputed = serial::config_hash_hex(doc.at("config").dump());
  if (recomputed != doc.at("config_hash").get<std::string>()) {
    row.ok = false;
    row.detail = "stored config hash does not match its config";
  }
}

int cmd_report(const std::string& dir, bool as_json) {
  if (!fs::exists(dir)) throw IoError("directory does not exist: " + dir);
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
  std::vector<ArtifactRow> rows;

  auto parse_file = [&](const fs::path& p, const std::string& kind, ArtifactRow& row) -> json {
    row.name = p.filename().string();
    row.kind = kind;
    try {
      return json::parse(read_text_file(p.string()));
    } catch (const std::exception& e) {
      row.ok = false;
      row.detail = e.what();
      return json();
    }
  };

  // Run configuration.
  json run_cfg;
  bool run_cfg_ok = false;
  if (fs::exists(fs::path(dir) / "runconfig.json")) {
    ArtifactRow row;
    const json doc = parse_file(fs::path(dir) / "runconfig.json", "config", row);
    if (row.ok) {
      check_self_hashed(doc, "runconfig.json", row);
      if (row.ok) {
        run_cfg = doc.at("config");
        run_cfg_ok = true;
      }
    }
    rows.push_back(row);
  }

  // Checkpoint: header hash must match its embedded config, and the config
  // must agree with runconfig.json's model section when both are present.
  if (fs::exists(fs::path(dir) / "checkpoint.bin")) {
    ArtifactRow row;
    row.name = "checkpoint.bin";
    row.kind = "checkpoint";
    try {
      const json header = read_checkpoint_header((fs::path(dir) / "checkpoint.bin").string());
      const std::string recomputed = serial::config_hash_hex(header.at("config").dump());
      if (recomputed != header.at("config_hash").get<std::string>()) {
        row.ok = false;
        row.detail = "stored config hash does not match the embedded model config";
      } else if (run_cfg_ok && run_cfg.contains("model") &&
                 serial::config_hash_hex(run_cfg.at("model").dump()) != recomputed) {
        row.ok = false;
        row.detail = "model config differs from runconfig.json";
      }
    } catch (const std::exception& e) {
      row.ok = false;
      row.detail = e.what();
    }
    rows.push_back(row);
  }

  // Training log: the recorded best epoch must be the first val-loss argmin.
  std::size_t log_epochs = 0;
  bool have_log = false;
  if (fs::exists(fs::path(dir) / "train_log.json")) {
    ArtifactRow row;
    const json doc = parse_file(fs::path(dir) / "train_log.json", "log", row);
    if (row.ok) {
      try {
        const auto& epochs = doc.at("epochs");
        log_epochs = epochs.size();
        have_log = true;
        if (!epochs.empty()) {
          std::size_t best = 0;
          for (std::size_t i = 1; i < epochs.size(); ++i) {
            if (epochs[i].at("val_loss").get<double>() <
                epochs[best].at("val_loss").get<double>()) {
              best = i;
            }
          }
          if (doc.at("best_epoch").get<int>() != epochs[best].at("epoch").get<int>() ||
              doc.at("best_val_loss").get<double>() !=
                  epochs[best].at("val_loss").get<double>()) {
            row.ok = false;
            row.detail = "best_epoch/best_val_loss do not match the epoch records";
          }
        }
      } catch (const std::exception& e) {
        row.ok = false;
        row.detail = e.what();
      }
    }
    rows.push_back(row);
  }
  if (fs::exists(fs::path(dir) / "train_log.csv")) {
    ArtifactRow row;
    row.name = "train_log.csv";
    row.kind = "log";
    try {
      const std::string text = read_text_file((fs::path(dir) / "train_log.csv").string());
      const std::size_t lines = static_cast<std::size_t>(
          std::count(text.begin(), text.end(), '\n'));
      if (text.rfind("epoch,train_loss,val_loss,val_acc,seconds", 0) != 0) {
        row.ok = false;
        row.detail = "unexpected CSV header";
      } else if (have_log && lines != log_epochs + 1) {
        row.ok = false;
        row.detail = "row count does not match train_log.json";
      }
    } catch (const std::exception& e) {
      row.ok = false;
      row.detail = e.what();
    }
    rows.push_back(row);
  }

  // Evaluation report: self-hash plus internal metric consistency.
  if (fs::exists(fs::path(dir) / "eval_report.json")) {
    ArtifactRow row;
    const json doc = parse_file(fs::path(dir) / "eval_report.json", "report", row);
    if (row.ok) {
      check_self_hashed(doc, "eval_report.json", row);
      if (row.ok) {
        try {
          std::vector<const json*> entries;
          entries.push_back(&doc.at("report").at("overall"));
          for (const auto& [key, entry] : doc.at("report").at("per_magnification").items()) {
            (void)key;
            entries.push_back(&entry);
          }
          for (const json* e : entries) {
            const double p = e->at("precision").get<double>();
            const double r = e->at("recall").get<double>();
            const double f1 = e->at("f1").get<double>();
            const double auc = e->at("auc").get<double>();
            const double expected = (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
            if (std::abs(f1 - expected) > 1e-12 || auc < 0.0 || auc > 1.0) {
              row.ok = false;
              row.detail = "f1 is not recomputable from precision/recall (or auc out of range)";
              break;
            }
          }
        } catch (const std::exception& e) {
          row.ok = false;
          row.detail = e.what();
        }
      }
    }
    rows.push_back(row);
  }

  // Preprocessing outputs: sidecar hashes must match the recorded config.
  std::string pp_hash;
  if (fs::exists(fs::path(dir) / "preprocess_config.json")) {
    ArtifactRow row;
    const json doc = parse_file(fs::path(dir) / "preprocess_config.json", "config", row);
    if (row.ok) {
      check_self_hashed(doc, "preprocess_config.json", row);
      if (row.ok) pp_hash = doc.at("config_hash").get<std::string>();
    }
    rows.push_back(row);
  }
  std::vector<fs::path> tensor_dumps;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".f64") {
      tensor_dumps.push_back(entry.path());
    }
  }
  std::sort(tensor_dumps.begin(), tensor_dumps.end());
  for (const fs::path& p : tensor_dumps) {
    ArtifactRow row;
    row.name = p.filename().string();
    row.kind = "tensor";
    try {
      const std::string h = serial::load_tensor_config_hash(p.string());
      if (h.empty()) {
        row.ok = false;
        row.detail = "sidecar carries no config hash";
      } else if (!pp_hash.empty() && h != pp_hash) {
        row.ok = false;
        row.detail = "config hash differs from preprocess_config.json";
      }
    } catch (const std::exception& e) {
      row.ok = false;
      row.detail = e.what();
    }
    rows.push_back(row);
  }

  if (rows.empty()) throw DataError("no recognized artifacts in " + dir);
  bool all_ok = true;
  for (const ArtifactRow& r : rows) all_ok = all_ok && r.ok;

  if (as_json) {
    json doc;
    doc["artifacts"] = json::array();
    for (const ArtifactRow& r : rows) {
      doc["artifacts"].push_back(
          {{"name", r.name}, {"kind", r.kind}, {"ok", r.ok}, {"detail", r.detail}});
    }
    doc["ok"] = all_ok;
    std::printf("%s\n", doc.dump(2).c_str());
  } else {
    std::printf("%-26s %-11s %s\n", "artifact", "kind", "status");
    for (const ArtifactRow& r : rows) {
      std::printf("%-26s %-11s %s%s%s\n", r.name.c_str(), r.kind.c_str(),
                  r.ok ? "ok" : "MISMATCH", r.detail.empty() ? "" : ": ", r.detail.c_str());
    }
    std::printf("%s\n", all_ok ? "all artifacts consistent" : "inconsistencies found");
  }
  return all_ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// Exit-code mapping shared by every subcommand.

template <typename F>
int guarded(F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {  // includes BroadcastError
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ContractError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {  // includes SplitError
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Attention-augmented CNN pipeline for binary histology classification: "
      "synthetic data, preprocessing, training, evaluation, and gradient checks."};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic two-class dataset tree");
  std::string synth_out;
  int synth_n = 25;
  int synth_size = 96;
  std::uint64_t synth_seed = 0;
  synth->add_option("--out", synth_out, "Output dataset root")->required();
  synth->add_option("--n-per-class", synth_n, "Images per (class, magnification)");
  synth->add_option("--size", synth_size, "Image height and width");
  synth->add_option("--seed", synth_seed, "Generator seed");

  // preprocess
  auto* prep = app.add_subcommand("preprocess",
                                  "Run the preprocessing pipeline over a directory of images");
  std::string prep_in, prep_out, prep_config;
  FlagOverrides prep_flags;
  prep->add_option("--in", prep_in, "Directory of input images")->required();
  prep->add_option("--out", prep_out, "Output directory for tensors and heatmaps")->required();
  prep->add_option("--config", prep_config, "JSON run config file");
  prep_flags.add_preprocess_flags(prep);
  prep_flags.add_seed_flag(prep);

  // train
  auto* train = app.add_subcommand("train", "Train a model on a dataset tree");
  std::string train_data, train_out, train_config;
  FlagOverrides train_flags;
  train->add_option("--data", train_data, "Dataset root")->required();
  train->add_option("--out", train_out, "Output directory for the checkpoint and logs")
      ->required();
  train->add_option("--config", train_config, "JSON run config file");
  train_flags.add_preprocess_flags(train);
  train_flags.add_model_flags(train);
  train_flags.add_train_flags(train);
  train_flags.add_data_flags(train);
  train_flags.add_seed_flag(train);

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on one dataset split");
  std::string eval_ckpt, eval_data, eval_split = "test", eval_out, eval_config;
  FlagOverrides eval_flags;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--data", eval_data, "Dataset root")->required();
  eval->add_option("--split", eval_split, "Split to evaluate")
      ->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--out", eval_out, "Output directory for the report and ROC CSVs")
      ->required();
  eval->add_option("--config", eval_config, "JSON run config file");
  eval_flags.add_preprocess_flags(eval);
  eval_flags.add_train_flags(eval);
  eval_flags.add_data_flags(eval);
  eval_flags.add_seed_flag(eval);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck",
                                "Verify analytic gradients against finite differences");
  std::string gc_which = "all";
  std::uint64_t gc_seed = 0;
  int gc_seeds = 20;
  bool gc_corrupt = false;
  gc->add_option("--which", gc_which, "Target to check")
      ->check(CLI::IsMember({"all", "cbam", "self", "deformable", "se", "mbconv", "model"}));
  gc->add_option("--seed", gc_seed, "Base seed");
  gc->add_option("--seeds", gc_seeds, "Restarts per target");
  gc->add_flag("--corrupt", gc_corrupt, "Negative control: run with a biased gradient")
      ->group("");  // hidden; exists so the failure path is scriptable

  // report
  auto* rep = app.add_subcommand("report", "Verify artifact/config consistency in a run directory");
  std::string rep_dir;
  bool rep_json = false;
  rep->add_option("--dir", rep_dir, "Run directory to inspect")->required();
  rep->add_flag("--json", rep_json, "Machine-readable output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (synth->parsed()) {
    return guarded([&] { return cmd_synth(synth_out, synth_n, synth_size, synth_seed); });
  }
  if (prep->parsed()) {
    return guarded([&] {
      const RunConfig rc = resolve_config(prep_config, prep_flags);
      return cmd_preprocess(prep_in, prep_out, rc);
    });
  }
  if (train->parsed()) {
    return guarded([&] {
      const RunConfig rc = resolve_config(train_config, train_flags);
      return cmd_train(train_data, train_out, rc);
    });
  }
  if (eval->parsed()) {
    return guarded(
        [&] { return cmd_eval(eval_ckpt, eval_data, eval_split, eval_out, eval_config, eval_flags); });
  }
  if (gc->parsed()) {
    return guarded([&] { return cmd_gradcheck(gc_which, gc_seed, gc_seeds, gc_corrupt); });
  }
  if (rep->parsed()) {
    return guarded([&] { return cmd_report(rep_dir, rep_json); });
  }
  return 2;  // unreachable: require_subcommand(1)
}
