#include "histonet/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "histonet/errors.hpp"
#include "histonet/ops.hpp"
#include "histonet/rng.hpp"

namespace histonet::training {

namespace {

std::string optimizer_name(OptimizerKind k) {
  return k == OptimizerKind::sgd ? "sgd" : "adam";
}

OptimizerKind optimizer_from_name(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer: " + s);
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (max_epochs < 1) throw ConfigError("max epochs must be >= 1");
  if (early_stopping_patience < 1) throw ConfigError("early stopping patience must be >= 1");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (!(adam.eps > 0.0)) throw ConfigError("adam epsilon must be > 0");
  if (sgd_momentum < 0.0 || sgd_momentum >= 1.0) {
    throw ConfigError("sgd momentum must lie in [0, 1)");
  }
}

std::string TrainConfig::to_json() const {
  nlohmann::json j;
  j["optimizer"] = optimizer_name(optimizer);
  j["learning_rate"] = learning_rate;
  j["batch_size"] = batch_size;
  j["max_epochs"] = max_epochs;
  j["early_stopping_patience"] = early_stopping_patience;
  j["seed"] = seed;
  j["adam"] = {{"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}};
  j["sgd_momentum"] = sgd_momentum;
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config is not valid JSON: ") + e.what());
  }
  TrainConfig cfg;
  try {
    if (j.contains("optimizer")) cfg.optimizer = optimizer_from_name(j["optimizer"]);
    cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.max_epochs = j.value("max_epochs", cfg.max_epochs);
    cfg.early_stopping_patience =
        j.value("early_stopping_patience", cfg.early_stopping_patience);
    cfg.seed = j.value("seed", cfg.seed);
    if (j.contains("adam")) {
      const auto& a = j["adam"];
      cfg.adam.beta1 = a.value("beta1", cfg.adam.beta1);
      cfg.adam.beta2 = a.value("beta2", cfg.adam.beta2);
      cfg.adam.eps = a.value("eps", cfg.adam.eps);
    }
    cfg.sgd_momentum = j.value("sgd_momentum", cfg.sgd_momentum);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed train config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

Tensor bce_loss(const Tensor& logits, const Tensor& labels) {
  if (logits.rank() != 2 || logits.dim(1) != 2) {
    throw ShapeError("bce_loss expects (batch, 2) logits, got " + shape_str(logits.shape()));
  }
  const std::int64_t b = logits.dim(0);
  if (labels.rank() != 1 || labels.dim(0) != b) {
    throw ShapeError("bce_loss labels must be (batch), got " + shape_str(labels.shape()));
  }
  const double* lv = labels.values().data();
  for (std::int64_t i = 0; i < b; ++i) {
    if (lv[i] != 0.0 && lv[i] != 1.0) {
      throw DataError("bce_loss labels must be exactly 0 or 1");
    }
  }
  const double* x = logits.values().data();
  double total = 0.0;
  for (std::int64_t i = 0; i < b; ++i) {
    const double l0 = x[2 * i];
    const double l1 = x[2 * i + 1];
    const double m = l0 > l1 ? l0 : l1;
    const double lse = m + std::log(std::exp(l0 - m) + std::exp(l1 - m));
    const double ly = lv[i] == 1.0 ? l1 : l0;
    total += lse - ly;  // -log softmax(logits)[y]
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(b));

  Tape* tape = active_tape();
  if (tape != nullptr && logits.requires_grad()) {
    out.set_requires_grad(true);
    TensorData* nl = logits.node();
    TensorData* nlab = labels.node();
    TensorData* no = out.node();
    tape->record({logits, labels}, out, [nl, nlab, no, b]() {
      if (!nl->requires_grad) return;
      const double g = no->grad[0];
      const double* xv = nl->values.data();
      const double* yv = nlab->values.data();
      auto& gl = nl->ensure_grad();
      for (std::int64_t i = 0; i < b; ++i) {
        const double l0 = xv[2 * i];
        const double l1 = xv[2 * i + 1];
        const double m = l0 > l1 ? l0 : l1;
        const double e0 = std::exp(l0 - m);
        const double e1 = std::exp(l1 - m);
        const double z = e0 + e1;
        const double p0 = e0 / z;
        const double p1 = e1 / z;
        const double y = yv[i];
        gl[static_cast<std::size_t>(2 * i)] += g * (p0 - (1.0 - y)) / static_cast<double>(b);
        gl[static_cast<std::size_t>(2 * i + 1)] += g * (p1 - y) / static_cast<double>(b);
      }
    });
  }
  return out;
}

void sgd_step(Tensor param, double lr, double mu, std::vector<double>* velocity) {
  if (!param.has_grad()) {
    throw ContractError("sgd_step: parameter has no gradient");
  }
  auto theta = param.values_mut();
  const auto g = param.grad();
  if (mu > 0.0) {
    if (velocity == nullptr) {
      throw ContractError("sgd_step: momentum requires a velocity buffer");
    }
    if (velocity->size() != theta.size()) velocity->assign(theta.size(), 0.0);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      (*velocity)[i] = mu * (*velocity)[i] + g[i];
      theta[i] -= lr * (*velocity)[i];
    }
  } else {
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * g[i];
  }
}

void adam_step(Tensor param, AdamState& state, double lr, double beta1, double beta2, double eps,
               std::int64_t t) {
  if (!param.has_grad()) {
    throw ContractError("adam_step: parameter has no gradient");
  }
  if (t < 1) throw ContractError("adam_step: step count must be >= 1");
  auto theta = param.values_mut();
  const auto g = param.grad();
  if (state.m.size() != theta.size()) state.m.assign(theta.size(), 0.0);
  if (state.v.size() != theta.size()) state.v.assign(theta.size(), 0.0);
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g[i];
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g[i] * g[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    theta[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

Optimizer::Optimizer(const TrainConfig& cfg, std::vector<std::pair<std::string, Tensor>> params)
    : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  adam_states_.resize(params_.size());
  velocities_.resize(params_.size());
}

void Optimizer::step() {
  ++t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (cfg_.optimizer == OptimizerKind::adam) {
      adam_step(params_[i].second, adam_states_[i], cfg_.learning_rate, cfg_.adam.beta1,
                cfg_.adam.beta2, cfg_.adam.eps, t_);
    } else {
      sgd_step(params_[i].second, cfg_.learning_rate, cfg_.sgd_momentum, &velocities_[i]);
    }
  }
}

void Optimizer::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

EvalResult evaluate_split(const backbone::Model& model, const data::Manifest& dataset,
                          data::Split split, const preprocess::PreprocessConfig& pp_cfg,
                          int batch_size) {
  const auto bs = data::batches(dataset, split, std::nullopt, batch_size,
                                /*seed=*/0, pp_cfg, /*augment=*/false);
  double loss_sum = 0.0;
  std::int64_t n = 0;
  std::int64_t correct = 0;
  for (const data::Batch& batch : bs) {
    const Tensor logits = backbone::forward(model, batch.inputs, /*training=*/false);
    const Tensor loss = bce_loss(logits, batch.labels);
    const std::int64_t b = batch.inputs.dim(0);
    loss_sum += loss.item() * static_cast<double>(b);
    n += b;
    const double* lg = logits.values().data();
    const double* lb = batch.labels.values().data();
    for (std::int64_t i = 0; i < b; ++i) {
      const int pred = lg[2 * i + 1] > lg[2 * i] ? 1 : 0;
      if (pred == static_cast<int>(lb[i])) ++correct;
    }
  }
  EvalResult r;
  r.loss = loss_sum / static_cast<double>(n);
  r.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return r;
}

}  // namespace

std::string TrainLog::to_csv() const {
  std::string out = "epoch,train_loss,val_loss,val_acc,seconds\n";
  for (const EpochLog& e : epochs) {
    char sec[32];
    std::snprintf(sec, sizeof(sec), "%.3f", e.seconds);
    out += std::to_string(e.epoch) + "," + format_double(e.train_loss) + "," +
           format_double(e.val_loss) + "," + format_double(e.val_acc) + "," + sec + "\n";
  }
  return out;
}

std::string TrainLog::to_json() const {
  nlohmann::json j;
  j["best_epoch"] = best_epoch;
  j["best_val_loss"] = best_val_loss;
  j["epochs"] = nlohmann::json::array();
  for (const EpochLog& e : epochs) {
    j["epochs"].push_back({{"epoch", e.epoch},
                           {"train_loss", e.train_loss},
                           {"val_loss", e.val_loss},
                           {"val_acc", e.val_acc},
                           {"seconds", e.seconds}});
  }
  return j.dump();
}

TrainLog train(backbone::Model& model, const data::Manifest& dataset,
               const preprocess::PreprocessConfig& pp_cfg, const TrainConfig& cfg) {
  cfg.validate();
  pp_cfg.validate();
  if (dataset.count_split(data::Split::train) == 0) {
    throw DataError("training requires a non-empty train split");
  }
  if (dataset.count_split(data::Split::val) == 0) {
    throw DataError("training requires a non-empty val split");
  }

  const auto params = model.parameters();
  Optimizer opt(cfg, params);
  TrainLog log;
  double best_val = std::numeric_limits<double>::infinity();
  int epochs_since_improvement = 0;
  std::vector<std::vector<double>> best_params;
  best_params.reserve(params.size());
  for (const auto& [name, p] : params) {
    best_params.emplace_back(p.values().begin(), p.values().end());
  }

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const auto train_batches =
        data::batches(dataset, data::Split::train, std::nullopt, cfg.batch_size,
                      mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch)), pp_cfg,
                      /*augment=*/true);
    double loss_sum = 0.0;
    std::int64_t n = 0;
    std::uint64_t step_index = 0;
    for (const data::Batch& batch : train_batches) {
      Tape tape;
      TapeScope scope(tape);
      const Tensor logits = backbone::forward(
          model, batch.inputs, /*training=*/true,
          mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch), step_index));
      const Tensor loss = bce_loss(logits, batch.labels);
      const double loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        throw NumericError("training loss is not finite at epoch " + std::to_string(epoch));
      }
      tape.backward(loss);
      opt.step();
      opt.zero_grad();
      const std::int64_t b = batch.inputs.dim(0);
      loss_sum += loss_value * static_cast<double>(b);
      n += b;
      ++step_index;
    }

    const EvalResult val =
        evaluate_split(model, dataset, data::Split::val, pp_cfg, cfg.batch_size);
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log.epochs.push_back({epoch, loss_sum / static_cast<double>(n), val.loss, val.accuracy,
                          seconds});

    if (val.loss < best_val) {
      best_val = val.loss;
      log.best_epoch = epoch;
      epochs_since_improvement = 0;
      for (std::size_t i = 0; i < params.size(); ++i) {
        const auto v = params[i].second.values();
        best_params[i].assign(v.begin(), v.end());
      }
    } else {
      ++epochs_since_improvement;
      if (epochs_since_improvement >= cfg.early_stopping_patience) break;
    }
  }

  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].second;
    auto dst = p.values_mut();
    std::copy(best_params[i].begin(), best_params[i].end(), dst.begin());
  }
  log.best_val_loss = best_val;
  return log;
}

}  // namespace histonet::training
