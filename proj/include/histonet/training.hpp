#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "histonet/backbone.hpp"
#include "histonet/data.hpp"
#include "histonet/preprocess.hpp"
#include "histonet/tensor.hpp"

namespace histonet::training {

enum class OptimizerKind { sgd, adam };

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::adam;
  double learning_rate = 0.001;
  int batch_size = 16;
  int max_epochs = 100;
  int early_stopping_patience = 10;
  std::uint64_t seed = 0;
  AdamConfig adam;
  double sgd_momentum = 0.0;

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

// Mean over the batch of -log softmax(logits)[label]: the binary
// cross-entropy of the class-1 softmax probability, computed in log space.
// labels is (b) with values exactly 0 or 1; logits is (b, 2).
Tensor bce_loss(const Tensor& logits, const Tensor& labels);

// theta <- theta - lr * grad (plus classical momentum when mu > 0, with
// velocity accumulated in `velocity`, same length as the parameter).
// A parameter without a gradient -> ContractError.
void sgd_step(Tensor param, double lr, double mu = 0.0, std::vector<double>* velocity = nullptr);

struct AdamState {
  std::vector<double> m;  // first moment
  std::vector<double> v;  // second moment
};

// Standard Adam with bias correction; t is the 1-based step count.
void adam_step(Tensor param, AdamState& state, double lr, double beta1, double beta2, double eps,
               std::int64_t t);

// Owns optimizer state for a parameter set and applies one update per step()
// from the gradients currently on the parameters.
class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, std::vector<std::pair<std::string, Tensor>> params);
  void step();
  void zero_grad();

 private:
  TrainConfig cfg_;
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<AdamState> adam_states_;
  std::vector<std::vector<double>> velocities_;
  std::int64_t t_ = 0;
};

struct EpochLog {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  int best_epoch = 0;
  double best_val_loss = 0.0;

  // CSV columns: epoch,train_loss,val_loss,val_acc,seconds. All but the
  // seconds column are deterministic under (seed, config, data).
  std::string to_csv() const;
  std::string to_json() const;
};

// Seeded-minibatch training with early stopping on strict validation-loss
// improvement. The model is left holding the best-validation parameters.
// Train and val splits are taken from the manifest's split tags.
TrainLog train(backbone::Model& model, const data::Manifest& dataset,
               const preprocess::PreprocessConfig& pp_cfg, const TrainConfig& cfg);

}  // namespace histonet::training
