#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "histonet/attention.hpp"
#include "histonet/tensor.hpp"

namespace histonet::backbone {

enum class AttentionKind { none, cbam, self_attn, deformable };
enum class Activation { relu, tanh };
enum class Initializer { normal, he };

struct StageConfig {
  int channels = 16;
  int blocks = 1;
  int stride = 2;            // first block of the stage; later blocks stride 1
  double expansion_ratio = 4.0;
  double se_ratio = 0.25;
};

struct HeadConfig {
  int hidden = 256;
  double dropout_p = 0.4;
  Activation final_activation = Activation::relu;  // hidden layers only
  int dense_layers = 2;                            // 2 or 3 (count includes the logit layer)
};

struct ModelConfig {
  int in_channels = 1;
  int stem_channels = 8;
  std::vector<StageConfig> stages = {{16, 1, 2, 4.0, 0.25}, {32, 2, 2, 4.0, 0.25}};
  AttentionKind attention = AttentionKind::cbam;
  int attention_reduction = 4;  // CBAM channel-MLP bottleneck ratio
  HeadConfig head;
  int num_classes = 2;
  Initializer initializer = Initializer::he;
  std::uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

// Channel recalibration: GAP -> bias-free bottleneck MLP -> sigmoid gates.
// w_reduce is (C, R), w_expand is (R, C) with R = max(1, round(C*se_ratio)).
Tensor se_block(const Tensor& f, const Tensor& w_reduce, const Tensor& w_expand,
                double se_ratio);

struct MBConvParams {
  Tensor expand_w;   // (E, Cin, 1, 1), E = round(Cin * expansion)
  Tensor dw_w;       // (E, 1, 3, 3), depthwise
  Tensor se_reduce;  // (E, R)
  Tensor se_expand;  // (R, E)
  Tensor project_w;  // (Cout, E, 1, 1)
  int stride = 1;
  double se_ratio = 0.25;
};

// expand 1x1 -> ReLU -> depthwise 3x3 (stride) -> ReLU -> SE -> project 1x1,
// with an identity residual when stride==1 and channels match.
Tensor mbconv(const Tensor& f, const MBConvParams& p);

struct StageParams {
  std::vector<MBConvParams> blocks;
  std::optional<attention::ChannelAttentionParams> cbam_channel;
  std::optional<attention::SpatialAttentionParams> cbam_spatial;
  std::optional<attention::SelfAttentionParams> self_attn;
  std::optional<attention::DeformableAttentionParams> deform;
};

struct Model {
  ModelConfig config;
  Tensor stem_w;  // (stem_channels, in_channels, 3, 3), stride 2, padding 1
  std::vector<StageParams> stages;
  Tensor head_w1, head_b1;        // (C_last, hidden), (hidden)
  Tensor head_w2, head_b2;        // (hidden, hidden); present iff dense_layers == 3
  Tensor head_out_w, head_out_b;  // (hidden, num_classes)

  // Deterministically ordered named handles to every trainable tensor; the
  // handles share storage with the model, so writes through them update it.
  std::vector<std::pair<std::string, Tensor>> parameters() const;
  std::int64_t parameter_count() const;
};

Model build_model(const ModelConfig& cfg);

// Logits (batch, num_classes). `training` enables dropout, with the mask a
// pure function of dropout_seed.
Tensor forward(const Model& m, const Tensor& batch, bool training,
               std::uint64_t dropout_seed = 0);

// Checkpoint: u32le header length, JSON header {format, config, config_hash,
// params: [{name, shape}]}, then f64le parameter data in registry order.
void save_model(const std::string& path, const Model& m);
Model load_model(const std::string& path);

}  // namespace histonet::backbone
