#include "histonet/backbone.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "histonet/errors.hpp"
#include "histonet/image.hpp"
#include "histonet/ops.hpp"
#include "histonet/rng.hpp"
#include "histonet/serial.hpp"

namespace histonet::backbone {

namespace {

std::string attention_name(AttentionKind k) {
  switch (k) {
    case AttentionKind::none: return "none";
    case AttentionKind::cbam: return "cbam";
    case AttentionKind::self_attn: return "self";
    case AttentionKind::deformable: return "deformable";
  }
  throw ConfigError("unknown attention kind");
}

AttentionKind attention_from_name(const std::string& s) {
  if (s == "none") return AttentionKind::none;
  if (s == "cbam") return AttentionKind::cbam;
  if (s == "self") return AttentionKind::self_attn;
  if (s == "deformable") return AttentionKind::deformable;
  throw ConfigError("unknown attention kind: " + s);
}

std::string activation_name(Activation a) {
  return a == Activation::relu ? "relu" : "tanh";
}

Activation activation_from_name(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation: " + s);
}

std::string initializer_name(Initializer i) {
  return i == Initializer::normal ? "normal" : "he";
}

Initializer initializer_from_name(const std::string& s) {
  if (s == "normal") return Initializer::normal;
  if (s == "he") return Initializer::he;
  throw ConfigError("unknown initializer: " + s);
}

int se_reduced_width(std::int64_t channels, double se_ratio) {
  const double r = std::floor(static_cast<double>(channels) * se_ratio + 0.5);
  return r < 1.0 ? 1 : static_cast<int>(r);
}

int expanded_width(int in_channels, double expansion) {
  const double e = std::floor(in_channels * expansion + 0.5);
  if (e < 1.0) throw ConfigError("expansion collapses the block to zero width");
  return static_cast<int>(e);
}

Tensor apply_activation(const Tensor& x, Activation a) {
  return a == Activation::relu ? ops::relu(x) : ops::tanh(x);
}

}  // namespace

void ModelConfig::validate() const {
  if (in_channels != 1 && in_channels != 3) throw ConfigError("in_channels must be 1 or 3");
  if (stem_channels < 1) throw ConfigError("stem_channels must be >= 1");
  if (stages.empty()) throw ConfigError("at least one stage is required");
  for (const StageConfig& s : stages) {
    if (s.channels < 1) throw ConfigError("stage channels must be >= 1");
    if (s.blocks < 1) throw ConfigError("stage blocks must be >= 1");
    if (s.stride != 1 && s.stride != 2) throw ConfigError("stage stride must be 1 or 2");
    if (!(s.expansion_ratio >= 1.0)) throw ConfigError("expansion ratio must be >= 1");
    if (!(s.se_ratio > 0.0 && s.se_ratio <= 1.0)) throw ConfigError("se ratio must be in (0, 1]");
  }
  if (attention == AttentionKind::cbam) {
    if (attention_reduction < 1) throw ConfigError("attention reduction must be >= 1");
    for (const StageConfig& s : stages) {
      if (s.channels % attention_reduction != 0) {
        throw ConfigError("stage channels must be divisible by the attention reduction");
      }
    }
  }
  if (head.hidden < 1) throw ConfigError("head hidden width must be >= 1");
  if (!(head.dropout_p >= 0.0 && head.dropout_p < 1.0)) {
    throw ConfigError("dropout probability must lie in [0, 1)");
  }
  if (head.dense_layers != 2 && head.dense_layers != 3) {
    throw ConfigError("head dense_layers must be 2 or 3");
  }
  if (num_classes != 2) throw ConfigError("num_classes must be 2 (binary classifier)");
}

std::string ModelConfig::to_json() const {
  nlohmann::json j;
  j["in_channels"] = in_channels;
  j["stem_channels"] = stem_channels;
  j["stages"] = nlohmann::json::array();
  for (const StageConfig& s : stages) {
    j["stages"].push_back({{"channels", s.channels},
                           {"blocks", s.blocks},
                           {"stride", s.stride},
                           {"expansion_ratio", s.expansion_ratio},
                           {"se_ratio", s.se_ratio}});
  }
  j["attention"] = attention_name(attention);
  j["attention_reduction"] = attention_reduction;
  j["head"] = {{"hidden", head.hidden},
               {"dropout_p", head.dropout_p},
               {"final_activation", activation_name(head.final_activation)},
               {"dense_layers", head.dense_layers}};
  j["num_classes"] = num_classes;
  j["initializer"] = initializer_name(initializer);
  j["seed"] = seed;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config is not valid JSON: ") + e.what());
  }
  ModelConfig cfg;
  try {
    cfg.in_channels = j.value("in_channels", cfg.in_channels);
    cfg.stem_channels = j.value("stem_channels", cfg.stem_channels);
    if (j.contains("stages")) {
      cfg.stages.clear();
      for (const auto& sj : j["stages"]) {
        StageConfig s;
        s.channels = sj.value("channels", s.channels);
        s.blocks = sj.value("blocks", s.blocks);
        s.stride = sj.value("stride", s.stride);
        s.expansion_ratio = sj.value("expansion_ratio", s.expansion_ratio);
        s.se_ratio = sj.value("se_ratio", s.se_ratio);
        cfg.stages.push_back(s);
      }
    }
    if (j.contains("attention")) cfg.attention = attention_from_name(j["attention"]);
    cfg.attention_reduction = j.value("attention_reduction", cfg.attention_reduction);
    if (j.contains("head")) {
      const auto& hj = j["head"];
      cfg.head.hidden = hj.value("hidden", cfg.head.hidden);
      cfg.head.dropout_p = hj.value("dropout_p", cfg.head.dropout_p);
      if (hj.contains("final_activation")) {
        cfg.head.final_activation = activation_from_name(hj["final_activation"]);
      }
      cfg.head.dense_layers = hj.value("dense_layers", cfg.head.dense_layers);
    }
    cfg.num_classes = j.value("num_classes", cfg.num_classes);
    if (j.contains("initializer")) cfg.initializer = initializer_from_name(j["initializer"]);
    cfg.seed = j.value("seed", cfg.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

Tensor se_block(const Tensor& f, const Tensor& w_reduce, const Tensor& w_expand,
                double se_ratio) {
  if (f.rank() != 4) {
    throw ShapeError("se_block expects a (batch, channels, H, W) input, got " +
                     shape_str(f.shape()));
  }
  const std::int64_t c = f.dim(1);
  const int reduced = se_reduced_width(c, se_ratio);
  if (w_reduce.rank() != 2 || w_reduce.dim(0) != c || w_reduce.dim(1) != reduced) {
    throw ShapeError("se_block: reduce weight must be (C, R), got " +
                     shape_str(w_reduce.shape()));
  }
  if (w_expand.rank() != 2 || w_expand.dim(0) != reduced || w_expand.dim(1) != c) {
    throw ShapeError("se_block: expand weight must be (R, C), got " +
                     shape_str(w_expand.shape()));
  }
  const Tensor squeezed = ops::global_pool(f, ops::PoolKind::avg);  // (b, C)
  const Tensor gate =
      ops::sigmoid(ops::matmul(ops::relu(ops::matmul(squeezed, w_reduce)), w_expand));
  return ops::mul(f, ops::reshape(gate, {f.dim(0), c, 1, 1}));
}

Tensor mbconv(const Tensor& f, const MBConvParams& p) {
  if (f.rank() != 4) {
    throw ShapeError("mbconv expects a (batch, channels, H, W) input, got " +
                     shape_str(f.shape()));
  }
  Tensor x = ops::relu(ops::conv2d(f, p.expand_w, /*stride=*/1, /*padding=*/0));
  const auto groups = static_cast<int>(p.dw_w.dim(0));
  x = ops::relu(ops::conv2d(x, p.dw_w, p.stride, /*padding=*/1, groups));
  x = se_block(x, p.se_reduce, p.se_expand, p.se_ratio);
  x = ops::conv2d(x, p.project_w, /*stride=*/1, /*padding=*/0);
  if (p.stride == 1 && p.project_w.dim(0) == f.dim(1)) {
    x = ops::add(f, x);
  }
  return x;
}

namespace {

struct Builder {
  Rng rng;
  Initializer init;

  Tensor weight(Shape shape, std::int64_t fan_in) {
    const double stddev =
        init == Initializer::normal ? 0.02 : std::sqrt(2.0 / static_cast<double>(fan_in));
    Tensor t = Tensor::zeros(shape, /*requires_grad=*/true);
    for (double& v : t.values_mut()) v = rng.normal(0.0, stddev);
    return t;
  }

  Tensor conv_weight(std::int64_t co, std::int64_t ci, std::int64_t kh, std::int64_t kw) {
    return weight({co, ci, kh, kw}, ci * kh * kw);
  }

  Tensor dense_weight(std::int64_t in, std::int64_t out) { return weight({in, out}, in); }

  Tensor zeros(Shape shape) { return Tensor::zeros(std::move(shape), /*requires_grad=*/true); }
};

}  // namespace

Model build_model(const ModelConfig& cfg) {
  cfg.validate();
  Model m;
  m.config = cfg;
  Builder b{Rng(cfg.seed), cfg.initializer};

  m.stem_w = b.conv_weight(cfg.stem_channels, cfg.in_channels, 3, 3);
  int channels = cfg.stem_channels;
  for (const StageConfig& sc : cfg.stages) {
    StageParams stage;
    for (int block = 0; block < sc.blocks; ++block) {
      const int in_ch = channels;
      const int out_ch = sc.channels;
      const int expanded = expanded_width(in_ch, sc.expansion_ratio);
      const int reduced = se_reduced_width(expanded, sc.se_ratio);
      MBConvParams p;
      p.stride = block == 0 ? sc.stride : 1;
      p.se_ratio = sc.se_ratio;
      p.expand_w = b.conv_weight(expanded, in_ch, 1, 1);
      p.dw_w = b.weight({expanded, 1, 3, 3}, 9);  // depthwise fan-in: one channel's 3x3 patch
      p.se_reduce = b.dense_weight(expanded, reduced);
      p.se_expand = b.dense_weight(reduced, expanded);
      p.project_w = b.conv_weight(out_ch, expanded, 1, 1);
      stage.blocks.push_back(std::move(p));
      channels = out_ch;
    }
    switch (cfg.attention) {
      case AttentionKind::none:
        break;
      case AttentionKind::cbam: {
        attention::ChannelAttentionParams ca;
        ca.reduction_ratio = cfg.attention_reduction;
        ca.w0 = b.dense_weight(channels, channels / cfg.attention_reduction);
        ca.w1 = b.dense_weight(channels / cfg.attention_reduction, channels);
        stage.cbam_channel = std::move(ca);
        attention::SpatialAttentionParams sa;
        sa.kernel = b.conv_weight(1, 2, 7, 7);
        stage.cbam_spatial = std::move(sa);
        break;
      }
      case AttentionKind::self_attn: {
        attention::SelfAttentionParams sp;
        sp.wq = b.dense_weight(channels, channels);
        sp.wk = b.dense_weight(channels, channels);
        sp.wv = b.dense_weight(channels, channels);
        stage.self_attn = std::move(sp);
        break;
      }
      case AttentionKind::deformable: {
        attention::DeformableAttentionParams dp;
        // Zero-initialized offsets: training starts from the plain-convolution
        // baseline and learns displacements from there.
        dp.offset_kernel = b.zeros({2 * 3 * 3, channels, 3, 3});
        dp.value_kernel = b.conv_weight(channels, channels, 3, 3);
        stage.deform = std::move(dp);
        break;
      }
    }
    m.stages.push_back(std::move(stage));
  }

  m.head_w1 = b.dense_weight(channels, cfg.head.hidden);
  m.head_b1 = b.zeros({cfg.head.hidden});
  if (cfg.head.dense_layers == 3) {
    m.head_w2 = b.dense_weight(cfg.head.hidden, cfg.head.hidden);
    m.head_b2 = b.zeros({cfg.head.hidden});
  }
  m.head_out_w = b.dense_weight(cfg.head.hidden, cfg.num_classes);
  m.head_out_b = b.zeros({cfg.num_classes});
  return m;
}

std::vector<std::pair<std::string, Tensor>> Model::parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("stem.w", stem_w);
  for (std::size_t si = 0; si < stages.size(); ++si) {
    const std::string sp = "stage" + std::to_string(si) + ".";
    const StageParams& st = stages[si];
    for (std::size_t bi = 0; bi < st.blocks.size(); ++bi) {
      const std::string bp = sp + "block" + std::to_string(bi) + ".";
      const MBConvParams& p = st.blocks[bi];
      out.emplace_back(bp + "expand.w", p.expand_w);
      out.emplace_back(bp + "depthwise.w", p.dw_w);
      out.emplace_back(bp + "se.reduce", p.se_reduce);
      out.emplace_back(bp + "se.expand", p.se_expand);
      out.emplace_back(bp + "project.w", p.project_w);
    }
    if (st.cbam_channel) {
      out.emplace_back(sp + "cbam.channel.w0", st.cbam_channel->w0);
      out.emplace_back(sp + "cbam.channel.w1", st.cbam_channel->w1);
      out.emplace_back(sp + "cbam.spatial.kernel", st.cbam_spatial->kernel);
    }
    if (st.self_attn) {
      out.emplace_back(sp + "self.wq", st.self_attn->wq);
      out.emplace_back(sp + "self.wk", st.self_attn->wk);
      out.emplace_back(sp + "self.wv", st.self_attn->wv);
    }
    if (st.deform) {
      out.emplace_back(sp + "deform.offset_kernel", st.deform->offset_kernel);
      out.emplace_back(sp + "deform.value_kernel", st.deform->value_kernel);
    }
  }
  out.emplace_back("head.w1", head_w1);
  out.emplace_back("head.b1", head_b1);
  if (head_w2.defined()) {
    out.emplace_back("head.w2", head_w2);
    out.emplace_back("head.b2", head_b2);
  }
  out.emplace_back("head.out.w", head_out_w);
  out.emplace_back("head.out.b", head_out_b);
  return out;
}

std::int64_t Model::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : parameters()) n += t.numel();
  return n;
}

Tensor forward(const Model& m, const Tensor& batch, bool training, std::uint64_t dropout_seed) {
  if (batch.rank() != 4 || batch.dim(1) != m.config.in_channels) {
    throw ShapeError("forward expects (batch, " + std::to_string(m.config.in_channels) +
                     ", H, W), got " + shape_str(batch.shape()));
  }
  Tensor x = ops::relu(ops::conv2d(batch, m.stem_w, /*stride=*/2, /*padding=*/1));
  for (const StageParams& stage : m.stages) {
    for (const MBConvParams& block : stage.blocks) {
      x = mbconv(x, block);
    }
    if (stage.cbam_channel) {
      x = attention::cbam(x, *stage.cbam_channel, *stage.cbam_spatial);
    } else if (stage.self_attn) {
      x = attention::self_attention(x, *stage.self_attn).output;
    } else if (stage.deform) {
      x = attention::deformable_attention(x, *stage.deform);
    }
  }
  Tensor h = ops::global_pool(x, ops::PoolKind::avg);  // (b, C_last)
  h = apply_activation(ops::dense(h, m.head_w1, m.head_b1), m.config.head.final_activation);
  h = ops::dropout(h, m.config.head.dropout_p, training, dropout_seed);
  if (m.head_w2.defined()) {
    h = apply_activation(ops::dense(h, m.head_w2, m.head_b2), m.config.head.final_activation);
  }
  return ops::dense(h, m.head_out_w, m.head_out_b);
}

void save_model(const std::string& path, const Model& m) {
  const auto params = m.parameters();
  nlohmann::json header;
  header["format"] = "histonet-checkpoint-v1";
  header["config"] = nlohmann::json::parse(m.config.to_json());
  header["config_hash"] = serial::config_hash_hex(m.config.to_json());
  header["params"] = nlohmann::json::array();
  for (const auto& [name, t] : params) {
    header["params"].push_back({{"name", name}, {"shape", t.shape()}});
  }
  const std::string header_text = header.dump();
  std::vector<std::uint8_t> bytes;
  serial::append_u32le(bytes, static_cast<std::uint32_t>(header_text.size()));
  bytes.insert(bytes.end(), header_text.begin(), header_text.end());
  for (const auto& [name, t] : params) {
    for (double v : t.values()) serial::append_f64le(bytes, v);
  }
  write_file_bytes(path, bytes);
}

Model load_model(const std::string& path) {
  const std::vector<std::uint8_t> bytes = read_file_bytes(path);
  if (bytes.size() < 4) throw DataError("checkpoint too short: " + path);
  const std::uint32_t header_len = serial::read_u32le(bytes.data());
  if (bytes.size() < 4 + static_cast<std::size_t>(header_len)) {
    throw DataError("checkpoint header truncated: " + path);
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(
        std::string(reinterpret_cast<const char*>(bytes.data()) + 4, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (header.value("format", "") != "histonet-checkpoint-v1") {
    throw DataError("unrecognized checkpoint format in " + path);
  }
  Model m = build_model(ModelConfig::from_json(header.at("config").dump()));
  const auto params = m.parameters();
  const auto& manifest = header.at("params");
  if (manifest.size() != params.size()) {
    throw DataError("checkpoint parameter manifest does not match the config");
  }
  std::size_t offset = 4 + header_len;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t] = params[i];
    if (manifest[i].at("name").get<std::string>() != name ||
        manifest[i].at("shape").get<Shape>() != t.shape()) {
      throw DataError("checkpoint parameter " + name + " does not match the config");
    }
    Tensor tensor = t;  // shared handle; writing updates the model
    auto dst = tensor.values_mut();
    if (offset + dst.size() * 8 > bytes.size()) {
      throw DataError("checkpoint data truncated: " + path);
    }
    for (double& v : dst) {
      v = serial::read_f64le(bytes.data() + offset);
      offset += 8;
    }
  }
  if (offset != bytes.size()) throw DataError("checkpoint has trailing bytes: " + path);
  return m;
}

}  // namespace histonet::backbone
