#pragma once

// 3-D U-Net and Attention U-Net.
//
// Scale s (1-based) carries F_s = base_channels * 2^(s-1) features at
// 1/2^(s-1) of the input resolution. Encoder scale s: two (conv3 -> BN -> ReLU)
// blocks, then 2x max-pool except at the deepest scale. Decoder scale s:
// trilinear upsample of the coarser decoder feature followed by a conv block,
// concatenation with the (optionally gated) skip, then two conv blocks. Skips
// at scales 2 .. depth-1 are gated by the decoder feature one scale coarser;
// the first skip is never gated.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "aunet/attention_gate.hpp"
#include "aunet/layers.hpp"
#include "aunet/ops.hpp"

namespace aunet {

struct ModelConfig {
  std::size_t depth = 4;
  std::size_t base_channels = 8;
  std::size_t n_classes = 3;
  std::size_t n_gates = 1;
  bool deep_supervision = true;
  bool attention_enabled = true;
  std::size_t in_channels = 1;
  std::size_t gate_reduction = 2;  // F_int = max(1, F_l / gate_reduction)

  std::size_t channels_at(std::size_t scale) const { return base_channels << (scale - 1); }
  std::size_t gate_inter_channels(std::size_t scale) const {
    return std::max<std::size_t>(1, channels_at(scale) / gate_reduction);
  }
  std::size_t spatial_multiple() const { return std::size_t{1} << (depth - 1); }

  void validate() const {
    if (depth < 2) throw ConfigError("model.depth must be >= 2, got " + std::to_string(depth));
    if (depth > 8) throw ConfigError("model.depth must be <= 8, got " + std::to_string(depth));
    if (base_channels < 1) throw ConfigError("model.base_channels must be >= 1");
    if (n_classes < 2) throw ConfigError("model.n_classes must be >= 2, got " + std::to_string(n_classes));
    if (in_channels < 1) throw ConfigError("model.in_channels must be >= 1");
    if (gate_reduction < 1) throw ConfigError("model.gate_reduction must be >= 1");
    if (n_gates < 1) throw ConfigError("model.n_gates must be >= 1");
    if (attention_enabled) {
      for (std::size_t s = 2; s + 1 <= depth; ++s) {
        if (channels_at(s) % n_gates != 0) {
          throw ConfigError("model.n_gates=" + std::to_string(n_gates) + " does not divide the " +
                            std::to_string(channels_at(s)) + " skip channels at scale " + std::to_string(s));
        }
      }
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

struct ConvBlock {
  Conv3dParams conv;
  BatchNormParams bn;

  static ConvBlock make(std::size_t in, std::size_t out, std::mt19937_64& rng) {
    return {Conv3dParams::make(in, out, 3, 1, 1, true, rng), BatchNormParams::make(out)};
  }
  Tensor operator()(const Tensor& x, bool training) { return relu(batch_norm(conv3d(x, conv), bn, training)); }
};

struct EncoderStage {
  ConvBlock first, second;
};

struct DecoderStage {
  std::size_t scale = 0;
  ConvBlock up;  // applied after upsampling the coarser feature
  ConvBlock first, second;
  std::optional<MultiGate> gate;
  std::optional<Conv3dParams> aux_head;  // deep supervision, intermediate scales only
};

struct ForwardOptions {
  bool training = false;
  GateOptions gate;
};

struct ForwardOutput {
  Tensor main;                               // (N, N_c, D, H, W), channel-softmaxed
  std::vector<Tensor> aux;                   // deep-supervision heads, full resolution, softmaxed
  std::vector<Tensor> attention_maps;        // per gate, per sub-gate, on the skip grid
  std::vector<std::size_t> attention_scales; // skip scale of each attention map
  std::vector<Tensor> gated_skips;           // gate outputs, coarse to fine
};

class Network {
 public:
  Network() = default;

  /// Trunk and gate weights come from independent streams derived from
  /// `seed`, so a plain and an attention network built with the same seed
  /// share identical trunk weights.
  static Network build(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Network net;
    net.config_ = cfg;
    std::mt19937_64 trunk_rng(seed);
    std::mt19937_64 gate_rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::size_t in = cfg.in_channels;
    for (std::size_t s = 1; s <= cfg.depth; ++s) {
      const std::size_t f = cfg.channels_at(s);
      EncoderStage e{ConvBlock::make(in, f, trunk_rng), ConvBlock::make(f, f, trunk_rng)};
      net.encoder_.push_back(std::move(e));
      in = f;
    }
    for (std::size_t s = cfg.depth - 1; s >= 1; --s) {
      const std::size_t f = cfg.channels_at(s), coarse = cfg.channels_at(s + 1);
      DecoderStage d;
      d.scale = s;
      d.up = ConvBlock::make(coarse, f, trunk_rng);
      d.first = ConvBlock::make(2 * f, f, trunk_rng);
      d.second = ConvBlock::make(f, f, trunk_rng);
      if (cfg.deep_supervision && s >= 2) {
        d.aux_head = Conv3dParams::make(f, cfg.n_classes, 1, 1, 0, true, trunk_rng);
      }
      if (cfg.attention_enabled && s >= 2) {
        d.gate = MultiGate::make(cfg.n_gates, f, coarse, cfg.gate_inter_channels(s), gate_rng);
      }
      net.decoder_.push_back(std::move(d));
    }
    net.classifier_ = Conv3dParams::make(cfg.channels_at(1), cfg.n_classes, 1, 1, 0, true, trunk_rng);
    return net;
  }

  const ModelConfig& config() const { return config_; }
  std::vector<EncoderStage>& encoder() { return encoder_; }
  std::vector<DecoderStage>& decoder() { return decoder_; }
  Conv3dParams& classifier() { return classifier_; }

  std::size_t gate_count() const {
    std::size_t n = 0;
    for (const auto& d : decoder_) n += d.gate.has_value();
    return n;
  }

  /// Learnable tensors in a fixed order with stable names.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto conv = [&](const std::string& prefix, const Conv3dParams& c) {
      out.emplace_back(prefix + ".weight", c.weight);
      if (c.has_bias()) out.emplace_back(prefix + ".bias", c.bias);
    };
    auto block = [&](const std::string& prefix, const ConvBlock& b) {
      conv(prefix + ".conv", b.conv);
      out.emplace_back(prefix + ".bn.scale", b.bn.scale);
      out.emplace_back(prefix + ".bn.shift", b.bn.shift);
    };
    for (std::size_t s = 0; s < encoder_.size(); ++s) {
      const std::string p = "enc" + std::to_string(s + 1);
      block(p + ".first", encoder_[s].first);
      block(p + ".second", encoder_[s].second);
    }
    for (const auto& d : decoder_) {
      const std::string p = "dec" + std::to_string(d.scale);
      block(p + ".up", d.up);
      block(p + ".first", d.first);
      block(p + ".second", d.second);
      if (d.aux_head) conv(p + ".aux", *d.aux_head);
      if (d.gate) {
        for (std::size_t i = 0; i < d.gate->n_gates(); ++i) {
          const auto& g = d.gate->sub_gates[i];
          const std::string gp = p + ".gate" + std::to_string(i);
          conv(gp + ".w_x", g.w_x);
          conv(gp + ".w_g", g.w_g);
          conv(gp + ".psi", g.psi);
        }
      }
    }
    conv("classifier", classifier_);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [_, t] : named_parameters()) out.push_back(t);
    return out;
  }

  /// Non-learnable state (batch-norm running statistics), by name.
  std::vector<std::pair<std::string, std::vector<double>*>> named_buffers() {
    std::vector<std::pair<std::string, std::vector<double>*>> out;
    auto block = [&](const std::string& prefix, ConvBlock& b) {
      out.emplace_back(prefix + ".bn.running_mean", &b.bn.running_mean);
      out.emplace_back(prefix + ".bn.running_var", &b.bn.running_var);
    };
    for (std::size_t s = 0; s < encoder_.size(); ++s) {
      const std::string p = "enc" + std::to_string(s + 1);
      block(p + ".first", encoder_[s].first);
      block(p + ".second", encoder_[s].second);
    }
    for (auto& d : decoder_) {
      const std::string p = "dec" + std::to_string(d.scale);
      block(p + ".up", d.up);
      block(p + ".first", d.first);
      block(p + ".second", d.second);
    }
    return out;
  }

  void zero_grad() {
    for (auto& t : parameters()) t.zero_grad();
  }

  ForwardOutput forward(const Tensor& x, const ForwardOptions& opts = {}) {
    detail::require_5d(x, "unet forward");
    const std::size_t mult = config_.spatial_multiple();
    if (x.dim(1) != config_.in_channels) {
      throw DimensionError("unet forward: input has " + std::to_string(x.dim(1)) + " channels, model expects " +
                           std::to_string(config_.in_channels));
    }
    for (std::size_t a = 2; a < 5; ++a) {
      if (x.dim(a) == 0 || x.dim(a) % mult != 0) {
        throw DimensionError("unet forward: spatial extents " + detail::shape_str(x.shape()) +
                             " must be positive multiples of " + std::to_string(mult));
      }
    }
    const bool train = opts.training;
    const Extents3 full{x.dim(2), x.dim(3), x.dim(4)};
    std::vector<Tensor> skips;
    Tensor h = x;
    for (std::size_t s = 0; s < encoder_.size(); ++s) {
      h = encoder_[s].second(encoder_[s].first(h, train), train);
      skips.push_back(h);
      if (s + 1 < encoder_.size()) h = max_pool3d(h, 2);
    }
    ForwardOutput out;
    for (auto& d : decoder_) {
      const Tensor& skip = skips[d.scale - 1];
      const Extents3 grid{skip.dim(2), skip.dim(3), skip.dim(4)};
      Tensor up = d.up(trilinear_resample(h, grid), train);
      Tensor bridged = skip;
      if (d.gate) {
        GatedSkip gs = multi_gate_apply(skip, h, *d.gate, opts.gate);
        bridged = gs.gated;
        out.gated_skips.push_back(gs.gated);
        for (auto& a : gs.alphas) {
          out.attention_maps.push_back(a);
          out.attention_scales.push_back(d.scale);
        }
      }
      h = d.second(d.first(concat_channels({bridged, up}), train), train);
      if (d.aux_head) {
        out.aux.push_back(softmax_channel(trilinear_resample(conv3d(h, *d.aux_head), full)));
      }
    }
    out.main = softmax_channel(conv3d(h, classifier_));
    return out;
  }

 private:
  ModelConfig config_;
  std::vector<EncoderStage> encoder_;
  std::vector<DecoderStage> decoder_;  // coarse to fine
  Conv3dParams classifier_;
};

/// Number of scalar learnables.
inline std::size_t param_count(const Network& net) {
  std::size_t n = 0;
  for (const auto& [_, t] : net.named_parameters()) n += t.numel();
  return n;
}

/// Closed-form count of the scalar learnables a configuration instantiates.
inline std::size_t expected_param_count(const ModelConfig& cfg) {
  auto conv = [](std::size_t in, std::size_t out, std::size_t k) { return out * in * k * k * k + out; };
  auto block = [&](std::size_t in, std::size_t out) { return conv(in, out, 3) + 2 * out; };
  std::size_t total = 0;
  std::size_t in = cfg.in_channels;
  for (std::size_t s = 1; s <= cfg.depth; ++s) {
    const std::size_t f = cfg.channels_at(s);
    total += block(in, f) + block(f, f);
    in = f;
  }
  for (std::size_t s = 1; s < cfg.depth; ++s) {
    const std::size_t f = cfg.channels_at(s), coarse = cfg.channels_at(s + 1);
    total += block(coarse, f) + block(2 * f, f) + block(f, f);
    if (cfg.deep_supervision && s >= 2) total += conv(f, cfg.n_classes, 1);
    if (cfg.attention_enabled && s >= 2) {
      total += cfg.n_gates * gate_param_count(f, coarse, cfg.gate_inter_channels(s));
    }
  }
  total += conv(cfg.channels_at(1), cfg.n_classes, 1);
  return total;
}

/// Full copy of learnable values and buffers, in named_parameters() /
/// named_buffers() order.
struct NetworkState {
  std::vector<std::vector<double>> params;
  std::vector<std::vector<double>> buffers;
};

inline NetworkState snapshot(Network& net) {
  NetworkState s;
  for (auto& [_, t] : net.named_parameters()) s.params.emplace_back(t.data().begin(), t.data().end());
  for (auto& [_, b] : net.named_buffers()) s.buffers.push_back(*b);
  return s;
}

inline void restore(Network& net, const NetworkState& s) {
  auto params = net.named_parameters();
  auto buffers = net.named_buffers();
  if (params.size() != s.params.size() || buffers.size() != s.buffers.size()) {
    throw ContractError("restore: snapshot does not match network layout");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto d = params[i].second.mutable_data();
    if (d.size() != s.params[i].size()) throw ContractError("restore: size mismatch for " + params[i].first);
    std::copy(s.params[i].begin(), s.params[i].end(), d.begin());
  }
  for (std::size_t i = 0; i < buffers.size(); ++i) *buffers[i].second = s.buffers[i];
}

/// Copy every parameter and buffer of `src` whose name also exists in `dst`.
/// Returns the number of tensors copied.
inline std::size_t copy_matching_parameters(Network& src, Network& dst) {
  std::map<std::string, Tensor> from;
  for (auto& [name, t] : src.named_parameters()) from.emplace(name, t);
  std::size_t copied = 0;
  for (auto& [name, t] : dst.named_parameters()) {
    auto it = from.find(name);
    if (it == from.end() || it->second.numel() != t.numel()) continue;
    std::copy(it->second.data().begin(), it->second.data().end(), t.mutable_data().begin());
    ++copied;
  }
  std::map<std::string, std::vector<double>*> bufs;
  for (auto& [name, b] : src.named_buffers()) bufs.emplace(name, b);
  for (auto& [name, b] : dst.named_buffers()) {
    auto it = bufs.find(name);
    if (it != bufs.end()) {
      *b = *it->second;
      ++copied;
    }
  }
  return copied;
}

}  // namespace aunet
