#pragma once

// Hybrid conv / state-space encoder: two RegNet stages on the feature map,
// two mixer stages on the row-major token sequence, then a normalized token
// sequence that is mean-pooled for classification.

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "nlxct/layers.hpp"
#include "nlxct/ssm.hpp"

namespace nlxct {

struct EncoderConfig {
  std::size_t image_size = 64;
  std::size_t in_channels = 1;
  std::array<std::size_t, 4> stage_channels{16, 32, 48, 64};
  std::array<std::size_t, 4> stage_depths{1, 1, 1, 1};
  std::array<std::size_t, 4> patch_strides{4, 2, 2, 1};
  std::size_t num_classes = 7;
  std::size_t d_state = 8;
  std::size_t group_width = 8;
  bool nl_enabled = true;
  ContinuumConfig continuum{};
  bool context_gate = false;

  std::size_t cumulative_stride() const {
    std::size_t s = 1;
    for (std::size_t v : patch_strides) s *= v;
    return s;
  }
  std::size_t grid_size() const { return image_size / cumulative_stride(); }
  std::size_t token_count() const { return grid_size() * grid_size(); }
  std::size_t feature_dim() const { return stage_channels[3]; }
  /// Pixels per side covered by one final token.
  std::size_t token_patch() const { return cumulative_stride(); }

  void validate() const {
    for (std::size_t i = 0; i < 4; ++i) {
      if (stage_channels[i] == 0) throw ConfigError("model.stage_channels must be positive");
      if (stage_depths[i] == 0) throw ConfigError("model.stage_depths must be positive");
      if (patch_strides[i] == 0) throw ConfigError("model.patch_strides must be positive");
    }
    if (image_size == 0 || image_size % cumulative_stride()) {
      throw ConfigError("image size " + std::to_string(image_size) + " is not divisible by the cumulative stride " +
                        std::to_string(cumulative_stride()));
    }
    if (in_channels == 0 || num_classes < 2 || d_state == 0 || group_width == 0) {
      throw ConfigError("encoder: in_channels, d_state, group_width must be positive and num_classes >= 2");
    }
    for (std::size_t i = 0; i < 2; ++i) {
      const std::size_t gw = std::min(group_width, stage_channels[i]);
      if (stage_channels[i] % gw) throw ConfigError("model.group_width must divide the conv stage channels");
    }
    if (!(continuum.alpha > 0.0 && continuum.alpha <= 1.0)) throw ConfigError("nl.alpha must lie in (0, 1]");
    if (!(continuum.lambda >= 0.0 && continuum.lambda <= 1.0)) throw ConfigError("nl.lambda must lie in [0, 1]");
  }

  MixerConfig mixer(std::size_t stage) const {
    return MixerConfig{stage_channels[stage], d_state, nl_enabled, continuum, context_gate};
  }
};

class Encoder {
 public:
  Encoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    std::size_t in = cfg.in_channels;
    for (std::size_t s = 0; s < 4; ++s) {
      const std::size_t c = cfg.stage_channels[s];
      downsample_.emplace_back(in, c, cfg.patch_strides[s], rng);
      for (std::size_t d = 0; d < cfg.stage_depths[s]; ++d) {
        if (s < 2) {
          conv_blocks_[s].emplace_back(c, c, 1, std::min(cfg.group_width, c), rng);
        } else {
          mixers_[s - 2].emplace_back(cfg.mixer(s), rng);
        }
      }
      in = c;
    }
    final_norm_.emplace_back(cfg.feature_dim());
  }

  const EncoderConfig& config() const { return cfg_; }

  /// images [B×C×H×W] -> normalized tokens [B×N×D].
  Tensor forward_tokens(Tape& tape, const Tensor& images) const {
    if (images.rank() != 4 || images.dim(1) != cfg_.in_channels || images.dim(2) != cfg_.image_size ||
        images.dim(3) != cfg_.image_size) {
      throw DimensionError("encoder: expected [Bx" + std::to_string(cfg_.in_channels) + "x" +
                           std::to_string(cfg_.image_size) + "x" + std::to_string(cfg_.image_size) + "], got " +
                           shape_str(images.shape()));
    }
    Tensor x = images;
    for (std::size_t s = 0; s < 2; ++s) {
      x = downsample_[s].forward(tape, x);
      for (const auto& block : conv_blocks_[s]) x = block.forward(tape, x);
    }
    Tensor tokens;
    std::size_t grid_h = 0, grid_w = 0;
    for (std::size_t s = 2; s < 4; ++s) {
      if (s == 3) x = unpatchify(tape, tokens, grid_h, grid_w);
      x = downsample_[s].forward(tape, x);
      grid_h = x.dim(2), grid_w = x.dim(3);
      tokens = patchify(tape, x);
      for (const auto& mixer : mixers_[s - 2]) tokens = mixer.forward(tape, tokens);
    }
    return final_norm_[0].forward(tape, tokens);
  }

  /// images -> pooled features [B×D].
  Tensor forward(Tape& tape, const Tensor& images) const { return mean_tokens(tape, forward_tokens(tape, images)); }

  void collect(ParamList& out, const std::string& prefix, ParamGroup group = ParamGroup::Backbone) const {
    for (std::size_t s = 0; s < 4; ++s) {
      const std::string stage = join_name(prefix, "stage" + std::to_string(s + 1));
      downsample_[s].collect(out, join_name(stage, "downsample"), group);
      if (s < 2) {
        for (std::size_t b = 0; b < conv_blocks_[s].size(); ++b)
          conv_blocks_[s][b].collect(out, join_name(stage, "block" + std::to_string(b)), group);
      } else {
        for (std::size_t b = 0; b < mixers_[s - 2].size(); ++b)
          mixers_[s - 2][b].collect(out, join_name(stage, "mixer" + std::to_string(b)), group);
      }
    }
    final_norm_[0].collect(out, join_name(prefix, "final_norm"), group);
  }

  void continuum_layers(std::vector<ContinuumLinear*>& out) {
    for (auto& stage : mixers_)
      for (auto& m : stage) m.continuum_layers(out);
  }

  // Exposed for tests.
  std::vector<Downsample>& downsample() { return downsample_; }
  std::array<std::vector<RegNetBlock>, 2>& conv_blocks() { return conv_blocks_; }
  std::array<std::vector<MixerBlock>, 2>& mixers() { return mixers_; }

 private:
  EncoderConfig cfg_;
  std::vector<Downsample> downsample_;
  std::array<std::vector<RegNetBlock>, 2> conv_blocks_;
  std::array<std::vector<MixerBlock>, 2> mixers_;
  std::vector<Norm> final_norm_;
};

/// Encoder + global pooling + (Continuum)Linear head over num_classes.
class Classifier {
 public:
  Classifier(const EncoderConfig& cfg, Rng& rng)
      : encoder(cfg, rng),
        head(cfg.feature_dim(), cfg.num_classes, cfg.nl_enabled, cfg.continuum, rng,
             std::sqrt(1.0 / double(cfg.feature_dim()))) {}

  Tensor forward(Tape& tape, const Tensor& images) const { return head.forward(tape, encoder.forward(tape, images)); }

  /// Head only, for pooled features [B×D].
  Tensor classify_features(Tape& tape, const Tensor& features) const {
    if (features.rank() != 2 || features.dim(1) != encoder.config().feature_dim()) {
      throw DimensionError("classifier head: features " + shape_str(features.shape()));
    }
    return head.forward(tape, features);
  }

  ParamList params() const {
    ParamList out;
    encoder.collect(out, "encoder", ParamGroup::Backbone);
    head.collect(out, "head", ParamGroup::Head);
    return out;
  }

  std::vector<ContinuumLinear*> continuum_layers() {
    std::vector<ContinuumLinear*> out;
    encoder.continuum_layers(out);
    if (auto* c = head.continuum()) out.push_back(c);
    return out;
  }

  void slow_update() {
    for (auto* c : continuum_layers()) c->slow_update();
  }

  Encoder encoder;
  Projection head;
};

inline std::size_t trainable_parameter_count(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params)
    if (p.trainable) n += p.tensor.numel();
  return n;
}

}  // namespace nlxct
