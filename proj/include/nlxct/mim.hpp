#pragma once

// Masked image modeling: patch masks, corrupted views, the masked-region L1
// objective and a light reconstruction decoder on top of the encoder tokens.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "nlxct/encoder.hpp"

namespace nlxct {

/// Mask convention: 1 = visible, 0 = masked.
struct MaskSpec {
  std::size_t patch_size = 8;
  double mask_ratio = 0.6;
  std::uint64_t seed = 0;
};

inline std::size_t masked_patch_count(std::size_t total_patches, double ratio) {
  return static_cast<std::size_t>(std::llround(ratio * static_cast<double>(total_patches)));
}

/// Patch-aligned binary mask [h×w]; exactly round(ratio·patches) cells are
/// masked, drawn uniformly without replacement from the MaskSpec seed.
inline Tensor make_mask(std::size_t h, std::size_t w, const MaskSpec& spec) {
  if (spec.patch_size == 0 || h % spec.patch_size || w % spec.patch_size) {
    throw ConfigError("make_mask: " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by patch size " +
                      std::to_string(spec.patch_size));
  }
  if (!(spec.mask_ratio >= 0.0 && spec.mask_ratio <= 1.0)) throw ConfigError("make_mask: mask_ratio must lie in [0, 1]");
  const std::size_t gh = h / spec.patch_size, gw = w / spec.patch_size, total = gh * gw;
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(spec.seed);
  rng.shuffle(order);
  Tensor mask({h, w}, 1.0);
  for (std::size_t i = 0; i < masked_patch_count(total, spec.mask_ratio); ++i) {
    const std::size_t py = order[i] / gw, px = order[i] % gw;
    for (std::size_t y = 0; y < spec.patch_size; ++y)
      for (std::size_t x = 0; x < spec.patch_size; ++x) mask[(py * spec.patch_size + y) * w + px * spec.patch_size + x] = 0.0;
  }
  return mask;
}

namespace detail {

// Mask of either one image plane (shared by the batch) or every element.
inline double mask_at(const Tensor& mask, std::size_t i, std::size_t plane) {
  return mask.numel() == plane ? mask[i % plane] : mask[i];
}

inline std::size_t check_mask(const Tensor& x, const Tensor& mask, const char* op) {
  if (x.rank() < 2) throw DimensionError(std::string(op) + ": image must have rank >= 2");
  const std::size_t plane = x.dim(x.rank() - 1) * x.dim(x.rank() - 2);
  if (mask.numel() != plane && mask.numel() != x.numel()) {
    throw DimensionError(std::string(op) + ": mask " + shape_str(mask.shape()) + " does not cover image " +
                         shape_str(x.shape()));
  }
  return plane;
}

}  // namespace detail

/// x̃ = M⊙x + (1−M)⊙t, values only.
inline Tensor corrupt(const Tensor& x, const Tensor& mask, double token = 0.0) {
  const std::size_t plane = detail::check_mask(x, mask, "corrupt");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double m = detail::mask_at(mask, i, plane);
    out[i] = m * x[i] + (1.0 - m) * token;
  }
  return out;
}

constexpr double kMimEpsilon = 1e-8;

/// ‖(1−M)⊙(x̂−x)‖₁ / (‖1−M‖₁ + ε); the gradient flows to x̂ only, with the
/// L1 subgradient taken as 0 where x̂ = x.
inline Tensor mim_loss(Tape& tape, const Tensor& reconstruction, const Tensor& target, const Tensor& mask) {
  if (reconstruction.shape() != target.shape()) {
    throw DimensionError("mim_loss: reconstruction " + shape_str(reconstruction.shape()) + " vs target " +
                         shape_str(target.shape()));
  }
  const std::size_t plane = detail::check_mask(target, mask, "mim_loss");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < target.numel(); ++i) {
    const double hidden = 1.0 - detail::mask_at(mask, i, plane);
    num += std::abs(hidden * (reconstruction[i] - target[i]));
    den += std::abs(hidden);
  }
  den += kMimEpsilon;
  const bool tracked = detail::tracks(tape, {&reconstruction});
  Tensor out = detail::make_output(tape, {}, tracked);
  out[0] = num / den;
  if (tracked) {
    tape.record([sr = reconstruction.handle(), st = target.handle(), sm = mask.handle(), so = out.handle(), plane, den] {
      if (so->grad.empty()) return;
      double* gr = detail::grad_target(sr);
      if (!gr) return;
      const double g = so->grad[0] / den;
      const std::size_t n = sr->value.size();
      const bool shared = sm->value.size() == plane;
      for (std::size_t i = 0; i < n; ++i) {
        const double hidden = 1.0 - (shared ? sm->value[i % plane] : sm->value[i]);
        const double diff = sr->value[i] - st->value[i];
        const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
        gr[i] += g * hidden * sign;
      }
    });
  }
  return out;
}

/// One mixer block over the encoder tokens, a per-token projection to the
/// token's pixel patch, and reassembly into a single-channel image.
class Decoder {
 public:
  Decoder(const EncoderConfig& cfg, Rng& rng)
      : grid_(cfg.grid_size()),
        patch_(cfg.token_patch()),
        mixer(cfg.mixer(3), rng),
        to_pixels(cfg.feature_dim(), cfg.token_patch() * cfg.token_patch() * cfg.in_channels, rng,
                  std::sqrt(1.0 / double(cfg.feature_dim()))) {
    if (cfg.in_channels != 1) throw ConfigError("Decoder: only single-channel reconstruction is supported");
  }

  Tensor forward(Tape& tape, const Tensor& tokens) const {
    if (tokens.rank() != 3 || tokens.dim(1) != grid_ * grid_) {
      throw DimensionError("decoder: token grid " + shape_str(tokens.shape()) + " does not match " +
                           std::to_string(grid_) + "x" + std::to_string(grid_));
    }
    Tensor h = mixer.forward(tape, tokens);
    return tokens_to_image(tape, to_pixels.forward(tape, h), grid_, grid_, patch_);
  }

  void collect(ParamList& out, const std::string& prefix, ParamGroup group = ParamGroup::Decoder) const {
    mixer.collect(out, join_name(prefix, "mixer"), group);
    to_pixels.collect(out, join_name(prefix, "to_pixels"), group);
  }

  void continuum_layers(std::vector<ContinuumLinear*>& out) { mixer.continuum_layers(out); }

 private:
  std::size_t grid_;
  std::size_t patch_;

 public:
  MixerBlock mixer;
  Linear to_pixels;
};

/// Encoder plus reconstruction decoder used during pretraining.
class MimModel {
 public:
  MimModel(const EncoderConfig& cfg, Rng& rng) : encoder(cfg, rng), decoder(cfg, rng) {}

  Tensor reconstruct(Tape& tape, const Tensor& corrupted) const {
    return decoder.forward(tape, encoder.forward_tokens(tape, corrupted));
  }

  ParamList params() const {
    ParamList out;
    encoder.collect(out, "encoder", ParamGroup::Backbone);
    decoder.collect(out, "decoder", ParamGroup::Decoder);
    return out;
  }

  std::vector<ContinuumLinear*> continuum_layers() {
    std::vector<ContinuumLinear*> out;
    encoder.continuum_layers(out);
    decoder.continuum_layers(out);
    return out;
  }

  void slow_update() {
    for (auto* c : continuum_layers()) c->slow_update();
  }

  Encoder encoder;
  Decoder decoder;
};

}  // namespace nlxct
