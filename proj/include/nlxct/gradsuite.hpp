#pragma once

// Finite-difference suite over every layer and loss, on small random
// instances in double precision.

#include <functional>
#include <string>
#include <vector>

#include "nlxct/encoder.hpp"
#include "nlxct/gradcheck.hpp"
#include "nlxct/mim.hpp"

namespace nlxct {

struct LayerCheck {
  std::string layer;
  GradCheckReport report;
};

namespace detail {

inline Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.normal(0.0, scale);
  return t;
}

inline void jitter_slow(std::vector<ContinuumLinear*> layers, Rng& rng) {
  for (auto* l : layers) {
    for (double& v : l->weight_slow.data()) v += rng.uniform(-0.2, 0.2);
    for (double& v : l->bias_slow.data()) v += rng.uniform(-0.2, 0.2);
  }
}

inline EncoderConfig micro_encoder() {
  EncoderConfig cfg;
  cfg.image_size = 16;
  cfg.stage_channels = {4, 8, 8, 8};
  cfg.patch_strides = {2, 2, 2, 1};
  cfg.d_state = 3;
  cfg.group_width = 4;
  return cfg;
}

}  // namespace detail

inline std::vector<LayerCheck> run_gradcheck_suite(std::uint64_t seed = 1) {
  using detail::random_tensor;
  std::vector<LayerCheck> out;
  Rng rng(seed);

  for (double lambda : {0.0, 0.5, 1.0}) {
    ContinuumLinear c(5, 4, {0.1, lambda}, rng, 0.5);
    detail::jitter_slow({&c}, rng);
    Tensor h = random_tensor(rng, {3, 5});
    out.push_back({"continuum_linear(lambda=" + std::string(lambda == 0.0 ? "0" : lambda == 1.0 ? "1" : "0.5") + ")",
                   finite_diff_check([&](Tape& t) { return c.forward(t, h); },
                                     {{"weight.fast", c.weight_fast, c.weight_slow}, {"bias.fast", c.bias_fast, c.bias_slow}, {"input", h}})});
  }
  {
    Norm norm(6);
    for (double& v : norm.scale.data()) v = rng.uniform(0.5, 1.5);
    for (double& v : norm.shift.data()) v = rng.uniform(-0.5, 0.5);
    Tensor x = random_tensor(rng, {2, 6, 3, 3});
    out.push_back({"layer_norm", finite_diff_check([&](Tape& t) { return norm.forward(t, x); },
                                                   {{"scale", norm.scale}, {"shift", norm.shift}, {"input", x}})});
  }
  {
    RegNetBlock block(4, 6, 1, 2, rng);
    Tensor x = random_tensor(rng, {2, 4, 4, 4});
    ParamList params;
    block.collect(params, "block", ParamGroup::Backbone);
    auto named = gradcheck_targets(params);
    named.push_back({"input", x});
    out.push_back({"regnet_block", finite_diff_check([&](Tape& t) { return block.forward(t, x); }, named)});
  }
  for (bool context : {false, true}) {
    MixerBlock block(MixerConfig{6, 3, true, {0.1, 0.5}, context}, rng);
    std::vector<ContinuumLinear*> layers;
    block.continuum_layers(layers);
    detail::jitter_slow(layers, rng);
    Tensor x = random_tensor(rng, {1, 5, 6});
    ParamList params;
    block.collect(params, "mixer", ParamGroup::Backbone);
    auto named = gradcheck_targets(params);
    named.push_back({"input", x});
    out.push_back({context ? "mixer_block(context_gate)" : "mixer_block",
                   finite_diff_check([&](Tape& t) { return block.forward(t, x); }, named)});
  }
  const EncoderConfig cfg = detail::micro_encoder();
  {
    Decoder dec(cfg, rng);
    std::vector<ContinuumLinear*> layers;
    dec.continuum_layers(layers);
    detail::jitter_slow(layers, rng);
    Tensor tokens = random_tensor(rng, {2, cfg.token_count(), cfg.feature_dim()});
    ParamList params;
    dec.collect(params, "decoder");
    auto named = gradcheck_targets(params);
    named.push_back({"tokens", tokens});
    out.push_back({"decoder", finite_diff_check([&](Tape& t) { return dec.forward(t, tokens); }, named)});
  }
  {
    Classifier model(cfg, rng);
    detail::jitter_slow(model.continuum_layers(), rng);
    Tensor x = random_tensor(rng, {2, 1, 16, 16});
    const std::vector<int> labels{2, 5};
    out.push_back({"classifier+cross_entropy",
                   finite_diff_check([&](Tape& t) { return softmax_cross_entropy(t, model.forward(t, x), labels); },
                                     gradcheck_targets(model.params()))});
  }
  {
    // The L1 reconstruction loss has kinks at zero residual, so the model is
    // checked through the smooth masked residual (1 − M)⊙(x̂ − x). Masked
    // inputs are exact zeros; norm shifts are moved off zero so downstream
    // norms are not evaluated at zero variance.
    MimModel model(cfg, rng);
    for (const auto& p : model.params())
      if (p.name.ends_with(".shift")) {
        Tensor t = p.tensor;
        for (double& v : t.data()) v = rng.uniform(-0.5, 0.5);
      }
    Tensor x = random_tensor(rng, {2, 1, 16, 16});
    const Tensor mask = make_mask(16, 16, {4, 0.5, seed});
    Tensor hidden(x.shape());
    for (std::size_t i = 0; i < hidden.numel(); ++i) hidden[i] = 1.0 - mask[i % 256];
    const Tensor corrupted = corrupt(x, mask);
    out.push_back({"mim_model(masked residual)",
                   finite_diff_check([&](Tape& t) { return mul(t, sub(t, model.reconstruct(t, corrupted), x), hidden); },
                                     gradcheck_targets(model.params()), {1e-5, 1e-4, 6})});
  }
  {
    Tensor x = random_tensor(rng, {2, 1, 8, 8});
    Tensor recon(x.shape());
    for (std::size_t i = 0; i < recon.numel(); ++i) recon[i] = x[i] + (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.1, 1.0);
    const Tensor mask = make_mask(8, 8, {2, 0.6, seed});
    out.push_back({"mim_loss", finite_diff_check([&](Tape& t) { return mim_loss(t, recon, x, mask); }, {{"reconstruction", recon}})});
  }
  {
    Tensor logits = random_tensor(rng, {4, 7}, 2.0);
    const std::vector<int> labels{0, 3, 6, 3};
    const std::vector<double> weights{0.5, 1.0, 1.5, 2.0, 0.7, 1.2, 0.9};
    out.push_back({"weighted_cross_entropy",
                   finite_diff_check([&](Tape& t) { return softmax_cross_entropy(t, logits, labels, std::span<const double>(weights)); },
                                     {{"logits", logits}})});
  }
  return out;
}

}  // namespace nlxct
