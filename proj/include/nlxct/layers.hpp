#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <variant>
#include <vector>

#include "nlxct/gradcheck.hpp"
#include "nlxct/ops.hpp"
#include "nlxct/rng.hpp"

namespace nlxct {

/// Optimizer parameter groups; learning-rate multipliers are set per group.
enum class ParamGroup : int { Backbone = 0, Head = 1, Decoder = 2 };

struct Param {
  std::string name;
  Tensor tensor;
  bool trainable = true;
  ParamGroup group = ParamGroup::Backbone;
};

using ParamList = std::vector<Param>;

inline std::string join_name(const std::string& prefix, const std::string& leaf) {
  return prefix.empty() ? leaf : prefix + "." + leaf;
}

inline Tensor make_parameter(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape), 0.0, true);
  if (stddev != 0.0)
    for (double& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

/// Trainable tensors as finite-difference targets; each `*.fast` tensor is
/// tied to its `*.slow` trace.
inline std::vector<NamedTensor> gradcheck_targets(const ParamList& params) {
  std::vector<NamedTensor> out;
  for (const auto& p : params) {
    if (!p.trainable) continue;
    NamedTensor t{p.name, p.tensor, Tensor()};
    if (p.name.ends_with(".fast")) {
      const std::string slow = p.name.substr(0, p.name.size() - 5) + ".slow";
      for (const auto& q : params)
        if (q.name == slow) t.tied = q.tensor;
    }
    out.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------

class Linear {
 public:
  Linear(std::size_t in, std::size_t out, Rng& rng, double stddev)
      : weight(make_parameter({out, in}, rng, stddev)), bias(Tensor({out}, 0.0, true)) {}

  Tensor forward(Tape& tape, const Tensor& x) const { return linear(tape, x, weight, bias); }

  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
    out.push_back({join_name(prefix, "weight"), weight, true, group});
    out.push_back({join_name(prefix, "bias"), bias, true, group});
  }

  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }

  Tensor weight;
  Tensor bias;
};

struct ContinuumConfig {
  double alpha = 0.01;  // slow-trace EMA rate
  double lambda = 0.5;  // slow-trace blend in the forward pass
};

/// Linear projection with gradient-trained fast weights and a slow EMA trace.
///
/// Forward uses W̃ = W + λ·sg(W̄ − W) (and b̃ likewise). The blend offset is
/// computed from values only and enters the tape as a constant, so the fast
/// weights receive exactly the gradient of a plain layer evaluated at W̃ and
/// the slow trace never receives one.
class ContinuumLinear {
 public:
  ContinuumLinear(std::size_t in, std::size_t out, ContinuumConfig cfg, Rng& rng, double stddev)
      : weight_fast(make_parameter({out, in}, rng, stddev)),
        bias_fast(Tensor({out}, 0.0, true)),
        alpha(cfg.alpha),
        lambda(cfg.lambda) {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("ContinuumLinear: alpha must lie in (0, 1]");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("ContinuumLinear: lambda must lie in [0, 1]");
    weight_slow = weight_fast.clone();
    bias_slow = bias_fast.clone();
  }

  Tensor forward(Tape& tape, const Tensor& h) const {
    if (lambda == 0.0) return linear(tape, h, weight_fast, bias_fast);
    return linear(tape, h, blended(tape, weight_fast, weight_slow), blended(tape, bias_fast, bias_slow));
  }

  /// W̄ ← (1−α)·W̄ + α·W, values only.
  void slow_update() {
    ema(weight_slow, weight_fast);
    ema(bias_slow, bias_fast);
  }

  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
    out.push_back({join_name(prefix, "weight.fast"), weight_fast, true, group});
    out.push_back({join_name(prefix, "bias.fast"), bias_fast, true, group});
    out.push_back({join_name(prefix, "weight.slow"), weight_slow, false, group});
    out.push_back({join_name(prefix, "bias.slow"), bias_slow, false, group});
  }

  Tensor weight_fast;
  Tensor bias_fast;
  Tensor weight_slow;
  Tensor bias_slow;
  double alpha;
  double lambda;

 private:
  Tensor blended(Tape& tape, const Tensor& fast, const Tensor& slow) const {
    Tensor offset(fast.shape());
    for (std::size_t i = 0; i < offset.numel(); ++i) offset[i] = lambda * (slow[i] - fast[i]);
    return add(tape, fast, offset);
  }

  void ema(Tensor& slow, const Tensor& fast) const {
    for (std::size_t i = 0; i < slow.numel(); ++i) slow[i] = (1.0 - alpha) * slow[i] + alpha * fast[i];
  }
};

/// A projection that is either a plain Linear or a ContinuumLinear.
/// Both draw their initial weights identically from the generator.
class Projection {
 public:
  Projection(std::size_t in, std::size_t out, bool continuum, ContinuumConfig cfg, Rng& rng, double stddev)
      : impl_(continuum ? Impl(ContinuumLinear(in, out, cfg, rng, stddev)) : Impl(Linear(in, out, rng, stddev))) {}

  Tensor forward(Tape& tape, const Tensor& x) const {
    return std::visit([&](const auto& p) { return p.forward(tape, x); }, impl_);
  }

  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
    std::visit([&](const auto& p) { p.collect(out, prefix, group); }, impl_);
  }

  ContinuumLinear* continuum() { return std::get_if<ContinuumLinear>(&impl_); }
  const ContinuumLinear* continuum() const { return std::get_if<ContinuumLinear>(&impl_); }
  Linear* plain() { return std::get_if<Linear>(&impl_); }

  /// Fast weights (or the plain weights).
  Tensor& weight() { return continuum() ? continuum()->weight_fast : plain()->weight; }
  Tensor& bias() { return continuum() ? continuum()->bias_fast : plain()->bias; }

 private:
  using Impl = std::variant<Linear, ContinuumLinear>;
  Impl impl_;
};

// ---------------------------------------------------------------------------

/// Layer normalization with learnable scale (init 1) and shift (init 0).
class Norm {
 public:
  explicit Norm(std::size_t width) : scale(Tensor({width}, 1.0, true)), shift(Tensor({width}, 0.0, true)) {}

  /// Normalizes channels of an NCHW map, or the last axis of anything else.
  Tensor forward(Tape& tape, const Tensor& x) const {
    return layer_norm(tape, x, scale, shift, x.rank() == 4 ? 1 : x.rank() - 1);
  }

  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
    out.push_back({join_name(prefix, "scale"), scale, true, group});
    out.push_back({join_name(prefix, "shift"), shift, true, group});
  }

  Tensor scale;
  Tensor shift;
};

/// Bias-free convolution; normalization follows it everywhere in the encoder.
class Conv {
 public:
  Conv(std::size_t in, std::size_t out, std::size_t kernel, Conv2dOptions opt, Rng& rng)
      : weight(make_parameter({out, in / opt.groups, kernel, kernel}, rng,
                              std::sqrt(2.0 / static_cast<double>(in / opt.groups * kernel * kernel)))),
        options(opt) {
    if (in % opt.groups || out % opt.groups) throw ConfigError("Conv: channels not divisible by groups");
  }

  Tensor forward(Tape& tape, const Tensor& x) const { return conv2d(tape, x, weight, options); }

  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
    out.push_back({join_name(prefix, "weight"), weight, true, group});
  }

  Tensor weight;
  Conv2dOptions options;
};

/// Non-overlapping patch merge: kernel = stride, then channel normalization.
class Downsample {
 public:
  Downsample(std::size_t in, std::size_t out, std::size_t stride, Rng& rng)
      : conv(in, out, stride, {stride, 0, 1}, rng), norm(out) {}

  Tensor forward(Tape& tape, const Tensor& x) const { return norm.forward(tape, conv.forward(tape, x)); }

  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
    conv.collect(out, join_name(prefix, "conv"), group);
    norm.collect(out, join_name(prefix, "norm"), group);
  }

  Conv conv;
  Norm norm;
};

/// RegNet-style bottleneck: 1×1 → 3×3 grouped → 1×1, each followed by
/// norm + GELU, added to an identity or projected shortcut.
class RegNetBlock {
 public:
  RegNetBlock(std::size_t in, std::size_t out, std::size_t stride, std::size_t group_width, Rng& rng)
      : reduce(in, out, 1, {1, 0, 1}, rng),
        norm_reduce(out),
        spatial(out, out, 3, {stride, 1, groups_for(out, group_width)}, rng),
        norm_spatial(out),
        expand(out, out, 1, {1, 0, 1}, rng),
        norm_expand(out) {
    if (in != out || stride != 1) {
      shortcut.emplace_back(in, out, 1, Conv2dOptions{stride, 0, 1}, rng);
      shortcut_norm.emplace_back(out);
    }
  }

  static std::size_t groups_for(std::size_t channels, std::size_t group_width) {
    if (group_width == 0 || channels % group_width) {
      throw ConfigError("RegNetBlock: group width " + std::to_string(group_width) + " does not divide " +
                        std::to_string(channels) + " channels");
    }
    return channels / group_width;
  }

  Tensor forward(Tape& tape, const Tensor& x) const {
    Tensor h = gelu(tape, norm_reduce.forward(tape, reduce.forward(tape, x)));
    h = gelu(tape, norm_spatial.forward(tape, spatial.forward(tape, h)));
    h = gelu(tape, norm_expand.forward(tape, expand.forward(tape, h)));
    const Tensor skip = shortcut.empty() ? x : shortcut_norm[0].forward(tape, shortcut[0].forward(tape, x));
    return add(tape, skip, h);
  }

  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
    reduce.collect(out, join_name(prefix, "reduce"), group);
    norm_reduce.collect(out, join_name(prefix, "reduce_norm"), group);
    spatial.collect(out, join_name(prefix, "spatial"), group);
    norm_spatial.collect(out, join_name(prefix, "spatial_norm"), group);
    expand.collect(out, join_name(prefix, "expand"), group);
    norm_expand.collect(out, join_name(prefix, "expand_norm"), group);
    if (!shortcut.empty()) {
      shortcut[0].collect(out, join_name(prefix, "shortcut"), group);
      shortcut_norm[0].collect(out, join_name(prefix, "shortcut_norm"), group);
    }
  }

  Conv reduce;
  Norm norm_reduce;
  Conv spatial;
  Norm norm_spatial;
  Conv expand;
  Norm norm_expand;
  std::vector<Conv> shortcut;  // empty for the identity shortcut
  std::vector<Norm> shortcut_norm;
};

}  // namespace nlxct
