#pragma once

// Diagonal, input-gated state-space sequence mixing.
//
// Per channel d and state slot k the recurrence over the token axis is
//   s[n] = a ⊙ s[n−1] + b ⊙ u[n],   y[n] = g[n] · Σ_k c ⊙ s[n],   s[−1] = 0,
// with a = sigmoid(decay_logit) ∈ (0, 1), so the scan is causal, linear in
// the sequence length, and bounded for bounded inputs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "nlxct/layers.hpp"
#include "nlxct/ops.hpp"

namespace nlxct {

struct ScanDims {
  std::size_t batch = 1, length = 1, channels = 1, state = 1;
};

/// Sequential reference scan over raw values; the contract every other
/// implementation is checked against. gate may be empty (≡ 1).
inline std::vector<double> scan_sequential(std::span<const double> u, std::span<const double> gate,
                                           std::span<const double> decay, std::span<const double> in_vec,
                                           std::span<const double> out_vec, ScanDims dims) {
  const auto [B, N, D, K] = dims;
  std::vector<double> y(B * N * D), s(D * K);
  for (std::size_t b = 0; b < B; ++b) {
    std::fill(s.begin(), s.end(), 0.0);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t d = 0; d < D; ++d) {
        const std::size_t i = (b * N + n) * D + d;
        double r = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
          const std::size_t j = d * K + k;
          s[j] = decay[j] * s[j] + in_vec[j] * u[i];
          r += out_vec[j] * s[j];
        }
        y[i] = gate.empty() ? r : gate[i] * r;
      }
  }
  return y;
}

/// Chunked scan: local scans per chunk from a zero state, a carry
/// propagation across chunk boundaries, then a pass emitting outputs from the
/// propagated carries. The per-chunk passes are independent of each other.
inline std::vector<double> scan_chunked(std::span<const double> u, std::span<const double> gate,
                                        std::span<const double> decay, std::span<const double> in_vec,
                                        std::span<const double> out_vec, ScanDims dims, std::size_t chunk) {
  const auto [B, N, D, K] = dims;
  chunk = std::max<std::size_t>(1, chunk);
  const std::size_t chunks = (N + chunk - 1) / chunk;
  std::vector<double> y(B * N * D);
  std::vector<double> local_end(chunks * D * K), carry_in(chunks * D * K), s(D * K);
  std::vector<double> decay_pow(D * K);
  for (std::size_t b = 0; b < B; ++b) {
    // Pass 1: final state of each chunk started from zero.
    for (std::size_t c = 0; c < chunks; ++c) {
      std::fill(s.begin(), s.end(), 0.0);
      for (std::size_t n = c * chunk; n < std::min(N, (c + 1) * chunk); ++n)
        for (std::size_t d = 0; d < D; ++d)
          for (std::size_t k = 0; k < K; ++k) {
            const std::size_t j = d * K + k;
            s[j] = decay[j] * s[j] + in_vec[j] * u[(b * N + n) * D + d];
          }
      std::copy(s.begin(), s.end(), local_end.begin() + c * D * K);
    }
    // Pass 2: carry_in[c] = local_end[c−1] + a^len(c−1) · carry_in[c−1].
    std::fill(carry_in.begin(), carry_in.begin() + D * K, 0.0);
    for (std::size_t c = 1; c < chunks; ++c) {
      const std::size_t len = std::min(N, c * chunk) - (c - 1) * chunk;
      for (std::size_t j = 0; j < D * K; ++j) {
        double p = 1.0;
        for (std::size_t t = 0; t < len; ++t) p *= decay[j];
        carry_in[c * D * K + j] = local_end[(c - 1) * D * K + j] + p * carry_in[(c - 1) * D * K + j];
      }
    }
    // Pass 3: outputs, each chunk seeded with its carry.
    for (std::size_t c = 0; c < chunks; ++c) {
      std::copy(carry_in.begin() + c * D * K, carry_in.begin() + (c + 1) * D * K, s.begin());
      for (std::size_t n = c * chunk; n < std::min(N, (c + 1) * chunk); ++n)
        for (std::size_t d = 0; d < D; ++d) {
          const std::size_t i = (b * N + n) * D + d;
          double r = 0.0;
          for (std::size_t k = 0; k < K; ++k) {
            const std::size_t j = d * K + k;
            s[j] = decay[j] * s[j] + in_vec[j] * u[i];
            r += out_vec[j] * s[j];
          }
          y[i] = gate.empty() ? r : gate[i] * r;
        }
    }
  }
  return y;
}

/// Differentiable scan. u and gate are [B×N×D]; decay_logit, in_vec and
/// out_vec are [D×K]. gate may be an undefined Tensor (no gating).
inline Tensor ssm_scan(Tape& tape, const Tensor& u, const Tensor& gate, const Tensor& decay_logit, const Tensor& in_vec,
                       const Tensor& out_vec) {
  detail::require_rank(u, 3, "ssm_scan");
  detail::require_rank(decay_logit, 2, "ssm_scan");
  const std::size_t B = u.dim(0), N = u.dim(1), D = u.dim(2), K = decay_logit.dim(1);
  if (N == 0) throw DimensionError("ssm_scan: empty sequence");
  if (decay_logit.dim(0) != D || in_vec.shape() != decay_logit.shape() || out_vec.shape() != decay_logit.shape()) {
    throw DimensionError("ssm_scan: parameters must be [" + std::to_string(D) + "xK]");
  }
  if (gate.defined() && gate.shape() != u.shape()) throw DimensionError("ssm_scan: gate shape differs from input");

  std::vector<double> a(D * K);
  for (std::size_t j = 0; j < D * K; ++j) a[j] = sigmoid_value(decay_logit[j]);
  const bool tracked = detail::tracks(tape, {&u, &gate, &decay_logit, &in_vec, &out_vec});
  Tensor out = detail::make_output(tape, u.shape(), tracked);

  const double* pu = u.data().data();
  const double* pg = gate.defined() ? gate.data().data() : nullptr;
  const double* pb = in_vec.data().data();
  const double* pc = out_vec.data().data();
  double* py = out.data().data();
  std::vector<double> states(tracked ? B * N * D * K : 0), readout(tracked && pg ? B * N * D : 0), s(D * K);
  for (std::size_t b = 0; b < B; ++b) {
    std::fill(s.begin(), s.end(), 0.0);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t d = 0; d < D; ++d) {
        const std::size_t i = (b * N + n) * D + d;
        double r = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
          const std::size_t j = d * K + k;
          s[j] = a[j] * s[j] + pb[j] * pu[i];
          r += pc[j] * s[j];
        }
        py[i] = pg ? pg[i] * r : r;
        if (tracked && pg) readout[i] = r;
      }
      if (tracked) std::copy(s.begin(), s.end(), states.begin() + (b * N + n) * D * K);
    }
  }

  if (tracked) {
    tape.record([su = u.handle(), sg = gate.handle(), sl = decay_logit.handle(), sb = in_vec.handle(),
                 sc = out_vec.handle(), so = out.handle(), a = std::move(a), states = std::move(states),
                 readout = std::move(readout), B, N, D, K] {
      if (so->grad.empty()) return;
      const double* dy = so->grad.data();
      double* gu = detail::grad_target(su);
      double* gg = detail::grad_target(sg);
      double* gl = detail::grad_target(sl);
      double* gb = detail::grad_target(sb);
      double* gc = detail::grad_target(sc);
      const double* vu = su->value.data();
      const double* vg = sg ? sg->value.data() : nullptr;
      const double* vb = sb->value.data();
      const double* vc = sc->value.data();
      std::vector<double> carry(D * K), da(D * K, 0.0);
      for (std::size_t b = 0; b < B; ++b) {
        std::fill(carry.begin(), carry.end(), 0.0);
        for (std::size_t n = N; n-- > 0;) {
          const double* s_now = states.data() + (b * N + n) * D * K;
          const double* s_prev = n ? s_now - D * K : nullptr;
          for (std::size_t d = 0; d < D; ++d) {
            const std::size_t i = (b * N + n) * D + d;
            double dr = dy[i];
            if (vg) {
              if (gg) gg[i] += dy[i] * readout[i];
              dr *= vg[i];
            }
            double du = 0.0;
            for (std::size_t k = 0; k < K; ++k) {
              const std::size_t j = d * K + k;
              const double ds = dr * vc[j] + carry[j];
              if (gc) gc[j] += dr * s_now[j];
              du += vb[j] * ds;
              if (gb) gb[j] += ds * vu[i];
              if (s_prev) da[j] += ds * s_prev[j];
              carry[j] = a[j] * ds;
            }
            if (gu) gu[i] += du;
          }
        }
      }
      if (gl)
        for (std::size_t j = 0; j < D * K; ++j) gl[j] += da[j] * a[j] * (1.0 - a[j]);
    });
  }
  return out;
}

struct MixerConfig {
  std::size_t d_model = 32;
  std::size_t d_state = 8;
  bool continuum = true;
  ContinuumConfig continuum_cfg{};
  bool context_gate = false;  // optional token-global channel gate
};

/// Pre-norm residual mixer: LN → (input, gate) projections → gated scan →
/// output projection → residual add. Projections are ContinuumLinear when
/// `continuum` is set.
class MixerBlock {
 public:
  MixerBlock(const MixerConfig& cfg, Rng& rng)
      : norm(cfg.d_model),
        in_proj(cfg.d_model, cfg.d_model, cfg.continuum, cfg.continuum_cfg, rng, std::sqrt(1.0 / double(cfg.d_model))),
        gate_proj(cfg.d_model, cfg.d_model, cfg.continuum, cfg.continuum_cfg, rng, std::sqrt(1.0 / double(cfg.d_model))),
        out_proj(cfg.d_model, cfg.d_model, cfg.continuum, cfg.continuum_cfg, rng,
                 0.5 * std::sqrt(1.0 / double(cfg.d_model))),
        decay_logit(Tensor({cfg.d_model, cfg.d_state}, 0.0, true)),
        in_vec(Tensor({cfg.d_model, cfg.d_state}, 0.0, true)),
        out_vec(make_parameter({cfg.d_model, cfg.d_state}, rng, std::sqrt(1.0 / double(cfg.d_state)))) {
    // Decays spread over (0.5, 0.95); inputs scaled by (1 − a) so each state
    // slot starts as an exponential average of its input.
    const std::size_t K = cfg.d_state;
    for (std::size_t d = 0; d < cfg.d_model; ++d)
      for (std::size_t k = 0; k < K; ++k) {
        const double a = K == 1 ? 0.8 : 0.5 + 0.45 * double(k) / double(K - 1);
        decay_logit[d * K + k] = std::log(a / (1.0 - a));
        in_vec[d * K + k] = 1.0 - a;
      }
    if (cfg.context_gate) context.emplace_back(cfg.d_model, cfg.d_model, rng, std::sqrt(1.0 / double(cfg.d_model)));
  }

  Tensor forward(Tape& tape, const Tensor& tokens) const {
    if (tokens.rank() != 3 || tokens.dim(2) != norm.scale.numel()) {
      throw DimensionError("MixerBlock: tokens " + shape_str(tokens.shape()) + " for width " +
                           std::to_string(norm.scale.numel()));
    }
    Tensor z = norm.forward(tape, tokens);
    Tensor u = gelu(tape, in_proj.forward(tape, z));
    Tensor g = sigmoid(tape, gate_proj.forward(tape, z));
    Tensor y = ssm_scan(tape, u, g, decay_logit, in_vec, out_vec);
    if (!context.empty()) y = scale_tokens(tape, y, sigmoid(tape, context[0].forward(tape, mean_tokens(tape, z))));
    return add(tape, tokens, out_proj.forward(tape, y));
  }

  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
    norm.collect(out, join_name(prefix, "norm"), group);
    in_proj.collect(out, join_name(prefix, "in_proj"), group);
    gate_proj.collect(out, join_name(prefix, "gate_proj"), group);
    out.push_back({join_name(prefix, "ssm.decay_logit"), decay_logit, true, group});
    out.push_back({join_name(prefix, "ssm.in"), in_vec, true, group});
    out.push_back({join_name(prefix, "ssm.out"), out_vec, true, group});
    if (!context.empty()) context[0].collect(out, join_name(prefix, "context_gate"), group);
    out_proj.collect(out, join_name(prefix, "out_proj"), group);
  }

  void continuum_layers(std::vector<ContinuumLinear*>& out) {
    for (Projection* p : {&in_proj, &gate_proj, &out_proj})
      if (auto* c = p->continuum()) out.push_back(c);
  }

  Norm norm;
  Projection in_proj;
  Projection gate_proj;
  Projection out_proj;
  Tensor decay_logit;
  Tensor in_vec;
  Tensor out_vec;
  std::vector<Linear> context;
};

}  // namespace nlxct
