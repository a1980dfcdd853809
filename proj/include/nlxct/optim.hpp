#pragma once

// First-order optimizers over a ParamList. Each optimizer keeps per-parameter
// state aligned with the parameter order it first sees; later calls must pass
// the same list. Frozen (non-trainable) entries are skipped.

#include <array>
#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "nlxct/layers.hpp"

namespace nlxct {

class Optimizer {
 public:
  explicit Optimizer(double lr) : lr_(lr) {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive");
  }
  virtual ~Optimizer() = default;

  /// Applies one update from the gradients currently stored on the parameters.
  void step(const ParamList& params) {
    bind(params);
    ++steps_;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Param& p = params[i];
      if (!p.trainable) continue;
      if (!p.tensor.has_grad()) throw ContractError("optimizer step: parameter '" + p.name + "' has no gradient");
      Tensor t = p.tensor;
      update(i, t.data(), p.tensor.grad(), lr_ * multiplier(p.group));
    }
  }

  void set_multiplier(ParamGroup g, double m) {
    if (!(m > 0.0)) throw ConfigError("learning-rate multiplier must be positive");
    multipliers_[static_cast<int>(g)] = m;
  }
  double multiplier(ParamGroup g) const { return multipliers_[static_cast<int>(g)]; }
  double learning_rate() const { return lr_; }
  std::size_t steps() const { return steps_; }

 protected:
  /// Per-parameter update with the effective learning rate η × group multiplier.
  virtual void update(std::size_t index, std::span<double> theta, std::span<const double> grad, double lr) = 0;
  /// Called once per parameter when the optimizer first binds to a list.
  virtual void init_state(std::size_t index, std::span<const double> theta) = 0;

 private:
  void bind(const ParamList& params) {
    if (names_.empty()) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        names_.push_back(params[i].name);
        init_state(i, params[i].tensor.data());
      }
      return;
    }
    if (names_.size() != params.size()) throw ContractError("optimizer step: parameter list changed size");
    for (std::size_t i = 0; i < params.size(); ++i)
      if (names_[i] != params[i].name) throw ContractError("optimizer step: parameter list changed at '" + params[i].name + "'");
  }

  double lr_;
  std::array<double, 3> multipliers_{1.0, 1.0, 1.0};
  std::vector<std::string> names_;
  std::size_t steps_ = 0;
};

struct MomentumConfig {
  double lr = 1e-2;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

/// Classical momentum SGD in velocity form: v ← μv + g; θ ← θ − ηv.
/// Identical to m ← μm − ηg; θ ← θ + m with m = −ηv.
class MomentumSgd : public Optimizer {
 public:
  explicit MomentumSgd(MomentumConfig cfg) : Optimizer(cfg.lr), cfg_(cfg) {
    if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(cfg.weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
  }

  const std::vector<double>& velocity(std::size_t i) const { return velocity_.at(i); }

 protected:
  void init_state(std::size_t, std::span<const double> theta) override { velocity_.emplace_back(theta.size(), 0.0); }

  void update(std::size_t index, std::span<double> theta, std::span<const double> grad, double lr) override {
    auto& v = velocity_[index];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double g = grad[j] + cfg_.weight_decay * theta[j];
      v[j] = cfg_.momentum * v[j] + g;
      theta[j] = theta[j] - lr * v[j];
    }
  }

 private:
  MomentumConfig cfg_;
  std::vector<std::vector<double>> velocity_;
};

struct DeepMomentumConfig {
  double lr = 1e-2;
  double momentum = 0.9;  // μ
  double rho = 0.99;      // slow-trajectory EMA rate
  double gamma = 0.1;     // mix toward the slow trajectory
  double weight_decay = 0.0;
};

/// Momentum SGD whose applied update is mixed with a slow EMA trajectory of
/// the fast proposals:
///   v ← μv + g;  θf = θ − ηv;  s ← ρs + (1−ρ)θf;  θ ← (1−γ)θf + γs.
/// s starts at the parameter values seen on the first step.
class DeepMomentum : public Optimizer {
 public:
  explicit DeepMomentum(DeepMomentumConfig cfg) : Optimizer(cfg.lr), cfg_(cfg) {
    if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw ConfigError("optim.momentum must lie in [0, 1)");
    if (!(cfg.rho > 0.0 && cfg.rho < 1.0)) throw ConfigError("optim.rho must lie in (0, 1)");
    if (!(cfg.gamma >= 0.0 && cfg.gamma <= 1.0)) throw ConfigError("optim.gamma must lie in [0, 1]");
    if (!(cfg.weight_decay >= 0.0)) throw ConfigError("optim.weight_decay must be non-negative");
  }

  const std::vector<double>& velocity(std::size_t i) const { return velocity_.at(i); }
  const std::vector<double>& slow(std::size_t i) const { return slow_.at(i); }
  const DeepMomentumConfig& config() const { return cfg_; }

 protected:
  void init_state(std::size_t, std::span<const double> theta) override {
    velocity_.emplace_back(theta.size(), 0.0);
    slow_.emplace_back(theta.begin(), theta.end());
  }

  void update(std::size_t index, std::span<double> theta, std::span<const double> grad, double lr) override {
    auto& v = velocity_[index];
    auto& s = slow_[index];
    const double mu = cfg_.momentum, rho = cfg_.rho, gamma = cfg_.gamma;
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double g = grad[j] + cfg_.weight_decay * theta[j];
      v[j] = mu * v[j] + g;
      const double fast = theta[j] - lr * v[j];
      s[j] = rho * s[j] + (1.0 - rho) * fast;
      theta[j] = gamma == 0.0 ? fast : (1.0 - gamma) * fast + gamma * s[j];
    }
  }

 private:
  DeepMomentumConfig cfg_;
  std::vector<std::vector<double>> velocity_;
  std::vector<std::vector<double>> slow_;
};

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Adam with decoupled weight decay: θ ← θ(1 − η·wd), then the
/// bias-corrected adaptive step.
class AdamW : public Optimizer {
 public:
  explicit AdamW(AdamWConfig cfg) : Optimizer(cfg.lr), cfg_(cfg) {
    if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0))
      throw ConfigError("adamw betas must lie in [0, 1)");
    if (!(cfg.eps > 0.0)) throw ConfigError("adamw eps must be positive");
    if (!(cfg.weight_decay >= 0.0)) throw ConfigError("optim.weight_decay must be non-negative");
  }

 protected:
  void init_state(std::size_t, std::span<const double> theta) override {
    first_.emplace_back(theta.size(), 0.0);
    second_.emplace_back(theta.size(), 0.0);
  }

  void update(std::size_t index, std::span<double> theta, std::span<const double> grad, double lr) override {
    auto& m = first_[index];
    auto& v = second_[index];
    const double t = static_cast<double>(steps());
    const double c1 = 1.0 - std::pow(cfg_.beta1, t), c2 = 1.0 - std::pow(cfg_.beta2, t);
    for (std::size_t j = 0; j < theta.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * grad[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * grad[j] * grad[j];
      theta[j] *= 1.0 - lr * cfg_.weight_decay;
      theta[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
    }
  }

 private:
  AdamWConfig cfg_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

inline void zero_grads(const ParamList& params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

}  // namespace nlxct
