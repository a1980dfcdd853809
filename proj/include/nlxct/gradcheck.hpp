#pragma once

// Central finite-difference verification of tape gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "nlxct/ops.hpp"
#include "nlxct/rng.hpp"

namespace nlxct {

struct NamedTensor {
  std::string name;
  Tensor tensor;
  /// Shifted together with `tensor` during perturbation, so a stop-gradient
  /// term of the form sg(tied − tensor) stays constant. Optional.
  Tensor tied{};
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
  bool passed() const { return max_rel_error() < tolerance; }
};

/// |a − f| / max(1e−8, |a| + |f|)
inline double gradcheck_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

/// Fixed random linear functional Σ r⊙y turning a tensor-valued output into a scalar.
inline Tensor project_to_scalar(Tape& tape, const Tensor& y, std::uint64_t seed = 7) {
  if (y.numel() == 1) return reshape(tape, y, {});
  Rng rng(seed);
  Tensor r(y.shape());
  for (double& v : r.data()) v = rng.uniform(-1.0, 1.0);
  return sum(tape, mul(tape, y, r));
}

struct GradCheckOptions {
  double h = 1e-5;
  double tolerance = 1e-4;
  /// Cap on perturbed elements per tensor (evenly strided); 0 checks every element.
  std::size_t max_elements = 0;
};

/// Compares tape gradients of f against central differences (f(θ+h) − f(θ−h)) / 2h.
///
/// f builds its computation on the tape it is given and returns either a scalar
/// or a tensor, which is reduced with a fixed random projection. Never throws
/// on a mismatch; the report carries the per-tensor maximum relative error.
inline GradCheckReport finite_diff_check(const std::function<Tensor(Tape&)>& f, std::vector<NamedTensor> params,
                                         GradCheckOptions opt = {}) {
  GradCheckReport report;
  report.tolerance = opt.tolerance;
  for (auto& p : params) {
    if (p.tied.defined() && p.tied.shape() != p.tensor.shape()) {
      report.entries.push_back({p.name + " (tied shape mismatch)", std::numeric_limits<double>::infinity(), 0});
      p.tied = Tensor();
    }
    p.tensor.set_requires_grad(true);
    p.tensor.zero_grad();
  }
  {
    Tape tape;
    Tensor loss = project_to_scalar(tape, f(tape));
    tape.backward(loss);
  }
  auto eval = [&] {
    Tape tape(false);
    return project_to_scalar(tape, f(tape)).item();
  };
  for (auto& p : params) {
    GradCheckEntry entry{p.name, 0.0, 0};
    const std::vector<double> analytic =
        p.tensor.has_grad() ? std::vector<double>(p.tensor.grad().begin(), p.tensor.grad().end())
                            : std::vector<double>(p.tensor.numel(), 0.0);
    const std::size_t n = p.tensor.numel();
    const std::size_t stride = (opt.max_elements == 0 || n <= opt.max_elements) ? 1 : (n + opt.max_elements - 1) / opt.max_elements;
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = p.tensor[i];
      const double saved_tied = p.tied.defined() ? p.tied[i] : 0.0;
      auto shift = [&](double d) {
        p.tensor[i] = saved + d;
        if (p.tied.defined()) p.tied[i] = saved_tied + d;
      };
      shift(opt.h);
      const double fp = eval();
      shift(-opt.h);
      const double fm = eval();
      shift(0.0);
      const double numeric = (fp - fm) / (2.0 * opt.h);
      entry.max_rel_error = std::max(entry.max_rel_error, gradcheck_rel_error(analytic[i], numeric));
      ++entry.checked;
    }
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace nlxct
