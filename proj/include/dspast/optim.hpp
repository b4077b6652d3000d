#pragma once

// AdamW and the finite-difference gradient checker.

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dspast/autograd.hpp"
#include "dspast/common.hpp"

namespace dspast {

// Decoupled-weight-decay Adam. A parameter whose gradient is exactly zero
// is skipped entirely (no moment update, no weight decay), so parameters
// cut off from the loss stay bit-identical across steps.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Parameter<T>*> params, double lr, double beta1 = 0.9, double beta2 = 0.95,
        double weight_decay = 1e-4, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), wd_(weight_decay), eps_(eps) {
    if (lr <= 0) throw ConfigError("adamw: lr must be positive");
    for (auto* p : params_) {
      state_[p] = State{Tensor<T>(p->value.shape), Tensor<T>(p->value.shape)};
    }
  }

  void set_lr(double lr) {
    if (lr <= 0) throw ConfigError("adamw: lr must be positive");
    lr_ = lr;
  }
  double lr() const { return lr_; }
  std::int64_t step_count() const { return t_; }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto* p : params_) {
      if (p->grad.shape != p->value.shape || p->grad_is_zero()) continue;
      State& st = state_[p];
      for (std::size_t i = 0; i < p->value.v.size(); ++i) {
        const double g = static_cast<double>(p->grad.v[i]);
        const double m = beta1_ * static_cast<double>(st.m.v[i]) + (1.0 - beta1_) * g;
        const double v = beta2_ * static_cast<double>(st.v.v[i]) + (1.0 - beta2_) * g * g;
        st.m.v[i] = static_cast<T>(m);
        st.v.v[i] = static_cast<T>(v);
        const double update = (m / bc1) / (std::sqrt(v / bc2) + eps_);
        double x = static_cast<double>(p->value.v[i]);
        x -= lr_ * wd_ * x;
        x -= lr_ * update;
        p->value.v[i] = static_cast<T>(x);
      }
    }
  }

  struct State {
    Tensor<T> m;
    Tensor<T> v;
  };
  // Exposed for checkpointing.
  std::map<Parameter<T>*, State>& state() { return state_; }
  void set_step_count(std::int64_t t) { t_ = t; }

 private:
  std::vector<Parameter<T>*> params_;
  double lr_, beta1_, beta2_, wd_, eps_;
  std::int64_t t_ = 0;
  std::map<Parameter<T>*, State> state_;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::int64_t checked_coords = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

// Compares analytic gradients against central finite differences. `loss_fn`
// must rebuild the forward pass from scratch on each call. Coordinates are
// deterministically subsampled when a parameter is large. `corrupt` is a
// test hook that perturbs one analytic gradient to prove the checker fails.
template <typename T>
GradCheckReport grad_check(const std::vector<Parameter<T>*>& params, const std::function<double()>& loss_fn,
                           const std::function<void()>& backward_fn, double tolerance, std::uint64_t seed,
                           std::int64_t max_coords_per_param = 48, double h = 1e-5,
                           const std::string& corrupt = "") {
  static_assert(std::is_same_v<T, double>, "grad_check requires 64-bit parameters");
  for (auto* p : params) p->zero_grad();
  backward_fn();

  GradCheckReport report;
  report.tolerance = tolerance;
  for (auto* p : params) {
    if (!p->trainable) continue;
    GradCheckEntry entry;
    entry.name = p->name;
    Prng rng(mix_seed(seed, p->name));
    const std::int64_t n = p->value.numel();
    std::vector<std::int64_t> coords;
    if (n <= max_coords_per_param) {
      for (std::int64_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (std::int64_t i = 0; i < max_coords_per_param; ++i)
        coords.push_back(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n))));
    }
    for (std::int64_t c : coords) {
      const double orig = p->value.v[static_cast<std::size_t>(c)];
      p->value.v[static_cast<std::size_t>(c)] = orig + h;
      const double fp = loss_fn();
      p->value.v[static_cast<std::size_t>(c)] = orig - h;
      const double fm = loss_fn();
      p->value.v[static_cast<std::size_t>(c)] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      double analytic = p->grad.v[static_cast<std::size_t>(c)];
      if (!corrupt.empty() && p->name == corrupt) analytic += 1.0;
      const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      entry.max_rel_error = std::max(entry.max_rel_error, rel);
      ++entry.checked_coords;
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  report.pass = report.max_rel_error < tolerance;
  return report;
}

}  // namespace dspast
