#pragma once

// Multi-task losses: BCE-with-logits for SED, AdaCos cosine classification
// (with a plain softmax-CE fallback) for distance and direction, and the
// weighted total. Also the label discretization used by both training and
// the scene simulator.

#include <vector>

#include "dspast/autograd.hpp"

namespace dspast {

struct LossWeights {
  double l1 = 1.0;  // SED
  double l2 = 0.0;  // DP
  double l3 = 0.0;  // DOAE

  void validate() const {
    if (l1 < 0 || l2 < 0 || l3 < 0) throw ConfigError("loss weights must be nonnegative");
    if (l1 == 0 && l2 == 0 && l3 == 0) throw ConfigError("at least one loss weight must be positive");
  }
};

enum class BinKind { kDistance, kAzimuth, kElevation };

struct DiscretizationSpec {
  double distance_bin_width = 0.5;  // meters
  double angle_bin_width = 1.0;     // degrees
  int n_distance_bins = 21;         // covers [0, 10.5); larger distances clamp

  int n_azimuth_bins() const { return static_cast<int>(360.0 / angle_bin_width); }
  int n_elevation_bins() const { return static_cast<int>(180.0 / angle_bin_width); }

  void validate() const {
    if (distance_bin_width <= 0 || angle_bin_width <= 0) throw ConfigError("bin widths must be positive");
    if (n_distance_bins < 1) throw ConfigError("n_distance_bins must be >= 1");
  }
};

// floor((value - domain_min) / width). Azimuths are wrapped into
// [-180, 180) first; distances at or above the top edge clamp to the last
// bin; elevations outside [-90, 90) are rejected.
int bin_value(double value, const DiscretizationSpec& spec, BinKind kind);

// Center of a bin, the value used when decoding predictions.
double bin_center(int index, const DiscretizationSpec& spec, BinKind kind);

// Mean BCE-with-logits over all entries; targets must be 0/1.
template <typename T>
Var<T> sed_loss(Var<T> logits, const Tensor<T>& targets) {
  for (T t : targets.v)
    if (t != T(0) && t != T(1)) throw InvalidInput("sed_loss: targets must be binary");
  return bce_with_logits_mean(logits, targets);
}

// Dynamic AdaCos state carried by a head between batches.
struct AdaCosState {
  double* scale = nullptr;  // points at the head's scale buffer
  bool clamped_logged = false;
};

inline double adacos_initial_scale(int n_classes) {
  return std::sqrt(2.0) * std::log(static_cast<double>(n_classes) - 1.0);
}

// `cosines` are the normalized-embedding/normalized-weight similarities.
// In train mode the scale is re-estimated (from the pre-update scale, as in
// the cited method) before the loss is computed with the new value; the
// scale never receives gradient. Returns the CE loss.
template <typename T>
Var<T> adacos_loss(Var<T> cosines, const std::vector<int>& labels, Parameter<T>& scale_buffer, bool train) {
  const Shape& s = cosines.val().shape;
  if (s.size() != 2) throw ShapeError("adacos_loss: cosines must be [B, K]");
  const std::int64_t b = s[0], k = s[1];
  if (static_cast<std::int64_t>(labels.size()) != b) throw ShapeError("adacos_loss: label count mismatch");
  for (int l : labels)
    if (l < 0 || l >= k) throw InvalidInput("adacos_loss: label out of range");

  double s_val = static_cast<double>(scale_buffer.value.v[0]);
  if (train) {
    // B_avg uses the pre-update scale; theta_med is the batch median of the
    // target angles.
    double b_avg = 0;
    std::vector<double> target_theta(static_cast<std::size_t>(b));
    for (std::int64_t i = 0; i < b; ++i) {
      double row_sum = 0;
      for (std::int64_t j = 0; j < k; ++j) {
        if (j == labels[static_cast<std::size_t>(i)]) continue;
        row_sum += std::exp(s_val * static_cast<double>(cosines.val().v[static_cast<std::size_t>(i * k + j)]));
      }
      b_avg += row_sum;
      const double c = std::clamp(
          static_cast<double>(cosines.val().v[static_cast<std::size_t>(i * k + labels[static_cast<std::size_t>(i)])]),
          -1.0, 1.0);
      target_theta[static_cast<std::size_t>(i)] = std::acos(c);
    }
    b_avg /= static_cast<double>(b);
    std::sort(target_theta.begin(), target_theta.end());
    const double theta_med = b % 2 == 1
                                 ? target_theta[static_cast<std::size_t>(b / 2)]
                                 : 0.5 * (target_theta[static_cast<std::size_t>(b / 2 - 1)] +
                                          target_theta[static_cast<std::size_t>(b / 2)]);
    double s_new = std::log(b_avg) / std::cos(std::min(kPi / 4.0, theta_med));
    if (s_new < 0.1 || s_new > 100.0) {
      std::fprintf(stderr, "[adacos] scale %.4f outside guard rail [0.1, 100]; clamping\n", s_new);
      s_new = std::clamp(s_new, 0.1, 100.0);
    }
    s_val = s_new;
    scale_buffer.value.v[0] = static_cast<T>(s_val);
  }
  return softmax_ce_mean(scale(cosines, s_val), labels);
}

// L_DOAE = azimuth term + elevation term.
template <typename T>
Var<T> doae_loss(Var<T> az_term, Var<T> el_term) {
  return add(az_term, el_term);
}

// lambda1 * L_sed + lambda2 * L_dp + lambda3 * L_doae. Invalid (skipped)
// terms are only allowed when their weight is zero.
template <typename T>
Var<T> total_loss(Var<T> l_sed, Var<T> l_dp, Var<T> l_doae, const LossWeights& w) {
  w.validate();
  Var<T> acc{};
  auto add_term = [&](Var<T> term, double lambda) {
    if (lambda == 0.0) return;
    if (!term.valid()) throw InvalidInput("total_loss: missing loss term with nonzero weight");
    Var<T> scaled = scale(term, lambda);
    acc = acc.valid() ? add(acc, scaled) : scaled;
  };
  add_term(l_sed, w.l1);
  add_term(l_dp, w.l2);
  add_term(l_doae, w.l3);
  if (!acc.valid()) throw InvalidInput("total_loss: all weights zero");
  return acc;
}

}  // namespace dspast
