#include "dspast/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace dspast {

double average_precision(const std::vector<double>& scores, const std::vector<int>& targets) {
  if (scores.size() != targets.size() || scores.empty())
    throw ShapeError("average_precision: size mismatch or empty");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double hits = 0, ap = 0, positives = 0;
  for (int t : targets) positives += t;
  if (positives == 0) throw InvalidInput("average_precision: no positive examples");
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (targets[order[rank]] == 1) {
      hits += 1;
      ap += hits / static_cast<double>(rank + 1);
    }
  }
  return ap / positives;
}

MapResult map_metric(const std::vector<double>& scores, const std::vector<int>& targets,
                     std::int64_t n_items, std::int64_t n_classes) {
  if (static_cast<std::int64_t>(scores.size()) != n_items * n_classes ||
      scores.size() != targets.size())
    throw ShapeError("map_metric: size mismatch");
  MapResult res;
  res.per_class_ap.assign(static_cast<std::size_t>(n_classes), std::numeric_limits<double>::quiet_NaN());
  double sum = 0;
  std::int64_t counted = 0;
  std::vector<double> s(static_cast<std::size_t>(n_items));
  std::vector<int> t(static_cast<std::size_t>(n_items));
  for (std::int64_t k = 0; k < n_classes; ++k) {
    std::int64_t pos = 0;
    for (std::int64_t i = 0; i < n_items; ++i) {
      s[static_cast<std::size_t>(i)] = scores[static_cast<std::size_t>(i * n_classes + k)];
      t[static_cast<std::size_t>(i)] = targets[static_cast<std::size_t>(i * n_classes + k)];
      pos += t[static_cast<std::size_t>(i)];
    }
    if (pos == 0) {
      res.skipped_classes.push_back(static_cast<int>(k));
      continue;
    }
    const double ap = average_precision(s, t);
    res.per_class_ap[static_cast<std::size_t>(k)] = ap;
    sum += ap;
    ++counted;
  }
  if (counted == 0) throw InvalidInput("map_metric: every class lacks positives");
  res.map = sum / static_cast<double>(counted);
  return res;
}

double angular_error_deg(double az1, double el1, double az2, double el2) {
  const double a1 = deg2rad(az1), e1 = deg2rad(el1);
  const double a2 = deg2rad(az2), e2 = deg2rad(el2);
  double c = std::sin(e1) * std::sin(e2) + std::cos(e1) * std::cos(e2) * std::cos(a1 - a2);
  c = std::clamp(c, -1.0, 1.0);
  return rad2deg(std::acos(c));
}

double er20(const std::vector<double>& errors_deg) {
  if (errors_deg.empty()) throw InvalidInput("er20: empty input");
  std::int64_t over = 0;
  for (double e : errors_deg)
    if (e > kEr20ThresholdDeg) ++over;
  return static_cast<double>(over) / static_cast<double>(errors_deg.size());
}

double der(const std::vector<double>& pred_dist, const std::vector<double>& true_dist) {
  if (pred_dist.size() != true_dist.size()) throw ShapeError("der: length mismatch");
  if (pred_dist.empty()) throw InvalidInput("der: empty input");
  std::int64_t over = 0;
  for (std::size_t i = 0; i < pred_dist.size(); ++i)
    if (std::abs(pred_dist[i] - true_dist[i]) > kDerThresholdM) ++over;
  return static_cast<double>(over) / static_cast<double>(pred_dist.size());
}

}  // namespace dspast
