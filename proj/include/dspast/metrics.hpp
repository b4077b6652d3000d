#pragma once

// Evaluation metrics: macro mAP over event classes, central-angle error,
// ER20 and DER threshold rates.

#include <cstdint>
#include <vector>

#include "dspast/common.hpp"

namespace dspast {

// Non-interpolated average precision for one class. Ties in score are
// broken by stable item order (lower index ranks first).
double average_precision(const std::vector<double>& scores, const std::vector<int>& targets);

struct MapResult {
  double map = 0.0;
  std::vector<int> skipped_classes;  // classes with no positive examples
  std::vector<double> per_class_ap;  // NaN for skipped classes
};

// scores/targets are N x K row-major; classes without positives are skipped
// (reported, not thrown).
MapResult map_metric(const std::vector<double>& scores, const std::vector<int>& targets,
                     std::int64_t n_items, std::int64_t n_classes);

// Central angle in degrees between two (azimuth, elevation) directions.
double angular_error_deg(double az1, double el1, double az2, double el2);

// Fraction of items with angular error strictly greater than 20 degrees.
double er20(const std::vector<double>& errors_deg);

// Fraction of items with |pred - true| strictly greater than 0.5 m.
double der(const std::vector<double>& pred_dist, const std::vector<double>& true_dist);

inline constexpr double kEr20ThresholdDeg = 20.0;
inline constexpr double kDerThresholdM = 0.5;

}  // namespace dspast
