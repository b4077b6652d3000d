#include "dspast/objectives.hpp"

namespace dspast {

int bin_value(double value, const DiscretizationSpec& spec, BinKind kind) {
  spec.validate();
  switch (kind) {
    case BinKind::kDistance: {
      if (value < 0) throw InvalidInput("bin_value: distance must be nonnegative");
      const int idx = static_cast<int>(std::floor(value / spec.distance_bin_width));
      return std::min(idx, spec.n_distance_bins - 1);
    }
    case BinKind::kAzimuth: {
      const double wrapped = wrap_azimuth_deg(value);
      const int idx = static_cast<int>(std::floor((wrapped + 180.0) / spec.angle_bin_width));
      // wrap_azimuth_deg guarantees [-180, 180), so idx is always in range.
      return std::min(idx, spec.n_azimuth_bins() - 1);
    }
    case BinKind::kElevation: {
      if (value < -90.0 || value >= 90.0)
        throw InvalidInput("bin_value: elevation outside [-90, 90)");
      return static_cast<int>(std::floor((value + 90.0) / spec.angle_bin_width));
    }
  }
  throw InvalidInput("bin_value: bad kind");
}

double bin_center(int index, const DiscretizationSpec& spec, BinKind kind) {
  switch (kind) {
    case BinKind::kDistance:
      if (index < 0 || index >= spec.n_distance_bins) throw InvalidInput("bin_center: index out of range");
      return (index + 0.5) * spec.distance_bin_width;
    case BinKind::kAzimuth:
      if (index < 0 || index >= spec.n_azimuth_bins()) throw InvalidInput("bin_center: index out of range");
      return -180.0 + (index + 0.5) * spec.angle_bin_width;
    case BinKind::kElevation:
      if (index < 0 || index >= spec.n_elevation_bins()) throw InvalidInput("bin_center: index out of range");
      return -90.0 + (index + 0.5) * spec.angle_bin_width;
  }
  throw InvalidInput("bin_center: bad kind");
}

}  // namespace dspast
