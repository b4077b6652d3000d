#pragma once

// Binary feature dump: 16-byte magic+version header, dims (C, T, M) as
// little-endian u32, then row-major float32 data. A JSON sidecar
// (<path>.json) records the clip id, spectrogram config and feature order.

#include <string>

#include "dspast/dsp.hpp"

namespace dspast {

// First 12 bytes of the header; the remaining 4 are the format version.
inline constexpr char kFeatureMagic[12] = {'D', 'S', 'P', 'A', 'S', 'T', 'F', 'E', 'A', 'T', '\0', '\0'};
inline constexpr std::uint32_t kFeatureVersion = 1;

void write_feature_dump(const std::string& path, const FeatureStack& stack, const std::string& clip_id);

struct FeatureDump {
  FeatureStack stack;
  std::string clip_id;
};
FeatureDump read_feature_dump(const std::string& path);

}  // namespace dspast
