#pragma once

// Two-channel 32-bit float WAV read/write.

#include <string>

#include "dspast/dsp.hpp"

namespace dspast {

void write_wav(const std::string& path, const StereoClip& clip);
StereoClip read_wav(const std::string& path);

}  // namespace dspast
