#pragma once

// Binaural feature front-end: STFT, mel filterbank, log-mel, IPD cos/sin,
// ILD and per-frame GCC-PHAT, stacked into the C x T x M input tensor of
// the encoder.

#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "dspast/common.hpp"
#include "dspast/tensor.hpp"

namespace dspast {

struct StereoClip {
  std::vector<float> left;
  std::vector<float> right;
  double sample_rate = 32000.0;
  std::string id;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SpectroConfig {
  int win_length = 1024;   // samples; n_fft == win_length
  int hop = 320;           // samples
  int n_mels = 128;        // M
  double f_min = 50.0;     // Hz
  double f_max = 14000.0;  // Hz; the bandpass is realized by the mel band edges
  int target_frames = 1024;  // T
  double sample_rate = 32000.0;

  int n_fft() const { return win_length; }
  int n_bins() const { return win_length / 2 + 1; }
  void validate() const;
};

enum class FrontendMode { kDspast, kSpatialast };

inline const char* frontend_mode_name(FrontendMode m) {
  return m == FrontendMode::kDspast ? "dspast" : "spatialast";
}

// Fixed feature stacking order. SpatialAST mode uses the first four.
inline const std::vector<std::string>& feature_order() {
  static const std::vector<std::string> order = {
      "logmel_left", "logmel_right", "ipd_cos", "ipd_sin", "gcc", "ild"};
  return order;
}

struct FeatureStack {
  Tensor<float> data;  // C x T x M
  std::vector<std::string> features;
  SpectroConfig config;

  std::int64_t channels() const { return data.dim(0); }
  std::int64_t frames() const { return data.dim(1); }
  std::int64_t mels() const { return data.dim(2); }
};

// Complex spectrogram, frames x (n_fft/2 + 1).
struct Spectrogram {
  std::vector<std::complex<double>> v;
  std::int64_t frames = 0;
  std::int64_t bins = 0;

  std::complex<double>& at(std::int64_t t, std::int64_t k) { return v[static_cast<std::size_t>(t * bins + k)]; }
  const std::complex<double>& at(std::int64_t t, std::int64_t k) const { return v[static_cast<std::size_t>(t * bins + k)]; }
};

// Epsilon floors (see config docs): log(. + eps), PHAT |.| floor.
inline constexpr double kLogEps = 1e-10;
inline constexpr double kPhatEps = 1e-8;

// Center-aligned frames: the signal is reflection-padded by win/2 on both
// ends, giving floor(len/hop)+1 frames with a Hann window per frame.
Spectrogram stft(const std::vector<float>& channel, const SpectroConfig& cfg);

// M x n_bins triangular mel filters; columns outside [f_min, f_max] are zero.
Tensor<double> mel_filterbank(const SpectroConfig& cfg);

// Rows of `fb` rescaled to sum to one (used for the IPD projections).
Tensor<double> row_normalized(const Tensor<double>& fb);

// log(fb . |spec|^2 + eps); output frames x n_mels.
Tensor<double> log_mel(const Spectrogram& spec, const Tensor<double>& fb);

// IPD = angle(L) - angle(R); returns mel projections of cos/sin through the
// row-normalized bank, so identical channels map to exactly (1, 0).
// Bins where both spectra vanish are treated as zero phase difference.
struct IpdMaps {
  Tensor<double> cos_map;
  Tensor<double> sin_map;
};
IpdMaps ipd_features(const Spectrogram& spec_l, const Spectrogram& spec_r, const Tensor<double>& fb_row_norm);

// logmel_left - logmel_right.
Tensor<double> ild_feature(const Tensor<double>& logmel_l, const Tensor<double>& logmel_r);

// Per-frame GCC-PHAT, center n_lags lags kept, lag axis ordered
// [-n_lags/2, ..., -1, 0, ..., n_lags/2 - 1]. Delaying the right channel by
// d samples puts the per-frame argmax at lag +d.
Tensor<double> gcc_feature(const Spectrogram& spec_l, const Spectrogram& spec_r, int n_lags);

// Full front-end. The T axis is trimmed or padded to cfg.target_frames,
// padding each feature with its silence value (log eps for log-mels, 1/0
// for IPD cos/sin, 0 for ILD and GCC).
FeatureStack assemble_stack(const StereoClip& clip, const SpectroConfig& cfg, FrontendMode mode);

// Silence value a padded frame carries in feature channel `c`.
double feature_pad_value(int channel_index);

}  // namespace dspast
