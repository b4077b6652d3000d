#include "dspast/dsp.hpp"

#include <algorithm>
#include <cmath>

#include "dspast/fft.hpp"

namespace dspast {

void StereoClip::validate() const {
  if (left.empty() || left.size() != right.size())
    throw InvalidInput("clip '" + id + "': channels must be non-empty and equal length");
  if (sample_rate <= 0) throw InvalidInput("clip '" + id + "': sample_rate must be positive");
}

void SpectroConfig::validate() const {
  if (win_length <= 0 || !is_pow2(static_cast<std::size_t>(win_length)))
    throw ConfigError("win_length must be a positive power of two");
  if (hop <= 0) throw ConfigError("hop must be positive");
  if (n_mels < 1) throw ConfigError("n_mels must be >= 1");
  if (target_frames < 1) throw ConfigError("target_frames must be >= 1");
  if (sample_rate <= 0) throw ConfigError("sample_rate must be positive");
  if (!(0 <= f_min && f_min < f_max && f_max <= sample_rate / 2))
    throw ConfigError("band edges must satisfy 0 <= f_min < f_max <= sample_rate/2");
}

namespace {

std::vector<double> hann_window(int n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    w[static_cast<std::size_t>(i)] = 0.5 * (1.0 - std::cos(2.0 * kPi * i / n));
  return w;
}

// Reflection padding by win/2 on both ends (no repeated edge sample).
std::vector<double> reflect_pad(const std::vector<float>& x, int pad) {
  const std::int64_t n = static_cast<std::int64_t>(x.size());
  if (n < pad + 1) throw InvalidInput("signal too short for reflection padding");
  std::vector<double> out(static_cast<std::size_t>(n + 2 * pad));
  for (std::int64_t i = 0; i < pad; ++i) out[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(pad - i)];
  for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(pad + i)] = x[static_cast<std::size_t>(i)];
  for (std::int64_t i = 0; i < pad; ++i)
    out[static_cast<std::size_t>(pad + n + i)] = x[static_cast<std::size_t>(n - 2 - i)];
  return out;
}

double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

}  // namespace

Spectrogram stft(const std::vector<float>& channel, const SpectroConfig& cfg) {
  cfg.validate();
  if (channel.empty()) throw InvalidInput("stft: empty input");
  const int win = cfg.win_length;
  const int pad = win / 2;
  const std::vector<double> padded = reflect_pad(channel, pad);
  const std::vector<double> window = hann_window(win);

  const std::int64_t padded_len = static_cast<std::int64_t>(padded.size());
  const std::int64_t n_frames = (padded_len - win) / cfg.hop + 1;
  Spectrogram spec;
  spec.frames = n_frames;
  spec.bins = cfg.n_bins();
  spec.v.resize(static_cast<std::size_t>(n_frames * spec.bins));

  std::vector<cplx> buf(static_cast<std::size_t>(win));
  for (std::int64_t t = 0; t < n_frames; ++t) {
    const double* frame = padded.data() + t * cfg.hop;
    for (int i = 0; i < win; ++i)
      buf[static_cast<std::size_t>(i)] = cplx(frame[i] * window[static_cast<std::size_t>(i)], 0.0);
    fft_forward(buf);
    for (std::int64_t k = 0; k < spec.bins; ++k) spec.at(t, k) = buf[static_cast<std::size_t>(k)];
  }
  return spec;
}

Tensor<double> mel_filterbank(const SpectroConfig& cfg) {
  cfg.validate();
  const int n_bins = cfg.n_bins();
  const int m = cfg.n_mels;
  Tensor<double> fb({m, n_bins});

  const double mel_lo = hz_to_mel(cfg.f_min);
  const double mel_hi = hz_to_mel(cfg.f_max);
  std::vector<double> edges(static_cast<std::size_t>(m + 2));
  for (int i = 0; i < m + 2; ++i)
    edges[static_cast<std::size_t>(i)] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (m + 1));

  const double bin_hz = cfg.sample_rate / cfg.n_fft();
  for (int i = 0; i < m; ++i) {
    const double lo = edges[static_cast<std::size_t>(i)];
    const double mid = edges[static_cast<std::size_t>(i + 1)];
    const double hi = edges[static_cast<std::size_t>(i + 2)];
    bool any = false;
    for (int k = 0; k < n_bins; ++k) {
      const double f = k * bin_hz;
      double w = 0.0;
      if (f > lo && f < mid) w = (f - lo) / (mid - lo);
      else if (f >= mid && f < hi) w = (hi - f) / (hi - mid);
      if (w > 0) any = true;
      fb.v[static_cast<std::size_t>(i * n_bins + k)] = w;
    }
    if (!any)
      throw ConfigError("mel filter " + std::to_string(i) + " covers no FFT bin; increase n_fft or reduce n_mels");
  }
  return fb;
}

Tensor<double> row_normalized(const Tensor<double>& fb) {
  Tensor<double> out = fb;
  const std::int64_t rows = fb.dim(0), cols = fb.dim(1);
  for (std::int64_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::int64_t k = 0; k < cols; ++k) s += fb.v[static_cast<std::size_t>(i * cols + k)];
    const double inv = 1.0 / s;
    for (std::int64_t k = 0; k < cols; ++k) out.v[static_cast<std::size_t>(i * cols + k)] *= inv;
  }
  return out;
}

namespace {

// out(t, m) = sum_k fb(m, k) * grid(t, k); grid is frames x bins.
Tensor<double> project(const std::vector<double>& grid, std::int64_t frames, std::int64_t bins,
                       const Tensor<double>& fb) {
  if (fb.dim(1) != bins) throw ShapeError("mel projection: filterbank has wrong bin count");
  const std::int64_t m = fb.dim(0);
  Tensor<double> out({frames, m});
  gemm(grid.data(), fb.data(), out.data(), frames, bins, m, false, true);
  return out;
}

}  // namespace

Tensor<double> log_mel(const Spectrogram& spec, const Tensor<double>& fb) {
  std::vector<double> power(static_cast<std::size_t>(spec.frames * spec.bins));
  for (std::size_t i = 0; i < power.size(); ++i) power[i] = std::norm(spec.v[i]);
  Tensor<double> out = project(power, spec.frames, spec.bins, fb);
  for (auto& x : out.v) x = std::log(x + kLogEps);
  return out;
}

IpdMaps ipd_features(const Spectrogram& spec_l, const Spectrogram& spec_r, const Tensor<double>& fb_row_norm) {
  if (spec_l.frames != spec_r.frames || spec_l.bins != spec_r.bins)
    throw ShapeError("ipd: spectrogram shapes differ");
  const std::int64_t n = spec_l.frames * spec_l.bins;
  std::vector<double> cos_grid(static_cast<std::size_t>(n)), sin_grid(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const cplx cross = spec_l.v[static_cast<std::size_t>(i)] * std::conj(spec_r.v[static_cast<std::size_t>(i)]);
    const double mag = std::abs(cross);
    if (mag < 1e-20) {
      // Both spectra vanish: zero phase difference by convention.
      cos_grid[static_cast<std::size_t>(i)] = 1.0;
      sin_grid[static_cast<std::size_t>(i)] = 0.0;
    } else {
      cos_grid[static_cast<std::size_t>(i)] = cross.real() / mag;
      sin_grid[static_cast<std::size_t>(i)] = cross.imag() / mag;
    }
  }
  IpdMaps maps;
  maps.cos_map = project(cos_grid, spec_l.frames, spec_l.bins, fb_row_norm);
  maps.sin_map = project(sin_grid, spec_l.frames, spec_l.bins, fb_row_norm);
  return maps;
}

Tensor<double> ild_feature(const Tensor<double>& logmel_l, const Tensor<double>& logmel_r) {
  if (!logmel_l.same_shape(logmel_r)) throw ShapeError("ild: shape mismatch");
  Tensor<double> out = logmel_l;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] -= logmel_r.v[i];
  return out;
}

Tensor<double> gcc_feature(const Spectrogram& spec_l, const Spectrogram& spec_r, int n_lags) {
  if (spec_l.frames != spec_r.frames || spec_l.bins != spec_r.bins)
    throw ShapeError("gcc: spectrogram shapes differ");
  const int n_fft = static_cast<int>(2 * (spec_l.bins - 1));
  if (n_lags <= 0 || n_lags > n_fft) throw InvalidInput("gcc: n_lags must be in (0, n_fft]");

  Tensor<double> out({spec_l.frames, n_lags});
  const int half = n_lags / 2;
  std::vector<cplx> full(static_cast<std::size_t>(n_fft));
  for (std::int64_t t = 0; t < spec_l.frames; ++t) {
    // Whitened cross-power spectrum, conj(L)*R, so that a delayed right
    // channel peaks at a positive lag.
    for (std::int64_t k = 0; k < spec_l.bins; ++k) {
      cplx c = std::conj(spec_l.at(t, k)) * spec_r.at(t, k);
      const double mag = std::abs(c);
      c /= std::max(mag, kPhatEps);
      full[static_cast<std::size_t>(k)] = c;
      if (k > 0 && k < spec_l.bins - 1)
        full[static_cast<std::size_t>(n_fft - k)] = std::conj(c);
    }
    fft_inverse(full);
    for (int j = 0; j < n_lags; ++j) {
      const int lag = j - half;
      const int idx = lag >= 0 ? lag : n_fft + lag;
      out.v[static_cast<std::size_t>(t * n_lags + j)] = full[static_cast<std::size_t>(idx)].real();
    }
  }
  return out;
}

double feature_pad_value(int channel_index) {
  switch (channel_index) {
    case 0: case 1: return std::log(kLogEps);  // log-mels
    case 2: return 1.0;                        // ipd cos
    case 3: return 0.0;                        // ipd sin
    case 4: return 0.0;                        // gcc
    case 5: return 0.0;                        // ild
    default: throw InvalidInput("feature_pad_value: bad channel index");
  }
}

FeatureStack assemble_stack(const StereoClip& clip, const SpectroConfig& cfg, FrontendMode mode) {
  clip.validate();
  cfg.validate();
  if (clip.sample_rate != cfg.sample_rate)
    throw InvalidInput("clip '" + clip.id + "' sample rate does not match config (resampling is out of scope)");

  const Spectrogram spec_l = stft(clip.left, cfg);
  const Spectrogram spec_r = stft(clip.right, cfg);
  const Tensor<double> fb = mel_filterbank(cfg);
  const Tensor<double> fb_norm = row_normalized(fb);

  const Tensor<double> lm_l = log_mel(spec_l, fb);
  const Tensor<double> lm_r = log_mel(spec_r, fb);
  const IpdMaps ipd = ipd_features(spec_l, spec_r, fb_norm);

  std::vector<const Tensor<double>*> maps = {&lm_l, &lm_r, &ipd.cos_map, &ipd.sin_map};
  Tensor<double> gcc, ild;
  if (mode == FrontendMode::kDspast) {
    gcc = gcc_feature(spec_l, spec_r, cfg.n_mels);
    ild = ild_feature(lm_l, lm_r);
    maps.push_back(&gcc);
    maps.push_back(&ild);
  }

  const std::int64_t c = static_cast<std::int64_t>(maps.size());
  const std::int64_t t_out = cfg.target_frames;
  const std::int64_t m = cfg.n_mels;
  const std::int64_t t_real = std::min<std::int64_t>(spec_l.frames, t_out);

  FeatureStack stack;
  stack.config = cfg;
  stack.features.assign(feature_order().begin(), feature_order().begin() + c);
  stack.data = Tensor<float>({c, t_out, m});
  for (std::int64_t ci = 0; ci < c; ++ci) {
    const Tensor<double>& map = *maps[static_cast<std::size_t>(ci)];
    const float pad_val = static_cast<float>(feature_pad_value(static_cast<int>(ci)));
    float* dst = stack.data.data() + ci * t_out * m;
    for (std::int64_t t = 0; t < t_real; ++t)
      for (std::int64_t j = 0; j < m; ++j)
        dst[t * m + j] = static_cast<float>(map.v[static_cast<std::size_t>(t * m + j)]);
    for (std::int64_t t = t_real; t < t_out; ++t)
      for (std::int64_t j = 0; j < m; ++j) dst[t * m + j] = pad_val;
  }
  for (float x : stack.data.v)
    if (!std::isfinite(x)) throw InvalidInput("feature stack contains non-finite values");
  return stack;
}

}  // namespace dspast
