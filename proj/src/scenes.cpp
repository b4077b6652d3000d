#include "dspast/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "dspast/fft.hpp"
#include "dspast/wav_io.hpp"

namespace dspast {

using nlohmann::json;
namespace fs = std::filesystem;

void SimConfig::validate() const {
  if (head_radius <= 0 || speed_of_sound <= 0) throw ConfigError("sim: head model constants must be positive");
  if (n_classes < 1) throw ConfigError("sim: n_classes must be >= 1");
  if (duration_s <= 0) throw ConfigError("sim: duration must be positive");
  if (!(0 < min_distance && min_distance < max_distance)) throw ConfigError("sim: bad distance range");
  if (sample_rate <= 0) throw ConfigError("sim: sample_rate must be positive");
  if (!class_weights.empty() && static_cast<int>(class_weights.size()) != n_classes)
    throw ConfigError("sim: class_weights size must match n_classes");
  if (rt60_s < 0) throw ConfigError("sim: rt60 must be nonnegative");
}

namespace {

// Class band center; log-spaced across [500, 5657] Hz regardless of K.
double class_center_hz(int class_id, int n_classes) {
  const double t = n_classes > 1 ? static_cast<double>(class_id) / (n_classes - 1) : 0.0;
  return 500.0 * std::pow(2.0, 3.5 * t);
}

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

// Gaussian band-pass applied in the frequency domain.
std::vector<double> bandpass_noise(std::size_t n, double fc, double rel_bw, double sample_rate, Prng& rng) {
  const std::size_t nfft = next_pow2(n);
  std::vector<cplx> buf(nfft);
  for (std::size_t i = 0; i < n; ++i) buf[i] = cplx(2.0 * rng.uniform() - 1.0, 0.0);
  fft_forward(buf);
  const double sigma = rel_bw * fc;
  for (std::size_t k = 0; k <= nfft / 2; ++k) {
    const double f = static_cast<double>(k) * sample_rate / static_cast<double>(nfft);
    const double g = std::exp(-0.5 * std::pow((f - fc) / sigma, 2.0));
    buf[k] *= g;
    if (k > 0 && k < nfft / 2) buf[nfft - k] = std::conj(buf[k]);
  }
  fft_inverse(buf);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = buf[i].real();
  return out;
}

void mono_normalize(std::vector<double>& x) {
  double e = 0;
  for (double v : x) e += v * v;
  if (e <= 0) throw InvalidInput("cannot normalize an all-zero signal");
  const double s = 1.0 / std::sqrt(e);
  for (double& v : x) v *= s;
}

}  // namespace

std::vector<double> synth_event(int class_id, double duration_s, double sample_rate,
                                std::uint64_t seed, int n_classes) {
  if (class_id < 0 || class_id >= n_classes) throw InvalidInput("synth_event: class_id out of range");
  if (duration_s <= 0) throw InvalidInput("synth_event: duration must be positive");
  const std::size_t n = static_cast<std::size_t>(duration_s * sample_rate);
  if (n == 0) throw InvalidInput("synth_event: duration too short for one sample");

  Prng rng(mix_seed(seed, "synth" + std::to_string(class_id)));
  const double fc = class_center_hz(class_id, n_classes);
  const int family = class_id % 4;
  std::vector<double> sig(n, 0.0);
  const double dt = 1.0 / sample_rate;

  switch (family) {
    case 0: {  // harmonic complex with slow AM
      const double f0 = fc / 8.0;
      const int n_harm = static_cast<int>(std::min(40.0, 13000.0 / f0));
      std::vector<double> phase(static_cast<std::size_t>(n_harm));
      for (auto& p : phase) p = rng.uniform(0.0, 2.0 * kPi);
      for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) * dt;
        double acc = 0;
        for (int h = 1; h <= n_harm; ++h)
          acc += std::pow(h, -0.6) * std::sin(2.0 * kPi * f0 * h * t + phase[static_cast<std::size_t>(h - 1)]);
        sig[i] = acc * (0.75 + 0.25 * std::sin(2.0 * kPi * 4.0 * t));
      }
      break;
    }
    case 1: {  // repeating linear chirp across the class band
      const double f_lo = fc / 2.0;
      const double f_hi = std::min(2.0 * fc, 13000.0);
      const double rep = 6.0;  // sweeps per second
      const double start = rng.uniform(0.0, 1.0 / rep);
      double phase = rng.uniform(0.0, 2.0 * kPi);
      for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) * dt + start;
        const double frac = t * rep - std::floor(t * rep);
        const double f = f_lo + (f_hi - f_lo) * frac;
        phase += 2.0 * kPi * f * dt;
        sig[i] = std::sin(phase);
      }
      break;
    }
    case 2: {  // gated noise band
      auto band = bandpass_noise(n, fc, 0.3, sample_rate, rng);
      const double gate_hz = 9.0;
      const double offset = rng.uniform(0.0, 1.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) * dt;
        const double g = std::fmod(t * gate_hz + offset, 1.0) < 0.45 ? 1.0 : 0.05;
        sig[i] = band[i] * g;
      }
      break;
    }
    default: {  // click train through a decaying resonator at fc
      const double rate = 30.0;
      const double tau = 0.008;
      const double offset = rng.uniform(0.0, 1.0 / rate);
      const std::size_t period = static_cast<std::size_t>(sample_rate / rate);
      const std::size_t ring = static_cast<std::size_t>(5.0 * tau * sample_rate);
      for (std::size_t start = static_cast<std::size_t>(offset * sample_rate); start < n; start += period) {
        const double amp = 0.8 + 0.4 * rng.uniform();
        for (std::size_t j = 0; j < ring && start + j < n; ++j) {
          const double t = static_cast<double>(j) * dt;
          sig[start + j] += amp * std::exp(-t / tau) * std::sin(2.0 * kPi * fc * t);
        }
      }
      break;
    }
  }

  // Broadband bed keeps high-frequency content in every class, so the
  // distance rolloff is observable regardless of the texture band.
  double texture_rms = 0;
  for (double v : sig) texture_rms += v * v;
  texture_rms = std::sqrt(texture_rms / static_cast<double>(n));
  const double bed = 0.25 * std::max(texture_rms, 1e-6);
  for (std::size_t i = 0; i < n; ++i) sig[i] += bed * (2.0 * rng.uniform() - 1.0);
  return sig;
}

double distance_cutoff_hz(double distance_m) {
  const double fc = 11000.0 * std::pow(2.0, -(distance_m - 0.5) / 1.3);
  return std::clamp(fc, 200.0, 15000.0);
}

StereoClip binauralize(const std::vector<double>& mono, double azimuth_deg, double elevation_deg,
                       double distance_m, const SimConfig& cfg) {
  cfg.validate();
  if (mono.empty()) throw InvalidInput("binauralize: empty signal");
  if (azimuth_deg < -180.0 || azimuth_deg > 180.0) throw InvalidInput("binauralize: |azimuth| <= 180 required");
  if (elevation_deg < -90.0 || elevation_deg > 90.0) throw InvalidInput("binauralize: |elevation| <= 90 required");
  if (distance_m <= 0) throw InvalidInput("binauralize: distance must be positive");

  const std::size_t n = mono.size();
  const std::size_t nfft = next_pow2(n + 2048);
  std::vector<cplx> spec(nfft);
  for (std::size_t i = 0; i < n; ++i) spec[i] = cplx(mono[i], 0.0);
  fft_forward(spec);

  const double theta = std::abs(deg2rad(azimuth_deg));
  // Woodworth spherical-head delay on the far ear; monotone in |azimuth|
  // over [0, 180], so the delay identifies the (unsigned) azimuth.
  const double itd = cfg.head_radius / cfg.speed_of_sound * (std::sin(theta) + theta);
  const double shadow = std::sin(theta);  // 0 at front/back, 1 at +-90
  const double shadow_gain = std::pow(10.0, -8.0 * shadow / 20.0);
  const double shadow_fc = 16000.0 - 13000.0 * shadow;
  const double dist_gain = 1.0 / std::max(distance_m, 0.1);
  const double dist_fc = distance_cutoff_hz(distance_m);
  const double tilt_exp = 0.55 * elevation_deg / 90.0;

  // az > 0: source on the right, left ear is contralateral (delayed and
  // shadowed). az < 0 mirrors.
  const bool left_far = azimuth_deg > 0.0;
  const double sr = cfg.sample_rate;

  Prng reverb_rng(mix_seed(cfg.seed, "reverb"));
  std::vector<cplx> reverb_l, reverb_r;
  if (cfg.rt60_s > 0) {
    // Minimal diffuse tail: per-ear noise with a -60 dB/rt60 envelope.
    const std::size_t tail = std::min(nfft, static_cast<std::size_t>(cfg.rt60_s * sr));
    auto make_tail = [&](std::vector<cplx>& out) {
      std::vector<cplx> rir(nfft);
      rir[0] = 1.0;
      for (std::size_t i = 1; i < tail; ++i) {
        const double env = std::pow(10.0, -3.0 * static_cast<double>(i) / (cfg.rt60_s * sr));
        rir[i] = 0.25 * env * (2.0 * reverb_rng.uniform() - 1.0);
      }
      fft_forward(rir);
      out = std::move(rir);
    };
    make_tail(reverb_l);
    make_tail(reverb_r);
  }

  auto render_ear = [&](bool is_left) {
    std::vector<cplx> ear(nfft);
    const bool contralateral = (is_left && left_far) || (!is_left && !left_far && azimuth_deg < 0.0);
    for (std::size_t k = 0; k <= nfft / 2; ++k) {
      const double f = static_cast<double>(k) * sr / static_cast<double>(nfft);
      double mag = dist_gain;
      mag /= std::sqrt(1.0 + std::pow(f / dist_fc, 2.0));
      mag *= std::pow(std::max(f, 100.0) / 1500.0, tilt_exp);
      double delay = 0.0;
      if (contralateral) {
        mag *= shadow_gain / std::sqrt(1.0 + std::pow(f / shadow_fc, 2.0));
        delay = itd;
      }
      const double phi = -2.0 * kPi * f * delay;
      cplx h = mag * cplx(std::cos(phi), std::sin(phi));
      if (cfg.rt60_s > 0) h *= (is_left ? reverb_l : reverb_r)[k];
      ear[k] = spec[k] * h;
      if (k > 0 && k < nfft / 2) ear[nfft - k] = std::conj(ear[k]);
    }
    fft_inverse(ear);
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(ear[i].real());
    return out;
  };

  StereoClip clip;
  clip.left = render_ear(true);
  clip.right = render_ear(false);
  clip.sample_rate = cfg.sample_rate;
  return clip;
}

StereoClip normalize_energy(const StereoClip& clip) {
  clip.validate();
  double e = 0;
  for (float v : clip.left) e += static_cast<double>(v) * v;
  for (float v : clip.right) e += static_cast<double>(v) * v;
  if (e <= 0) throw InvalidInput("normalize_energy: all-zero clip");
  const double s = 1.0 / std::sqrt(e);
  StereoClip out = clip;
  for (auto& v : out.left) v = static_cast<float>(v * s);
  for (auto& v : out.right) v = static_cast<float>(v * s);
  return out;
}

std::vector<ManifestEntry> generate_dataset(int n_clips, const SimConfig& cfg,
                                            const std::string& split_name, const std::string& out_dir,
                                            const DiscretizationSpec& spec) {
  cfg.validate();
  if (n_clips < 1) throw InvalidInput("generate_dataset: n_clips must be >= 1");

  const fs::path split_dir = fs::path(out_dir) / split_name;
  fs::create_directories(split_dir);

  // Cumulative class distribution.
  std::vector<double> cum;
  double total = 0;
  for (int k = 0; k < cfg.n_classes; ++k) {
    total += cfg.class_weights.empty() ? 1.0 : cfg.class_weights[static_cast<std::size_t>(k)];
    cum.push_back(total);
  }

  std::vector<ManifestEntry> entries;
  for (int idx = 0; idx < n_clips; ++idx) {
    const std::uint64_t clip_seed = mix_seed(cfg.seed, split_name + "#" + std::to_string(idx));
    Prng rng(clip_seed);

    SceneLabel label;
    const double u = rng.uniform() * total;
    int cls = 0;
    while (cls + 1 < cfg.n_classes && u >= cum[static_cast<std::size_t>(cls)]) ++cls;
    label.class_ids = {cls};
    label.azimuth = rng.uniform(-180.0, 180.0);
    label.elevation = rng.uniform(-90.0, 90.0);
    label.distance = rng.uniform(cfg.min_distance, cfg.max_distance);
    label.az_bin = bin_value(label.azimuth, spec, BinKind::kAzimuth);
    label.el_bin = bin_value(label.elevation, spec, BinKind::kElevation);
    label.dist_bin = bin_value(label.distance, spec, BinKind::kDistance);

    auto mono = synth_event(cls, cfg.duration_s, cfg.sample_rate, clip_seed, cfg.n_classes);
    mono_normalize(mono);  // unit source energy before rendering
    StereoClip clip = binauralize(mono, label.azimuth, label.elevation, label.distance, cfg);
    clip = normalize_energy(clip);

    char name[64];
    std::snprintf(name, sizeof(name), "clip_%05d.wav", idx);
    clip.id = split_name + "/" + name;
    clip.seed = clip_seed;
    write_wav((split_dir / name).string(), clip);

    ManifestEntry e;
    e.id = clip.id;
    e.path = name;
    e.label = label;
    e.split = split_name;
    e.seed = clip_seed;
    entries.push_back(std::move(e));
  }
  write_manifest((split_dir / "manifest.jsonl").string(), entries);
  return entries;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for writing: " + path);
  for (const auto& e : entries) {
    json j{{"id", e.id},
           {"path", e.path},
           {"class_ids", e.label.class_ids},
           {"azimuth", e.label.azimuth},
           {"elevation", e.label.elevation},
           {"distance", e.label.distance},
           {"az_bin", e.label.az_bin},
           {"el_bin", e.label.el_bin},
           {"dist_bin", e.label.dist_bin},
           {"split", e.split},
           {"seed", e.seed}};
    f << j.dump() << "\n";
  }
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open: " + path);
  std::vector<ManifestEntry> entries;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    ManifestEntry e;
    e.id = j.at("id").get<std::string>();
    e.path = j.at("path").get<std::string>();
    e.label.class_ids = j.at("class_ids").get<std::vector<int>>();
    e.label.azimuth = j.at("azimuth").get<double>();
    e.label.elevation = j.at("elevation").get<double>();
    e.label.distance = j.at("distance").get<double>();
    e.label.az_bin = j.at("az_bin").get<int>();
    e.label.el_bin = j.at("el_bin").get<int>();
    e.label.dist_bin = j.at("dist_bin").get<int>();
    e.split = j.at("split").get<std::string>();
    e.seed = j.at("seed").get<std::uint64_t>();
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace dspast
