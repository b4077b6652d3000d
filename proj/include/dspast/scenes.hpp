#pragma once

// Deterministic synthetic binaural scene generator. Each clip carries one
// sound event rendered at a labeled azimuth/elevation/distance:
//   - azimuth   -> interaural delay (spherical-head model) + head shadow
//   - elevation -> spectral tilt (synthetic, intentionally learnable)
//   - distance  -> 1/d gain and a low-pass whose cutoff falls with distance
// Emitted clips are energy-normalized, so distance must be read from the
// spectrum, mirroring how the event level itself is uninformative.

#include <string>
#include <vector>

#include "dspast/dsp.hpp"
#include "dspast/objectives.hpp"

namespace dspast {

struct SimConfig {
  double head_radius = 0.0875;   // meters
  double speed_of_sound = 343.0; // m/s
  int n_classes = 8;
  double duration_s = 1.0;
  double min_distance = 0.5;  // meters
  double max_distance = 5.0;
  double sample_rate = 32000.0;
  std::uint64_t seed = 0;
  // Per-class sampling weights; empty = uniform.
  std::vector<double> class_weights;
  // Optional exponential-decay reverb tail; 0 disables it.
  double rt60_s = 0.0;
  // Documented floor on pairwise spectral-centroid separation between class
  // signal families (verified by the centroid oracle in the tests).
  double class_separation_floor_hz = 60.0;

  void validate() const;
};

struct SceneLabel {
  std::vector<int> class_ids;  // single source: one entry
  double azimuth = 0.0;        // degrees in [-180, 180)
  double elevation = 0.0;      // degrees in [-90, 90)
  double distance = 1.0;       // meters > 0
  int az_bin = 0, el_bin = 0, dist_bin = 0;
};

struct ManifestEntry {
  std::string id;
  std::string path;  // relative to the manifest directory
  SceneLabel label;
  std::string split;
  std::uint64_t seed = 0;
};

// Class-distinct deterministic mono signal (unit peak scale is arbitrary;
// callers normalize). Textures: harmonic complex / repeating chirp / gated
// noise band / resonant click train, each centered on a class band.
std::vector<double> synth_event(int class_id, double duration_s, double sample_rate,
                                std::uint64_t seed, int n_classes);

// Frequency-domain binaural rendering of a mono signal.
StereoClip binauralize(const std::vector<double>& mono, double azimuth_deg, double elevation_deg,
                       double distance_m, const SimConfig& cfg);

// Rescales so that sum(left^2 + right^2) == 1.
StereoClip normalize_energy(const StereoClip& clip);

// Distance low-pass cutoff (Hz); log-linear in distance.
double distance_cutoff_hz(double distance_m);

// Samples labels (uniform angles/distance; classes per cfg.class_weights),
// renders and writes WAVs plus a JSONL manifest under out_dir/split_name.
std::vector<ManifestEntry> generate_dataset(int n_clips, const SimConfig& cfg,
                                            const std::string& split_name, const std::string& out_dir,
                                            const DiscretizationSpec& spec = DiscretizationSpec{});

// Manifest I/O (JSONL, one entry per line).
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::string& path);

}  // namespace dspast
