#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "kws/array.hpp"
#include "kws/audio.hpp"
#include "kws/io.hpp"

namespace kws::scene {

// Delays x by `delay` samples (negative advances) with a Hann-windowed sinc
// of the given half width. Integer delays (within 1e-9) are exact shifts. Output has the
// input's length.
std::vector<double> fractional_delay(std::span<const double> x, double delay, int half_width = 32);

// Two harmonic tone sweeps with formant-shaped spectra. `template_seed`
// fixes the word; `variation` draws per-utterance pitch, tempo and timbre.
std::vector<double> keyword_utterance(std::uint64_t template_seed, Rng& variation, int rate = 16000);

// Near-miss: the keyword with its second syllable detuned (formants and pitch
// glide moved by 15-30%).
std::vector<double> near_miss_utterance(std::uint64_t template_seed, std::uint64_t other_seed, Rng& variation,
                                        int rate = 16000);

enum class InterfererKind { Babble, Confuser, NearMiss };

struct Interferer {
  InterfererKind kind = InterfererKind::Babble;
  double azimuth_deg = 45.0;
  double distance_m = 3.0;
  double sir_db = 10.0;  // keyword power over interferer power at mic 0
};

struct Reverb {
  double rt60_s = 0.0;           // 0 disables the tail
  double tail_level_db = -6.0;   // tail energy relative to a 1 m direct path
  double tail_onset_ms = 5.0;
};

struct SceneConfig {
  std::uint64_t seed = 0;
  int label = 1;
  std::uint64_t keyword_seed = 20240601;
  double source_azimuth_deg = 90.0;
  double source_distance_m = 3.0;
  std::vector<Interferer> interferers;
  bool diffuse_noise = true;
  double noise_corner_hz = 800.0;  // low-pass corner of the speech-shaped noise
  double snr_db = 10.0;
  Reverb reverb;
  array::ArrayGeometry geometry = array::ArrayGeometry::uniform_linear(6);
  double duration_s = 2.0;
  int sample_rate_hz = 16000;

  // Throws ConfigError on non-finite SNR, azimuths outside [0, 180],
  // non-positive duration or distance, or a label other than 0/1.
  void validate() const;
};

struct Scene {
  Waveform mixture;
  Waveform clean;          // direct-path keyword at each mic; silent for negatives
  Waveform keyword_image;  // keyword including its reverb; silent for negatives
  int label = 0;
  std::size_t keyword_onset = 0;
  std::size_t keyword_length = 0;
};

// Plane-wave propagation with fractional delays, 1/r attenuation, optional
// independent per-mic exponential tails, directional interferers and
// spatially white speech-shaped noise. SNR is the keyword's mean power over
// its active span at mic 0 against the noise's mean power at mic 0. All
// levels are derived from the keyword even when it is absent, so a negative
// equals the positive with the same seed minus keyword_image.
Scene synthesize_scene(const SceneConfig& cfg);

// Ranges from which corpus scenes are drawn, per recording field.
struct FieldRanges {
  double snr_min_db, snr_max_db;
  double distance_min_m, distance_max_m;
  double rt60_min_s, rt60_max_s;
};

struct CorpusConfig {
  std::uint64_t keyword_seed = 20240601;
  FieldRanges near{20.0, 30.0, 0.3, 0.5, 0.0, 0.0};
  FieldRanges mid{10.0, 20.0, 1.0, 1.5, 0.2, 0.4};
  FieldRanges far{0.0, 10.0, 3.0, 5.0, 0.3, 0.6};
  double source_azimuth_min_deg = 30.0;
  double source_azimuth_max_deg = 150.0;
  double reverb_tail_level_db = -6.0;
  double interferer_probability = 0.7;
  double confuser_probability = 0.5;  // per interferer
  double near_miss_probability = 0.0;  // per confuser
  double sir_min_db = 5.0;
  double sir_max_db = 15.0;
  double positive_fraction = 0.3;
  double noise_corner_hz = 800.0;
  double duration_s = 2.0;
  int sample_rate_hz = 16000;
  array::ArrayGeometry geometry = array::ArrayGeometry::uniform_linear(6);
};

// Far-field corpus for the end-to-end benchmark: every interferer is a
// near-miss of the keyword at SIR -5..5 dB and the noise reaches 2.5 kHz.
CorpusConfig benchmark_corpus();

SceneConfig draw_scene_config(const CorpusConfig& corpus, io::Field field, std::uint64_t seed, int label);

// Label drawn from positive_fraction with the scene seed.
int draw_label(const CorpusConfig& corpus, std::uint64_t seed);

// Synthesizes and keeps the first field_channels(field) microphones.
Scene synthesize_field_scene(const CorpusConfig& corpus, io::Field field, std::uint64_t seed);

// Independent sub-stream of a seed, so components never share draws.
Rng substream(std::uint64_t seed, std::uint64_t stream);

}  // namespace kws::scene
