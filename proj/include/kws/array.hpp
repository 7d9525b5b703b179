#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <vector>

#include "kws/audio.hpp"
#include "kws/dsp.hpp"

namespace kws::array {

using CVector = Eigen::VectorXcd;
using CMatrix = Eigen::MatrixXcd;

// One spectrogram per microphone, all with identical extents.
using MultiStft = std::vector<dsp::Spectrogram>;

// 1-D linear array; positions in meters along the array axis.
struct ArrayGeometry {
  std::vector<double> positions_m;
  double speed_of_sound = 343.0;

  static ArrayGeometry uniform_linear(std::size_t elements, double spacing_m = 0.04);

  std::size_t size() const noexcept { return positions_m.size(); }
  // Throws ContractError unless there are >= 2 strictly increasing positions.
  void validate() const;
};

// Far-field plane-wave model: element k gets phase
// -2*pi*f*(p_k - p_0)*cos(theta)/c. Azimuth is in degrees from the array
// axis, in [0, 180].
CVector steering_vector(double azimuth_deg, const ArrayGeometry& geom, double freq_hz,
                        int sample_rate_hz = 16000);

// Sample delay of element k relative to element 0 for a plane wave from
// `azimuth_deg`; consistent with steering_vector.
std::vector<double> plane_wave_delays(double azimuth_deg, const ArrayGeometry& geom,
                                      int sample_rate_hz);

// Speech-presence weights per (frame, bin); noise = 1 - speech.
struct TFMask {
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<double> speech;
  std::vector<double> noise;

  TFMask() = default;
  TFMask(std::size_t t, std::size_t f, double speech_fill = 0.0);

  double speech_at(std::size_t t, std::size_t f) const { return speech[t * bins + f]; }
  double noise_at(std::size_t t, std::size_t f) const { return noise[t * bins + f]; }
  void set(std::size_t t, std::size_t f, double s);

  // Throws ContractError unless entries lie in [0, 1] and pairs sum to 1.
  void validate() const;
};

// Per-cell speech fraction |S|^2 / (|S|^2 + |N|^2), powers summed over mics.
TFMask oracle_mask(const MultiStft& speech, const MultiStft& noise);

// Tracks a per-bin noise floor as a low percentile of the mic-averaged power
// over frames; speech = snr / (snr + 1) with snr = max(P / floor - 1, 0).
TFMask noise_floor_mask(const MultiStft& mix, double percentile = 0.1);

enum class MaskMode { Oracle, NoiseFloor };

struct Covariances {
  std::vector<CMatrix> speech;  // one per bin
  std::vector<CMatrix> noise;   // diagonally loaded
  std::vector<bool> speech_degenerate;
  std::vector<bool> noise_degenerate;
};

inline constexpr double kDiagonalLoading = 1e-6;

// R = sum_t m(t,f) x x^H / sum_t m(t,f) per bin. A bin whose mask sums to
// zero falls back to the identity and is flagged. The noise covariance gets
// loading * trace(R) / mics added to its diagonal.
Covariances estimate_covariances(const MultiStft& stft, const TFMask& mask,
                                 double loading = kDiagonalLoading);

// w = R^-1 d / (d^H R^-1 d). Throws NumericError naming `bin` when the
// solve fails even after extra loading.
CVector mvdr_weights(const CMatrix& noise_cov, const CVector& steering, std::size_t bin = 0);

// y(t,f) = w_f^H x(t,f)
dsp::Spectrogram apply_beamformer(const MultiStft& stft, const std::vector<CVector>& weights);

struct WpeConfig {
  std::size_t taps = 10;
  std::size_t delay = 3;
  std::size_t iterations = 3;
  // Source power estimates are floored at this fraction of the mean power.
  double power_floor = 1e-6;
};

struct WpeStats {
  double filter_energy = 0.0;  // sum of |G|^2 over bins after the last iteration
  std::size_t regularized_bins = 0;
};

// Multichannel long-term linear prediction per bin. Each iteration estimates
// the source power from the current output, solves the weighted normal
// equations for filters over frames [t - delay - taps + 1, t - delay] and
// subtracts the prediction. Singular systems are regularized, never fatal.
MultiStft wpe_dereverb(const MultiStft& stft, const WpeConfig& cfg = {},
                       WpeStats* stats = nullptr);

struct FrontendConfig {
  ArrayGeometry geometry = ArrayGeometry::uniform_linear(6);
  std::size_t win_length = 512;
  std::size_t hop = 128;
  WpeConfig wpe;
  double mask_percentile = 0.1;
  std::vector<double> looks_deg = {10.0, 90.0, 170.0};
};

MultiStft analyze(const Waveform& w, const FrontendConfig& cfg = {});
Waveform synthesize(const MultiStft& stft, std::size_t length, int sample_rate_hz);

// Time-domain WPE on every channel. Zero iterations return the input unchanged.
Waveform wpe_waveform(const Waveform& w, const FrontendConfig& cfg = {});

// One MVDR beam per look direction, noise statistics from a noise-floor
// mask (or `mask` when given). No WPE.
Waveform beamform_waveform(const Waveform& w, const FrontendConfig& cfg = {},
                           const TFMask* mask = nullptr);

// WPE, then MVDR beams at the configured looks, plus raw channel 0 appended
// unchanged. Requires exactly as many channels as array elements.
Waveform multi_look_stack(const Waveform& w, const FrontendConfig& cfg = {},
                          const TFMask* mask = nullptr);

}  // namespace kws::array
