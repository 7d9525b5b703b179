#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <span>
#include <vector>

#include "kws/audio.hpp"

namespace kws::dsp {

using Complex = std::complex<double>;

inline const double kLogFloor = std::log(1e-10);

// Real-input FFT of a fixed power-of-two size, backed by FFTW. Instances
// are immutable after construction and safe to share across threads.
class RealFft {
 public:
  explicit RealFft(std::size_t n);
  ~RealFft();
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  std::size_t size() const noexcept { return n_; }
  std::size_t bins() const noexcept { return n_ / 2 + 1; }

  // out.size() == bins()
  void forward(std::span<const double> in, std::span<Complex> out) const;
  // Unnormalized inverse: forward followed by inverse scales by size().
  void inverse(std::span<const Complex> in, std::span<double> out) const;

 private:
  std::size_t n_;
  void* forward_plan_;
  void* inverse_plan_;
};

// Shared plan cache keyed by size.
const RealFft& real_fft(std::size_t n);

std::size_t next_pow2(std::size_t n);

// Linear convolution via FFT; output length x.size() + h.size() - 1.
std::vector<double> fft_convolve(std::span<const double> x, std::span<const double> h);

enum class Window { Hann, Rectangular };

// Periodic window of the given length.
std::vector<double> make_window(Window kind, std::size_t length);

// One channel's STFT, row-major [frame][bin].
struct Spectrogram {
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::size_t n_fft = 0;
  std::size_t win_length = 0;
  std::size_t hop = 0;
  std::vector<Complex> data;

  Complex& at(std::size_t t, std::size_t f) { return data[t * bins + f]; }
  const Complex& at(std::size_t t, std::size_t f) const { return data[t * bins + f]; }
};

// Frames = 1 + floor((len - win) / hop), no centering. FFT size is the next
// power of two >= win_length; the windowed frame is zero-padded into it.
Spectrogram stft_channel(std::span<const double> x, std::size_t win_length, std::size_t hop,
                         Window window = Window::Hann);

// Weighted overlap-add inverse (synthesis window = analysis window,
// normalized by the summed squared window). Samples never covered by a
// frame are zero.
std::vector<double> istft_channel(const Spectrogram& spec, std::size_t length,
                                  Window window = Window::Hann);

struct StftConfig {
  double win_ms = 32.0;
  double hop_ms = 10.0;
  Window window = Window::Hann;
};

std::size_t ms_to_samples(double ms, int sample_rate_hz);

// Per-channel STFT; throws ContractError when the waveform is shorter than
// one window.
std::vector<Spectrogram> stft(const Waveform& w, const StftConfig& cfg = {});

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Triangular filters with centres equally spaced on the mel scale from 0 Hz
// to Nyquist; weights are triangles in the mel domain.
class MelFilterbank {
 public:
  MelFilterbank(std::size_t n_mels, int sample_rate_hz, std::size_t n_fft);

  std::size_t n_mels() const noexcept { return n_mels_; }
  std::size_t n_bins() const noexcept { return n_bins_; }
  double weight(std::size_t mel, std::size_t bin) const { return matrix_[mel * n_bins_ + bin]; }
  // n_mels + 2 breakpoints in Hz: lower edge, centres, upper edge.
  const std::vector<double>& breakpoints_hz() const noexcept { return breakpoints_; }

  // power.size() == n_bins(); out.size() == n_mels()
  void apply(std::span<const double> power, std::span<double> out) const;

 private:
  std::size_t n_mels_, n_bins_;
  std::vector<double> matrix_;
  std::vector<double> breakpoints_;
  std::vector<std::pair<std::size_t, std::size_t>> support_;  // [first, last) per row
};

struct FBankConfig {
  int sample_rate_hz = 16000;
  std::size_t n_mels = 40;
  double win_ms = 32.0;
  double hop_ms = 10.0;
  double duration_s = 2.0;

  std::size_t num_samples() const;
  std::size_t win_length() const;
  std::size_t hop_length() const;
  std::size_t num_frames() const;
};

// Log-Mel energies, [channel][frame][mel] row-major.
struct FBankFeature {
  std::size_t channels = 0;
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<float> values;

  FBankFeature() = default;
  FBankFeature(std::size_t c, std::size_t t, std::size_t m, float fill)
      : channels(c), frames(t), bins(m), values(c * t * m, fill) {}

  float& at(std::size_t c, std::size_t t, std::size_t m) {
    return values[(c * frames + t) * bins + m];
  }
  float at(std::size_t c, std::size_t t, std::size_t m) const {
    return values[(c * frames + t) * bins + m];
  }
};

// Right-pads with zeros (or trims) to the configured duration, then
// STFT -> power -> mel -> log with floor kLogFloor.
FBankFeature log_mel_fbank(const Waveform& w, const FBankConfig& cfg = {});

// Delays every channel by `shift` samples (advances when negative),
// zero-filling the vacated end.
Waveform time_shift(const Waveform& w, long shift);

struct ShiftDraw {
  Waveform waveform;
  long shift_samples = 0;
};

// One uniform draw in [-max_ms, +max_ms], applied identically to all channels.
ShiftDraw random_time_shift(const Waveform& w, Rng& rng, double max_ms = 100.0);

// Frame-quantized shift of a feature cube; vacated frames take kLogFloor.
FBankFeature shift_frames(const FBankFeature& f, long frames);

struct SpecAugmentDraw {
  std::size_t freq_start = 0, freq_width = 0;
  std::size_t time_start = 0, time_width = 0;
};

// One frequency mask (width uniform in [0, freq_param]) and one time mask
// (width uniform in [0, time_param]), shared across channels; masked cells
// are set to kLogFloor.
FBankFeature spec_augment(const FBankFeature& f, Rng& rng, std::size_t freq_param = 25,
                          std::size_t time_param = 7, SpecAugmentDraw* draw = nullptr);

}  // namespace kws::dsp
