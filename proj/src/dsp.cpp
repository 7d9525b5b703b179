#include "kws/dsp.hpp"

#include <fftw3.h>

#include <algorithm>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <string>

#include "kws/error.hpp"

namespace kws {

void Waveform::validate() const {
  if (sample_rate_hz <= 0) {
    throw ContractError("dsp-frontend", "waveform: sample rate must be positive, got " +
                                            std::to_string(sample_rate_hz));
  }
  for (const auto& ch : samples) {
    if (ch.size() != length()) {
      throw ContractError("dsp-frontend", "waveform: channels have unequal lengths");
    }
  }
}

double energy(const std::vector<double>& x) {
  double e = 0;
  for (double v : x) e += v * v;
  return e;
}

}  // namespace kws

namespace kws::dsp {

namespace {
const char* kModule = "dsp-frontend";
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace

RealFft::RealFft(std::size_t n) : n_(n) {
  if (n < 2 || (n & (n - 1)) != 0) {
    throw ConfigError(kModule, "fft: size must be a power of two >= 2, got " + std::to_string(n));
  }
  std::lock_guard<std::mutex> lock(planner_mutex());
  auto* in = fftw_alloc_real(n);
  auto* out = fftw_alloc_complex(n / 2 + 1);
  const int size = static_cast<int>(n);
  forward_plan_ = fftw_plan_dft_r2c_1d(size, in, out, FFTW_ESTIMATE | FFTW_UNALIGNED);
  inverse_plan_ = fftw_plan_dft_c2r_1d(size, out, in, FFTW_ESTIMATE | FFTW_UNALIGNED);
  fftw_free(in);
  fftw_free(out);
}

RealFft::~RealFft() {
  std::lock_guard<std::mutex> lock(planner_mutex());
  fftw_destroy_plan(static_cast<fftw_plan>(forward_plan_));
  fftw_destroy_plan(static_cast<fftw_plan>(inverse_plan_));
}

void RealFft::forward(std::span<const double> in, std::span<Complex> out) const {
  std::vector<double> buf(in.begin(), in.end());
  buf.resize(n_, 0.0);
  fftw_execute_dft_r2c(static_cast<fftw_plan>(forward_plan_), buf.data(),
                       reinterpret_cast<fftw_complex*>(out.data()));
}

void RealFft::inverse(std::span<const Complex> in, std::span<double> out) const {
  // c2r destroys its input.
  std::vector<Complex> buf(in.begin(), in.end());
  fftw_execute_dft_c2r(static_cast<fftw_plan>(inverse_plan_),
                       reinterpret_cast<fftw_complex*>(buf.data()), out.data());
}

const RealFft& real_fft(std::size_t n) {
  static std::mutex m;
  static std::map<std::size_t, std::unique_ptr<RealFft>> cache;
  std::lock_guard<std::mutex> lock(m);
  auto& slot = cache[n];
  if (!slot) slot = std::make_unique<RealFft>(n);
  return *slot;
}

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

std::vector<double> fft_convolve(std::span<const double> x, std::span<const double> h) {
  if (x.empty() || h.empty()) return {};
  const std::size_t len = x.size() + h.size() - 1;
  const auto& fft = real_fft(std::max<std::size_t>(2, next_pow2(len)));
  std::vector<Complex> fx(fft.bins()), fh(fft.bins());
  fft.forward(x, fx);
  fft.forward(h, fh);
  for (std::size_t k = 0; k < fx.size(); ++k) fx[k] *= fh[k];
  std::vector<double> y(fft.size());
  fft.inverse(fx, y);
  y.resize(len);
  const double scale = 1.0 / static_cast<double>(fft.size());
  for (double& v : y) v *= scale;
  return y;
}

std::vector<double> make_window(Window kind, std::size_t length) {
  std::vector<double> w(length, 1.0);
  if (kind == Window::Hann) {
    for (std::size_t i = 0; i < length; ++i) {
      w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                  static_cast<double>(length));
    }
  }
  return w;
}

Spectrogram stft_channel(std::span<const double> x, std::size_t win_length, std::size_t hop,
                         Window window) {
  if (win_length == 0 || hop == 0) throw ConfigError(kModule, "stft: window and hop must be > 0");
  if (x.size() < win_length) {
    throw ContractError(kModule, "stft: input of " + std::to_string(x.size()) +
                                     " samples is shorter than one window (" +
                                     std::to_string(win_length) + "); pad first");
  }
  Spectrogram s;
  s.win_length = win_length;
  s.hop = hop;
  s.n_fft = next_pow2(win_length);
  s.bins = s.n_fft / 2 + 1;
  s.frames = 1 + (x.size() - win_length) / hop;
  s.data.resize(s.frames * s.bins);
  const auto win = make_window(window, win_length);
  const auto& fft = real_fft(s.n_fft);
  std::vector<double> frame(s.n_fft, 0.0);
  for (std::size_t t = 0; t < s.frames; ++t) {
    const double* src = x.data() + t * hop;
    for (std::size_t i = 0; i < win_length; ++i) frame[i] = src[i] * win[i];
    fft.forward(frame, std::span<Complex>(s.data.data() + t * s.bins, s.bins));
  }
  return s;
}

std::vector<double> istft_channel(const Spectrogram& spec, std::size_t length, Window window) {
  std::vector<double> out(length, 0.0);
  std::vector<double> norm(length, 0.0);
  const auto win = make_window(window, spec.win_length);
  const auto& fft = real_fft(spec.n_fft);
  std::vector<double> frame(spec.n_fft);
  const double inv_n = 1.0 / static_cast<double>(spec.n_fft);
  for (std::size_t t = 0; t < spec.frames; ++t) {
    fft.inverse(std::span<const Complex>(spec.data.data() + t * spec.bins, spec.bins), frame);
    const std::size_t start = t * spec.hop;
    for (std::size_t i = 0; i < spec.win_length && start + i < length; ++i) {
      out[start + i] += frame[i] * inv_n * win[i];
      norm[start + i] += win[i] * win[i];
    }
  }
  for (std::size_t i = 0; i < length; ++i) {
    if (norm[i] > 1e-12) out[i] /= norm[i];
  }
  return out;
}

std::size_t ms_to_samples(double ms, int sample_rate_hz) {
  return static_cast<std::size_t>(std::lround(ms * sample_rate_hz / 1000.0));
}

std::vector<Spectrogram> stft(const Waveform& w, const StftConfig& cfg) {
  w.validate();
  const std::size_t win = ms_to_samples(cfg.win_ms, w.sample_rate_hz);
  const std::size_t hop = ms_to_samples(cfg.hop_ms, w.sample_rate_hz);
  std::vector<Spectrogram> out;
  out.reserve(w.channels());
  for (const auto& ch : w.samples) out.push_back(stft_channel(ch, win, hop, cfg.window));
  return out;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MelFilterbank::MelFilterbank(std::size_t n_mels, int sample_rate_hz, std::size_t n_fft)
    : n_mels_(n_mels), n_bins_(n_fft / 2 + 1) {
  if (n_mels < 2) throw ConfigError(kModule, "mel: need at least 2 filters");
  if (sample_rate_hz <= 0 || n_fft < 2) throw ConfigError(kModule, "mel: invalid rate or FFT size");
  const double nyquist = sample_rate_hz / 2.0;
  const double mel_hi = hz_to_mel(nyquist);
  std::vector<double> mel_pts(n_mels + 2);
  breakpoints_.resize(n_mels + 2);
  for (std::size_t i = 0; i < n_mels + 2; ++i) {
    mel_pts[i] = mel_hi * static_cast<double>(i) / static_cast<double>(n_mels + 1);
    breakpoints_[i] = mel_to_hz(mel_pts[i]);
  }
  matrix_.assign(n_mels * n_bins_, 0.0);
  support_.resize(n_mels);
  std::size_t prev_peak = 0;
  for (std::size_t m = 0; m < n_mels; ++m) {
    const double lo = mel_pts[m], mid = mel_pts[m + 1], hi = mel_pts[m + 2];
    std::size_t first = n_bins_, last = 0, peak = 0;
    double peak_w = 0.0;
    for (std::size_t k = 0; k < n_bins_; ++k) {
      const double f = static_cast<double>(k) * sample_rate_hz / static_cast<double>(n_fft);
      const double mel = hz_to_mel(f);
      double w = 0.0;
      if (mel > lo && mel <= mid) {
        w = (mel - lo) / (mid - lo);
      } else if (mel > mid && mel < hi) {
        w = (hi - mel) / (hi - mid);
      }
      if (w > 0.0) {
        matrix_[m * n_bins_ + k] = w;
        first = std::min(first, k);
        last = k + 1;
        if (w > peak_w) {
          peak_w = w;
          peak = k;
        }
      }
    }
    if (peak_w <= 0.0 || (m > 0 && peak <= prev_peak)) {
      throw ConfigError(kModule, "mel: FFT size " + std::to_string(n_fft) +
                                     " too small to separate " + std::to_string(n_mels) +
                                     " filters at " + std::to_string(sample_rate_hz) + " Hz");
    }
    prev_peak = peak;
    support_[m] = {first, last};
  }
}

void MelFilterbank::apply(std::span<const double> power, std::span<double> out) const {
  for (std::size_t m = 0; m < n_mels_; ++m) {
    double acc = 0.0;
    const double* row = matrix_.data() + m * n_bins_;
    for (std::size_t k = support_[m].first; k < support_[m].second; ++k) acc += row[k] * power[k];
    out[m] = acc;
  }
}

std::size_t FBankConfig::num_samples() const {
  return static_cast<std::size_t>(std::lround(duration_s * sample_rate_hz));
}
std::size_t FBankConfig::win_length() const { return ms_to_samples(win_ms, sample_rate_hz); }
std::size_t FBankConfig::hop_length() const { return ms_to_samples(hop_ms, sample_rate_hz); }
std::size_t FBankConfig::num_frames() const {
  return 1 + (num_samples() - win_length()) / hop_length();
}

namespace {

const MelFilterbank& cached_filterbank(std::size_t n_mels, int rate, std::size_t n_fft) {
  static std::mutex m;
  static std::map<std::tuple<std::size_t, int, std::size_t>, std::unique_ptr<MelFilterbank>> cache;
  std::lock_guard<std::mutex> lock(m);
  auto& slot = cache[{n_mels, rate, n_fft}];
  if (!slot) slot = std::make_unique<MelFilterbank>(n_mels, rate, n_fft);
  return *slot;
}

}  // namespace

FBankFeature log_mel_fbank(const Waveform& w, const FBankConfig& cfg) {
  if (w.channels() == 0) throw ContractError(kModule, "fbank: waveform has zero channels");
  w.validate();
  if (w.sample_rate_hz != cfg.sample_rate_hz) {
    throw ContractError(kModule, "fbank: waveform rate " + std::to_string(w.sample_rate_hz) +
                                     " Hz differs from configured " +
                                     std::to_string(cfg.sample_rate_hz) + " Hz");
  }
  const std::size_t n = cfg.num_samples();
  const std::size_t win = cfg.win_length(), hop = cfg.hop_length();
  const std::size_t frames = cfg.num_frames();
  const auto& bank = cached_filterbank(cfg.n_mels, cfg.sample_rate_hz, next_pow2(win));
  FBankFeature out(w.channels(), frames, cfg.n_mels, 0.0f);
  std::vector<double> padded(n);
  std::vector<double> power(bank.n_bins());
  std::vector<double> mel(cfg.n_mels);
  for (std::size_t c = 0; c < w.channels(); ++c) {
    const auto& src = w.samples[c];
    std::fill(padded.begin(), padded.end(), 0.0);
    std::copy_n(src.begin(), std::min(n, src.size()), padded.begin());
    auto spec = stft_channel(padded, win, hop, Window::Hann);
    for (std::size_t t = 0; t < frames; ++t) {
      for (std::size_t k = 0; k < spec.bins; ++k) power[k] = std::norm(spec.at(t, k));
      bank.apply(power, mel);
      for (std::size_t m = 0; m < cfg.n_mels; ++m) {
        out.at(c, t, m) = static_cast<float>(std::log(std::max(mel[m], 1e-10)));
      }
    }
  }
  return out;
}

Waveform time_shift(const Waveform& w, long shift) {
  Waveform out(w.channels(), w.length(), w.sample_rate_hz);
  const long len = static_cast<long>(w.length());
  for (std::size_t c = 0; c < w.channels(); ++c) {
    for (long i = 0; i < len; ++i) {
      const long src = i - shift;
      if (src >= 0 && src < len) out.samples[c][static_cast<std::size_t>(i)] =
          w.samples[c][static_cast<std::size_t>(src)];
    }
  }
  return out;
}

ShiftDraw random_time_shift(const Waveform& w, Rng& rng, double max_ms) {
  std::uniform_real_distribution<double> dist(-max_ms, max_ms);
  const double ms = dist(rng);
  const long shift = std::lround(ms * w.sample_rate_hz / 1000.0);
  return {time_shift(w, shift), shift};
}

FBankFeature shift_frames(const FBankFeature& f, long frames) {
  FBankFeature out(f.channels, f.frames, f.bins, static_cast<float>(kLogFloor));
  const long n = static_cast<long>(f.frames);
  for (std::size_t c = 0; c < f.channels; ++c) {
    for (long t = 0; t < n; ++t) {
      const long src = t - frames;
      if (src < 0 || src >= n) continue;
      for (std::size_t m = 0; m < f.bins; ++m) {
        out.at(c, static_cast<std::size_t>(t), m) = f.at(c, static_cast<std::size_t>(src), m);
      }
    }
  }
  return out;
}

FBankFeature spec_augment(const FBankFeature& f, Rng& rng, std::size_t freq_param,
                          std::size_t time_param, SpecAugmentDraw* draw) {
  freq_param = std::min(freq_param, f.bins);
  time_param = std::min(time_param, f.frames);
  SpecAugmentDraw d;
  d.freq_width = std::uniform_int_distribution<std::size_t>(0, freq_param)(rng);
  d.freq_start = std::uniform_int_distribution<std::size_t>(0, f.bins - d.freq_width)(rng);
  d.time_width = std::uniform_int_distribution<std::size_t>(0, time_param)(rng);
  d.time_start = std::uniform_int_distribution<std::size_t>(0, f.frames - d.time_width)(rng);
  FBankFeature out = f;
  const float floor_value = static_cast<float>(kLogFloor);
  for (std::size_t c = 0; c < f.channels; ++c) {
    for (std::size_t t = 0; t < f.frames; ++t) {
      const bool time_masked = t >= d.time_start && t < d.time_start + d.time_width;
      for (std::size_t m = 0; m < f.bins; ++m) {
        const bool freq_masked = m >= d.freq_start && m < d.freq_start + d.freq_width;
        if (time_masked || freq_masked) out.at(c, t, m) = floor_value;
      }
    }
  }
  if (draw) *draw = d;
  return out;
}

}  // namespace kws::dsp
