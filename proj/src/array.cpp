#include "kws/array.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "kws/error.hpp"

namespace kws::array {

namespace {

const char* kModule = "array-frontend";

void check_extents(const MultiStft& stft) {
  if (stft.empty()) throw ContractError(kModule, "multichannel STFT has no channels");
  for (const auto& s : stft) {
    if (s.frames != stft[0].frames || s.bins != stft[0].bins) {
      throw DimensionError(kModule, "channel spectrograms have different extents");
    }
  }
}

// Column t holds the M mic values at frame t for one bin.
CMatrix bin_matrix(const MultiStft& stft, std::size_t bin) {
  const std::size_t m = stft.size(), frames = stft[0].frames;
  CMatrix x(m, frames);
  for (std::size_t c = 0; c < m; ++c)
    for (std::size_t t = 0; t < frames; ++t) x(c, t) = stft[c].at(t, bin);
  return x;
}

std::size_t frame_padding(const FrontendConfig& cfg) { return cfg.win_length - cfg.hop; }

}  // namespace

ArrayGeometry ArrayGeometry::uniform_linear(std::size_t elements, double spacing_m) {
  ArrayGeometry g;
  for (std::size_t i = 0; i < elements; ++i) g.positions_m.push_back(spacing_m * i);
  return g;
}

void ArrayGeometry::validate() const {
  if (positions_m.size() < 2) throw ContractError(kModule, "geometry: need at least 2 elements");
  for (std::size_t i = 1; i < positions_m.size(); ++i) {
    if (!(positions_m[i] > positions_m[i - 1])) {
      throw ContractError(kModule, "geometry: positions must be strictly increasing");
    }
  }
  if (!(speed_of_sound > 0)) throw ContractError(kModule, "geometry: speed of sound must be > 0");
}

static void check_azimuth(double azimuth_deg) {
  if (!(azimuth_deg >= 0.0 && azimuth_deg <= 180.0)) {
    throw ContractError(kModule, "look direction " + std::to_string(azimuth_deg) +
                                     " deg outside [0, 180]");
  }
}

CVector steering_vector(double azimuth_deg, const ArrayGeometry& geom, double freq_hz,
                        int sample_rate_hz) {
  geom.validate();
  check_azimuth(azimuth_deg);
  if (freq_hz < 0 || freq_hz > sample_rate_hz / 2.0) {
    throw ContractError(kModule, "steering: frequency " + std::to_string(freq_hz) +
                                     " Hz above Nyquist");
  }
  const double cos_t = std::cos(azimuth_deg * std::numbers::pi / 180.0);
  CVector d(geom.size());
  for (std::size_t k = 0; k < geom.size(); ++k) {
    const double tau = (geom.positions_m[k] - geom.positions_m[0]) * cos_t / geom.speed_of_sound;
    d(k) = std::polar(1.0, -2.0 * std::numbers::pi * freq_hz * tau);
  }
  return d;
}

std::vector<double> plane_wave_delays(double azimuth_deg, const ArrayGeometry& geom,
                                      int sample_rate_hz) {
  geom.validate();
  check_azimuth(azimuth_deg);
  const double cos_t = std::cos(azimuth_deg * std::numbers::pi / 180.0);
  std::vector<double> out;
  for (double p : geom.positions_m) {
    out.push_back((p - geom.positions_m[0]) * cos_t / geom.speed_of_sound * sample_rate_hz);
  }
  return out;
}

TFMask::TFMask(std::size_t t, std::size_t f, double speech_fill)
    : frames(t), bins(f), speech(t * f, speech_fill), noise(t * f, 1.0 - speech_fill) {}

void TFMask::set(std::size_t t, std::size_t f, double s) {
  speech[t * bins + f] = s;
  noise[t * bins + f] = 1.0 - s;
}

void TFMask::validate() const {
  if (speech.size() != frames * bins || noise.size() != frames * bins) {
    throw DimensionError(kModule, "mask: storage does not match extents");
  }
  for (std::size_t i = 0; i < speech.size(); ++i) {
    if (!(speech[i] >= 0 && speech[i] <= 1 && noise[i] >= 0 && noise[i] <= 1) ||
        std::abs(speech[i] + noise[i] - 1.0) > 1e-9) {
      throw ContractError(kModule, "mask: entries must lie in [0,1] and sum to 1");
    }
  }
}

TFMask oracle_mask(const MultiStft& speech, const MultiStft& noise) {
  check_extents(speech);
  check_extents(noise);
  if (speech.size() != noise.size() || speech[0].frames != noise[0].frames ||
      speech[0].bins != noise[0].bins) {
    throw DimensionError(kModule, "oracle mask: speech and noise STFTs differ in extent");
  }
  TFMask mask(speech[0].frames, speech[0].bins);
  for (std::size_t t = 0; t < mask.frames; ++t) {
    for (std::size_t f = 0; f < mask.bins; ++f) {
      double ps = 0, pn = 0;
      for (std::size_t c = 0; c < speech.size(); ++c) {
        ps += std::norm(speech[c].at(t, f));
        pn += std::norm(noise[c].at(t, f));
      }
      mask.set(t, f, ps + pn > 0 ? ps / (ps + pn) : 0.0);
    }
  }
  return mask;
}

TFMask noise_floor_mask(const MultiStft& mix, double percentile) {
  check_extents(mix);
  if (!(percentile >= 0 && percentile <= 1)) {
    throw ConfigError(kModule, "noise-floor mask: percentile must be in [0, 1]");
  }
  const std::size_t frames = mix[0].frames, bins = mix[0].bins;
  TFMask mask(frames, bins);
  std::vector<double> power(frames), sorted(frames);
  for (std::size_t f = 0; f < bins; ++f) {
    for (std::size_t t = 0; t < frames; ++t) {
      double p = 0;
      for (const auto& s : mix) p += std::norm(s.at(t, f));
      power[t] = p / static_cast<double>(mix.size());
    }
    sorted = power;
    const auto k = static_cast<std::size_t>(percentile * static_cast<double>(frames - 1));
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(k), sorted.end());
    const double floor = std::max(sorted[k], 1e-30);
    for (std::size_t t = 0; t < frames; ++t) {
      const double snr = std::max(power[t] / floor - 1.0, 0.0);
      mask.set(t, f, snr / (snr + 1.0));
    }
  }
  return mask;
}

Covariances estimate_covariances(const MultiStft& stft, const TFMask& mask, double loading) {
  check_extents(stft);
  mask.validate();
  if (mask.frames != stft[0].frames || mask.bins != stft[0].bins) {
    throw DimensionError(kModule, "covariance: mask extents differ from the STFT");
  }
  const std::size_t m = stft.size();
  Covariances out;
  for (std::size_t f = 0; f < mask.bins; ++f) {
    const CMatrix x = bin_matrix(stft, f);
    CMatrix rs = CMatrix::Zero(m, m), rn = CMatrix::Zero(m, m);
    double ws = 0, wn = 0;
    for (std::size_t t = 0; t < mask.frames; ++t) {
      const double ms = mask.speech_at(t, f), mn = mask.noise_at(t, f);
      if (ms > 0) rs.noalias() += ms * x.col(t) * x.col(t).adjoint();
      if (mn > 0) rn.noalias() += mn * x.col(t) * x.col(t).adjoint();
      ws += ms;
      wn += mn;
    }
    const bool s_bad = !(ws > 0), n_bad = !(wn > 0);
    rs = s_bad ? CMatrix::Identity(m, m) : CMatrix(rs / ws);
    rn = n_bad ? CMatrix::Identity(m, m) : CMatrix(rn / wn);
    // Exact Hermitian symmetry regardless of summation order.
    rs = (0.5 * (rs + rs.adjoint())).eval();
    rn = (0.5 * (rn + rn.adjoint())).eval();
    const double load = loading * rn.trace().real() / static_cast<double>(m);
    rn.diagonal().array() += load;
    out.speech.push_back(std::move(rs));
    out.noise.push_back(std::move(rn));
    out.speech_degenerate.push_back(s_bad);
    out.noise_degenerate.push_back(n_bad);
  }
  return out;
}

CVector mvdr_weights(const CMatrix& noise_cov, const CVector& steering, std::size_t bin) {
  if (noise_cov.rows() != noise_cov.cols() || noise_cov.rows() != steering.size()) {
    throw DimensionError(kModule, "mvdr: covariance and steering vector sizes differ");
  }
  const auto m = noise_cov.rows();
  CMatrix r = noise_cov;
  double extra = 1e-10 * std::max(r.trace().real() / static_cast<double>(m), 1e-30);
  for (int attempt = 0; attempt < 8; ++attempt) {
    Eigen::LDLT<CMatrix> solver(r);
    if (solver.info() == Eigen::Success) {
      const CVector rd = solver.solve(steering);
      const std::complex<double> denom = steering.dot(rd);  // d^H R^-1 d
      if (rd.allFinite() && std::abs(denom) > 1e-300 && std::isfinite(std::abs(denom))) {
        return rd / denom;
      }
    }
    r.diagonal().array() += extra;
    extra *= 100.0;
  }
  throw NumericError(kModule, "mvdr: solve failed at bin " + std::to_string(bin));
}

dsp::Spectrogram apply_beamformer(const MultiStft& stft, const std::vector<CVector>& weights) {
  check_extents(stft);
  if (weights.size() != stft[0].bins) {
    throw DimensionError(kModule, "beamformer: need one weight vector per bin");
  }
  dsp::Spectrogram y = stft[0];
  for (std::size_t f = 0; f < y.bins; ++f) {
    if (static_cast<std::size_t>(weights[f].size()) != stft.size()) {
      throw DimensionError(kModule, "beamformer: weight length differs from channel count");
    }
    for (std::size_t t = 0; t < y.frames; ++t) {
      std::complex<double> acc = 0;
      for (std::size_t c = 0; c < stft.size(); ++c) acc += std::conj(weights[f](c)) * stft[c].at(t, f);
      y.at(t, f) = acc;
    }
  }
  return y;
}

MultiStft wpe_dereverb(const MultiStft& stft, const WpeConfig& cfg, WpeStats* stats) {
  check_extents(stft);
  if (cfg.taps < 1 || cfg.delay < 1) throw ConfigError(kModule, "wpe: taps and delay must be >= 1");
  WpeStats local;
  if (cfg.iterations == 0) {
    if (stats) *stats = local;
    return stft;
  }
  const std::size_t m = stft.size(), frames = stft[0].frames, bins = stft[0].bins;
  const std::size_t k = m * cfg.taps;
  MultiStft out = stft;
  for (std::size_t f = 0; f < bins; ++f) {
    const CMatrix x = bin_matrix(stft, f);
    CMatrix past = CMatrix::Zero(static_cast<long>(k), static_cast<long>(frames));
    for (std::size_t tap = 0; tap < cfg.taps; ++tap) {
      const std::size_t lag = cfg.delay + tap;
      for (std::size_t t = lag; t < frames; ++t) {
        past.block(static_cast<long>(tap * m), static_cast<long>(t), static_cast<long>(m), 1) =
            x.col(static_cast<long>(t - lag));
      }
    }
    CMatrix y = x;
    CMatrix g;
    bool regularized = false;
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
      Eigen::VectorXd inv_power(frames);
      const double mean_power = y.cwiseAbs2().mean();
      const double floor = std::max(cfg.power_floor * mean_power, 1e-30);
      for (std::size_t t = 0; t < frames; ++t) {
        const double p = y.col(static_cast<long>(t)).cwiseAbs2().mean();
        inv_power(static_cast<long>(t)) = 1.0 / std::max(p, floor);
      }
      const CMatrix weighted = past * inv_power.asDiagonal();
      CMatrix r = weighted * past.adjoint();
      const CMatrix p = weighted * x.adjoint();
      double load = 1e-8 * std::max(r.trace().real() / static_cast<double>(k), 1e-30);
      r.diagonal().array() += load;
      for (int attempt = 0;; ++attempt) {
        Eigen::LDLT<CMatrix> solver(r);
        if (solver.info() == Eigen::Success) {
          g = solver.solve(p);
          if (g.allFinite()) break;
        }
        if (attempt == 10) {
          g = CMatrix::Zero(static_cast<long>(k), static_cast<long>(m));
          break;
        }
        regularized = true;
        r.diagonal().array() += load * 100.0;
        load *= 100.0;
      }
      y = x - g.adjoint() * past;
    }
    local.filter_energy += g.squaredNorm();
    if (regularized) ++local.regularized_bins;
    for (std::size_t c = 0; c < m; ++c)
      for (std::size_t t = 0; t < frames; ++t)
        out[c].at(t, f) = y(static_cast<long>(c), static_cast<long>(t));
  }
  if (stats) *stats = local;
  return out;
}

MultiStft analyze(const Waveform& w, const FrontendConfig& cfg) {
  w.validate();
  if (cfg.hop == 0 || cfg.hop > cfg.win_length) throw ConfigError(kModule, "stft: need 0 < hop <= window");
  const std::size_t pad = frame_padding(cfg);
  const std::size_t body = pad + w.length();
  // Extend so the last sample is fully covered by frames.
  const std::size_t frames = body <= cfg.win_length ? 1 : (body - cfg.win_length + cfg.hop - 1) / cfg.hop + 1;
  const std::size_t total = (frames - 1) * cfg.hop + cfg.win_length + pad;
  MultiStft out;
  std::vector<double> padded(total);
  for (const auto& ch : w.samples) {
    std::fill(padded.begin(), padded.end(), 0.0);
    std::copy(ch.begin(), ch.end(), padded.begin() + static_cast<long>(pad));
    out.push_back(dsp::stft_channel(padded, cfg.win_length, cfg.hop));
  }
  return out;
}

static Waveform synthesize_padded(const MultiStft& stft, std::size_t length, int rate, std::size_t pad) {
  Waveform w(stft.size(), length, rate);
  for (std::size_t c = 0; c < stft.size(); ++c) {
    const std::size_t full = (stft[c].frames - 1) * stft[c].hop + stft[c].win_length;
    auto y = dsp::istft_channel(stft[c], full);
    for (std::size_t i = 0; i < length && pad + i < full; ++i) w.samples[c][i] = y[pad + i];
  }
  return w;
}

Waveform synthesize(const MultiStft& stft, std::size_t length, int sample_rate_hz) {
  check_extents(stft);
  return synthesize_padded(stft, length, sample_rate_hz, stft[0].win_length - stft[0].hop);
}

Waveform wpe_waveform(const Waveform& w, const FrontendConfig& cfg) {
  // Zero iterations leave the filters at zero; skip the resynthesis roundoff.
  if (cfg.wpe.iterations == 0) return w;
  return synthesize(wpe_dereverb(analyze(w, cfg), cfg.wpe), w.length(), w.sample_rate_hz);
}

static Waveform beams(const MultiStft& stft, std::size_t length, int rate, const FrontendConfig& cfg,
                      const TFMask* mask) {
  const std::size_t bins = stft[0].bins;
  const TFMask est = mask ? *mask : noise_floor_mask(stft, cfg.mask_percentile);
  const Covariances cov = estimate_covariances(stft, est);
  const std::size_t n_fft = stft[0].n_fft;
  MultiStft out;
  for (double look : cfg.looks_deg) {
    std::vector<CVector> weights;
    for (std::size_t f = 0; f < bins; ++f) {
      const double hz = static_cast<double>(f) * rate / static_cast<double>(n_fft);
      weights.push_back(mvdr_weights(cov.noise[f], steering_vector(look, cfg.geometry, hz, rate), f));
    }
    out.push_back(apply_beamformer(stft, weights));
  }
  return synthesize(out, length, rate);
}

static void check_channels(const Waveform& w, const FrontendConfig& cfg) {
  cfg.geometry.validate();
  if (w.channels() != cfg.geometry.size()) {
    throw ContractError(kModule, "expected " + std::to_string(cfg.geometry.size()) +
                                     " channels, got " + std::to_string(w.channels()));
  }
}

Waveform beamform_waveform(const Waveform& w, const FrontendConfig& cfg, const TFMask* mask) {
  check_channels(w, cfg);
  return beams(analyze(w, cfg), w.length(), w.sample_rate_hz, cfg, mask);
}

Waveform multi_look_stack(const Waveform& w, const FrontendConfig& cfg, const TFMask* mask) {
  check_channels(w, cfg);
  const MultiStft dereverbed = wpe_dereverb(analyze(w, cfg), cfg.wpe);
  Waveform out = beams(dereverbed, w.length(), w.sample_rate_hz, cfg, mask);
  out.samples.push_back(w.samples[0]);
  return out;
}

}  // namespace kws::array
