#include "kws/scene.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "kws/dsp.hpp"
#include "kws/error.hpp"

namespace kws::scene {

namespace {

const char* kModule = "data-io";

constexpr double kKeywordRmsAt1m = 0.05;
constexpr double kHarmonicCeilingHz = 4000.0;

enum Stream : std::uint64_t { kKeywordStream = 1, kNoiseStream, kInterfererStream, kReverbStream };

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double sinc(double x) {
  if (x == 0.0) return 1.0;
  const double px = std::numbers::pi * x;
  return std::sin(px) / px;
}

struct Syllable {
  double f0_start, f0_end, duration_s, f1, f2;
};

struct Template {
  Syllable syllables[2];
  double gap_s;
};

Template make_template(std::uint64_t template_seed) {
  Rng rng(template_seed);
  Template t{};
  const double base = uniform(rng, 120.0, 200.0);
  t.syllables[0] = {base, base * uniform(rng, 1.2, 1.6), uniform(rng, 0.22, 0.3),
                    uniform(rng, 500.0, 800.0), uniform(rng, 1300.0, 2200.0)};
  const double second = base * uniform(rng, 1.1, 1.4);
  t.syllables[1] = {second, second * uniform(rng, 0.6, 0.8), uniform(rng, 0.22, 0.3),
                    uniform(rng, 500.0, 800.0), uniform(rng, 1300.0, 2200.0)};
  t.gap_s = uniform(rng, 0.05, 0.1);
  return t;
}

void render_syllable(const Syllable& s, double pitch, double tempo, double formant, double amp,
                     int rate, std::vector<double>& out) {
  const auto n = static_cast<std::size_t>(s.duration_s * tempo * rate);
  const auto ramp = static_cast<std::size_t>(0.025 * rate);
  const double f1 = s.f1 * formant, f2 = s.f2 * formant;
  double phase = 0.0;
  std::vector<double> amps;
  for (std::size_t i = 0; i < n; ++i) {
    const double frac = static_cast<double>(i) / static_cast<double>(n);
    const double f0 = pitch * s.f0_start * std::pow(s.f0_end / s.f0_start, frac);
    phase += 2.0 * std::numbers::pi * f0 / rate;
    if (i % 32 == 0) {
      // Formant weights change slowly; refresh them every 2 ms.
      amps.clear();
      for (int k = 1; k * f0 < kHarmonicCeilingHz; ++k) {
        const double f = k * f0;
        amps.push_back(std::exp(-std::pow((f - f1) / 200.0, 2)) +
                       0.7 * std::exp(-std::pow((f - f2) / 300.0, 2)) + 0.03);
      }
    }
    double v = 0.0;
    for (std::size_t k = 1; k <= amps.size() && k * f0 < kHarmonicCeilingHz; ++k) {
      v += amps[k - 1] * std::sin(static_cast<double>(k) * phase);
    }
    double env = 1.0;
    if (i < ramp) env = std::sin(0.5 * std::numbers::pi * static_cast<double>(i) / ramp);
    if (n - i < ramp) env = std::min(env, std::sin(0.5 * std::numbers::pi * static_cast<double>(n - i) / ramp));
    out.push_back(amp * env * v);
  }
}

void normalize_rms(std::vector<double>& x, double target) {
  const double e = energy(x);
  if (e <= 0) return;
  const double g = target / std::sqrt(e / static_cast<double>(x.size()));
  for (double& v : x) v *= g;
}

// Gaussian noise low-passed at `corner_hz` (first order) and high-passed at
// 100 Hz, unit mean power.
std::vector<double> shaped_noise(std::size_t length, Rng& rng, int rate, double corner_hz) {
  const std::size_t n = std::max<std::size_t>(2, dsp::next_pow2(length));
  const auto& fft = dsp::real_fft(n);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> x(n);
  for (double& v : x) v = g(rng);
  std::vector<dsp::Complex> spec(fft.bins());
  fft.forward(x, spec);
  for (std::size_t k = 0; k < spec.size(); ++k) {
    const double f = static_cast<double>(k) * rate / static_cast<double>(n);
    const double lp = 1.0 / std::sqrt(1.0 + std::pow(f / corner_hz, 2));
    const double hp = f / std::sqrt(f * f + 100.0 * 100.0);
    spec[k] *= lp * hp;
  }
  fft.inverse(spec, x);
  x.resize(length);
  normalize_rms(x, 1.0);
  return x;
}

std::vector<double> exponential_tail(const Reverb& r, Rng& rng, int rate) {
  const auto len = static_cast<std::size_t>(r.rt60_s * rate);
  const auto onset = static_cast<std::size_t>(r.tail_onset_ms * rate / 1000.0);
  std::vector<double> h(len, 0.0);
  if (len <= onset) return {};
  std::normal_distribution<double> g(0.0, 1.0);
  const double decay = 3.0 * std::log(10.0) / (r.rt60_s * rate);
  for (std::size_t i = onset; i < len; ++i) h[i] = g(rng) * std::exp(-decay * static_cast<double>(i));
  const double target = std::pow(10.0, r.tail_level_db / 10.0);
  const double e = energy(h);
  for (double& v : h) v *= std::sqrt(target / e);
  return h;
}

// Image of a dry source (level referenced to 1 m) at every mic.
struct SourceImage {
  std::vector<std::vector<double>> direct, full;
};

SourceImage propagate(const std::vector<double>& dry, double azimuth_deg, double distance_m,
                      const SceneConfig& cfg, Rng& reverb_rng) {
  const auto delays = array::plane_wave_delays(azimuth_deg, cfg.geometry, cfg.sample_rate_hz);
  const double gain = 1.0 / std::max(distance_m, 0.1);
  SourceImage img;
  for (std::size_t c = 0; c < cfg.geometry.size(); ++c) {
    auto d = fractional_delay(dry, delays[c]);
    for (double& v : d) v *= gain;
    auto full = d;
    if (cfg.reverb.rt60_s > 0) {
      const auto h = exponential_tail(cfg.reverb, reverb_rng, cfg.sample_rate_hz);
      if (!h.empty()) {
        const auto wet = dsp::fft_convolve(dry, h);
        for (std::size_t i = 0; i < full.size(); ++i) full[i] += wet[i];
      }
    }
    img.direct.push_back(std::move(d));
    img.full.push_back(std::move(full));
  }
  return img;
}

double mean_power(const std::vector<double>& x, std::size_t begin, std::size_t end) {
  double e = 0;
  for (std::size_t i = begin; i < end; ++i) e += x[i] * x[i];
  return end > begin ? e / static_cast<double>(end - begin) : 0.0;
}

std::vector<double> place(const std::vector<double>& utt, std::size_t length, std::size_t onset) {
  std::vector<double> out(length, 0.0);
  for (std::size_t i = 0; i < utt.size() && onset + i < length; ++i) out[onset + i] = utt[i];
  return out;
}

// Several overlapping streams of random words spanning the whole clip.
std::vector<double> babble(std::size_t length, Rng& rng, int rate) {
  std::vector<double> out(length, 0.0);
  for (int stream = 0; stream < 5; ++stream) {
    auto pos = static_cast<std::size_t>(uniform(rng, 0.0, 0.3) * rate);
    while (pos < length) {
      auto utt = keyword_utterance(rng(), rng, rate);
      for (std::size_t i = 0; i < utt.size() && pos + i < length; ++i) out[pos + i] += utt[i];
      pos += utt.size() + static_cast<std::size_t>(uniform(rng, 0.02, 0.15) * rate);
    }
  }
  normalize_rms(out, kKeywordRmsAt1m);
  return out;
}

}  // namespace

Rng substream(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

std::vector<double> fractional_delay(std::span<const double> x, double delay, int half_width) {
  const auto n = static_cast<long>(x.size());
  std::vector<double> y(x.size(), 0.0);
  // Near-integer delays (e.g. cos 90 deg rounding) are exact shifts.
  if (std::abs(delay - std::round(delay)) < 1e-9) {
    const auto d = static_cast<long>(std::round(delay));
    for (long i = 0; i < n; ++i) {
      const long j = i - d;
      if (j >= 0 && j < n) y[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(j)];
    }
    return y;
  }
  const long whole = static_cast<long>(std::floor(delay));
  const double frac = delay - static_cast<double>(whole);
  // y[i] = sum_k x[i - whole - k] * h(k + frac), h windowed sinc.
  std::vector<double> taps;
  for (long k = -half_width + 1; k <= half_width; ++k) {
    const double u = static_cast<double>(k) - frac;
    const double w = 0.5 * (1.0 + std::cos(std::numbers::pi * u / half_width));
    taps.push_back(sinc(u) * w);
  }
  for (long i = 0; i < n; ++i) {
    double acc = 0.0;
    for (long k = -half_width + 1, t = 0; k <= half_width; ++k, ++t) {
      const long j = i - whole - k;
      if (j >= 0 && j < n) acc += x[static_cast<std::size_t>(j)] * taps[static_cast<std::size_t>(t)];
    }
    y[static_cast<std::size_t>(i)] = acc;
  }
  return y;
}

namespace {

std::vector<double> render_template(const Template& t, Rng& variation, int rate) {
  const double pitch = uniform(variation, 0.87, 1.15);
  const double tempo = uniform(variation, 0.88, 1.12);
  const double formant = uniform(variation, 0.94, 1.06);
  const double a0 = uniform(variation, 0.8, 1.2), a1 = uniform(variation, 0.8, 1.2);
  std::vector<double> out;
  render_syllable(t.syllables[0], pitch, tempo, formant, a0, rate, out);
  out.resize(out.size() + static_cast<std::size_t>(t.gap_s * tempo * rate), 0.0);
  render_syllable(t.syllables[1], pitch, tempo, formant, a1, rate, out);
  normalize_rms(out, 1.0);
  return out;
}

}  // namespace

std::vector<double> keyword_utterance(std::uint64_t template_seed, Rng& variation, int rate) {
  return render_template(make_template(template_seed), variation, rate);
}

std::vector<double> near_miss_utterance(std::uint64_t template_seed, std::uint64_t other_seed, Rng& variation,
                                        int rate) {
  Template t = make_template(template_seed);
  Rng rng(other_seed);
  auto shift = [&rng](double lo, double hi) {
    const double m = uniform(rng, lo, hi);
    return std::bernoulli_distribution(0.5)(rng) ? 1.0 + m : 1.0 / (1.0 + m);
  };
  Syllable& s = t.syllables[1];
  s.f1 *= shift(0.15, 0.3);
  s.f2 *= shift(0.15, 0.3);
  s.f0_end = s.f0_start * std::clamp(s.f0_end / s.f0_start * shift(0.15, 0.3), 0.5, 1.0);
  return render_template(t, variation, rate);
}

void SceneConfig::validate() const {
  auto bad = [](const std::string& m) { throw ConfigError(kModule, "scene: " + m); };
  if (label != 0 && label != 1) bad("label must be 0 or 1");
  if (!std::isfinite(snr_db)) bad("SNR must be finite");
  if (!(duration_s > 0)) bad("duration must be > 0");
  if (!(noise_corner_hz > 0)) bad("noise corner frequency must be > 0");
  if (sample_rate_hz <= 0) bad("sample rate must be > 0");
  if (!(source_distance_m > 0)) bad("source distance must be > 0");
  if (!(source_azimuth_deg >= 0 && source_azimuth_deg <= 180)) bad("source azimuth outside [0, 180]");
  for (const auto& i : interferers) {
    if (!(i.azimuth_deg >= 0 && i.azimuth_deg <= 180)) bad("interferer azimuth outside [0, 180]");
    if (!(i.distance_m > 0)) bad("interferer distance must be > 0");
    if (!std::isfinite(i.sir_db)) bad("interferer SIR must be finite");
  }
  if (reverb.rt60_s < 0 || !std::isfinite(reverb.tail_level_db)) bad("invalid reverb");
  try {
    geometry.validate();
  } catch (const ContractError& e) {
    bad(e.what());
  }
}

Scene synthesize_scene(const SceneConfig& cfg) {
  cfg.validate();
  const int rate = cfg.sample_rate_hz;
  const auto length = static_cast<std::size_t>(std::lround(cfg.duration_s * rate));
  const std::size_t mics = cfg.geometry.size();

  Rng kw_rng = substream(cfg.seed, kKeywordStream);
  Rng noise_rng = substream(cfg.seed, kNoiseStream);
  Rng intf_rng = substream(cfg.seed, kInterfererStream);
  Rng reverb_rng = substream(cfg.seed, kReverbStream);

  auto utt = keyword_utterance(cfg.keyword_seed, kw_rng, rate);
  for (double& v : utt) v *= kKeywordRmsAt1m;
  if (utt.size() > length) utt.resize(length);
  const auto margin = std::min<std::size_t>(static_cast<std::size_t>(0.15 * rate), (length - utt.size()) / 2);
  const auto onset = static_cast<std::size_t>(
      std::uniform_int_distribution<std::size_t>(margin, length - utt.size() - margin)(kw_rng));

  Scene s;
  s.label = cfg.label;
  s.keyword_onset = onset;
  s.keyword_length = utt.size();
  const auto kw = propagate(place(utt, length, onset), cfg.source_azimuth_deg, cfg.source_distance_m,
                            cfg, reverb_rng);
  const double p_kw = mean_power(kw.direct[0], onset, onset + utt.size());

  s.mixture = Waveform(mics, length, rate);
  s.clean = Waveform(mics, length, rate);
  s.keyword_image = Waveform(mics, length, rate);
  if (cfg.label == 1) {
    for (std::size_t c = 0; c < mics; ++c) {
      s.clean.samples[c] = kw.direct[c];
      s.keyword_image.samples[c] = kw.full[c];
    }
  }
  for (std::size_t c = 0; c < mics; ++c) s.mixture.samples[c] = s.keyword_image.samples[c];

  for (const auto& spec : cfg.interferers) {
    std::vector<double> dry;
    std::size_t begin = 0, end = length;
    if (spec.kind == InterfererKind::Babble) {
      dry = babble(length, intf_rng, rate);
    } else {
      auto word = spec.kind == InterfererKind::NearMiss
                      ? near_miss_utterance(cfg.keyword_seed, intf_rng(), intf_rng, rate)
                      : keyword_utterance(intf_rng(), intf_rng, rate);
      if (word.size() > length) word.resize(length);
      begin = std::uniform_int_distribution<std::size_t>(0, length - word.size())(intf_rng);
      end = begin + word.size();
      dry = place(word, length, begin);
    }
    auto img = propagate(dry, spec.azimuth_deg, spec.distance_m, cfg, reverb_rng);
    const double p = mean_power(img.full[0], begin, end);
    const double g = p > 0 ? std::sqrt(p_kw / std::pow(10.0, spec.sir_db / 10.0) / p) : 0.0;
    for (std::size_t c = 0; c < mics; ++c)
      for (std::size_t i = 0; i < length; ++i) s.mixture.samples[c][i] += g * img.full[c][i];
  }

  if (cfg.diffuse_noise) {
    const double g = std::sqrt(p_kw / std::pow(10.0, cfg.snr_db / 10.0));
    for (std::size_t c = 0; c < mics; ++c) {
      const auto n = shaped_noise(length, noise_rng, rate, cfg.noise_corner_hz);
      for (std::size_t i = 0; i < length; ++i) s.mixture.samples[c][i] += g * n[i];
    }
  }
  return s;
}

CorpusConfig benchmark_corpus() {
  CorpusConfig c;
  c.interferer_probability = 0.9;
  c.confuser_probability = 1.0;
  c.near_miss_probability = 1.0;
  c.sir_min_db = -5.0;
  c.sir_max_db = 5.0;
  c.noise_corner_hz = 2500.0;
  return c;
}

SceneConfig draw_scene_config(const CorpusConfig& corpus, io::Field field, std::uint64_t seed, int label) {
  const FieldRanges& r = field == io::Field::Near ? corpus.near : field == io::Field::Mid ? corpus.mid : corpus.far;
  Rng rng = substream(seed, 0);
  SceneConfig cfg;
  cfg.seed = seed;
  cfg.label = label;
  cfg.keyword_seed = corpus.keyword_seed;
  cfg.geometry = corpus.geometry;
  cfg.duration_s = corpus.duration_s;
  cfg.sample_rate_hz = corpus.sample_rate_hz;
  cfg.source_azimuth_deg = uniform(rng, corpus.source_azimuth_min_deg, corpus.source_azimuth_max_deg);
  cfg.source_distance_m = uniform(rng, r.distance_min_m, r.distance_max_m);
  cfg.snr_db = uniform(rng, r.snr_min_db, r.snr_max_db);
  cfg.noise_corner_hz = corpus.noise_corner_hz;
  const double rt60 = uniform(rng, r.rt60_min_s, r.rt60_max_s);
  cfg.reverb = {rt60, corpus.reverb_tail_level_db, 5.0};
  if (std::uniform_real_distribution<double>(0, 1)(rng) < corpus.interferer_probability) {
    Interferer i;
    i.kind = std::uniform_real_distribution<double>(0, 1)(rng) < corpus.confuser_probability
                 ? InterfererKind::Confuser
                 : InterfererKind::Babble;
    if (i.kind == InterfererKind::Confuser && corpus.near_miss_probability > 0 &&
        std::uniform_real_distribution<double>(0, 1)(rng) < corpus.near_miss_probability)
      i.kind = InterfererKind::NearMiss;
    i.azimuth_deg = uniform(rng, 0.0, 180.0);
    i.distance_m = uniform(rng, r.distance_min_m, r.distance_max_m);
    i.sir_db = uniform(rng, corpus.sir_min_db, corpus.sir_max_db);
    cfg.interferers.push_back(i);
  }
  return cfg;
}

int draw_label(const CorpusConfig& corpus, std::uint64_t seed) {
  Rng rng = substream(seed, 99);
  return std::uniform_real_distribution<double>(0, 1)(rng) < corpus.positive_fraction ? 1 : 0;
}

Scene synthesize_field_scene(const CorpusConfig& corpus, io::Field field, std::uint64_t seed) {
  Scene s = synthesize_scene(draw_scene_config(corpus, field, seed, draw_label(corpus, seed)));
  const std::size_t keep = io::field_channels(field);
  for (Waveform* w : {&s.mixture, &s.clean, &s.keyword_image}) {
    if (w->samples.size() > keep) w->samples.resize(keep);
  }
  return s;
}

}  // namespace kws::scene
