#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "kws/error.hpp"
#include "kws/io.hpp"
#include "kws/scene.hpp"

using namespace kws;
using namespace kws::io;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("kws_io_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
             ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

Waveform random_pcm16_content(std::size_t channels, std::size_t len, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> d(-32768, 32767);
  Waveform w(channels, len, 16000);
  for (auto& ch : w.samples)
    for (auto& v : ch) v = d(rng) / 32768.0;
  return w;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream(p) << s;
}

std::string expect_parse_error(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const ParseError& e) {
    return e.what();
  }
  ADD_FAILURE() << "expected ParseError";
  return {};
}

}  // namespace

TEST(Wav, Float32RoundTripIsBitwise) {
  Rng rng(1);
  std::normal_distribution<float> d(0.0f, 0.3f);
  Waveform w(6, 777, 16000);
  for (auto& ch : w.samples)
    for (auto& v : ch) v = d(rng);
  WavInfo info;
  auto back = decode_wav(encode_wav(w, SampleFormat::Float32), &info);
  EXPECT_EQ(info.format, SampleFormat::Float32);
  EXPECT_EQ(info.channels, 6u);
  EXPECT_EQ(back.sample_rate_hz, 16000);
  EXPECT_EQ(back.samples, w.samples);
}

TEST(Wav, Pcm16RoundTripIsSampleExact) {
  TempDir dir;
  auto w = random_pcm16_content(6, 1000, 2);
  write_wav(w, dir.path() / "a.wav");
  auto back = read_wav(dir.path() / "a.wav");
  EXPECT_EQ(back.samples, w.samples);
  auto info = read_wav_info(dir.path() / "a.wav");
  EXPECT_EQ(info.frames, 1000u);
  EXPECT_EQ(info.channels, 6u);
}

TEST(Wav, FullScaleConvention) {
  Waveform w(1, 3, 16000);
  w.samples[0] = {1.0, -1.0, 2.0};
  auto back = decode_wav(encode_wav(w));
  EXPECT_EQ(back.samples[0][0], 1.0 - std::pow(2.0, -15));
  EXPECT_EQ(back.samples[0][1], -1.0);
  EXPECT_EQ(back.samples[0][2], 1.0 - std::pow(2.0, -15));
}

TEST(Wav, TruncatedFileFailsClosed) {
  auto bytes = encode_wav(random_pcm16_content(2, 100, 3));
  bytes.resize(bytes.size() - 7);
  auto msg = expect_parse_error([&] { decode_wav(bytes); });
  EXPECT_NE(msg.find("offset"), std::string::npos) << msg;
}

TEST(Wav, TrailingGarbageRejected) {
  auto bytes = encode_wav(random_pcm16_content(1, 10, 4));
  bytes.push_back(0);
  bytes.push_back(0);
  expect_parse_error([&] { decode_wav(bytes); });
}

TEST(Wav, UnsupportedCodecRejected) {
  auto bytes = encode_wav(random_pcm16_content(1, 10, 5));
  bytes[34] = 8;  // bits per sample
  bytes[32] = 1;  // block align
  auto msg = expect_parse_error([&] { decode_wav(bytes); });
  EXPECT_NE(msg.find("unsupported codec"), std::string::npos) << msg;
}

TEST(Wav, ExtensibleHeaderAccepted) {
  auto plain = encode_wav(random_pcm16_content(2, 50, 6));
  std::vector<std::uint8_t> ext(plain.begin(), plain.begin() + 12);
  auto put16 = [&](std::uint16_t v) {
    ext.push_back(v & 0xFF);
    ext.push_back(v >> 8);
  };
  auto put32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) ext.push_back((v >> (8 * i)) & 0xFF);
  };
  ext.insert(ext.end(), {'f', 'm', 't', ' '});
  put32(40);
  put16(0xFFFE);
  ext.insert(ext.end(), plain.begin() + 22, plain.begin() + 36);  // channels .. bits
  put16(22);
  put16(16);
  put32(3);
  const std::uint8_t guid[16] = {1, 0, 0, 0, 0, 0, 0x10, 0, 0x80, 0, 0, 0xAA, 0, 0x38, 0x9B, 0x71};
  ext.insert(ext.end(), guid, guid + 16);
  ext.insert(ext.end(), plain.begin() + 36, plain.end());
  const std::uint32_t riff = static_cast<std::uint32_t>(ext.size() - 8);
  for (int i = 0; i < 4; ++i) ext[4 + i] = (riff >> (8 * i)) & 0xFF;
  EXPECT_EQ(decode_wav(ext).samples, decode_wav(plain).samples);
}

TEST(Manifest, EmptyFileIsEmptyList) {
  TempDir dir;
  write_text(dir.path() / "m.jsonl", "");
  EXPECT_TRUE(load_manifest(dir.path() / "m.jsonl").empty());
}

TEST(Manifest, BadLabelNamesLine) {
  TempDir dir;
  write_wav(Waveform(1, 10, 16000), dir.path() / "a.wav");
  write_text(dir.path() / "m.jsonl",
             R"({"id":"x","audio":"a.wav","label":1,"field":"near"})"
             "\n"
             R"({"id":"y","audio":"a.wav","label":2,"field":"near"})"
             "\n");
  auto msg = expect_parse_error([&] { load_manifest(dir.path() / "m.jsonl"); });
  EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
}

TEST(Manifest, ValidationErrors) {
  TempDir dir;
  write_wav(Waveform(1, 10, 16000), dir.path() / "mono.wav");
  auto check = [&](const std::string& body, const std::string& needle) {
    write_text(dir.path() / "m.jsonl", body + "\n");
    auto msg = expect_parse_error([&] { load_manifest(dir.path() / "m.jsonl"); });
    EXPECT_NE(msg.find(needle), std::string::npos) << msg;
  };
  check(R"({"id":"x","audio":"mono.wav","label":1})", "missing field 'field'");
  check(R"({"id":"x","audio":"nope.wav","label":1,"field":"near"})", "not found");
  check(R"({"id":"x","audio":"mono.wav","label":1,"field":"far"})", "expects 6 channels");
  check(R"({"id":"x","audio":"mono.wav","label":1,"field":"close"})", "unknown field");
  check(R"({"id":"x","audio":"mono.wav","label":1,"field":"near"})"
        "\n"
        R"({"id":"x","audio":"mono.wav","label":0,"field":"near"})",
        "duplicate id");
  check("not json", "invalid JSON");
}

TEST(Manifest, HundredRecordFixturePartitions) {
  TempDir dir;
  write_wav(Waveform(1, 10, 16000), dir.path() / "n.wav");
  write_wav(Waveform(2, 10, 16000), dir.path() / "m.wav");
  write_wav(Waveform(6, 10, 16000), dir.path() / "f.wav");
  std::vector<ManifestEntry> entries;
  for (int i = 0; i < 100; ++i) {
    const Field f = i % 5 == 0 ? Field::Near : i % 5 == 1 ? Field::Mid : Field::Far;
    const char* file = f == Field::Near ? "n.wav" : f == Field::Mid ? "m.wav" : "f.wav";
    entries.push_back({"utt" + std::to_string(i), {dir.path() / file}, i % 3 == 0, f});
  }
  write_manifest(entries, dir.path() / "m.jsonl");
  auto loaded = load_manifest(dir.path() / "m.jsonl");
  ASSERT_EQ(loaded.size(), 100u);
  int near = 0, mid = 0, far = 0;
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    EXPECT_EQ(loaded[i].id, entries[i].id);
    EXPECT_EQ(loaded[i].label, entries[i].label);
    near += loaded[i].field == Field::Near;
    mid += loaded[i].field == Field::Mid;
    far += loaded[i].field == Field::Far;
  }
  EXPECT_EQ(near, 20);
  EXPECT_EQ(mid, 20);
  EXPECT_EQ(far, 60);
}

TEST(Manifest, PerChannelListLoadsAsOneWaveform) {
  TempDir dir;
  auto a = random_pcm16_content(1, 20, 7), b = random_pcm16_content(1, 20, 8);
  write_wav(a, dir.path() / "c0.wav");
  write_wav(b, dir.path() / "c1.wav");
  write_text(dir.path() / "m.jsonl", R"({"id":"x","audio":["c0.wav","c1.wav"],"label":1,"field":"mid"})"
                                     "\n");
  auto entries = load_manifest(dir.path() / "m.jsonl");
  ASSERT_EQ(entries.size(), 1u);
  auto w = load_entry_audio(entries[0]);
  ASSERT_EQ(w.channels(), 2u);
  EXPECT_EQ(w.samples[0], a.samples[0]);
  EXPECT_EQ(w.samples[1], b.samples[0]);
}

namespace {

Checkpoint sample_checkpoint() {
  Checkpoint c;
  c.meta = {{"config", {{"channels", 6}}}, {"step", 42}, {"rng", rng_state(Rng(9))}};
  c.tensors.push_back({"encoder.weight", {2, 3}, {1.f, -2.f, 3.5f, 1e-30f, -0.f, 7.f}});
  c.tensors.push_back({"head.bias", {2}, {0.25f, std::nanf("")}});
  c.tensors.push_back({"scalar", {}, {5.f}});
  return c;
}

}  // namespace

TEST(Checkpoint, SaveLoadSaveIsIdempotent) {
  TempDir dir;
  auto c = sample_checkpoint();
  save_checkpoint(c, dir.path() / "a.kwsm");
  auto loaded = load_checkpoint(dir.path() / "a.kwsm");
  save_checkpoint(loaded, dir.path() / "b.kwsm");
  EXPECT_EQ(read_file(dir.path() / "a.kwsm"), read_file(dir.path() / "b.kwsm"));
  ASSERT_EQ(loaded.tensors.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(loaded.tensors[i].name, c.tensors[i].name);
    EXPECT_EQ(loaded.tensors[i].shape, c.tensors[i].shape);
    EXPECT_EQ(std::memcmp(loaded.tensors[i].values.data(), c.tensors[i].values.data(),
                          4 * c.tensors[i].values.size()),
              0);
  }
  EXPECT_EQ(loaded.meta, c.meta);
}

TEST(Checkpoint, ByteFlipFailsChecksum) {
  auto bytes = encode_checkpoint(sample_checkpoint());
  for (std::size_t at : {std::size_t{20}, bytes.size() / 2, bytes.size() - 6}) {
    auto corrupt = bytes;
    corrupt[at] ^= 0x01;
    EXPECT_THROW(decode_checkpoint(corrupt), FormatError) << "offset " << at;
  }
}

TEST(Checkpoint, UnknownVersionRejected) {
  auto bytes = encode_checkpoint(sample_checkpoint());
  bytes[4] = 2;
  try {
    decode_checkpoint(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
}

TEST(Checkpoint, TruncationAndTrailingBytesRejected) {
  auto bytes = encode_checkpoint(sample_checkpoint());
  auto shorter = bytes;
  shorter.resize(bytes.size() - 9);
  EXPECT_THROW(decode_checkpoint(shorter), FormatError);
  auto longer = bytes;
  longer.push_back(0);
  EXPECT_THROW(decode_checkpoint(longer), FormatError);
}

TEST(Checkpoint, RngStateRoundTrip) {
  Rng a(123);
  a.discard(1000);
  Rng b = rng_from_state(rng_state(a));
  for (int i = 0; i < 100; ++i) ASSERT_EQ(a(), b());
  EXPECT_THROW(rng_from_state("garbage"), FormatError);
}

// Scene synthesis.

TEST(Scene, BroadsideAnechoicNoiselessGivesIdenticalCopies) {
  scene::SceneConfig cfg;
  cfg.seed = 5;
  cfg.diffuse_noise = false;
  cfg.source_azimuth_deg = 90.0;
  cfg.source_distance_m = 2.0;
  auto s = scene::synthesize_scene(cfg);
  ASSERT_EQ(s.mixture.channels(), 6u);
  for (std::size_t c = 1; c < 6; ++c) EXPECT_EQ(s.mixture.samples[c], s.mixture.samples[0]);
  EXPECT_EQ(s.mixture.samples, s.clean.samples);

  // Channel 0 is the utterance at 1/r gain placed at the onset.
  Rng variation = scene::substream(cfg.seed, 1);
  auto utt = scene::keyword_utterance(cfg.keyword_seed, variation);
  ASSERT_EQ(utt.size(), s.keyword_length);
  for (std::size_t i = 0; i < utt.size(); ++i) {
    ASSERT_NEAR(s.mixture.samples[0][s.keyword_onset + i], 0.05 * utt[i] / 2.0, 1e-15);
  }
}

TEST(Scene, EndfireDelayMatchesGeometry) {
  auto delays = array::plane_wave_delays(0.0, array::ArrayGeometry::uniform_linear(6, 0.04), 16000);
  const double expected = 0.04 / 343.0 * 16000.0;
  EXPECT_NEAR(delays[1], expected, 1e-12);
  EXPECT_NEAR(expected, 1.866, 1e-3);
  EXPECT_NEAR(0.04 / 343.0 * 1e6, 116.6, 0.05);
  for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(delays[k], k * expected, 1e-9);
}

TEST(Scene, FractionalDelayMatchesAnalyticSinusoid) {
  const double f = 1000.0 / 16000.0, delay = 1.866;
  std::vector<double> x(2000);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sin(2 * std::numbers::pi * f * i);
  auto y = scene::fractional_delay(x, delay);
  for (std::size_t i = 100; i < 1900; ++i) {
    ASSERT_NEAR(y[i], std::sin(2 * std::numbers::pi * f * (i - delay)), 2e-3);
  }
  auto z = scene::fractional_delay(x, 3.0);
  for (std::size_t i = 3; i < x.size(); ++i) ASSERT_EQ(z[i], x[i - 3]);
}

TEST(Scene, MeasuredSnrMatchesConfig) {
  for (double snr : {0.0, 5.0, 10.0}) {
    scene::SceneConfig cfg;
    cfg.seed = 11;
    cfg.snr_db = snr;
    cfg.source_azimuth_deg = 40.0;
    cfg.reverb.rt60_s = 0.4;
    auto s = scene::synthesize_scene(cfg);
    double pk = 0, pn = 0;
    for (std::size_t i = 0; i < s.keyword_length; ++i) {
      const double v = s.clean.samples[0][s.keyword_onset + i];
      pk += v * v;
    }
    pk /= static_cast<double>(s.keyword_length);
    for (std::size_t i = 0; i < s.mixture.length(); ++i) {
      const double n = s.mixture.samples[0][i] - s.keyword_image.samples[0][i];
      pn += n * n;
    }
    pn /= static_cast<double>(s.mixture.length());
    EXPECT_NEAR(10 * std::log10(pk / pn), snr, 0.5);
  }
}

TEST(Scene, DeterministicAndNegativeIsPositiveMinusKeyword) {
  scene::SceneConfig cfg;
  cfg.seed = 77;
  cfg.reverb.rt60_s = 0.5;
  cfg.interferers.push_back({scene::InterfererKind::Babble, 20.0, 3.0, 5.0});
  cfg.interferers.push_back({scene::InterfererKind::Confuser, 150.0, 2.0, 8.0});
  auto a = scene::synthesize_scene(cfg);
  auto b = scene::synthesize_scene(cfg);
  EXPECT_EQ(a.mixture.samples, b.mixture.samples);
  cfg.label = 0;
  auto neg = scene::synthesize_scene(cfg);
  for (std::size_t c = 0; c < 6; ++c)
    for (std::size_t i = 0; i < a.mixture.length(); ++i) {
      ASSERT_NEAR(neg.mixture.samples[c][i], a.mixture.samples[c][i] - a.keyword_image.samples[c][i], 1e-12);
      ASSERT_EQ(neg.keyword_image.samples[c][i], 0.0);
    }
}

TEST(Scene, InvalidConfigRejected) {
  scene::SceneConfig cfg;
  cfg.snr_db = std::numeric_limits<double>::infinity();
  EXPECT_THROW(scene::synthesize_scene(cfg), ConfigError);
  cfg = {};
  cfg.source_azimuth_deg = 200;
  EXPECT_THROW(scene::synthesize_scene(cfg), ConfigError);
  cfg = {};
  cfg.duration_s = 0;
  EXPECT_THROW(scene::synthesize_scene(cfg), ConfigError);
  cfg = {};
  cfg.noise_corner_hz = 0;
  EXPECT_THROW(scene::synthesize_scene(cfg), ConfigError);
}

namespace {

double correlation(const std::vector<double>& a, const std::vector<double>& b, std::size_t n) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

}  // namespace

TEST(Scene, NearMissSharesOnlyTheFirstSyllable) {
  for (std::uint64_t other = 1; other <= 10; ++other) {
    Rng v1(other), v2(other);
    const auto kw = scene::keyword_utterance(20240601, v1);
    const auto nm = scene::near_miss_utterance(20240601, other * 977, v2);
    // The shortest first syllable lasts 0.22 * 0.88 s.
    EXPECT_GT(correlation(kw, nm, static_cast<std::size_t>(0.15 * 16000)), 0.999);
    EXPECT_LT(correlation(kw, nm, std::min(kw.size(), nm.size())), 0.9);
  }
}

TEST(Scene, BenchmarkCorpusDrawsOnlyNearMisses) {
  const auto bench = scene::benchmark_corpus();
  const scene::CorpusConfig plain;
  std::size_t with_interferer = 0;
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto b = scene::draw_scene_config(bench, Field::Far, s, 0);
    for (const auto& i : b.interferers) {
      EXPECT_EQ(i.kind, scene::InterfererKind::NearMiss);
      EXPECT_GE(i.sir_db, -5.0);
      EXPECT_LE(i.sir_db, 5.0);
    }
    with_interferer += b.interferers.size();
    EXPECT_EQ(b.noise_corner_hz, 2500.0);
    EXPECT_GE(b.snr_db, 0.0);
    EXPECT_LE(b.snr_db, 10.0);
    for (const auto& i : scene::draw_scene_config(plain, Field::Far, s, 0).interferers)
      EXPECT_NE(i.kind, scene::InterfererKind::NearMiss);
  }
  EXPECT_GT(with_interferer, 150u);
}

TEST(Scene, FieldScenesCarryFieldChannelCounts) {
  scene::CorpusConfig corpus;
  EXPECT_EQ(scene::synthesize_field_scene(corpus, Field::Near, 1).mixture.channels(), 1u);
  EXPECT_EQ(scene::synthesize_field_scene(corpus, Field::Mid, 2).mixture.channels(), 2u);
  auto far = scene::synthesize_field_scene(corpus, Field::Far, 3);
  EXPECT_EQ(far.mixture.channels(), 6u);
  EXPECT_EQ(far.mixture.length(), 32000u);
}

TEST(Scene, LabelsFollowPositiveFraction) {
  scene::CorpusConfig corpus;
  int positives = 0;
  for (std::uint64_t s = 0; s < 2000; ++s) positives += scene::draw_label(corpus, s);
  EXPECT_NEAR(positives / 2000.0, corpus.positive_fraction, 0.04);
}
