#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "kws/io.hpp"
#include "kws/model.hpp"

namespace fs = std::filesystem;
using namespace kws;

namespace {

struct Outcome {
  int status = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class Cli : public ::testing::Test {
 protected:
  static fs::path root() { return fs::temp_directory_path() / "kws_cli_test"; }

  static void SetUpTestSuite() {
    fs::remove_all(root());
    fs::create_directories(root());
    std::ofstream(root() / "mini.json") << R"({
      "model": {"channels": 6, "input_frames": 16, "mel_bins": 6, "encoder_width": 4,
                "encoder_kernel": 3, "encoder_stride": 4, "latent_dim": 8},
      "fbank": {"n_mels": 6, "duration_s": 0.182},
      "trainer": {"batch_size": 8, "phases": [{"field": "far", "epochs": 3}]},
      "simulate": {"train": 16, "dev": 6, "eval": 6, "train_fields": ["far"]},
      "corpus": {"positive_fraction": 0.5}
    })";
    ASSERT_EQ(run("--config mini.json --out corpus simulate").status, 0);
  }

  static Outcome run(const std::string& args) {
    static int counter = 0;
    const auto out = root() / ("stdout" + std::to_string(counter) + ".txt");
    const auto err = root() / ("stderr" + std::to_string(counter++) + ".txt");
    const std::string cmd = "cd " + root().string() + " && " + KWS_CLI_PATH + " " + args + " > " + out.string() +
                            " 2> " + err.string();
    const int raw = std::system(cmd.c_str());
    return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, slurp(out), slurp(err)};
  }

  static std::size_t count_lines(const fs::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);) n += !line.empty();
    return n;
  }

  static fs::path at(const std::string& rel) { return root() / rel; }
};

TEST_F(Cli, SimulateWritesOneWavPerManifestLine) {
  EXPECT_EQ(count_lines(at("corpus/train.jsonl")), 16u);
  EXPECT_EQ(count_lines(at("corpus/dev.jsonl")), 6u);
  std::size_t wavs = 0;
  for (const auto& e : fs::directory_iterator(at("corpus/train"))) wavs += e.path().extension() == ".wav";
  EXPECT_EQ(wavs, 16u);
  EXPECT_TRUE(fs::exists(at("corpus/config.json")));

  ASSERT_EQ(run("--config mini.json --out ten simulate --train 10 --dev 0 --eval 0").status, 0);
  EXPECT_EQ(count_lines(at("ten/train.jsonl")), 10u);
}

TEST_F(Cli, SameSeedGivesIdenticalCorpus) {
  ASSERT_EQ(run("--config mini.json --seed 4 --out a simulate --train 3 --dev 1 --eval 1").status, 0);
  ASSERT_EQ(run("--config mini.json --seed 4 --out b simulate --train 3 --dev 1 --eval 1").status, 0);
  for (const auto& split : {"train", "dev", "eval"}) {
    const auto ma = io::load_manifest(at(std::string("a/") + split + ".jsonl"));
    const auto mb = io::load_manifest(at(std::string("b/") + split + ".jsonl"));
    ASSERT_EQ(ma.size(), mb.size());
    for (std::size_t i = 0; i < ma.size(); ++i) {
      EXPECT_EQ(ma[i].id, mb[i].id);
      EXPECT_EQ(io::read_file(ma[i].audio[0]), io::read_file(mb[i].audio[0]));
    }
  }
}

TEST_F(Cli, SplitIdsAreDisjoint) {
  std::set<std::string> ids;
  std::size_t total = 0;
  for (const auto& split : {"train", "dev", "eval"})
    for (const auto& e : io::load_manifest(at(std::string("corpus/") + split + ".jsonl"))) {
      ids.insert(e.id.substr(e.id.rfind('-') + 1));  // the scene seed
      ++total;
    }
  EXPECT_EQ(ids.size(), total);
}

TEST_F(Cli, RefusesNonEmptyOutputWithoutForce) {
  const auto r = run("--config mini.json --out corpus simulate --train 1");
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find("cli:"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("--force"), std::string::npos);
}

TEST_F(Cli, TrainEmitsCheckpointsAndParameterCount) {
  const auto r = run("--config mini.json --out run train --train corpus/train.jsonl --dev corpus/dev.jsonl");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_TRUE(fs::exists(at("run/best.ckpt")));
  EXPECT_TRUE(fs::exists(at("run/last.ckpt")));
  EXPECT_TRUE(fs::exists(at("run/config.json")));
  EXPECT_NE(r.out.find("dev: FAR"), std::string::npos) << r.out;

  auto mini = model::model_config_from_json(nlohmann::json::parse(slurp(at("run/config.json")))["model"]);
  EXPECT_NE(r.out.find("parameters: " + std::to_string(model::parameter_count(mini))), std::string::npos);
}

TEST_F(Cli, SingleChannelModelIsSmaller) {
  auto count = [&](const std::string& channels) {
    const auto r = run("--config mini.json --out ch" + channels + " train --train corpus/train.jsonl --stop-after 1 --channels " +
                       channels);
    EXPECT_EQ(r.status, 0) << r.err;
    const auto pos = r.out.find("parameters: ");
    return std::stoul(r.out.substr(pos + 12));
  };
  EXPECT_LT(count("1"), count("6"));
}

TEST_F(Cli, InterruptedRunResumesWithContinuousTrace) {
  const std::string base = " train --train corpus/train.jsonl --dev corpus/dev.jsonl";
  ASSERT_EQ(run("--config mini.json --out whole" + base).status, 0);
  const auto stopped = run("--config mini.json --out part" + base + " --stop-after 3");
  ASSERT_EQ(stopped.status, 0) << stopped.err;
  EXPECT_NE(stopped.out.find("stopped after 3 steps"), std::string::npos);
  const auto resumed = run("--out part" + base + " --resume");
  ASSERT_EQ(resumed.status, 0) << resumed.err;
  EXPECT_NE(resumed.out.find("resuming at step 3"), std::string::npos) << resumed.out;
  EXPECT_EQ(slurp(at("whole/metrics.jsonl")), slurp(at("part/metrics.jsonl")));
  EXPECT_EQ(io::read_file(at("whole/last.ckpt")), io::read_file(at("part/last.ckpt")));
}

TEST_F(Cli, EvalPrintsThreeDecimalsAndExportsHistogram) {
  if (!fs::exists(at("run/best.ckpt")))
    ASSERT_EQ(run("--config mini.json --out run train --train corpus/train.jsonl --dev corpus/dev.jsonl").status, 0);
  const auto r = run("--out evaldir eval --checkpoint run/best.ckpt --manifest corpus/eval.jsonl --export-hist hist.csv");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_NE(r.out.find("Score "), std::string::npos);
  const auto score_at = r.out.find("Score ") + 6;
  EXPECT_EQ(r.out[score_at + 1], '.');
  EXPECT_EQ(r.out.substr(score_at + 5, 1), " ");
  std::ifstream hist(at("hist.csv"));
  std::string header;
  std::getline(hist, header);
  EXPECT_EQ(header, "bin_lo,bin_hi,count_neg,count_pos");
  EXPECT_TRUE(fs::exists(at("evaldir/eval_report.csv")));

  ASSERT_EQ(run("--out hist2.csv export-hist --checkpoint run/best.ckpt --manifest corpus/eval.jsonl").status, 0);
  EXPECT_EQ(slurp(at("hist.csv")), slurp(at("hist2.csv")));
}

TEST_F(Cli, EvalRejectsChannelMismatchBeforeInference) {
  if (!fs::exists(at("run/best.ckpt")))
    ASSERT_EQ(run("--config mini.json --out run train --train corpus/train.jsonl --dev corpus/dev.jsonl").status, 0);
  std::ofstream(root() / "mid.json") << R"({"simulate": {"eval_field": "mid"}})";
  ASSERT_EQ(run("--config mid.json --out mid simulate --train 0 --dev 0 --eval 2").status, 0);
  const auto r = run("eval --checkpoint run/best.ckpt --manifest mid/eval.jsonl");
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find("cli: entry"), std::string::npos) << r.err;
  EXPECT_EQ(r.out, "");
}

TEST_F(Cli, BeamformPassesChannelZeroThroughAndDefaultsLooks) {
  const auto wav = io::load_manifest(at("corpus/eval.jsonl"))[0].audio[0];
  const auto r = run("beamform " + wav.string() + " beams.wav");
  ASSERT_EQ(r.status, 0) << r.err;
  const auto in = io::read_wav(wav);
  const auto out = io::read_wav(at("beams.wav"));
  ASSERT_EQ(out.channels(), 4u);
  EXPECT_EQ(out.samples[3], in.samples[0]);
  const auto cfg = nlohmann::json::parse(r.err.substr(r.err.find('{')));
  EXPECT_EQ(cfg["frontend"]["looks_deg"], nlohmann::json({10.0, 90.0, 170.0}));

  const auto bad = run("beamform " + at("beams.wav").string() + " x.wav");
  EXPECT_NE(bad.status, 0);
  EXPECT_NE(bad.err.find("cli:"), std::string::npos);
}

TEST_F(Cli, WpeOnAnechoicInputIsNearIdentity) {
  // Fitting 6 mics x 10 taps on T frames removes about 60/T of even
  // unpredictable energy, so the clips are long enough for that to stay
  // well under 1 dB (6 s at an 8 ms hop: 750 frames, -0.36 dB).
  std::ofstream(root() / "anechoic.json") << R"({
    "corpus": {"far": {"rt60_s": [0, 0]}, "interferer_probability": 0, "duration_s": 6.0}
  })";
  ASSERT_EQ(run("--config anechoic.json --out dry simulate --train 0 --dev 0 --eval 3").status, 0);
  for (const auto& e : io::load_manifest(at("dry/eval.jsonl"))) {
    ASSERT_EQ(run("beamform " + e.audio[0].string() + " plain.wav").status, 0);
    ASSERT_EQ(run("beamform --wpe " + e.audio[0].string() + " wpe.wav").status, 0);
    const auto plain = io::read_wav(at("plain.wav"));
    const auto wpe = io::read_wav(at("wpe.wav"));
    double ep = 0.0, ew = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      ep += energy(plain.samples[c]);
      ew += energy(wpe.samples[c]);
    }
    EXPECT_LT(std::abs(10.0 * std::log10(ew / ep)), 1.0) << e.id;
  }
  const auto wav = io::load_manifest(at("dry/eval.jsonl"))[0].audio[0];
  ASSERT_EQ(run("wpe --iterations 0 " + wav.string() + " same.wav").status, 0);
  EXPECT_EQ(io::read_wav(at("same.wav")).samples, io::read_wav(wav).samples);
}

TEST_F(Cli, UsageErrorsExitNonzero) {
  EXPECT_NE(run("").status, 0);
  EXPECT_NE(run("train --bogus").status, 0);
  EXPECT_NE(run("--config missing.json simulate").status, 0);
  std::ofstream(root() / "typo.json") << R"({"trainer": {"learning_rate": 1}})";
  const auto r = run("--config typo.json --out typo simulate --train 1");
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find("unknown trainer config key 'learning_rate'"), std::string::npos) << r.err;
}

}  // namespace
