#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include <json.hpp>

#include "kws/array.hpp"
#include "kws/dsp.hpp"
#include "kws/io.hpp"
#include "kws/model.hpp"
#include "kws/scene.hpp"
#include "kws/trainer.hpp"

// Glue between recordings and the trainer: front-end selection, feature
// extraction, corpus splits and the run configuration the CLI reads.
namespace kws::pipeline {

enum class FrontendMode {
  Raw,        // the array channels as recorded
  MultiLook,  // beams at the look directions plus raw channel 0
};

struct FrontendOptions {
  FrontendMode mode = FrontendMode::Raw;
  std::size_t channels = 0;  // Raw: keep at most the first N channels; 0 keeps all
  bool wpe = true;           // MultiLook: dereverberate before beamforming
  array::FrontendConfig array;
};

// Channel count the front end produces for a recording with `input_channels`.
std::size_t output_channels(const FrontendOptions& f, std::size_t input_channels);

// Front end, then log-mel features.
dsp::FBankFeature extract(const Waveform& w, const FrontendOptions& f, const dsp::FBankConfig& fbank);

// Split seeds never overlap: seed * 1e7 + {train 1e6, eval 2e6, dev 3e6} + index.
enum class Split { Train, Dev, Eval };
std::string to_string(Split s);
std::uint64_t scene_seed(std::uint64_t seed, Split split, std::size_t index);
inline constexpr std::size_t kMaxScenesPerSplit = 1000000;

// Runs fn(i) for i in [0, n) on `threads` workers. Results must not depend
// on scheduling; the first exception is rethrown after all workers stop.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

// Synthesizes scenes `first .. first + n` of a split and extracts features.
std::vector<train::Example> scene_examples(const scene::CorpusConfig& corpus, io::Field field,
                                           std::uint64_t seed, Split split, std::size_t n,
                                           const FrontendOptions& f, const dsp::FBankConfig& fbank,
                                           std::size_t threads = 1);

struct LabeledSet {
  std::vector<train::Example> examples;
  std::vector<io::Field> fields;
  std::vector<std::string> ids;
};

LabeledSet manifest_examples(const std::vector<io::ManifestEntry>& entries, const FrontendOptions& f,
                             const dsp::FBankConfig& fbank, std::size_t threads = 1);

// Groups a training manifest by field.
train::TrainingData training_data(LabeledSet train, LabeledSet dev);

struct SimulateCounts {
  std::size_t train = 0, dev = 0, eval = 0;
  std::vector<io::Field> train_fields{io::Field::Near, io::Field::Mid, io::Field::Far};  // cycled
  io::Field dev_field = io::Field::Far;
  io::Field eval_field = io::Field::Far;
};

// Everything a command needs. Unknown keys in any section are rejected.
struct RunConfig {
  std::uint64_t seed = 0;
  model::ModelConfig model = model::benchmark_config(6, false);
  train::TrainerConfig trainer;
  dsp::FBankConfig fbank;
  FrontendOptions frontend;
  scene::CorpusConfig corpus;
  SimulateCounts simulate;
  std::filesystem::path train_manifest, dev_manifest, eval_manifest;

  // Cross-field checks on top of each section's own validation.
  void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const scene::CorpusConfig& c);
scene::CorpusConfig corpus_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const dsp::FBankConfig& c);
dsp::FBankConfig fbank_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const FrontendOptions& f);
FrontendOptions frontend_from_json(const nlohmann::json& j);

}  // namespace kws::pipeline
