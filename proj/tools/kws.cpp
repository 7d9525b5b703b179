// Command-line entry points: simulate, train, eval, predict, beamform, wpe, export-hist.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "kws/error.hpp"
#include "kws/evaluation.hpp"
#include "kws/io.hpp"
#include "kws/model.hpp"
#include "kws/pipeline.hpp"
#include "kws/trainer.hpp"

using namespace kws;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const char* const kModule = "cli";

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  std::size_t threads = 1;
};

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError(kModule, "cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(kModule, p.string() + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& text) {
  const std::vector<std::uint8_t> bytes(text.begin(), text.end());
  io::write_file(p, bytes);
}

// File values first, then flags.
pipeline::RunConfig load_config(const Globals& g, const fs::path& fallback = {}) {
  pipeline::RunConfig c;
  if (!g.config.empty()) c = pipeline::run_config_from_json(read_json(g.config));
  else if (!fallback.empty() && fs::exists(fallback)) c = pipeline::run_config_from_json(read_json(fallback));
  if (g.seed) c.seed = *g.seed;
  c.trainer.seed = c.seed;
  return c;
}

void echo(const pipeline::RunConfig& c, const fs::path& run_dir = {}) {
  const auto text = to_json(c).dump(2) + "\n";
  std::cerr << "effective config:\n" << text;
  if (!run_dir.empty()) write_text(run_dir / "config.json", text);
}

void prepare_out_dir(const fs::path& dir, bool force, bool allow_existing = false) {
  if (dir.empty()) throw ConfigError(kModule, "--out is required");
  if (fs::exists(dir) && !fs::is_directory(dir)) throw IoError(kModule, dir.string() + " exists and is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir) && !force && !allow_existing)
    throw IoError(kModule, dir.string() + " is not empty; pass --force to write into it");
  fs::create_directories(dir);
}

model::ModelConfig preset(const std::string& name) {
  using model::ReferenceModel;
  if (name == "benchmark") return model::benchmark_config(6, false);
  if (name == "single") return model::reference_config(ReferenceModel::SingleChannel);
  if (name == "multi") return model::reference_config(ReferenceModel::MultiChannel);
  if (name == "multi-centroid") return model::reference_config(ReferenceModel::MultiChannelCentroid);
  if (name == "multi-look") return model::reference_config(ReferenceModel::MultiLookCentroid);
  throw ConfigError(kModule, "unknown model preset '" + name + "'");
}

// Frontend and fbank settings travel with a run in its config.json.
pipeline::RunConfig config_for_checkpoint(const Globals& g, const fs::path& checkpoint) {
  return load_config(g, checkpoint.parent_path() / "config.json");
}

void check_channels(const std::vector<io::ManifestEntry>& entries, const pipeline::FrontendOptions& f,
                    const model::ModelConfig& m) {
  for (const auto& e : entries) {
    const auto ch = pipeline::output_channels(f, io::field_channels(e.field));
    if (ch != m.channels)
      throw ContractError(kModule, "entry '" + e.id + "' yields " + std::to_string(ch) + " channels but the model has " +
                                       std::to_string(m.channels));
  }
}

// ---------------------------------------------------------------- simulate

struct SimulateArgs {
  std::optional<std::size_t> train, dev, eval;
  std::string corpus_preset;
};

void cmd_simulate(const Globals& g, const SimulateArgs& a) {
  auto c = load_config(g);
  if (a.corpus_preset == "benchmark") c.corpus = scene::benchmark_corpus();
  else if (!a.corpus_preset.empty() && a.corpus_preset != "default")
    throw ConfigError(kModule, "unknown corpus preset '" + a.corpus_preset + "'");
  if (a.train) c.simulate.train = *a.train;
  if (a.dev) c.simulate.dev = *a.dev;
  if (a.eval) c.simulate.eval = *a.eval;
  if (c.simulate.train > 0 && c.simulate.train_fields.empty()) throw ConfigError(kModule, "simulate.train_fields is empty");
  const fs::path out = g.out;
  prepare_out_dir(out, g.force);
  echo(c, out);

  auto split = [&](pipeline::Split s, std::size_t n, auto field_of) {
    const auto name = pipeline::to_string(s);
    fs::create_directories(out / name);
    std::vector<io::ManifestEntry> entries(n);
    pipeline::parallel_for(n, g.threads, [&](std::size_t i) {
      const io::Field field = field_of(i);
      const auto seed = pipeline::scene_seed(c.seed, s, i);
      const auto scene = scene::synthesize_field_scene(c.corpus, field, seed);
      const auto id = name + "-" + io::to_string(field) + "-" + std::to_string(seed);
      const fs::path rel = fs::path(name) / (id + ".wav");
      io::write_wav(scene.mixture, out / rel);
      entries[i] = {id, {rel}, scene.label, field};
    });
    io::write_manifest(entries, out / (name + ".jsonl"));
    std::size_t pos = 0;
    for (const auto& e : entries) pos += static_cast<std::size_t>(e.label);
    std::cout << name << ": " << n << " scenes (" << pos << " positive) -> " << (out / (name + ".jsonl")).string() << "\n";
  };
  const auto& s = c.simulate;
  split(pipeline::Split::Train, s.train, [&](std::size_t i) { return s.train_fields[i % s.train_fields.size()]; });
  split(pipeline::Split::Dev, s.dev, [&](std::size_t) { return s.dev_field; });
  split(pipeline::Split::Eval, s.eval, [&](std::size_t) { return s.eval_field; });
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string train_manifest, dev_manifest, model_preset;
  std::optional<std::size_t> channels;
  bool centroid = false;
  bool resume = false;
  std::size_t stop_after = 0;
};

void cmd_train(const Globals& g, const TrainArgs& a) {
  const fs::path out = g.out;
  const bool resuming = a.resume && fs::exists(out / "last.ckpt");
  auto c = load_config(g, resuming ? out / "config.json" : fs::path{});
  if (!a.model_preset.empty()) {
    c.model = preset(a.model_preset);
    if (a.model_preset == "multi-look") c.frontend.mode = pipeline::FrontendMode::MultiLook;
  }
  if (a.channels) {
    c.model.channels = *a.channels;
    c.frontend.channels = *a.channels;
  }
  if (a.centroid) c.model.centroid_aware = true;
  if (!a.train_manifest.empty()) c.train_manifest = a.train_manifest;
  if (!a.dev_manifest.empty()) c.dev_manifest = a.dev_manifest;
  c.validate();
  if (c.train_manifest.empty()) throw ConfigError(kModule, "no training manifest (data.train or --train)");
  prepare_out_dir(out, g.force, resuming);
  echo(c, out);

  std::cout << "parameters: " << model::parameter_count(c.model) << " (channels " << c.model.channels << ", D "
            << c.model.latent_dim << (c.model.centroid_aware ? ", centroid-aware" : "") << ")\n";

  const auto train_set = pipeline::manifest_examples(io::load_manifest(c.train_manifest), c.frontend, c.fbank, g.threads);
  pipeline::LabeledSet dev_set;
  if (!c.dev_manifest.empty()) {
    const auto dev_entries = io::load_manifest(c.dev_manifest);
    check_channels(dev_entries, c.frontend, c.model);
    dev_set = pipeline::manifest_examples(dev_entries, c.frontend, c.fbank, g.threads);
  }
  const auto data = pipeline::training_data(train_set, std::move(dev_set));
  std::cout << "data: near " << data.near.size() << ", mid " << data.mid.size() << ", far " << data.far.size()
            << ", dev " << data.dev.size() << "\n";

  auto trainer = resuming ? train::Trainer::resume(out / "last.ckpt", data, out)
                          : train::Trainer(c.model, c.trainer, data, out);
  if (resuming) std::cout << "resuming at step " << trainer.step() << " of " << trainer.total_steps() << "\n";
  else std::cout << "steps: " << trainer.total_steps() << "\n";
  const auto r = trainer.run(a.stop_after);
  if (!r.finished) {
    std::cout << "stopped after " << r.steps << " steps; continue with --resume\n";
    return;
  }
  if (r.last_dev) {
    const auto text = eval::format_report(*r.last_dev);
    std::cout << "dev: " << text << "\n";
    write_text(out / "dev_report.txt", text + "\n");
  } else {
    std::cout << "dev: no dev set\n";
  }
  if (r.best_dev_score) std::cout << "best dev score: " << eval::format_rate(r.best_dev_score) << "\n";
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string checkpoint, manifest, export_hist;
  double threshold = 0.5;
  std::size_t bins = 40;
};

struct Scored {
  train::TrainedModel trained;
  pipeline::LabeledSet set;
  train::Predictions predictions;
};

Scored score_manifest(const Globals& g, const std::string& checkpoint, std::string manifest) {
  if (checkpoint.empty()) throw ConfigError(kModule, "--checkpoint is required");
  auto c = config_for_checkpoint(g, checkpoint);
  if (manifest.empty()) manifest = c.eval_manifest.string();
  if (manifest.empty()) throw ConfigError(kModule, "no manifest (data.eval or --manifest)");
  echo(c);
  auto trained = train::load_trained(io::load_checkpoint(checkpoint));
  const auto entries = io::load_manifest(manifest);
  check_channels(entries, c.frontend, trained.model.config());
  auto set = pipeline::manifest_examples(entries, c.frontend, c.fbank, g.threads);
  auto predictions = train::predict(trained.model, trained.centroids, set.examples);
  return {std::move(trained), std::move(set), std::move(predictions)};
}

void export_histogram(const Scored& s, const fs::path& path, std::size_t bins) {
  const auto h = eval::margin_histogram(s.predictions.distances, train::labels_of(s.set.examples), bins);
  eval::write_histogram(h, path);
  std::cout << "histogram: " << path.string() << "\n";
}

void cmd_eval(const Globals& g, const EvalArgs& a) {
  if (!(a.threshold >= 0.0 && a.threshold <= 1.0)) throw ConfigError(kModule, "threshold must lie in [0, 1]");
  const auto s = score_manifest(g, a.checkpoint, a.manifest);
  const auto r = eval::report(eval::confusion(s.predictions.probabilities, train::labels_of(s.set.examples), a.threshold),
                              a.threshold);
  std::cout << eval::format_report(r) << "\n";
  if (!g.out.empty()) {
    prepare_out_dir(g.out, true);
    write_text(fs::path(g.out) / "eval_report.txt", eval::format_report(r) + "\n");
    write_text(fs::path(g.out) / "eval_report.csv", eval::report_csv_header() + "\n" + eval::report_csv_row(r) + "\n");
  }
  if (!a.export_hist.empty()) export_histogram(s, a.export_hist, a.bins);
}

void cmd_export_hist(const Globals& g, const EvalArgs& a) {
  if (g.out.empty()) throw ConfigError(kModule, "--out names the histogram file");
  const auto s = score_manifest(g, a.checkpoint, a.manifest);
  export_histogram(s, g.out, a.bins);
}

// ---------------------------------------------------------------- predict

void cmd_predict(const Globals& g, const std::string& checkpoint, const std::string& wav) {
  if (checkpoint.empty()) throw ConfigError(kModule, "--checkpoint is required");
  const auto c = config_for_checkpoint(g, checkpoint);
  echo(c);
  const auto trained = train::load_trained(io::load_checkpoint(checkpoint));
  const auto w = io::read_wav(wav);
  const auto ch = pipeline::output_channels(c.frontend, w.channels());
  if (ch != trained.model.config().channels)
    throw ContractError(kModule, wav + " yields " + std::to_string(ch) + " channels but the model has " +
                                     std::to_string(trained.model.config().channels));
  const std::vector<train::Example> one{{pipeline::extract(w, c.frontend, c.fbank), 0}};
  const auto p = train::predict(trained.model, trained.centroids, one);
  std::printf("%.6f\n", p.probabilities[0]);
}

// ---------------------------------------------------------------- beamform / wpe

struct ArrayArgs {
  std::string input, output;
  std::optional<std::vector<double>> looks;
  bool wpe = false;
  std::optional<std::size_t> taps, delay, iterations;
};

void cmd_beamform(const Globals& g, const ArrayArgs& a) {
  auto c = load_config(g);
  if (a.looks) c.frontend.array.looks_deg = *a.looks;
  echo(c);
  const auto w = io::read_wav(a.input);
  const auto& geom = c.frontend.array.geometry;
  if (w.channels() != geom.size())
    throw ContractError(kModule, a.input + " has " + std::to_string(w.channels()) + " channels; the array has " +
                                     std::to_string(geom.size()));
  Waveform out;
  if (a.wpe) {
    out = array::multi_look_stack(w, c.frontend.array);
  } else {
    out = array::beamform_waveform(w, c.frontend.array);
    out.samples.push_back(w.samples[0]);
  }
  io::write_wav(out, a.output, io::SampleFormat::Float32);
  std::cout << a.output << ": " << out.channels() << " channels (" << c.frontend.array.looks_deg.size()
            << " beams + raw channel 0)\n";
}

void cmd_wpe(const Globals& g, const ArrayArgs& a) {
  auto c = load_config(g);
  if (a.taps) c.frontend.array.wpe.taps = *a.taps;
  if (a.delay) c.frontend.array.wpe.delay = *a.delay;
  if (a.iterations) c.frontend.array.wpe.iterations = *a.iterations;
  echo(c);
  const auto w = io::read_wav(a.input);
  const auto out = array::wpe_waveform(w, c.frontend.array);
  io::write_wav(out, a.output, io::SampleFormat::Float32);
  std::cout << a.output << ": " << out.channels() << " channels dereverberated\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multichannel keyword spotting: corpus simulation, training, evaluation and array front ends"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON run configuration; flags override its values")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "seed for corpus splits, initialization and sampling");
  app.add_option("--out", g.out, "output directory (file for export-hist)");
  app.add_flag("--force", g.force, "write into a non-empty output directory");
  app.add_option("--threads", g.threads, "workers for synthesis and feature extraction")->check(CLI::PositiveNumber);

  SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate", "synthesize a seeded corpus with train/dev/eval manifests");
  simulate->add_option("--train", sim.train, "training scenes");
  simulate->add_option("--dev", sim.dev, "dev scenes");
  simulate->add_option("--eval", sim.eval, "eval scenes");
  simulate->add_option("--corpus", sim.corpus_preset, "corpus preset: default or benchmark");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "run the curriculum and write best/last checkpoints");
  train_cmd->add_option("--train", tr.train_manifest, "training manifest")->check(CLI::ExistingFile);
  train_cmd->add_option("--dev", tr.dev_manifest, "dev manifest")->check(CLI::ExistingFile);
  train_cmd->add_option("--model", tr.model_preset, "benchmark, single, multi, multi-centroid or multi-look");
  train_cmd->add_option("--channels", tr.channels, "model channels; raw input keeps the first N")->check(CLI::PositiveNumber);
  train_cmd->add_flag("--centroid", tr.centroid, "centroid-aware head");
  train_cmd->add_flag("--resume", tr.resume, "continue from <out>/last.ckpt when present");
  train_cmd->add_option("--stop-after", tr.stop_after, "stop after this many total steps");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "FAR/FRR/Score of a checkpoint on a manifest");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->check(CLI::ExistingFile);
  eval_cmd->add_option("--manifest", ev.manifest, "manifest to score")->check(CLI::ExistingFile);
  eval_cmd->add_option("--threshold", ev.threshold, "decision threshold on the keyword probability");
  eval_cmd->add_option("--export-hist", ev.export_hist, "also write the centroid margin histogram here");
  eval_cmd->add_option("--bins", ev.bins, "histogram bins")->check(CLI::PositiveNumber);

  auto* hist_cmd = app.add_subcommand("export-hist", "centroid margin histogram per class (CSV at --out)");
  hist_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->check(CLI::ExistingFile);
  hist_cmd->add_option("--manifest", ev.manifest, "manifest to score")->check(CLI::ExistingFile);
  hist_cmd->add_option("--bins", ev.bins, "histogram bins")->check(CLI::PositiveNumber);

  std::string predict_ckpt, predict_wav;
  auto* predict_cmd = app.add_subcommand("predict", "keyword probability of one recording");
  predict_cmd->add_option("--checkpoint", predict_ckpt, "checkpoint file")->check(CLI::ExistingFile);
  predict_cmd->add_option("wav", predict_wav, "recording")->required()->check(CLI::ExistingFile);

  ArrayArgs ar;
  auto* beam_cmd = app.add_subcommand("beamform", "MVDR beams at the look directions plus raw channel 0");
  beam_cmd->add_option("input", ar.input, "array recording")->required()->check(CLI::ExistingFile);
  beam_cmd->add_option("output", ar.output, "multi-look output WAV")->required();
  beam_cmd->add_option("--looks", ar.looks, "look directions in degrees")->delimiter(',');
  beam_cmd->add_flag("--wpe", ar.wpe, "dereverberate before beamforming");

  auto* wpe_cmd = app.add_subcommand("wpe", "WPE dereverberation of every channel");
  wpe_cmd->add_option("input", ar.input, "recording")->required()->check(CLI::ExistingFile);
  wpe_cmd->add_option("output", ar.output, "output WAV")->required();
  wpe_cmd->add_option("--taps", ar.taps, "prediction taps");
  wpe_cmd->add_option("--delay", ar.delay, "prediction delay in frames");
  wpe_cmd->add_option("--iterations", ar.iterations, "reweighting iterations");

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*simulate) cmd_simulate(g, sim);
    else if (*train_cmd) cmd_train(g, tr);
    else if (*eval_cmd) cmd_eval(g, ev);
    else if (*hist_cmd) cmd_export_hist(g, ev);
    else if (*predict_cmd) cmd_predict(g, predict_ckpt, predict_wav);
    else if (*beam_cmd) cmd_beamform(g, ar);
    else if (*wpe_cmd) cmd_wpe(g, ar);
  } catch (const kws::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
