#include "kws/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>

#include "kws/error.hpp"

namespace kws::pipeline {

namespace {

const char* const kModule = "cli";
using json = nlohmann::json;

void reject_unknown(const json& j, const json& known, const std::string& section) {
  if (!j.is_object()) throw ConfigError(kModule, section + " must be an object");
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw ConfigError(kModule, "unknown " + section + " key '" + key + "'");
}

template <typename F>
void get(const json& j, const char* key, F& field) {
  if (j.contains(key)) j.at(key).get_to(field);
}

json to_json(const scene::FieldRanges& r) {
  return {{"snr_db", {r.snr_min_db, r.snr_max_db}},
          {"distance_m", {r.distance_min_m, r.distance_max_m}},
          {"rt60_s", {r.rt60_min_s, r.rt60_max_s}}};
}

void range_from_json(const json& j, const char* key, double& lo, double& hi) {
  if (!j.contains(key)) return;
  const auto v = j.at(key).get<std::vector<double>>();
  if (v.size() != 2) throw ConfigError(kModule, std::string(key) + " must be [min, max]");
  lo = v[0];
  hi = v[1];
}

scene::FieldRanges ranges_from_json(const json& j, scene::FieldRanges r) {
  reject_unknown(j, to_json(r), "field range");
  range_from_json(j, "snr_db", r.snr_min_db, r.snr_max_db);
  range_from_json(j, "distance_m", r.distance_min_m, r.distance_max_m);
  range_from_json(j, "rt60_s", r.rt60_min_s, r.rt60_max_s);
  return r;
}

json to_json(const array::ArrayGeometry& g) {
  return {{"positions_m", g.positions_m}, {"speed_of_sound", g.speed_of_sound}};
}

array::ArrayGeometry geometry_from_json(const json& j, array::ArrayGeometry g) {
  reject_unknown(j, to_json(g), "geometry");
  get(j, "positions_m", g.positions_m);
  get(j, "speed_of_sound", g.speed_of_sound);
  g.validate();
  return g;
}

json to_json(const array::WpeConfig& w) {
  return {{"taps", w.taps}, {"delay", w.delay}, {"iterations", w.iterations}, {"power_floor", w.power_floor}};
}

std::string mode_name(FrontendMode m) { return m == FrontendMode::Raw ? "raw" : "multilook"; }

FrontendMode parse_mode(const std::string& s) {
  if (s == "raw") return FrontendMode::Raw;
  if (s == "multilook") return FrontendMode::MultiLook;
  throw ConfigError(kModule, "unknown frontend mode '" + s + "' (expected raw or multilook)");
}

json to_json(const SimulateCounts& s) {
  json fields = json::array();
  for (auto f : s.train_fields) fields.push_back(io::to_string(f));
  return {{"train", s.train}, {"dev", s.dev}, {"eval", s.eval}, {"train_fields", fields},
          {"dev_field", io::to_string(s.dev_field)}, {"eval_field", io::to_string(s.eval_field)}};
}

SimulateCounts simulate_from_json(const json& j) {
  SimulateCounts s;
  reject_unknown(j, to_json(s), "simulate");
  get(j, "train", s.train);
  get(j, "dev", s.dev);
  get(j, "eval", s.eval);
  if (j.contains("train_fields")) {
    s.train_fields.clear();
    for (const auto& f : j.at("train_fields")) s.train_fields.push_back(io::parse_field(f.get<std::string>()));
  }
  if (j.contains("dev_field")) s.dev_field = io::parse_field(j.at("dev_field").get<std::string>());
  if (j.contains("eval_field")) s.eval_field = io::parse_field(j.at("eval_field").get<std::string>());
  return s;
}

}  // namespace

std::size_t output_channels(const FrontendOptions& f, std::size_t input_channels) {
  if (f.mode == FrontendMode::MultiLook) return f.array.looks_deg.size() + 1;
  return f.channels == 0 ? input_channels : std::min(f.channels, input_channels);
}

dsp::FBankFeature extract(const Waveform& w, const FrontendOptions& f, const dsp::FBankConfig& fbank) {
  if (f.mode == FrontendMode::Raw) {
    if (f.channels == 0 || f.channels >= w.channels()) return dsp::log_mel_fbank(w, fbank);
    Waveform kept = w;
    kept.samples.resize(f.channels);
    return dsp::log_mel_fbank(kept, fbank);
  }
  if (f.wpe) return dsp::log_mel_fbank(array::multi_look_stack(w, f.array), fbank);
  Waveform beams = array::beamform_waveform(w, f.array);
  beams.samples.push_back(w.samples.at(0));
  return dsp::log_mel_fbank(beams, fbank);
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Dev: return "dev";
    case Split::Eval: return "eval";
  }
  return "?";
}

std::uint64_t scene_seed(std::uint64_t seed, Split split, std::size_t index) {
  if (index >= kMaxScenesPerSplit)
    throw ConfigError(kModule, "at most " + std::to_string(kMaxScenesPerSplit) + " scenes per split");
  const std::uint64_t offset = split == Split::Train ? 1000000 : split == Split::Eval ? 2000000 : 3000000;
  return seed * 10000000ULL + offset + index;
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr first;
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i; !failed && (i = next++) < n;) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!first) first = std::current_exception();
        failed = true;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (first) std::rethrow_exception(first);
}

std::vector<train::Example> scene_examples(const scene::CorpusConfig& corpus, io::Field field, std::uint64_t seed,
                                           Split split, std::size_t n, const FrontendOptions& f,
                                           const dsp::FBankConfig& fbank, std::size_t threads) {
  std::vector<train::Example> out(n);
  parallel_for(n, threads, [&](std::size_t i) {
    const auto s = scene::synthesize_field_scene(corpus, field, scene_seed(seed, split, i));
    out[i] = {extract(s.mixture, f, fbank), s.label};
  });
  return out;
}

LabeledSet manifest_examples(const std::vector<io::ManifestEntry>& entries, const FrontendOptions& f,
                             const dsp::FBankConfig& fbank, std::size_t threads) {
  LabeledSet set;
  set.examples.resize(entries.size());
  parallel_for(entries.size(), threads, [&](std::size_t i) {
    set.examples[i] = {extract(io::load_entry_audio(entries[i]), f, fbank), entries[i].label};
  });
  for (const auto& e : entries) {
    set.fields.push_back(e.field);
    set.ids.push_back(e.id);
  }
  return set;
}

train::TrainingData training_data(LabeledSet train, LabeledSet dev) {
  train::TrainingData d;
  for (std::size_t i = 0; i < train.examples.size(); ++i) {
    auto& pool = train.fields[i] == io::Field::Near ? d.near : train.fields[i] == io::Field::Mid ? d.mid : d.far;
    pool.push_back(std::move(train.examples[i]));
  }
  d.dev = std::move(dev.examples);
  return d;
}

json to_json(const scene::CorpusConfig& c) {
  return {{"keyword_seed", c.keyword_seed},
          {"near", to_json(c.near)},
          {"mid", to_json(c.mid)},
          {"far", to_json(c.far)},
          {"source_azimuth_deg", {c.source_azimuth_min_deg, c.source_azimuth_max_deg}},
          {"reverb_tail_level_db", c.reverb_tail_level_db},
          {"interferer_probability", c.interferer_probability},
          {"confuser_probability", c.confuser_probability},
          {"near_miss_probability", c.near_miss_probability},
          {"sir_db", {c.sir_min_db, c.sir_max_db}},
          {"positive_fraction", c.positive_fraction},
          {"noise_corner_hz", c.noise_corner_hz},
          {"duration_s", c.duration_s},
          {"sample_rate_hz", c.sample_rate_hz},
          {"geometry", to_json(c.geometry)}};
}

scene::CorpusConfig corpus_config_from_json(const json& j) {
  scene::CorpusConfig c;
  reject_unknown(j, to_json(c), "corpus");
  try {
    get(j, "keyword_seed", c.keyword_seed);
    if (j.contains("near")) c.near = ranges_from_json(j.at("near"), c.near);
    if (j.contains("mid")) c.mid = ranges_from_json(j.at("mid"), c.mid);
    if (j.contains("far")) c.far = ranges_from_json(j.at("far"), c.far);
    range_from_json(j, "source_azimuth_deg", c.source_azimuth_min_deg, c.source_azimuth_max_deg);
    get(j, "reverb_tail_level_db", c.reverb_tail_level_db);
    get(j, "interferer_probability", c.interferer_probability);
    get(j, "confuser_probability", c.confuser_probability);
    get(j, "near_miss_probability", c.near_miss_probability);
    range_from_json(j, "sir_db", c.sir_min_db, c.sir_max_db);
    get(j, "positive_fraction", c.positive_fraction);
    get(j, "noise_corner_hz", c.noise_corner_hz);
    get(j, "duration_s", c.duration_s);
    get(j, "sample_rate_hz", c.sample_rate_hz);
    if (j.contains("geometry")) c.geometry = geometry_from_json(j.at("geometry"), c.geometry);
  } catch (const json::exception& e) {
    throw ConfigError(kModule, std::string("corpus config: ") + e.what());
  }
  for (double p : {c.interferer_probability, c.confuser_probability, c.near_miss_probability, c.positive_fraction})
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(kModule, "corpus probabilities must lie in [0, 1]");
  return c;
}

json to_json(const dsp::FBankConfig& c) {
  return {{"sample_rate_hz", c.sample_rate_hz}, {"n_mels", c.n_mels}, {"win_ms", c.win_ms},
          {"hop_ms", c.hop_ms}, {"duration_s", c.duration_s}};
}

dsp::FBankConfig fbank_config_from_json(const json& j) {
  dsp::FBankConfig c;
  reject_unknown(j, to_json(c), "fbank");
  try {
    get(j, "sample_rate_hz", c.sample_rate_hz);
    get(j, "n_mels", c.n_mels);
    get(j, "win_ms", c.win_ms);
    get(j, "hop_ms", c.hop_ms);
    get(j, "duration_s", c.duration_s);
  } catch (const json::exception& e) {
    throw ConfigError(kModule, std::string("fbank config: ") + e.what());
  }
  if (c.sample_rate_hz <= 0 || c.n_mels == 0 || !(c.win_ms > 0) || !(c.hop_ms > 0) || !(c.duration_s > 0))
    throw ConfigError(kModule, "fbank extents must be positive");
  return c;
}

json to_json(const FrontendOptions& f) {
  return {{"mode", mode_name(f.mode)},
          {"channels", f.channels},
          {"wpe", f.wpe},
          {"geometry", to_json(f.array.geometry)},
          {"win_length", f.array.win_length},
          {"hop", f.array.hop},
          {"wpe_config", to_json(f.array.wpe)},
          {"mask_percentile", f.array.mask_percentile},
          {"looks_deg", f.array.looks_deg}};
}

FrontendOptions frontend_from_json(const json& j) {
  FrontendOptions f;
  reject_unknown(j, to_json(f), "frontend");
  try {
    if (j.contains("mode")) f.mode = parse_mode(j.at("mode").get<std::string>());
    get(j, "channels", f.channels);
    get(j, "wpe", f.wpe);
    if (j.contains("geometry")) f.array.geometry = geometry_from_json(j.at("geometry"), f.array.geometry);
    get(j, "win_length", f.array.win_length);
    get(j, "hop", f.array.hop);
    if (j.contains("wpe_config")) {
      const auto& w = j.at("wpe_config");
      reject_unknown(w, to_json(f.array.wpe), "wpe_config");
      get(w, "taps", f.array.wpe.taps);
      get(w, "delay", f.array.wpe.delay);
      get(w, "iterations", f.array.wpe.iterations);
      get(w, "power_floor", f.array.wpe.power_floor);
    }
    get(j, "mask_percentile", f.array.mask_percentile);
    get(j, "looks_deg", f.array.looks_deg);
  } catch (const json::exception& e) {
    throw ConfigError(kModule, std::string("frontend config: ") + e.what());
  }
  if (f.array.hop == 0 || f.array.win_length < f.array.hop) throw ConfigError(kModule, "frontend needs 0 < hop <= win_length");
  if (f.mode == FrontendMode::MultiLook && f.array.looks_deg.empty())
    throw ConfigError(kModule, "multilook front end needs at least one look direction");
  for (double a : f.array.looks_deg)
    if (!(a >= 0.0 && a <= 180.0)) throw ConfigError(kModule, "look directions must lie in [0, 180] degrees");
  return f;
}

void RunConfig::validate() const {
  model.validate();
  trainer.validate();
  if (fbank.n_mels != model.mel_bins)
    throw ConfigError(kModule, "fbank n_mels (" + std::to_string(fbank.n_mels) + ") differs from model mel_bins (" +
                                   std::to_string(model.mel_bins) + ")");
  if (fbank.num_frames() != model.input_frames)
    throw ConfigError(kModule, "fbank yields " + std::to_string(fbank.num_frames()) + " frames but the model expects " +
                                   std::to_string(model.input_frames));
  if (frontend.mode == FrontendMode::MultiLook && output_channels(frontend, 0) != model.channels)
    throw ConfigError(kModule, "multilook front end yields " + std::to_string(output_channels(frontend, 0)) +
                                   " channels but the model has " + std::to_string(model.channels));
  if (frontend.mode == FrontendMode::Raw && frontend.channels != 0 && frontend.channels != model.channels)
    throw ConfigError(kModule, "front end keeps " + std::to_string(frontend.channels) + " channels but the model has " +
                                   std::to_string(model.channels));
}

json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"model", model::to_json(c.model)},
          {"trainer", train::to_json(c.trainer)},
          {"fbank", to_json(c.fbank)},
          {"frontend", to_json(c.frontend)},
          {"corpus", to_json(c.corpus)},
          {"simulate", to_json(c.simulate)},
          {"data", {{"train", c.train_manifest.string()}, {"dev", c.dev_manifest.string()}, {"eval", c.eval_manifest.string()}}}};
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  reject_unknown(j, to_json(c), "config");
  try {
    get(j, "seed", c.seed);
    if (j.contains("model")) c.model = model::model_config_from_json(j.at("model"));
    if (j.contains("trainer")) c.trainer = train::trainer_config_from_json(j.at("trainer"));
    if (j.contains("fbank")) c.fbank = fbank_config_from_json(j.at("fbank"));
    if (j.contains("frontend")) c.frontend = frontend_from_json(j.at("frontend"));
    if (j.contains("corpus")) c.corpus = corpus_config_from_json(j.at("corpus"));
    if (j.contains("simulate")) c.simulate = simulate_from_json(j.at("simulate"));
    if (j.contains("data")) {
      const auto& d = j.at("data");
      reject_unknown(d, to_json(c).at("data"), "data");
      auto path = [&](const char* key, std::filesystem::path& p) {
        if (d.contains(key)) p = d.at(key).get<std::string>();
      };
      path("train", c.train_manifest);
      path("dev", c.dev_manifest);
      path("eval", c.eval_manifest);
    }
  } catch (const json::exception& e) {
    throw ConfigError(kModule, std::string("config: ") + e.what());
  } catch (const ParseError& e) {
    throw ConfigError(kModule, std::string("config: ") + e.what());
  }
  return c;
}

}  // namespace kws::pipeline
