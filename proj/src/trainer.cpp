#include "kws/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "kws/error.hpp"
#include "kws/ops.hpp"

namespace kws::train {

namespace {

const char* kModule = "trainer";

using nlohmann::json;

std::vector<float> to_float(const std::vector<double>& v) { return {v.begin(), v.end()}; }

std::vector<double> latents_of(const nn::Tensor<float>& latent) {
  const auto v = latent.values();
  return {v.begin(), v.end()};
}

nn::Tensor<float> centroid_tensor(const std::vector<double>& v) {
  return nn::Tensor<float>(nn::Shape{v.size()}, to_float(v), false);
}

}  // namespace

std::string to_string(ChannelPolicy p) { return p == ChannelPolicy::Tile ? "tile" : "skip"; }

ChannelPolicy parse_channel_policy(const std::string& s) {
  if (s == "tile") return ChannelPolicy::Tile;
  if (s == "skip") return ChannelPolicy::Skip;
  throw ConfigError(kModule, "unknown channel policy '" + s + "' (expected tile or skip)");
}

void TrainerConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(kModule, m); };
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(lr_min > 0.0 && lr_min < lr0)) fail("learning rates must satisfy 0 < lr_min < lr0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (!(oversample_target > 0.0 && oversample_target < 1.0)) fail("oversample_target must lie in (0, 1)");
  if (phases.empty()) fail("phase schedule is empty");
  for (const auto& p : phases)
    if (p.epochs < 1) fail("phase '" + io::to_string(p.field) + "' has zero epochs");
  if (max_shift_frames < 0) fail("max_shift_frames must be >= 0");
  if (!(centroid_lr >= 0.0)) fail("centroid_lr must be >= 0");
}

json to_json(const TrainerConfig& c) {
  json phases = json::array();
  for (const auto& p : c.phases) phases.push_back({{"field", io::to_string(p.field)}, {"epochs", p.epochs}});
  return {{"batch_size", c.batch_size},
          {"lr0", c.lr0},
          {"lr_min", c.lr_min},
          {"total_steps", c.total_steps},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"oversample_target", c.oversample_target},
          {"phases", phases},
          {"channel_policy", to_string(c.channel_policy)},
          {"restart_schedule_per_phase", c.restart_schedule_per_phase},
          {"seed", c.seed},
          {"max_shift_frames", c.max_shift_frames},
          {"centroid_lr", c.centroid_lr},
          {"joint_centroid_loss", c.joint_centroid_loss},
          {"checkpoint_every_steps", c.checkpoint_every_steps}};
}

TrainerConfig trainer_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError(kModule, "trainer config must be an object");
  TrainerConfig c;
  const json known = to_json(c);
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw ConfigError(kModule, "unknown trainer config key '" + key + "'");
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("batch_size", c.batch_size);
    get("lr0", c.lr0);
    get("lr_min", c.lr_min);
    get("total_steps", c.total_steps);
    get("beta1", c.beta1);
    get("beta2", c.beta2);
    get("adam_eps", c.adam_eps);
    get("oversample_target", c.oversample_target);
    get("restart_schedule_per_phase", c.restart_schedule_per_phase);
    get("seed", c.seed);
    get("max_shift_frames", c.max_shift_frames);
    get("centroid_lr", c.centroid_lr);
    get("joint_centroid_loss", c.joint_centroid_loss);
    get("checkpoint_every_steps", c.checkpoint_every_steps);
    if (j.contains("channel_policy")) c.channel_policy = parse_channel_policy(j.at("channel_policy").get<std::string>());
    if (j.contains("phases")) {
      c.phases.clear();
      for (const auto& p : j.at("phases")) {
        PhaseSpec s;
        s.field = io::parse_field(p.at("field").get<std::string>());
        s.epochs = p.at("epochs").get<std::size_t>();
        c.phases.push_back(s);
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(kModule, std::string("trainer config: ") + e.what());
  } catch (const ParseError& e) {
    throw ConfigError(kModule, std::string("trainer config: ") + e.what());
  }
  c.validate();
  return c;
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr0, double lr_min) {
  if (total_steps == 0) throw ContractError(kModule, "cosine_lr: total_steps must be positive");
  if (step >= total_steps) return lr_min;
  const double phase = std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(phase));
}

double cosine_lr(std::size_t step, const TrainerConfig& cfg) {
  return cosine_lr(step, cfg.total_steps, cfg.lr0, cfg.lr_min);
}

double bce_loss(std::span<const double> p, std::span<const int> labels) {
  if (p.size() != labels.size() || p.empty())
    throw ContractError(kModule, "bce_loss: need equal, nonzero numbers of probabilities and labels");
  constexpr double eps = 1e-7;
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], eps, 1.0 - eps);
    total -= labels[i] ? std::log(q) : std::log(1.0 - q);
  }
  return total / static_cast<double>(p.size());
}

template <typename T>
void adam_step(std::span<nn::Tensor<T>> params, AdamState<T>& s, double lr, AdamHyper h) {
  if (s.m.empty()) {
    for (const auto& p : params) {
      s.m.emplace_back(p.size(), T(0));
      s.v.emplace_back(p.size(), T(0));
    }
  }
  if (s.m.size() != params.size()) throw ContractError(kModule, "adam_step: state does not match parameters");
  ++s.step;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(s.step));
  const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
  const T ic1 = static_cast<T>(1.0 / c1), ic2 = static_cast<T>(1.0 / c2);
  const T rate = static_cast<T>(lr), eps = static_cast<T>(h.eps);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k].values();
    const auto g = std::as_const(params[k]).grad();
    auto& m = s.m[k];
    auto& v = s.v[k];
    if (m.size() != w.size()) throw ContractError(kModule, "adam_step: moment shape mismatch");
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      const T mhat = m[i] * ic1;
      const T vhat = v[i] * ic2;
      w[i] -= rate * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

template void adam_step(std::span<nn::Tensor<float>>, AdamState<float>&, double, AdamHyper);
template void adam_step(std::span<nn::Tensor<double>>, AdamState<double>&, double, AdamHyper);

namespace {

struct ClassCounts {
  std::size_t pos = 0, neg = 0;
};

ClassCounts count_classes(std::span<const int> labels) {
  ClassCounts c;
  for (int y : labels) (y ? c.pos : c.neg) += 1;
  if (c.pos == 0 || c.neg == 0)
    throw ConfigError(kModule, "oversampling needs both classes, got " + std::to_string(c.pos) + " positive and " +
                                   std::to_string(c.neg) + " negative examples");
  return c;
}

std::size_t positive_draws(ClassCounts c, double target) {
  const auto wanted = static_cast<std::size_t>(std::llround(target * static_cast<double>(c.neg) / (1.0 - target)));
  return std::max(c.pos, wanted);
}

}  // namespace

std::size_t oversampled_length(std::span<const int> labels, double target) {
  const auto c = count_classes(labels);
  return c.neg + positive_draws(c, target);
}

std::vector<std::size_t> oversample(std::span<const int> labels, double target, Rng& rng) {
  const auto c = count_classes(labels);
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] ? pos : neg).push_back(i);
  const std::size_t draws = positive_draws(c, target);

  std::vector<std::size_t> pos_seq;
  pos_seq.reserve(draws);
  while (pos_seq.size() < draws) {
    std::shuffle(pos.begin(), pos.end(), rng);
    const std::size_t take = std::min(pos.size(), draws - pos_seq.size());
    pos_seq.insert(pos_seq.end(), pos.begin(), pos.begin() + static_cast<long>(take));
  }
  std::shuffle(neg.begin(), neg.end(), rng);

  const std::size_t total = draws + neg.size();
  std::vector<std::size_t> out;
  out.reserve(total);
  std::size_t ip = 0, in = 0;
  for (std::size_t i = 0; i < total; ++i) {
    const bool positive = (i + 1) * draws / total > i * draws / total;
    out.push_back(positive ? pos_seq[ip++] : neg[in++]);
  }
  return out;
}

dsp::FBankFeature adapt_channels(const dsp::FBankFeature& f, std::size_t channels) {
  if (f.channels == 0) throw ContractError(kModule, "feature has no channels");
  if (f.channels == channels) return f;
  dsp::FBankFeature out(channels, f.frames, f.bins, 0.0f);
  const std::size_t per = f.frames * f.bins;
  for (std::size_t c = 0; c < channels; ++c) {
    const auto src = f.values.begin() + static_cast<long>((c % f.channels) * per);
    std::copy(src, src + static_cast<long>(per), out.values.begin() + static_cast<long>(c * per));
  }
  return out;
}

const std::vector<Example>& TrainingData::field(io::Field f) const {
  switch (f) {
    case io::Field::Near: return near;
    case io::Field::Mid: return mid;
    case io::Field::Far: return far;
  }
  return far;
}

std::vector<int> labels_of(std::span<const Example> examples) {
  std::vector<int> y;
  y.reserve(examples.size());
  for (const auto& e : examples) y.push_back(e.label);
  return y;
}

std::pair<float, float> feature_statistics(const TrainingData& data) {
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const auto* pool : {&data.near, &data.mid, &data.far}) {
    for (const auto& e : *pool) {
      for (float v : e.feature.values) {
        sum += v;
        sq += static_cast<double>(v) * v;
      }
      n += e.feature.values.size();
    }
  }
  if (n == 0) throw ConfigError(kModule, "no training features");
  const double mean = sum / static_cast<double>(n);
  const double var = std::max(sq / static_cast<double>(n) - mean * mean, 0.0);
  const double sd = std::sqrt(var);
  return {static_cast<float>(mean), static_cast<float>(sd > 1e-6 ? sd : 1.0)};
}

Predictions predict(const model::Model<float>& m, const centroid::KeywordCentroids& c,
                    std::span<const Example> examples, std::size_t batch_size) {
  if (batch_size < 1) throw ContractError(kModule, "predict: batch_size must be >= 1");
  const auto& cfg = m.config();
  if (c.dim() != cfg.latent_dim) throw ContractError(kModule, "predict: centroid dimension does not match the model");
  Predictions out;
  const auto v0 = centroid_tensor(c.v0), v1 = centroid_tensor(c.v1);
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, examples.size() - start);
    std::vector<dsp::FBankFeature> adapted;
    adapted.reserve(n);
    std::vector<const dsp::FBankFeature*> ptrs;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& f = examples[start + i].feature;
      if (f.channels == cfg.channels) {
        ptrs.push_back(&f);
      } else {
        adapted.push_back(adapt_channels(f, cfg.channels));
        ptrs.push_back(&adapted.back());
      }
    }
    nn::Tape<float> tape(nn::Tape<float>::Mode::Inference);
    const auto x = m.batch_input(ptrs);
    const auto r = cfg.centroid_aware ? m.forward(tape, x, v0, v1) : m.forward(tape, x);
    const auto p = r.probabilities.values();
    const auto lat = latents_of(r.latent);
    for (std::size_t i = 0; i < n; ++i) {
      out.probabilities.push_back(p[i * 2 + 1]);
      const std::span<const double> row(lat.data() + i * cfg.latent_dim, cfg.latent_dim);
      out.distances.push_back(centroid::l2_features(row, c));
    }
    out.latents.insert(out.latents.end(), lat.begin(), lat.end());
  }
  return out;
}

Trainer::Trainer(model::ModelConfig model_cfg, TrainerConfig cfg, const TrainingData& data,
                 std::filesystem::path run_dir)
    : Trainer(std::move(model_cfg), std::move(cfg), data, std::move(run_dir), true) {}

Trainer::Trainer(model::ModelConfig model_cfg, TrainerConfig cfg, const TrainingData& data,
                 std::filesystem::path run_dir, bool fresh)
    : model_cfg_([&] {
        cfg.validate();
        if (fresh) {
          const auto [mean, sd] = feature_statistics(data);
          model_cfg.feature_mean = mean;
          model_cfg.feature_std = sd;
        }
        return model_cfg;
      }()),
      cfg_(std::move(cfg)),
      data_(data),
      run_dir_(std::move(run_dir)),
      model_(model_cfg_),
      centroids_(centroid::zero_centroids(model_cfg_.latent_dim, cfg_.centroid_lr)),
      rng_(cfg_.seed) {
  phases_ = plan();
  std::size_t planned = 0;
  for (const auto& p : phases_) planned += p.epochs * p.steps_per_epoch;
  total_steps_ = cfg_.total_steps ? cfg_.total_steps : planned;
  if (!fresh) return;
  std::seed_seq init_seed{cfg_.seed, std::uint64_t{0x6d6f64656c}};
  Rng init_rng(init_seed);
  model_.init(init_rng);
  std::filesystem::create_directories(run_dir_);
  std::ofstream(run_dir_ / "metrics.jsonl", std::ios::trunc);
  if (!std::filesystem::exists(run_dir_ / "metrics.jsonl"))
    throw IoError(kModule, "cannot create " + (run_dir_ / "metrics.jsonl").string());
}

std::vector<Trainer::Phase> Trainer::plan() const {
  std::vector<Phase> out;
  for (const auto& spec : cfg_.phases) {
    const auto& pool = data_.field(spec.field);
    if (pool.empty()) throw ConfigError(kModule, "phase '" + io::to_string(spec.field) + "' has no training data");
    if (cfg_.channel_policy == ChannelPolicy::Skip && pool.front().feature.channels != model_cfg_.channels) continue;
    const auto labels = labels_of(pool);
    const std::size_t len = oversampled_length(labels, cfg_.oversample_target);
    out.push_back({spec.field, spec.epochs, (len + cfg_.batch_size - 1) / cfg_.batch_size});
  }
  if (out.empty()) throw ConfigError(kModule, "every phase was skipped; no data matches the model's channel count");
  return out;
}

std::size_t Trainer::schedule_step() const {
  if (!cfg_.restart_schedule_per_phase) return step_;
  std::size_t before = 0;
  for (std::size_t i = 0; i < phase_; ++i) before += phases_[i].epochs * phases_[i].steps_per_epoch;
  return step_ - before;
}

std::size_t Trainer::schedule_horizon() const {
  if (!cfg_.restart_schedule_per_phase) return total_steps_;
  return phases_[phase_].epochs * phases_[phase_].steps_per_epoch;
}

void Trainer::log(const json& record) {
  const std::string line = record.dump() + "\n";
  std::ofstream out(run_dir_ / "metrics.jsonl", std::ios::app | std::ios::binary);
  out << line;
  out.flush();
  if (!out) throw IoError(kModule, "cannot append to " + (run_dir_ / "metrics.jsonl").string());
  log_bytes_ += line.size();
}

void Trainer::train_batch(std::span<const std::size_t> indices, const std::vector<Example>& pool,
                          const Phase& phase) {
  const std::size_t n = indices.size();
  std::vector<dsp::FBankFeature> feats;
  feats.reserve(n);
  std::vector<int> y;
  y.reserve(n);
  std::uniform_int_distribution<long> shift(-cfg_.max_shift_frames, cfg_.max_shift_frames);
  for (std::size_t idx : indices) {
    const auto& ex = pool[idx];
    auto f = adapt_channels(ex.feature, model_cfg_.channels);
    if (cfg_.max_shift_frames > 0) {
      const long s = shift(rng_);
      if (s != 0) f = dsp::shift_frames(f, s);
    }
    feats.push_back(std::move(f));
    y.push_back(ex.label);
  }
  std::vector<const dsp::FBankFeature*> ptrs;
  for (const auto& f : feats) ptrs.push_back(&f);
  const auto x = model_.batch_input(ptrs);
  const bool aware = model_cfg_.centroid_aware;

  if (!centroids_ready_) {
    nn::Tape<float> probe(nn::Tape<float>::Mode::Inference);
    const auto r = aware ? model_.forward(probe, x, centroid_tensor(centroids_.v0), centroid_tensor(centroids_.v1))
                         : model_.forward(probe, x);
    const auto lat = latents_of(r.latent);
    centroids_ = centroid::class_means(lat, y, centroids_);
    centroids_ready_ = true;
  }

  const auto v0 = centroid_tensor(centroids_.v0), v1 = centroid_tensor(centroids_.v1);
  nn::Tape<float> tape;
  const auto r = aware ? model_.forward(tape, x, v0, v1) : model_.forward(tape, x);
  auto loss = nn::binary_cross_entropy(tape, nn::select(tape, r.probabilities, 1, 1), y);
  if (cfg_.joint_centroid_loss) {
    std::vector<int> neg(n);
    for (std::size_t i = 0; i < n; ++i) neg[i] = 1 - y[i];
    const auto d = nn::add(tape, nn::masked_squared_distance(tape, r.latent, v0, neg),
                           nn::masked_squared_distance(tape, r.latent, v1, y));
    loss = nn::add(tape, loss, nn::scale(tape, d, 1.0f / static_cast<float>(n)));
  }
  const double loss_value = loss.values()[0];
  if (!std::isfinite(loss_value))
    throw NumericError(kModule, "non-finite loss at step " + std::to_string(step_) + " (phase " +
                                    io::to_string(phase.field) + ", epoch " + std::to_string(epoch_) + ")");
  tape.backward(loss);

  const double lr = cosine_lr(schedule_step(), schedule_horizon(), cfg_.lr0, cfg_.lr_min);
  std::vector<nn::Tensor<float>> params;
  for (auto& [name, t] : model_.parameters()) params.push_back(t);
  adam_step<float>(params, adam_, lr, {cfg_.beta1, cfg_.beta2, cfg_.adam_eps});
  for (auto& t : params) t.zero_grad();

  const auto lat = latents_of(r.latent);
  centroids_ = centroid::centroid_sgd_step(lat, y, centroids_, cfg_.centroid_lr * lr / cfg_.lr0);

  log({{"type", "step"},
       {"step", step_},
       {"phase", io::to_string(phase.field)},
       {"epoch", epoch_},
       {"loss", loss_value},
       {"lr", lr}});
  epoch_loss_sum_ += loss_value;
  ++epoch_batches_;
}

std::optional<eval::EvalReport> Trainer::evaluate_dev() const {
  if (data_.dev.empty()) return std::nullopt;
  const auto p = predict(model_, centroids_, data_.dev, cfg_.batch_size);
  const auto y = labels_of(data_.dev);
  return eval::report(eval::confusion(p.probabilities, y));
}

TrainResult Trainer::run(std::size_t stop_after_steps) {
  TrainResult result;
  while (phase_ < phases_.size()) {
    const Phase ph = phases_[phase_];
    const auto& pool = data_.field(ph.field);
    if (order_.empty()) {
      const auto labels = labels_of(pool);
      order_ = oversample(labels, cfg_.oversample_target, rng_);
      position_ = 0;
      epoch_loss_sum_ = 0.0;
      epoch_batches_ = 0;
    }
    while (position_ < order_.size()) {
      if (stop_after_steps && step_ >= stop_after_steps) {
        write_checkpoint(run_dir_ / "last.ckpt");
        result.steps = step_;
        result.best_dev_score = best_score_;
        return result;
      }
      const std::size_t n = std::min(cfg_.batch_size, order_.size() - position_);
      train_batch(std::span<const std::size_t>(order_).subspan(position_, n), pool, ph);
      position_ += n;
      ++step_;
      if (cfg_.checkpoint_every_steps && step_ % cfg_.checkpoint_every_steps == 0 && position_ < order_.size())
        write_checkpoint(run_dir_ / "last.ckpt");
    }

    const auto dev = evaluate_dev();
    json rec{{"type", "epoch"},
             {"step", step_},
             {"phase", io::to_string(ph.field)},
             {"epoch", epoch_},
             {"train_loss", epoch_loss_sum_ / static_cast<double>(std::max<std::size_t>(epoch_batches_, 1))}};
    if (dev) {
      auto rate = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
      rec["dev_far"] = rate(dev->far);
      rec["dev_frr"] = rate(dev->frr);
      rec["dev_score"] = rate(dev->score);
      rec["dev_accuracy"] = dev->accuracy;
    }
    log(rec);
    result.last_dev = dev;

    order_.clear();
    position_ = 0;
    if (++epoch_ == ph.epochs) {
      epoch_ = 0;
      ++phase_;
    }
    const bool improved = dev && dev->score && (!best_score_ || *dev->score < *best_score_);
    if (improved) best_score_ = *dev->score;
    // Until some epoch has a defined dev Score, best follows the latest epoch.
    if (improved || !best_score_) write_checkpoint(run_dir_ / "best.ckpt");
    write_checkpoint(run_dir_ / "last.ckpt");
  }
  result.steps = step_;
  result.finished = true;
  result.best_dev_score = best_score_;
  return result;
}

io::Checkpoint Trainer::make_checkpoint() const {
  io::Checkpoint ck;
  ck.tensors = model_.to_named_tensors();
  const auto params = model_.parameters();
  if (!adam_.m.empty()) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      const auto& [name, t] = params[k];
      ck.tensors.push_back({"adam.m." + name, t.shape(), adam_.m[k]});
      ck.tensors.push_back({"adam.v." + name, t.shape(), adam_.v[k]});
    }
  }
  for (auto& nt : centroid::to_named_tensors(centroids_)) ck.tensors.push_back(std::move(nt));
  ck.meta = {{"kind", "trainer"},
             {"model_config", model::to_json(model_cfg_)},
             {"trainer_config", to_json(cfg_)},
             {"parameter_count", model_.parameter_count()},
             {"step", step_},
             {"phase", phase_},
             {"epoch", epoch_},
             {"position", position_},
             {"order", order_},
             {"rng_state", io::rng_state(rng_)},
             {"centroids", {{"v0", centroids_.v0}, {"v1", centroids_.v1}, {"ready", centroids_ready_}}},
             {"adam_step", adam_.step},
             {"epoch_loss_sum", epoch_loss_sum_},
             {"epoch_batches", epoch_batches_},
             {"best_score", best_score_ ? json(*best_score_) : json(nullptr)},
             {"total_steps", total_steps_},
             {"metrics_bytes", log_bytes_}};
  return ck;
}

void Trainer::write_checkpoint(const std::filesystem::path& path) const { io::save_checkpoint(make_checkpoint(), path); }

Trainer Trainer::resume(const std::filesystem::path& checkpoint, const TrainingData& data,
                        std::filesystem::path run_dir) {
  const auto ck = io::load_checkpoint(checkpoint);
  const auto& m = ck.meta;
  if (m.value("kind", "") != "trainer") throw FormatError(kModule, checkpoint.string() + " is not a training checkpoint");
  try {
    Trainer t(model::model_config_from_json(m.at("model_config")), trainer_config_from_json(m.at("trainer_config")),
              data, std::move(run_dir), false);
    if (t.total_steps_ != m.at("total_steps").get<std::size_t>())
      throw ConfigError(kModule, "training data differs from the run that wrote " + checkpoint.string());
    t.model_.load_named_tensors(ck.tensors);
    const auto params = t.model_.parameters();
    if (m.at("adam_step").get<std::uint64_t>() > 0) {
      for (const auto& [name, tensor] : params) {
        const auto* mt = ck.find("adam.m." + name);
        const auto* vt = ck.find("adam.v." + name);
        if (!mt || !vt || mt->values.size() != tensor.size() || vt->values.size() != tensor.size())
          throw FormatError(kModule, "checkpoint lacks Adam moments for '" + name + "'");
        t.adam_.m.push_back(mt->values);
        t.adam_.v.push_back(vt->values);
      }
    }
    t.adam_.step = m.at("adam_step").get<std::uint64_t>();
    const auto& c = m.at("centroids");
    t.centroids_.v0 = c.at("v0").get<std::vector<double>>();
    t.centroids_.v1 = c.at("v1").get<std::vector<double>>();
    t.centroids_ready_ = c.at("ready").get<bool>();
    t.centroids_.validate();
    t.step_ = m.at("step").get<std::size_t>();
    t.phase_ = m.at("phase").get<std::size_t>();
    t.epoch_ = m.at("epoch").get<std::size_t>();
    t.position_ = m.at("position").get<std::size_t>();
    t.order_ = m.at("order").get<std::vector<std::size_t>>();
    t.rng_ = io::rng_from_state(m.at("rng_state").get<std::string>());
    t.epoch_loss_sum_ = m.at("epoch_loss_sum").get<double>();
    t.epoch_batches_ = m.at("epoch_batches").get<std::size_t>();
    if (!m.at("best_score").is_null()) t.best_score_ = m.at("best_score").get<double>();
    t.log_bytes_ = m.at("metrics_bytes").get<std::uintmax_t>();

    const auto log_path = t.run_dir_ / "metrics.jsonl";
    std::error_code ec;
    const auto size = std::filesystem::file_size(log_path, ec);
    if (ec || size < t.log_bytes_)
      throw IoError(kModule, log_path.string() + " is missing or shorter than the checkpoint records");
    std::filesystem::resize_file(log_path, t.log_bytes_);
    return t;
  } catch (const json::exception& e) {
    throw FormatError(kModule, checkpoint.string() + ": " + e.what());
  }
}

TrainedModel load_trained(const io::Checkpoint& ckpt) {
  try {
    const auto cfg = model::model_config_from_json(ckpt.meta.at("model_config"));
    TrainedModel t{model::Model<float>(cfg), centroid::zero_centroids(cfg.latent_dim)};
    t.model.load_named_tensors(ckpt.tensors);
    if (ckpt.meta.contains("centroids")) {
      t.centroids.v0 = ckpt.meta["centroids"].at("v0").get<std::vector<double>>();
      t.centroids.v1 = ckpt.meta["centroids"].at("v1").get<std::vector<double>>();
    } else {
      t.centroids = centroid::from_named_tensors(ckpt.tensors);
    }
    t.centroids.validate();
    if (t.centroids.dim() != cfg.latent_dim) throw FormatError(kModule, "centroid dimension does not match the model");
    return t;
  } catch (const json::exception& e) {
    throw FormatError(kModule, std::string("checkpoint metadata: ") + e.what());
  }
}

}  // namespace kws::train
