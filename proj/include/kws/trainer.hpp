#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kws/audio.hpp"
#include "kws/centroid.hpp"
#include "kws/dsp.hpp"
#include "kws/evaluation.hpp"
#include "kws/io.hpp"
#include "kws/model.hpp"
#include "kws/tensor.hpp"

// Training recipe: BCE, Adam, cosine annealing, positive oversampling and a
// near -> mid -> far curriculum, with centroid updates after every step.
namespace kws::train {

// How a phase whose recordings carry fewer (or more) channels than the
// model is handled.
enum class ChannelPolicy {
  Tile,  // replicate channels cyclically; extra channels are dropped
  Skip,  // leave the phase out
};

std::string to_string(ChannelPolicy p);
ChannelPolicy parse_channel_policy(const std::string& s);

struct PhaseSpec {
  io::Field field = io::Field::Far;
  std::size_t epochs = 1;
};

struct TrainerConfig {
  std::size_t batch_size = 64;
  double lr0 = 6e-4;
  double lr_min = 1e-12;
  // Cosine horizon T. 0 derives it from the phase schedule and data sizes.
  std::size_t total_steps = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double oversample_target = 0.5;  // positive fraction of an epoch
  std::vector<PhaseSpec> phases{{io::Field::Near, 10}, {io::Field::Mid, 10}, {io::Field::Far, 30}};
  ChannelPolicy channel_policy = ChannelPolicy::Tile;
  bool restart_schedule_per_phase = false;
  std::uint64_t seed = 0;
  long max_shift_frames = 10;          // frame-shift augmentation, uniform in [-max, max]
  double centroid_lr = 0.01;           // scaled by the cosine factor lr / lr0
  bool joint_centroid_loss = false;    // adds mean ||f - V_y||^2 to the loss
  std::size_t checkpoint_every_steps = 0;  // 0 writes last.ckpt only at epoch ends

  // Throws ConfigError.
  void validate() const;
};

nlohmann::json to_json(const TrainerConfig& cfg);
TrainerConfig trainer_config_from_json(const nlohmann::json& j);  // missing keys keep defaults

// lr_min + 0.5 (lr0 - lr_min)(1 + cos(pi step / T)); steps past T give lr_min.
double cosine_lr(std::size_t step, std::size_t total_steps, double lr0, double lr_min);
// Uses cfg.total_steps, which must be set.
double cosine_lr(std::size_t step, const TrainerConfig& cfg);

// Batch-mean BCE on positive-class probabilities clamped to [1e-7, 1 - 1e-7].
double bce_loss(std::span<const double> p, std::span<const int> labels);

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;  // one entry per parameter, same sizes
  std::uint64_t step = 0;
};

struct AdamHyper {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

// One bias-corrected Adam update using the parameters' accumulated
// gradients. Moments are allocated on the first call.
template <typename T>
void adam_step(std::span<nn::Tensor<T>> params, AdamState<T>& state, double lr, AdamHyper h = {});

// Epoch sampling sequence as indices into `labels`. Every negative appears
// once; positives are cycled in shuffled order until they make up `target`
// of the epoch (never fewer than once each), and both classes are spread
// evenly through the sequence. Throws ConfigError on a single-class set.
std::vector<std::size_t> oversample(std::span<const int> labels, double target, Rng& rng);
// Length of oversample()'s result; needs no randomness.
std::size_t oversampled_length(std::span<const int> labels, double target);

// Tiles or truncates channels to `channels`.
dsp::FBankFeature adapt_channels(const dsp::FBankFeature& f, std::size_t channels);

struct Example {
  dsp::FBankFeature feature;
  int label = 0;
};

struct TrainingData {
  std::vector<Example> near, mid, far;
  std::vector<Example> dev;

  const std::vector<Example>& field(io::Field f) const;
};

struct Predictions {
  std::vector<double> probabilities;            // positive class
  std::vector<double> latents;                  // [n, D] row-major
  std::vector<std::array<double, 2>> distances;  // to (V0, V1)
};

// Inference in batches; channel counts are adapted by tiling.
Predictions predict(const model::Model<float>& m, const centroid::KeywordCentroids& c,
                    std::span<const Example> examples, std::size_t batch_size = 64);

std::vector<int> labels_of(std::span<const Example> examples);

// Global mean and standard deviation over every feature value.
std::pair<float, float> feature_statistics(const TrainingData& data);

struct TrainResult {
  std::size_t steps = 0;
  bool finished = false;
  std::optional<double> best_dev_score;
  std::optional<eval::EvalReport> last_dev;
};

// Checkpoint tensors: model parameters, "adam.m.<name>", "adam.v.<name>",
// "centroid.v0", "centroid.v1". Run directory files: metrics.jsonl,
// last.ckpt, best.ckpt.
class Trainer {
 public:
  // Fits input normalization on `data` and initializes the model from the seed.
  Trainer(model::ModelConfig model_cfg, TrainerConfig cfg, const TrainingData& data,
          std::filesystem::path run_dir);

  // Continues a run from one of its checkpoints. `data` must be the data the
  // run started with.
  static Trainer resume(const std::filesystem::path& checkpoint, const TrainingData& data,
                        std::filesystem::path run_dir);

  // Trains until the schedule ends, or stops after `stop_after_steps` total
  // steps when nonzero, writing last.ckpt first. Throws NumericError naming
  // the step on a NaN loss.
  TrainResult run(std::size_t stop_after_steps = 0);

  const model::Model<float>& model() const { return model_; }
  const centroid::KeywordCentroids& centroids() const { return centroids_; }
  const TrainerConfig& config() const { return cfg_; }
  std::size_t total_steps() const { return total_steps_; }
  std::size_t step() const { return step_; }

 private:
  Trainer(model::ModelConfig model_cfg, TrainerConfig cfg, const TrainingData& data,
          std::filesystem::path run_dir, bool fresh);

  struct Phase {
    io::Field field;
    std::size_t epochs;
    std::size_t steps_per_epoch;
  };

  std::vector<Phase> plan() const;
  std::size_t schedule_step() const;
  std::size_t schedule_horizon() const;
  void train_batch(std::span<const std::size_t> indices, const std::vector<Example>& pool,
                   const Phase& phase);
  std::optional<eval::EvalReport> evaluate_dev() const;
  io::Checkpoint make_checkpoint() const;
  void write_checkpoint(const std::filesystem::path& path) const;
  void log(const nlohmann::json& record);

  model::ModelConfig model_cfg_;
  TrainerConfig cfg_;
  const TrainingData& data_;
  std::filesystem::path run_dir_;
  model::Model<float> model_;
  centroid::KeywordCentroids centroids_;
  bool centroids_ready_ = false;
  AdamState<float> adam_;
  Rng rng_;
  std::vector<Phase> phases_;
  std::size_t total_steps_ = 0;

  // Position in the schedule.
  std::size_t step_ = 0;
  std::size_t phase_ = 0;
  std::size_t epoch_ = 0;
  std::size_t position_ = 0;  // next index into order_
  std::vector<std::size_t> order_;
  double epoch_loss_sum_ = 0.0;
  std::size_t epoch_batches_ = 0;
  std::optional<double> best_score_;
  std::uintmax_t log_bytes_ = 0;
};

// A trained model restored from a checkpoint.
struct TrainedModel {
  model::Model<float> model;
  centroid::KeywordCentroids centroids;
};

TrainedModel load_trained(const io::Checkpoint& ckpt);

}  // namespace kws::train
