#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kws/audio.hpp"
#include "kws/dsp.hpp"
#include "kws/io.hpp"
#include "kws/ops.hpp"
#include "kws/tensor.hpp"

// Multi-channel ConvMixer. Activations are laid out as a token grid
// [B, C, T', F']: batch, audio channel, encoded time, encoded frequency.
namespace kws::model {

struct ModelConfig {
  std::size_t channels = 6;
  std::size_t blocks = 4;
  std::size_t input_frames = 197;
  std::size_t mel_bins = 40;

  // Encoder: a strided 1-D convolution over time mapping 40 mel bins to
  // `encoder_width` = F' features, shared by every audio channel.
  std::size_t encoder_width = 64;
  std::size_t encoder_kernel = 5;
  std::size_t encoder_stride = 4;

  std::size_t block_kernel = 3;      // depthwise kernels inside a block, odd
  double mixer_expansion = 1.0;      // hidden width of the T' and F' mixers per extent
  double channel_expansion = 2.0;    // hidden width of the channel mixer per channel

  std::size_t aggregator_kernel = 3;
  std::size_t latent_dim = 64;       // D
  bool centroid_aware = false;       // head input is D + 2 when on

  // Global input standardization, fitted on training features.
  float feature_mean = 0.0f;
  float feature_std = 1.0f;

  // Throws ConfigError on zero extents, even kernels, D < 2 or a bad std.
  void validate() const;

  std::size_t encoded_frames() const;  // T'
  std::size_t encoded_bins() const { return encoder_width; }  // F'
  std::size_t temporal_hidden() const;
  std::size_t frequency_hidden() const;
  std::size_t channel_hidden() const;
  std::size_t head_inputs() const { return latent_dim + (centroid_aware ? 2 : 0); }
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);  // missing keys keep defaults

enum class ReferenceModel { SingleChannel, MultiChannel, MultiChannelCentroid, MultiLookCentroid };

// Configs sized to the published parameter budgets.
ModelConfig reference_config(ReferenceModel which);
std::string to_string(ReferenceModel which);
std::size_t published_parameter_count(ReferenceModel which);

// Small config that trains in minutes on one core.
ModelConfig benchmark_config(std::size_t channels, bool centroid_aware);

// Closed-form count for a config; matches Model::parameter_count.
std::size_t parameter_count(const ModelConfig& cfg);

enum class InitMode {
  Standard,  // truncated normal: std 0.02 for linear layers, 1/sqrt(fan_in) for convolutions
  Identity,  // Standard, then the mixers' output projections and biases zeroed
};

template <typename T>
struct BlockParams {
  // Frequency DS-conv: T' channels sliding along F'.
  nn::Tensor<T> freq_depth, freq_point, freq_bias;
  // Temporal DS-conv: F' channels sliding along T'.
  nn::Tensor<T> time_depth, time_point, time_bias;
  // Temporal mix over T'.
  nn::Tensor<T> ln_t_gamma, ln_t_beta, w1, b1, w2, b2;
  // Frequency mix over F'.
  nn::Tensor<T> ln_f_gamma, ln_f_beta, w3, b3, w4, b4;
  // Channel mix over C.
  nn::Tensor<T> ln_c_gamma, ln_c_beta, w5, b5, w6, b6;
};

// Individual block stages on a grid [B, C, T', F'].
template <typename T>
nn::Tensor<T> block_convs(nn::Tape<T>& tape, const nn::Tensor<T>& x, const BlockParams<T>& p,
                          std::size_t kernel);
template <typename T>
nn::Tensor<T> temporal_mix(nn::Tape<T>& tape, const nn::Tensor<T>& x, const BlockParams<T>& p);
template <typename T>
nn::Tensor<T> frequency_mix(nn::Tape<T>& tape, const nn::Tensor<T>& x, const BlockParams<T>& p);
template <typename T>
nn::Tensor<T> channel_mix(nn::Tape<T>& tape, const nn::Tensor<T>& x, const BlockParams<T>& p);
// temporal_mix -> frequency_mix -> channel_mix.
template <typename T>
nn::Tensor<T> mixing_stack(nn::Tape<T>& tape, const nn::Tensor<T>& x, const BlockParams<T>& p);

template <typename T>
struct ForwardResult {
  nn::Tensor<T> probabilities;  // [B, 2]
  nn::Tensor<T> latent;         // [B, D]
};

template <typename T>
class Model {
 public:
  explicit Model(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }

  void init(Rng& rng, InitMode mode = InitMode::Standard);

  // Stacks features into [B, C, T, M] and standardizes them. Throws
  // ContractError when a channel count or extent disagrees with the config.
  nn::Tensor<T> batch_input(const std::vector<const dsp::FBankFeature*>& features) const;

  // [B, C, T, M] -> grid [B, C, T', F'].
  nn::Tensor<T> encode(nn::Tape<T>& tape, const nn::Tensor<T>& x) const;
  // Convs then mixing stack, same shape in and out.
  nn::Tensor<T> block(nn::Tape<T>& tape, const nn::Tensor<T>& grid, std::size_t index) const;
  // grid -> latent [B, D].
  nn::Tensor<T> aggregate(nn::Tape<T>& tape, const nn::Tensor<T>& grid) const;
  // latent [B, D] and distances [B, 2] (undefined iff centroid awareness is
  // off) -> probabilities [B, 2].
  nn::Tensor<T> predict(nn::Tape<T>& tape, const nn::Tensor<T>& latent,
                        const nn::Tensor<T>& l2) const;

  // Centroids are constants [D] each; pass undefined tensors when off.
  ForwardResult<T> forward(nn::Tape<T>& tape, const nn::Tensor<T>& x, const nn::Tensor<T>& v0 = {},
                           const nn::Tensor<T>& v1 = {}) const;

  BlockParams<T>& block_params(std::size_t i) { return blocks_.at(i); }
  const BlockParams<T>& block_params(std::size_t i) const { return blocks_.at(i); }
  nn::Tensor<T>& head_weight() { return head_w_; }
  nn::Tensor<T>& head_bias() { return head_b_; }

  // Named handles to every trainable tensor, in a fixed order.
  std::vector<std::pair<std::string, nn::Tensor<T>>> parameters() const;
  std::size_t parameter_count() const;

  std::vector<io::NamedTensor> to_named_tensors() const;
  // Throws FormatError naming any missing tensor or shape mismatch.
  void load_named_tensors(const std::vector<io::NamedTensor>& tensors);

 private:
  ModelConfig cfg_;
  nn::Tensor<T> enc_w_, enc_b_;
  std::vector<BlockParams<T>> blocks_;
  nn::Tensor<T> agg_w_, agg_b_;
  nn::Tensor<T> head_w_, head_b_;
};

// Row-wise [||x - v0||, ||x - v1||] for latents [B, D].
template <typename T>
nn::Tensor<T> distance_features(nn::Tape<T>& tape, const nn::Tensor<T>& latent,
                                const nn::Tensor<T>& v0, const nn::Tensor<T>& v1);

}  // namespace kws::model
