#include "kws/model.hpp"

#include <cmath>
#include <random>

#include "kws/error.hpp"

namespace kws::model {

namespace {

const char* kModule = "model";

using nn::Shape;
using nn::Tape;
using nn::Tensor;

std::size_t hidden_width(std::size_t extent, double ratio) {
  const auto h = static_cast<std::size_t>(std::llround(static_cast<double>(extent) * ratio));
  return h < 1 ? 1 : h;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> block_fields(BlockParams<T>& p) {
  return {{"freq_depth", &p.freq_depth}, {"freq_point", &p.freq_point}, {"freq_bias", &p.freq_bias},
          {"time_depth", &p.time_depth}, {"time_point", &p.time_point}, {"time_bias", &p.time_bias},
          {"ln_t_gamma", &p.ln_t_gamma}, {"ln_t_beta", &p.ln_t_beta},   {"w1", &p.w1},
          {"b1", &p.b1},                 {"w2", &p.w2},                 {"b2", &p.b2},
          {"ln_f_gamma", &p.ln_f_gamma}, {"ln_f_beta", &p.ln_f_beta},   {"w3", &p.w3},
          {"b3", &p.b3},                 {"w4", &p.w4},                 {"b4", &p.b4},
          {"ln_c_gamma", &p.ln_c_gamma}, {"ln_c_beta", &p.ln_c_beta},   {"w5", &p.w5},
          {"b5", &p.b5},                 {"w6", &p.w6},                 {"b6", &p.b6}};
}

template <typename T>
void fill_truncated_normal(Tensor<T>& t, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : t.values()) {
    double z = dist(rng);
    while (std::abs(z) > 2.0) z = dist(rng);
    v = static_cast<T>(z * stddev);
  }
}

template <typename T>
void fill(Tensor<T>& t, T value) {
  for (auto& v : t.values()) v = value;
}

constexpr double kLinearStd = 0.02;

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(kModule, m); };
  if (channels < 1) fail("channels must be >= 1");
  if (blocks < 1) fail("blocks must be >= 1");
  if (input_frames < 1 || mel_bins < 1) fail("input extents must be positive");
  if (encoder_width < 1 || encoder_kernel < 1 || encoder_stride < 1) fail("encoder extents must be positive");
  if (encoder_kernel % 2 == 0) fail("encoder_kernel must be odd");
  if (block_kernel < 1 || block_kernel % 2 == 0) fail("block_kernel must be odd");
  if (aggregator_kernel < 1 || aggregator_kernel % 2 == 0) fail("aggregator_kernel must be odd");
  if (latent_dim < 2) fail("latent_dim must be >= 2");
  if (!(mixer_expansion > 0) || !(channel_expansion > 0)) fail("expansion ratios must be positive");
  if (!std::isfinite(feature_mean) || !(feature_std > 0) || !std::isfinite(feature_std)) {
    fail("feature_std must be positive and finite");
  }
  if (input_frames + 2 * (encoder_kernel / 2) < encoder_kernel) fail("input_frames shorter than the encoder kernel");
}

std::size_t ModelConfig::encoded_frames() const {
  return nn::conv_output_length(input_frames, encoder_kernel, {encoder_stride, encoder_kernel / 2});
}

std::size_t ModelConfig::temporal_hidden() const { return hidden_width(encoded_frames(), mixer_expansion); }
std::size_t ModelConfig::frequency_hidden() const { return hidden_width(encoded_bins(), mixer_expansion); }
std::size_t ModelConfig::channel_hidden() const { return hidden_width(channels, channel_expansion); }

nlohmann::json to_json(const ModelConfig& c) {
  return {{"channels", c.channels},
          {"blocks", c.blocks},
          {"input_frames", c.input_frames},
          {"mel_bins", c.mel_bins},
          {"encoder_width", c.encoder_width},
          {"encoder_kernel", c.encoder_kernel},
          {"encoder_stride", c.encoder_stride},
          {"block_kernel", c.block_kernel},
          {"mixer_expansion", c.mixer_expansion},
          {"channel_expansion", c.channel_expansion},
          {"aggregator_kernel", c.aggregator_kernel},
          {"latent_dim", c.latent_dim},
          {"centroid_aware", c.centroid_aware},
          {"feature_mean", c.feature_mean},
          {"feature_std", c.feature_std}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError(kModule, "model config must be an object");
  ModelConfig c;
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(kModule, std::string("model config key '") + key + "': " + e.what());
    }
  };
  get("channels", c.channels);
  get("blocks", c.blocks);
  get("input_frames", c.input_frames);
  get("mel_bins", c.mel_bins);
  get("encoder_width", c.encoder_width);
  get("encoder_kernel", c.encoder_kernel);
  get("encoder_stride", c.encoder_stride);
  get("block_kernel", c.block_kernel);
  get("mixer_expansion", c.mixer_expansion);
  get("channel_expansion", c.channel_expansion);
  get("aggregator_kernel", c.aggregator_kernel);
  get("latent_dim", c.latent_dim);
  get("centroid_aware", c.centroid_aware);
  get("feature_mean", c.feature_mean);
  get("feature_std", c.feature_std);
  for (const auto& [key, value] : j.items()) {
    if (!to_json(ModelConfig{}).contains(key)) throw ConfigError(kModule, "unknown model config key '" + key + "'");
  }
  c.validate();
  return c;
}

ModelConfig reference_config(ReferenceModel which) {
  ModelConfig c;
  c.mixer_expansion = 0.5;
  c.latent_dim = 256;
  switch (which) {
    case ReferenceModel::SingleChannel:
    case ReferenceModel::MultiChannel:
      c.channels = which == ReferenceModel::SingleChannel ? 1 : 6;
      c.encoder_width = 72;
      c.encoder_stride = 6;
      break;
    case ReferenceModel::MultiChannelCentroid:
    case ReferenceModel::MultiLookCentroid:
      c.channels = which == ReferenceModel::MultiChannelCentroid ? 6 : 4;
      c.encoder_width = 96;
      c.encoder_stride = 2;
      c.centroid_aware = true;
      break;
  }
  return c;
}

std::string to_string(ReferenceModel which) {
  switch (which) {
    case ReferenceModel::SingleChannel: return "single-channel";
    case ReferenceModel::MultiChannel: return "6-channel";
    case ReferenceModel::MultiChannelCentroid: return "6-channel + centroid";
    case ReferenceModel::MultiLookCentroid: return "multi-look 4-channel + centroid";
  }
  return "";
}

std::size_t published_parameter_count(ReferenceModel which) {
  switch (which) {
    case ReferenceModel::SingleChannel: return 124000;
    case ReferenceModel::MultiChannel: return 415000;
    case ReferenceModel::MultiChannelCentroid: return 622000;
    case ReferenceModel::MultiLookCentroid: return 473000;
  }
  return 0;
}

ModelConfig benchmark_config(std::size_t channels, bool centroid_aware) {
  ModelConfig c;
  c.channels = channels;
  c.encoder_width = 16;
  c.encoder_kernel = 5;
  c.encoder_stride = 8;
  c.mixer_expansion = 1.0;
  c.latent_dim = 16;
  c.centroid_aware = centroid_aware;
  return c;
}

std::size_t parameter_count(const ModelConfig& c) {
  c.validate();
  const std::size_t tp = c.encoded_frames(), fp = c.encoded_bins(), ch = c.channels;
  const std::size_t ht = c.temporal_hidden(), hf = c.frequency_hidden(), hc = c.channel_hidden();
  const std::size_t k = c.block_kernel;
  const std::size_t encoder = fp * c.mel_bins * c.encoder_kernel + fp;
  const std::size_t convs = (tp * k + tp * tp + tp) + (fp * k + fp * fp + fp);
  const std::size_t mix_t = 2 * tp + tp * ht + ht + ht * tp + tp;
  const std::size_t mix_f = 2 * fp + fp * hf + hf + hf * fp + fp;
  const std::size_t mix_c = 2 * ch + ch * hc + hc + hc * ch + ch;
  const std::size_t aggregator = c.latent_dim * ch * fp * c.aggregator_kernel + c.latent_dim;
  const std::size_t head = c.head_inputs() * 2 + 2;
  return encoder + c.blocks * (convs + mix_t + mix_f + mix_c) + aggregator + head;
}

template <typename T>
Tensor<T> block_convs(Tape<T>& tape, const Tensor<T>& x, const BlockParams<T>& p, std::size_t kernel) {
  if (x.rank() != 4) throw DimensionError(kModule, "block expects a [B, C, T', F'] grid, got " + nn::shape_str(x.shape()));
  const auto& s = x.shape();
  const nn::Conv1dGeometry same{1, kernel / 2};
  auto h = nn::reshape(tape, x, Shape{s[0] * s[1], s[2], s[3]});
  auto f = nn::depthwise_separable_conv(tape, h, p.freq_depth, p.freq_point, p.freq_bias, same);
  h = nn::add(tape, h, nn::gelu(tape, f));
  h = nn::permute(tape, h, {0, 2, 1});
  auto t = nn::depthwise_separable_conv(tape, h, p.time_depth, p.time_point, p.time_bias, same);
  h = nn::add(tape, h, nn::gelu(tape, t));
  h = nn::permute(tape, h, {0, 2, 1});
  return nn::reshape(tape, h, s);
}

namespace {

template <typename T>
Tensor<T> mix(Tape<T>& tape, const Tensor<T>& x, int axis, const Tensor<T>& gamma, const Tensor<T>& beta,
              const Tensor<T>& wa, const Tensor<T>& ba, const Tensor<T>& wb, const Tensor<T>& bb) {
  if (x.rank() != 4) throw DimensionError(kModule, "mixer expects a [B, C, T', F'] grid, got " + nn::shape_str(x.shape()));
  auto h = nn::layer_norm(tape, x, gamma, beta, axis);
  h = nn::gelu(tape, nn::affine(tape, h, wa, ba, axis));
  h = nn::affine(tape, h, wb, bb, axis);
  return nn::add(tape, x, h);
}

}  // namespace

template <typename T>
Tensor<T> temporal_mix(Tape<T>& tape, const Tensor<T>& x, const BlockParams<T>& p) {
  return mix(tape, x, 2, p.ln_t_gamma, p.ln_t_beta, p.w1, p.b1, p.w2, p.b2);
}

template <typename T>
Tensor<T> frequency_mix(Tape<T>& tape, const Tensor<T>& x, const BlockParams<T>& p) {
  return mix(tape, x, 3, p.ln_f_gamma, p.ln_f_beta, p.w3, p.b3, p.w4, p.b4);
}

template <typename T>
Tensor<T> channel_mix(Tape<T>& tape, const Tensor<T>& x, const BlockParams<T>& p) {
  return mix(tape, x, 1, p.ln_c_gamma, p.ln_c_beta, p.w5, p.b5, p.w6, p.b6);
}

template <typename T>
Tensor<T> mixing_stack(Tape<T>& tape, const Tensor<T>& x, const BlockParams<T>& p) {
  return channel_mix(tape, frequency_mix(tape, temporal_mix(tape, x, p), p), p);
}

template <typename T>
Tensor<T> distance_features(Tape<T>& tape, const Tensor<T>& latent, const Tensor<T>& v0, const Tensor<T>& v1) {
  const std::size_t b = latent.dim(0);
  auto d0 = nn::reshape(tape, nn::l2_distance(tape, latent, v0), Shape{b, 1});
  auto d1 = nn::reshape(tape, nn::l2_distance(tape, latent, v1), Shape{b, 1});
  return nn::concat(tape, d0, d1, 1);
}

template <typename T>
Model<T>::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const std::size_t tp = cfg_.encoded_frames(), fp = cfg_.encoded_bins(), ch = cfg_.channels;
  const std::size_t ht = cfg_.temporal_hidden(), hf = cfg_.frequency_hidden(), hc = cfg_.channel_hidden();
  const std::size_t k = cfg_.block_kernel;
  auto z = [](Shape s) { return Tensor<T>::zeros(std::move(s), true); };
  enc_w_ = z({fp, cfg_.mel_bins, cfg_.encoder_kernel});
  enc_b_ = z({fp});
  for (std::size_t i = 0; i < cfg_.blocks; ++i) {
    BlockParams<T> p;
    p.freq_depth = z({tp, k});
    p.freq_point = z({tp, tp});
    p.freq_bias = z({tp});
    p.time_depth = z({fp, k});
    p.time_point = z({fp, fp});
    p.time_bias = z({fp});
    p.ln_t_gamma = z({tp});
    p.ln_t_beta = z({tp});
    p.w1 = z({tp, ht});
    p.b1 = z({ht});
    p.w2 = z({ht, tp});
    p.b2 = z({tp});
    p.ln_f_gamma = z({fp});
    p.ln_f_beta = z({fp});
    p.w3 = z({fp, hf});
    p.b3 = z({hf});
    p.w4 = z({hf, fp});
    p.b4 = z({fp});
    p.ln_c_gamma = z({ch});
    p.ln_c_beta = z({ch});
    p.w5 = z({ch, hc});
    p.b5 = z({hc});
    p.w6 = z({hc, ch});
    p.b6 = z({ch});
    blocks_.push_back(std::move(p));
  }
  agg_w_ = z({cfg_.latent_dim, ch * fp, cfg_.aggregator_kernel});
  agg_b_ = z({cfg_.latent_dim});
  head_w_ = z({cfg_.head_inputs(), 2});
  head_b_ = z({2});
}

template <typename T>
void Model<T>::init(Rng& rng, InitMode mode) {
  auto conv_std = [](const Tensor<T>& w) {
    std::size_t fan_in = 1;
    for (std::size_t i = 1; i < w.rank(); ++i) fan_in *= w.shape()[i];
    return 1.0 / std::sqrt(static_cast<double>(fan_in));
  };
  fill_truncated_normal(enc_w_, rng, conv_std(enc_w_));
  fill(enc_b_, T(0));
  for (auto& p : blocks_) {
    fill_truncated_normal(p.freq_depth, rng, conv_std(p.freq_depth));
    fill_truncated_normal(p.freq_point, rng, 1.0 / std::sqrt(static_cast<double>(p.freq_point.dim(0))));
    fill(p.freq_bias, T(0));
    fill_truncated_normal(p.time_depth, rng, conv_std(p.time_depth));
    fill_truncated_normal(p.time_point, rng, 1.0 / std::sqrt(static_cast<double>(p.time_point.dim(0))));
    fill(p.time_bias, T(0));
    for (auto* g : {&p.ln_t_gamma, &p.ln_f_gamma, &p.ln_c_gamma}) fill(*g, T(1));
    for (auto* b : {&p.ln_t_beta, &p.ln_f_beta, &p.ln_c_beta, &p.b1, &p.b2, &p.b3, &p.b4, &p.b5, &p.b6}) fill(*b, T(0));
    for (auto* w : {&p.w1, &p.w2, &p.w3, &p.w4, &p.w5, &p.w6}) fill_truncated_normal(*w, rng, kLinearStd);
    if (mode == InitMode::Identity) {
      for (auto* w : {&p.w2, &p.b2, &p.w4, &p.b4, &p.w6, &p.b6}) fill(*w, T(0));
    }
  }
  fill_truncated_normal(agg_w_, rng, conv_std(agg_w_));
  fill(agg_b_, T(0));
  fill_truncated_normal(head_w_, rng, kLinearStd);
  fill(head_b_, T(0));
}

template <typename T>
Tensor<T> Model<T>::batch_input(const std::vector<const dsp::FBankFeature*>& features) const {
  if (features.empty()) throw ContractError(kModule, "empty batch");
  const std::size_t per = cfg_.channels * cfg_.input_frames * cfg_.mel_bins;
  std::vector<T> v;
  v.reserve(per * features.size());
  const double mean = cfg_.feature_mean, inv = 1.0 / cfg_.feature_std;
  for (const auto* f : features) {
    if (f->channels != cfg_.channels) {
      throw ContractError(kModule, "feature has " + std::to_string(f->channels) + " channels, model expects " +
                                       std::to_string(cfg_.channels));
    }
    if (f->frames != cfg_.input_frames || f->bins != cfg_.mel_bins) {
      throw ContractError(kModule, "feature extent " + std::to_string(f->frames) + "x" + std::to_string(f->bins) +
                                       " does not match the model's " + std::to_string(cfg_.input_frames) + "x" +
                                       std::to_string(cfg_.mel_bins));
    }
    for (float x : f->values) v.push_back(static_cast<T>((x - mean) * inv));
  }
  return Tensor<T>(Shape{features.size(), cfg_.channels, cfg_.input_frames, cfg_.mel_bins}, std::move(v));
}

template <typename T>
Tensor<T> Model<T>::encode(Tape<T>& tape, const Tensor<T>& x) const {
  if (x.rank() != 4 || x.dim(1) != cfg_.channels || x.dim(2) != cfg_.input_frames || x.dim(3) != cfg_.mel_bins) {
    throw ContractError(kModule, "encoder input " + nn::shape_str(x.shape()) + " does not match [B, " +
                                     std::to_string(cfg_.channels) + ", " + std::to_string(cfg_.input_frames) + ", " +
                                     std::to_string(cfg_.mel_bins) + "]");
  }
  const std::size_t b = x.dim(0), c = cfg_.channels;
  auto h = nn::reshape(tape, x, Shape{b * c, cfg_.input_frames, cfg_.mel_bins});
  h = nn::permute(tape, h, {0, 2, 1});
  h = nn::conv1d(tape, h, enc_w_, enc_b_, {cfg_.encoder_stride, cfg_.encoder_kernel / 2});
  h = nn::gelu(tape, h);
  h = nn::permute(tape, h, {0, 2, 1});
  return nn::reshape(tape, h, Shape{b, c, cfg_.encoded_frames(), cfg_.encoded_bins()});
}

template <typename T>
Tensor<T> Model<T>::block(Tape<T>& tape, const Tensor<T>& grid, std::size_t index) const {
  const auto& p = blocks_.at(index);
  return mixing_stack(tape, block_convs(tape, grid, p, cfg_.block_kernel), p);
}

template <typename T>
Tensor<T> Model<T>::aggregate(Tape<T>& tape, const Tensor<T>& grid) const {
  const std::size_t b = grid.dim(0), c = cfg_.channels, tp = cfg_.encoded_frames(), fp = cfg_.encoded_bins();
  if (grid.shape() != Shape{b, c, tp, fp}) {
    throw ContractError(kModule, "aggregator input " + nn::shape_str(grid.shape()) + " does not match the config");
  }
  auto h = nn::permute(tape, grid, {0, 1, 3, 2});
  h = nn::reshape(tape, h, Shape{b, c * fp, tp});
  h = nn::conv1d(tape, h, agg_w_, agg_b_, {1, cfg_.aggregator_kernel / 2});
  h = nn::gelu(tape, h);
  return nn::mean(tape, h, 2);
}

template <typename T>
Tensor<T> Model<T>::predict(Tape<T>& tape, const Tensor<T>& latent, const Tensor<T>& l2) const {
  if (l2.defined() != cfg_.centroid_aware) {
    throw ContractError(kModule, cfg_.centroid_aware ? "centroid-aware head needs distance features"
                                                     : "distance features given to a head without centroid awareness");
  }
  if (latent.rank() != 2 || latent.dim(1) != cfg_.latent_dim) {
    throw ContractError(kModule, "latent " + nn::shape_str(latent.shape()) + " is not [B, " +
                                     std::to_string(cfg_.latent_dim) + "]");
  }
  const auto in = l2.defined() ? nn::concat(tape, latent, l2, 1) : latent;
  return nn::softmax(tape, nn::affine(tape, in, head_w_, head_b_, 1));
}

template <typename T>
ForwardResult<T> Model<T>::forward(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& v0,
                                   const Tensor<T>& v1) const {
  if (v0.defined() != v1.defined()) throw ContractError(kModule, "both centroids or neither must be given");
  if (v0.defined() != cfg_.centroid_aware) {
    throw ContractError(kModule, cfg_.centroid_aware ? "centroid-aware model needs centroids"
                                                     : "centroids given to a model without centroid awareness");
  }
  auto h = encode(tape, x);
  for (std::size_t i = 0; i < blocks_.size(); ++i) h = block(tape, h, i);
  ForwardResult<T> r;
  r.latent = aggregate(tape, h);
  const auto l2 = v0.defined() ? distance_features(tape, r.latent, v0, v1) : Tensor<T>{};
  r.probabilities = predict(tape, r.latent, l2);
  return r;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> Model<T>::parameters() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  out.emplace_back("encoder.weight", enc_w_);
  out.emplace_back("encoder.bias", enc_b_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    auto p = blocks_[i];
    for (auto& [name, t] : block_fields(p)) out.emplace_back("block" + std::to_string(i) + "." + name, *t);
  }
  out.emplace_back("aggregator.weight", agg_w_);
  out.emplace_back("aggregator.bias", agg_b_);
  out.emplace_back("head.weight", head_w_);
  out.emplace_back("head.bias", head_b_);
  return out;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : parameters()) n += t.size();
  return n;
}

template <typename T>
std::vector<io::NamedTensor> Model<T>::to_named_tensors() const {
  std::vector<io::NamedTensor> out;
  for (const auto& [name, t] : parameters()) {
    io::NamedTensor nt{name, t.shape(), {}};
    nt.values.reserve(t.size());
    for (T v : t.values()) nt.values.push_back(static_cast<float>(v));
    out.push_back(std::move(nt));
  }
  return out;
}

template <typename T>
void Model<T>::load_named_tensors(const std::vector<io::NamedTensor>& tensors) {
  for (auto& [name, t] : parameters()) {
    const io::NamedTensor* found = nullptr;
    for (const auto& nt : tensors)
      if (nt.name == name) found = &nt;
    if (!found) throw FormatError(kModule, "checkpoint is missing tensor '" + name + "'");
    if (found->shape != t.shape()) {
      throw FormatError(kModule, "tensor '" + name + "' has shape " + nn::shape_str(found->shape) + ", model expects " +
                                     nn::shape_str(t.shape()));
    }
    auto dst = t.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(found->values[i]);
  }
}

#define KWS_INSTANTIATE_MODEL(T)                                                                        \
  template class Model<T>;                                                                              \
  template Tensor<T> block_convs(Tape<T>&, const Tensor<T>&, const BlockParams<T>&, std::size_t);      \
  template Tensor<T> temporal_mix(Tape<T>&, const Tensor<T>&, const BlockParams<T>&);                  \
  template Tensor<T> frequency_mix(Tape<T>&, const Tensor<T>&, const BlockParams<T>&);                 \
  template Tensor<T> channel_mix(Tape<T>&, const Tensor<T>&, const BlockParams<T>&);                   \
  template Tensor<T> mixing_stack(Tape<T>&, const Tensor<T>&, const BlockParams<T>&);                  \
  template Tensor<T> distance_features(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);

KWS_INSTANTIATE_MODEL(float)
KWS_INSTANTIATE_MODEL(double)

#undef KWS_INSTANTIATE_MODEL

}  // namespace kws::model
