#include "kws/centroid.hpp"

#include <cmath>

#include "kws/error.hpp"

namespace kws::centroid {

namespace {

const char* kModule = "centroid";

std::size_t check_batch(std::span<const double> latents, std::span<const int> labels, std::size_t dim) {
  if (dim == 0) throw ContractError(kModule, "centroids are empty");
  if (latents.size() != labels.size() * dim) {
    throw ContractError(kModule, "latents hold " + std::to_string(latents.size()) + " values, expected " +
                                     std::to_string(labels.size()) + " rows of " + std::to_string(dim));
  }
  for (int y : labels)
    if (y != 0 && y != 1) throw ContractError(kModule, "labels must be 0 or 1");
  return labels.size();
}

double distance(std::span<const double> a, const std::vector<double>& b) {
  double acc = 0;
  for (std::size_t j = 0; j < b.size(); ++j) acc += (a[j] - b[j]) * (a[j] - b[j]);
  return std::sqrt(acc);
}

}  // namespace

void KeywordCentroids::validate() const {
  if (v0.size() != v1.size()) throw ContractError(kModule, "V0 and V1 differ in dimension");
  for (const auto* v : {&v0, &v1})
    for (double x : *v)
      if (!std::isfinite(x)) throw ContractError(kModule, "centroid holds a non-finite value");
}

KeywordCentroids zero_centroids(std::size_t dim, double learning_rate) {
  return {std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0), learning_rate};
}

KeywordCentroids centroid_sgd_step(std::span<const double> latents, std::span<const int> labels,
                                   const KeywordCentroids& c, double eta) {
  c.validate();
  const std::size_t d = c.dim();
  const std::size_t n = check_batch(latents, labels, d);
  std::array<std::vector<double>, 2> sums{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  std::array<std::size_t, 2> counts{0, 0};
  for (std::size_t i = 0; i < n; ++i) {
    const int k = labels[i];
    ++counts[k];
    for (std::size_t j = 0; j < d; ++j) sums[k][j] += latents[i * d + j];
  }
  KeywordCentroids out = c;
  for (int k = 0; k < 2; ++k) {
    if (counts[k] == 0) continue;
    auto& v = k == 0 ? out.v0 : out.v1;
    const double nk = static_cast<double>(counts[k]);
    for (std::size_t j = 0; j < d; ++j) v[j] -= eta * 2.0 * (nk * v[j] - sums[k][j]);
  }
  return out;
}

KeywordCentroids class_means(std::span<const double> latents, std::span<const int> labels,
                             const KeywordCentroids& fallback) {
  fallback.validate();
  const std::size_t d = fallback.dim();
  const std::size_t n = check_batch(latents, labels, d);
  KeywordCentroids out = fallback;
  for (int k = 0; k < 2; ++k) {
    std::vector<double> sum(d, 0.0);
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (labels[i] != k) continue;
      ++count;
      for (std::size_t j = 0; j < d; ++j) sum[j] += latents[i * d + j];
    }
    if (count == 0) continue;
    for (auto& s : sum) s /= static_cast<double>(count);
    (k == 0 ? out.v0 : out.v1) = std::move(sum);
  }
  return out;
}

std::array<double, 2> l2_features(std::span<const double> latent, const KeywordCentroids& c) {
  if (latent.size() != c.dim() || c.v1.size() != c.dim()) {
    throw ContractError(kModule, "latent of dimension " + std::to_string(latent.size()) +
                                     " does not match centroids of dimension " + std::to_string(c.dim()));
  }
  return {distance(latent, c.v0), distance(latent, c.v1)};
}

int nearest_centroid_classify(std::span<const double> latent, const KeywordCentroids& c) {
  const auto d = l2_features(latent, c);
  return d[1] < d[0] ? 1 : 0;
}

std::vector<io::NamedTensor> to_named_tensors(const KeywordCentroids& c) {
  c.validate();
  std::vector<io::NamedTensor> out;
  for (const auto& [name, v] : {std::pair{"centroid.v0", &c.v0}, std::pair{"centroid.v1", &c.v1}}) {
    io::NamedTensor t{name, {v->size()}, {}};
    for (double x : *v) t.values.push_back(static_cast<float>(x));
    out.push_back(std::move(t));
  }
  return out;
}

KeywordCentroids from_named_tensors(const std::vector<io::NamedTensor>& tensors, double learning_rate) {
  KeywordCentroids c;
  c.learning_rate = learning_rate;
  for (const auto& [name, v] : {std::pair{"centroid.v0", &c.v0}, std::pair{"centroid.v1", &c.v1}}) {
    const io::NamedTensor* found = nullptr;
    for (const auto& t : tensors)
      if (t.name == name) found = &t;
    if (!found) throw FormatError(kModule, std::string("checkpoint is missing tensor '") + name + "'");
    if (found->shape.size() != 1) throw FormatError(kModule, std::string("tensor '") + name + "' must be 1-D");
    v->assign(found->values.begin(), found->values.end());
  }
  if (c.v0.size() != c.v1.size()) throw FormatError(kModule, "centroid tensors differ in length");
  return c;
}

}  // namespace kws::centroid
