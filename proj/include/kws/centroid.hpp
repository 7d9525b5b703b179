#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "kws/io.hpp"

// Learned per-class keyword centroids in latent space.
namespace kws::centroid {

struct KeywordCentroids {
  std::vector<double> v0;  // negative class
  std::vector<double> v1;  // keyword
  double learning_rate = 0.01;

  std::size_t dim() const { return v0.size(); }
  // Throws ContractError on mismatched dimensions or non-finite values.
  void validate() const;
};

KeywordCentroids zero_centroids(std::size_t dim, double learning_rate = 0.01);

// Latents are row-major [n, dim]; labels are 0/1, one per row.
//
// One descent step on sum_{i in class k} ||f_i - V_k||^2 for each class:
// V_k <- V_k - eta * 2 * (n_k V_k - sum f_i). A class absent from the batch
// keeps its centroid.
KeywordCentroids centroid_sgd_step(std::span<const double> latents, std::span<const int> labels,
                                   const KeywordCentroids& c, double eta);
inline KeywordCentroids centroid_sgd_step(std::span<const double> latents, std::span<const int> labels,
                                          const KeywordCentroids& c) {
  return centroid_sgd_step(latents, labels, c, c.learning_rate);
}

// Class means of the batch; a class absent from the batch keeps the value
// it has in `fallback`.
KeywordCentroids class_means(std::span<const double> latents, std::span<const int> labels,
                             const KeywordCentroids& fallback);

// [||latent - V0||, ||latent - V1||].
std::array<double, 2> l2_features(std::span<const double> latent, const KeywordCentroids& c);

// argmin of l2_features; an exact tie goes to class 0.
int nearest_centroid_classify(std::span<const double> latent, const KeywordCentroids& c);

// Stored as "centroid.v0" and "centroid.v1".
std::vector<io::NamedTensor> to_named_tensors(const KeywordCentroids& c);
KeywordCentroids from_named_tensors(const std::vector<io::NamedTensor>& tensors, double learning_rate = 0.01);

}  // namespace kws::centroid
