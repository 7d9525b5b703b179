#pragma once

#include <cstddef>
#include <random>
#include <vector>

namespace kws {

// Seeded engine threaded explicitly through every stochastic operation.
using Rng = std::mt19937_64;

// Multi-channel PCM audio, amplitudes nominally in [-1, 1].
struct Waveform {
  std::vector<std::vector<double>> samples;  // [channel][sample]
  int sample_rate_hz = 16000;

  Waveform() = default;
  Waveform(std::size_t channels, std::size_t length, int rate)
      : samples(channels, std::vector<double>(length, 0.0)), sample_rate_hz(rate) {}

  std::size_t channels() const noexcept { return samples.size(); }
  std::size_t length() const noexcept { return samples.empty() ? 0 : samples.front().size(); }

  // Throws ContractError unless all channels have equal length and the rate
  // is positive.
  void validate() const;
};

double energy(const std::vector<double>& x);

}  // namespace kws
