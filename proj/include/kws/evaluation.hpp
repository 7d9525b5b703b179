#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace kws::eval {

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t total() const { return tp + fp + tn + fn; }
};

// A rate is empty when its denominator is zero; Score is empty unless both
// rates are defined.
struct EvalReport {
  ConfusionCounts counts;
  std::optional<double> far;  // FP / (FP + TN)
  std::optional<double> frr;  // FN / (FN + TP)
  std::optional<double> score;
  double accuracy = 0.0;      // (TP + TN) / total
  double threshold = 0.5;
};

// Predicts positive when p >= threshold. Throws ContractError on empty or
// misaligned input, labels outside {0, 1} or probabilities outside [0, 1].
ConfusionCounts confusion(std::span<const double> probabilities, std::span<const int> labels,
                          double threshold = 0.5);

EvalReport report(const ConfusionCounts& c, double threshold = 0.5);

// Score from published rates alone.
EvalReport report_from_rates(double far, double frr);

// One report per threshold; the grid must be nonempty and ascending.
std::vector<EvalReport> threshold_sweep(std::span<const double> probabilities, std::span<const int> labels,
                                        std::span<const double> grid);

// Rounded to 3 decimals, or "undefined".
std::string format_rate(const std::optional<double>& r);
// "FAR 0.044  FRR 0.107  Score 0.151  Accuracy 0.941  (threshold 0.50, n=...)"
std::string format_report(const EvalReport& r);
// Delimited record with a fixed column order; see report_csv_header.
std::string report_csv_header();
std::string report_csv_row(const EvalReport& r);

// Per-class histogram of the signed distance margin ||x - V0|| - ||x - V1||.
struct MarginHistogram {
  std::vector<double> edges;  // bins + 1 ascending edges
  std::vector<std::size_t> count_neg, count_pos;
};

// Bins span [min, max] of the margins; when every margin is equal a single
// zero-width bin holds them all. distances are rows of [d0, d1].
MarginHistogram margin_histogram(std::span<const std::array<double, 2>> distances, std::span<const int> labels,
                                 std::size_t bins = 20);

// Columns: bin_lo, bin_hi, count_neg, count_pos. Throws IoError when the
// path cannot be written.
void write_histogram(const MarginHistogram& h, const std::filesystem::path& path);

}  // namespace kws::eval
