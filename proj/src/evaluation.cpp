#include "kws/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "kws/error.hpp"

namespace kws::eval {

namespace {

const char* kModule = "evaluation";

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

ConfusionCounts confusion(std::span<const double> probabilities, std::span<const int> labels, double threshold) {
  if (probabilities.empty()) throw ContractError(kModule, "confusion of an empty set");
  if (probabilities.size() != labels.size()) {
    throw ContractError(kModule, std::to_string(probabilities.size()) + " probabilities for " +
                                     std::to_string(labels.size()) + " labels");
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double p = probabilities[i];
    if (!(p >= 0.0 && p <= 1.0)) throw ContractError(kModule, "probability " + std::to_string(i) + " outside [0, 1]");
    if (labels[i] != 0 && labels[i] != 1) throw ContractError(kModule, "label " + std::to_string(i) + " is not 0/1");
    const bool predicted = p >= threshold;
    if (labels[i] == 1) {
      ++(predicted ? c.tp : c.fn);
    } else {
      ++(predicted ? c.fp : c.tn);
    }
  }
  return c;
}

EvalReport report(const ConfusionCounts& c, double threshold) {
  EvalReport r;
  r.counts = c;
  r.threshold = threshold;
  if (c.fp + c.tn > 0) r.far = static_cast<double>(c.fp) / static_cast<double>(c.fp + c.tn);
  if (c.fn + c.tp > 0) r.frr = static_cast<double>(c.fn) / static_cast<double>(c.fn + c.tp);
  if (r.far && r.frr) r.score = *r.far + *r.frr;
  if (c.total() > 0) r.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  return r;
}

EvalReport report_from_rates(double far, double frr) {
  if (!(far >= 0.0 && far <= 1.0) || !(frr >= 0.0 && frr <= 1.0)) {
    throw ContractError(kModule, "rates must lie in [0, 1]");
  }
  EvalReport r;
  r.far = far;
  r.frr = frr;
  r.score = far + frr;
  return r;
}

std::vector<EvalReport> threshold_sweep(std::span<const double> probabilities, std::span<const int> labels,
                                        std::span<const double> grid) {
  if (grid.empty()) throw ContractError(kModule, "threshold grid is empty");
  if (!std::is_sorted(grid.begin(), grid.end())) throw ContractError(kModule, "threshold grid must be ascending");
  std::vector<EvalReport> out;
  out.reserve(grid.size());
  for (double t : grid) out.push_back(report(confusion(probabilities, labels, t), t));
  return out;
}

std::string format_rate(const std::optional<double>& r) { return r ? fixed(*r, 3) : "undefined"; }

std::string format_report(const EvalReport& r) {
  return "FAR " + format_rate(r.far) + "  FRR " + format_rate(r.frr) + "  Score " + format_rate(r.score) +
         "  Accuracy " + fixed(r.accuracy, 3) + "  (threshold " + fixed(r.threshold, 2) +
         ", n=" + std::to_string(r.counts.total()) + ")";
}

std::string report_csv_header() { return "threshold,tp,fp,tn,fn,far,frr,score,accuracy"; }

std::string report_csv_row(const EvalReport& r) {
  auto full = [](const std::optional<double>& v) { return v ? fixed(*v, 6) : std::string("undefined"); };
  return fixed(r.threshold, 6) + "," + std::to_string(r.counts.tp) + "," + std::to_string(r.counts.fp) + "," +
         std::to_string(r.counts.tn) + "," + std::to_string(r.counts.fn) + "," + full(r.far) + "," + full(r.frr) +
         "," + full(r.score) + "," + fixed(r.accuracy, 6);
}

MarginHistogram margin_histogram(std::span<const std::array<double, 2>> distances, std::span<const int> labels,
                                 std::size_t bins) {
  if (distances.size() != labels.size()) throw ContractError(kModule, "distances and labels differ in length");
  if (distances.empty()) throw ContractError(kModule, "histogram of an empty set");
  if (bins == 0) throw ContractError(kModule, "histogram needs at least one bin");
  std::vector<double> margins(distances.size());
  for (std::size_t i = 0; i < distances.size(); ++i) {
    margins[i] = distances[i][0] - distances[i][1];
    if (!std::isfinite(margins[i])) throw ContractError(kModule, "non-finite distance at row " + std::to_string(i));
    if (labels[i] != 0 && labels[i] != 1) throw ContractError(kModule, "label " + std::to_string(i) + " is not 0/1");
  }
  const auto [lo_it, hi_it] = std::minmax_element(margins.begin(), margins.end());
  const double lo = *lo_it, hi = *hi_it;
  MarginHistogram h;
  const std::size_t n = hi > lo ? bins : 1;
  h.edges.resize(n + 1);
  for (std::size_t b = 0; b <= n; ++b) h.edges[b] = lo + (hi - lo) * static_cast<double>(b) / static_cast<double>(n);
  h.edges[n] = hi;
  h.count_neg.assign(n, 0);
  h.count_pos.assign(n, 0);
  for (std::size_t i = 0; i < margins.size(); ++i) {
    std::size_t b = hi > lo ? static_cast<std::size_t>((margins[i] - lo) / (hi - lo) * static_cast<double>(n)) : 0;
    b = std::min(b, n - 1);
    ++(labels[i] ? h.count_pos[b] : h.count_neg[b]);
  }
  return h;
}

void write_histogram(const MarginHistogram& h, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(kModule, "cannot write histogram to " + path.string());
  out << "bin_lo,bin_hi,count_neg,count_pos\n";
  char buf[128];
  for (std::size_t b = 0; b < h.count_neg.size(); ++b) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g,%zu,%zu\n", h.edges[b], h.edges[b + 1], h.count_neg[b], h.count_pos[b]);
    out << buf;
  }
  if (!out) throw IoError(kModule, "short write to " + path.string());
}

}  // namespace kws::eval
