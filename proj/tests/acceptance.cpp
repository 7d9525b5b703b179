// Acceptance suite: one pass/fail line per criterion, exit status 0 iff all pass.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "array_scenes.hpp"
#include "gradcheck.hpp"
#include "kws/centroid.hpp"
#include "kws/evaluation.hpp"
#include "kws/model.hpp"
#include "kws/pipeline.hpp"
#include "kws/trainer.hpp"
#include "published_results.hpp"

using namespace kws;
using kws::testing::gradient_relative_error;
using kws::testing::project;
using kws::testing::random_tensor;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

model::ModelConfig mini_config(std::size_t channels, bool centroids) {
  model::ModelConfig c;
  c.channels = channels;
  c.input_frames = 16;
  c.mel_bins = 6;
  c.encoder_width = 4;
  c.encoder_kernel = 3;
  c.encoder_stride = 4;
  c.latent_dim = 8;
  c.centroid_aware = centroids;
  return c;
}

long thousandths(double v) { return std::lround(v * 1000.0); }

// ------------------------------------------------------------------ 1

Outcome published_arithmetic() {
  long worst = 0;
  std::string worst_row;
  for (const auto& row : kws::testing::kPublishedRows) {
    const auto r = eval::report_from_rates(row.far, row.frr);
    const long dev = std::abs(thousandths(*r.score) - thousandths(row.score));
    if (dev > worst || worst_row.empty()) {
      worst = dev;
      worst_row = std::string(row.system) + " " + row.split;
    }
  }
  const auto a = eval::report_from_rates(0.261, 0.083), b = eval::report_from_rates(0.044, 0.107),
             c = eval::report_from_rates(0.054, 0.072);
  std::ostringstream d;
  d << kws::testing::kPublishedRows.size() << " rows, max deviation " << worst << "e-3 (" << worst_row << "); "
    << "0.261+0.083=" << eval::format_rate(a.score) << ", 0.044+0.107=" << eval::format_rate(b.score)
    << ", 0.054+0.072=" << eval::format_rate(c.score);
  return {worst <= 1, d.str()};
}

// ------------------------------------------------------------------ 2

Outcome identity_at_init() {
  model::Model<double> m(mini_config(3, false));
  std::mt19937_64 rng(3);
  m.init(rng, model::InitMode::Identity);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    auto x = random_tensor(rng, {2, 3, 4, 4}, false, 3.0);
    for (std::size_t b = 0; b < m.config().blocks; ++b) {
      nn::Tape<double> tape(nn::Tape<double>::Mode::Inference);
      const auto y = model::mixing_stack(tape, x, m.block_params(b));
      for (std::size_t k = 0; k < x.size(); ++k) worst = std::max(worst, std::abs(x.values()[k] - y.values()[k]));
    }
  }
  return {worst < 1e-6, "100 inputs x 4 blocks, max |y - x| = " + fmt("%.3g", worst)};
}

// ------------------------------------------------------------------ 3

struct GradSuite {
  std::mt19937_64 rng{1234};
  double worst = 0;
  std::size_t instances = 0;
  std::string worst_op;

  std::size_t ext(std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); }

  void check(const std::string& op, const testing::LossFn& f, std::vector<nn::Tensor<double>> params, double step = 1e-5) {
    const double e = gradient_relative_error(f, std::move(params), step);
    ++instances;
    if (e > worst || !std::isfinite(e)) {
      worst = std::isfinite(e) ? e : 1e300;
      worst_op = op;
    }
  }
};

Outcome gradient_suite() {
  using namespace nn;
  const auto t0 = Clock::now();
  GradSuite g;
  auto& rng = g.rng;
  constexpr int kTrials = 20;
  for (int i = 0; i < kTrials; ++i) {
    Shape s{g.ext(1, 4), g.ext(1, 4), g.ext(1, 4)};
    const int axis = static_cast<int>(g.ext(0, 2));
    const std::size_t m = g.ext(1, 4);
    auto x = random_tensor(rng, s);
    auto w = random_tensor(rng, {s[static_cast<std::size_t>(axis)], m});
    auto b = random_tensor(rng, {m});
    Shape os = s;
    os[static_cast<std::size_t>(axis)] = m;
    auto r = random_tensor(rng, os, false);
    g.check("affine", [&](Tape<double>& t) { return project(t, affine(t, x, w, b, axis), r); }, {x, w, b});
  }
  for (int i = 0; i < kTrials; ++i) {
    Shape s{g.ext(1, 4), g.ext(2, 5), g.ext(1, 4)};
    const int axis = static_cast<int>(g.ext(0, 2));
    if (s[static_cast<std::size_t>(axis)] < 2) s[static_cast<std::size_t>(axis)] = 2;
    auto x = random_tensor(rng, s);
    auto ga = random_tensor(rng, {s[static_cast<std::size_t>(axis)]});
    auto be = random_tensor(rng, {s[static_cast<std::size_t>(axis)]});
    auto r = random_tensor(rng, s, false);
    g.check("layer_norm", [&](Tape<double>& t) { return project(t, layer_norm(t, x, ga, be, axis), r); }, {x, ga, be});
  }
  for (int i = 0; i < kTrials; ++i) {
    auto x = random_tensor(rng, {g.ext(1, 5), g.ext(1, 5)}, true, 2.0);
    auto r = random_tensor(rng, x.shape(), false);
    g.check("gelu", [&](Tape<double>& t) { return project(t, gelu(t, x), r); }, {x});
  }
  for (int i = 0; i < kTrials; ++i) {
    Shape s{g.ext(1, 4), g.ext(1, 4), g.ext(1, 4)};
    auto a = random_tensor(rng, s);
    auto b = random_tensor(rng, s);
    const int axis = static_cast<int>(g.ext(0, 2));
    Shape ms = s;
    ms.erase(ms.begin() + axis);
    auto r = random_tensor(rng, ms, false);
    g.check("add/scale/mean/reshape",
            [&](Tape<double>& t) {
              auto y = scale(t, add(t, a, b), 0.7);
              auto z = reshape(t, y, Shape{y.size()});
              return project(t, mean(t, reshape(t, z, s), axis), r);
            },
            {a, b});
  }
  for (int i = 0; i < kTrials; ++i) {
    Shape s{g.ext(1, 3), g.ext(1, 3), g.ext(1, 3), g.ext(1, 3)};
    std::vector<std::size_t> order{0, 1, 2, 3};
    std::shuffle(order.begin(), order.end(), rng);
    auto a = random_tensor(rng, s);
    Shape sb = s;
    sb[3] = g.ext(1, 3);
    auto b = random_tensor(rng, sb);
    const std::size_t idx = g.ext(0, s[1] - 1);
    g.check("permute/concat/select",
            [&](Tape<double>& t) {
              auto c = concat(t, a, b, -1);
              auto p = permute(t, c, order);
              auto sel = select(t, c, 1, idx);
              std::mt19937_64 local(99);
              auto rp = random_tensor(local, p.shape(), false);
              auto rs = random_tensor(local, sel.shape(), false);
              return add(t, project(t, p, rp), project(t, sel, rs));
            },
            {a, b});
  }
  for (int i = 0; i < kTrials; ++i) {
    auto x = random_tensor(rng, {g.ext(1, 4), g.ext(2, 5)});
    auto r = random_tensor(rng, x.shape(), false);
    g.check("softmax", [&](Tape<double>& t) { return project(t, softmax(t, x), r); }, {x});
  }
  for (int i = 0; i < kTrials; ++i) {
    const std::size_t n = g.ext(1, 3), cin = g.ext(1, 4), len = g.ext(3, 8), cout = g.ext(1, 4);
    const std::size_t k = g.ext(1, 3), stride = g.ext(1, 2), pad = g.ext(0, 2);
    auto x = random_tensor(rng, {n, cin, len});
    auto w = random_tensor(rng, {cout, cin, k});
    auto b = random_tensor(rng, {cout});
    auto dw = random_tensor(rng, {cin, k});
    auto db = random_tensor(rng, {cin});
    auto pw = random_tensor(rng, {cin, cout});
    auto pb = random_tensor(rng, {cout});
    const std::size_t lo = conv_output_length(len, k, {stride, pad});
    auto r1 = random_tensor(rng, {n, cout, lo}, false);
    auto r2 = random_tensor(rng, {n, cin, lo}, false);
    auto r3 = random_tensor(rng, {n, cout, lo}, false);
    g.check("conv1d/depthwise/separable",
            [&](Tape<double>& t) {
              auto y1 = project(t, conv1d(t, x, w, b, {stride, pad}), r1);
              auto y2 = project(t, depthwise_conv1d(t, x, dw, db, {stride, pad}), r2);
              auto y3 = project(t, depthwise_separable_conv(t, x, dw, pw, pb, {stride, pad}), r3);
              return add(t, add(t, y1, y2), y3);
            },
            {x, w, b, dw, db, pw, pb});
  }
  for (int i = 0; i < kTrials; ++i) {
    const std::size_t rows = g.ext(1, 5), d = g.ext(1, 5);
    auto x = random_tensor(rng, {rows, d});
    auto v = random_tensor(rng, {d});
    std::vector<int> mask(rows), labels(rows);
    for (auto& m : mask) m = static_cast<int>(g.ext(0, 1));
    for (auto& l : labels) l = static_cast<int>(g.ext(0, 1));
    auto r = random_tensor(rng, {rows}, false);
    auto logits = random_tensor(rng, {rows, 2});
    g.check("l2/masked distance/bce",
            [&](Tape<double>& t) {
              auto a = project(t, l2_distance(t, x, v), r);
              auto b = masked_squared_distance(t, x, v, mask);
              auto c = binary_cross_entropy(t, select(t, softmax(t, logits), 1, 1), labels);
              return add(t, add(t, a, b), c);
            },
            {x, v, logits});
  }
  // One mixer block: both DS-convs, then temporal, frequency and channel mixing.
  for (int i = 0; i < kTrials; ++i) {
    model::Model<double> m(mini_config(3, false));
    auto& p = m.block_params(0);
    std::vector<Tensor<double>> params;
    for (auto* t : {&p.freq_depth, &p.freq_point, &p.freq_bias, &p.time_depth, &p.time_point, &p.time_bias,
                    &p.ln_t_gamma, &p.ln_t_beta, &p.w1, &p.b1, &p.w2, &p.b2, &p.ln_f_gamma, &p.ln_f_beta, &p.w3,
                    &p.b3, &p.w4, &p.b4, &p.ln_c_gamma, &p.ln_c_beta, &p.w5, &p.b5, &p.w6, &p.b6}) {
      *t = random_tensor(rng, t->shape(), true, 0.5);
      params.push_back(*t);
    }
    auto x = random_tensor(rng, {2, 3, 4, 4});
    params.push_back(x);
    auto r = random_tensor(rng, x.shape(), false);
    g.check("mixer block",
            [&](Tape<double>& t) { return project(t, model::mixing_stack(t, model::block_convs(t, x, p, 3), p), r); },
            params);
  }
  // End-to-end miniature model (C = 2, T' = F' = 4, D = 8, centroid-aware).
  std::mt19937_64 mrng(15);
  for (int trial = 0; trial < kTrials; ++trial) {
    model::Model<double> m(mini_config(2, true));
    Tensor<double> x, v0, v1;
    for (bool saturated = true; saturated;) {
      std::normal_distribution<double> d(0.0, 0.4);
      for (auto& [name, t] : m.parameters())
        for (auto& v : t.values()) v = d(mrng);
      x = random_tensor(mrng, {2, 2, 16, 6});
      v0 = random_tensor(mrng, {8}, false);
      v1 = random_tensor(mrng, {8}, false);
      Tape<double> tape(Tape<double>::Mode::Inference);
      const auto p = m.forward(tape, x, v0, v1).probabilities;
      saturated = std::any_of(p.values().begin(), p.values().end(), [](double v) { return v < 1e-3; });
    }
    const std::vector<int> labels{1, 0};
    std::vector<Tensor<double>> params{x};
    for (auto& [name, p] : m.parameters()) params.push_back(p);
    g.check("end-to-end model",
            [&](Tape<double>& t) {
              auto out = m.forward(t, x, v0, v1);
              return binary_cross_entropy(t, select(t, out.probabilities, 1, 1), labels);
            },
            params, 1e-6);
  }
  const double secs = seconds_since(t0);
  std::ostringstream d;
  d << g.instances << " instances over 10 groups, max rel err " << fmt("%.2e", g.worst) << " (" << g.worst_op << "), "
    << fmt("%.1f", secs) << " s";
  return {g.worst < 1e-4 && secs < 60.0, d.str()};
}

// ------------------------------------------------------------------ 4

Outcome centroid_oracle() {
  std::mt19937_64 rng(6);
  const std::size_t d = 16, n = 100, steps = 300;
  std::normal_distribution<double> nd(2.0, 1.5);
  std::vector<double> latents(n * d);
  for (auto& v : latents) v = nd(rng);
  std::vector<int> y(n);
  std::bernoulli_distribution coin(0.5);
  for (auto& v : y) v = coin(rng) ? 1 : 0;
  std::vector<double> mean0(d, 0.0), mean1(d, 0.0);
  double n0 = 0, n1 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto& m = y[i] ? mean1 : mean0;
    (y[i] ? n1 : n0) += 1;
    for (std::size_t j = 0; j < d; ++j) m[j] += latents[i * d + j];
  }
  for (auto& v : mean0) v /= n0;
  for (auto& v : mean1) v /= n1;
  auto c = centroid::zero_centroids(d);
  const double pi = std::acos(-1.0);
  for (std::size_t t = 0; t < steps; ++t) {
    const double eta = 0.005 * 0.5 * (1 + std::cos(pi * static_cast<double>(t) / steps));
    c = centroid::centroid_sgd_step(latents, y, c, eta);
  }
  double conv = 0;
  for (std::size_t j = 0; j < d; ++j)
    conv = std::max({conv, std::abs(c.v0[j] - mean0[j]), std::abs(c.v1[j] - mean1[j])});

  // One step against the symbolic gradient of sum_i ||f_i - V_y||^2.
  double step_err = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t dd = 1 + trial % 9, nn_ = 1 + trial % 17;
    std::normal_distribution<double> z(0.0, 1.0), wide(0.0, 3.0);
    centroid::KeywordCentroids k{std::vector<double>(dd), std::vector<double>(dd), 0.01};
    for (auto& v : k.v0) v = z(rng);
    for (auto& v : k.v1) v = z(rng);
    std::vector<double> f(nn_ * dd);
    for (auto& v : f) v = wide(rng);
    std::vector<int> lab(nn_);
    for (auto& v : lab) v = coin(rng) ? 1 : 0;
    const double eta = 0.001 * (1 + trial % 7);
    const auto out = centroid::centroid_sgd_step(f, lab, k, eta);
    for (int cls = 0; cls < 2; ++cls) {
      const auto& v = cls ? k.v1 : k.v0;
      const auto& got = cls ? out.v1 : out.v0;
      for (std::size_t j = 0; j < dd; ++j) {
        double grad = 0;
        for (std::size_t i = 0; i < nn_; ++i)
          if (lab[i] == cls) grad += 2.0 * (v[j] - f[i * dd + j]);
        step_err = std::max(step_err, std::abs(got[j] - (v[j] - eta * grad)));
      }
    }
  }
  return {conv < 1e-3 && step_err < 1e-10,
          "300 steps: sup-norm to class means " + fmt("%.2e", conv) + "; single step vs symbolic " + fmt("%.2e", step_err)};
}

// ------------------------------------------------------------------ 5

Outcome mvdr() {
  const auto geom = array::ArrayGeometry::uniform_linear(6);
  double distortion = 0, worst_db = -1e300;
  for (std::uint64_t seed : {8u, 9u, 10u}) {
    const auto scene = kws::testing::make_two_source_scene(seed, geom, 90.0, 40.0);
    const auto r = kws::testing::mvdr_null_depth(scene, geom, 90.0, 40.0);
    distortion = std::max(distortion, r.max_distortion);
    worst_db = std::max(worst_db, r.broadband_db);
  }
  return {distortion < 1e-6 && worst_db <= -20.0,
          "3 scenes, max |w^H d - 1| over all bins " + fmt("%.2e", distortion) + ", interferer response " +
              fmt("%.1f", worst_db) + " dB re look"};
}

// ------------------------------------------------------------------ 6

Outcome wpe() {
  const auto t0 = Clock::now();
  double least = 1e300;
  for (std::uint64_t seed : {13u, 14u, 15u}) {
    const auto scene = kws::testing::make_reverb_scene(seed);
    const auto y = array::wpe_waveform(scene.reverberant);
    const std::size_t margin = 8000;
    const double before = kws::testing::late_energy(scene.reverberant.samples[0], scene.early.samples[0], margin);
    const double after = kws::testing::late_energy(y.samples[0], scene.early.samples[0], margin);
    least = std::min(least, 10.0 * std::log10(before / after));
  }
  const auto scene = kws::testing::make_reverb_scene(16, {6, 1.0});
  array::FrontendConfig cfg;
  cfg.wpe.iterations = 0;
  const bool waveform_same = array::wpe_waveform(scene.reverberant, cfg).samples == scene.reverberant.samples;
  const auto x = array::analyze(scene.reverberant, cfg);
  const auto y = array::wpe_dereverb(x, cfg.wpe);
  bool stft_same = true;
  for (std::size_t c = 0; c < x.size(); ++c) stft_same = stft_same && x[c].data == y[c].data;
  const double secs = seconds_since(t0);
  return {least >= 5.0 && waveform_same && stft_same && secs < 60.0,
          "late energy reduced by >= " + fmt("%.1f", least) + " dB over 3 scenes; iterations=0 bit-identical: " +
              (waveform_same && stft_same ? "yes" : "no") + "; " + fmt("%.1f", secs) + " s"};
}

// ------------------------------------------------------------------ 7, 8

struct Benchmark {
  std::size_t train = 2000, dev = 400, eval = 400, epochs = 20, threads = 1;
  std::uint64_t trainer_seed = 7;
  fs::path dir;
};

struct BenchRun {
  std::optional<double> score;
  std::string report;
  double train_seconds = 0;
  std::size_t parameters = 0;
};

std::vector<train::Example> channel0(const std::vector<train::Example>& xs) {
  std::vector<train::Example> out;
  out.reserve(xs.size());
  for (const auto& e : xs) {
    train::Example o;
    o.label = e.label;
    o.feature = dsp::FBankFeature(1, e.feature.frames, e.feature.bins, 0.0f);
    std::copy_n(e.feature.values.begin(), e.feature.frames * e.feature.bins, o.feature.values.begin());
    out.push_back(std::move(o));
  }
  return out;
}

BenchRun bench_train(const Benchmark& b, const train::TrainingData& data, const std::vector<train::Example>& eval_set,
                     std::size_t channels, bool centroid_aware, const std::string& tag) {
  train::TrainerConfig tc;
  tc.phases = {{io::Field::Far, b.epochs}};
  tc.seed = b.trainer_seed;
  const auto mc = model::benchmark_config(channels, centroid_aware);
  const auto dir = b.dir / tag;
  fs::remove_all(dir);
  const auto t0 = Clock::now();
  train::Trainer trainer(mc, tc, data, dir);
  trainer.run();
  BenchRun r;
  r.train_seconds = seconds_since(t0);
  r.parameters = model::parameter_count(mc);
  // Model selection on dev; the eval split is touched once.
  const auto best = train::load_trained(io::load_checkpoint(dir / "best.ckpt"));
  const auto p = train::predict(best.model, best.centroids, eval_set);
  const auto rep = eval::report(eval::confusion(p.probabilities, train::labels_of(eval_set)));
  r.score = rep.score;
  r.report = eval::format_report(rep);
  std::cout << "    " << tag << ": " << r.parameters << " params, " << fmt("%.0f", r.train_seconds) << " s training, eval "
            << r.report << "\n"
            << std::flush;
  return r;
}

struct BenchmarkResults {
  BenchRun multi, single, centroid;
  double data_seconds = 0;
  std::size_t positives_train = 0, positives_eval = 0;
};

BenchmarkResults run_benchmark(const Benchmark& b) {
  BenchmarkResults res;
  const auto corpus = scene::benchmark_corpus();
  const pipeline::FrontendOptions raw;
  const dsp::FBankConfig fbank;
  const auto t0 = Clock::now();
  train::TrainingData six;
  six.far = pipeline::scene_examples(corpus, io::Field::Far, 0, pipeline::Split::Train, b.train, raw, fbank, b.threads);
  six.dev = pipeline::scene_examples(corpus, io::Field::Far, 0, pipeline::Split::Dev, b.dev, raw, fbank, b.threads);
  const auto eval6 = pipeline::scene_examples(corpus, io::Field::Far, 0, pipeline::Split::Eval, b.eval, raw, fbank, b.threads);
  res.data_seconds = seconds_since(t0);
  for (const auto& e : six.far) res.positives_train += static_cast<std::size_t>(e.label);
  for (const auto& e : eval6) res.positives_eval += static_cast<std::size_t>(e.label);
  std::cout << "    corpus: " << b.train << " train (" << res.positives_train << " positive) / " << b.dev << " dev / "
            << b.eval << " eval (" << res.positives_eval << " positive), SNR " << corpus.far.snr_min_db << ".."
            << corpus.far.snr_max_db << " dB, generated in " << fmt("%.0f", res.data_seconds) << " s\n"
            << std::flush;

  train::TrainingData one;
  one.far = channel0(six.far);
  one.dev = channel0(six.dev);
  const auto eval1 = channel0(eval6);

  res.multi = bench_train(b, six, eval6, 6, false, "six_channel");
  res.single = bench_train(b, one, eval1, 1, false, "channel0");
  res.centroid = bench_train(b, six, eval6, 6, true, "six_channel_centroid");
  return res;
}

Outcome end_to_end(const BenchmarkResults& r) {
  const bool score_ok = r.multi.score && *r.multi.score <= 0.10;
  const bool time_ok = r.multi.train_seconds <= 15 * 60.0;
  const bool worse = r.multi.score && r.single.score && *r.single.score > *r.multi.score;
  std::ostringstream d;
  d << "6-ch Score " << eval::format_rate(r.multi.score) << " (<= 0.100: " << (score_ok ? "yes" : "no") << ") in "
    << fmt("%.0f", r.multi.train_seconds) << " s training (<= 900 s: " << (time_ok ? "yes" : "no") << "); ch0-only Score "
    << eval::format_rate(r.single.score) << " (strictly worse: " << (worse ? "yes" : "no") << ")";
  return {score_ok && time_ok && worse, d.str()};
}

Outcome centroid_variant(const BenchmarkResults& r) {
  std::ostringstream d;
  d << "centroid-aware 6-ch Score " << eval::format_rate(r.centroid.score) << " beside plain 6-ch "
    << eval::format_rate(r.multi.score) << "; ordering centroid < plain: "
    << (r.centroid.score && r.multi.score && *r.centroid.score < *r.multi.score ? "yes" : "no") << " (report only)";
  return {r.centroid.score.has_value(), d.str()};
}

// ------------------------------------------------------------------ 9

Outcome parameter_accounting() {
  using model::ReferenceModel;
  bool ok = true;
  std::ostringstream d;
  for (auto which : {ReferenceModel::SingleChannel, ReferenceModel::MultiChannel, ReferenceModel::MultiChannelCentroid,
                     ReferenceModel::MultiLookCentroid}) {
    const double got = static_cast<double>(model::parameter_count(model::reference_config(which)));
    const double want = static_cast<double>(model::published_parameter_count(which));
    const double rel = (got - want) / want;
    ok = ok && std::abs(rel) <= 0.20;
    d << model::to_string(which) << " " << static_cast<std::size_t>(got) << " vs " << static_cast<std::size_t>(want)
      << " (" << fmt("%+.1f", 100 * rel) << "%); ";
  }
  auto s = d.str();
  s.resize(s.size() - 2);
  return {ok, s};
}

// ------------------------------------------------------------------ 10

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome determinism(const fs::path& base) {
  std::mt19937_64 rng(4);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  auto examples = [&](std::size_t n) {
    std::vector<train::Example> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      out[i].label = i % 3 == 0 ? 1 : 0;
      out[i].feature = dsp::FBankFeature(2, 16, 6, 0.0f);
      for (auto& v : out[i].feature.values) v = nd(rng);
    }
    return out;
  };
  train::TrainingData d;
  d.far = examples(70);
  d.dev = examples(12);
  train::TrainerConfig tc;
  tc.batch_size = 16;
  tc.phases = {{io::Field::Far, 3}};
  tc.seed = 5;
  tc.checkpoint_every_steps = 4;
  const auto a = base / "det_a", b = base / "det_b", part = base / "det_part";
  for (const auto& p : {a, b, part}) fs::remove_all(p);
  train::Trainer(mini_config(2, true), tc, d, a).run();
  train::Trainer(mini_config(2, true), tc, d, b).run();
  const bool same_logs = !slurp(a / "metrics.jsonl").empty() && slurp(a / "metrics.jsonl") == slurp(b / "metrics.jsonl");

  train::Trainer first(mini_config(2, true), tc, d, part);
  first.run(8);
  auto resumed = train::Trainer::resume(part / "last.ckpt", d, part);
  resumed.run();
  const bool resume_same = slurp(a / "metrics.jsonl") == slurp(part / "metrics.jsonl") &&
                           io::read_file(a / "last.ckpt") == io::read_file(part / "last.ckpt");

  const dsp::FBankConfig fb;
  const Waveform two_seconds(1, 32000, 16000);
  const auto frames = dsp::log_mel_fbank(two_seconds, fb).frames;
  std::ostringstream out;
  out << "identical-seed logs bitwise equal: " << (same_logs ? "yes" : "no")
      << "; resume at step 8 of " << resumed.total_steps() << " continues bitwise: " << (resume_same ? "yes" : "no")
      << "; frames for 2 s @16 kHz/512/160: " << frames << " (config " << fb.num_frames() << ", win " << fb.win_length()
      << ", hop " << fb.hop_length() << ")";
  return {same_logs && resume_same && frames == 197 && fb.num_frames() == 197 && fb.win_length() == 512 &&
              fb.hop_length() == 160,
          out.str()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite: one pass/fail line per criterion"};
  std::set<int> only;
  Benchmark bench;
  std::string dir = (fs::temp_directory_path() / "kws_acceptance").string();
  app.add_option("--only", only, "run only these criteria")->check(CLI::Range(1, 10));
  app.add_option("--threads", bench.threads, "workers for corpus synthesis")->check(CLI::PositiveNumber);
  app.add_option("--epochs", bench.epochs, "benchmark epochs");
  app.add_option("--dir", dir, "scratch directory for run outputs");
  CLI11_PARSE(app, argc, argv);
  bench.dir = dir;
  fs::create_directories(bench.dir);

  auto wanted = [&](int k) { return only.empty() || only.count(k) > 0; };
  int failures = 0;
  auto report = [&](int k, const std::string& title, const std::function<Outcome()>& fn) {
    if (!wanted(k)) return;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << k << ". " << title << ": " << o.detail << "  ["
              << fmt("%.1f", seconds_since(t0)) << " s]\n"
              << std::flush;
  };

  report(1, "published Score arithmetic", published_arithmetic);
  report(2, "identity mixing stack at init", identity_at_init);
  report(3, "gradient suite", gradient_suite);
  report(4, "centroid oracle", centroid_oracle);
  report(5, "MVDR", mvdr);
  report(6, "WPE", wpe);
  if (wanted(7) || wanted(8)) {
    std::optional<BenchmarkResults> results;
    std::string error;
    try {
      results = run_benchmark(bench);
    } catch (const std::exception& e) {
      error = e.what();
    }
    auto from = [&](auto fn) {
      return [&, fn]() -> Outcome { return results ? fn(*results) : Outcome{false, "benchmark threw: " + error}; };
    };
    report(7, "end-to-end synthetic benchmark", from(end_to_end));
    report(8, "centroid-aware variant", from(centroid_variant));
  }
  report(9, "parameter accounting", parameter_accounting);
  report(10, "determinism and persistence", [&] { return determinism(bench.dir); });

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << "\n";
  return failures == 0 ? 0 : 1;
}
