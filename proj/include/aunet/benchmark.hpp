#pragma once

// Paired baseline-vs-attention experiment on synthetic volumes, plus the
// attention localization ratio used to summarize trained gates.

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "aunet/metrics.hpp"
#include "aunet/stats.hpp"
#include "aunet/synthetic.hpp"
#include "aunet/training.hpp"

namespace aunet {

/// Mean attention over voxels of class `fg` divided by the mean over class 0,
/// with the map of `gate` trilinearly resampled to the label grid.
inline double attention_ratio(const Tensor& alpha, const LabelVolume& labels, std::size_t fg) {
  if (alpha.rank() != 5 || alpha.dim(0) != 1 || alpha.dim(1) != 1) {
    throw DimensionError("attention_ratio: expected a (1,1,D,H,W) map, got " + detail::shape_str(alpha.shape()));
  }
  NoGradGuard guard;
  const Tensor full = trilinear_resample(alpha, {labels.dims[0], labels.dims[1], labels.dims[2]});
  auto a = full.data();
  // Neumaier-compensated sums; a constant map must give a ratio of 1.
  struct Sum {
    double s = 0.0, c = 0.0;
    void add(double x) {
      const double t = s + x;
      c += std::abs(s) >= std::abs(x) ? (s - t) + x : (x - t) + s;
      s = t;
    }
    double value() const { return s + c; }
  } sf, sb;
  std::size_t nf = 0, nb = 0;
  for (std::size_t i = 0; i < labels.labels.size(); ++i) {
    if (labels.labels[i] == fg) {
      sf.add(a[i]);
      ++nf;
    } else if (labels.labels[i] == 0) {
      sb.add(a[i]);
      ++nb;
    }
  }
  if (nf == 0 || nb == 0) throw UndefinedMetricError("attention_ratio: foreground or background is empty");
  return (sf.value() / static_cast<double>(nf)) / (sb.value() / static_cast<double>(nb));
}

struct BenchmarkSpec {
  std::size_t n_train = 20;
  std::size_t n_test = 10;
  SyntheticSpec synth;  // seed is replaced per volume
  ModelConfig model;
  TrainConfig train;    // seed is replaced per run
  std::size_t target_class = 2;
};

struct ModelScores {
  double dsc = 0.0;     // mean over test volumes, target class
  double recall = 0.0;
  std::vector<double> per_volume_dsc;
  std::vector<double> per_volume_recall;
  std::optional<double> alpha_ratio;  // finest gate, mean over test volumes
  double seconds = 0.0;
};

struct SeedOutcome {
  std::uint64_t seed = 0;
  ModelScores baseline;
  ModelScores attention;
};

/// Training and test sets of one benchmark seed; disjoint volume seeds.
inline std::pair<Dataset, Dataset> benchmark_data(const BenchmarkSpec& spec, std::uint64_t seed) {
  Dataset train, test;
  for (std::size_t i = 0; i < spec.n_train + spec.n_test; ++i) {
    SyntheticSpec s = spec.synth;
    s.seed = mix_seed(seed, 1000 + i);
    SyntheticSample g = generate_synthetic(s);
    Sample smp{(i < spec.n_train ? "train_" : "test_") + std::to_string(i), std::move(g.image), std::move(g.labels)};
    (i < spec.n_train ? train : test).push_back(std::move(smp));
  }
  return {std::move(train), std::move(test)};
}

inline ModelScores score_model(Network& net, const Dataset& test, std::size_t cls) {
  ModelScores m;
  std::vector<double> ratios;
  for (const auto& s : test) {
    ForwardOutput fo;
    const LabelVolume p = predict(net, s.image, &fo);
    m.per_volume_dsc.push_back(dsc(p, s.labels, cls));
    m.per_volume_recall.push_back(precision_recall(p, s.labels, cls).recall);
    if (!fo.attention_maps.empty()) {
      // attention_maps are ordered coarse to fine; the last one sits on the finest gated skip
      ratios.push_back(attention_ratio(fo.attention_maps.back(), s.labels, cls));
    }
  }
  m.dsc = mean_std(m.per_volume_dsc).mean;
  m.recall = mean_std(m.per_volume_recall).mean;
  if (!ratios.empty()) m.alpha_ratio = mean_std(ratios).mean;
  return m;
}

/// Train the plain and the gated network from the same seed (identical trunk
/// initialization and data order) and score both on the held-out volumes.
inline SeedOutcome run_benchmark_seed(const BenchmarkSpec& spec, std::uint64_t seed,
                                      const std::function<void(const std::string&)>& progress = {}) {
  auto [train_set, test_set] = benchmark_data(spec, seed);
  SeedOutcome out;
  out.seed = seed;
  for (bool attention : {false, true}) {
    ModelConfig mc = spec.model;
    mc.attention_enabled = attention;
    TrainConfig tc = spec.train;
    tc.seed = seed;
    Network net = Network::build(mc, seed);
    const auto t0 = std::chrono::steady_clock::now();
    TrainHooks hooks;
    if (progress) {
      hooks.on_epoch = [&](const EpochRecord& r) {
        progress((attention ? "attention" : "baseline") + std::string(" seed ") + std::to_string(seed) + " epoch " +
                 std::to_string(r.epoch) + " loss " + std::to_string(r.loss));
      };
    }
    train(net, train_set, tc, nullptr, std::nullopt, 0, hooks);
    ModelScores sc = score_model(net, test_set, spec.target_class);
    sc.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    (attention ? out.attention : out.baseline) = std::move(sc);
  }
  return out;
}

}  // namespace aunet
