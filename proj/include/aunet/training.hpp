#pragma once

// Dice loss, Adam and the supervised training loop.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "aunet/metrics.hpp"
#include "aunet/preprocess.hpp"
#include "aunet/unet.hpp"
#include "aunet/volume.hpp"

namespace aunet {

inline constexpr double kDiceSmoothing = 1e-5;

/// 1 - mean over (sample, class) of (2 sum p*g + eps) / (sum p + sum g + eps).
///
/// `pred` and `target` are (N, C, D, H, W); target is one-hot.
inline Tensor dice_loss(const Tensor& pred, const Tensor& target) {
  detail::require_5d(pred, "dice_loss");
  if (pred.shape() != target.shape()) {
    throw DimensionError("dice_loss: prediction " + detail::shape_str(pred.shape()) + " vs target " +
                         detail::shape_str(target.shape()));
  }
  const std::size_t n = pred.dim(0), c = pred.dim(1), sp = pred.dim(2) * pred.dim(3) * pred.dim(4);
  const std::size_t groups = n * c;
  std::vector<double> inter(groups, 0.0), denom(groups, 0.0);
  auto p = pred.data(), g = target.data();
  for (std::size_t k = 0; k < groups; ++k) {
    double i = 0.0, s = 0.0;
    for (std::size_t v = 0; v < sp; ++v) {
      i += p[k * sp + v] * g[k * sp + v];
      s += p[k * sp + v] + g[k * sp + v];
    }
    inter[k] = i;
    denom[k] = s + kDiceSmoothing;
  }
  double mean_dice = 0.0;
  for (std::size_t k = 0; k < groups; ++k) mean_dice += (2.0 * inter[k] + kDiceSmoothing) / denom[k];
  mean_dice /= static_cast<double>(groups);
  return Tensor::from_op(Shape{1}, {1.0 - mean_dice}, OpKind::DiceLoss, {pred, target},
                         [inter, denom, groups, sp](Node& self) {
                           Node& np = *self.inputs[0];
                           const Node& nt = *self.inputs[1];
                           if (!np.requires_grad) return;
                           auto& gp = np.grad_buffer();
                           const double up = -self.grad[0] / static_cast<double>(groups);
                           for (std::size_t k = 0; k < groups; ++k) {
                             const double num = 2.0 * inter[k] + kDiceSmoothing;
                             const double d2 = denom[k] * denom[k];
                             for (std::size_t v = 0; v < sp; ++v) {
                               const double gt = nt.data[k * sp + v];
                               gp[k * sp + v] += up * (2.0 * gt * denom[k] - num) / d2;
                             }
                           }
                         });
}

/// Equal-weight mean of the Dice loss over the main and auxiliary heads.
inline Tensor combined_loss(const Tensor& main, const std::vector<Tensor>& aux, const Tensor& target) {
  Tensor total = dice_loss(main, target);
  if (aux.empty()) return total;
  for (const auto& a : aux) total = add(total, dice_loss(a, target));
  return scale(total, 1.0 / static_cast<double>(1 + aux.size()));
}

struct AdamState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;  // zero-initialized lazily, aligned with the parameter list
  std::vector<std::vector<double>> v;
};

/// One bias-corrected Adam update. Throws NumericalError (parameters left
/// untouched) if any gradient is NaN or infinite.
inline void adam_step(AdamState& st, const std::vector<Tensor>& params,
                      const std::vector<std::span<const double>>& grads) {
  if (params.size() != grads.size()) throw ContractError("adam_step: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i].empty() && grads[i].size() != params[i].numel()) {
      throw ContractError("adam_step: gradient " + std::to_string(i) + " has wrong length");
    }
    for (std::size_t j = 0; j < grads[i].size(); ++j) {
      if (!std::isfinite(grads[i][j])) {
        throw NumericalError("adam_step: non-finite gradient " + std::to_string(grads[i][j]) + " in parameter " +
                             std::to_string(i) + " element " + std::to_string(j) + " at step " +
                             std::to_string(st.step + 1));
      }
    }
  }
  if (st.m.empty()) {
    for (const auto& p : params) {
      st.m.emplace_back(p.numel(), 0.0);
      st.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (st.m.size() != params.size()) throw ContractError("adam_step: optimizer state does not match parameters");
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    auto w = p.mutable_data();
    auto& m = st.m[i];
    auto& v = st.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double g = grads[i].empty() ? 0.0 : grads[i][j];
      m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * g;
      v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * g * g;
      const double mh = m[j] / c1, vh = v[j] / c2;
      w[j] -= st.learning_rate * mh / (std::sqrt(vh) + st.epsilon);
    }
  }
}

/// Adam update from the gradients accumulated on the parameters themselves.
inline void adam_step(AdamState& st, const std::vector<Tensor>& params) {
  std::vector<std::span<const double>> grads;
  for (const auto& p : params) grads.push_back(p.grad());
  adam_step(st, params, grads);
}

struct Sample {
  std::string name;
  Volume image;
  LabelVolume labels;
};
using Dataset = std::vector<Sample>;

struct TrainConfig {
  std::size_t batch_size = 2;
  std::size_t accumulation_steps = 1;
  std::size_t epochs = 10;
  std::uint64_t seed = 1;
  double learning_rate = 1e-3;
  Dims3 crop{0, 0, 0};  // training extents; 0 keeps the full extent
  bool augment = true;
  AugmentRanges ranges;
  std::size_t val_every = 1;

  void validate() const {
    if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
    if (accumulation_steps == 0) throw ConfigError("train.accumulation_steps must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be positive");
    if (val_every == 0) throw ConfigError("train.val_every must be positive");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // mean training loss over mini-batches
  std::uint64_t step = 0; // optimizer steps taken so far
  std::vector<double> val_dsc;  // per class, empty when not validated this epoch
};

struct TrainingLog {
  std::vector<EpochRecord> epochs;

  static std::string to_line(const EpochRecord& r) {
    nlohmann::json j;
    j["epoch"] = r.epoch;
    j["loss"] = r.loss;
    j["step"] = r.step;
    j["val_dsc"] = r.val_dsc;
    return j.dump();
  }
  /// One JSON object per line.
  std::string to_jsonl() const {
    std::string s;
    for (const auto& r : epochs) s += to_line(r) + "\n";
    return s;
  }
  bool operator==(const TrainingLog& o) const { return to_jsonl() == o.to_jsonl(); }
};

/// Training stopped on a non-finite loss; the network holds the last good weights.
class TrainingDiverged : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Argmax labels of the main head in inference mode (input is normalized here).
inline LabelVolume predict(Network& net, const Volume& image, ForwardOutput* out = nullptr) {
  NoGradGuard guard;
  const Volume norm = normalize_intensity(image);
  ForwardOutput fo = net.forward(to_tensor({&norm}), {.training = false});
  const std::size_t c = fo.main.dim(1), sp = voxel_count(image.dims);
  LabelVolume l(image.dims, image.spacing);
  auto p = fo.main.data();
  for (std::size_t i = 0; i < sp; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k) {
      if (p[k * sp + i] > p[best * sp + i]) best = k;
    }
    l.labels[i] = static_cast<std::uint8_t>(best);
  }
  if (out) *out = std::move(fo);
  return l;
}

/// Mean per-class DSC over a dataset.
inline std::vector<double> mean_dsc(Network& net, const Dataset& data) {
  const std::size_t c = net.config().n_classes;
  std::vector<double> acc(c, 0.0);
  for (const auto& s : data) {
    const LabelVolume p = predict(net, s.image);
    for (std::size_t k = 0; k < c; ++k) acc[k] += dsc(p, s.labels, k);
  }
  for (auto& v : acc) v /= static_cast<double>(std::max<std::size_t>(1, data.size()));
  return acc;
}

struct TrainResult {
  TrainingLog log;
  AdamState optimizer;
  std::optional<NetworkState> best;  // best validation state, when validation ran
  std::size_t best_epoch = 0;
  double best_score = -1.0;
};

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Prepare one training example: augmentation (or a centred crop) followed by
/// intensity normalization.
inline AugmentedPair prepare_sample(const Sample& s, const TrainConfig& cfg, std::uint64_t sample_seed) {
  if (cfg.augment) return augment(s.image, s.labels, sample_seed, cfg.crop, cfg.ranges);
  AugmentParams id;
  for (std::size_t a = 0; a < 3; ++a) {
    id.crop[a] = cfg.crop[a] == 0 ? s.image.dims[a] : cfg.crop[a];
    if (id.crop[a] > s.image.dims[a]) throw ConfigError("train.crop exceeds volume extent");
    id.offset[a] = (s.image.dims[a] - id.crop[a]) / 2;
  }
  return apply_augment(s.image, s.labels, id);
}

/// Shuffled mini-batches, gradient averaging over `accumulation_steps`
/// mini-batches per Adam update. Deterministic for a fixed config.
///
/// `optimizer` and `start_epoch` allow resuming; epochs are numbered from
/// start_epoch + 1.
inline TrainResult train(Network& net, const Dataset& data, const TrainConfig& cfg, const Dataset* validation = nullptr,
                         std::optional<AdamState> optimizer = std::nullopt, std::size_t start_epoch = 0,
                         const TrainHooks& hooks = {}) {
  cfg.validate();
  if (data.empty()) throw ConfigError("train: dataset is empty");
  TrainResult res;
  res.optimizer = optimizer.value_or(AdamState{});
  if (!optimizer) res.optimizer.learning_rate = cfg.learning_rate;
  const std::vector<Tensor> params = net.parameters();
  NetworkState last_good = snapshot(net);
  const std::size_t n_classes = net.config().n_classes;

  for (std::size_t e = start_epoch; e < start_epoch + cfg.epochs; ++e) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix_seed(cfg.seed, e));
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < order.size(); i += cfg.batch_size) {
      batches.emplace_back(order.begin() + i, order.begin() + std::min(order.size(), i + cfg.batch_size));
    }
    double loss_sum = 0.0;
    net.zero_grad();
    for (std::size_t b0 = 0; b0 < batches.size(); b0 += cfg.accumulation_steps) {
      const std::size_t group = std::min(cfg.accumulation_steps, batches.size() - b0);
      for (std::size_t bi = b0; bi < b0 + group; ++bi) {
        std::vector<AugmentedPair> prepared;
        for (std::size_t idx : batches[bi]) {
          AugmentedPair ap = prepare_sample(data[idx], cfg, mix_seed(mix_seed(cfg.seed, e), idx));
          ap.image = normalize_intensity(ap.image);
          prepared.push_back(std::move(ap));
        }
        std::vector<const Volume*> imgs;
        std::vector<const LabelVolume*> labs;
        for (const auto& ap : prepared) {
          imgs.push_back(&ap.image);
          labs.push_back(&ap.labels);
        }
        ForwardOutput out = net.forward(to_tensor(imgs), {.training = true});
        Tensor loss = combined_loss(out.main, out.aux, one_hot(labs, n_classes));
        const double lv = loss.item();
        if (!std::isfinite(lv)) {
          restore(net, last_good);
          throw TrainingDiverged("train: non-finite loss at epoch " + std::to_string(e + 1) +
                                 "; weights restored to the end of epoch " + std::to_string(e));
        }
        loss_sum += lv;
        backward(scale(loss, 1.0 / static_cast<double>(group)));
      }
      try {
        adam_step(res.optimizer, params);
      } catch (const NumericalError& err) {
        restore(net, last_good);
        throw TrainingDiverged(std::string(err.what()) + "; weights restored to the end of epoch " +
                               std::to_string(e));
      }
      net.zero_grad();
    }
    EpochRecord rec;
    rec.epoch = e + 1;
    rec.loss = loss_sum / static_cast<double>(batches.size());
    rec.step = res.optimizer.step;
    if (validation && !validation->empty() && (e + 1 - start_epoch) % cfg.val_every == 0) {
      rec.val_dsc = mean_dsc(net, *validation);
      double score = 0.0;
      for (std::size_t k = 1; k < rec.val_dsc.size(); ++k) score += rec.val_dsc[k];
      score /= static_cast<double>(std::max<std::size_t>(1, rec.val_dsc.size() - 1));
      if (score > res.best_score) {
        res.best_score = score;
        res.best_epoch = rec.epoch;
        res.best = snapshot(net);
      }
    }
    last_good = snapshot(net);
    res.log.epochs.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
  }
  return res;
}

}  // namespace aunet
