#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lowlight/dehaze.hpp"
#include "lowlight/isp.hpp"
#include "lowlight/loss.hpp"
#include "lowlight/net.hpp"
#include "lowlight/raw.hpp"

namespace lowlight {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamMoments moments;
  AdamConfig config;

  static AdamState fresh(const NetParams& params) {
    return AdamState{AdamMoments::zeros_like(params), AdamConfig{}};
  }
};

namespace detail {
inline std::string parameter_name(std::size_t flat_index) {
  return "layer " + std::to_string(flat_index / 2) +
         (flat_index % 2 == 0 ? " kernel" : " bias");
}
}  // namespace detail

/// Standard Adam update with bias correction:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2,
///   theta <- theta - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps).
/// Gradients are read from the parameters' tape buffers (backward must have
/// run); parameters are updated in place.
inline void adam_step(NetParams& params, AdamState& state, double lr) {
  auto tensors = params.parameters();
  check_state(state.moments.m.size() == tensors.size() &&
                  state.moments.v.size() == tensors.size(),
              "Adam state does not mirror the parameter list");
  for (std::size_t i = 0; i < tensors.size(); ++i)
    check_state(tensors[i]->has_grad(),
                "parameter " + detail::parameter_name(i) + " has no gradient");
  state.moments.step += 1;
  const auto& cfg = state.config;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.moments.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.moments.step));
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& g = tensors[i]->grad();
    auto& theta = tensors[i]->mutable_data();
    auto& m = state.moments.m[i];
    auto& v = state.moments.v[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      theta[j] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// ---- geometric augmentation -----------------------------------------------------

/// Spatial crop of a [B,C,H,W] tensor (plain data op).
inline Tensor crop_spatial(const Tensor& t, int y0, int x0, int h, int w) {
  detail::check_4d(t, "crop_spatial");
  check_arg(y0 >= 0 && x0 >= 0 && h > 0 && w > 0 && y0 + h <= t.dim(2) &&
                x0 + w <= t.dim(3),
            "crop window out of bounds");
  const int B = t.dim(0), C = t.dim(1), H = t.dim(2), W = t.dim(3);
  Tensor out({B, C, h, w});
  auto& od = out.mutable_data();
  const auto& id = t.data();
  std::size_t o = 0;
  for (int bc = 0; bc < B * C; ++bc) {
    const double* plane = id.data() + static_cast<std::size_t>(bc) * H * W;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x, ++o)
        od[o] = plane[static_cast<std::size_t>(y0 + y) * W + (x0 + x)];
  }
  return out;
}

/// 90-degree counter-clockwise rotation: out[i][j] = in[j][W-1-i].
inline Tensor rot90_ccw(const Tensor& t) {
  detail::check_4d(t, "rot90_ccw");
  const int B = t.dim(0), C = t.dim(1), H = t.dim(2), W = t.dim(3);
  Tensor out({B, C, W, H});
  auto& od = out.mutable_data();
  const auto& id = t.data();
  for (int bc = 0; bc < B * C; ++bc) {
    const double* src = id.data() + static_cast<std::size_t>(bc) * H * W;
    double* dst = od.data() + static_cast<std::size_t>(bc) * H * W;
    for (int i = 0; i < W; ++i)
      for (int j = 0; j < H; ++j)
        dst[static_cast<std::size_t>(i) * H + j] =
            src[static_cast<std::size_t>(j) * W + (W - 1 - i)];
  }
  return out;
}

inline Tensor hflip(const Tensor& t) {
  detail::check_4d(t, "hflip");
  const int B = t.dim(0), C = t.dim(1), H = t.dim(2), W = t.dim(3);
  Tensor out(t.shape());
  auto& od = out.mutable_data();
  const auto& id = t.data();
  for (int bc = 0; bc < B * C; ++bc) {
    const double* src = id.data() + static_cast<std::size_t>(bc) * H * W;
    double* dst = od.data() + static_cast<std::size_t>(bc) * H * W;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        dst[static_cast<std::size_t>(y) * W + x] =
            src[static_cast<std::size_t>(y) * W + (W - 1 - x)];
  }
  return out;
}

/// Element k of the 8-element dihedral group: (k & 3) quarter-turns CCW, then
/// a horizontal flip when k >= 4.
inline Tensor dihedral(const Tensor& t, int k) {
  check_arg(k >= 0 && k < 8, "dihedral transform index must be in [0,8)");
  Tensor out = t;
  for (int r = 0; r < (k & 3); ++r) out = rot90_ccw(out);
  if (k & 4) out = hflip(out);
  return out;
}

/// The SAME dihedral transform applied to both tensors of a training pair.
inline std::pair<Tensor, Tensor> augment_pair(const Tensor& input, const Tensor& target,
                                              int k) {
  return {dihedral(input, k), dihedral(target, k)};
}

/// Seeded choice among the 8 dihedral transforms, applied consistently.
inline std::pair<Tensor, Tensor> augment(const Tensor& input, const Tensor& target,
                                         std::uint64_t seed) {
  Rng rng(splitmix64(seed));
  return augment_pair(input, target, static_cast<int>(rng.below(8)));
}

// ---- training loop -----------------------------------------------------------------

struct TrainConfig {
  int epochs = 4000;
  double lr_initial = 1e-4;
  double lr_after = 1e-5;
  int lr_switch_epoch = 2000;  // half of epochs when the run is scaled down
  int crop_size = 512;         // square crop at sensor resolution
  int batch_size = 1;          // fixed: larger batches reduce accuracy here
  std::uint64_t seed = 0;
  LossConfig loss;
  int finetune_epochs = 100;
  std::uint64_t feature_seed = 1;
  std::string feature_weights;  // optional LLFX file; empty means seeded weights
  int checkpoint_every = 0;     // epochs between checkpoints; 0 disables

  void validate() const {
    check_arg(epochs >= 0, "epochs must be non-negative");
    check_arg(batch_size == 1, "batch_size is fixed at 1");
    check_arg(lr_initial > 0.0 && lr_after > 0.0, "learning rates must be positive");
    check_arg(lr_switch_epoch >= 0, "lr_switch_epoch must be non-negative");
    check_arg(crop_size > 0, "crop_size must be positive");
    check_arg(finetune_epochs >= 0, "finetune_epochs must be non-negative");
    check_arg(checkpoint_every >= 0, "checkpoint_every must be non-negative");
    loss.validate();
  }
};

/// Step schedule: lr_initial before lr_switch_epoch, lr_after from it onward.
inline double lr_at_epoch(const TrainConfig& cfg, int epoch) {
  return epoch < cfg.lr_switch_epoch ? cfg.lr_initial : cfg.lr_after;
}

/// Per-epoch RNG stream; resuming at an epoch boundary reproduces the exact
/// shuffle/crop/augmentation draws of an uninterrupted run.
inline Rng epoch_rng(std::uint64_t seed, int epoch) {
  return Rng(stream_seed(seed, static_cast<std::uint64_t>(epoch)));
}

struct TrainSample {
  RawFrame raw;
  Tensor target;               // [1,3,H,W] ground truth, sRGB in [0,1]
  double amplification = 1.0;  // exposure ratio applied to the packed input
};

struct LossRow {
  int epoch = 0;
  int iter = 0;
  double l1 = 0.0;
  double msssim = 0.0;
  double feature = 0.0;
  double total = 0.0;
};

struct TrainState {
  NetParams params;
  AdamState adam;
  int epoch = 0;  // first epoch not yet run
};

struct TrainResult {
  NetParams params;
  AdamState adam;
  std::vector<LossRow> history;
  int next_epoch = 0;
};

using CheckpointSink =
    std::function<void(const NetParams&, std::uint32_t /*epochs done*/, const AdamMoments&)>;

namespace detail {

inline void validate_dataset(const std::vector<TrainSample>& dataset, const NetSpec& spec,
                             const TrainConfig& cfg) {
  check_arg(!dataset.empty(), "training dataset is empty");
  const CfaType cfa = dataset.front().raw.cfa.type;
  for (const TrainSample& s : dataset) {
    s.raw.validate();
    check_arg(s.raw.cfa.type == cfa, "dataset mixes CFA types");
    check_shape(s.target.ndim() == 4 && s.target.dim(0) == 1 && s.target.dim(1) == 3,
                "ground truth must be [1,3,H,W]");
    check_shape(s.target.dim(2) == s.raw.height && s.target.dim(3) == s.raw.width,
                "ground truth extents must match the raw frame");
    check_arg(s.amplification > 0.0, "amplification must be positive");
  }
  const bool bayer = cfa == CfaType::Bayer;
  check_arg(spec.in_channels == (bayer ? 4 : 9) && spec.upsample == (bayer ? 2 : 3),
            "net spec does not match the dataset CFA");
  check_arg(cfg.crop_size % spec.upsample == 0,
            "crop_size must be divisible by the upsample factor");
  const int pc = cfg.crop_size / spec.upsample;
  const int div = 1 << (spec.depth - 1);
  check_arg(pc % div == 0, "packed crop size must be divisible by " + std::to_string(div));
  for (const TrainSample& s : dataset) {
    const int p = s.raw.cfa.period() == 2 ? 2 : 3;
    check_arg(s.raw.height / p >= pc && s.raw.width / p >= pc,
              "crop_size exceeds a packed frame");
  }
}

}  // namespace detail

/// Runs epochs [state.epoch, cfg.epochs). Per pair: preprocess, crop at packed
/// resolution, draw one dihedral transform for input and target, forward,
/// training objective, backward, Adam step at the scheduled rate.
inline TrainResult train_from(TrainState state, const std::vector<TrainSample>& dataset,
                              const TrainConfig& cfg, const NetSpec& spec,
                              const CheckpointSink& sink = {}) {
  cfg.validate();
  spec.validate();
  detail::validate_dataset(dataset, spec, cfg);

  const FeatureExtractor fx = cfg.feature_weights.empty()
                                  ? FeatureExtractor::seeded(cfg.feature_seed)
                                  : FeatureExtractor::load(cfg.feature_weights);

  // preprocessing is pure; do it once per sample
  std::vector<Tensor> inputs;
  inputs.reserve(dataset.size());
  for (const TrainSample& s : dataset)
    inputs.push_back(amplify(pack_raw(s.raw), s.amplification));

  const int r = spec.upsample;
  const int pc = cfg.crop_size / r;
  const bool full_frame = [&] {
    for (const Tensor& t : inputs)
      if (t.dim(2) != pc || t.dim(3) != pc) return false;
    return true;
  }();

  // target features are constant per (sample, transform) when crops span the
  // whole frame; reuse them across epochs
  std::unordered_map<std::uint64_t, Tensor> target_feature_cache;

  TrainResult result;
  result.history.reserve(static_cast<std::size_t>(std::max(0, cfg.epochs - state.epoch)) *
                         dataset.size());
  NetParams& params = state.params;
  AdamState& adam = state.adam;

  for (int epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(cfg, epoch);
    Rng rng = epoch_rng(cfg.seed, epoch);

    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i-- > 1;)
      std::swap(order[i], order[rng.below(i + 1)]);

    int iter = 0;
    for (std::size_t idx : order) {
      const Tensor& src = inputs[idx];
      const int cy = static_cast<int>(rng.below(static_cast<std::uint64_t>(src.dim(2) - pc) + 1));
      const int cx = static_cast<int>(rng.below(static_cast<std::uint64_t>(src.dim(3) - pc) + 1));
      const int k = static_cast<int>(rng.below(8));

      Tensor in_crop = crop_spatial(src, cy, cx, pc, pc);
      Tensor tgt_crop = crop_spatial(dataset[idx].target, r * cy, r * cx, r * pc, r * pc);
      auto [in_aug, tgt_aug] = augment_pair(in_crop, tgt_crop, k);

      const Tensor* cached_features = nullptr;
      if (cfg.loss.alpha < 1.0 && full_frame) {
        const std::uint64_t key = (static_cast<std::uint64_t>(idx) << 3) |
                                  static_cast<std::uint64_t>(k);
        auto it = target_feature_cache.find(key);
        if (it == target_feature_cache.end())
          it = target_feature_cache
                   .emplace(key, fx.features(tgt_aug, cfg.loss.feature_stage))
                   .first;
        cached_features = &it->second;
      }

      Tape tape;
      for (Tensor* p : params.parameters()) tape.watch(*p);
      const Tensor pred = net_forward(params, in_aug);
      const LossTerms terms =
          total_loss_terms(pred, tgt_aug, cfg.loss, fx, cached_features);
      backward(terms.total);
      adam_step(params, adam, lr);

      LossRow row;
      row.epoch = epoch;
      row.iter = iter++;
      row.l1 = terms.l1;
      row.msssim = terms.msssim;
      row.feature = terms.feature;
      row.total = terms.total.value();
      result.history.push_back(row);
    }

    if (sink && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 &&
        epoch + 1 < cfg.epochs)
      sink(params, static_cast<std::uint32_t>(epoch + 1), adam.moments);
  }

  if (sink) sink(params, static_cast<std::uint32_t>(cfg.epochs), adam.moments);

  result.params = std::move(state.params);
  result.adam = std::move(state.adam);
  result.next_epoch = cfg.epochs;
  return result;
}

/// Fresh training run: He-initialized parameters from cfg.seed, zero Adam state.
inline TrainResult train(const std::vector<TrainSample>& dataset, const TrainConfig& cfg,
                         const NetSpec& spec, const CheckpointSink& sink = {}) {
  TrainState state;
  state.params = build_net(spec, cfg.seed);
  state.adam = AdamState::fresh(state.params);
  state.epoch = 0;
  return train_from(std::move(state), dataset, cfg, spec, sink);
}

/// Contrast fine-tuning: replaces every ground truth with its
/// contrast-enhanced version and continues training for cfg.finetune_epochs
/// more epochs at lr_after, keeping the Adam state.
inline TrainResult finetune_contrast(TrainResult trained,
                                     const std::vector<TrainSample>& dataset,
                                     const TrainConfig& cfg, const NetSpec& spec,
                                     const DehazeParams& dehaze_params = {},
                                     const CheckpointSink& sink = {}) {
  cfg.validate();
  if (cfg.finetune_epochs == 0) return trained;

  std::vector<TrainSample> enhanced = dataset;
  for (TrainSample& s : enhanced)
    s.target = enhance_contrast(make_rgb(detached(s.target)), dehaze_params).tensor;

  TrainConfig ft = cfg;
  ft.epochs = trained.next_epoch + cfg.finetune_epochs;
  ft.lr_switch_epoch = 0;  // fine-tuning runs entirely at lr_after

  TrainState state;
  state.params = std::move(trained.params);
  state.adam = std::move(trained.adam);
  state.epoch = trained.next_epoch;
  TrainResult result = train_from(std::move(state), enhanced, ft, spec, sink);
  result.history.insert(result.history.begin(), trained.history.begin(),
                        trained.history.end());
  return result;
}

// ---- loss history CSV ---------------------------------------------------------------

inline void write_loss_history(std::ostream& os, const std::vector<LossRow>& rows) {
  os << "epoch,iter,l1,msssim_loss,feature_loss,total\n";
  os.precision(17);
  for (const LossRow& r : rows)
    os << r.epoch << ',' << r.iter << ',' << r.l1 << ',' << r.msssim << ',' << r.feature
       << ',' << r.total << '\n';
}

inline void write_loss_history(const std::filesystem::path& path,
                               const std::vector<LossRow>& rows) {
  std::ofstream os(path);
  check_arg(os.good(), "cannot open " + path.string() + " for writing");
  write_loss_history(os, rows);
  check_arg(os.good(), "failed writing " + path.string());
}

}  // namespace lowlight
