#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "lowlight/tensor.hpp"

namespace lowlight {

// Hyperparameters of the training objective
//   total = alpha * (beta * l1 + (1-beta) * msssim_loss) + (1-alpha) * feature_loss
// with SSIM stability constants c1 = (0.01 L)^2, c2 = (0.03 L)^2 at dynamic
// range L = 1, and an 11x11 sigma-1.5 Gaussian window.
struct LossConfig {
  double alpha = 0.9;
  double beta = 0.99;
  int msssim_scales = 3;
  int window = 11;
  double window_sigma = 1.5;
  double c1 = 0.0001;
  double c2 = 0.0009;
  int feature_stage = 2;  // extractor stage feeding the feature loss (1 or 2)

  void validate() const {
    check_arg(alpha >= 0.0 && alpha <= 1.0, "loss alpha must be in [0,1]");
    check_arg(beta >= 0.0 && beta <= 1.0, "loss beta must be in [0,1]");
    check_arg(msssim_scales >= 1, "msssim_scales must be >= 1");
    check_arg(window >= 3 && window % 2 == 1, "SSIM window must be odd and >= 3");
    check_arg(window_sigma > 0.0, "window sigma must be positive");
    check_arg(c1 > 0.0 && c2 > 0.0, "SSIM stability constants must be positive");
    check_arg(feature_stage == 1 || feature_stage == 2, "feature_stage must be 1 or 2");
  }
};

/// Normalized 2-d Gaussian as a [1,1,size,size] kernel.
inline Tensor gaussian_window(int size, double sigma) {
  check_arg(size >= 1 && size % 2 == 1, "gaussian window size must be odd");
  check_arg(sigma > 0.0, "gaussian window sigma must be positive");
  Tensor k({1, 1, size, size});
  auto& d = k.mutable_data();
  const int c = size / 2;
  double total = 0.0;
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) {
      const double dy = i - c, dx = j - c;
      const double v = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
      d[static_cast<std::size_t>(i) * size + j] = v;
      total += v;
    }
  for (auto& v : d) v /= total;
  return k;
}

namespace detail {

// Per-channel valid convolution with a [1,1,k,k] window.
inline Tensor filter_per_channel(const Tensor& x, const Tensor& window) {
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  static const Tensor zero_bias({1}, {0.0});
  Tensor flat = reshape(x, {B * C, 1, H, W});
  Tensor blurred = conv2d(flat, window, zero_bias, 1, 0);
  return reshape(blurred, {B, C, blurred.dim(2), blurred.dim(3)});
}

}  // namespace detail

// Per-pixel SSIM maps over the valid window region, one map entry per channel
// and position. `map` is luminance * contrast_structure.
struct SsimTerms {
  Tensor luminance;
  Tensor contrast_structure;
  Tensor map;
};

inline SsimTerms ssim_terms(const Tensor& pred, const Tensor& target,
                            const LossConfig& cfg = {}) {
  cfg.validate();
  detail::check_4d(pred, "ssim");
  detail::check_same_shape(pred, target, "ssim");
  check_shape(pred.dim(2) >= cfg.window && pred.dim(3) >= cfg.window,
              "ssim: image is smaller than the " + std::to_string(cfg.window) +
                  "-pixel window");
  const Tensor win = gaussian_window(cfg.window, cfg.window_sigma);

  const Tensor mu_x = detail::filter_per_channel(pred, win);
  const Tensor mu_y = detail::filter_per_channel(target, win);
  const Tensor mu_xx = detail::filter_per_channel(mul(pred, pred), win);
  const Tensor mu_yy = detail::filter_per_channel(mul(target, target), win);
  const Tensor mu_xy = detail::filter_per_channel(mul(pred, target), win);

  const Tensor var_x = sub(mu_xx, mul(mu_x, mu_x));
  const Tensor var_y = sub(mu_yy, mul(mu_y, mu_y));
  const Tensor cov = sub(mu_xy, mul(mu_x, mu_y));

  SsimTerms t;
  t.luminance = divide(add_scalar(mul_scalar(mul(mu_x, mu_y), 2.0), cfg.c1),
                       add_scalar(add(mul(mu_x, mu_x), mul(mu_y, mu_y)), cfg.c1));
  t.contrast_structure = divide(add_scalar(mul_scalar(cov, 2.0), cfg.c2),
                                add_scalar(add(var_x, var_y), cfg.c2));
  t.map = mul(t.luminance, t.contrast_structure);
  return t;
}

/// Mean SSIM over channels and valid positions.
inline Tensor ssim(const Tensor& pred, const Tensor& target, const LossConfig& cfg = {}) {
  return mean(ssim_terms(pred, target, cfg).map);
}

/// Multi-scale SSIM: mean contrast-structure at scales 1..M-1 (each scale a
/// 2x2 mean-pooled version of the previous), times the mean full SSIM map at
/// the coarsest scale. M = 1 reduces exactly to mean SSIM.
inline Tensor ms_ssim(const Tensor& pred, const Tensor& target,
                      const LossConfig& cfg = {}) {
  cfg.validate();
  detail::check_4d(pred, "ms_ssim");
  detail::check_same_shape(pred, target, "ms_ssim");
  const int min_ext = std::min(pred.dim(2), pred.dim(3));
  const int M = cfg.msssim_scales;
  const long long needed = static_cast<long long>(cfg.window) << (M - 1);
  if (min_ext < needed) {
    int feasible = 0;
    while (min_ext >= (cfg.window << feasible)) ++feasible;
    throw std::invalid_argument(
        "ms_ssim: image supports at most M = " + std::to_string(feasible) +
        " scales for a " + std::to_string(cfg.window) + "-pixel window; requested M = " +
        std::to_string(M));
  }

  Tensor result = Tensor::scalar(1.0);
  Tensor x = pred, y = target;
  for (int i = 1; i <= M; ++i) {
    const SsimTerms t = ssim_terms(x, y, cfg);
    if (i < M) {
      result = mul(result, mean(t.contrast_structure));
      x = avgpool2(x);
      y = avgpool2(y);
    } else {
      result = mul(result, mean(t.map));
    }
  }
  return result;
}

/// 1 - ms_ssim, in [0, 2].
inline Tensor msssim_loss(const Tensor& pred, const Tensor& target,
                          const LossConfig& cfg = {}) {
  return sub(Tensor::scalar(1.0), ms_ssim(pred, target, cfg));
}

/// Mean absolute deviation over all elements.
inline Tensor l1_loss(const Tensor& pred, const Tensor& target) {
  detail::check_same_shape(pred, target, "l1_loss");
  return mean(abs(sub(pred, target)));
}

/// beta * l1 + (1-beta) * msssim_loss. Terms with zero weight are not
/// evaluated, so degenerate configurations follow the exact bit pattern of the
/// single remaining term.
inline Tensor pixel_loss(const Tensor& pred, const Tensor& target,
                         const LossConfig& cfg = {}) {
  cfg.validate();
  if (cfg.beta >= 1.0) return l1_loss(pred, target);
  if (cfg.beta <= 0.0) return msssim_loss(pred, target, cfg);
  return add(mul_scalar(l1_loss(pred, target), cfg.beta),
             mul_scalar(msssim_loss(pred, target, cfg), 1.0 - cfg.beta));
}

// ---- frozen feature extractor -------------------------------------------------

// Fixed two-block convolutional feature network: 3x3 convs at 64, 64, 128, 128
// channels, ReLU after each, 2x2 max-pool after each block. Maps [B,3,H,W] to
// [B,128,H/4,W/4] (stage 2) or [B,64,H/2,W/2] (stage 1). Parameters are
// constants: they are never placed on a tape, so no gradient ever reaches them.
class FeatureExtractor {
 public:
  static constexpr int kLayers = 4;

  static FeatureExtractor seeded(std::uint64_t seed) {
    FeatureExtractor fx;
    Rng rng(splitmix64(seed ^ 0xFEEDFACEULL));
    for (int l = 0; l < kLayers; ++l) {
      const int cin = channels_in(l), cout = channels_out(l);
      Tensor k({cout, cin, 3, 3});
      const double sigma = std::sqrt(2.0 / (9.0 * cin));
      // weights pass through f32 so that save/load is an exact identity
      for (auto& v : k.mutable_data())
        v = static_cast<double>(static_cast<float>(rng.normal(0.0, sigma)));
      fx.kernels_.push_back(std::move(k));
      fx.biases_.push_back(Tensor({cout}));
    }
    return fx;
  }

  Tensor features(const Tensor& rgb, int stage = 2) const {
    detail::check_4d(rgb, "feature extractor");
    check_shape(rgb.dim(1) == 3, "feature extractor expects 3 input channels");
    check_shape(rgb.dim(2) % 4 == 0 && rgb.dim(3) % 4 == 0,
                "feature extractor input extents must be divisible by 4");
    check_arg(stage == 1 || stage == 2, "feature stage must be 1 or 2");
    Tensor x = relu(conv2d(rgb, kernels_[0], biases_[0], 1, 1));
    x = relu(conv2d(x, kernels_[1], biases_[1], 1, 1));
    x = maxpool2(x);
    if (stage == 1) return x;
    x = relu(conv2d(x, kernels_[2], biases_[2], 1, 1));
    x = relu(conv2d(x, kernels_[3], biases_[3], 1, 1));
    return maxpool2(x);
  }

  const std::vector<Tensor>& kernels() const { return kernels_; }
  const std::vector<Tensor>& biases() const { return biases_; }

  // LLFX: magic "LLFX", version u16, then per layer out_ch u32, in_ch u32,
  // kh u32, kw u32, f32 weights row-major, f32 biases.
  void save(std::ostream& os) const {
    os.write("LLFX", 4);
    write_u16(os, 1);
    for (int l = 0; l < kLayers; ++l) {
      const Tensor& k = kernels_[static_cast<std::size_t>(l)];
      write_u32(os, static_cast<std::uint32_t>(k.dim(0)));
      write_u32(os, static_cast<std::uint32_t>(k.dim(1)));
      write_u32(os, static_cast<std::uint32_t>(k.dim(2)));
      write_u32(os, static_cast<std::uint32_t>(k.dim(3)));
      for (double v : k.data()) write_f32(os, static_cast<float>(v));
      for (double v : biases_[static_cast<std::size_t>(l)].data())
        write_f32(os, static_cast<float>(v));
    }
  }
  void save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    check_arg(os.good(), "cannot open " + path.string() + " for writing");
    save(os);
    check_arg(os.good(), "failed writing " + path.string());
  }

  static FeatureExtractor load(std::istream& is) {
    char magic[4];
    read_exact(is, magic, 4, "LLFX magic");
    if (std::string(magic, 4) != "LLFX")
      throw std::runtime_error("not an LLFX weight file");
    const std::uint16_t version = read_u16(is, "LLFX version");
    if (version != 1)
      throw std::runtime_error("unsupported LLFX version " + std::to_string(version));
    FeatureExtractor fx;
    for (int l = 0; l < kLayers; ++l) {
      const int cout = static_cast<int>(read_u32(is, "out_ch"));
      const int cin = static_cast<int>(read_u32(is, "in_ch"));
      const int kh = static_cast<int>(read_u32(is, "kh"));
      const int kw = static_cast<int>(read_u32(is, "kw"));
      if (cout != channels_out(l) || cin != channels_in(l) || kh != 3 || kw != 3)
        throw std::runtime_error("LLFX layer " + std::to_string(l) +
                                 " does not match the extractor architecture");
      Tensor k({cout, cin, 3, 3});
      for (auto& v : k.mutable_data()) v = static_cast<double>(read_f32(is, "weight"));
      Tensor b({cout});
      for (auto& v : b.mutable_data()) v = static_cast<double>(read_f32(is, "bias"));
      fx.kernels_.push_back(std::move(k));
      fx.biases_.push_back(std::move(b));
    }
    if (is.peek() != std::char_traits<char>::eof())
      throw std::runtime_error("trailing bytes after LLFX layers");
    return fx;
  }
  static FeatureExtractor load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    check_arg(is.good(), "cannot open " + path.string());
    return load(is);
  }

 private:
  static int channels_in(int layer) {
    constexpr int in[kLayers] = {3, 64, 64, 128};
    return in[layer];
  }
  static int channels_out(int layer) {
    constexpr int out[kLayers] = {64, 64, 128, 128};
    return out[layer];
  }

  std::vector<Tensor> kernels_;
  std::vector<Tensor> biases_;
};

/// Mean squared distance between frozen feature maps of the two images.
/// Gradients reach `pred` only; the extractor parameters and the target branch
/// stay off the tape.
inline Tensor feature_loss(const Tensor& pred, const Tensor& target,
                           const FeatureExtractor& fx, const LossConfig& cfg = {}) {
  detail::check_same_shape(pred, target, "feature_loss");
  const Tensor fp = fx.features(pred, cfg.feature_stage);
  const Tensor ft = fx.features(target, cfg.feature_stage);
  const Tensor d = sub(fp, ft);
  return mean(mul(d, d));
}

// One training objective evaluation. Component values are recorded only for
// the terms that were actually evaluated (nonzero weight).
struct LossTerms {
  Tensor total;
  double l1 = 0.0;
  double msssim = 0.0;
  double feature = 0.0;
  bool has_l1 = false;
  bool has_msssim = false;
  bool has_feature = false;
};

/// alpha * pixel_loss + (1-alpha) * feature_loss with zero-weight terms
/// short-circuited away (neither evaluated nor recorded on the tape).
/// `cached_target_features` optionally reuses a precomputed feature map of the
/// target at cfg.feature_stage.
inline LossTerms total_loss_terms(const Tensor& pred, const Tensor& target,
                                  const LossConfig& cfg, const FeatureExtractor& fx,
                                  const Tensor* cached_target_features = nullptr) {
  cfg.validate();
  LossTerms out;
  Tensor pixel;
  if (cfg.alpha > 0.0) {
    Tensor l1;
    Tensor msl;
    if (cfg.beta > 0.0) {
      l1 = l1_loss(pred, target);
      out.l1 = l1.value();
      out.has_l1 = true;
    }
    if (cfg.beta < 1.0) {
      msl = msssim_loss(pred, target, cfg);
      out.msssim = msl.value();
      out.has_msssim = true;
    }
    if (cfg.beta >= 1.0)
      pixel = l1;
    else if (cfg.beta <= 0.0)
      pixel = msl;
    else
      pixel = add(mul_scalar(l1, cfg.beta), mul_scalar(msl, 1.0 - cfg.beta));
  }
  Tensor feat;
  if (cfg.alpha < 1.0) {
    if (cached_target_features) {
      const Tensor fp = fx.features(pred, cfg.feature_stage);
      detail::check_same_shape(fp, *cached_target_features, "cached feature loss");
      const Tensor d = sub(fp, *cached_target_features);
      feat = mean(mul(d, d));
    } else {
      feat = feature_loss(pred, target, fx, cfg);
    }
    out.feature = feat.value();
    out.has_feature = true;
  }
  if (cfg.alpha >= 1.0)
    out.total = pixel;
  else if (cfg.alpha <= 0.0)
    out.total = feat;
  else
    out.total = add(mul_scalar(pixel, cfg.alpha), mul_scalar(feat, 1.0 - cfg.alpha));
  return out;
}

/// The training objective (Eq. above) as a single differentiable scalar.
inline Tensor total_loss(const Tensor& pred, const Tensor& target, const LossConfig& cfg,
                         const FeatureExtractor& fx) {
  return total_loss_terms(pred, target, cfg, fx).total;
}

/// 10*log10(1/MSE) in dB, capped at 99 (the sentinel for identical images).
inline double psnr_db(const Tensor& pred, const Tensor& target) {
  detail::check_same_shape(pred, target, "psnr");
  check_arg(pred.numel() > 0, "psnr of empty tensors");
  double mse = 0.0;
  const auto& pd = pred.data();
  const auto& td = target.data();
  for (std::size_t i = 0; i < pd.size(); ++i) {
    const double d = pd[i] - td[i];
    mse += d * d;
  }
  mse /= static_cast<double>(pd.size());
  if (mse == 0.0) return 99.0;
  return std::min(99.0, -10.0 * std::log10(mse));
}

}  // namespace lowlight
