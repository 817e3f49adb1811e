#pragma once

#include <array>
#include <utility>

#include "lowlight/image.hpp"
#include "lowlight/raw.hpp"

namespace lowlight {

inline constexpr double kGamma = 2.2;

/// sRGB-style encode, out = clamp(in)^(1/2.2). Plain data op, not differentiable.
inline Tensor gamma_encode(const Tensor& linear) {
  Tensor out(linear.shape());
  auto& od = out.mutable_data();
  const auto& id = linear.data();
  for (std::size_t i = 0; i < id.size(); ++i) od[i] = std::pow(clamp01(id[i]), 1.0 / kGamma);
  return out;
}

inline Tensor gamma_decode(const Tensor& encoded) {
  Tensor out(encoded.shape());
  auto& od = out.mutable_data();
  const auto& id = encoded.data();
  for (std::size_t i = 0; i < id.size(); ++i) od[i] = std::pow(clamp01(id[i]), kGamma);
  return out;
}

/// Gray-world white-balance gains for a normalized mosaic, anchored on green:
/// gain_c = mean_G / mean_c, gain_G = 1.
inline std::array<double, 3> gray_world_gains(const Tensor& mosaic, const CfaPattern& cfa) {
  check_shape(mosaic.ndim() == 4 && mosaic.dim(0) == 1 && mosaic.dim(1) == 1,
              "gray_world_gains expects a [1,1,H,W] mosaic");
  const int H = mosaic.dim(2), W = mosaic.dim(3);
  double sums[3] = {0, 0, 0};
  std::size_t counts[3] = {0, 0, 0};
  const auto& d = mosaic.data();
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const int c = cfa.color_at(y, x);
      sums[c] += d[static_cast<std::size_t>(y) * W + x];
      ++counts[c];
    }
  std::array<double, 3> means{};
  for (int c = 0; c < 3; ++c) means[static_cast<std::size_t>(c)] = counts[c] ? sums[c] / static_cast<double>(counts[c]) : 0.0;
  std::array<double, 3> gains{1.0, 1.0, 1.0};
  for (int c = 0; c < 3; ++c)
    gains[static_cast<std::size_t>(c)] =
        means[static_cast<std::size_t>(c)] > 0.0 ? means[1] / means[static_cast<std::size_t>(c)] : 1.0;
  return gains;
}

/// Bilinear demosaicking via mask-normalized interpolation: each missing color
/// is the kernel-weighted mean of its same-color neighbours; edge windows
/// renormalize automatically.
inline Tensor demosaic_bilinear(const Tensor& mosaic, const CfaPattern& cfa) {
  check_shape(mosaic.ndim() == 4 && mosaic.dim(0) == 1 && mosaic.dim(1) == 1,
              "demosaic_bilinear expects a [1,1,H,W] mosaic");
  const int H = mosaic.dim(2), W = mosaic.dim(3);
  static constexpr double kKernel[3][3] = {{1, 2, 1}, {2, 4, 2}, {1, 2, 1}};
  Tensor out({1, 3, H, W});
  auto& od = out.mutable_data();
  const auto& d = mosaic.data();
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) {
        double num = 0.0, den = 0.0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
            if (cfa.color_at(yy, xx) != c) continue;
            const double w = kKernel[dy + 1][dx + 1];
            num += w * d[static_cast<std::size_t>(yy) * W + xx];
            den += w;
          }
        od[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * W + x] =
            den > 0.0 ? num / den : 0.0;
      }
  return out;
}

/// Simplified traditional pipeline for Bayer frames: black-level subtraction,
/// gray-world white balance, bilinear demosaicking, 3x3 color correction
/// (identity by default), gamma encoding.
inline RgbImage reference_pipeline(const RawFrame& raw,
                                   const std::array<double, 9>* ccm = nullptr) {
  check_arg(raw.cfa.type == CfaType::Bayer,
            "reference_pipeline supports the Bayer CFA only");
  Tensor mosaic = subtract_black_level(raw);
  const auto gains = gray_world_gains(mosaic, raw.cfa);
  {
    auto& d = mosaic.mutable_data();
    const int W = raw.width;
    for (int y = 0; y < raw.height; ++y)
      for (int x = 0; x < W; ++x)
        d[static_cast<std::size_t>(y) * W + x] *=
            gains[raw.cfa.color_at(y, x)];
  }
  Tensor rgb = demosaic_bilinear(mosaic, raw.cfa);
  if (ccm) {
    auto& d = rgb.mutable_data();
    const std::size_t plane = static_cast<std::size_t>(raw.height) * raw.width;
    for (std::size_t p = 0; p < plane; ++p) {
      const double r = d[p], g = d[plane + p], b = d[2 * plane + p];
      d[p] = (*ccm)[0] * r + (*ccm)[1] * g + (*ccm)[2] * b;
      d[plane + p] = (*ccm)[3] * r + (*ccm)[4] * g + (*ccm)[5] * b;
      d[2 * plane + p] = (*ccm)[6] * r + (*ccm)[7] * g + (*ccm)[8] * b;
    }
  }
  return make_rgb(gamma_encode(rgb));
}

// Poisson-Gaussian sensor noise. photon_scale is the full-scale electron
// count (0 disables shot noise); read_sigma is in normalized units.
struct NoiseParams {
  double photon_scale = 1000.0;
  double read_sigma = 0.001;
};

/// Builds a paired (short-exposure RawFrame, ground truth) sample from a clean
/// sRGB image: linearize, mosaic through the CFA, divide radiance by
/// exposure_ratio, apply shot and read noise, quantize to the sensor's ADU
/// range. Deterministic for a given seed.
inline std::pair<RawFrame, RgbImage> synthesize_pair(const RgbImage& clean,
                                                     const CfaPattern& cfa,
                                                     double exposure_ratio,
                                                     const NoiseParams& noise,
                                                     std::uint64_t seed) {
  clean.validate();
  check_arg(exposure_ratio >= 1.0, "exposure_ratio must be >= 1");
  const int H = clean.height(), W = clean.width();
  const int p = cfa.period();
  check_shape(H % p == 0 && W % p == 0,
              "clean image extents must be divisible by the CFA period");

  const Tensor linear = clean.linear ? detached(clean.tensor) : gamma_decode(clean.tensor);
  RawFrame raw;
  raw.width = W;
  raw.height = H;
  raw.cfa = cfa;
  raw.exposure_s = 1.0 / exposure_ratio;  // reference exposure is 1 s
  raw.samples.resize(static_cast<std::size_t>(W) * H);

  Rng rng(splitmix64(seed));
  const auto& lin = linear.data();
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const double range = raw.white_level - raw.black_level;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * W + x;
      const int c = cfa.color_at(y, x);
      double v = lin[static_cast<std::size_t>(c) * plane + i] / exposure_ratio;
      if (noise.photon_scale > 0.0)
        v = static_cast<double>(rng.poisson(v * noise.photon_scale)) / noise.photon_scale;
      if (noise.read_sigma > 0.0) v += rng.normal(0.0, noise.read_sigma);
      double adu = raw.black_level + v * range;
      if (adu < 0.0) adu = 0.0;
      if (adu > raw.white_level) adu = raw.white_level;
      raw.samples[i] = static_cast<std::uint16_t>(adu + 0.5);
    }
  return {std::move(raw), clean};
}

}  // namespace lowlight
