#pragma once

#include <algorithm>
#include <array>
#include <numeric>

#include "lowlight/image.hpp"

namespace lowlight {

struct DehazeParams {
  int patch_size = 15;            // dark-channel window
  double omega = 0.95;            // haze retention factor
  double t0 = 0.1;                // transmission floor
  double airlight_fraction = 0.001;  // top fraction of dark-channel pixels
  int guided_radius = 40;         // at a 512-pixel reference extent (scaled per image)
  double guided_eps = 1e-3;

  void validate() const {
    check_arg(patch_size >= 1 && patch_size % 2 == 1, "patch_size must be odd");
    // omega = 0 is the documented identity degeneracy (t = 1 everywhere)
    check_arg(omega >= 0.0 && omega <= 1.0, "omega must be in [0,1]");
    check_arg(t0 > 0.0 && t0 < 1.0, "t0 must be in (0,1)");
    check_arg(airlight_fraction > 0.0 && airlight_fraction <= 1.0,
              "airlight_fraction must be in (0,1]");
    check_arg(guided_radius >= 1, "guided_radius must be positive");
    check_arg(guided_eps > 0.0, "guided_eps must be positive");
  }
};

/// out = 1 - in, per channel.
inline RgbImage invert(const RgbImage& img) {
  img.validate();
  Tensor out(img.tensor.shape());
  const auto& d = img.tensor.data();
  auto& od = out.mutable_data();
  for (std::size_t i = 0; i < d.size(); ++i) od[i] = 1.0 - d[i];
  return make_rgb(std::move(out), img.linear);
}

/// Mean of (R+G+B)/3 over all pixels, values clamped to [0,1] first.
inline double mean_lightness(const RgbImage& img) {
  img.validate();
  const auto& d = img.tensor.data();
  double s = 0.0;
  for (double v : d) s += clamp01(v);
  return s / static_cast<double>(d.size());
}

namespace detail {

// Sliding min over clamped windows, one axis at a time. A separable pass is
// exactly the rectangular window minimum.
inline void min_filter_axis(std::vector<double>& v, int H, int W, int radius,
                            bool vertical) {
  std::vector<double> out(v.size());
  if (!vertical) {
    for (int y = 0; y < H; ++y) {
      const double* row = v.data() + static_cast<std::size_t>(y) * W;
      double* orow = out.data() + static_cast<std::size_t>(y) * W;
      for (int x = 0; x < W; ++x) {
        const int x0 = std::max(0, x - radius), x1 = std::min(W - 1, x + radius);
        double m = row[x0];
        for (int xx = x0 + 1; xx <= x1; ++xx) m = std::min(m, row[xx]);
        orow[x] = m;
      }
    }
  } else {
    for (int x = 0; x < W; ++x)
      for (int y = 0; y < H; ++y) {
        const int y0 = std::max(0, y - radius), y1 = std::min(H - 1, y + radius);
        double m = v[static_cast<std::size_t>(y0) * W + x];
        for (int yy = y0 + 1; yy <= y1; ++yy)
          m = std::min(m, v[static_cast<std::size_t>(yy) * W + x]);
        out[static_cast<std::size_t>(y) * W + x] = m;
      }
  }
  v.swap(out);
}

// Windowed mean with clamped borders (each window renormalized by its pixel
// count), via running sums per axis.
inline std::vector<double> box_mean(const std::vector<double>& v, int H, int W,
                                    int radius) {
  std::vector<double> rowsum(v.size());
  for (int y = 0; y < H; ++y) {
    const double* row = v.data() + static_cast<std::size_t>(y) * W;
    double* orow = rowsum.data() + static_cast<std::size_t>(y) * W;
    double s = 0.0;
    for (int x = 0; x <= std::min(W - 1, radius); ++x) s += row[x];
    for (int x = 0; x < W; ++x) {
      if (x > 0) {
        const int enter = x + radius, leave = x - radius - 1;
        if (enter < W) s += row[enter];
        if (leave >= 0) s -= row[leave];
      }
      orow[x] = s;
    }
  }
  std::vector<double> out(v.size());
  for (int x = 0; x < W; ++x) {
    double s = 0.0;
    for (int y = 0; y <= std::min(H - 1, radius); ++y)
      s += rowsum[static_cast<std::size_t>(y) * W + x];
    for (int y = 0; y < H; ++y) {
      if (y > 0) {
        const int enter = y + radius, leave = y - radius - 1;
        if (enter < H) s += rowsum[static_cast<std::size_t>(enter) * W + x];
        if (leave >= 0) s -= rowsum[static_cast<std::size_t>(leave) * W + x];
      }
      const int ny = std::min(H - 1, y + radius) - std::max(0, y - radius) + 1;
      const int nx = std::min(W - 1, x + radius) - std::max(0, x - radius) + 1;
      out[static_cast<std::size_t>(y) * W + x] = s / (static_cast<double>(ny) * nx);
    }
  }
  return out;
}

}  // namespace detail

/// Per pixel: min over the clamped patch neighbourhood of the channel minimum.
inline Tensor dark_channel(const RgbImage& img, int patch_size) {
  img.validate();
  check_arg(patch_size >= 1 && patch_size % 2 == 1, "patch_size must be odd");
  const int H = img.height(), W = img.width();
  check_arg(patch_size <= std::min(H, W), "patch_size exceeds the image extents");
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const auto& d = img.tensor.data();
  std::vector<double> m(plane);
  for (std::size_t i = 0; i < plane; ++i)
    m[i] = std::min({d[i], d[plane + i], d[2 * plane + i]});
  const int radius = patch_size / 2;
  detail::min_filter_axis(m, H, W, radius, false);
  detail::min_filter_axis(m, H, W, radius, true);
  return Tensor({1, 1, H, W}, std::move(m));
}

/// Single-channel guided filter (He et al. box-statistics form); `guide` and
/// `src` are [1,1,H,W]. Filtering a constant map returns it exactly.
inline Tensor guided_filter(const Tensor& guide, const Tensor& src, int radius,
                            double eps) {
  detail::check_same_shape(guide, src, "guided_filter");
  check_shape(guide.ndim() == 4 && guide.dim(0) == 1 && guide.dim(1) == 1,
              "guided_filter expects [1,1,H,W] tensors");
  check_arg(radius >= 1, "guided_filter radius must be positive");
  check_arg(eps > 0.0, "guided_filter eps must be positive");
  const int H = guide.dim(2), W = guide.dim(3);
  const auto& I = guide.data();
  const auto& p = src.data();
  const std::size_t n = I.size();

  std::vector<double> Ip(n), II(n);
  for (std::size_t i = 0; i < n; ++i) {
    Ip[i] = I[i] * p[i];
    II[i] = I[i] * I[i];
  }
  const auto mean_I = detail::box_mean(I, H, W, radius);
  const auto mean_p = detail::box_mean(p, H, W, radius);
  const auto mean_Ip = detail::box_mean(Ip, H, W, radius);
  const auto mean_II = detail::box_mean(II, H, W, radius);

  std::vector<double> a(n), b(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double var = mean_II[i] - mean_I[i] * mean_I[i];
    const double cov = mean_Ip[i] - mean_I[i] * mean_p[i];
    a[i] = cov / (var + eps);
    b[i] = mean_p[i] - a[i] * mean_I[i];
  }
  const auto mean_a = detail::box_mean(a, H, W, radius);
  const auto mean_b = detail::box_mean(b, H, W, radius);

  Tensor out({1, 1, H, W});
  auto& od = out.mutable_data();
  for (std::size_t i = 0; i < n; ++i) od[i] = mean_a[i] * I[i] + mean_b[i];
  return out;
}

struct DehazeInfo {
  std::array<double, 3> airlight{1.0, 1.0, 1.0};
  bool airlight_fallback = false;
  int guided_radius_used = 0;
};

/// Dark-channel-prior dehazing: atmospheric light from the brightest
/// dark-channel pixels, transmission t = 1 - omega * dark_channel(I/A) refined
/// with a guided filter, recovery J = (I - A) / max(t, t0) + A, clamped.
inline RgbImage dehaze(const RgbImage& img, const DehazeParams& params = {},
                       DehazeInfo* info = nullptr) {
  img.validate();
  params.validate();
  const int H = img.height(), W = img.width();
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const auto& d = img.tensor.data();

  // atmospheric light: mean color of the airlight_fraction brightest
  // dark-channel pixels (ties broken by pixel index for determinism)
  const Tensor dc = dark_channel(img, params.patch_size);
  std::vector<std::size_t> order(plane);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t lhs, std::size_t rhs) {
    return dc.data()[lhs] > dc.data()[rhs];
  });
  const std::size_t top = std::max<std::size_t>(
      1, static_cast<std::size_t>(params.airlight_fraction * static_cast<double>(plane) + 0.5));
  std::array<double, 3> airlight{0.0, 0.0, 0.0};
  for (std::size_t k = 0; k < top; ++k)
    for (int c = 0; c < 3; ++c)
      airlight[static_cast<std::size_t>(c)] += d[static_cast<std::size_t>(c) * plane + order[k]];
  for (auto& v : airlight) v /= static_cast<double>(top);

  bool fallback = false;
  for (double v : airlight)
    if (v <= 0.0) fallback = true;
  if (fallback) airlight = {1.0, 1.0, 1.0};

  // transmission from the airlight-normalized image
  Tensor normalized({1, 3, H, W});
  {
    auto& nd = normalized.mutable_data();
    for (int c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < plane; ++i)
        nd[static_cast<std::size_t>(c) * plane + i] =
            d[static_cast<std::size_t>(c) * plane + i] / airlight[static_cast<std::size_t>(c)];
  }
  const Tensor dark_norm = dark_channel(make_rgb(std::move(normalized)), params.patch_size);
  Tensor t_raw({1, 1, H, W});
  for (std::size_t i = 0; i < plane; ++i)
    t_raw.mutable_data()[i] = 1.0 - params.omega * dark_norm.data()[i];

  // refine with the image lightness as guide; radius follows the image scale
  Tensor guide({1, 1, H, W});
  for (std::size_t i = 0; i < plane; ++i)
    guide.mutable_data()[i] = (d[i] + d[plane + i] + d[2 * plane + i]) / 3.0;
  const int radius =
      std::max(1, (params.guided_radius * std::min(H, W) + 256) / 512);
  const Tensor t = guided_filter(guide, t_raw, radius, params.guided_eps);

  Tensor out({1, 3, H, W});
  auto& od = out.mutable_data();
  for (int c = 0; c < 3; ++c) {
    const double A = airlight[static_cast<std::size_t>(c)];
    for (std::size_t i = 0; i < plane; ++i) {
      const double tt = std::max(t.data()[i], params.t0);
      od[static_cast<std::size_t>(c) * plane + i] =
          clamp01((d[static_cast<std::size_t>(c) * plane + i] - A) / tt + A);
    }
  }
  if (info) {
    info->airlight = airlight;
    info->airlight_fallback = fallback;
    info->guided_radius_used = radius;
  }
  return make_rgb(std::move(out), img.linear);
}

/// Contrast improvement: invert, dehaze, invert back.
inline RgbImage enhance_contrast(const RgbImage& img, const DehazeParams& params = {},
                                 DehazeInfo* info = nullptr) {
  return invert(dehaze(invert(img), params, info));
}

}  // namespace lowlight
