#pragma once

// Brute-force metric oracles, independent of the tensor library: plain loops
// over raw value arrays.

#include <cmath>
#include <vector>

namespace testsupport {

inline std::vector<double> oracle_gaussian(int size, double sigma) {
  std::vector<double> w(static_cast<std::size_t>(size) * size);
  const int c = size / 2;
  double total = 0.0;
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) {
      const double dy = i - c, dx = j - c;
      const double v = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
      w[static_cast<std::size_t>(i) * size + j] = v;
      total += v;
    }
  for (auto& v : w) v /= total;
  return w;
}

struct OracleSsim {
  double mean_map = 0.0;
  double mean_cs = 0.0;
  double mean_l = 0.0;
};

// Direct double-loop SSIM over all channels and valid window positions.
inline OracleSsim oracle_ssim(const std::vector<double>& x, const std::vector<double>& y,
                              int C, int H, int W, int win, double sigma, double c1,
                              double c2) {
  const auto w = oracle_gaussian(win, sigma);
  OracleSsim out;
  std::size_t count = 0;
  for (int ch = 0; ch < C; ++ch) {
    const double* xp = x.data() + static_cast<std::size_t>(ch) * H * W;
    const double* yp = y.data() + static_cast<std::size_t>(ch) * H * W;
    for (int oh = 0; oh + win <= H; ++oh)
      for (int ow = 0; ow + win <= W; ++ow) {
        double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
        for (int i = 0; i < win; ++i)
          for (int j = 0; j < win; ++j) {
            const double wij = w[static_cast<std::size_t>(i) * win + j];
            const double xv = xp[static_cast<std::size_t>(oh + i) * W + (ow + j)];
            const double yv = yp[static_cast<std::size_t>(oh + i) * W + (ow + j)];
            mx += wij * xv;
            my += wij * yv;
            mxx += wij * xv * xv;
            myy += wij * yv * yv;
            mxy += wij * xv * yv;
          }
        const double var_x = mxx - mx * mx;
        const double var_y = myy - my * my;
        const double cov = mxy - mx * my;
        const double l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        const double cs = (2.0 * cov + c2) / (var_x + var_y + c2);
        out.mean_l += l;
        out.mean_cs += cs;
        out.mean_map += l * cs;
        ++count;
      }
  }
  out.mean_l /= static_cast<double>(count);
  out.mean_cs /= static_cast<double>(count);
  out.mean_map /= static_cast<double>(count);
  return out;
}

inline std::vector<double> oracle_halve(const std::vector<double>& x, int C, int H, int W) {
  const int OH = H / 2, OW = W / 2;
  std::vector<double> out(static_cast<std::size_t>(C) * OH * OW);
  for (int c = 0; c < C; ++c)
    for (int oh = 0; oh < OH; ++oh)
      for (int ow = 0; ow < OW; ++ow) {
        const double* p = x.data() + static_cast<std::size_t>(c) * H * W +
                          static_cast<std::size_t>(2 * oh) * W + 2 * ow;
        out[(static_cast<std::size_t>(c) * OH + oh) * OW + ow] =
            0.25 * (p[0] + p[1] + p[W] + p[W + 1]);
      }
  return out;
}

// Scale-by-scale composition: mean cs at scales 1..M-1 on successively halved
// pairs, mean l*cs at the coarsest scale.
inline double oracle_ms_ssim(std::vector<double> x, std::vector<double> y, int C, int H,
                             int W, int M, int win, double sigma, double c1, double c2) {
  double prod = 1.0;
  for (int i = 1; i <= M; ++i) {
    const OracleSsim s = oracle_ssim(x, y, C, H, W, win, sigma, c1, c2);
    if (i < M) {
      prod *= s.mean_cs;
      x = oracle_halve(x, C, H, W);
      y = oracle_halve(y, C, H, W);
      H /= 2;
      W /= 2;
    } else {
      prod *= s.mean_map;
    }
  }
  return prod;
}

// Brute-force dark channel: min over channels then min over the clamped
// patch neighbourhood, O(H*W*p^2).
inline std::vector<double> oracle_dark_channel(const std::vector<double>& rgb, int H,
                                               int W, int patch) {
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  std::vector<double> chan_min(plane);
  for (std::size_t i = 0; i < plane; ++i)
    chan_min[i] = std::min({rgb[i], rgb[plane + i], rgb[2 * plane + i]});
  std::vector<double> out(plane);
  const int r = patch / 2;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double m = chan_min[static_cast<std::size_t>(y) * W + x];
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
          m = std::min(m, chan_min[static_cast<std::size_t>(yy) * W + xx]);
        }
      out[static_cast<std::size_t>(y) * W + x] = m;
    }
  return out;
}

}  // namespace testsupport
