#include <catch2/catch_amalgamated.hpp>

#include "lowlight/dehaze.hpp"
#include "support/oracles.hpp"

using namespace lowlight;

namespace {

RgbImage random_image(int w, int h, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({1, 3, h, w});
  for (auto& v : t.mutable_data()) v = rng.uniform();
  return make_rgb(std::move(t));
}

// textured image with a zero somewhere in every `spacing`-spaced cell, so the
// dark channel is 0 for windows of at least 2*spacing-1
RgbImage dotted_image(int w, int h, int spacing, std::uint64_t seed) {
  RgbImage img = random_image(w, h, seed);
  auto& d = img.tensor.mutable_data();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int y = spacing / 2; y < h; y += spacing)
    for (int x = spacing / 2; x < w; x += spacing)
      for (int c = 0; c < 3; ++c)
        d[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * w + x] = 0.0;
  return img;
}

double mean_abs_diff(const RgbImage& a, const RgbImage& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.tensor.numel(); ++i)
    s += std::fabs(a.tensor.data()[i] - b.tensor.data()[i]);
  return s / static_cast<double>(a.tensor.numel());
}

}  // namespace

TEST_CASE("invert flips intensities and is an involution") {
  Tensor t({1, 3, 1, 1}, {0.2, 0.5, 1.0});
  const RgbImage inv = invert(make_rgb(std::move(t)));
  CHECK(inv.tensor.data()[0] == Catch::Approx(0.8).epsilon(1e-15));
  CHECK(inv.tensor.data()[1] == 0.5);
  CHECK(inv.tensor.data()[2] == 0.0);

  const RgbImage x = random_image(16, 16, 3);
  const RgbImage back = invert(invert(x));
  CHECK(back.tensor.data() == x.tensor.data());

  // mean lightness maps m -> 1 - m
  CHECK(mean_lightness(invert(x)) == Catch::Approx(1.0 - mean_lightness(x)).epsilon(1e-12));
}

TEST_CASE("dark_channel of a constant image is that constant") {
  const RgbImage img = make_rgb(Tensor::full({1, 3, 20, 20}, 0.6));
  const Tensor dc = dark_channel(img, 5);
  for (double v : dc.data()) CHECK(v == 0.6);
  CHECK_THROWS_AS(dark_channel(img, 4), std::invalid_argument);   // even patch
  CHECK_THROWS_AS(dark_channel(img, 21), std::invalid_argument);  // larger than image
}

TEST_CASE("dark_channel spreads a single black pixel over the patch footprint") {
  Tensor t = Tensor::full({1, 3, 21, 21}, 1.0);
  const std::size_t plane = 21 * 21;
  for (int c = 0; c < 3; ++c) t.mutable_data()[c * plane + 10 * 21 + 10] = 0.0;
  const Tensor dc = dark_channel(make_rgb(std::move(t)), 7);
  for (int y = 0; y < 21; ++y)
    for (int x = 0; x < 21; ++x) {
      const bool inside = std::abs(y - 10) <= 3 && std::abs(x - 10) <= 3;
      CHECK(dc.data()[static_cast<std::size_t>(y) * 21 + x] == (inside ? 0.0 : 1.0));
    }
}

TEST_CASE("dark_channel equals the brute-force oracle exactly") {
  for (int patch : {1, 3, 15}) {
    const RgbImage img = random_image(33, 26, 40 + static_cast<std::uint64_t>(patch));
    const Tensor dc = dark_channel(img, patch);
    const auto oracle =
        testsupport::oracle_dark_channel(img.tensor.data(), 26, 33, patch);
    CHECK(dc.data() == oracle);
  }
}

TEST_CASE("guided_filter of a constant map returns it exactly") {
  const RgbImage img = random_image(24, 24, 51);
  Tensor guide({1, 1, 24, 24});
  for (std::size_t i = 0; i < guide.numel(); ++i)
    guide.mutable_data()[i] = img.tensor.data()[i];
  const Tensor constant = Tensor::full({1, 1, 24, 24}, 1.0);
  const Tensor filtered = guided_filter(guide, constant, 5, 1e-3);
  CHECK(filtered.data() == constant.data());
}

TEST_CASE("dehaze leaves a haze-free image unchanged") {
  // a zero in every patch window: dark channel 0 everywhere, so t = 1
  const RgbImage img = dotted_image(40, 40, 7, 61);
  DehazeParams p;
  const RgbImage out = dehaze(img, p);
  CHECK(mean_abs_diff(out, img) < 1e-12);
}

TEST_CASE("dehaze with omega = 0 is the identity") {
  const RgbImage img = random_image(32, 24, 71);
  DehazeParams p;
  p.omega = 1e-300;  // omega = 0 is outside (0,1]; the limit behaves identically
  const RgbImage out = dehaze(img, p);
  CHECK(mean_abs_diff(out, img) < 1e-12);
}

TEST_CASE("dehaze recovers a synthetically hazed image") {
  // known J with dark dots everywhere and a solid white block so the airlight
  // estimate can find A = 1
  RgbImage truth = dotted_image(64, 64, 8, 81);
  {
    auto& d = truth.tensor.mutable_data();
    const std::size_t plane = 64 * 64;
    for (int y = 20; y < 44; ++y)
      for (int x = 20; x < 44; ++x)
        for (int c = 0; c < 3; ++c)
          d[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * 64 + x] = 1.0;
  }
  // I = J * t + A * (1 - t) with A = 1, t = 0.5
  Tensor hazed(truth.tensor.shape());
  for (std::size_t i = 0; i < hazed.numel(); ++i)
    hazed.mutable_data()[i] = truth.tensor.data()[i] * 0.5 + 0.5;

  DehazeInfo info;
  const RgbImage recovered = dehaze(make_rgb(std::move(hazed)), {}, &info);
  CHECK(info.airlight[0] == Catch::Approx(1.0).margin(1e-6));
  CHECK_FALSE(info.airlight_fallback);
  CHECK(mean_abs_diff(recovered, truth) < 0.05);
}

TEST_CASE("degenerate airlight falls back to 1 with a warning status") {
  // one channel identically zero makes the airlight mean zero in that channel
  Tensor t = Tensor::full({1, 3, 16, 16}, 0.4);
  std::fill_n(t.mutable_data().begin(), 16 * 16, 0.0);  // red channel = 0
  DehazeInfo info;
  const RgbImage out = dehaze(make_rgb(std::move(t)), {}, &info);
  CHECK(info.airlight_fallback);
  CHECK(info.airlight[0] == 1.0);
  for (double v : out.tensor.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("dehaze output stays in [0,1] for arbitrary inputs") {
  for (std::uint64_t seed : {91, 92, 93}) {
    const RgbImage img = random_image(24, 24, seed);
    const RgbImage out = dehaze(img);
    for (double v : out.tensor.data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("enhance_contrast brightens dark-skewed images") {
  for (std::uint64_t seed : {101, 102, 103, 104}) {
    RgbImage img = random_image(48, 48, seed);
    for (auto& v : img.tensor.mutable_data()) v *= 0.35;  // dark-skewed
    const double before = mean_lightness(img);
    const RgbImage out = enhance_contrast(img);
    CHECK(mean_lightness(out) > before);
  }
}

TEST_CASE("enhance_contrast fixes already-bright images") {
  // inverse has a zero in every window: bright image with white dots
  RgbImage img = random_image(40, 40, 111);
  auto& d = img.tensor.mutable_data();
  for (auto& v : d) v = 0.7 + 0.3 * v;
  const std::size_t plane = 40 * 40;
  for (int y = 3; y < 40; y += 7)
    for (int x = 3; x < 40; x += 7)
      for (int c = 0; c < 3; ++c)
        d[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * 40 + x] = 1.0;
  const RgbImage out = enhance_contrast(img);
  CHECK(mean_abs_diff(out, img) < 1e-12);
}

TEST_CASE("enhance_contrast contracts toward its fixed point") {
  for (std::uint64_t seed : {121, 122}) {
    RgbImage img = random_image(32, 32, seed);
    for (auto& v : img.tensor.mutable_data()) v *= 0.4;
    const RgbImage once = enhance_contrast(img);
    const RgbImage twice = enhance_contrast(once);
    CHECK(mean_abs_diff(twice, once) < mean_abs_diff(once, img));
  }
}
