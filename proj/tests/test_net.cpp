#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "lowlight/loss.hpp"
#include "lowlight/net.hpp"
#include "support/gradcheck.hpp"

using namespace lowlight;
using testsupport::grad_check;

namespace {

NetSpec desk_spec() {
  NetSpec s;
  s.in_channels = 4;
  s.depth = 3;
  s.base_width = 8;
  s.upsample = 2;
  return s;
}

}  // namespace

TEST_CASE("full-scale spec instantiates exactly 23 conv-type layers") {
  NetSpec full;  // defaults: depth 5, base 32, Bayer
  const auto plan = net_layer_plan(full);
  CHECK(plan.size() == 23);

  int encoder_convs = 0, transpose_convs = 0, convs = 0;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    if (plan[i].kind == LayerKind::TransposeConv)
      ++transpose_convs;
    else
      ++convs;
    if (i < 10) {
      CHECK(plan[i].kind == LayerKind::Conv);
      ++encoder_convs;
    }
  }
  CHECK(encoder_convs == 10);       // five pairs of 3x3 layers
  CHECK(transpose_convs == 4);      // one per decoder block
  CHECK(plan.size() - 10 == 13);    // decoder including the 1x1 head
  CHECK(plan.back().kh == 1);
  CHECK(plan.back().out_ch == 12);  // 3 * r^2

  // widths double per level and mirror on the decoder
  CHECK(plan[0].out_ch == 32);
  CHECK(plan[8].out_ch == 512);
  CHECK(plan[10].out_ch == 256);  // first transpose conv

  NetSpec shallow = full;
  shallow.depth = 1;
  CHECK_THROWS_AS(net_layer_plan(shallow), std::invalid_argument);
}

TEST_CASE("build_net is deterministic per seed") {
  const NetParams a = build_net(desk_spec(), 7);
  const NetParams b = build_net(desk_spec(), 7);
  const NetParams c = build_net(desk_spec(), 8);
  REQUIRE(a.layers.size() == b.layers.size());
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    CHECK(a.layers[i].kernel.data() == b.layers[i].kernel.data());
    CHECK(a.layers[i].bias.data() == b.layers[i].bias.data());
  }
  CHECK(a.layers[0].kernel.data() != c.layers[0].kernel.data());
  for (const auto& l : a.layers)
    for (double v : l.bias.data()) CHECK(v == 0.0);
}

TEST_CASE("desk-spec parameter count matches the hand-summed closed form") {
  const NetParams params = build_net(desk_spec(), 1);
  CHECK(params.parameter_count() == 29636);  // sum of kh*kw*Cin*Cout + Cout
  CHECK(params.layers.size() == 13);
}

TEST_CASE("forward maps packed Bayer input to an r-times-larger RGB image") {
  NetSpec spec = desk_spec();
  const NetParams params = build_net(spec, 3);
  Rng rng(5);
  const Tensor packed = Tensor::randn({1, 4, 16, 24}, rng, 0.25);
  const Tensor out = net_forward(params, packed);
  CHECK(out.shape() == std::vector<int>{1, 3, 32, 48});

  // determinism: identical (params, input) give bit-identical output
  const Tensor again = net_forward(params, packed);
  CHECK(out.data() == again.data());
}

TEST_CASE("forward maps packed X-Trans input with r = 3") {
  NetSpec spec;
  spec.in_channels = 9;
  spec.depth = 3;
  spec.base_width = 8;
  spec.upsample = 3;
  const NetParams params = build_net(spec, 4);
  Rng rng(6);
  const Tensor packed = Tensor::randn({1, 9, 64, 64}, rng, 0.25);
  const Tensor out = net_forward(params, packed);
  CHECK(out.shape() == std::vector<int>{1, 3, 192, 192});
}

TEST_CASE("full-scale Bayer 512x512 crop flows through at the same resolution") {
  NetSpec full;  // depth 5, base 32
  const NetParams params = build_net(full, 9);
  Rng rng(7);
  const Tensor packed = Tensor::randn({1, 4, 256, 256}, rng, 0.25);
  const Tensor out = net_forward(params, packed);
  CHECK(out.shape() == std::vector<int>{1, 3, 512, 512});
}

TEST_CASE("forward names the required divisibility on bad extents") {
  const NetParams params = build_net(desk_spec(), 3);
  Tensor packed({1, 4, 30, 30});
  try {
    net_forward(params, packed);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("divisible by 4") != std::string::npos);
  }
  Tensor wrong_ch({1, 9, 32, 32});
  CHECK_THROWS_AS(net_forward(params, wrong_ch), ShapeError);
}

TEST_CASE("skip connections propagate encoder information") {
  NetSpec spec = desk_spec();
  NetParams params = build_net(spec, 11);
  // cut every transpose-conv path; only the skip concats can carry signal
  for (auto& l : params.layers)
    if (l.kind == LayerKind::TransposeConv)
      std::fill(l.kernel.mutable_data().begin(), l.kernel.mutable_data().end(), 0.0);

  Rng rng(12);
  const Tensor packed = Tensor::randn({1, 4, 16, 16}, rng, 0.25);
  Tensor perturbed = detached(packed);
  perturbed.mutable_data()[5] += 0.5;

  const Tensor a = net_forward(params, packed);
  const Tensor b = net_forward(params, perturbed);
  CHECK(a.data() != b.data());

  double spread = 0.0;
  for (double v : a.data()) spread = std::max(spread, std::fabs(v - a.data()[0]));
  CHECK(spread > 0.0);  // output is not constant
}

TEST_CASE("spot-checked parameter gradients match finite differences") {
  NetSpec spec = desk_spec();
  NetParams params = build_net(spec, 13);
  const FeatureExtractor fx = FeatureExtractor::seeded(2);
  Rng rng(14);
  const Tensor packed = Tensor::randn({1, 4, 16, 16}, rng, 0.3);
  Tensor target({1, 3, 32, 32});
  for (auto& v : target.mutable_data()) v = rng.uniform();
  LossConfig cfg;
  cfg.msssim_scales = 2;

  auto f = [&] { return total_loss(net_forward(params, packed), target, cfg, fx).value(); };

  Tape tape;
  std::vector<Tensor> leaves;
  for (Tensor* p : params.parameters()) {
    tape.watch(*p);
    leaves.push_back(*p);
  }
  backward(total_loss(net_forward(params, packed), target, cfg, fx));
  // >= 100 random parameters across all 26 tensors
  const auto res = grad_check(f, leaves, 1e-5, 4);
  CHECK(res.checked >= 100);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("checkpoints round-trip byte-for-byte") {
  NetSpec spec = desk_spec();
  NetParams params = build_net(spec, 21);
  AdamMoments moments = AdamMoments::zeros_like(params);
  moments.step = 41;
  Rng rng(22);
  for (auto& buf : moments.m)
    for (auto& v : buf) v = rng.normal();
  for (auto& buf : moments.v)
    for (auto& v : buf) v = rng.uniform();

  std::ostringstream first;
  save_checkpoint(first, params, 17, moments);
  std::istringstream in1(first.str());
  const Checkpoint ck = load_checkpoint(in1);

  CHECK(ck.epoch == 17);
  CHECK(ck.moments.step == 41);
  CHECK(ck.params.spec == spec);
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    CHECK(ck.params.layers[i].kernel.data() == params.layers[i].kernel.data());
    CHECK(ck.params.layers[i].bias.data() == params.layers[i].bias.data());
  }
  CHECK(ck.moments.m == moments.m);
  CHECK(ck.moments.v == moments.v);

  std::ostringstream second;
  save_checkpoint(second, ck.params, ck.epoch, ck.moments);
  CHECK(first.str() == second.str());

  std::istringstream junk("LLCKxxxx");
  CHECK_THROWS(load_checkpoint(junk));
}
