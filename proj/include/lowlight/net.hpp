#pragma once

#include <filesystem>
#include <fstream>
#include <vector>

#include "lowlight/tensor.hpp"

namespace lowlight {

// Architecture descriptor for the restoration network. Channel width doubles
// per encoder level; the decoder mirrors the encoder widths. The full-scale
// configuration (depth 5, base 32) has 23 conv-type layers: 10 encoder convs,
// 4 decoder blocks of transpose-conv + two convs, and a final 1x1 head.
struct NetSpec {
  int in_channels = 4;  // 4 for Bayer, 9 for X-Trans
  int depth = 5;        // encoder levels
  int base_width = 32;  // channels at the first level (8 at desk scale)
  int upsample = 2;     // sub-pixel factor r: 2 for Bayer, 3 for X-Trans

  int head_channels() const { return 3 * upsample * upsample; }
  int level_width(int level) const { return base_width << level; }

  void validate() const {
    check_arg(in_channels == 4 || in_channels == 9,
              "in_channels must be 4 (Bayer) or 9 (X-Trans)");
    check_arg(depth >= 2, "net depth must be at least 2");
    check_arg(base_width >= 1, "base_width must be positive");
    check_arg(upsample == 2 || upsample == 3, "upsample factor must be 2 or 3");
  }

  bool operator==(const NetSpec&) const = default;
};

enum class LayerKind : std::uint8_t { Conv = 0, TransposeConv = 1 };

struct LayerPlan {
  LayerKind kind;
  int in_ch;
  int out_ch;
  int kh;
  int kw;
};

/// Layer inventory in traversal order: encoder pairs, decoder blocks, 1x1 head.
inline std::vector<LayerPlan> net_layer_plan(const NetSpec& spec) {
  spec.validate();
  std::vector<LayerPlan> plan;
  int prev = spec.in_channels;
  for (int level = 0; level < spec.depth; ++level) {
    const int w = spec.level_width(level);
    plan.push_back({LayerKind::Conv, prev, w, 3, 3});
    plan.push_back({LayerKind::Conv, w, w, 3, 3});
    prev = w;
  }
  for (int level = spec.depth - 2; level >= 0; --level) {
    const int w = spec.level_width(level);
    plan.push_back({LayerKind::TransposeConv, prev, w, 2, 2});
    plan.push_back({LayerKind::Conv, 2 * w, w, 3, 3});  // after skip concat
    plan.push_back({LayerKind::Conv, w, w, 3, 3});
    prev = w;
  }
  plan.push_back({LayerKind::Conv, prev, spec.head_channels(), 1, 1});
  return plan;
}

struct NetLayer {
  LayerKind kind;
  Tensor kernel;  // Conv: [out,in,kh,kw]; TransposeConv: [in,out,kh,kw]
  Tensor bias;    // [out]
};

struct NetParams {
  NetSpec spec;
  std::vector<NetLayer> layers;
  std::uint64_t init_seed = 0;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.kernel.numel() + l.bias.numel();
    return n;
  }

  /// Flattened parameter tensors in traversal order: kernel, bias per layer.
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    out.reserve(2 * layers.size());
    for (auto& l : layers) {
      out.push_back(&l.kernel);
      out.push_back(&l.bias);
    }
    return out;
  }
  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> out;
    out.reserve(2 * layers.size());
    for (const auto& l : layers) {
      out.push_back(&l.kernel);
      out.push_back(&l.bias);
    }
    return out;
  }
};

/// He-normal kernels (std = sqrt(2 / fan_in)), zero biases, deterministic per
/// seed.
inline NetParams build_net(const NetSpec& spec, std::uint64_t seed) {
  NetParams params;
  params.spec = spec;
  params.init_seed = seed;
  Rng rng(splitmix64(seed ^ 0xB0A710ADULL));
  for (const LayerPlan& p : net_layer_plan(spec)) {
    NetLayer layer;
    layer.kind = p.kind;
    const std::vector<int> kshape = p.kind == LayerKind::Conv
                                        ? std::vector<int>{p.out_ch, p.in_ch, p.kh, p.kw}
                                        : std::vector<int>{p.in_ch, p.out_ch, p.kh, p.kw};
    const double sigma = std::sqrt(2.0 / (static_cast<double>(p.in_ch) * p.kh * p.kw));
    layer.kernel = Tensor::randn(kshape, rng, sigma);
    layer.bias = Tensor({p.out_ch});
    params.layers.push_back(std::move(layer));
  }
  return params;
}

/// Encoder-decoder forward pass: per encoder level two 3x3 convs with leaky
/// ReLU then 2x2 max-pool (bottleneck unpooled); per decoder level a 2x2
/// stride-2 transpose conv, concat with the mirror encoder activation, two 3x3
/// convs with leaky ReLU; then a 1x1 conv and pixel shuffle. Output is NOT
/// clamped; clamp at export.
inline Tensor net_forward(const NetParams& params, const Tensor& packed) {
  const NetSpec& spec = params.spec;
  spec.validate();
  detail::check_4d(packed, "net_forward");
  check_shape(packed.dim(1) == spec.in_channels,
              "net_forward: input has " + std::to_string(packed.dim(1)) +
                  " channels, spec expects " + std::to_string(spec.in_channels));
  const int div = 1 << (spec.depth - 1);
  check_shape(packed.dim(2) % div == 0 && packed.dim(3) % div == 0,
              "net_forward: spatial extents must be divisible by " + std::to_string(div));
  check_shape(packed.dim(2) >= div && packed.dim(3) >= div,
              "net_forward: input too small for depth " + std::to_string(spec.depth));

  std::size_t li = 0;
  auto conv_lrelu = [&](const Tensor& x) {
    const NetLayer& l = params.layers[li++];
    const int pad = (l.kernel.dim(2) - 1) / 2;
    return leaky_relu(conv2d(x, l.kernel, l.bias, 1, pad));
  };

  std::vector<Tensor> skips;
  Tensor x = packed;
  for (int level = 0; level < spec.depth; ++level) {
    x = conv_lrelu(x);
    x = conv_lrelu(x);
    skips.push_back(x);
    if (level < spec.depth - 1) x = maxpool2(x);
  }
  for (int level = spec.depth - 2; level >= 0; --level) {
    const NetLayer& up = params.layers[li++];
    x = bias_add(transpose_conv2d(x, up.kernel, 2), up.bias);
    x = concat_channels(x, skips[static_cast<std::size_t>(level)]);
    x = conv_lrelu(x);
    x = conv_lrelu(x);
  }
  const NetLayer& head = params.layers[li++];
  x = conv2d(x, head.kernel, head.bias, 1, 0);
  return pixel_shuffle(x, spec.upsample);
}

// ---- LLCK checkpoints ----------------------------------------------------------
// magic "LLCK", version u16, NetSpec (in_channels, depth, base_width, upsample
// as u32), epoch u32, Adam moments (step u64, then m and v as f64 arrays per
// parameter tensor in traversal order), then the parameters as f64 arrays in
// traversal order. Little-endian; reload is byte-for-byte exact.

inline constexpr std::uint16_t kCheckpointVersion = 1;

// First/second moment buffers mirroring the parameter list.
struct AdamMoments {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  static AdamMoments zeros_like(const NetParams& params) {
    AdamMoments out;
    for (const Tensor* p : params.parameters()) {
      out.m.emplace_back(p->numel(), 0.0);
      out.v.emplace_back(p->numel(), 0.0);
    }
    return out;
  }
};

struct Checkpoint {
  NetParams params;
  std::uint32_t epoch = 0;
  AdamMoments moments;
};

inline void save_checkpoint(std::ostream& os, const NetParams& params,
                            std::uint32_t epoch, const AdamMoments& moments) {
  const auto tensors = params.parameters();
  check_state(moments.m.size() == tensors.size() && moments.v.size() == tensors.size(),
              "Adam moment buffers do not mirror the parameter list");
  os.write("LLCK", 4);
  write_u16(os, kCheckpointVersion);
  write_u32(os, static_cast<std::uint32_t>(params.spec.in_channels));
  write_u32(os, static_cast<std::uint32_t>(params.spec.depth));
  write_u32(os, static_cast<std::uint32_t>(params.spec.base_width));
  write_u32(os, static_cast<std::uint32_t>(params.spec.upsample));
  write_u32(os, epoch);
  write_u64(os, moments.step);
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    check_state(moments.m[i].size() == tensors[i]->numel() &&
                    moments.v[i].size() == tensors[i]->numel(),
                "Adam moment buffer size mismatch");
    for (double x : moments.m[i]) write_f64(os, x);
    for (double x : moments.v[i]) write_f64(os, x);
  }
  for (const Tensor* t : tensors)
    for (double x : t->data()) write_f64(os, x);
}

inline void save_checkpoint(const std::filesystem::path& path, const NetParams& params,
                            std::uint32_t epoch, const AdamMoments& moments) {
  std::ofstream os(path, std::ios::binary);
  check_arg(os.good(), "cannot open " + path.string() + " for writing");
  save_checkpoint(os, params, epoch, moments);
  check_arg(os.good(), "failed writing " + path.string());
}

inline Checkpoint load_checkpoint(std::istream& is) {
  char magic[4];
  read_exact(is, magic, 4, "LLCK magic");
  if (std::string(magic, 4) != "LLCK") throw std::runtime_error("not an LLCK checkpoint");
  const std::uint16_t version = read_u16(is, "LLCK version");
  if (version != kCheckpointVersion)
    throw std::runtime_error("unsupported LLCK version " + std::to_string(version));
  NetSpec spec;
  spec.in_channels = static_cast<int>(read_u32(is, "in_channels"));
  spec.depth = static_cast<int>(read_u32(is, "depth"));
  spec.base_width = static_cast<int>(read_u32(is, "base_width"));
  spec.upsample = static_cast<int>(read_u32(is, "upsample"));
  spec.validate();

  Checkpoint ck;
  ck.params.spec = spec;
  ck.epoch = read_u32(is, "epoch");
  for (const LayerPlan& p : net_layer_plan(spec)) {
    NetLayer layer;
    layer.kind = p.kind;
    layer.kernel = Tensor(p.kind == LayerKind::Conv
                              ? std::vector<int>{p.out_ch, p.in_ch, p.kh, p.kw}
                              : std::vector<int>{p.in_ch, p.out_ch, p.kh, p.kw});
    layer.bias = Tensor({p.out_ch});
    ck.params.layers.push_back(std::move(layer));
  }
  ck.moments.step = read_u64(is, "adam step");
  const auto tensors = ck.params.parameters();
  for (const Tensor* t : tensors) {
    std::vector<double> m(t->numel()), v(t->numel());
    for (auto& x : m) x = read_f64(is, "adam m");
    for (auto& x : v) x = read_f64(is, "adam v");
    ck.moments.m.push_back(std::move(m));
    ck.moments.v.push_back(std::move(v));
  }
  for (Tensor* t : ck.params.parameters())
    for (auto& x : t->mutable_data()) x = read_f64(is, "parameter");
  if (is.peek() != std::char_traits<char>::eof())
    throw std::runtime_error("trailing bytes after LLCK parameters");
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  check_arg(is.good(), "cannot open " + path.string());
  return load_checkpoint(is);
}

}  // namespace lowlight
