#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "lowlight/tensor.hpp"

namespace lowlight {

enum class CfaType : std::uint8_t { Bayer = 0, XTrans = 1 };

// Color filter array layout: a row-major grid of color indices (0=R,1=G,2=B),
// 2x2 for Bayer and 6x6 for X-Trans.
struct CfaPattern {
  CfaType type = CfaType::Bayer;
  std::array<std::uint8_t, 36> colors{};  // first period()^2 entries used

  int period() const { return type == CfaType::Bayer ? 2 : 6; }
  std::uint8_t color_at(int r, int c) const {
    const int p = period();
    return colors[static_cast<std::size_t>((r % p) * p + (c % p))];
  }

  static CfaPattern bayer_rggb() {
    CfaPattern p;
    p.type = CfaType::Bayer;
    p.colors[0] = 0;
    p.colors[1] = 1;
    p.colors[2] = 1;
    p.colors[3] = 2;
    return p;
  }

  static CfaPattern xtrans_standard() {
    CfaPattern p;
    p.type = CfaType::XTrans;
    constexpr std::uint8_t grid[36] = {
        1, 2, 1, 1, 0, 1,  //
        0, 1, 0, 2, 1, 2,  //
        1, 2, 1, 1, 0, 1,  //
        1, 0, 1, 1, 2, 1,  //
        2, 1, 2, 0, 1, 0,  //
        1, 0, 1, 1, 2, 1};
    std::copy(std::begin(grid), std::end(grid), p.colors.begin());
    return p;
  }
};

// One sensor readout plus the metadata needed to interpret it.
struct RawFrame {
  int width = 0;
  int height = 0;
  std::vector<std::uint16_t> samples;  // row-major, one per pixel
  CfaPattern cfa;
  std::uint16_t black_level = 512;
  std::uint16_t white_level = 16383;
  double exposure_s = 1.0;

  void validate() const {
    check_arg(width > 0 && height > 0, "raw frame has empty extents");
    const int p = cfa.period();
    check_shape(width % p == 0 && height % p == 0,
                "raw frame extents must be divisible by the CFA period " +
                    std::to_string(p));
    check_arg(black_level < white_level, "black_level must be below white_level");
    check_shape(samples.size() ==
                    static_cast<std::size_t>(width) * static_cast<std::size_t>(height),
                "raw sample count does not match extents");
    for (std::uint16_t s : samples)
      check_arg(s <= white_level, "raw sample above white_level");
  }
};

// Network-ready multi-channel tensor at reduced resolution.
struct PackedRaw {
  Tensor tensor;  // [1, 4, H/2, W/2] for Bayer; [1, 9, H/3, W/3] for X-Trans
  double amplification = 1.0;
};

/// max(sample - black, 0) / (white - black), as [1,1,H,W] in [0,1].
inline Tensor subtract_black_level(const RawFrame& raw) {
  raw.validate();
  Tensor out({1, 1, raw.height, raw.width});
  auto& od = out.mutable_data();
  const double scale = 1.0 / (raw.white_level - raw.black_level);
  for (std::size_t i = 0; i < raw.samples.size(); ++i) {
    const int v = static_cast<int>(raw.samples[i]) - static_cast<int>(raw.black_level);
    od[i] = v <= 0 ? 0.0 : v * scale;
  }
  return out;
}

/// Bayer packing: channel c holds the (row, col) = (c/2, c%2) sub-lattice of
/// each 2x2 tile, at half resolution.
inline Tensor pack_bayer(const Tensor& normalized, const CfaPattern& pattern) {
  check_arg(pattern.type == CfaType::Bayer, "pack_bayer requires a Bayer pattern");
  detail::check_4d(normalized, "pack_bayer");
  check_shape(normalized.dim(0) == 1 && normalized.dim(1) == 1,
              "pack_bayer expects a [1,1,H,W] tensor");
  check_shape(normalized.dim(2) % 2 == 0 && normalized.dim(3) % 2 == 0,
              "pack_bayer requires even extents");
  return pixel_unshuffle(normalized, 2);
}

inline Tensor unpack_bayer(const Tensor& packed) {
  detail::check_4d(packed, "unpack_bayer");
  check_shape(packed.dim(1) == 4, "unpack_bayer expects 4 channels");
  return pixel_shuffle(packed, 2);
}

/// X-Trans packing: each 6x6 tile splits into four 3x3 cells; the cell grid
/// becomes the spatial layout (H/3 x W/3) and the 9 intra-cell positions become
/// the channels, i.e. channel 3u+v holds pixel (3Y+u, 3X+v).
inline Tensor pack_xtrans(const Tensor& normalized, const CfaPattern& pattern) {
  check_arg(pattern.type == CfaType::XTrans, "pack_xtrans requires an X-Trans pattern");
  detail::check_4d(normalized, "pack_xtrans");
  check_shape(normalized.dim(0) == 1 && normalized.dim(1) == 1,
              "pack_xtrans expects a [1,1,H,W] tensor");
  check_shape(normalized.dim(2) % 6 == 0 && normalized.dim(3) % 6 == 0,
              "pack_xtrans requires extents divisible by 6");
  return pixel_unshuffle(normalized, 3);
}

inline Tensor unpack_xtrans(const Tensor& packed) {
  detail::check_4d(packed, "unpack_xtrans");
  check_shape(packed.dim(1) == 9, "unpack_xtrans expects 9 channels");
  return pixel_shuffle(packed, 3);
}

/// Black-level subtraction followed by CFA-specific packing.
inline PackedRaw pack_raw(const RawFrame& raw) {
  const Tensor normalized = subtract_black_level(raw);
  PackedRaw packed;
  packed.tensor = raw.cfa.type == CfaType::Bayer ? pack_bayer(normalized, raw.cfa)
                                                 : pack_xtrans(normalized, raw.cfa);
  return packed;
}

/// Applies the brightness amplification factor. No clamping: the network sees
/// super-unity values.
inline Tensor amplify(const PackedRaw& packed, double factor) {
  check_arg(factor > 0.0, "amplification factor must be positive");
  return mul_scalar(packed.tensor, factor);
}

// ---- LLRW container ----------------------------------------------------------
// magic "LLRW", version u16, width u32, height u32, cfa_type u8, 36-byte CFA
// pattern, black_level u16, white_level u16, exposure_micros u32, then
// width*height u16 samples. Little-endian throughout.

inline constexpr std::uint16_t kRawFormatVersion = 1;

inline void write_raw(std::ostream& os, const RawFrame& raw) {
  raw.validate();
  os.write("LLRW", 4);
  write_u16(os, kRawFormatVersion);
  write_u32(os, static_cast<std::uint32_t>(raw.width));
  write_u32(os, static_cast<std::uint32_t>(raw.height));
  write_u8(os, static_cast<std::uint8_t>(raw.cfa.type));
  os.write(reinterpret_cast<const char*>(raw.cfa.colors.data()), 36);
  write_u16(os, raw.black_level);
  write_u16(os, raw.white_level);
  write_u32(os, static_cast<std::uint32_t>(raw.exposure_s * 1e6 + 0.5));
  for (std::uint16_t s : raw.samples) write_u16(os, s);
}

inline void write_raw(const std::filesystem::path& path, const RawFrame& raw) {
  std::ofstream os(path, std::ios::binary);
  check_arg(os.good(), "cannot open " + path.string() + " for writing");
  write_raw(os, raw);
  check_arg(os.good(), "failed writing " + path.string());
}

inline RawFrame read_raw(std::istream& is) {
  char magic[4];
  read_exact(is, magic, 4, "LLRW magic");
  if (std::string(magic, 4) != "LLRW") throw std::runtime_error("not an LLRW file");
  const std::uint16_t version = read_u16(is, "LLRW version");
  if (version != kRawFormatVersion)
    throw std::runtime_error("unsupported LLRW version " + std::to_string(version));
  RawFrame raw;
  raw.width = static_cast<int>(read_u32(is, "width"));
  raw.height = static_cast<int>(read_u32(is, "height"));
  const std::uint8_t cfa_type = read_u8(is, "cfa type");
  if (cfa_type > 1) throw std::runtime_error("unknown CFA type in LLRW file");
  raw.cfa.type = static_cast<CfaType>(cfa_type);
  read_exact(is, raw.cfa.colors.data(), 36, "CFA pattern");
  raw.black_level = read_u16(is, "black_level");
  raw.white_level = read_u16(is, "white_level");
  raw.exposure_s = read_u32(is, "exposure_micros") * 1e-6;
  raw.samples.resize(static_cast<std::size_t>(raw.width) *
                     static_cast<std::size_t>(raw.height));
  for (auto& s : raw.samples) s = read_u16(is, "sample");
  raw.validate();
  return raw;
}

inline RawFrame read_raw(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  check_arg(is.good(), "cannot open " + path.string());
  return read_raw(is);
}

}  // namespace lowlight
