#pragma once

// Digitally reconstructed radiographs: parallel-beam Beer-Lambert line
// integrals through a HU volume along one principal axis.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "x2ct/binary_io.hpp"
#include "x2ct/error.hpp"
#include "x2ct/phantom.hpp"

namespace x2ct {

// Display mapping of the line integral L.
enum class DrrIntensity {
  Attenuation,  // 1 - exp(-L)
  NegLog,       // L = -log(transmittance)
};

struct DrrConfig {
  double mu_water = 0.0205;  // per mm
  std::size_t out_size = 64;
  int axis = 1;  // 1 = anterior-posterior (y)
  DrrIntensity intensity = DrrIntensity::Attenuation;

  void validate() const {
    if (!(mu_water > 0.0)) throw ConfigError("drr.mu_water must be positive");
    if (out_size < 8) throw ConfigError("drr.out_size must be >= 8");
    if (axis < 0 || axis > 2) throw ConfigError("drr.axis must be 0, 1 or 2");
  }
};

struct Radiograph {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<float> pixels;  // row-major
  std::string source_id;

  float at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
};

// Double-precision image used before quantization to the file format.
struct RawImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;

  double& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  double at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
};

inline double hu_to_mu(double hu, double mu_water_per_mm) {
  return std::max(0.0, mu_water_per_mm * (1.0 + hu / 1000.0));
}

// Line integral image L = sum mu * step along cfg.axis. Image columns follow
// the lowest remaining axis, rows the highest (for the AP axis: x across, z down).
inline RawImage line_integrals(const Volume& vol, const DrrConfig& cfg) {
  for (auto d : vol.dims)
    if (d < 2) throw DataError("degenerate volume: every dimension must be >= 2");
  if (vol.voxels.size() != vol.voxel_count()) throw DataError("volume voxel count does not match dims");
  const int ax = cfg.axis;
  const int col_ax = ax == 0 ? 1 : 0;
  const int row_ax = ax == 2 ? 1 : 2;
  RawImage img;
  img.width = vol.dims[col_ax];
  img.height = vol.dims[row_ax];
  img.pixels.assign(img.width * img.height, 0.0);
  const double step = vol.spacing_mm[ax];
  std::size_t idx[3];
  for (std::size_t r = 0; r < img.height; ++r) {
    for (std::size_t c = 0; c < img.width; ++c) {
      idx[row_ax] = r;
      idx[col_ax] = c;
      double L = 0.0;
      for (std::size_t k = 0; k < vol.dims[ax]; ++k) {
        idx[ax] = k;
        L += hu_to_mu(vol.at(idx[0], idx[1], idx[2]), cfg.mu_water) * step;
      }
      img.at(c, r) = L;
    }
  }
  return img;
}

// Raw (pre-normalization) projection in the configured intensity mapping.
inline RawImage project_raw(const Volume& vol, const DrrConfig& cfg) {
  RawImage img = line_integrals(vol, cfg);
  if (cfg.intensity == DrrIntensity::Attenuation)
    for (auto& v : img.pixels) v = 1.0 - std::exp(-v);
  return img;
}

// Min-max to [0,1]; a constant image maps to all zeros.
inline void normalize_minmax(RawImage& img) {
  const auto [lo_it, hi_it] = std::minmax_element(img.pixels.begin(), img.pixels.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) {
    std::fill(img.pixels.begin(), img.pixels.end(), 0.0);
    return;
  }
  for (auto& v : img.pixels) v = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
}

// Bilinear resampling with half-pixel-centred sampling, clamped at edges.
inline RawImage resize_bilinear(const RawImage& src, std::size_t out_w, std::size_t out_h) {
  if (src.width == out_w && src.height == out_h) return src;
  RawImage dst;
  dst.width = out_w;
  dst.height = out_h;
  dst.pixels.assign(out_w * out_h, 0.0);
  auto coord = [](std::size_t o, std::size_t in, std::size_t out, std::size_t& i0, std::size_t& i1, double& t) {
    double s = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::size_t>(std::floor(s));
    i1 = std::min(i0 + 1, in - 1);
    t = s - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    std::size_t y0, y1;
    double ty;
    coord(y, src.height, out_h, y0, y1, ty);
    for (std::size_t x = 0; x < out_w; ++x) {
      std::size_t x0, x1;
      double tx;
      coord(x, src.width, out_w, x0, x1, tx);
      const double top = src.at(x0, y0) * (1 - tx) + src.at(x1, y0) * tx;
      const double bot = src.at(x0, y1) * (1 - tx) + src.at(x1, y1) * tx;
      dst.at(x, y) = top * (1 - ty) + bot * ty;
    }
  }
  return dst;
}

inline Radiograph project_ap(const Volume& vol, const DrrConfig& cfg, std::string source_id = {}) {
  cfg.validate();
  RawImage img = project_raw(vol, cfg);
  normalize_minmax(img);
  img = resize_bilinear(img, cfg.out_size, cfg.out_size);
  Radiograph out;
  out.width = static_cast<std::uint32_t>(img.width);
  out.height = static_cast<std::uint32_t>(img.height);
  out.source_id = std::move(source_id);
  out.pixels.resize(img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    out.pixels[i] = static_cast<float>(std::clamp(img.pixels[i], 0.0, 1.0));
  return out;
}

// Radiograph file: "X2IMG", u32 width, u32 height, f32 pixels row-major.
inline std::vector<char> encode_radiograph_file(const Radiograph& img) {
  io::ByteWriter w;
  w.bytes("X2IMG");
  w.u32(img.width);
  w.u32(img.height);
  for (float p : img.pixels) w.f32(p);
  return w.buffer();
}

inline Radiograph decode_radiograph_file(std::vector<char> bytes, const std::string& source = "radiograph") {
  io::ByteReader r(std::move(bytes), source);
  r.expect_magic("X2IMG");
  Radiograph img;
  img.width = r.u32();
  img.height = r.u32();
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  for (auto& p : img.pixels) p = r.f32();
  if (!r.done()) throw DataError(source + ": trailing bytes after pixel payload");
  return img;
}

inline void write_radiograph(const std::filesystem::path& path, const Radiograph& img) {
  io::write_atomic(path, encode_radiograph_file(img));
}

inline Radiograph read_radiograph(const std::filesystem::path& path) {
  auto img = decode_radiograph_file(io::read_file(path), path.string());
  img.source_id = path.stem().string();
  return img;
}

// 8-bit binary PGM for eyeballing.
inline void write_pgm(const std::filesystem::path& path, const Radiograph& img) {
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  for (float p : img.pixels)
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(p, 0.0f, 1.0f) * 255.0f))));
  io::write_atomic(path, out);
}

}  // namespace x2ct
