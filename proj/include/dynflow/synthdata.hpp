#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dynflow/binio.hpp"
#include "dynflow/errors.hpp"
#include "dynflow/rng.hpp"
#include "dynflow/tensor.hpp"

namespace dynflow {

enum class Difficulty : std::uint8_t { kEasy = 0, kHard = 1 };

inline const char* difficulty_name(Difficulty d) { return d == Difficulty::kEasy ? "easy" : "hard"; }

enum class FlowKind { kTranslation, kRotation, kAffine };

struct SynthConfig {
  std::size_t height = 32;
  std::size_t width = 64;
  std::size_t channels = 1;
  std::size_t downscale = 2;  // magnitudes are drawn in feature-grid pixels
  int octaves = 4;
  double easy_min = 0.5, easy_max = 2.0;
  double hard_min = 4.0, hard_max = 8.0;
  double hard_fraction = 0.5;
};

// Image pair with exact ground truth: image2(x) = image1(x + flow(x)) on
// valid pixels. Flow is in image pixels, channel 0 horizontal.
struct SynthSample {
  std::uint64_t seed = 0;
  Difficulty difficulty = Difficulty::kEasy;
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<double> image1;  // [C,H,W]
  std::vector<double> image2;  // [C,H,W]
  std::vector<double> flow;    // [2,H,W]
  std::vector<std::uint8_t> valid;  // [H,W]
};

// Band-limited value noise: octave k samples a random lattice with spacing
// 16 / 2^k pixels, smoothstep-interpolated, amplitude 2^-k. The sum is
// min-max normalized to [0, 1].
inline std::vector<double> gen_texture(std::uint64_t seed, std::size_t height, std::size_t width,
                                       int octaves) {
  if (height < 8 || width < 8) throw ContractError("gen_texture: size must be at least 8");
  if (octaves < 1) throw ContractError("gen_texture: need at least one octave");
  std::vector<double> img(height * width, 0.0);
  for (int k = 0; k < octaves; ++k) {
    const double spacing = std::max(1.0, 16.0 / std::ldexp(1.0, k));
    const double amp = std::ldexp(1.0, -k);
    const std::size_t gh = static_cast<std::size_t>(std::ceil(height / spacing)) + 2;
    const std::size_t gw = static_cast<std::size_t>(std::ceil(width / spacing)) + 2;
    Rng rng = Rng::stream(seed, "texture", {static_cast<std::uint64_t>(k)});
    std::vector<double> lattice(gh * gw);
    for (double& v : lattice) v = rng.uniform();
    auto smooth = [](double t) { return t * t * (3 - 2 * t); };
    for (std::size_t y = 0; y < height; ++y) {
      const double gy = static_cast<double>(y) / spacing;
      const std::size_t y0 = static_cast<std::size_t>(gy);
      const double wy = smooth(gy - static_cast<double>(y0));
      for (std::size_t x = 0; x < width; ++x) {
        const double gx = static_cast<double>(x) / spacing;
        const std::size_t x0 = static_cast<std::size_t>(gx);
        const double wx = smooth(gx - static_cast<double>(x0));
        const double v = (1 - wy) * ((1 - wx) * lattice[y0 * gw + x0] + wx * lattice[y0 * gw + x0 + 1]) +
                         wy * ((1 - wx) * lattice[(y0 + 1) * gw + x0] + wx * lattice[(y0 + 1) * gw + x0 + 1]);
        img[y * width + x] += amp * v;
      }
    }
  }
  const auto [lo, hi] = std::minmax_element(img.begin(), img.end());
  const double mn = *lo, range = *hi - *lo;
  for (double& v : img) v = range > 0 ? (v - mn) / range : 0.5;
  return img;
}

inline std::vector<double> translation_flow(double magnitude, double angle, std::size_t height,
                                            std::size_t width) {
  std::vector<double> flow(2 * height * width);
  std::fill_n(flow.begin(), height * width, magnitude * std::cos(angle));
  std::fill_n(flow.begin() + static_cast<std::ptrdiff_t>(height * width), height * width,
              magnitude * std::sin(angle));
  return flow;
}

// Rigid rotation about the image center. The rotation angle is chosen so
// the largest displacement on the grid (at the corners) equals `magnitude`.
inline std::vector<double> rotation_flow(double magnitude, bool clockwise, std::size_t height,
                                         std::size_t width) {
  const double cx = (static_cast<double>(width) - 1) / 2, cy = (static_cast<double>(height) - 1) / 2;
  const double radius = std::hypot(cx, cy);
  const double ratio = std::min(1.0, magnitude / (2 * radius));
  const double angle = (clockwise ? -2.0 : 2.0) * std::asin(ratio);
  const double c = std::cos(angle), s = std::sin(angle);
  std::vector<double> flow(2 * height * width);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      flow[y * width + x] = c * dx - s * dy - dx;
      flow[height * width + y * width + x] = s * dx + c * dy - dy;
    }
  return flow;
}

// Random affine displacement A (x - c) + b rescaled so its maximum norm on
// the grid equals `magnitude`.
inline std::vector<double> affine_flow(double magnitude, Rng& rng, std::size_t height,
                                       std::size_t width) {
  double a[4], b[2];
  for (double& v : a) v = rng.uniform(-1.0, 1.0);
  for (double& v : b) v = rng.uniform(-1.0, 1.0) * std::max(height, width) / 4.0;
  const double cx = (static_cast<double>(width) - 1) / 2, cy = (static_cast<double>(height) - 1) / 2;
  std::vector<double> flow(2 * height * width);
  double peak = 0;
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double u = a[0] * dx + a[1] * dy + b[0], v = a[2] * dx + a[3] * dy + b[1];
      flow[y * width + x] = u;
      flow[height * width + y * width + x] = v;
      peak = std::max(peak, std::hypot(u, v));
    }
  const double k = peak > 0 ? magnitude / peak : 0.0;
  for (double& v : flow) v *= k;
  return flow;
}

inline std::vector<double> gen_flow(FlowKind kind, double magnitude, std::size_t height,
                                    std::size_t width, Rng& rng) {
  if (magnitude < 0) throw ContractError("gen_flow: magnitude must be non-negative");
  switch (kind) {
    case FlowKind::kTranslation:
      return translation_flow(magnitude, rng.uniform(0.0, 2 * std::numbers::pi), height, width);
    case FlowKind::kRotation:
      return rotation_flow(magnitude, rng.uniform() < 0.5, height, width);
    case FlowKind::kAffine:
      return affine_flow(magnitude, rng, height, width);
  }
  throw ContractError("gen_flow: unknown kind");
}

// Bilinear sample of a [H,W] plane with coordinates clamped to the grid.
inline double sample_bilinear(const double* plane, std::size_t height, std::size_t width,
                              double x, double y) {
  x = std::clamp(x, 0.0, static_cast<double>(width - 1));
  y = std::clamp(y, 0.0, static_cast<double>(height - 1));
  const std::size_t x0 = static_cast<std::size_t>(x), y0 = static_cast<std::size_t>(y);
  const std::size_t x1 = std::min(x0 + 1, width - 1), y1 = std::min(y0 + 1, height - 1);
  const double ax = x - static_cast<double>(x0), ay = y - static_cast<double>(y0);
  return (1 - ay) * ((1 - ax) * plane[y0 * width + x0] + ax * plane[y0 * width + x1]) +
         ay * ((1 - ax) * plane[y1 * width + x0] + ax * plane[y1 * width + x1]);
}

// Builds image2 by inverse-warping image1 along `flow`; pixels whose source
// coordinate leaves [0, W-1] x [0, H-1] are marked invalid (and filled by
// edge clamping).
inline SynthSample warp_sample(std::uint64_t seed, Difficulty difficulty, std::size_t height,
                               std::size_t width, std::size_t channels, std::vector<double> image1,
                               std::vector<double> flow) {
  SynthSample s;
  s.seed = seed;
  s.difficulty = difficulty;
  s.height = height;
  s.width = width;
  s.channels = channels;
  s.image1 = std::move(image1);
  s.flow = std::move(flow);
  s.image2.resize(s.image1.size());
  s.valid.resize(height * width);
  const std::size_t plane = height * width;
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t i = y * width + x;
      const double sx = static_cast<double>(x) + s.flow[i];
      const double sy = static_cast<double>(y) + s.flow[plane + i];
      s.valid[i] = (sx >= 0 && sx <= static_cast<double>(width - 1) && sy >= 0 &&
                    sy <= static_cast<double>(height - 1))
                       ? 1
                       : 0;
      for (std::size_t c = 0; c < channels; ++c)
        s.image2[c * plane + i] = sample_bilinear(s.image1.data() + c * plane, height, width, sx, sy);
    }
  return s;
}

// easy: translation with magnitude ~ U(easy_min, easy_max) feature pixels;
// hard: rotation or affine with magnitude ~ U(hard_min, hard_max).
// `magnitude_override` (feature pixels) replaces the drawn magnitude.
inline SynthSample make_sample(std::uint64_t seed, Difficulty difficulty, const SynthConfig& cfg = {},
                               std::optional<double> magnitude_override = std::nullopt) {
  std::vector<double> image1;
  for (std::size_t c = 0; c < cfg.channels; ++c) {
    auto plane = gen_texture(Rng::stream(seed, "channel", {c}).next_u64(), cfg.height, cfg.width,
                             cfg.octaves);
    image1.insert(image1.end(), plane.begin(), plane.end());
  }
  Rng rng = Rng::stream(seed, "flow");
  const double s = static_cast<double>(cfg.downscale);
  FlowKind kind = FlowKind::kTranslation;
  double magnitude = 0;
  if (difficulty == Difficulty::kEasy) {
    magnitude = rng.uniform(cfg.easy_min, cfg.easy_max);
  } else {
    kind = rng.uniform() < 0.5 ? FlowKind::kRotation : FlowKind::kAffine;
    magnitude = rng.uniform(cfg.hard_min, cfg.hard_max);
  }
  if (magnitude_override) magnitude = *magnitude_override;
  auto flow = gen_flow(kind, magnitude * s, cfg.height, cfg.width, rng);
  return warp_sample(seed, difficulty, cfg.height, cfg.width, cfg.channels, std::move(image1),
                     std::move(flow));
}

struct Dataset {
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<SynthSample> samples;

  std::size_t size() const { return samples.size(); }

  static constexpr char kMagic[9] = "DYNFLOWD";
  static constexpr std::uint32_t kVersion = 1;

  // Layout (little-endian):
  //   8 bytes magic "DYNFLOWD", u32 version (1), u32 count, u32 H, u32 W, u32 C
  //   per sample: u64 seed, u8 difficulty (0 easy, 1 hard),
  //               f64 image1[C*H*W], f64 image2[C*H*W], f64 flow[2*H*W],
  //               u8 valid[H*W]
  void write(std::ostream& os) const {
    os.write(kMagic, 8);
    binio::put_u32(os, kVersion);
    binio::put_u32(os, static_cast<std::uint32_t>(samples.size()));
    binio::put_u32(os, static_cast<std::uint32_t>(height));
    binio::put_u32(os, static_cast<std::uint32_t>(width));
    binio::put_u32(os, static_cast<std::uint32_t>(channels));
    for (const auto& s : samples) {
      binio::put_u64(os, s.seed);
      binio::put_u8(os, static_cast<std::uint8_t>(s.difficulty));
      for (double v : s.image1) binio::put_f64(os, v);
      for (double v : s.image2) binio::put_f64(os, v);
      for (double v : s.flow) binio::put_f64(os, v);
      for (std::uint8_t v : s.valid) binio::put_u8(os, v);
    }
  }

  static Dataset read(std::istream& is) {
    if (binio::get_bytes(is, 8) != std::string(kMagic, 8)) throw FormatError("dataset: bad magic");
    const std::uint32_t version = binio::get_u32(is);
    if (version != kVersion) throw FormatError("dataset: unsupported version " + std::to_string(version));
    Dataset d;
    const std::uint32_t count = binio::get_u32(is);
    d.height = binio::get_u32(is);
    d.width = binio::get_u32(is);
    d.channels = binio::get_u32(is);
    const std::size_t plane = d.height * d.width;
    for (std::uint32_t k = 0; k < count; ++k) {
      SynthSample s;
      s.seed = binio::get_u64(is);
      const std::uint8_t diff = binio::get_u8(is);
      if (diff > 1) throw FormatError("dataset: bad difficulty byte");
      s.difficulty = static_cast<Difficulty>(diff);
      s.height = d.height;
      s.width = d.width;
      s.channels = d.channels;
      s.image1.resize(d.channels * plane);
      s.image2.resize(d.channels * plane);
      s.flow.resize(2 * plane);
      s.valid.resize(plane);
      for (double& v : s.image1) v = binio::get_f64(is);
      for (double& v : s.image2) v = binio::get_f64(is);
      for (double& v : s.flow) v = binio::get_f64(is);
      for (std::uint8_t& v : s.valid) v = binio::get_u8(is);
      d.samples.push_back(std::move(s));
    }
    return d;
  }

  std::string to_bytes() const {
    std::ostringstream os(std::ios::binary);
    write(os);
    return os.str();
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open '" + path + "' for writing");
    write(os);
    if (!os) throw FormatError("write failed for '" + path + "'");
  }

  static Dataset load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open dataset '" + path + "'");
    return read(is);
  }
};

// Sample i draws its own seed and difficulty from the (seed, i) substream.
inline Dataset generate_dataset(std::size_t count, std::uint64_t seed, const SynthConfig& cfg = {}) {
  Dataset d;
  d.height = cfg.height;
  d.width = cfg.width;
  d.channels = cfg.channels;
  d.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = Rng::stream(seed, "data", {i});
    const std::uint64_t sample_seed = rng.next_u64();
    const Difficulty diff = rng.uniform() < cfg.hard_fraction ? Difficulty::kHard : Difficulty::kEasy;
    d.samples.push_back(make_sample(sample_seed, diff, cfg));
  }
  return d;
}

}  // namespace dynflow
