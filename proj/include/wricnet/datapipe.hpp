#pragma once

// Multi-resolution dataset construction: planar images, bicubic/nearest
// downsampling, grid tiling, paired augmentation, min-max normalization and a
// deterministic synthetic change generator.

#include "wricnet/random.hpp"
#include "wricnet/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace wricnet {

/// Planar (channel-major) image.
template <class V> struct Image {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<V> data;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, V fill = V{})
      : channels(c), height(h), width(w), data(c * h * w, fill) {}

  V& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  const V& at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * height + y) * width + x];
  }
  bool same_dims(std::size_t h, std::size_t w) const { return height == h && width == w; }
  bool operator==(const Image&) const = default;
};

using ImageF = Image<float>;
using Mask = Image<std::uint8_t>; // one channel, values {0, 1}

enum class Tier { HR, MR, LR };

inline constexpr std::array<Tier, 3> kAllTiers{Tier::HR, Tier::MR, Tier::LR};

inline std::size_t tier_divisor(Tier t) {
  switch (t) {
  case Tier::HR: return 1;
  case Tier::MR: return 2;
  case Tier::LR: return 4;
  }
  return 1;
}

inline const char* tier_name(Tier t) {
  switch (t) {
  case Tier::HR: return "HR";
  case Tier::MR: return "MR";
  case Tier::LR: return "LR";
  }
  return "?";
}

inline Tier parse_tier(const std::string& s) {
  for (Tier t : kAllTiers)
    if (s == tier_name(t)) return t;
  throw std::invalid_argument("unknown resolution tier: " + s);
}

/// One co-registered pair plus its label, before tiling.
struct ImageTriple {
  std::string id;
  ImageF t1, t2;
  Mask gt;
};

struct TilePair {
  ImageF t1, t2;
  Mask gt;
  std::string source_id;
  std::size_t tile_row = 0, tile_col = 0;
  Tier tier = Tier::HR;

  std::string tile_id() const {
    return std::string(tier_name(tier)) + "/" + source_id + "_" + std::to_string(tile_row) + "_" +
           std::to_string(tile_col);
  }

  void validate() const {
    if (t1.channels != 3 || t2.channels != 3 || gt.channels != 1)
      throw std::invalid_argument("tile pair: expected 3-channel images and a 1-channel mask");
    if (!t2.same_dims(t1.height, t1.width) || !gt.same_dims(t1.height, t1.width))
      throw std::invalid_argument("tile pair: t1, t2 and gt must share spatial dims");
    for (auto v : gt.data)
      if (v > 1) throw std::invalid_argument("tile pair: ground truth must be binary");
  }
};

// ---------------------------------------------------------------------------
// Resampling

/// Catmull-Rom cubic kernel (a = -0.5).
inline double cubic_weight(double t) {
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

namespace detail {

inline void check_divisible(std::size_t h, std::size_t w, std::size_t divisor, const char* op) {
  if (divisor == 0 || h % divisor != 0 || w % divisor != 0)
    throw std::invalid_argument(std::string(op) + ": " + std::to_string(h) + "x" +
                                std::to_string(w) + " not divisible by " +
                                std::to_string(divisor));
}

// Taps and weights for one output coordinate of a separable cubic pass.
struct CubicTaps {
  std::array<std::size_t, 4> index;
  std::array<double, 4> weight;
};

inline std::vector<CubicTaps> cubic_taps(std::size_t in, std::size_t out, std::size_t divisor) {
  std::vector<CubicTaps> taps(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double center = (static_cast<double>(o) + 0.5) * static_cast<double>(divisor) - 0.5;
    const double base = std::floor(center);
    const double frac = center - base;
    for (int k = 0; k < 4; ++k) {
      const long idx = static_cast<long>(base) + k - 1;
      taps[o].index[k] = static_cast<std::size_t>(std::clamp<long>(idx, 0, static_cast<long>(in) - 1));
      taps[o].weight[k] = cubic_weight(frac - static_cast<double>(k - 1));
    }
  }
  return taps;
}

} // namespace detail

/// Bicubic downsampling by an integer divisor with half-pixel centers and
/// replicated borders; output clamped to [0, 1].
inline ImageF resample_bicubic(const ImageF& img, std::size_t divisor) {
  detail::check_divisible(img.height, img.width, divisor, "resample_bicubic");
  const std::size_t oh = img.height / divisor, ow = img.width / divisor;
  const auto ty = detail::cubic_taps(img.height, oh, divisor);
  const auto tx = detail::cubic_taps(img.width, ow, divisor);
  ImageF out(img.channels, oh, ow);
  std::vector<double> rows(img.height * ow);
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double acc = 0;
        for (int k = 0; k < 4; ++k) acc += tx[x].weight[k] * img.at(c, y, tx[x].index[k]);
        rows[y * ow + x] = acc;
      }
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double acc = 0;
        for (int k = 0; k < 4; ++k) acc += ty[y].weight[k] * rows[ty[y].index[k] * ow + x];
        out.at(c, y, x) = static_cast<float>(std::clamp(acc, 0.0, 1.0));
      }
  }
  return out;
}

/// Nearest-neighbour downsampling; equidistant ties go to the top-left source pixel.
template <class V> Image<V> resample_nearest(const Image<V>& img, std::size_t divisor) {
  detail::check_divisible(img.height, img.width, divisor, "resample_nearest");
  const std::size_t oh = img.height / divisor, ow = img.width / divisor;
  // center = (o + 0.5) * d - 0.5; nearest with ties down = ceil(center - 0.5).
  const auto pick = [divisor](std::size_t o) {
    return static_cast<std::size_t>(
        std::ceil((static_cast<double>(o) + 0.5) * static_cast<double>(divisor) - 1.0));
  };
  Image<V> out(img.channels, oh, ow);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) out.at(c, y, x) = img.at(c, pick(y), pick(x));
  return out;
}

// ---------------------------------------------------------------------------
// Tiling

template <class V> struct Tile {
  Image<V> image;
  std::size_t row = 0, col = 0;
};

template <class V>
Image<V> crop(const Image<V>& img, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  Image<V> out(img.channels, h, w);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(&img.at(c, y0 + y, x0), w, &out.at(c, y, 0));
  return out;
}

/// Sliding-window crops in row-major grid order.
template <class V>
std::vector<Tile<V>> tile(const Image<V>& img, std::size_t window = 256, std::size_t stride = 256) {
  if (window == 0 || stride == 0) throw std::invalid_argument("tile: window and stride must be positive");
  if (img.height < window || img.width < window || (img.height - window) % stride != 0 ||
      (img.width - window) % stride != 0)
    throw std::invalid_argument("tile: " + std::to_string(img.height) + "x" +
                                std::to_string(img.width) + " is not covered by window " +
                                std::to_string(window) + " stride " + std::to_string(stride));
  std::vector<Tile<V>> tiles;
  for (std::size_t r = 0, y = 0; y + window <= img.height; ++r, y += stride)
    for (std::size_t c = 0, x = 0; x + window <= img.width; ++c, x += stride)
      tiles.push_back({crop(img, y, x, window, window), r, c});
  return tiles;
}

/// Downsamples a triple to a tier and cuts it into window x window tile pairs.
inline std::vector<TilePair> make_tier_tiles(const ImageTriple& src, Tier tier, std::size_t window) {
  const std::size_t d = tier_divisor(tier);
  const ImageF t1 = d == 1 ? src.t1 : resample_bicubic(src.t1, d);
  const ImageF t2 = d == 1 ? src.t2 : resample_bicubic(src.t2, d);
  const Mask gt = d == 1 ? src.gt : resample_nearest(src.gt, d);
  auto a = tile(t1, window, window), b = tile(t2, window, window);
  auto m = tile(gt, window, window);
  std::vector<TilePair> out;
  out.reserve(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    TilePair tp;
    tp.t1 = std::move(a[i].image);
    tp.t2 = std::move(b[i].image);
    tp.gt = std::move(m[i].image);
    tp.source_id = src.id;
    tp.tile_row = a[i].row;
    tp.tile_col = a[i].col;
    tp.tier = tier;
    out.push_back(std::move(tp));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

enum class Augmentation { identity, flip_up_down, flip_left_right, rotate90_ccw };

template <class V> Image<V> flip_up_down(const Image<V>& img) {
  Image<V> out(img.channels, img.height, img.width);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      std::copy_n(&img.at(c, img.height - 1 - y, 0), img.width, &out.at(c, y, 0));
  return out;
}

template <class V> Image<V> flip_left_right(const Image<V>& img) {
  Image<V> out(img.channels, img.height, img.width);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
  return out;
}

/// 90 degrees counter-clockwise: source (r, c) lands at (W-1-c, r).
template <class V> Image<V> rotate90_ccw(const Image<V>& img) {
  Image<V> out(img.channels, img.width, img.height);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) out.at(c, img.width - 1 - x, y) = img.at(c, y, x);
  return out;
}

template <class V> Image<V> apply_augmentation(const Image<V>& img, Augmentation a) {
  switch (a) {
  case Augmentation::flip_up_down: return flip_up_down(img);
  case Augmentation::flip_left_right: return flip_left_right(img);
  case Augmentation::rotate90_ccw: return rotate90_ccw(img);
  case Augmentation::identity: break;
  }
  return img;
}

inline TilePair apply_augmentation(const TilePair& tp, Augmentation a) {
  TilePair out = tp;
  out.t1 = apply_augmentation(tp.t1, a);
  out.t2 = apply_augmentation(tp.t2, a);
  out.gt = apply_augmentation(tp.gt, a);
  return out;
}

/// One transform drawn uniformly from {identity, up-down, left-right, 90 CCW},
/// applied identically to both images and the mask.
inline TilePair augment(const TilePair& tp, Rng& rng) {
  if (tp.t1.height != tp.t1.width) throw std::invalid_argument("augment: tiles must be square");
  return apply_augmentation(tp, static_cast<Augmentation>(rng.below(4)));
}

// ---------------------------------------------------------------------------
// Normalization

/// Per-image min-max scaling to [0, 1]; a constant image maps to zeros.
inline ImageF normalize(const ImageF& img) {
  ImageF out(img.channels, img.height, img.width, 0.0f);
  if (img.data.empty()) return out;
  const auto [lo, hi] = std::minmax_element(img.data.begin(), img.data.end());
  const double mn = *lo, mx = *hi;
  if (!(mx > mn)) return out;
  for (std::size_t i = 0; i < img.data.size(); ++i)
    out.data[i] = static_cast<float>((img.data[i] - mn) / (mx - mn));
  return out;
}

template <class V> ImageF to_unit_float(const Image<V>& img, double full_scale = 255.0) {
  ImageF out(img.channels, img.height, img.width);
  for (std::size_t i = 0; i < img.data.size(); ++i)
    out.data[i] = static_cast<float>(static_cast<double>(img.data[i]) / full_scale);
  return out;
}

inline Image<std::uint8_t> to_u8(const ImageF& img) {
  Image<std::uint8_t> out(img.channels, img.height, img.width);
  for (std::size_t i = 0; i < img.data.size(); ++i)
    out.data[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.data[i], 0.0f, 1.0f) * 255.0f));
  return out;
}

// ---------------------------------------------------------------------------
// Tensor conversion

template <class T> Tensor<T> image_to_tensor(const ImageF& img) {
  std::vector<T> v(img.data.begin(), img.data.end());
  return Tensor<T>({1, img.channels, img.height, img.width}, std::move(v));
}

/// Two-channel one-hot map: channel 0 = non-change, channel 1 = change.
template <class T> Tensor<T> mask_to_onehot(const Mask& m) {
  const std::size_t P = m.height * m.width;
  std::vector<T> v(2 * P);
  for (std::size_t i = 0; i < P; ++i) {
    v[i] = m.data[i] ? T(0) : T(1);
    v[P + i] = m.data[i] ? T(1) : T(0);
  }
  return Tensor<T>({1, 2, m.height, m.width}, std::move(v));
}

/// Per-pixel argmax over a (1, 2, H, W) probability map; ties favour non-change.
template <class T> Mask argmax_mask(const Tensor<T>& prob) {
  const Shape s = prob.shape();
  if (s.n != 1 || s.c != 2) throw ShapeError("argmax_mask: expected a 1x2xHxW map");
  Mask m(1, s.h, s.w);
  const auto d = prob.data();
  const std::size_t P = s.plane();
  for (std::size_t i = 0; i < P; ++i) m.data[i] = d[P + i] > d[i] ? 1 : 0;
  return m;
}

// ---------------------------------------------------------------------------
// Synthetic change pairs

struct SynthOptions {
  std::size_t min_shapes = 1, max_shapes = 6;
  std::size_t min_extent = 4;          // pixels
  double max_extent_fraction = 0.5;    // of image size
  double min_change_fraction = 0.02, max_change_fraction = 0.20;
  double noise = 0.02;                 // independent per-image sensor noise
};

namespace detail {

inline ImageF synth_background(std::size_t size, Rng& rng) {
  ImageF bg(3, size, size);
  struct Wave {
    double fx, fy, phase, amp;
  };
  for (std::size_t c = 0; c < 3; ++c) {
    const double base = rng.uniform(0.25, 0.6);
    std::array<Wave, 4> waves{};
    for (auto& w : waves)
      w = {rng.uniform(0.5, 6.0), rng.uniform(0.5, 6.0), rng.uniform(0.0, 6.283185307179586),
           rng.uniform(0.03, 0.08)};
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        double v = base;
        const double u = static_cast<double>(x) / static_cast<double>(size);
        const double t = static_cast<double>(y) / static_cast<double>(size);
        for (const auto& w : waves) v += w.amp * std::sin(6.283185307179586 * (w.fx * u + w.fy * t) + w.phase);
        bg.at(c, y, x) = static_cast<float>(v);
      }
  }
  return bg;
}

} // namespace detail

/// Deterministic stand-in for a bitemporal change dataset: a textured
/// background shared by both dates, rectangles and discs painted into the
/// second date only; the mask is exactly the painted footprint.
inline ImageTriple synth_pair(std::size_t size, std::uint64_t seed, const SynthOptions& opt = {}) {
  if (size == 0 || size % 16 != 0) throw std::invalid_argument("synth_pair: size must be a multiple of 16");
  Rng rng(seed);
  ImageTriple tri;
  const ImageF bg = detail::synth_background(size, rng);
  const double max_extent = std::max<double>(static_cast<double>(opt.min_extent),
                                             opt.max_extent_fraction * static_cast<double>(size));
  const double total = static_cast<double>(size * size);

  Mask gt;
  ImageF painted;
  for (int attempt = 0;; ++attempt) {
    gt = Mask(1, size, size, 0);
    painted = bg;
    const std::size_t n_shapes =
        opt.min_shapes + rng.below(opt.max_shapes - opt.min_shapes + 1);
    for (std::size_t s = 0; s < n_shapes; ++s) {
      // Log-uniform extents so small and large changes are both common.
      const double lmin = std::log(static_cast<double>(opt.min_extent)), lmax = std::log(max_extent);
      const auto extent = [&] { return std::exp(rng.uniform(lmin, lmax)); };
      const bool disc = rng.below(2) == 1;
      const std::array<double, 3> color{rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0),
                                        rng.uniform(0.0, 1.0)};
      const double ey = extent(), ex = disc ? ey : extent();
      const double cy = rng.uniform(0.0, static_cast<double>(size));
      const double cx = rng.uniform(0.0, static_cast<double>(size));
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
          const bool inside = disc ? (dx * dx + dy * dy <= 0.25 * ey * ey)
                                   : (std::abs(dy) <= 0.5 * ey && std::abs(dx) <= 0.5 * ex);
          if (!inside) continue;
          gt.at(0, y, x) = 1;
          for (std::size_t c = 0; c < 3; ++c) painted.at(c, y, x) = static_cast<float>(color[c]);
        }
    }
    std::size_t changed = 0;
    for (auto v : gt.data) changed += v;
    const double frac = static_cast<double>(changed) / total;
    if ((frac >= opt.min_change_fraction && frac <= opt.max_change_fraction) || attempt >= 1000) break;
  }

  tri.t1 = bg;
  tri.t2 = painted;
  for (auto* img : {&tri.t1, &tri.t2})
    for (auto& v : img->data)
      v = std::clamp(static_cast<float>(v + opt.noise * (rng.uniform() * 2.0 - 1.0)), 0.0f, 1.0f);
  tri.gt = std::move(gt);
  return tri;
}

inline std::vector<ImageTriple> synth_dataset(std::size_t n_pairs, std::size_t size,
                                              std::uint64_t seed, const SynthOptions& opt = {}) {
  std::vector<ImageTriple> out;
  out.reserve(n_pairs);
  for (std::size_t i = 0; i < n_pairs; ++i) {
    ImageTriple t = synth_pair(size, derive_seed({seed, i}), opt);
    t.id = "synth" + std::to_string(i);
    out.push_back(std::move(t));
  }
  return out;
}

} // namespace wricnet
