#pragma once

// Weighted rich-scale coder: a U-net-shaped encoder/decoder with rich-scale
// blocks, spatial self-attention at the bottleneck, transposed-conv
// upsampling and weighted-scale-gated skip connections.

#include "wricnet/blocks.hpp"

#include <array>

namespace wricnet {

struct SpatialAttentionSpec {
  std::size_t channels = 0;

  std::size_t key_dim() const { return std::max<std::size_t>(1, channels / 8); }

  std::size_t param_count() const {
    return 2 * conv1_linear(channels, key_dim()).param_count() +
           conv1_linear(channels, channels).param_count();
  }
};

/// Non-local self-attention over flattened spatial positions with a residual.
template <class T> class SpatialAttention {
public:
  SpatialAttention() = default;
  SpatialAttention(const SpatialAttentionSpec& spec, const std::string& name,
                   ParameterStore<T>& store, Rng& rng)
      : spec_(spec),
        query_(conv1_linear(spec.channels, spec.key_dim()), name + ".query", store, rng),
        key_(conv1_linear(spec.channels, spec.key_dim()), name + ".key", store, rng),
        value_(conv1_linear(spec.channels, spec.channels), name + ".value", store, rng) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    return add(x, attend(query_(x), key_(x), value_(x)));
  }

  /// Attention matrix of batch item n (P x P, row-major), for inspection.
  std::vector<T> attention_matrix(const Tensor<T>& x, std::size_t n = 0) const {
    NoGradGuard guard;
    const Tensor<T> q = query_(x), k = key_(x);
    const std::size_t d = spec_.key_dim(), P = x.shape().plane();
    return attention_weights<T>(q.data().subspan(n * d * P, d * P),
                                k.data().subspan(n * d * P, d * P), d, P);
  }

  const ConvBlock<T>& value_projection() const { return value_; }

private:
  SpatialAttentionSpec spec_;
  ConvBlock<T> query_, key_, value_;
};

struct WRCSpec {
  std::size_t in_channels = 6;
  std::array<std::size_t, 4> encoder_widths{32, 64, 128, 256};
  /// Last entry is forced to in_channels so output dims equal input dims.
  std::array<std::size_t, 4> decoder_widths{128, 64, 32, 6};
  std::size_t rich_groups = 4;
  RichScaleKind rich_kind = RichScaleKind::improved;
  bool gated = true;
  /// When set, the stage-1 widening conv lives outside the coder (siamese
  /// stem) and forward() receives an already widened tensor.
  bool external_entry = false;

  static WRCSpec scaled(double width_scale, std::size_t in_channels = 6) {
    WRCSpec s;
    s.in_channels = in_channels;
    const auto sc = [&](std::size_t base) {
      const double v = std::round(static_cast<double>(base) * width_scale / 4.0) * 4.0;
      return std::max<std::size_t>(4, static_cast<std::size_t>(v));
    };
    s.encoder_widths = {sc(32), sc(64), sc(128), sc(256)};
    s.decoder_widths = {sc(128), sc(64), sc(32), in_channels};
    return s;
  }

  RichScaleSpec rich(std::size_t width) const {
    return {width, effective_groups(width, rich_groups), rich_kind};
  }

  std::size_t entry_width() const { return encoder_widths[0]; }
  std::size_t skip_width(std::size_t up_stage) const { return encoder_widths[3 - up_stage]; }

  std::size_t param_count() const {
    std::size_t n = 0;
    std::size_t prev = in_channels;
    for (std::size_t k = 0; k < 4; ++k) {
      const std::size_t w = encoder_widths[k];
      if (k > 0 || !external_entry) n += conv3(prev, w).param_count();
      n += 2 * rich(w).param_count();
      prev = w;
    }
    n += SpatialAttentionSpec{prev}.param_count();
    for (std::size_t k = 0; k < 4; ++k) {
      const std::size_t w = decoder_widths[k];
      const std::size_t cat = w + skip_width(k);
      n += 4 * prev * w + w; // conv-transpose 2x2
      if (gated) n += WeightedScaleSpec{cat}.param_count();
      n += conv3(cat, w).param_count();
      n += 2 * rich(w).param_count();
      prev = w;
    }
    return n;
  }
};

template <class T> struct WRCOutput {
  Tensor<T> out;
  std::vector<Tensor<T>> skips;
  Tensor<T> bottleneck;
  std::vector<Tensor<T>> encoder_stages; // post-pool, one per down stage
  std::vector<Tensor<T>> decoder_stages;
};

template <class T> class WRCoder {
public:
  WRCoder() = default;
  WRCoder(const WRCSpec& spec, const std::string& name, ParameterStore<T>& store, Rng& rng)
      : spec_(spec) {
    std::size_t prev = spec.in_channels;
    for (std::size_t k = 0; k < 4; ++k) {
      const std::size_t w = spec.encoder_widths[k];
      const std::string sn = name + ".down" + std::to_string(k);
      Down d;
      if (k > 0 || !spec.external_entry) d.widen = ConvBlock<T>(conv3(prev, w), sn + ".widen", store, rng);
      d.rich1 = RichScaleBlock<T>(spec.rich(w), sn + ".rich1", store, rng);
      d.rich2 = RichScaleBlock<T>(spec.rich(w), sn + ".rich2", store, rng);
      down_.push_back(std::move(d));
      prev = w;
    }
    sam_ = SpatialAttention<T>(SpatialAttentionSpec{prev}, name + ".sam", store, rng);
    for (std::size_t k = 0; k < 4; ++k) {
      const std::size_t w = spec.decoder_widths[k];
      const std::size_t cat = w + spec.skip_width(k);
      const std::string sn = name + ".up" + std::to_string(k);
      Up u;
      const double limit = std::sqrt(6.0 / (4.0 * static_cast<double>(prev + w)));
      std::vector<T> tw(prev * w * 4);
      for (auto& v : tw) v = static_cast<T>(rng.uniform(-limit, limit));
      u.up_weight = store.add(sn + ".upconv.weight", {prev, w, 2, 2}, std::move(tw));
      u.up_bias = store.add(sn + ".upconv.bias", {1, w, 1, 1}, std::vector<T>(w, T(0)));
      if (spec.gated) u.gate = WeightedScaleBlock<T>(WeightedScaleSpec{cat}, sn + ".wsb", store, rng);
      u.fuse = ConvBlock<T>(conv3(cat, w), sn + ".fuse", store, rng);
      u.rich1 = RichScaleBlock<T>(spec.rich(w), sn + ".rich1", store, rng);
      u.rich2 = RichScaleBlock<T>(spec.rich(w), sn + ".rich2", store, rng);
      up_.push_back(std::move(u));
      prev = w;
    }
  }

  WRCOutput<T> operator()(const Tensor<T>& x) const {
    const Shape xs = x.shape();
    if (xs.h % 16 != 0 || xs.w % 16 != 0)
      throw ShapeError("wrc_forward: spatial dims must be divisible by 16, got " + xs.str());
    const std::size_t expect = spec_.external_entry ? spec_.entry_width() : spec_.in_channels;
    if (xs.c != expect)
      throw ShapeError("wrc_forward: expected " + std::to_string(expect) + " channels, got " +
                       std::to_string(xs.c));

    WRCOutput<T> res;
    Tensor<T> h = x;
    for (std::size_t k = 0; k < 4; ++k) {
      const Down& d = down_[k];
      if (k > 0 || !spec_.external_entry) h = d.widen(h);
      h = d.rich2(d.rich1(h));
      res.skips.push_back(h);
      h = maxpool2x2(h);
      res.encoder_stages.push_back(h);
    }
    h = sam_(h);
    res.bottleneck = h;
    for (std::size_t k = 0; k < 4; ++k) {
      const Up& u = up_[k];
      h = conv_transpose2d(h, u.up_weight, u.up_bias, 2);
      h = concat_channels<T>({h, res.skips[3 - k]});
      if (spec_.gated) h = u.gate(h);
      h = u.fuse(h);
      h = u.rich2(u.rich1(h));
      res.decoder_stages.push_back(h);
    }
    res.out = h;
    return res;
  }

  const WRCSpec& spec() const { return spec_; }
  const SpatialAttention<T>& attention() const { return sam_; }

private:
  struct Down {
    ConvBlock<T> widen;
    RichScaleBlock<T> rich1, rich2;
  };
  struct Up {
    Tensor<T> up_weight, up_bias;
    WeightedScaleBlock<T> gate;
    ConvBlock<T> fuse;
    RichScaleBlock<T> rich1, rich2;
  };

  WRCSpec spec_;
  std::vector<Down> down_;
  SpatialAttention<T> sam_;
  std::vector<Up> up_;
};

} // namespace wricnet
