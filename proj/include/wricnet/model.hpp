#pragma once

// End-to-end change detection network: a shallow multi-scale path (stem ->
// WRI module -> projection), a deep multi-scale path (WRC), one weighted
// scale gate per path, a densely connected metric head, and four auxiliary
// heads for the deep-supervision losses.

#include "wricnet/coder.hpp"

#include <array>
#include <optional>
#include <string_view>

namespace wricnet {

enum class Variant {
  proposed,
  no_multi_channel,
  no_weighted_class,
  no_weighted_scale_block,
  no_inception_v2,
  no_rich_scale_block,
  no_rich_scale_block_v2,
};

inline constexpr std::array<Variant, 7> kAllVariants{
    Variant::proposed,           Variant::no_multi_channel,        Variant::no_weighted_class,
    Variant::no_weighted_scale_block, Variant::no_inception_v2, Variant::no_rich_scale_block,
    Variant::no_rich_scale_block_v2};

inline std::string_view variant_name(Variant v) {
  switch (v) {
  case Variant::proposed: return "proposed";
  case Variant::no_multi_channel: return "no_multi_channel";
  case Variant::no_weighted_class: return "no_weighted_class";
  case Variant::no_weighted_scale_block: return "no_weighted_scale_block";
  case Variant::no_inception_v2: return "no_inception_v2";
  case Variant::no_rich_scale_block: return "no_rich_scale_block";
  case Variant::no_rich_scale_block_v2: return "no_rich_scale_block_v2";
  }
  return "?";
}

inline Variant parse_variant(std::string_view name) {
  for (Variant v : kAllVariants)
    if (variant_name(v) == name) return v;
  throw std::invalid_argument("unknown model variant: " + std::string(name));
}

/// Parameter counts reported for each ablation row (no_weighted_class shares
/// the proposed architecture).
inline std::size_t reference_param_count(Variant v) {
  switch (v) {
  case Variant::proposed: return 2'902'357;
  case Variant::no_multi_channel: return 2'896'932;
  case Variant::no_weighted_class: return 2'902'357;
  case Variant::no_weighted_scale_block: return 2'591'077;
  case Variant::no_inception_v2: return 3'833'813;
  case Variant::no_rich_scale_block: return 3'706'491;
  case Variant::no_rich_scale_block_v2: return 2'202'553;
  }
  return 0;
}

struct ModelConfig {
  std::size_t input_h = 256, input_w = 256;
  double width_scale = 1.0;
  Variant variant = Variant::proposed;
  std::size_t rich_scale_groups = 4;
  std::size_t wri_branches = 4;
  std::size_t wri_width = 256;   // before width scaling
  std::size_t metric_depth = 3;
  std::size_t metric_growth = 16; // before width scaling

  static constexpr std::size_t kImageChannels = 3;
  static constexpr std::size_t kPairChannels = 6;
  static constexpr std::size_t kClasses = 2;

  void validate() const {
    if (input_h == 0 || input_w == 0 || input_h % 16 != 0 || input_w % 16 != 0)
      throw std::invalid_argument("model input size must be a positive multiple of 16");
    if (!(width_scale > 0.0)) throw std::invalid_argument("width_scale must be positive");
    if (rich_scale_groups == 0 || wri_branches == 0 || metric_depth == 0)
      throw std::invalid_argument("groups, branches and metric depth must be positive");
    const std::size_t unit = wri_branches * rich_scale_groups;
    if (scaled_wri_width() % unit != 0 || scaled_wri_width() == 0)
      throw std::invalid_argument("wri width must be a positive multiple of branches*groups");
  }

  bool gated() const { return variant != Variant::no_weighted_scale_block; }
  bool siamese() const { return variant == Variant::no_multi_channel; }
  bool weighted_class() const { return variant != Variant::no_weighted_class; }

  RichScaleKind rich_kind() const {
    if (variant == Variant::no_rich_scale_block) return RichScaleKind::single_conv;
    if (variant == Variant::no_rich_scale_block_v2) return RichScaleKind::hierarchical;
    return RichScaleKind::improved;
  }

  std::size_t scaled_wri_width() const {
    const double unit = static_cast<double>(wri_branches * rich_scale_groups);
    const double v = std::round(static_cast<double>(wri_width) * width_scale / unit) * unit;
    return std::max<std::size_t>(static_cast<std::size_t>(unit), static_cast<std::size_t>(v));
  }

  std::size_t scaled_metric_growth() const {
    return std::max<std::size_t>(
        2, static_cast<std::size_t>(std::round(static_cast<double>(metric_growth) * width_scale)));
  }

  WRISpec wri_spec() const {
    WRISpec s;
    s.in_channels = scaled_wri_width();
    s.branch_width = s.in_channels / wri_branches;
    s.branches = wri_branches;
    s.rich_groups = rich_scale_groups;
    s.rich_kind = rich_kind();
    s.gated = gated();
    s.chained = variant != Variant::no_inception_v2;
    return s;
  }

  WRCSpec wrc_spec() const {
    WRCSpec s = WRCSpec::scaled(width_scale, kPairChannels);
    s.rich_groups = rich_scale_groups;
    s.rich_kind = rich_kind();
    s.gated = gated();
    s.external_entry = siamese();
    return s;
  }
};

/// Closed-form trainable-scalar count; allocates nothing.
inline std::size_t count_params(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t C6 = ModelConfig::kPairChannels, C3 = ModelConfig::kImageChannels;
  const std::size_t cw = cfg.scaled_wri_width();
  std::size_t n = 0;
  if (cfg.siamese()) {
    n += conv1_relu(C3, cw / 2).param_count();
    n += conv3(C3, cfg.wrc_spec().entry_width() / 2).param_count();
  } else {
    n += conv1_relu(C6, cw).param_count();
  }
  n += cfg.wri_spec().param_count();
  n += conv1_linear(cw, C6).param_count();
  n += cfg.wrc_spec().param_count();
  const std::size_t heads = cfg.gated() ? 4 : 2;
  n += heads * conv1_linear(C6, ModelConfig::kClasses).param_count();
  if (cfg.gated()) n += 2 * WeightedScaleSpec{C6}.param_count();
  const std::size_t g = cfg.scaled_metric_growth();
  std::size_t width = 2 * C6;
  for (std::size_t i = 0; i < cfg.metric_depth; ++i) {
    n += conv3(width, g).param_count();
    width += g;
  }
  n += conv1_linear(width, ModelConfig::kClasses).param_count();
  return n;
}

template <class T> struct ModelOutputs {
  Tensor<T> ri, wri, ed, wed, fu;

  std::array<const Tensor<T>*, 5> all() const { return {&ri, &wri, &ed, &wed, &fu}; }
};

template <class T> class WRICNet {
public:
  explicit WRICNet(const ModelConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg.validate();
    Rng rng(seed);
    const std::size_t C6 = ModelConfig::kPairChannels, C3 = ModelConfig::kImageChannels;
    const std::size_t cw = cfg.scaled_wri_width();
    const WRCSpec wrc = cfg.wrc_spec();
    if (cfg.siamese()) {
      stem_ = ConvBlock<T>(conv1_relu(C3, cw / 2), "siamese.wri_stem", store_, rng);
      wrc_entry_ = ConvBlock<T>(conv3(C3, wrc.entry_width() / 2), "siamese.wrc_entry", store_, rng);
    } else {
      stem_ = ConvBlock<T>(conv1_relu(C6, cw), "wri_stem", store_, rng);
    }
    wri_ = WRIModule<T>(cfg.wri_spec(), "wri", store_, rng);
    smf_proj_ = ConvBlock<T>(conv1_linear(cw, C6), "smf_proj", store_, rng);
    wrc_ = WRCoder<T>(wrc, "wrc", store_, rng);
    if (cfg.gated()) {
      gate_smf_ = WeightedScaleBlock<T>(WeightedScaleSpec{C6}, "wsb_smf", store_, rng);
      gate_dmf_ = WeightedScaleBlock<T>(WeightedScaleSpec{C6}, "wsb_dmf", store_, rng);
    }
    const auto head = conv1_linear(C6, ModelConfig::kClasses);
    head_ri_ = ConvBlock<T>(head, "head_ri", store_, rng);
    if (cfg.gated()) head_wri_ = ConvBlock<T>(head, "head_wri", store_, rng);
    head_ed_ = ConvBlock<T>(head, "head_ed", store_, rng);
    if (cfg.gated()) head_wed_ = ConvBlock<T>(head, "head_wed", store_, rng);
    const std::size_t g = cfg.scaled_metric_growth();
    std::size_t width = 2 * C6;
    for (std::size_t i = 0; i < cfg.metric_depth; ++i) {
      metric_.emplace_back(conv3(width, g), "metric.dense" + std::to_string(i), store_, rng);
      width += g;
    }
    metric_out_ = ConvBlock<T>(conv1_linear(width, ModelConfig::kClasses), "metric.out", store_, rng);
  }

  ModelOutputs<T> forward(const Tensor<T>& t1, const Tensor<T>& t2) const {
    detail::require_same_shape(t1, t2, "forward(t1, t2)");
    const Shape s = t1.shape();
    if (s.c != ModelConfig::kImageChannels)
      throw ShapeError("forward: images must have 3 channels, got " + s.str());
    if (s.h != cfg_.input_h || s.w != cfg_.input_w)
      throw ShapeError("forward: model built for " + std::to_string(cfg_.input_h) + "x" +
                       std::to_string(cfg_.input_w) + " inputs, got " + s.str());

    Tensor<T> smf_in, wrc_in;
    if (cfg_.siamese()) {
      smf_in = concat_channels<T>({stem_(t1), stem_(t2)});
      wrc_in = concat_channels<T>({wrc_entry_(t1), wrc_entry_(t2)});
    } else {
      const Tensor<T> pair = concat_channels<T>({t1, t2});
      smf_in = stem_(pair);
      wrc_in = pair;
    }
    const Tensor<T> smf = smf_proj_(wri_(smf_in).fused);
    const Tensor<T> dmf = wrc_(wrc_in).out;

    ModelOutputs<T> out;
    out.ri = softmax_channels(head_ri_(smf));
    out.ed = softmax_channels(head_ed_(dmf));
    Tensor<T> gsmf = smf, gdmf = dmf;
    if (cfg_.gated()) {
      gsmf = gate_smf_(smf);
      gdmf = gate_dmf_(dmf);
      out.wri = softmax_channels(head_wri_(gsmf));
      out.wed = softmax_channels(head_wed_(gdmf));
    } else {
      out.wri = out.ri;
      out.wed = out.ed;
    }
    std::vector<Tensor<T>> dense{gsmf, gdmf};
    for (const auto& stage : metric_) dense.push_back(stage(concat_channels(dense)));
    out.fu = softmax_channels(metric_out_(concat_channels(dense)));
    return out;
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<T>& parameters() { return store_; }
  const ParameterStore<T>& parameters() const { return store_; }
  std::size_t parameter_count() const { return store_.scalar_count(); }
  const WRCoder<T>& coder() const { return wrc_; }
  const WRIModule<T>& inception() const { return wri_; }

private:
  ModelConfig cfg_;
  ParameterStore<T> store_;
  ConvBlock<T> stem_, wrc_entry_, smf_proj_;
  WRIModule<T> wri_;
  WRCoder<T> wrc_;
  WeightedScaleBlock<T> gate_smf_, gate_dmf_;
  ConvBlock<T> head_ri_, head_wri_, head_ed_, head_wed_;
  std::vector<ConvBlock<T>> metric_;
  ConvBlock<T> metric_out_;
};

} // namespace wricnet
