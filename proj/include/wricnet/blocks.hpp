#pragma once

// Reusable differentiable blocks: plain conv blocks, the weighted scale block
// (attention gate), the rich-scale block and its ablation variants, and the
// weighted rich-scale inception (WRI) module.
//
// Every block comes as a pair: a *Spec value type with a closed-form
// param_count(), and a block class that allocates its tensors into a
// ParameterStore. The two paths are kept separate so counts can be checked
// against allocation.

#include "wricnet/ops.hpp"
#include "wricnet/random.hpp"

#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace wricnet {

template <class T> class ParameterStore {
public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
  };

  Tensor<T> add(const std::string& name, Shape shape, std::vector<T> init) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, Tensor<T>(shape, std::move(init), true)});
    return entries_.back().tensor;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  Tensor<T> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return entries_[it->second].tensor;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

enum class Activation { none, relu, sigmoid };

template <class T> Tensor<T> activate(const Tensor<T>& x, Activation a) {
  switch (a) {
  case Activation::relu: return relu(x);
  case Activation::sigmoid: return sigmoid(x);
  case Activation::none: break;
  }
  return x;
}

/// Largest divisor of `channels` not exceeding `preferred`; lets narrow or odd
/// widths (e.g. 2 or 6 channels) still host a grouped block.
inline std::size_t effective_groups(std::size_t channels, std::size_t preferred) {
  for (std::size_t s = std::min(channels, preferred); s > 1; --s)
    if (channels % s == 0) return s;
  return 1;
}

// ---------------------------------------------------------------------------
// Convolution block

struct ConvSpec {
  std::size_t in = 0, out = 0, kernel = 1;
  Activation act = Activation::relu;

  std::size_t param_count() const { return kernel * kernel * in * out + out; }
};

enum class Init { glorot_uniform, ones };

template <class T> class ConvBlock {
public:
  ConvBlock() = default;
  ConvBlock(const ConvSpec& spec, const std::string& name, ParameterStore<T>& store, Rng& rng,
            Init init = Init::glorot_uniform)
      : spec_(spec) {
    const Shape ws{spec.out, spec.in, spec.kernel, spec.kernel};
    std::vector<T> w(ws.numel());
    if (init == Init::ones) {
      std::fill(w.begin(), w.end(), T(1));
    } else {
      const double k2 = static_cast<double>(spec.kernel * spec.kernel);
      const double limit = std::sqrt(6.0 / (k2 * static_cast<double>(spec.in + spec.out)));
      for (auto& v : w) v = static_cast<T>(rng.uniform(-limit, limit));
    }
    weight_ = store.add(name + ".weight", ws, std::move(w));
    bias_ = store.add(name + ".bias", {1, spec.out, 1, 1}, std::vector<T>(spec.out, T(0)));
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    return activate(conv2d(x, weight_, bias_, 1, Padding::same), spec_.act);
  }

  const ConvSpec& spec() const { return spec_; }
  const Tensor<T>& weight() const { return weight_; }
  const Tensor<T>& bias() const { return bias_; }

private:
  ConvSpec spec_;
  Tensor<T> weight_, bias_;
};

/// Conv block-3: 3x3, stride 1, same padding, relu.
inline ConvSpec conv3(std::size_t in, std::size_t out) { return {in, out, 3, Activation::relu}; }
/// Conv block-2: 1x1, stride 1, same padding, relu.
inline ConvSpec conv1_relu(std::size_t in, std::size_t out) { return {in, out, 1, Activation::relu}; }
inline ConvSpec conv1_linear(std::size_t in, std::size_t out) { return {in, out, 1, Activation::none}; }

// ---------------------------------------------------------------------------
// Layer norm parameters

template <class T> struct LayerNormParams {
  Tensor<T> gamma, beta;

  LayerNormParams() = default;
  LayerNormParams(std::size_t channels, const std::string& name, ParameterStore<T>& store)
      : gamma(store.add(name + ".gamma", {1, channels, 1, 1}, std::vector<T>(channels, T(1)))),
        beta(store.add(name + ".beta", {1, channels, 1, 1}, std::vector<T>(channels, T(0)))) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta, T(1e-5)); }
};

// ---------------------------------------------------------------------------
// Weighted scale block: x * sigmoid(LN2(conv1x1(LN1(x))))

struct WeightedScaleSpec {
  std::size_t channels = 0;

  std::size_t param_count() const {
    return 2 * channels + ConvSpec{channels, channels, 1}.param_count() + 2 * channels;
  }
};

template <class T> class WeightedScaleBlock {
public:
  WeightedScaleBlock() = default;
  WeightedScaleBlock(const WeightedScaleSpec& spec, const std::string& name,
                     ParameterStore<T>& store, Rng& rng)
      : spec_(spec), ln1_(spec.channels, name + ".ln1", store),
        // Kernel initializer "ones", linear: the activation follows LN2.
        conv_(conv1_linear(spec.channels, spec.channels), name + ".conv1", store, rng, Init::ones),
        ln2_(spec.channels, name + ".ln2", store) {}

  /// The attention gate alone, values in (0, 1).
  Tensor<T> gate(const Tensor<T>& x) const { return sigmoid(ln2_(conv_(ln1_(x)))); }

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.shape().c != spec_.channels)
      throw ShapeError("weighted_scale_block: expected " + std::to_string(spec_.channels) +
                       " channels, got " + std::to_string(x.shape().c));
    return mul(x, gate(x));
  }

  const WeightedScaleSpec& spec() const { return spec_; }

private:
  WeightedScaleSpec spec_;
  LayerNormParams<T> ln1_;
  ConvBlock<T> conv_;
  LayerNormParams<T> ln2_;
};

// ---------------------------------------------------------------------------
// Rich-scale block

enum class RichScaleKind {
  improved,    // group i runs i-1 stacked conv3 stages on its own slice
  hierarchical, // original Res2Net wiring: group i sees group i-1's output
  single_conv, // one conv3 over all channels (ablation)
};

struct RichScaleSpec {
  std::size_t channels = 0;
  std::size_t groups = 4;
  RichScaleKind kind = RichScaleKind::improved;

  std::size_t group_width() const { return channels / groups; }

  void validate() const {
    if (kind != RichScaleKind::single_conv && (groups == 0 || channels % groups != 0))
      throw ShapeError("rich_scale_block: " + std::to_string(channels) +
                       " channels not divisible into " + std::to_string(groups) + " groups");
  }

  std::size_t conv_stages() const {
    switch (kind) {
    case RichScaleKind::improved: return groups * (groups - 1) / 2;
    case RichScaleKind::hierarchical: return groups - 1;
    case RichScaleKind::single_conv: return 1;
    }
    return 0;
  }

  std::size_t param_count() const {
    validate();
    if (kind == RichScaleKind::single_conv) return conv3(channels, channels).param_count();
    const std::size_t g = group_width();
    return conv_stages() * conv3(g, g).param_count();
  }
};

template <class T> class RichScaleBlock {
public:
  RichScaleBlock() = default;
  RichScaleBlock(const RichScaleSpec& spec, const std::string& name, ParameterStore<T>& store,
                 Rng& rng)
      : spec_(spec) {
    spec.validate();
    if (spec.kind == RichScaleKind::single_conv) {
      single_ = ConvBlock<T>(conv3(spec.channels, spec.channels), name + ".conv", store, rng);
      return;
    }
    const std::size_t g = spec.group_width();
    stacks_.resize(spec.groups);
    for (std::size_t i = 1; i < spec.groups; ++i) {
      const std::size_t depth = spec.kind == RichScaleKind::improved ? i : 1;
      for (std::size_t d = 0; d < depth; ++d)
        stacks_[i].emplace_back(conv3(g, g),
                                name + ".g" + std::to_string(i) + ".c" + std::to_string(d), store,
                                rng);
    }
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.shape().c != spec_.channels)
      throw ShapeError("rich_scale_block: expected " + std::to_string(spec_.channels) +
                       " channels, got " + std::to_string(x.shape().c));
    if (spec_.kind == RichScaleKind::single_conv) return single_(x);

    auto parts = split_channels(x, spec_.groups);
    std::vector<Tensor<T>> outs;
    outs.reserve(parts.size());
    outs.push_back(parts[0]);
    for (std::size_t i = 1; i < parts.size(); ++i) {
      Tensor<T> y = parts[i];
      if (spec_.kind == RichScaleKind::hierarchical && i >= 2) y = add(y, outs[i - 1]);
      for (const auto& conv : stacks_[i]) y = conv(y);
      outs.push_back(y);
    }
    return concat_channels(outs);
  }

  const RichScaleSpec& spec() const { return spec_; }

private:
  RichScaleSpec spec_;
  std::vector<std::vector<ConvBlock<T>>> stacks_;
  ConvBlock<T> single_;
};

// ---------------------------------------------------------------------------
// Weighted rich-scale inception module

struct WRISpec {
  std::size_t in_channels = 0;
  std::size_t branch_width = 0;
  std::size_t branches = 4;
  std::size_t rich_groups = 4;
  RichScaleKind rich_kind = RichScaleKind::improved;
  bool gated = true;
  /// Chained: branch k consumes branch k-1. Parallel: every branch consumes the
  /// module input and stacks k-1 rich-scale blocks at input width before a 1x1
  /// reduction to the branch width.
  bool chained = true;

  /// Default layout: B branches of width C/B so the output restores C channels.
  static WRISpec preserving(std::size_t channels, std::size_t branches = 4,
                            std::size_t rich_groups = 4) {
    if (branches == 0 || channels % branches != 0)
      throw ShapeError("wri_module: " + std::to_string(channels) + " channels not divisible by " +
                       std::to_string(branches) + " branches");
    WRISpec s;
    s.in_channels = channels;
    s.branch_width = channels / branches;
    s.branches = branches;
    s.rich_groups = rich_groups;
    return s;
  }

  std::size_t out_channels() const { return branches * branch_width; }

  RichScaleSpec branch_rich() const {
    return {branch_width, effective_groups(branch_width, rich_groups), rich_kind};
  }
  RichScaleSpec input_rich() const {
    return {in_channels, effective_groups(in_channels, rich_groups), rich_kind};
  }

  std::size_t param_count() const {
    std::size_t n = conv1_relu(in_channels, branch_width).param_count();
    for (std::size_t k = 1; k < branches; ++k) {
      if (chained) {
        n += branch_rich().param_count();
      } else {
        n += k * input_rich().param_count() +
             conv1_relu(in_channels, branch_width).param_count();
      }
    }
    if (gated) n += branches * WeightedScaleSpec{branch_width}.param_count();
    return n;
  }
};

template <class T> struct WRIOutput {
  Tensor<T> fused;
  std::vector<Tensor<T>> per_branch_weighted;
};

template <class T> class WRIModule {
public:
  WRIModule() = default;
  WRIModule(const WRISpec& spec, const std::string& name, ParameterStore<T>& store, Rng& rng)
      : spec_(spec) {
    if (spec.branches == 0 || spec.branch_width == 0)
      throw ShapeError("wri_module: branches and branch width must be positive");
    entry_ = ConvBlock<T>(conv1_relu(spec.in_channels, spec.branch_width), name + ".b0.conv", store,
                          rng);
    for (std::size_t k = 1; k < spec.branches; ++k) {
      const std::string bn = name + ".b" + std::to_string(k);
      if (spec.chained) {
        rich_.push_back({RichScaleBlock<T>(spec.branch_rich(), bn + ".rich", store, rng)});
      } else {
        std::vector<RichScaleBlock<T>> stack;
        for (std::size_t d = 0; d < k; ++d)
          stack.emplace_back(spec.input_rich(), bn + ".rich" + std::to_string(d), store, rng);
        rich_.push_back(std::move(stack));
        reduce_.emplace_back(conv1_relu(spec.in_channels, spec.branch_width), bn + ".reduce",
                             store, rng);
      }
    }
    if (spec.gated)
      for (std::size_t k = 0; k < spec.branches; ++k)
        gates_.emplace_back(WeightedScaleSpec{spec.branch_width},
                            name + ".b" + std::to_string(k) + ".wsb", store, rng);
  }

  WRIOutput<T> operator()(const Tensor<T>& x) const {
    if (x.shape().c != spec_.in_channels)
      throw ShapeError("wri_module: expected " + std::to_string(spec_.in_channels) +
                       " channels, got " + std::to_string(x.shape().c));
    std::vector<Tensor<T>> raw;
    raw.push_back(entry_(x));
    for (std::size_t k = 1; k < spec_.branches; ++k) {
      if (spec_.chained) {
        // The chain carries the ungated branch output.
        raw.push_back(rich_[k - 1][0](raw.back()));
      } else {
        Tensor<T> y = x;
        for (const auto& r : rich_[k - 1]) y = r(y);
        raw.push_back(reduce_[k - 1](y));
      }
    }
    WRIOutput<T> out;
    if (spec_.gated) {
      for (std::size_t k = 0; k < raw.size(); ++k) out.per_branch_weighted.push_back(gates_[k](raw[k]));
    } else {
      out.per_branch_weighted = raw;
    }
    out.fused = concat_channels(out.per_branch_weighted);
    return out;
  }

  const WRISpec& spec() const { return spec_; }

private:
  WRISpec spec_;
  ConvBlock<T> entry_;
  std::vector<std::vector<RichScaleBlock<T>>> rich_;
  std::vector<ConvBlock<T>> reduce_;
  std::vector<WeightedScaleBlock<T>> gates_;
};

} // namespace wricnet
