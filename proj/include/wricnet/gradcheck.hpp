#pragma once

// Central finite-difference checks of the analytic gradients, plus the
// standard per-block suite used by the CLI and the test binaries.

#include "wricnet/training.hpp"

#include <functional>
#include <span>

namespace wricnet {

struct GradcheckOptions {
  /// Entries checked per tensor; smaller tensors are checked exhaustively.
  std::size_t max_checks_per_tensor = 16;
  double step = 1e-5;
  /// Lower bound on the relative-error denominator, for near-zero gradients.
  double floor = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
};

struct GradcheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_err = 0, max_abs_err = 0;
  /// Entries that needed a second estimate (extrapolated or at a shifted point).
  std::size_t shifted = 0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;

  double max_rel_err() const {
    double m = 0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_err);
    return m;
  }
  std::size_t shifted() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.shifted;
    return n;
  }
  std::size_t checked() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.checked;
    return n;
  }
};

using NamedTensor = std::pair<std::string, Tensor<double>>;

namespace detail {

inline double central_difference(const std::function<Tensor<double>()>& loss, std::span<double> data,
                                 std::size_t i, double h) {
  const double orig = data[i];
  data[i] = orig + h;
  const double up = loss().item();
  data[i] = orig - h;
  const double down = loss().item();
  data[i] = orig;
  return (up - down) / (2 * h);
}

/// Richardson extrapolation of two central differences; cancels the O(h^2) term
/// that dominates in strongly curved regions (e.g. layer norm over few channels).
inline double richardson(const std::function<Tensor<double>()>& loss, std::span<double> data,
                         std::size_t i, double h) {
  return (4.0 * central_difference(loss, data, i, h / 2) - central_difference(loss, data, i, h)) / 3.0;
}

inline double analytic_at(const std::function<Tensor<double>()>& loss, const std::vector<NamedTensor>& wrt,
                          std::size_t k, std::size_t i) {
  for (const auto& nt : wrt) Tensor<double>(nt.second).zero_grad();
  backward(loss());
  return wrt[k].second.grad()[i];
}

} // namespace detail

/// `loss` must rebuild the graph from the current tensor values on every call.
/// An entry that disagrees is re-estimated with Richardson extrapolation, then at
/// points shifted by +-3 steps: piecewise linear ops (relu, max-pool) make the
/// difference quotient meaningless when the stencil straddles a switch, whereas a
/// wrong gradient disagrees everywhere.
inline GradcheckReport gradcheck(const std::function<Tensor<double>()>& loss,
                                 const std::vector<NamedTensor>& wrt, const GradcheckOptions& opt = {}) {
  for (const auto& [name, t] : wrt) {
    if (!t.is_leaf() || !t.requires_grad()) throw AutodiffError("gradcheck: " + name + " is not a trainable leaf");
    Tensor<double>(t).zero_grad();
  }
  backward(loss());
  std::vector<std::vector<double>> analytic;
  for (const auto& [name, t] : wrt) analytic.emplace_back(t.grad().begin(), t.grad().end());

  const auto rel_err = [&](double a, double n) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), opt.floor});
  };

  Rng rng(opt.seed);
  GradcheckReport rep;
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    Tensor<double> t = wrt[k].second;
    std::vector<std::size_t> idx(t.numel());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (idx.size() > opt.max_checks_per_tensor) {
      rng.shuffle(idx);
      idx.resize(opt.max_checks_per_tensor);
    }
    GradcheckEntry e{wrt[k].first, idx.size(), 0, 0, 0};
    for (std::size_t i : idx) {
      auto data = t.mutable_data();
      const double orig = data[i];
      const double h = opt.step * std::max(1.0, std::abs(orig));
      double a = analytic[k][i];
      double n;
      {
        NoGradGuard guard;
        n = detail::central_difference(loss, data, i, h);
      }
      if (rel_err(a, n) >= opt.tolerance) {
        {
          NoGradGuard guard;
          const double r = detail::richardson(loss, data, i, h);
          if (rel_err(a, r) < rel_err(a, n)) n = r;
        }
        for (double shift : {3.0, -3.0}) {
          if (rel_err(a, n) < opt.tolerance) break;
          data[i] = orig + shift * h;
          const double a2 = detail::analytic_at(loss, wrt, k, i);
          double n2;
          {
            NoGradGuard guard;
            n2 = detail::richardson(loss, data, i, h);
          }
          data[i] = orig;
          if (rel_err(a2, n2) < rel_err(a, n)) {
            a = a2;
            n = n2;
          }
        }
        ++e.shifted;
      }
      e.max_abs_err = std::max(e.max_abs_err, std::abs(a - n));
      e.max_rel_err = std::max(e.max_rel_err, rel_err(a, n));
    }
    rep.entries.push_back(e);
  }
  return rep;
}

/// Every parameter of a store, as gradcheck targets.
inline std::vector<NamedTensor> trainables(const ParameterStore<double>& store) {
  std::vector<NamedTensor> out;
  for (const auto& e : store.entries()) out.emplace_back(e.name, e.tensor);
  return out;
}

/// Replaces all parameter values with random draws so no block sits at a
/// symmetric initial point (ones kernels, unit LN gains, zero biases). Kernels
/// get variance 1/fan_in to keep activations, and so the loss, O(1).
inline void randomize(ParameterStore<double>& store, Rng& rng) {
  for (auto& e : store.entries()) {
    auto d = e.tensor.mutable_data();
    const Shape s = e.tensor.shape();
    double lo = -0.5, hi = 0.5;
    if (e.name.ends_with(".gamma")) {
      lo = 0.5;
      hi = 1.5;
    } else if (e.name.ends_with(".weight")) {
      hi = std::sqrt(3.0 / static_cast<double>(s.c * s.h * s.w));
      lo = -hi;
    } else if (e.name.ends_with(".bias")) {
      lo = -0.1;
      hi = 0.1;
    }
    for (auto& v : d) v = rng.uniform(lo, hi);
  }
}

inline Tensor<double> random_tensor(const Shape& s, Rng& rng, double lo, double hi, bool requires_grad = false) {
  std::vector<double> v(s.numel());
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(s, std::move(v), requires_grad);
}

/// sum(y * R) for a fixed random R: every output element gets an O(1) upstream gradient.
inline Tensor<double> probe_loss(const Tensor<double>& y, const Tensor<double>& r) { return sum(mul(y, r)); }

struct BlockGradcheck {
  std::string block;
  GradcheckReport report;
};

/// Finite-difference suite over every block: weighted scale, rich-scale
/// (all three wirings), WRI, SAM, WRC and the full model with the joint loss.
inline std::vector<BlockGradcheck> run_gradcheck_suite(std::uint64_t seed = 0,
                                                       GradcheckOptions opt = {}) {
  std::vector<BlockGradcheck> out;
  Rng rng(seed);
  opt.seed = seed;

  const auto run_block = [&](const std::string& block, ParameterStore<double>& store, const Shape& in,
                             const std::function<Tensor<double>(const Tensor<double>&)>& f) {
    randomize(store, rng);
    const Tensor<double> x = random_tensor(in, rng, -1.0, 1.0, true);
    Shape ys;
    {
      NoGradGuard probe_guard;
      ys = f(x).shape();
    }
    const Tensor<double> r = random_tensor(ys, rng, -1.0, 1.0);
    auto wrt = trainables(store);
    wrt.emplace_back("input", x);
    out.push_back({block, gradcheck([&] { return probe_loss(f(x), r); }, wrt, opt)});
  };

  {
    ParameterStore<double> s;
    WeightedScaleBlock<double> b(WeightedScaleSpec{8}, "wsb", s, rng);
    run_block("weighted_scale_block", s, {1, 8, 6, 6}, [&](const Tensor<double>& x) { return b(x); });
  }
  for (auto kind : {RichScaleKind::improved, RichScaleKind::hierarchical, RichScaleKind::single_conv}) {
    ParameterStore<double> s;
    RichScaleBlock<double> b(RichScaleSpec{8, 4, kind}, "rsb", s, rng);
    const char* tag = kind == RichScaleKind::improved       ? "rich_scale_block"
                      : kind == RichScaleKind::hierarchical ? "rich_scale_block_hierarchical"
                                                            : "rich_scale_block_single_conv";
    run_block(tag, s, {1, 8, 6, 6}, [&](const Tensor<double>& x) { return b(x); });
  }
  for (bool chained : {true, false}) {
    ParameterStore<double> s;
    // Branch width 4: layer norm over only two channels is too ill-conditioned
    // for difference quotients near relu switches.
    WRISpec spec = WRISpec::preserving(16, 4, 4);
    spec.chained = chained;
    WRIModule<double> m(spec, "wri", s, rng);
    run_block(chained ? "wri_module" : "wri_module_parallel", s, {1, 16, 6, 6},
              [&](const Tensor<double>& x) { return m(x).fused; });
  }
  {
    ParameterStore<double> s;
    SpatialAttention<double> sam(SpatialAttentionSpec{8}, "sam", s, rng);
    run_block("spatial_attention", s, {1, 8, 4, 4}, [&](const Tensor<double>& x) { return sam(x); });
  }
  {
    ParameterStore<double> s;
    WRCoder<double> wrc(WRCSpec::scaled(0.125), "wrc", s, rng);
    run_block("wrc_coder", s, {1, 6, 16, 16}, [&](const Tensor<double>& x) { return wrc(x).out; });
  }
  {
    ModelConfig cfg;
    cfg.input_h = cfg.input_w = 16;
    cfg.width_scale = 0.125;
    WRICNet<double> model(cfg, seed);
    randomize(model.parameters(), rng);
    const Tensor<double> t1 = random_tensor({1, 3, 16, 16}, rng, 0.0, 1.0, true);
    const Tensor<double> t2 = random_tensor({1, 3, 16, 16}, rng, 0.0, 1.0, true);
    Mask gt(1, 16, 16);
    for (auto& v : gt.data) v = rng.uniform() < 0.2 ? 1 : 0;
    const Tensor<double> onehot = mask_to_onehot<double>(gt);
    const ClassWeights cw = class_weights_from_mask(gt);
    auto wrt = trainables(model.parameters());
    wrt.emplace_back("t1", t1);
    wrt.emplace_back("t2", t2);
    out.push_back({"wricnet_joint_loss", gradcheck([&] {
                     return joint_loss(model.forward(t1, t2), onehot, LossWeights{}, cw).total;
                   }, wrt, opt)});
  }
  return out;
}

} // namespace wricnet
