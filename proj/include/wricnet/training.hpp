#pragma once

// Joint deep-supervision loss, per-tile class weighting, Adam, and a
// deterministic batch-size-1 training loop.

#include "wricnet/checkpoint.hpp"
#include "wricnet/datapipe.hpp"
#include "wricnet/model.hpp"

#include <array>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>

namespace wricnet {

struct LossWeights {
  std::array<double, 5> lambda{1.0, 1.3, 0.5, 0.65, 2.3}; // ri, wri, ed, wed, fu

  void validate() const {
    for (double l : lambda)
      if (!(l >= 0.0)) throw std::invalid_argument("loss weights must be non-negative");
  }
};

struct ClassWeights {
  double change = 1.0;
  double nonchange = 1.0;
  /// change == change_num / change_den before rounding; a double quotient
  /// cannot make c * w_change == uc hold exactly (1/49 * 49 != 1).
  std::uint64_t change_num = 1, change_den = 1;
};

/// Minority-class reweighting: the change class gets uc/c, non-change stays 1,
/// so c * w_change == uc * w_nonchange. No change pixels -> 1:1.
inline ClassWeights class_weights_from_counts(std::uint64_t change, std::uint64_t nonchange) {
  ClassWeights cw;
  if (change > 0) {
    cw.change = static_cast<double>(nonchange) / static_cast<double>(change);
    cw.change_num = nonchange;
    cw.change_den = change;
  }
  return cw;
}

/// c * w_change == uc * w_nonchange in exact integer arithmetic.
inline bool balanced(const ClassWeights& cw, std::uint64_t change, std::uint64_t nonchange) {
  using U = unsigned __int128;
  return cw.nonchange == 1.0 && U(change) * cw.change_num == U(nonchange) * cw.change_den;
}

inline ClassWeights class_weights_from_mask(const Mask& gt) {
  std::uint64_t c = 0, uc = 0;
  for (auto v : gt.data) {
    if (v > 1) throw std::invalid_argument("class_weights_from_mask: mask must be binary");
    (v ? c : uc) += 1;
  }
  return class_weights_from_counts(c, uc);
}

inline constexpr double kLogEpsilon = 1e-7;

/// Mean over pixels of -sum_i w_i * gt_i * log(pred_i + eps); pred and gt are
/// (N, 2, H, W) with channel 1 = change.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& pred, const Tensor<T>& gt, const ClassWeights& cw,
                        double eps_log = kLogEpsilon) {
  detail::require_same_shape(pred, gt, "cross_entropy");
  const Shape s = pred.shape();
  if (s.c != 2) throw ShapeError("cross_entropy: expected 2-channel maps, got " + s.str());
  const std::size_t P = s.plane();
  const double pixels = static_cast<double>(s.n * P);
  const std::array<double, 2> w{cw.nonchange, cw.change};
  const auto p = pred.data(), g = gt.data();
  double acc = 0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < P; ++i) {
        const std::size_t k = (n * 2 + c) * P + i;
        if (g[k] != T(0)) acc -= w[c] * static_cast<double>(g[k]) * std::log(static_cast<double>(p[k]) + eps_log);
      }
  return detail::make_result<T>(
      {1, 1, 1, 1}, {static_cast<T>(acc / pixels)}, {pred},
      [pred, gt, w, eps_log, pixels](const detail::TensorImpl<T>& res) {
        T* dp = detail::grad_of(pred.impl());
        if (!dp) return;
        const Shape s = pred.shape();
        const std::size_t P = s.plane();
        const auto p = pred.data(), g = gt.data();
        const double up = static_cast<double>(res.grad[0]) / pixels;
        for (std::size_t n = 0; n < s.n; ++n)
          for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t i = 0; i < P; ++i) {
              const std::size_t k = (n * 2 + c) * P + i;
              if (g[k] != T(0))
                dp[k] += static_cast<T>(-up * w[c] * static_cast<double>(g[k]) /
                                        (static_cast<double>(p[k]) + eps_log));
            }
      },
      "cross_entropy");
}

template <class T> struct JointLoss {
  Tensor<T> total;
  std::array<double, 5> components{}; // L_ri, L_wri, L_ed, L_wed, L_fu
};

template <class T>
JointLoss<T> joint_loss(const ModelOutputs<T>& outs, const Tensor<T>& gt, const LossWeights& lw,
                        const ClassWeights& cw) {
  lw.validate();
  JointLoss<T> res;
  std::vector<Tensor<T>> terms;
  std::vector<T> weights;
  const auto maps = outs.all();
  for (std::size_t k = 0; k < 5; ++k) {
    if (!maps[k]->defined()) throw std::invalid_argument("joint_loss: missing model output");
    terms.push_back(cross_entropy(*maps[k], gt, cw));
    res.components[k] = static_cast<double>(terms.back().item());
    weights.push_back(static_cast<T>(lw.lambda[k]));
  }
  res.total = weighted_sum(terms, weights);
  return res;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamOptions {
  double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

template <class T> class Adam {
public:
  explicit Adam(AdamOptions opt = {}) : opt_(opt) {}

  /// One bias-corrected update of every parameter in the store.
  void step(ParameterStore<T>& store) {
    auto& entries = store.entries();
    if (m_.empty()) {
      for (const auto& e : entries) {
        m_.emplace_back(e.tensor.numel(), 0.0);
        v_.emplace_back(e.tensor.numel(), 0.0);
      }
    }
    if (m_.size() != entries.size()) throw std::logic_error("Adam: parameter set changed");
    for (const auto& e : entries)
      if (!e.tensor.has_grad())
        throw AutodiffError("Adam: no gradient populated for " + e.name);

    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < entries.size(); ++k) {
      Tensor<T>& p = entries[k].tensor;
      const auto g = p.grad();
      auto w = p.mutable_data();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * gi;
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * gi * gi;
        const double mhat = m[i] / bc1, vhat = v[i] / bc2;
        w[i] = static_cast<T>(static_cast<double>(w[i]) - opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps));
      }
    }
  }

  std::size_t steps() const { return t_; }
  const AdamOptions& options() const { return opt_; }

private:
  AdamOptions opt_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Training loop

enum class ClassWeightMode { per_tile, dataset, none };

struct LossRow {
  std::size_t step = 0, epoch = 0;
  std::array<double, 5> components{};
  double total = 0;
};

inline void write_loss_header(std::ostream& os) { os << "step,epoch,L_ri,L_wri,L_ed,L_wed,L_fu,total\n"; }

inline void write_loss_row(std::ostream& os, const LossRow& r) {
  os << r.step << ',' << r.epoch << std::setprecision(9);
  for (double c : r.components) os << ',' << c;
  os << ',' << r.total << '\n';
}

struct EpochSummary {
  std::size_t epoch = 0;
  double mean_total = 0;
};

struct TrainOptions {
  std::size_t epochs = 200;
  std::uint64_t seed = 0;
  LossWeights loss_weights;
  AdamOptions adam;
  ClassWeightMode class_weights = ClassWeightMode::per_tile;
  bool augment = true;
  std::optional<std::filesystem::path> checkpoint_dir;
  std::optional<std::filesystem::path> loss_log;
  /// Called after each epoch; returning false stops training early.
  std::function<bool(const EpochSummary&)> on_epoch_end;
};

struct TrainResult {
  std::vector<LossRow> log;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_loss = std::numeric_limits<double>::infinity();
};

template <class T>
TrainResult train(WRICNet<T>& model, const std::vector<TilePair>& tiles, const TrainOptions& opt) {
  if (tiles.empty()) throw std::invalid_argument("train: empty dataset");
  for (const auto& tp : tiles) tp.validate();

  std::optional<std::ofstream> log_file;
  if (opt.loss_log) {
    const bool fresh = !std::filesystem::exists(*opt.loss_log) || std::filesystem::file_size(*opt.loss_log) == 0;
    if (opt.loss_log->has_parent_path()) std::filesystem::create_directories(opt.loss_log->parent_path());
    log_file.emplace(*opt.loss_log, std::ios::app);
    if (fresh) write_loss_header(*log_file);
  }

  ClassWeights dataset_cw;
  if (opt.class_weights == ClassWeightMode::dataset) {
    std::uint64_t c = 0, uc = 0;
    for (const auto& tp : tiles)
      for (auto v : tp.gt.data) (v ? c : uc) += 1;
    dataset_cw = class_weights_from_counts(c, uc);
  }

  Adam<T> adam(opt.adam);
  TrainResult res;
  if (opt.checkpoint_dir) {
    save_checkpoint(model.parameters(), *opt.checkpoint_dir / "last");
    save_checkpoint(model.parameters(), *opt.checkpoint_dir / "best");
  }

  std::vector<std::size_t> order(tiles.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed({opt.seed, epoch, 0x5348554646ULL}));
    shuffle_rng.shuffle(order);

    double epoch_total = 0;
    for (std::size_t idx : order) {
      const TilePair& src = tiles[idx];
      TilePair tp = src;
      if (opt.augment) {
        Rng aug_rng(derive_seed({opt.seed, epoch, hash_string(src.tile_id())}));
        tp = augment(src, aug_rng);
      }
      ClassWeights cw;
      if (model.config().weighted_class()) {
        if (opt.class_weights == ClassWeightMode::per_tile) cw = class_weights_from_mask(tp.gt);
        else if (opt.class_weights == ClassWeightMode::dataset) cw = dataset_cw;
      }

      model.parameters().zero_grad();
      const auto outs = model.forward(image_to_tensor<T>(tp.t1), image_to_tensor<T>(tp.t2));
      const auto loss = joint_loss(outs, mask_to_onehot<T>(tp.gt), opt.loss_weights, cw);
      backward(loss.total);
      adam.step(model.parameters());

      LossRow row{step++, epoch, loss.components, static_cast<double>(loss.total.item())};
      epoch_total += row.total;
      if (log_file) write_loss_row(*log_file, row);
      res.log.push_back(row);
    }
    res.epochs_run = epoch + 1;
    const EpochSummary summary{epoch, epoch_total / static_cast<double>(tiles.size())};
    if (opt.checkpoint_dir) {
      save_checkpoint(model.parameters(), *opt.checkpoint_dir / "last");
      if (summary.mean_total < res.best_loss)
        save_checkpoint(model.parameters(), *opt.checkpoint_dir / "best");
    }
    if (summary.mean_total < res.best_loss) {
      res.best_loss = summary.mean_total;
      res.best_epoch = epoch;
    }
    if (opt.on_epoch_end && !opt.on_epoch_end(summary)) break;
  }
  return res;
}

} // namespace wricnet
