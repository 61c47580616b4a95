#pragma once

// Confusion-matrix metrics (positive = change), the local-optimal / global
// index protocol, tile stitching and cross-tier averaging.

#include "wricnet/datapipe.hpp"
#include "wricnet/model.hpp"

#include <algorithm>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>

namespace wricnet {

struct ConfusionMatrix {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  friend ConfusionMatrix operator+(ConfusionMatrix a, const ConfusionMatrix& b) { return a += b; }
  bool operator==(const ConfusionMatrix&) const = default;
};

inline ConfusionMatrix confusion(const Mask& pred, const Mask& gt) {
  if (pred.channels != gt.channels || !pred.same_dims(gt.height, gt.width))
    throw std::invalid_argument("confusion: prediction and ground truth shapes differ");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const std::uint8_t p = pred.data[i], g = gt.data[i];
    if (p > 1 || g > 1) throw std::invalid_argument("confusion: masks must be binary");
    if (p) ++(g ? cm.tp : cm.fp);
    else ++(g ? cm.fn : cm.tn);
  }
  return cm;
}

struct Metrics {
  double ma = 0, fa = 0, precision = 0, recall = 0, f1 = 0, iou = 0;
};

/// If nothing is changed and nothing predicted, the tile counts as a perfect
/// hit; otherwise empty denominators yield 0 for the affected ratio.
inline Metrics metrics(const ConfusionMatrix& cm) {
  Metrics m;
  const double tp = static_cast<double>(cm.tp), fp = static_cast<double>(cm.fp),
               fn = static_cast<double>(cm.fn);
  if (cm.tp + cm.fp + cm.fn == 0) {
    m.precision = m.recall = m.f1 = m.iou = 1.0;
    return m;
  }
  m.ma = cm.tp + cm.fn == 0 ? 0.0 : 1.0 - tp / (tp + fn);
  m.fa = cm.tp + cm.fp == 0 ? 0.0 : fp / (fp + tp);
  m.recall = 1.0 - m.ma;
  m.precision = 1.0 - m.fa;
  m.f1 = 2.0 * tp / (2.0 * tp + fp + fn);
  m.iou = tp / (tp + fp + fn);
  return m;
}

struct TileResult {
  std::string id;
  Tier tier = Tier::HR;
  ConfusionMatrix cm;
  Metrics m;
};

inline TileResult make_tile_result(std::string id, Tier tier, const ConfusionMatrix& cm) {
  return {std::move(id), tier, cm, metrics(cm)};
}

/// Number of tiles in the local-optimal prefix, rounding half up.
inline std::size_t top_k(std::size_t n, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("loi: fraction must be in (0, 1]");
  const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 0.5 + 1e-9));
  return std::clamp<std::size_t>(k, 1, n);
}

/// Tile indices ordered by F1 descending, ties by id ascending.
inline std::vector<std::size_t> rank_tiles(const std::vector<TileResult>& tiles) {
  std::vector<std::size_t> idx(tiles.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (tiles[a].m.f1 != tiles[b].m.f1) return tiles[a].m.f1 > tiles[b].m.f1;
    return tiles[a].id < tiles[b].id;
  });
  return idx;
}

inline Metrics loi(const std::vector<TileResult>& tiles, double fraction) {
  if (tiles.empty()) throw std::invalid_argument("loi: no tiles");
  const auto order = rank_tiles(tiles);
  const std::size_t k = top_k(tiles.size(), fraction);
  ConfusionMatrix sum;
  for (std::size_t i = 0; i < k; ++i) sum += tiles[order[i]].cm;
  return metrics(sum);
}

inline Metrics gi(const std::vector<TileResult>& tiles) {
  if (tiles.empty()) throw std::invalid_argument("gi: no tiles");
  ConfusionMatrix sum;
  for (const auto& t : tiles) sum += t.cm;
  return metrics(sum);
}

/// Reassembles a complete grid of equally sized tiles.
template <class V>
Image<V> stitch(const std::vector<Tile<V>>& tiles, std::size_t grid_rows, std::size_t grid_cols) {
  if (tiles.empty() || grid_rows == 0 || grid_cols == 0) throw std::invalid_argument("stitch: empty grid");
  const std::size_t c = tiles[0].image.channels, h = tiles[0].image.height, w = tiles[0].image.width;
  Image<V> out(c, grid_rows * h, grid_cols * w);
  std::vector<bool> seen(grid_rows * grid_cols, false);
  for (const auto& t : tiles) {
    if (t.row >= grid_rows || t.col >= grid_cols)
      throw std::invalid_argument("stitch: tile (" + std::to_string(t.row) + "," +
                                  std::to_string(t.col) + ") outside the grid");
    if (t.image.channels != c || !t.image.same_dims(h, w))
      throw std::invalid_argument("stitch: tiles differ in shape");
    const std::size_t cell = t.row * grid_cols + t.col;
    if (seen[cell])
      throw std::invalid_argument("stitch: duplicate tile (" + std::to_string(t.row) + "," +
                                  std::to_string(t.col) + ")");
    seen[cell] = true;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        std::copy_n(&t.image.at(ch, y, 0), w, &out.at(ch, t.row * h + y, t.col * w));
  }
  for (std::size_t i = 0; i < seen.size(); ++i)
    if (!seen[i])
      throw std::invalid_argument("stitch: missing tile (" + std::to_string(i / grid_cols) + "," +
                                  std::to_string(i % grid_cols) + ")");
  return out;
}

struct TierSummary {
  std::size_t tiles = 0;
  std::vector<Metrics> loi; // one per requested fraction
  Metrics gi;
};

inline TierSummary summarize(const std::vector<TileResult>& tiles, const std::vector<double>& fractions) {
  TierSummary s;
  s.tiles = tiles.size();
  for (double f : fractions) s.loi.push_back(loi(tiles, f));
  s.gi = gi(tiles);
  return s;
}

/// Per-metric arithmetic mean over the HR, MR and LR summaries.
inline TierSummary cross_tier_average(const std::map<Tier, TierSummary>& tiers) {
  for (Tier t : kAllTiers)
    if (!tiers.count(t)) throw std::invalid_argument(std::string("cross_tier_average: missing tier ") + tier_name(t));
  const auto avg = [](const std::array<Metrics, 3>& ms) {
    Metrics r;
    for (const auto& m : ms) {
      r.ma += m.ma / 3.0;
      r.fa += m.fa / 3.0;
      r.precision += m.precision / 3.0;
      r.recall += m.recall / 3.0;
      r.f1 += m.f1 / 3.0;
      r.iou += m.iou / 3.0;
    }
    return r;
  };
  const TierSummary& hr = tiers.at(Tier::HR);
  const TierSummary& mr = tiers.at(Tier::MR);
  const TierSummary& lr = tiers.at(Tier::LR);
  if (hr.loi.size() != mr.loi.size() || hr.loi.size() != lr.loi.size())
    throw std::invalid_argument("cross_tier_average: tiers use different LOI fractions");
  TierSummary out;
  out.tiles = hr.tiles + mr.tiles + lr.tiles;
  for (std::size_t i = 0; i < hr.loi.size(); ++i) out.loi.push_back(avg({hr.loi[i], mr.loi[i], lr.loi[i]}));
  out.gi = avg({hr.gi, mr.gi, lr.gi});
  return out;
}

// ---------------------------------------------------------------------------
// Prediction

using Predictor = std::function<Mask(const TilePair&)>;

/// Argmax of the fused output of a model.
template <class T> Predictor model_predictor(const WRICNet<T>& model) {
  return [&model](const TilePair& tp) {
    NoGradGuard guard;
    const auto outs = model.forward(image_to_tensor<T>(tp.t1), image_to_tensor<T>(tp.t2));
    return argmax_mask(outs.fu);
  };
}

struct EvalReport {
  std::vector<double> fractions;
  std::vector<TileResult> rows;
  std::map<Tier, TierSummary> tiers;
  std::optional<TierSummary> average;
};

struct EvalOptions {
  std::vector<double> fractions{0.05, 0.10};
  /// Receives every prediction, e.g. to write masks and overlays.
  std::function<void(const TilePair&, const Mask&)> on_prediction;
};

inline EvalReport predict_and_evaluate(const Predictor& predict, const std::vector<TilePair>& tiles,
                                       const EvalOptions& opt = {}) {
  if (tiles.empty()) throw std::invalid_argument("predict_and_evaluate: no tiles");
  EvalReport rep;
  rep.fractions = opt.fractions;
  std::map<Tier, std::vector<TileResult>> by_tier;
  for (const auto& tp : tiles) {
    tp.validate();
    const Mask pred = predict(tp);
    if (!pred.same_dims(tp.gt.height, tp.gt.width))
      throw ShapeError("predict_and_evaluate: prediction size differs from tile " + tp.tile_id());
    if (opt.on_prediction) opt.on_prediction(tp, pred);
    rep.rows.push_back(make_tile_result(tp.tile_id(), tp.tier, confusion(pred, tp.gt)));
  }
  std::sort(rep.rows.begin(), rep.rows.end(),
            [](const TileResult& a, const TileResult& b) { return a.id < b.id; });
  for (const auto& r : rep.rows) by_tier[r.tier].push_back(r);
  for (const auto& [tier, rows] : by_tier) rep.tiers[tier] = summarize(rows, opt.fractions);
  if (rep.tiers.size() == kAllTiers.size()) rep.average = cross_tier_average(rep.tiers);
  return rep;
}

/// RGB error map: white TP, red FP, blue FN, black TN.
inline Image<std::uint8_t> error_overlay(const Mask& pred, const Mask& gt) {
  if (!pred.same_dims(gt.height, gt.width)) throw std::invalid_argument("error_overlay: shapes differ");
  Image<std::uint8_t> out(3, gt.height, gt.width);
  const std::size_t P = gt.height * gt.width;
  for (std::size_t i = 0; i < P; ++i) {
    const bool p = pred.data[i], g = gt.data[i];
    const std::uint8_t r = p ? 255 : 0;
    const std::uint8_t gr = p && g ? 255 : 0;
    const std::uint8_t b = g ? 255 : 0;
    out.data[i] = r;
    out.data[P + i] = gr;
    out.data[2 * P + i] = b;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report output

inline void write_tile_csv(std::ostream& os, const EvalReport& rep) {
  os << "tile,tier,TP,FP,FN,TN,MA,FA,F1,IoU\n" << std::setprecision(9);
  for (const auto& r : rep.rows)
    os << r.id << ',' << tier_name(r.tier) << ',' << r.cm.tp << ',' << r.cm.fp << ',' << r.cm.fn
       << ',' << r.cm.tn << ',' << r.m.ma << ',' << r.m.fa << ',' << r.m.f1 << ',' << r.m.iou << '\n';
}

inline void write_summary(std::ostream& os, const EvalReport& rep) {
  std::ostringstream head;
  head << std::left << std::setw(8) << "tier";
  for (double f : rep.fractions) {
    std::ostringstream label;
    label << f * 100.0 << "% LOI";
    head << "| " << std::setw(28) << label.str();
  }
  head << "| GI";
  os << head.str() << '\n' << std::left << std::setw(8) << "";
  for (std::size_t i = 0; i <= rep.fractions.size(); ++i) os << "|      MA     FA     F1    IoU";
  os << '\n';
  const auto cells = [&os](const Metrics& m) {
    os << "| " << std::fixed << std::setprecision(1);
    for (double v : {m.ma, m.fa, m.f1, m.iou}) os << std::setw(7) << v * 100.0;
  };
  const auto row = [&](const std::string& name, const TierSummary& s) {
    os << std::left << std::setw(8) << name << std::right;
    for (const auto& m : s.loi) cells(m);
    cells(s.gi);
    os << std::left << '\n';
  };
  for (const auto& [tier, s] : rep.tiers) row(tier_name(tier), s);
  if (rep.average) row("Average", *rep.average);
  os.unsetf(std::ios::fixed);
}

} // namespace wricnet
