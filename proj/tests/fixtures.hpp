#pragma once

// The overfit fixture: eight synthetic 64x64 tiles and a width-0.25 model.

#include "wricnet/evaluation.hpp"
#include "wricnet/training.hpp"

namespace fixtures {

using namespace wricnet;

inline ModelConfig overfit_model() {
  ModelConfig cfg;
  cfg.input_h = cfg.input_w = 64;
  cfg.width_scale = 0.25;
  return cfg;
}

inline std::vector<TilePair> overfit_tiles(std::uint64_t seed = 7) {
  std::vector<TilePair> tiles;
  for (const auto& src : synth_dataset(8, 64, seed))
    for (auto& tp : make_tier_tiles(src, Tier::HR, 64)) tiles.push_back(std::move(tp));
  return tiles;
}

/// GI over a tile set for the current weights.
template <class T> Metrics training_gi(const WRICNet<T>& model, const std::vector<TilePair>& tiles) {
  return predict_and_evaluate(model_predictor(model), tiles).tiers.at(Tier::HR).gi;
}

/// Mean joint loss over the tile set without recording a graph.
template <class T> double dataset_loss(const WRICNet<T>& model, const std::vector<TilePair>& tiles) {
  NoGradGuard g;
  double total = 0;
  for (const auto& tp : tiles) {
    const auto outs = model.forward(image_to_tensor<T>(tp.t1), image_to_tensor<T>(tp.t2));
    total += static_cast<double>(
        joint_loss(outs, mask_to_onehot<T>(tp.gt), LossWeights{}, class_weights_from_mask(tp.gt)).total.item());
  }
  return total / static_cast<double>(tiles.size());
}

} // namespace fixtures
