// Builds a small model, trains it briefly on synthetic pairs and evaluates it.
// No files are read or written.

#include "wricnet/wricnet.hpp"

#include <cstdio>

using namespace wricnet;

int main() {
  ModelConfig cfg;
  cfg.input_h = cfg.input_w = 64;
  cfg.width_scale = 0.25;

  std::printf("parameters at width 1.0: %zu (reference %zu)\n", count_params(ModelConfig{}),
              reference_param_count(Variant::proposed));

  std::vector<TilePair> tiles;
  for (const auto& src : synth_dataset(4, 64, 7))
    for (auto& tp : make_tier_tiles(src, Tier::HR, 64)) tiles.push_back(std::move(tp));

  WRICNet<float> model(cfg, 7);
  std::printf("toy model: %zu parameters, %zu tiles\n", model.parameter_count(), tiles.size());

  TrainOptions opt;
  opt.epochs = 5;
  opt.seed = 7;
  opt.on_epoch_end = [](const EpochSummary& s) {
    std::printf("epoch %zu  mean loss %.4f\n", s.epoch + 1, s.mean_total);
    return true;
  };
  train(model, tiles, opt);

  const EvalReport rep = predict_and_evaluate(model_predictor(model), tiles);
  const Metrics m = rep.tiers.at(Tier::HR).gi;
  std::printf("training-set GI: MA %.3f FA %.3f F1 %.3f IoU %.3f\n", m.ma, m.fa, m.f1, m.iou);
}
