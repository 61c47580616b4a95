#include "fd.hpp"
#include "fixtures.hpp"

#include <filesystem>
#include <fstream>

using namespace wricnet;
using fdtest::rand_tensor;

namespace {

Tensor<double> two_class(std::size_t h, std::size_t w, const std::vector<double>& p_change) {
  std::vector<double> v(2 * h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    v[i] = 1.0 - p_change[i];
    v[h * w + i] = p_change[i];
  }
  return Tensor<double>({1, 2, h, w}, v);
}

Mask mask_of(std::size_t h, std::size_t w, const std::vector<std::uint8_t>& bits) {
  Mask m(1, h, w);
  m.data = bits;
  return m;
}

ModelOutputs<double> same_outputs(const Tensor<double>& p) { return {p, p, p, p, p}; }

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("wricnet_test_training_" + name);
  std::filesystem::remove_all(p);
  return p;
}

bool same_params(const ParameterStore<float>& a, const ParameterStore<float>& b) {
  if (a.entries().size() != b.entries().size()) return false;
  for (std::size_t k = 0; k < a.entries().size(); ++k) {
    const auto x = a.entries()[k].tensor.data(), y = b.entries()[k].tensor.data();
    if (!std::equal(x.begin(), x.end(), y.begin(), y.end())) return false;
  }
  return true;
}

} // namespace

TEST(CrossEntropy, HalfHalfIsLog2) {
  const auto gt = mask_to_onehot<double>(mask_of(1, 1, {1}));
  EXPECT_NEAR(cross_entropy(two_class(1, 1, {0.5}), gt, ClassWeights{}).item(), 0.6931, 1e-4);
  EXPECT_NEAR(cross_entropy(two_class(1, 1, {0.5}), gt, ClassWeights{}).item(), -std::log(0.5 + kLogEpsilon), 1e-15);
}

TEST(CrossEntropy, PerfectPredictionIsNearZero) {
  const Mask m = mask_of(2, 2, {0, 1, 1, 0});
  const auto gt = mask_to_onehot<double>(m);
  const double l = cross_entropy(gt, gt, ClassWeights{}).item();
  EXPECT_NEAR(l, -std::log(1.0 + kLogEpsilon), 1e-15);
  EXPECT_LT(std::abs(l), 1e-6);
}

TEST(CrossEntropy, WeightScalesTrueClassTerm) {
  const auto gt = mask_to_onehot<double>(mask_of(1, 2, {1, 0}));
  const auto pred = two_class(1, 2, {0.1, 0.3}); // change pixel misclassified
  ClassWeights w2;
  w2.change = 2.0;
  const double plain = cross_entropy(pred, gt, ClassWeights{}).item();
  const double weighted = cross_entropy(pred, gt, w2).item();
  const double change_term = -std::log(0.1 + kLogEpsilon) / 2, other = -std::log(0.7 + kLogEpsilon) / 2;
  EXPECT_NEAR(plain, change_term + other, 1e-15);
  EXPECT_NEAR(weighted - plain, change_term, 1e-15);

  const auto one = mask_to_onehot<double>(mask_of(1, 1, {1}));
  EXPECT_EQ(cross_entropy(two_class(1, 1, {0.2}), one, w2).item(),
            2.0 * cross_entropy(two_class(1, 1, {0.2}), one, ClassWeights{}).item());
}

TEST(CrossEntropy, MeanOverPixels) {
  const auto gt1 = mask_to_onehot<double>(mask_of(1, 1, {1}));
  const auto gt4 = mask_to_onehot<double>(mask_of(2, 2, {1, 1, 1, 1}));
  EXPECT_NEAR(cross_entropy(two_class(1, 1, {0.3}), gt1, ClassWeights{}).item(),
              cross_entropy(two_class(2, 2, {0.3, 0.3, 0.3, 0.3}), gt4, ClassWeights{}).item(), 1e-15);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  Rng rng(1);
  std::vector<double> pc(12);
  for (auto& p : pc) p = rng.uniform(0.05, 0.95);
  const auto base = two_class(3, 4, pc);
  const Tensor<double> pred(base.shape(), std::vector<double>(base.data().begin(), base.data().end()), true);
  Mask m(1, 3, 4);
  for (auto& v : m.data) v = rng.uniform() < 0.4;
  const auto gt = mask_to_onehot<double>(m);
  fdtest::expect_grad_matches([&] { return cross_entropy(pred, gt, class_weights_from_mask(m)); }, {pred});
}

TEST(CrossEntropy, Errors) {
  EXPECT_THROW(cross_entropy(two_class(1, 2, {0.5, 0.5}), mask_to_onehot<double>(mask_of(1, 1, {1})), ClassWeights{}),
               ShapeError);
  EXPECT_THROW(cross_entropy(Tensor<double>::ones({1, 3, 1, 1}), Tensor<double>::ones({1, 3, 1, 1}), ClassWeights{}),
               ShapeError);
}

TEST(JointLoss, UnitComponentsSumToLambdaTotal) {
  // -log(p + eps) == 1 for the true class at every pixel.
  const double p = std::exp(-1.0) - kLogEpsilon;
  const Mask m = mask_of(2, 2, {1, 0, 0, 1});
  std::vector<double> pc(4);
  for (std::size_t i = 0; i < 4; ++i) pc[i] = m.data[i] ? p : 1.0 - p;
  const auto jl = joint_loss(same_outputs(two_class(2, 2, pc)), mask_to_onehot<double>(m), LossWeights{}, ClassWeights{});
  for (double c : jl.components) EXPECT_NEAR(c, 1.0, 1e-12);
  EXPECT_NEAR(jl.total.item(), 5.75, 1e-12);
}

TEST(JointLoss, SelectorAndLinearity) {
  Rng rng(2);
  const Mask m = mask_of(2, 3, {1, 0, 0, 1, 1, 0});
  const auto gt = mask_to_onehot<double>(m);
  ModelOutputs<double> outs;
  for (Tensor<double>* t : {&outs.ri, &outs.wri, &outs.ed, &outs.wed, &outs.fu}) {
    std::vector<double> pc(6);
    for (auto& v : pc) v = rng.uniform(0.05, 0.95);
    *t = two_class(2, 3, pc);
  }
  const ClassWeights cw = class_weights_from_mask(m);
  LossWeights sel;
  sel.lambda = {0, 0, 0, 0, 1};
  const auto only_fu = joint_loss(outs, gt, sel, cw);
  EXPECT_DOUBLE_EQ(only_fu.total.item(), cross_entropy(outs.fu, gt, cw).item());

  const auto base = joint_loss(outs, gt, LossWeights{}, cw);
  for (std::size_t k = 0; k < 5; ++k) {
    LossWeights lw;
    lw.lambda[k] += 0.75;
    const auto bumped = joint_loss(outs, gt, lw, cw);
    EXPECT_NEAR(bumped.total.item() - base.total.item(), 0.75 * base.components[k], 1e-12);
  }
  EXPECT_GT(base.total.item(), 0.0);
}

TEST(JointLoss, Errors) {
  const auto gt = mask_to_onehot<double>(mask_of(1, 1, {1}));
  LossWeights neg;
  neg.lambda[2] = -0.1;
  EXPECT_THROW(joint_loss(same_outputs(two_class(1, 1, {0.5})), gt, neg, ClassWeights{}), std::invalid_argument);
  ModelOutputs<double> partial = same_outputs(two_class(1, 1, {0.5}));
  partial.wed = Tensor<double>();
  EXPECT_THROW(joint_loss(partial, gt, LossWeights{}, ClassWeights{}), std::invalid_argument);
}

TEST(ClassWeights, Examples) {
  const auto w = class_weights_from_counts(1024, 64512);
  EXPECT_EQ(w.change, 63.0);
  EXPECT_EQ(w.nonchange, 1.0);
  EXPECT_EQ(class_weights_from_counts(500, 500).change, 1.0);
  const auto none = class_weights_from_counts(0, 4096);
  EXPECT_EQ(none.change, 1.0);
  EXPECT_EQ(none.nonchange, 1.0);

  Mask m(1, 256, 256);
  for (std::size_t i = 0; i < 1024; ++i) m.data[i * 64] = 1;
  EXPECT_EQ(class_weights_from_mask(m).change, 63.0);
  m.data[3] = 2;
  EXPECT_THROW(class_weights_from_mask(m), std::invalid_argument);
}

TEST(ClassWeights, BalanceOnRandomMasks) {
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t h = 1 + rng.below(64), w = 1 + rng.below(64);
    Mask m(1, h, w);
    const double frac = rng.uniform();
    for (auto& v : m.data) v = rng.uniform() < frac;
    std::uint64_t c = 0;
    for (auto v : m.data) c += v;
    const std::uint64_t uc = m.data.size() - c;
    if (c == 0) continue;
    const ClassWeights cw = class_weights_from_mask(m);
    EXPECT_TRUE(balanced(cw, c, uc)) << c << " " << uc;
    EXPECT_EQ(cw.change, static_cast<double>(uc) / static_cast<double>(c));
    EXPECT_NEAR(static_cast<double>(c) * cw.change, static_cast<double>(uc), static_cast<double>(uc) * 0x1p-52);
  }
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParameterStore<double> s;
  auto p = s.add("p", {1, 1, 1, 1}, {0.5});
  p.mutable_grad()[0] = 1.0;
  Adam<double> adam;
  adam.step(s);
  EXPECT_NEAR(p.data()[0] - 0.5, -1e-4 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(adam.steps(), 1u);

  ParameterStore<double> s2;
  auto q = s2.add("q", {1, 1, 1, 1}, {0.5});
  q.mutable_grad()[0] = -3.0; // magnitude cancels at t = 1
  Adam<double>().step(s2);
  EXPECT_NEAR(q.data()[0] - 0.5, 1e-4 * 3.0 / (3.0 + 1e-8), 1e-15);
}

TEST(Adam, ZeroGradientIsIdentity) {
  ParameterStore<double> s;
  Rng rng(4);
  auto p = s.add("p", {1, 2, 3, 3}, std::vector<double>(18));
  for (auto& v : p.mutable_data()) v = rng.uniform(-1, 1);
  const std::vector<double> before(p.data().begin(), p.data().end());
  Adam<double> adam;
  for (int i = 0; i < 5; ++i) {
    p.zero_grad();
    std::fill(p.mutable_grad().begin(), p.mutable_grad().end(), 0.0);
    adam.step(s);
  }
  EXPECT_TRUE(std::equal(before.begin(), before.end(), p.data().begin()));
}

TEST(Adam, RequiresPopulatedGradients) {
  ParameterStore<double> s;
  auto p = s.add("p", {1, 1, 1, 2}, {1, 2});
  Adam<double> adam;
  EXPECT_THROW(adam.step(s), AutodiffError);
  backward(sum(mul(p, p)));
  EXPECT_NO_THROW(adam.step(s));
  s.zero_grad();
  EXPECT_THROW(adam.step(s), AutodiffError);
}

TEST(Train, EpochsZeroCheckpointEqualsInit) {
  const auto dir = scratch("epochs0");
  WRICNet<float> model(fixtures::overfit_model(), 3);
  TrainOptions opt;
  opt.epochs = 0;
  opt.checkpoint_dir = dir;
  const auto res = train(model, fixtures::overfit_tiles(), opt);
  EXPECT_EQ(res.epochs_run, 0u);
  WRICNet<float> fresh(fixtures::overfit_model(), 3), loaded(fixtures::overfit_model(), 99);
  load_checkpoint(loaded.parameters(), dir / "best");
  EXPECT_TRUE(same_params(loaded.parameters(), fresh.parameters()));
  load_checkpoint(loaded.parameters(), dir / "last");
  EXPECT_TRUE(same_params(loaded.parameters(), fresh.parameters()));
  EXPECT_THROW(train(model, {}, opt), std::invalid_argument);
}

TEST(Train, SeededRunsAreBitIdentical) {
  auto tiles = fixtures::overfit_tiles();
  tiles.resize(3);
  const auto run = [&](const std::string& tag, std::uint64_t seed) {
    const auto dir = scratch(tag);
    WRICNet<float> model(fixtures::overfit_model(), 5);
    TrainOptions opt;
    opt.epochs = 2;
    opt.seed = seed;
    opt.loss_log = dir / "loss_log.csv";
    opt.checkpoint_dir = dir / "ckpt";
    train(model, tiles, opt);
    std::ifstream in(*opt.loss_log);
    std::stringstream ss;
    ss << in.rdbuf();
    return std::pair{ss.str(), std::move(model)};
  };
  auto [log_a, model_a] = run("det_a", 11);
  auto [log_b, model_b] = run("det_b", 11);
  EXPECT_EQ(log_a, log_b);
  EXPECT_TRUE(same_params(model_a.parameters(), model_b.parameters()));
  EXPECT_TRUE(log_a.starts_with("step,epoch,L_ri,L_wri,L_ed,L_wed,L_fu,total\n"));
  EXPECT_EQ(std::count(log_a.begin(), log_a.end(), '\n'), 1 + 2 * 3);

  auto [log_c, model_c] = run("det_c", 12);
  EXPECT_NE(log_a, log_c); // different shuffle and augmentation
}

TEST(Train, LossLogAppends) {
  const auto dir = scratch("append");
  auto tiles = fixtures::overfit_tiles();
  tiles.resize(1);
  WRICNet<float> model(fixtures::overfit_model(), 5);
  TrainOptions opt;
  opt.epochs = 1;
  opt.loss_log = dir / "log.csv";
  train(model, tiles, opt);
  train(model, tiles, opt);
  std::ifstream in(*opt.loss_log);
  std::string line;
  std::size_t lines = 0, headers = 0;
  while (std::getline(in, line)) {
    ++lines;
    headers += line.starts_with("step");
  }
  EXPECT_EQ(lines, 3u);
  EXPECT_EQ(headers, 1u);
}

TEST(Train, EarlyStopHookAndBestEpoch) {
  auto tiles = fixtures::overfit_tiles();
  tiles.resize(2);
  WRICNet<float> model(fixtures::overfit_model(), 5);
  TrainOptions opt;
  opt.epochs = 10;
  std::vector<double> means;
  opt.on_epoch_end = [&](const EpochSummary& s) {
    means.push_back(s.mean_total);
    return s.epoch < 2;
  };
  const auto res = train(model, tiles, opt);
  EXPECT_EQ(res.epochs_run, 3u);
  EXPECT_EQ(res.log.size(), 6u);
  EXPECT_EQ(res.best_loss, *std::min_element(means.begin(), means.end()));
}

TEST(Train, FirstTenStepsDecreaseTrainingLoss) {
  const auto tiles = fixtures::overfit_tiles();
  WRICNet<float> model(fixtures::overfit_model(), 1);
  Adam<float> adam;
  double prev = fixtures::dataset_loss(model, tiles);
  for (std::size_t step = 0; step < 10; ++step) {
    const TilePair& tp = tiles[step % tiles.size()];
    model.parameters().zero_grad();
    const auto outs = model.forward(image_to_tensor<float>(tp.t1), image_to_tensor<float>(tp.t2));
    backward(joint_loss(outs, mask_to_onehot<float>(tp.gt), LossWeights{}, class_weights_from_mask(tp.gt)).total);
    adam.step(model.parameters());
    const double now = fixtures::dataset_loss(model, tiles);
    EXPECT_LT(now, prev) << "step " << step;
    prev = now;
  }
}

TEST(Train, NoWeightedClassVariantIgnoresWeights) {
  // With class weighting off the loss on a tile equals the unweighted loss.
  auto tiles = fixtures::overfit_tiles();
  tiles.resize(1);
  ModelConfig cfg = fixtures::overfit_model();
  cfg.variant = Variant::no_weighted_class;
  WRICNet<float> model(cfg, 5);
  TrainOptions opt;
  opt.epochs = 1;
  opt.augment = false;
  WRICNet<float> probe(cfg, 5);
  const auto& tp = tiles[0];
  const auto outs = probe.forward(image_to_tensor<float>(tp.t1), image_to_tensor<float>(tp.t2));
  const double unweighted =
      joint_loss(outs, mask_to_onehot<float>(tp.gt), LossWeights{}, ClassWeights{}).total.item();
  const auto res = train(model, tiles, opt);
  EXPECT_EQ(res.log[0].total, unweighted);
}
