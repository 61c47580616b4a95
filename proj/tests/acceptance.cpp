// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include "fixtures.hpp"
#include "oracles.hpp"

#include "wricnet/checkpoint.hpp"
#include "wricnet/gradcheck.hpp"

#include <chrono>
#include <cstdio>
#include <cstring>
#include <unistd.h>

using namespace wricnet;
using oracles::random_image;
using oracles::random_mask;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Check {
  bool ok = true;
  std::string first_failure;
  void require(bool cond, const std::string& what) {
    if (!cond && ok) first_failure = what;
    ok = ok && cond;
  }
};

int failures = 0;

void report(int n, const char* name, const Check& c, const std::string& detail) {
  std::printf("criterion %d %-28s %s  %s%s%s\n", n, name, c.ok ? "PASS" : "FAIL", detail.c_str(),
              c.ok ? "" : "  first failure: ", c.first_failure.c_str());
  std::fflush(stdout);
  if (!c.ok) ++failures;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

void gradients() {
  Check c;
  GradcheckOptions opt;
  const auto t0 = Clock::now();
  const auto blocks = run_gradcheck_suite(0, opt);
  const double sec = seconds_since(t0);
  double worst = 0;
  std::string all;
  for (const auto& b : blocks) {
    const double e = b.report.max_rel_err();
    worst = std::max(worst, e);
    all += b.block + " ";
    std::printf("    %-32s max rel err %.3e\n", b.block.c_str(), e);
    c.require(e < 1e-4, b.block + " rel err " + std::to_string(e));
  }
  for (const char* want : {"weighted_scale_block", "rich_scale_block", "wri_module", "spatial_attention", "wrc_coder", "wricnet_joint_loss"})
    c.require(all.find(want) != std::string::npos, std::string("no block named ") + want);
  c.require(sec < 120, "suite took " + std::to_string(sec) + " s");
  report(1, "(gradient check)", c, std::to_string(blocks.size()) + fmt(" blocks, worst %.2e, %.1f s", worst, sec));
}

void param_ordering() {
  Check c;
  const auto t0 = Clock::now();
  std::map<Variant, std::size_t> n;
  for (Variant v : kAllVariants) {
    ModelConfig m;
    m.variant = v;
    n[v] = count_params(m);
  }
  const double sec = seconds_since(t0);
  const std::array<Variant, 6> order{Variant::no_inception_v2,  Variant::no_rich_scale_block,
                                     Variant::proposed,         Variant::no_multi_channel,
                                     Variant::no_weighted_scale_block, Variant::no_rich_scale_block_v2};
  for (Variant v : order) {
    const auto ref = reference_param_count(v);
    std::printf("    %-26s %9zu  reference %9zu  delta %+lld\n", std::string(variant_name(v)).c_str(), n[v], ref,
                static_cast<long long>(n[v]) - static_cast<long long>(ref));
  }
  for (std::size_t i = 1; i < order.size(); ++i)
    c.require(n[order[i - 1]] > n[order[i]],
              std::string(variant_name(order[i - 1])) + " !> " + std::string(variant_name(order[i])));
  c.require(n[Variant::no_weighted_class] == n[Variant::proposed], "no_weighted_class differs from proposed");
  c.require(sec < 1.0, "counting took " + std::to_string(sec) + " s");
  report(2, "(parameter ordering)", c, fmt("strict ordering over 6 rows, %.3f s", sec));
}

void metric_oracle() {
  Check c;
  Rng rng(3);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const Mask p = random_mask(32, 32, rng, rng.uniform()), g = random_mask(32, 32, rng, rng.uniform() * 0.5);
    const ConfusionMatrix cm = confusion(p, g);
    c.require(cm == oracles::naive_confusion(p, g), "confusion differs on pair " + std::to_string(i));
    const Metrics m = metrics(cm);
    const auto r = oracles::naive_metrics(cm);
    for (double d : {m.ma - r.ma, m.fa - r.fa, m.f1 - r.f1, m.iou - r.iou}) worst = std::max(worst, std::abs(d));
  }
  c.require(worst <= 1e-12, "ratio error " + std::to_string(worst));
  const Metrics f = metrics({50, 10, 40, 900});
  const auto r4 = [](double v) { return std::round(v * 1e4) / 1e4; };
  c.require(r4(f.ma) == 0.4444 && r4(f.fa) == 0.1667 && r4(f.f1) == 0.6667 && r4(f.iou) == 0.5,
            "worked fixture");
  report(3, "(metric oracle)", c,
         fmt("1000 pairs, max ratio err %.1e; fixture MA %.4f FA %.4f", worst, f.ma, f.fa) + fmt(" F1 %.4f IoU %.4f", f.f1, f.iou));
}

// Independent top-k selection: copy, sort by (-F1, id), sum the prefix.
Metrics oracle_loi(std::vector<TileResult> tiles, double fraction) {
  std::sort(tiles.begin(), tiles.end(), [](const TileResult& a, const TileResult& b) {
    return a.m.f1 != b.m.f1 ? a.m.f1 > b.m.f1 : a.id < b.id;
  });
  const double exact = fraction * static_cast<double>(tiles.size());
  std::size_t k = static_cast<std::size_t>(exact);
  if (exact - static_cast<double>(k) >= 0.5 - 1e-9) ++k;
  k = std::max<std::size_t>(1, std::min(k, tiles.size()));
  ConfusionMatrix sum;
  for (std::size_t i = 0; i < k; ++i) sum += tiles[i].cm;
  return metrics(sum);
}

void loi_gi() {
  Check c;
  std::vector<TileResult> three{make_tile_result("c", Tier::HR, {0, 10, 10, 80}),
                                make_tile_result("a", Tier::HR, {10, 0, 0, 90}),
                                make_tile_result("b", Tier::HR, {5, 5, 5, 85})};
  c.require(loi(three, 0.10).f1 == 1.0, "3-tile fixture");
  // z and m tie on F1; with k = 2 the id decides which joins the best tile
  std::vector<TileResult> ties{make_tile_result("z", Tier::HR, {4, 1, 1, 0}),
                               make_tile_result("m", Tier::HR, {8, 1, 3, 0}),
                               make_tile_result("a", Tier::HR, {10, 0, 0, 0})};
  c.require(ties[0].m.f1 == ties[1].m.f1 && loi(ties, 0.5).f1 == metrics({18, 1, 3, 0}).f1, "tie broken by id");

  Rng rng(4);
  std::size_t fixtures = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<TileResult> tiles;
    const std::size_t n = 1 + rng.below(80);
    for (std::size_t i = 0; i < n; ++i) {
      ConfusionMatrix cm{rng.below(200), rng.below(100), rng.below(100), 1000 + rng.below(1000)};
      if (rng.below(6) == 0) cm.tp = cm.fn = 0;
      if (rng.below(6) == 0) cm.fp = 0;
      tiles.push_back(make_tile_result("t" + std::to_string(rng.below(50)), Tier::HR, cm));
    }
    for (double f : {0.05, 0.10}) {
      const Metrics a = loi(tiles, f), b = oracle_loi(tiles, f);
      c.require(a.f1 == b.f1 && a.ma == b.ma && a.fa == b.fa && a.iou == b.iou, "top-k mismatch in trial " + std::to_string(trial));
    }
    const double l5 = loi(tiles, 0.05).f1, l10 = loi(tiles, 0.10).f1, g = gi(tiles).f1;
    c.require(l5 >= l10 && l10 >= g, "monotonicity in trial " + std::to_string(trial));
    ++fixtures;
  }

  std::size_t stitched = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const Mask pred = random_mask(256, 256, rng, 0.2), gt = random_mask(256, 256, rng, 0.1);
    const auto pt = tile(pred, 64, 64), gtl = tile(gt, 64, 64);
    std::vector<TileResult> rows;
    for (std::size_t i = 0; i < pt.size(); ++i)
      rows.push_back(make_tile_result(std::to_string(i), Tier::HR, confusion(pt[i].image, gtl[i].image)));
    ConfusionMatrix sum;
    for (const auto& r : rows) sum += r.cm;
    const ConfusionMatrix whole = confusion(stitch(pt, 4, 4), stitch(gtl, 4, 4));
    const Metrics a = gi(rows), b = metrics(whole);
    c.require(sum == whole && a.f1 == b.f1 && a.iou == b.iou && a.ma == b.ma && a.fa == b.fa, "GI vs stitched");
    ++stitched;
  }
  report(4, "(LOI/GI protocol)", c,
         std::to_string(fixtures) + " random fixtures, " + std::to_string(stitched) + " stitched images");
}

void shapes() {
  Check c;
  Rng rng(5);
  NoGradGuard g;
  std::size_t cases = 0;
  for (std::size_t C : {16, 32}) {
    ParameterStore<double> s;
    WRIModule<double> wri(WRISpec::preserving(C, 4), "wri", s, rng);
    for (auto [h, w] : {std::pair<std::size_t, std::size_t>{16, 16}, {32, 32}, {48, 64}}) {
      const Shape in{1, C, h, w};
      c.require(wri(random_tensor(in, rng, -1, 1)).fused.shape() == in, "WRI " + in.str());
      ++cases;
    }
  }
  for (double ws : {0.125, 0.25}) {
    const WRCSpec spec = WRCSpec::scaled(ws);
    ParameterStore<double> s;
    WRCoder<double> wrc(spec, "wrc", s, rng);
    for (auto [h, w] : {std::pair<std::size_t, std::size_t>{16, 16}, {32, 32}, {48, 64}, {64, 64}}) {
      const auto out = wrc(random_tensor({1, 6, h, w}, rng, 0, 1));
      c.require(out.out.shape() == Shape{1, 6, h, w}, "WRC output at " + std::to_string(h) + "x" + std::to_string(w));
      c.require(out.bottleneck.shape() == Shape{1, static_cast<std::size_t>(256 * ws), h / 16, w / 16},
                "WRC bottleneck " + out.bottleneck.shape().str());
      ++cases;
    }
  }
  double worst = 0;
  for (Variant v : kAllVariants)
    for (auto [h, w] : {std::pair<std::size_t, std::size_t>{16, 16}, {32, 48}}) {
      ModelConfig mc;
      mc.variant = v;
      mc.width_scale = 0.125;
      mc.input_h = h;
      mc.input_w = w;
      WRICNet<double> m(mc, 1);
      const auto outs = m.forward(random_tensor({1, 3, h, w}, rng, 0, 1), random_tensor({1, 3, h, w}, rng, 0, 1));
      for (const auto* o : outs.all()) {
        c.require(o->shape() == Shape{1, 2, h, w}, std::string(variant_name(v)) + " output " + o->shape().str());
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            const double a = o->at(0, 0, y, x), b = o->at(0, 1, y, x);
            c.require(a >= 0 && b >= 0, "negative probability");
            worst = std::max(worst, std::abs(a + b - 1));
          }
      }
      ++cases;
    }
  c.require(worst <= 1e-6, "channel sum off by " + std::to_string(worst));
  report(5, "(shape contracts)", c, std::to_string(cases) + " cases" + fmt(", max |sum-1| %.1e", worst));
}

void overfit() {
  Check c;
  const auto tiles = fixtures::overfit_tiles(7);
  TrainOptions opt;
  opt.seed = 1;
  opt.augment = false;
  opt.epochs = 200;
  const auto t0 = Clock::now();
  WRICNet<float> model(fixtures::overfit_model(), 1);
  double f1 = 0;
  std::size_t reached = 0;
  opt.on_epoch_end = [&](const EpochSummary& s) {
    f1 = fixtures::training_gi(model, tiles).f1;
    if (s.epoch % 10 == 9) std::printf("    epoch %3zu  loss %.4f  GI F1 %.4f  (%.0f s)\n", s.epoch + 1, s.mean_total, f1, seconds_since(t0));
    std::fflush(stdout);
    if (f1 > 0.95) {
      reached = s.epoch + 1;
      return false;
    }
    return true;
  };
  const auto res = train(model, tiles, opt);
  const double sec = seconds_since(t0);
  c.require(reached > 0, "GI F1 " + std::to_string(f1) + " after " + std::to_string(res.epochs_run) + " epochs");
  c.require(sec < 600, "took " + std::to_string(sec) + " s");

  // same seed, same everything
  TrainOptions shortopt = opt;
  shortopt.epochs = 2;
  shortopt.on_epoch_end = nullptr;
  WRICNet<float> a(fixtures::overfit_model(), 1), b(fixtures::overfit_model(), 1);
  const auto ra = train(a, tiles, shortopt), rb = train(b, tiles, shortopt);
  bool same = ra.log.size() == rb.log.size();
  for (std::size_t i = 0; same && i < ra.log.size(); ++i) same = ra.log[i].total == rb.log[i].total;
  for (std::size_t i = 0; same && i < a.parameters().entries().size(); ++i) {
    const auto x = a.parameters().entries()[i].tensor.data(), y = b.parameters().entries()[i].tensor.data();
    same = std::memcmp(x.data(), y.data(), x.size_bytes()) == 0;
  }
  c.require(same, "repeated run differs");
  report(6, "(overfit sanity)", c,
         fmt("GI F1 %.4f at epoch %.0f, %.0f s; repeat run identical", f1, static_cast<double>(reached ? reached : res.epochs_run), sec));
}

void round_trips() {
  Check c;
  Rng rng(7);
  const ImageF big = random_image(3, 1024, 1024, rng);
  c.require(stitch(tile(big), 4, 4) == big, "tile/stitch");

  const auto x = random_tensor({1, 12, 5, 7}, rng, -1, 1);
  const auto y = concat_channels(split_channels(x, 4));
  c.require(std::memcmp(x.data().data(), y.data().data(), x.data().size_bytes()) == 0, "split/concat");

  const Mask m = random_mask(9, 9, rng);
  c.require(flip_up_down(flip_up_down(m)) == m && flip_left_right(flip_left_right(m)) == m, "flip involution");
  c.require(rotate90_ccw(rotate90_ccw(rotate90_ccw(rotate90_ccw(m)))) == m, "rotation period 4");

  const fs::path dir = fs::temp_directory_path() / ("wricnet_accept_" + std::to_string(::getpid()));
  {
    ModelConfig mc;
    mc.input_h = mc.input_w = 16;
    mc.width_scale = 0.125;
    WRICNet<float> a(mc, 1), b(mc, 2);
    save_checkpoint(a.parameters(), dir / "ck");
    load_checkpoint(b.parameters(), dir / "ck");
    bool same = true;
    for (std::size_t i = 0; i < a.parameters().entries().size(); ++i) {
      const auto p = a.parameters().entries()[i].tensor.data(), q = b.parameters().entries()[i].tensor.data();
      same = same && std::memcmp(p.data(), q.data(), p.size_bytes()) == 0;
    }
    c.require(same, "checkpoint");
  }
  fs::remove_all(dir);

  for (int i = 0; i < 50; ++i)
    for (std::size_t d : {2, 4})
      for (auto v : resample_nearest(random_mask(64, 64, rng, rng.uniform()), d).data) c.require(v <= 1, "nearest not binary");

  double worst = 0;
  for (int i = 0; i < 20; ++i)
    for (std::size_t d : {2, 4}) {
      const ImageF img = random_image(3, 32, 48, rng);
      const ImageF got = resample_bicubic(img, d), want = oracles::brute_bicubic(img, d);
      for (std::size_t k = 0; k < got.data.size(); ++k) worst = std::max(worst, std::abs(static_cast<double>(got.data[k]) - want.data[k]));
    }
  c.require(worst <= 1e-6, "bicubic error " + std::to_string(worst));
  report(7, "(pipeline round trips)", c, fmt("bicubic max err %.1e", worst));
}

void class_balance() {
  Check c;
  Rng rng(8);
  std::size_t checked = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t h = 1 + rng.below(64), w = 1 + rng.below(64);
    Mask gt = random_mask(h, w, rng, rng.uniform() * 0.6);
    gt.data[rng.below(gt.data.size())] = 1; // c > 0
    std::uint64_t cnt = 0;
    for (auto v : gt.data) cnt += v;
    const std::uint64_t un = gt.data.size() - cnt;
    const ClassWeights cw = class_weights_from_mask(gt);
    c.require(balanced(cw, cnt, un), "mask " + std::to_string(i));
    c.require(cw.change == static_cast<double>(un) / static_cast<double>(cnt), "weight value on mask " + std::to_string(i));
    ++checked;
  }
  report(8, "(class-weight balance)", c, std::to_string(checked) + " random masks, c*w_change == uc*w_nonchange");
}

} // namespace

int main() {
  gradients();
  param_ordering();
  metric_oracle();
  loi_gi();
  shapes();
  overfit();
  round_trips();
  class_balance();
  std::printf("%s: %d criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
