#include "wricnet/checkpoint.hpp"
#include "wricnet/dataset.hpp"
#include "wricnet/model.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <unistd.h>

using namespace wricnet;
namespace fs = std::filesystem;

namespace {

class TempDir : public ::testing::Test {
protected:
  fs::path dir;
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir = fs::temp_directory_path() /
          ("wricnet_" + std::to_string(::getpid()) + "_" + info->test_suite_name() + "_" + info->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }
};

Image<std::uint8_t> random_u8(std::size_t c, std::size_t h, std::size_t w, Rng& rng) {
  Image<std::uint8_t> img(c, h, w);
  for (auto& v : img.data) v = static_cast<std::uint8_t>(rng.below(256));
  return img;
}

ModelConfig small_model(double ws = 0.125) {
  ModelConfig c;
  c.input_h = c.input_w = 16;
  c.width_scale = ws;
  return c;
}

template <class T> bool same_bits(const ParameterStore<T>& a, const ParameterStore<T>& b) {
  if (a.entries().size() != b.entries().size()) return false;
  for (std::size_t i = 0; i < a.entries().size(); ++i) {
    const auto x = a.entries()[i].tensor.data(), y = b.entries()[i].tensor.data();
    if (x.size() != y.size() || std::memcmp(x.data(), y.data(), x.size_bytes()) != 0) return false;
  }
  return true;
}

void write_lines(const fs::path& p, const std::vector<std::string>& lines) {
  std::ofstream os(p);
  for (const auto& l : lines) os << l << '\n';
}

} // namespace

using Png = TempDir;
using Checkpoint = TempDir;
using Dataset = TempDir;

TEST_F(Png, RoundTrip) {
  Rng rng(1);
  const auto rgb = random_u8(3, 17, 23, rng), gray = random_u8(1, 9, 4, rng);
  write_png(dir / "rgb.png", rgb);
  write_png(dir / "sub" / "gray.png", gray);
  EXPECT_EQ(read_png(dir / "rgb.png", 3), rgb);
  EXPECT_EQ(read_png(dir / "sub" / "gray.png", 1), gray);
  // grey promoted to RGB replicates the channel
  const auto promoted = read_png(dir / "sub" / "gray.png", 3);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 36; ++i) EXPECT_EQ(promoted.data[c * 36 + i], gray.data[i]);
  EXPECT_THROW(read_png(dir / "nope.png", 3), ImageIOError);
  EXPECT_THROW(write_png(dir / "x.png", Image<std::uint8_t>(2, 4, 4)), std::invalid_argument);
}

TEST_F(Png, LabelsAreBinary) {
  Mask m(1, 5, 5);
  for (std::size_t i = 0; i < 25; i += 3) m.data[i] = 1;
  write_label_png(dir / "l.png", m);
  EXPECT_EQ(read_png(dir / "l.png", 1).data[0], 255);
  EXPECT_EQ(read_label_png(dir / "l.png"), m);
  Image<std::uint8_t> odd(1, 2, 2);
  odd.data = {0, 7, 128, 0};
  write_png(dir / "odd.png", odd);
  EXPECT_EQ(read_label_png(dir / "odd.png").data, (std::vector<std::uint8_t>{0, 1, 1, 0}));
}

TEST_F(Checkpoint, BitExactRoundTrip) {
  WRICNet<float> a(small_model(), 1), b(small_model(), 2);
  ASSERT_FALSE(same_bits(a.parameters(), b.parameters()));
  save_checkpoint(a.parameters(), dir / "ck" / "best");
  EXPECT_TRUE(fs::exists(dir / "ck" / "best.bin"));
  EXPECT_TRUE(fs::exists(dir / "ck" / "best.manifest"));
  load_checkpoint(b.parameters(), dir / "ck" / "best");
  EXPECT_TRUE(same_bits(a.parameters(), b.parameters()));
  EXPECT_EQ(fs::file_size(dir / "ck" / "best.bin"), a.parameter_count() * sizeof(float));

  Rng rng(3);
  const ImageF img = [&] {
    ImageF i(3, 16, 16);
    for (auto& v : i.data) v = static_cast<float>(rng.uniform());
    return i;
  }();
  NoGradGuard g;
  const auto x = image_to_tensor<float>(img);
  const auto oa = a.forward(x, x).fu, ob = b.forward(x, x).fu;
  EXPECT_TRUE(std::equal(oa.data().begin(), oa.data().end(), ob.data().begin()));

  WRICNet<double> d1(small_model(), 4), d2(small_model(), 5);
  save_checkpoint(d1.parameters(), dir / "dbl");
  load_checkpoint(d2.parameters(), dir / "dbl");
  EXPECT_TRUE(same_bits(d1.parameters(), d2.parameters()));
}

TEST_F(Checkpoint, Mismatches) {
  WRICNet<float> a(small_model(), 1);
  save_checkpoint(a.parameters(), dir / "a");

  WRICNet<double> dbl(small_model(), 1);
  EXPECT_THROW(load_checkpoint(dbl.parameters(), dir / "a"), CheckpointError);

  WRICNet<float> wider(small_model(0.25), 1);
  EXPECT_THROW(load_checkpoint(wider.parameters(), dir / "a"), CheckpointError);

  ModelConfig other = small_model();
  other.variant = Variant::no_rich_scale_block;
  WRICNet<float> renamed(other, 1);
  EXPECT_ANY_THROW(load_checkpoint(renamed.parameters(), dir / "a"));

  EXPECT_THROW(load_checkpoint(a.parameters(), dir / "missing"), CheckpointError);

  // drop the last array from the manifest
  std::vector<std::string> lines;
  {
    std::ifstream in(dir / "a.manifest");
    for (std::string l; std::getline(in, l);) lines.push_back(l);
  }
  lines.pop_back();
  write_lines(dir / "a.manifest", lines);
  try {
    load_checkpoint(a.parameters(), dir / "a");
    ADD_FAILURE() << "short manifest accepted";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("arrays"), std::string::npos);
  }

  save_checkpoint(a.parameters(), dir / "t");
  fs::resize_file(dir / "t.bin", fs::file_size(dir / "t.bin") - 4);
  EXPECT_THROW(load_checkpoint(a.parameters(), dir / "t"), CheckpointError);
}

TEST_F(Dataset, PrepareAndLoad) {
  const auto sources = synth_dataset(2, 256, 3);
  const std::size_t n = write_prepared(sources, {kAllTiers.begin(), kAllTiers.end()}, 64, dir, {{"seed", "3"}});
  EXPECT_EQ(n, 42u); // (16 + 4 + 1) per pair
  EXPECT_TRUE(fs::exists(dir / "MR" / "label" / "synth1_1_0.png"));

  const auto all = load_prepared(dir, {kAllTiers.begin(), kAllTiers.end()});
  EXPECT_EQ(all.size(), 42u);
  EXPECT_EQ(load_prepared(dir, {Tier::HR}).size(), 32u);
  EXPECT_EQ(load_prepared(dir, {Tier::HR, Tier::LR}, std::set<std::string>{"synth0"}).size(), 17u);

  for (Tier t : kAllTiers) {
    const auto want = make_tier_tiles(sources[1], t, 64);
    for (const auto& w : want) {
      const auto got = std::find_if(all.begin(), all.end(), [&](const TilePair& tp) { return tp.tile_id() == w.tile_id(); });
      ASSERT_NE(got, all.end()) << w.tile_id();
      EXPECT_EQ(got->gt, w.gt);
      EXPECT_EQ(got->t1, normalize(to_unit_float(to_u8(w.t1))));
      EXPECT_EQ(got->t2, normalize(to_unit_float(to_u8(w.t2))));
    }
  }
  std::ifstream man(dir / "manifest.csv");
  std::string first;
  std::getline(man, first);
  EXPECT_EQ(first, "# seed=3");

  write_lines(dir / "manifest.csv", {"tier,source,row"});
  EXPECT_THROW(load_prepared(dir, {Tier::HR}), ImageIOError);
  EXPECT_THROW(load_prepared(dir / "none", {Tier::HR}), ImageIOError);
}

TEST_F(Dataset, SourceDirectory) {
  Rng rng(5);
  const auto a = random_u8(3, 32, 32, rng), b = random_u8(3, 32, 32, rng);
  Mask gt(1, 32, 32);
  gt.data[5] = 1;
  write_png(dir / "A" / "x.png", a);
  write_png(dir / "B" / "x.png", b);
  EXPECT_THROW(load_source_dir(dir), ImageIOError); // no label/ yet
  write_label_png(dir / "label" / "x.png", gt);
  const auto src = load_source_dir(dir);
  ASSERT_EQ(src.size(), 1u);
  EXPECT_EQ(src[0].id, "x");
  EXPECT_EQ(to_u8(src[0].t1), a);
  EXPECT_EQ(src[0].gt, gt);

  write_png(dir / "A" / "y.png", a);
  EXPECT_THROW(load_source_dir(dir), ImageIOError); // y has no B
  write_png(dir / "B" / "y.png", random_u8(3, 16, 32, rng));
  write_label_png(dir / "label" / "y.png", gt);
  EXPECT_THROW(load_source_dir(dir), ImageIOError); // sizes differ
}

TEST_F(Dataset, IdLists) {
  write_lines(dir / "ids.txt", {"# train split", "a1", "  b2  ", "", "c3 # trailing"});
  EXPECT_EQ(read_id_list(dir / "ids.txt"), (std::set<std::string>{"a1", "b2", "c3"}));
  EXPECT_THROW(read_id_list(dir / "none.txt"), ImageIOError);
}
