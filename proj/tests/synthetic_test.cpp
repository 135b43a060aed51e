#include <gtest/gtest.h>

#include <set>

#include "layerfuse/synthetic.hpp"
#include "test_util.hpp"

using namespace layerfuse;

namespace {

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.n_models = 2;
  s.layers = {4};
  s.dims = {6, 10};
  s.peak_layers = {2, 3};
  s.n_train = 24;
  s.n_test = 12;
  s.n_classes = 3;
  s.latent_dim = 4;
  s.seed = 5;
  return s;
}

std::string message_of(const SyntheticSpec& s) {
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(GenSynthetic, WritesExpectedLayout) {
  lftest::TempDir dir;
  const auto m = gen_synthetic(small_spec(), dir.path());
  // 2 models x 5 layers (0..4) x 2 splits.
  EXPECT_EQ(m.entries.size(), 20u);
  EXPECT_TRUE(std::filesystem::exists(dir / "manifest.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "labels_train.lbl"));
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "m1" / "layer_4_test.lef"));
  EXPECT_EQ(m.layers("synth", "m0"), (std::vector<int>{0, 1, 2, 3, 4}));
  EXPECT_EQ(read_embedding_header(dir.path() / "m1" / "layer_0_train.lef").dim, 10u);
  EXPECT_EQ(m.metadata["peak_layers"]["m1"], 3);

  const auto loaded = load_manifest(dir / "manifest.json");
  EXPECT_EQ(loaded.entries.size(), m.entries.size());
}

TEST(GenSynthetic, LabelsAreBalanced) {
  lftest::TempDir dir;
  gen_synthetic(small_spec(), dir.path());
  const auto lv = read_label_file(dir / "labels_train.lbl");
  std::vector<int> counts(3, 0);
  for (auto y : lv.labels) ++counts[y];
  EXPECT_EQ(counts, (std::vector<int>{8, 8, 8}));
}

TEST(GenSynthetic, SameSpecGivesIdenticalFiles) {
  lftest::TempDir a, b;
  gen_synthetic(small_spec(), a.path());
  gen_synthetic(small_spec(), b.path());
  std::size_t files = 0;
  for (const auto& e : std::filesystem::recursive_directory_iterator(a.path())) {
    if (!e.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(e.path(), a.path());
    EXPECT_EQ(lftest::read_bytes(e.path()), lftest::read_bytes(b.path() / rel)) << rel;
    ++files;
  }
  EXPECT_EQ(files, 20u + 2u + 1u);

  lftest::TempDir c;
  auto other = small_spec();
  other.seed = 6;
  gen_synthetic(other, c.path());
  EXPECT_NE(lftest::read_bytes(a.path() / "m0" / "layer_2_train.lef"),
            lftest::read_bytes(c.path() / "m0" / "layer_2_train.lef"));
}

TEST(GenSynthetic, NoiseFreePeakLayerIsAFunctionOfTheLabel) {
  lftest::TempDir dir;
  auto s = small_spec();
  s.noise = 0.0;
  gen_synthetic(s, dir.path());
  const auto lv = read_label_file(dir / "labels_train.lbl");
  const auto peak = read_embedding_file(dir.path() / "m0" / "layer_2_train.lef");
  std::vector<std::vector<float>> proto(3);
  for (std::size_t i = 0; i < lv.labels.size(); ++i) {
    const auto r = peak.row(i);
    auto& p = proto[lv.labels[i]];
    if (p.empty()) p.assign(r.begin(), r.end());
    EXPECT_EQ(std::vector<float>(r.begin(), r.end()), p) << "sample " << i;
  }
  EXPECT_NE(proto[0], proto[1]);
  EXPECT_NE(proto[1], proto[2]);

  // Away from the peak the nuisance term makes same-class rows differ.
  const auto off = read_embedding_file(dir.path() / "m0" / "layer_0_train.lef");
  std::set<std::vector<float>> distinct;
  for (std::size_t i = 0; i < off.n_samples; ++i) distinct.insert({off.row(i).begin(), off.row(i).end()});
  EXPECT_EQ(distinct.size(), off.n_samples);
}

TEST(GenSynthetic, DecayOneWithoutNoiseMakesAllLayersIdentical) {
  lftest::TempDir dir;
  auto s = small_spec();
  s.noise = 0.0;
  s.layer_decay = 1.0;
  gen_synthetic(s, dir.path());
  const auto ref = lftest::read_bytes(dir.path() / "m1" / "layer_0_test.lef");
  for (int L = 1; L <= 4; ++L) {
    EXPECT_EQ(lftest::read_bytes(dir.path() / "m1" / ("layer_" + std::to_string(L) + "_test.lef")), ref);
  }
}

TEST(GenSynthetic, DisjointLayoutHidesSomeClassPairsFromEachModel) {
  lftest::TempDir dir;
  auto s = small_spec();
  s.layout = FeatureLayout::kDisjoint;
  s.n_classes = 4;
  s.noise = 0.0;
  s.peak_layers = {2};
  s.n_train = 16;
  gen_synthetic(s, dir.path());
  const auto lv = read_label_file(dir / "labels_train.lbl");
  // Base-2 digits: model 0 sees bit 0 of the class, model 1 sees bit 1.
  for (int m = 0; m < 2; ++m) {
    const auto x = read_embedding_file(dir.path() / ("m" + std::to_string(m)) / "layer_2_train.lef");
    std::vector<std::vector<float>> proto(4);
    for (std::size_t i = 0; i < lv.labels.size(); ++i) proto[lv.labels[i]].assign(x.row(i).begin(), x.row(i).end());
    const int place = m == 0 ? 1 : 2;
    for (int c = 0; c < 4; ++c) {
      for (int d = 0; d < 4; ++d) {
        const bool same_digit = (c / place) % 2 == (d / place) % 2;
        EXPECT_EQ(proto[c] == proto[d], same_digit) << "model " << m << " classes " << c << "," << d;
      }
    }
  }
}

TEST(SyntheticSpec, ValidationNamesTheField) {
  auto s = small_spec();
  s.peak_layers = {9};
  EXPECT_EQ(message_of(s), "peak_layers: 9 is outside 1..4");
  s = small_spec();
  s.dims = {1, 2, 3};
  EXPECT_EQ(message_of(s).rfind("dims:", 0), 0u);
  s = small_spec();
  s.n_classes = 1;
  EXPECT_EQ(message_of(s).rfind("n_classes:", 0), 0u);
  s = small_spec();
  s.layer_decay = 0.0;
  EXPECT_EQ(message_of(s).rfind("layer_decay:", 0), 0u);
  s = small_spec();
  s.layout = FeatureLayout::kDisjoint;
  s.latent_dim = 1;
  EXPECT_EQ(message_of(s).rfind("latent_dim:", 0), 0u);
  EXPECT_EQ(message_of(small_spec()), "");
}

TEST(FeatureLayout, NamesRoundTrip) {
  for (auto l : {FeatureLayout::kShared, FeatureLayout::kDisjoint, FeatureLayout::kOverlap}) {
    EXPECT_EQ(parse_feature_layout(to_string(l)), l);
  }
  EXPECT_THROW(parse_feature_layout("random"), std::invalid_argument);
}
