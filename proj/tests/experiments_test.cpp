#include <gtest/gtest.h>

#include <cmath>

#include "layerfuse/experiments.hpp"
#include "layerfuse/synthetic.hpp"
#include "test_util.hpp"

using namespace layerfuse;

namespace {

ExperimentOptions fast_options(std::size_t threads = 1) {
  ExperimentOptions o;
  o.train.epochs = 4;
  o.train.hidden = 8;
  o.train.batch_size = 20;
  o.train.lr = 1e-2;
  o.train.seed = 3;
  o.threads = threads;
  return o;
}

SyntheticSpec base_spec() {
  SyntheticSpec s;
  s.n_models = 3;
  s.layers = {5};
  s.dims = {8, 6, 4};
  s.peak_layers = {3};
  s.n_train = 60;
  s.n_test = 30;
  s.n_classes = 3;
  s.latent_dim = 4;
  s.seed = 11;
  return s;
}

class ExperimentsTest : public ::testing::Test {
 protected:
  void SetUp() override { manifest_ = gen_synthetic(base_spec(), dir_.path()); }

  lftest::TempDir dir_;
  Manifest manifest_;
};

bool same_rows(const SweepResult& a, const SweepResult& b) {
  if (a.rows.size() != b.rows.size() || a.best != b.best) return false;
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    const auto &x = a.rows[i], &y = b.rows[i];
    if (x.accuracy != y.accuracy || x.inputs != y.inputs || x.method != y.method || x.error != y.error ||
        x.memory_bytes != y.memory_bytes || x.fused_dim != y.fused_dim || x.k != y.k ||
        x.aggregation != y.aggregation || x.residual != y.residual) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST(CellKey, CanonicalForm) {
  Cell c;
  c.spec.method = FusionMethod::kQuaternion;
  c.spec.residual = true;
  c.spec.inputs = {{"llama2", 20}, {"nv_embed", 32}};
  EXPECT_EQ(cell_key("SST-2", c), "SST-2|quaternion|r1|t0|llama2:20|nv_embed:32");
  Cell agg;
  agg.spec.method = FusionMethod::kNone;
  agg.spec.inputs = {{"m", 9}};
  const auto plain = cell_key("D", agg);
  agg.aggregation = AggregationMode::kMax;
  agg.k = 4;
  EXPECT_EQ(cell_key("D", agg), plain);
  EXPECT_NE(cell_seed(1, plain), cell_seed(2, plain));
  EXPECT_EQ(cell_seed(1, plain), mix_seed(1, stable_hash(plain)));
}

TEST(DefaultThreads, ReadsEnvironment) {
  ::setenv("LAYERFUSE_THREADS", "3", 1);
  EXPECT_EQ(default_threads(), 3u);
  ::setenv("LAYERFUSE_THREADS", "zero", 1);
  EXPECT_EQ(default_threads(), 1u);
  ::unsetenv("LAYERFUSE_THREADS");
  EXPECT_EQ(default_threads(), 1u);
}

TEST_F(ExperimentsTest, StoreResolvesDatasetsAndLayers) {
  EmbeddingStore store(manifest_);
  EXPECT_EQ(store.resolve_dataset(""), "synth");
  EXPECT_THROW(store.resolve_dataset("other"), ExperimentError);
  EXPECT_EQ(store.resolve_layer("synth", "m0", "last"), 5);
  EXPECT_EQ(store.resolve_layer("synth", "m0", "2"), 2);
  EXPECT_THROW(store.resolve_layer("synth", "m0", "-1"), ExperimentError);
  EXPECT_THROW(store.resolve_layer("synth", "m0", "2x"), ExperimentError);
  EXPECT_THROW(store.last_layer("synth", "nope"), ExperimentError);
  EXPECT_EQ(store.matrix("synth", Split::kTrain, "m1", 2), store.matrix("synth", Split::kTrain, "m1", 2));
  EXPECT_THROW(store.matrix("synth", Split::kTrain, "m1", 9), ExperimentError);
}

TEST_F(ExperimentsTest, LayerSweepHasOneRowPerLayerInOrder) {
  EmbeddingStore store(manifest_);
  const auto r = layer_sweep(store, "m0", fast_options());
  ASSERT_EQ(r.rows.size(), 6u);
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    EXPECT_EQ(r.rows[i].inputs[0].layer, static_cast<int>(i));
    EXPECT_EQ(r.rows[i].method, FusionMethod::kNone);
    EXPECT_TRUE(r.rows[i].ok()) << r.rows[i].error;
    EXPECT_GE(r.rows[i].accuracy, 0.0);
    EXPECT_LE(r.rows[i].accuracy, 1.0);
  }
  EXPECT_EQ(r.best, best_row(r));
}

TEST_F(ExperimentsTest, SingleLayerManifestGivesOneRow) {
  lftest::TempDir dir;
  auto s = base_spec();
  s.n_models = 1;
  s.dims = {4};
  s.layers = {1};
  s.peak_layers = {1};
  gen_synthetic(s, dir.path());
  auto m = load_manifest(dir / "manifest.json");
  std::erase_if(m.entries, [](const ManifestEntry& e) { return e.layer != 1; });
  EmbeddingStore store(m);
  const auto r = layer_sweep(store, "m0", fast_options());
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_EQ(r.best, 0u);
}

TEST_F(ExperimentsTest, EveryRowChargesEstimatedMemory) {
  EmbeddingStore store(manifest_);
  PairGrid g{"m0", "m2", {1, 5}, {5}, {FusionMethod::kConcat, FusionMethod::kSum}, {false}, 0};
  const auto pair = pair_fusion_grid(store, g, fast_options());
  for (const auto& row : pair.rows) {
    const std::size_t dims[] = {8, 4};
    EXPECT_EQ(row.memory_bytes, estimate_memory(60, dims));
  }
  EXPECT_EQ(pair.rows[0].fused_dim, 12u);
  EXPECT_EQ(pair.rows[1].fused_dim, 4u);

  const auto multi = multi_layer_sweep(store, "m1", {3}, {AggregationMode::kMean}, fast_options());
  const std::size_t three[] = {6, 6, 6};
  EXPECT_EQ(multi.rows[0].memory_bytes, estimate_memory(60, three));
  EXPECT_EQ(multi.rows[0].fused_dim, 6u);
}

TEST_F(ExperimentsTest, MultiLayerRowOrderAndDepthCap) {
  EmbeddingStore store(manifest_);
  const auto r = multi_layer_sweep(store, "m0", {3, 1, 99, 3},
                                   {AggregationMode::kMean, AggregationMode::kMax}, fast_options());
  ASSERT_EQ(r.rows.size(), 4u);
  EXPECT_EQ(r.rows[0].k, 1u);
  EXPECT_EQ(r.rows[1].aggregation, AggregationMode::kMax);
  EXPECT_EQ(r.rows[2].k, 3u);
  for (const auto& row : r.rows) EXPECT_EQ(row.inputs[0].layer, 5);
  EXPECT_THROW(multi_layer_sweep(store, "m0", {0}, {AggregationMode::kMean}, fast_options()), ExperimentError);
}

TEST_F(ExperimentsTest, KOneEqualsLastLayerRow) {
  EmbeddingStore store(manifest_);
  const auto single = layer_sweep(store, "m1", fast_options());
  const auto multi = multi_layer_sweep(store, "m1", {1},
                                       {AggregationMode::kMean, AggregationMode::kMax, AggregationMode::kMin},
                                       fast_options());
  for (const auto& row : multi.rows) EXPECT_EQ(row.accuracy, single.rows.back().accuracy);
}

TEST(Experiments, IdenticalLayersGiveIdenticalRows) {
  lftest::TempDir dir;
  auto s = base_spec();
  s.noise = 0.0;
  s.layer_decay = 1.0;
  s.nuisance = 3.0;
  const auto m = gen_synthetic(s, dir.path());
  EmbeddingStore store(m);
  auto opts = fast_options();
  opts.train.epochs = 2;  // keep accuracies away from 1.0 so equality is informative
  const auto r = multi_layer_sweep(store, "m2", {1, 2, 4, 6},
                                   {AggregationMode::kMean, AggregationMode::kMax, AggregationMode::kMin}, opts);
  ASSERT_EQ(r.rows.size(), 12u);
  for (const auto& row : r.rows) EXPECT_EQ(row.accuracy, r.rows[0].accuracy) << row.k;
}

TEST_F(ExperimentsTest, OneCellGridEqualsDirectTrain) {
  EmbeddingStore store(manifest_);
  const auto opts = fast_options();
  PairGrid g{"m0", "m1", {4}, {2}, {FusionMethod::kHadamard}, {true}, 4};
  const auto grid = pair_fusion_grid(store, g, opts);
  ASSERT_EQ(grid.rows.size(), 1u);

  Cell c;
  c.spec.method = FusionMethod::kHadamard;
  c.spec.residual = true;
  c.spec.target_dim = 4;
  c.spec.inputs = {{"m0", 4}, {"m1", 2}};
  TrainConfig cfg = opts.train;
  cfg.seed = cell_seed(opts.train.seed, cell_key("synth", c));
  const auto model = train(store.load("synth", Split::kTrain, c.spec.inputs), cfg, c.spec);
  EXPECT_EQ(grid.rows[0].accuracy, evaluate(model, store.load("synth", Split::kTest, c.spec.inputs)));
}

TEST_F(ExperimentsTest, GridIsInvariantToThreadCount) {
  EmbeddingStore store(manifest_);
  PairGrid g{"m0", "m1", {2, 5}, {3, 5}, {FusionMethod::kConcat, FusionMethod::kMoe}, {false}, 0};
  const auto one = pair_fusion_grid(store, g, fast_options(1));
  EmbeddingStore fresh(manifest_);
  const auto four = pair_fusion_grid(fresh, g, fast_options(4));
  EXPECT_TRUE(same_rows(one, four));
  ASSERT_EQ(one.rows.size(), 8u);
  EXPECT_EQ(one.rows[0].inputs, (std::vector<FusionInput>{{"m0", 2}, {"m1", 3}}));
  EXPECT_EQ(one.rows[1].method, FusionMethod::kMoe);
  EXPECT_EQ(one.rows[2].inputs[1].layer, 5);
}

TEST_F(ExperimentsTest, PreconditionViolationsBecomeErrorRows) {
  EmbeddingStore store(manifest_);
  PairGrid g{"m0", "m1", {5}, {5}, {FusionMethod::kMultiply, FusionMethod::kSum, FusionMethod::kConcat},
             {false, true}, 6};
  const auto r = pair_fusion_grid(store, g, fast_options());
  ASSERT_EQ(r.rows.size(), 6u);
  EXPECT_NE(r.rows[0].error.find("perfect square"), std::string::npos);  // multiply, d = 6
  EXPECT_FALSE(r.rows[1].ok());
  EXPECT_TRUE(r.rows[2].ok());   // sum
  EXPECT_TRUE(r.rows[3].ok());   // sum(R)
  EXPECT_TRUE(r.rows[4].ok());   // concat
  EXPECT_NE(r.rows[5].error.find("non-residual"), std::string::npos);  // concat(R)
  ASSERT_TRUE(r.best);
  EXPECT_TRUE(r.rows[*r.best].ok());

  PairGrid missing{"m0", "m1", {7}, {5}, {FusionMethod::kSum}, {false}, 0};
  EXPECT_THROW(pair_fusion_grid(store, missing, fast_options()), ExperimentError);
}

TEST_F(ExperimentsTest, ComboCountsAndStats) {
  EmbeddingStore store(manifest_);
  const auto c = combo_sweep(store, {"m0", "m1", "m2"}, {2, 3}, fast_options());
  ASSERT_EQ(c.result.rows.size(), 4u);
  EXPECT_EQ(c.result.rows[0].inputs, (std::vector<FusionInput>{{"m0", 5}, {"m1", 5}}));
  EXPECT_EQ(c.result.rows[1].inputs, (std::vector<FusionInput>{{"m0", 5}, {"m2", 5}}));
  EXPECT_EQ(c.result.rows[2].inputs, (std::vector<FusionInput>{{"m1", 5}, {"m2", 5}}));
  EXPECT_EQ(c.result.rows[3].fused_dim, 18u);
  ASSERT_EQ(c.per_size.size(), 2u);
  EXPECT_EQ(c.per_size[0].size, 2u);
  EXPECT_EQ(c.per_size[0].count, 3u);
  double mean = 0, sq = 0;
  for (int i = 0; i < 3; ++i) mean += c.result.rows[i].accuracy / 3.0;
  for (int i = 0; i < 3; ++i) sq += std::pow(c.result.rows[i].accuracy - mean, 2) / 3.0;
  EXPECT_NEAR(c.per_size[0].mean, mean, 1e-12);
  EXPECT_NEAR(c.per_size[0].stddev, std::sqrt(sq), 1e-12);
  EXPECT_EQ(c.per_size[1].count, 1u);
  EXPECT_EQ(c.per_size[1].stddev, 0.0);
}

TEST(Experiments, ComboOfFiveModelsSizeThreeHasTenRows) {
  lftest::TempDir dir;
  auto s = base_spec();
  s.n_models = 5;
  s.dims = {3};
  s.n_train = 20;
  s.n_test = 10;
  const auto m = gen_synthetic(s, dir.path());
  EmbeddingStore store(m);
  auto opts = fast_options();
  opts.train.epochs = 1;
  const auto c = combo_sweep(store, {"m0", "m1", "m2", "m3", "m4"}, {3}, opts, {{"m4", 2}});
  EXPECT_EQ(c.result.rows.size(), 10u);
  EXPECT_EQ(c.result.rows.back().inputs.back(), (FusionInput{"m4", 2}));
  EXPECT_THROW(combo_sweep(store, {"m0", "m1"}, {3}, opts), ExperimentError);
  EXPECT_THROW(combo_sweep(store, {"m0", "m1"}, {2}, opts, {{"m9", 1}}), ExperimentError);
}

TEST(Experiments, ZeroNoiseTwoClassPeakLayerIsPerfect) {
  lftest::TempDir dir;
  auto s = base_spec();
  s.n_models = 1;
  s.dims = {8};
  s.n_classes = 2;
  s.noise = 0.0;
  const auto m = gen_synthetic(s, dir.path());
  EmbeddingStore store(m);
  ExperimentOptions o;
  o.train.seed = 1;
  o.train.hidden = 32;
  o.train.epochs = 120;
  const auto r = layer_sweep(store, "m0", o);
  EXPECT_EQ(r.rows[3].accuracy, 1.0);
}

// Layers that are independent noisy copies of the same signal: averaging ten
// of them denoises, taking their minimum does not.
TEST(Experiments, MeanOfNoisyCopiesBeatsMin) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    lftest::TempDir dir;
    SyntheticSpec s;
    s.layers = {10};
    s.peak_layers = {10};
    s.dims = {16};
    s.n_train = 300;
    s.n_test = 300;
    s.noise = 4.0;
    s.layer_decay = 1.0;
    s.seed = 500 + seed;
    EmbeddingStore store(gen_synthetic(s, dir.path()));
    auto opts = fast_options();
    opts.train.seed = seed;
    opts.train.hidden = 32;
    opts.train.epochs = 30;
    const auto r = multi_layer_sweep(store, "m0", {10}, {AggregationMode::kMean, AggregationMode::kMin}, opts);
    ASSERT_EQ(r.rows.size(), 2u);
    EXPECT_GE(r.rows[0].accuracy, r.rows[1].accuracy) << "seed " << seed;
  }
}
