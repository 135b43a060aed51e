// Acceptance run: one PASS/FAIL line per headline criterion. Exit status is
// non-zero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "fusion_oracles.hpp"
#include "gradient_checks.hpp"
#include "layerfuse/classifier.hpp"
#include "layerfuse/embed_store.hpp"
#include "layerfuse/experiments.hpp"
#include "layerfuse/fusion.hpp"
#include "layerfuse/model_registry.hpp"
#include "layerfuse/report.hpp"
#include "layerfuse/synthetic.hpp"
#include "test_util.hpp"

using namespace layerfuse;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<std::size_t> dims_of(std::initializer_list<const char*> names) {
  std::vector<std::size_t> d;
  for (const char* n : names) d.push_back(find_model(n)->dim);
  return d;
}

// ---------------------------------------------------------------------------

Outcome memory_arithmetic() {
  const auto pair = estimate_memory(67349, dims_of({"nv_embed", "e5"}));
  const auto five = estimate_memory(67349, dims_of({"nv_embed", "e5", "llama2", "qwen2.5", "mistral"}));
  const double gib = 1024.0 * 1024.0 * 1024.0;
  const double rel_pair = std::abs(static_cast<double>(pair) / gib - 1.3) / 1.3;
  const double rel_five = std::abs(static_cast<double>(five) / gib - 4.3) / 4.3;
  const bool ok = format_gib(pair) == "1.3 GiB" && format_gib(five) == "4.2 GiB" && rel_pair <= 0.03 &&
                  rel_five <= 0.03;
  return {ok, format_gib(pair) + " / " + format_gib(five) + " (deviation from 1.3 / 4.3: " +
                  fmt("%.1f%%", 100 * rel_pair) + " / " + fmt("%.1f%%", 100 * rel_five) + ")"};
}

Outcome dimension_ledger() {
  auto concat = [](const std::vector<std::size_t>& dims) {
    FusionSpec s;
    s.method = FusionMethod::kConcat;
    for (std::size_t i = 0; i < dims.size(); ++i) s.inputs.push_back({"m" + std::to_string(i), 0});
    return s.fused_dim(dims);
  };
  const auto a = concat(dims_of({"nv_embed", "e5"}));
  const auto b = concat(dims_of({"nv_embed", "e5", "llama2", "qwen2.5", "mistral"}));
  const std::pair<const char*, std::size_t> table[] = {{"llama2", 4096}, {"qwen2.5", 3584}, {"falcon3", 3072},
                                                       {"mistral", 4096}, {"gemma2", 2304}, {"nv_embed", 4096},
                                                       {"e5", 1024}};
  bool registry = true;
  for (const auto& [name, dim] : table) registry = registry && find_model(name) && find_model(name)->dim == dim;
  return {a == 5120 && b == 16896 && registry,
          std::to_string(a) + " / " + std::to_string(b) + ", registry " + (registry ? "complete" : "MISMATCH")};
}

Outcome gradient_suite() {
  const auto checks = lftest::run_gradient_suite(2024);
  double worst = 0;
  std::string failed;
  for (const auto& c : checks) {
    worst = std::max(worst, c.worst);
    if (!c.ok()) failed += " " + c.name + "=" + fmt("%.2e", c.worst);
  }
  return {failed.empty(), std::to_string(checks.size()) + " checks x 20 trials, worst relative error " +
                              fmt("%.2e", worst) + (failed.empty() ? "" : ", failing:" + failed)};
}

Outcome fusion_oracles() {
  Rng rng(77);
  double worst = 0;
  auto diff = [&](const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) {
      worst = INFINITY;
      return;
    }
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  };
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.below(3), d = 4 * (1 + rng.below(4)), s = 1 + rng.below(6);
    std::vector<std::vector<double>> xs;
    for (std::size_t i = 0; i < n; ++i) xs.push_back(lftest::random_vector(rng, d));
    diff(fuse_sum<double>(xs), lftest::sum_oracle(xs));
    diff(fuse_hadamard<double>(xs), lftest::hadamard_oracle(xs));
    diff(fuse_quaternion<double>(xs[0], xs[1]), lftest::quat_oracle(xs[0], xs[1]));
    const auto a = lftest::random_vector(rng, s * s), b = lftest::random_vector(rng, s * s);
    diff(fuse_multiply<double>(a, b), lftest::matmul_oracle(a, b, s));
    MoEParams<double> p(n, d);
    for (auto& e : p.experts) {
      for (auto& w : e.weight) w = rng.uniform(-1, 1);
      for (auto& w : e.bias) w = rng.uniform(-1, 1);
    }
    for (auto& w : p.gate.weight) w = rng.uniform(-1, 1);
    diff(fuse_moe<double>(xs, p), lftest::moe_oracle(xs, p));
  }

  const std::vector<double> id3 = {1, 0, 0, 0, 1, 0, 0, 0, 1}, one = {1, 0, 0, 0}, i = {0, 1, 0, 0},
                            j = {0, 0, 1, 0}, k = {0, 0, 0, 1};
  const auto m = lftest::random_vector(rng, 9), q = lftest::random_vector(rng, 4), h = lftest::random_vector(rng, 7);
  const std::vector<std::vector<double>> proj = {lftest::random_vector(rng, 5), lftest::random_vector(rng, 5)};
  std::vector<double> mean(5);
  for (int c = 0; c < 5; ++c) mean[c] = (proj[0][c] + proj[1][c]) / 2;
  const bool exact = fuse_multiply<double>(m, id3) == m && fuse_multiply<double>(id3, m) == m &&
                     fuse_quaternion<double>(q, one) == q && fuse_quaternion<double>(one, q) == q &&
                     fuse_quaternion<double>(i, j) == k &&
                     fuse_hadamard<double>(std::vector<std::vector<double>>{h, std::vector<double>(7, 1.0)}) == h &&
                     apply_residual<double>(std::vector<double>(5, 0.0), proj) == mean;
  return {worst <= 1e-6 && exact,
          "max |op - oracle| " + fmt("%.2e", worst) + " over 100 instances, identities " + (exact ? "exact" : "BROKEN")};
}

Outcome quaternion_norm() {
  Rng rng(99);
  double worst = 0;
  for (int t = 0; t < 1000; ++t) {
    const auto a = lftest::random_vector(rng, 4, -2, 2), b = lftest::random_vector(rng, 4, -2, 2);
    const auto p = fuse_quaternion<double>(a, b);
    auto norm = [](const std::vector<double>& v) { return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]); };
    worst = std::max(worst, std::abs(norm(p) - norm(a) * norm(b)));
  }
  return {worst <= 1e-5, "max | |ab| - |a||b| | = " + fmt("%.2e", worst) + " over 1000 blocks"};
}

Outcome training_sanity() {
  FusionSpec single;
  single.method = FusionMethod::kNone;
  single.inputs = {{"x", 0}};

  const auto clusters = lftest::make_clusters(400, 16, 2, 1.0, 2025);
  TrainConfig recipe;  // batch 100, lr 1e-4, Adam, 120 epochs, hidden 256
  recipe.seed = 1;
  const auto model = train(clusters, recipe, single);
  const double acc = model.history.back().train_accuracy;

  // Unit-variance features with no class structure: labels carry no signal.
  auto random = lftest::make_clusters(800, 16, 8, 1.0, 2026, 0.0);
  auto labels = std::make_shared<LabelVector>(*random.labels);
  Rng rng(5);
  const auto perm = rng.permutation(labels->labels.size());
  for (std::size_t i = 0; i < perm.size(); ++i) labels->labels[i] = random.labels->labels[perm[i]];
  random.labels = labels;
  TrainConfig one = recipe;
  one.epochs = 1;
  const double loss1 = train(random, one, single).history[0].loss;
  const double ln8 = std::log(8.0);
  const bool ok = acc >= 0.99 && std::abs(loss1 - ln8) <= 0.1 * ln8;
  return {ok, "2-cluster train accuracy " + fmt("%.4f", acc) + " after 120 epochs; epoch-1 loss on 8 random classes " +
                  fmt("%.3f", loss1) + " vs ln 8 = " + fmt("%.3f", ln8)};
}

// Train settings shared by the synthetic experiments.
ExperimentOptions sweep_options(std::uint64_t seed) {
  ExperimentOptions o;
  o.train.hidden = 64;
  o.train.seed = seed;
  return o;
}

Outcome layer_sweep_recovery(const fs::path& work) {
  int hits = 0;
  std::string misses;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SyntheticSpec s;
    s.layers = {8};
    s.peak_layers = {1 + seed % 8};
    s.dims = {32};
    s.n_train = 400;
    s.n_test = 400;
    s.n_classes = 4;
    s.noise = 0.1;
    s.nuisance = 2.0;
    s.layer_decay = 0.5;
    s.seed = 1000 + seed;
    const auto dir = work / ("sweep" + std::to_string(seed));
    EmbeddingStore store(gen_synthetic(s, dir));
    const auto r = layer_sweep(store, "m0", sweep_options(seed));
    const int found = r.best ? r.rows[*r.best].inputs[0].layer : -1;
    if (found == static_cast<int>(s.peak_layers[0])) {
      ++hits;
    } else {
      misses += " seed" + std::to_string(seed) + ":" + std::to_string(found) + "!=" + std::to_string(s.peak_layers[0]);
    }
    fs::remove_all(dir);
  }
  return {hits >= 18, std::to_string(hits) + "/20 seeds recover the planted layer" + misses};
}

Outcome complementarity(const fs::path& work) {
  std::vector<double> fused, single;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SyntheticSpec s;
    s.n_models = 2;
    s.layers = {2};
    s.peak_layers = {2};
    s.dims = {16};
    s.n_train = 400;
    s.n_test = 400;
    s.n_classes = 4;
    s.latent_dim = 8;
    s.noise = 0.1;
    s.layout = FeatureLayout::kDisjoint;
    s.seed = 2000 + seed;
    const auto dir = work / ("comp" + std::to_string(seed));
    EmbeddingStore store(gen_synthetic(s, dir));
    const auto opts = sweep_options(seed);

    double best_single = 0;
    for (const char* m : {"m0", "m1"}) {
      Cell c;
      c.spec.method = FusionMethod::kNone;
      c.spec.inputs = {{m, 2}};
      best_single = std::max(best_single, run_cell(store, "synth", c, opts).accuracy);
    }
    PairGrid g{"m0", "m1", {2}, {2},
               {FusionMethod::kConcat, FusionMethod::kSum, FusionMethod::kHadamard, FusionMethod::kMultiply,
                FusionMethod::kQuaternion, FusionMethod::kMoe, FusionMethod::kAll},
               {false}, 16};
    const auto grid = pair_fusion_grid(store, g, opts);
    fused.push_back(grid.best ? grid.rows[*grid.best].accuracy : 0.0);
    single.push_back(best_single);
    fs::remove_all(dir);
  }
  const double mf = median(fused), ms = median(single);
  return {mf > ms, "median best fused " + fmt("%.4f", mf) + " vs median best single " + fmt("%.4f", ms)};
}

Outcome stability(const fs::path& work) {
  std::vector<std::vector<double>> stds(3);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SyntheticSpec s;
    s.n_models = 5;
    s.layers = {1};
    s.peak_layers = {1};
    s.dims = {16};
    s.n_train = 400;
    s.n_test = 400;
    s.n_classes = 4;
    s.latent_dim = 8;
    s.noise = 1.0;  // keeps accuracies off the ceiling so the spread is measurable
    s.layout = FeatureLayout::kOverlap;
    s.overlap_fraction = 0.5;
    s.seed = 3000 + seed;
    const auto dir = work / ("combo" + std::to_string(seed));
    EmbeddingStore store(gen_synthetic(s, dir));
    const auto c = combo_sweep(store, {"m0", "m1", "m2", "m3", "m4"}, {2, 3, 4}, sweep_options(seed));
    for (std::size_t i = 0; i < 3; ++i) stds[i].push_back(c.per_size[i].stddev);
    fs::remove_all(dir);
  }
  const double s2 = median(stds[0]), s3 = median(stds[1]), s4 = median(stds[2]);
  return {s2 > 0 && s2 >= s3 && s3 >= s4,
          "median per-size std " + fmt("%.4f", s2) + " / " + fmt("%.4f", s3) + " / " + fmt("%.4f", s4) +
              " for sizes 2 / 3 / 4"};
}

Outcome determinism(const fs::path& work) {
  SyntheticSpec s;
  s.n_models = 2;
  s.layers = {3};
  s.peak_layers = {2};
  s.dims = {8};
  s.n_train = 100;
  s.n_test = 50;
  s.seed = 4000;
  const auto store_dir = work / "det_store";
  gen_synthetic(s, store_dir);
  const std::string manifest = (store_dir / "manifest.json").string();

  auto cli = [](std::vector<std::string> args) {
    std::ostringstream out, err;
    return cli::run_cli(args, out, err);
  };
  auto train_into = [&](const fs::path& out) {
    return cli({"train", "--manifest", manifest, "--out", out.string(), "--input", "m0:2", "--input", "m1:last",
                "--method", "moe", "--residual", "--target-dim", "4", "--epochs", "10", "--hidden", "16",
                "--seed", "7"});
  };
  bool ok = train_into(work / "det_a") == 0 && train_into(work / "det_b") == 0;
  std::string detail;
  for (const char* f : {"model.ckpt", "history.csv", "results.csv", "results.json"}) {
    const bool same = lftest::read_bytes(work / "det_a" / f) == lftest::read_bytes(work / "det_b" / f) &&
                      !lftest::read_bytes(work / "det_a" / f).empty();
    ok = ok && same;
    if (!same) detail += std::string(" ") + f + " differs;";
  }

  auto grid_into = [&](const fs::path& out, const char* threads) {
    return cli({"pair-grid", "--manifest", manifest, "--out", out.string(), "--model-a", "m0", "--model-b", "m1",
                "--layers-a", "0..3", "--layers-b", "1,3", "--methods", "concat,sum,moe,quaternion", "--residual",
                "0,1", "--target-dim", "4", "--epochs", "5", "--hidden", "8", "--threads", threads});
  };
  const bool grids = grid_into(work / "grid1", "1") == 0 && grid_into(work / "grid4", "4") == 0;
  const auto grid1 = lftest::read_bytes(work / "grid1" / "results.csv");
  const bool grid_same =
      grids && std::count(grid1.begin(), grid1.end(), '\n') == 65 && grid1 == lftest::read_bytes(work / "grid4" / "results.csv");
  if (!grid_same) detail += " grid results depend on thread count;";
  ok = ok && grid_same;
  return {ok, ok ? "checkpoint, history and results bit-identical across reruns; 64-cell grid identical at 1 and 4 threads"
                 : detail};
}

Outcome report_fidelity(const fs::path& work) {
  const fs::path fixture = fs::path(LAYERFUSE_FIXTURE_DIR) / "layerwise_r8.csv";
  const auto original = lftest::read_bytes(fixture);
  const auto parsed = parse_report_csv(original);
  emit_report(parsed, ReportFormat::kCsv, work / "r8.csv");
  const bool same = lftest::read_bytes(work / "r8.csv") == original;
  const auto best = best_row(parsed, "llama2");
  const int layer = best ? parsed.rows[*best].inputs[0].layer : -1;
  const std::string acc = best ? format_accuracy(parsed.rows[*best].accuracy) : "";
  return {same && layer == 28 && acc == "0.9794",
          std::string(same ? "byte-identical re-emission" : "re-emission differs") + "; llama2 argmax layer " +
              std::to_string(layer) + " at " + acc};
}

}  // namespace

int main() {
  lftest::TempDir work;
  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {"memory-arithmetic", memory_arithmetic},
      {"dimension-ledger", dimension_ledger},
      {"gradient-suite", gradient_suite},
      {"fusion-oracles", fusion_oracles},
      {"quaternion-norm", quaternion_norm},
      {"training-sanity", training_sanity},
      {"layer-sweep-recovery", [&] { return layer_sweep_recovery(work.path()); }},
      {"complementarity", [&] { return complementarity(work.path()); }},
      {"stability", [&] { return stability(work.path()); }},
      {"determinism", [&] { return determinism(work.path()); }},
      {"report-fidelity", [&] { return report_fidelity(work.path()); }},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS " : "FAIL ") << c.name << ": " << o.detail << " [" << fmt("%.1f", secs) << "s]"
              << std::endl;
  }
  std::cout << (criteria.size() - failures) << "/" << criteria.size() << " criteria passed" << std::endl;
  return failures == 0 ? 0 : 1;
}
