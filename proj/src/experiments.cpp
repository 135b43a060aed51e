#include "layerfuse/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <thread>

#include "layerfuse/random.hpp"

namespace layerfuse {

std::size_t default_threads() {
  if (const char* env = std::getenv("LAYERFUSE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return 1;
}

EmbeddingStore::EmbeddingStore(Manifest manifest) : manifest_(std::move(manifest)) {}

std::string EmbeddingStore::resolve_dataset(std::string_view requested) const {
  const auto names = manifest_.datasets();
  if (requested.empty()) {
    if (names.size() != 1) {
      throw ExperimentError("manifest has " + std::to_string(names.size()) + " datasets; pick one explicitly");
    }
    return names.front();
  }
  if (std::find(names.begin(), names.end(), requested) == names.end()) {
    throw ExperimentError("dataset '" + std::string(requested) + "' is not in the manifest");
  }
  return std::string(requested);
}

int EmbeddingStore::last_layer(std::string_view dataset, std::string_view model) const {
  const auto layers = manifest_.layers(dataset, model);
  if (layers.empty()) {
    throw ExperimentError("model '" + std::string(model) + "' has no train-split layers in dataset '" +
                          std::string(dataset) + "'");
  }
  return layers.back();
}

int EmbeddingStore::resolve_layer(std::string_view dataset, std::string_view model, std::string_view token) const {
  if (token == "last") return last_layer(dataset, model);
  int layer = 0;
  const std::string s(token);
  std::size_t pos = 0;
  try {
    layer = std::stoi(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || s.empty() || layer < 0) {
    throw ExperimentError("layer must be a non-negative integer or 'last', got '" + s + "'");
  }
  return layer;
}

std::shared_ptr<const EmbeddingMatrix> EmbeddingStore::matrix(std::string_view dataset, Split split,
                                                              std::string_view model, int layer) {
  auto key = std::make_tuple(std::string(dataset), split, std::string(model), layer);
  {
    std::lock_guard lock(mutex_);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  }
  const ManifestEntry* e = manifest_.find(dataset, split, model, layer);
  if (!e) {
    throw ExperimentError("no " + std::string(to_string(split)) + " embeddings for " + std::string(model) + ":" +
                          std::to_string(layer) + " in dataset '" + std::string(dataset) + "'");
  }
  // Loading outside the lock lets workers read different files concurrently;
  // a duplicate load of the same file is harmless.
  auto loaded = std::make_shared<const EmbeddingMatrix>(read_embedding_file(manifest_.resolve(e->path)));
  std::lock_guard lock(mutex_);
  return cache_.emplace(std::move(key), std::move(loaded)).first->second;
}

std::shared_ptr<const LabelVector> EmbeddingStore::labels(Split split) {
  {
    std::lock_guard lock(mutex_);
    if (auto it = labels_.find(split); it != labels_.end()) return it->second;
  }
  const auto it = manifest_.labels.find(split);
  if (it == manifest_.labels.end()) {
    throw ExperimentError("manifest has no labels for the " + std::string(to_string(split)) + " split");
  }
  auto loaded = std::make_shared<const LabelVector>(read_label_file(manifest_.resolve(it->second)));
  std::lock_guard lock(mutex_);
  return labels_.emplace(split, std::move(loaded)).first->second;
}

Dataset EmbeddingStore::load(std::string_view dataset, Split split, const std::vector<FusionInput>& inputs) {
  Dataset d;
  for (const auto& in : inputs) d.inputs.push_back(matrix(dataset, split, in.model, in.layer));
  d.labels = labels(split);
  d.validate();
  return d;
}

Dataset EmbeddingStore::load_aggregated(std::string_view dataset, Split split, std::string_view model,
                                        const std::vector<int>& layers, AggregationMode mode) {
  if (layers.empty()) throw ExperimentError("aggregation needs at least one layer");
  std::vector<std::shared_ptr<const EmbeddingMatrix>> mats;
  for (int l : layers) mats.push_back(matrix(dataset, split, model, l));
  const std::size_t n = mats[0]->n_samples;
  const std::size_t dim = mats[0]->dim;
  for (const auto& m : mats) {
    if (m->n_samples != n || m->dim != dim) throw ExperimentError("aggregation: layer shapes differ");
  }
  auto out = std::make_shared<EmbeddingMatrix>(n, dim);
  std::vector<std::vector<float>> rows(mats.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < mats.size(); ++k) {
      const auto r = mats[k]->row(i);
      rows[k].assign(r.begin(), r.end());
    }
    const auto agg = aggregate_layers<float>(rows, mode);
    std::copy(agg.begin(), agg.end(), out->row(i).begin());
  }
  Dataset d;
  d.inputs.push_back(std::move(out));
  d.labels = labels(split);
  d.validate();
  return d;
}

std::string cell_key(std::string_view dataset, const Cell& cell) {
  std::string key(dataset);
  key += '|';
  key += to_string(cell.spec.method);
  key += cell.spec.residual ? "|r1" : "|r0";
  key += "|t" + std::to_string(cell.spec.target_dim);
  for (const auto& in : cell.spec.inputs) key += "|" + in.model + ":" + std::to_string(in.layer);
  return key;
}

std::uint64_t cell_seed(std::uint64_t global_seed, std::string_view key) {
  return mix_seed(global_seed, stable_hash(key));
}

namespace {

struct CellPlan {
  std::vector<std::size_t> input_dims;  // dims of the single trainable input(s)
  std::vector<std::size_t> memory_dims; // dims whose storage the row is charged for
  std::vector<int> agg_layers;
};

CellPlan plan_cell(const EmbeddingStore& store, const std::string& dataset, const Cell& cell) {
  const auto& m = store.manifest();
  CellPlan plan;
  for (const auto& in : cell.spec.inputs) {
    const ManifestEntry* e = m.find(dataset, Split::kTrain, in.model, in.layer);
    if (!e) {
      throw ExperimentError("missing train embeddings for " + in.model + ":" + std::to_string(in.layer) +
                            " in dataset '" + dataset + "'");
    }
    plan.input_dims.push_back(e->dim);
  }
  const bool aggregated = cell.aggregation && cell.k > 1;
  if (!aggregated) {
    plan.memory_dims = plan.input_dims;
    return plan;
  }
  if (cell.spec.inputs.size() != 1) throw FusionError("aggregation: takes exactly 1 input");
  const auto& in = cell.spec.inputs[0];
  std::vector<int> avail;
  for (int l : m.layers(dataset, in.model)) {
    if (l <= in.layer) avail.push_back(l);
  }
  if (avail.size() < cell.k) {
    throw FusionError("aggregation: k = " + std::to_string(cell.k) + " but only " + std::to_string(avail.size()) +
                      " layers are available up to layer " + std::to_string(in.layer));
  }
  plan.agg_layers.assign(avail.end() - static_cast<std::ptrdiff_t>(cell.k), avail.end());
  plan.memory_dims.assign(cell.k, plan.input_dims[0]);
  return plan;
}

}  // namespace

SweepRow run_cell(EmbeddingStore& store, const std::string& dataset, const Cell& cell,
                  const ExperimentOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  SweepRow row;
  row.dataset = dataset;
  row.inputs = cell.spec.inputs;
  row.method = cell.spec.method;
  row.residual = cell.spec.residual;
  row.aggregation = cell.aggregation;
  row.k = cell.k;

  const CellPlan plan = plan_cell(store, dataset, cell);
  const auto& m = store.manifest();
  const ManifestEntry* first = m.find(dataset, Split::kTrain, cell.spec.inputs[0].model, cell.spec.inputs[0].layer);
  row.memory_bytes = estimate_memory(first->n_samples, plan.memory_dims);

  try {
    cell.spec.validate();
    row.fused_dim = cell.spec.fused_dim(plan.input_dims);
    if (cell.aggregation && cell.k == 0) throw FusionError("aggregation: k must be at least 1");

    const Split eval_split = m.has_split(dataset, Split::kTest) ? Split::kTest : Split::kTrain;
    Dataset train_data;
    Dataset eval_data;
    if (plan.agg_layers.empty()) {
      train_data = store.load(dataset, Split::kTrain, cell.spec.inputs);
      eval_data = store.load(dataset, eval_split, cell.spec.inputs);
    } else {
      const auto& model = cell.spec.inputs[0].model;
      train_data = store.load_aggregated(dataset, Split::kTrain, model, plan.agg_layers, *cell.aggregation);
      eval_data = store.load_aggregated(dataset, eval_split, model, plan.agg_layers, *cell.aggregation);
    }
    TrainConfig config = options.train;
    config.seed = cell_seed(options.train.seed, cell_key(dataset, cell));
    const TrainedModel model = train(train_data, config, cell.spec);
    row.accuracy = evaluate(model, eval_data);
  } catch (const FusionError& e) {
    row.error = e.what();
  } catch (const ShapeError& e) {
    row.error = e.what();
  } catch (const TrainingError& e) {
    row.error = e.what();
  }
  row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return row;
}

std::vector<SweepRow> run_cells(EmbeddingStore& store, const std::string& dataset, const std::vector<Cell>& cells,
                                const ExperimentOptions& options) {
  std::vector<SweepRow> rows(cells.size());
  std::vector<std::exception_ptr> errors(cells.size());
  const std::size_t want = options.threads ? options.threads : default_threads();
  const std::size_t n_workers = std::max<std::size_t>(1, std::min(want, cells.size()));
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      try {
        rows[i] = run_cell(store, dataset, cells[i], options);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (n_workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_workers; ++t) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return rows;
}

namespace {

Cell single_cell(const std::string& model, int layer) {
  Cell c;
  c.spec.method = FusionMethod::kNone;
  c.spec.inputs = {{model, layer}};
  return c;
}

SweepResult finish(std::vector<SweepRow> rows) {
  SweepResult r;
  r.rows = std::move(rows);
  r.best = best_row(r);
  return r;
}

}  // namespace

SweepResult layer_sweep(EmbeddingStore& store, const std::string& model, const ExperimentOptions& options) {
  const std::string dataset = store.resolve_dataset(options.dataset);
  const auto layers = store.manifest().layers(dataset, model);
  if (layers.empty()) throw ExperimentError("model '" + model + "' has no layers in dataset '" + dataset + "'");
  std::vector<Cell> cells;
  for (int l : layers) cells.push_back(single_cell(model, l));
  return finish(run_cells(store, dataset, cells, options));
}

SweepResult multi_layer_sweep(EmbeddingStore& store, const std::string& model, const std::vector<std::size_t>& ks,
                              const std::vector<AggregationMode>& modes, const ExperimentOptions& options) {
  const std::string dataset = store.resolve_dataset(options.dataset);
  if (ks.empty()) throw ExperimentError("multi-layer sweep: no k values given");
  if (modes.empty()) throw ExperimentError("multi-layer sweep: no aggregation modes given");
  for (std::size_t k : ks) {
    if (k < 1) throw ExperimentError("multi-layer sweep: k must be at least 1");
  }
  const int last = store.last_layer(dataset, model);
  const std::size_t depth = store.manifest().layers(dataset, model).size();
  std::vector<std::size_t> sorted = ks;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  std::vector<Cell> cells;
  for (std::size_t k : sorted) {
    if (k > depth) continue;
    for (auto mode : modes) {
      Cell c = single_cell(model, last);
      c.aggregation = mode;
      c.k = k;
      cells.push_back(std::move(c));
    }
  }
  return finish(run_cells(store, dataset, cells, options));
}

SweepResult pair_fusion_grid(EmbeddingStore& store, const PairGrid& grid, const ExperimentOptions& options) {
  const std::string dataset = store.resolve_dataset(options.dataset);
  if (grid.layers_a.empty() || grid.layers_b.empty()) throw ExperimentError("pair grid: empty layer set");
  if (grid.methods.empty()) throw ExperimentError("pair grid: no methods given");
  if (grid.residual.empty()) throw ExperimentError("pair grid: no residual flags given");
  const auto& m = store.manifest();
  auto check = [&](const std::string& model, const std::vector<int>& layers) {
    for (int l : layers) {
      if (!m.find(dataset, Split::kTrain, model, l)) {
        throw ExperimentError("pair grid: " + model + ":" + std::to_string(l) + " is not in the manifest");
      }
    }
  };
  check(grid.model_a, grid.layers_a);
  check(grid.model_b, grid.layers_b);

  std::vector<Cell> cells;
  for (int la : grid.layers_a) {
    for (int lb : grid.layers_b) {
      for (auto method : grid.methods) {
        for (bool r : grid.residual) {
          Cell c;
          c.spec.method = method;
          c.spec.residual = r;
          c.spec.target_dim = grid.target_dim;
          c.spec.inputs = {{grid.model_a, la}, {grid.model_b, lb}};
          cells.push_back(std::move(c));
        }
      }
    }
  }
  return finish(run_cells(store, dataset, cells, options));
}

ComboResult combo_sweep(EmbeddingStore& store, const std::vector<std::string>& models,
                        const std::vector<std::size_t>& sizes, const ExperimentOptions& options,
                        const std::map<std::string, int>& layer_overrides) {
  const std::string dataset = store.resolve_dataset(options.dataset);
  const std::size_t n = models.size();
  if (n < 2) throw ExperimentError("combo sweep: needs at least 2 models");
  if (sizes.empty()) throw ExperimentError("combo sweep: no sizes given");
  for (std::size_t s : sizes) {
    if (s < 2 || s > n) {
      throw ExperimentError("combo sweep: size " + std::to_string(s) + " is outside 2.." + std::to_string(n));
    }
  }
  for (const auto& [name, layer] : layer_overrides) {
    if (std::find(models.begin(), models.end(), name) == models.end()) {
      throw ExperimentError("combo sweep: layer override for unknown model '" + name + "'");
    }
  }
  std::vector<int> layer_of(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto it = layer_overrides.find(models[i]);
    layer_of[i] = it != layer_overrides.end() ? it->second : store.last_layer(dataset, models[i]);
  }

  std::vector<Cell> cells;
  std::vector<std::size_t> cell_size;
  for (std::size_t s : sizes) {
    // Lexicographic s-combinations of 0..n-1.
    std::vector<std::size_t> idx(s);
    for (std::size_t i = 0; i < s; ++i) idx[i] = i;
    for (;;) {
      Cell c;
      c.spec.method = FusionMethod::kConcat;
      for (std::size_t i : idx) c.spec.inputs.push_back({models[i], layer_of[i]});
      cells.push_back(std::move(c));
      cell_size.push_back(s);
      std::size_t pos = s;
      while (pos > 0 && idx[pos - 1] == n - s + pos - 1) --pos;
      if (pos == 0) break;
      ++idx[pos - 1];
      for (std::size_t j = pos; j < s; ++j) idx[j] = idx[j - 1] + 1;
    }
  }

  ComboResult out;
  out.result = finish(run_cells(store, dataset, cells, options));
  for (std::size_t s : sizes) {
    SizeStats st;
    st.size = s;
    double sum = 0.0;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (cell_size[i] == s && out.result.rows[i].ok()) {
        sum += out.result.rows[i].accuracy;
        ++st.count;
      }
    }
    if (st.count > 0) {
      st.mean = sum / static_cast<double>(st.count);
      double ss = 0.0;
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (cell_size[i] == s && out.result.rows[i].ok()) {
          const double d = out.result.rows[i].accuracy - st.mean;
          ss += d * d;
        }
      }
      st.stddev = std::sqrt(ss / static_cast<double>(st.count));
    }
    out.per_size.push_back(st);
  }
  return out;
}

}  // namespace layerfuse
