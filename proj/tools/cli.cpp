#include "cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "layerfuse/classifier.hpp"
#include "layerfuse/embed_store.hpp"
#include "layerfuse/experiments.hpp"
#include "layerfuse/fusion.hpp"
#include "layerfuse/model_registry.hpp"
#include "layerfuse/report.hpp"
#include "layerfuse/synthetic.hpp"

namespace layerfuse::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Invalid flag value; the message starts with the flag name.
class UsageError : public std::runtime_error {
 public:
  UsageError(const std::string& flag, const std::string& msg) : std::runtime_error(flag + ": " + msg) {}
};

std::vector<std::string> split_list(std::string_view text) {
  std::vector<std::string> out;
  while (true) {
    const auto comma = text.find(',');
    std::string_view item = text.substr(0, comma);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    if (!item.empty()) out.emplace_back(item);
    if (comma == std::string_view::npos) break;
    text.remove_prefix(comma + 1);
  }
  return out;
}

std::size_t parse_count(std::string_view s, const std::string& flag) {
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size()) {
    throw UsageError(flag, "expected a non-negative integer, got '" + std::string(s) + "'");
  }
  return v;
}

/// "1..10", "1,2,5" or a mix such as "1..3,7". Non-numeric items are kept
/// verbatim when `keep_words` is set (for layer tokens like "last").
std::vector<std::string> expand_list(std::string_view text, const std::string& flag, bool keep_words = false) {
  std::vector<std::string> out;
  for (const auto& item : split_list(text)) {
    const auto dots = item.find("..");
    if (dots != std::string::npos) {
      const std::size_t lo = parse_count(std::string_view(item).substr(0, dots), flag);
      const std::size_t hi = parse_count(std::string_view(item).substr(dots + 2), flag);
      if (lo > hi) throw UsageError(flag, "empty range '" + item + "'");
      for (std::size_t v = lo; v <= hi; ++v) out.push_back(std::to_string(v));
    } else if (keep_words && !item.empty() && (item[0] < '0' || item[0] > '9')) {
      out.push_back(item);
    } else {
      out.push_back(std::to_string(parse_count(item, flag)));
    }
  }
  if (out.empty()) throw UsageError(flag, "no values given");
  return out;
}

std::vector<std::size_t> parse_size_list(std::string_view text, const std::string& flag) {
  std::vector<std::size_t> out;
  for (const auto& s : expand_list(text, flag)) out.push_back(parse_count(s, flag));
  return out;
}

struct Common {
  std::string manifest;
  std::string out;
  std::string dataset;
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  TrainConfig train;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--manifest", c.manifest, "Manifest JSON describing the embedding files")->required();
  sub->add_option("--out", c.out, "Run directory for all outputs")->required();
  sub->add_option("--dataset", c.dataset, "Dataset name (default: the manifest's only dataset)");
  sub->add_option("--seed", c.seed, "Global seed")->capture_default_str();
  sub->add_option("--threads", c.threads, "Worker threads (0: $LAYERFUSE_THREADS or 1)")->capture_default_str();
  sub->add_option("--epochs", c.train.epochs, "Training epochs")->capture_default_str();
  sub->add_option("--batch-size", c.train.batch_size, "Mini-batch size")->capture_default_str();
  sub->add_option("--lr", c.train.lr, "Adam learning rate")->capture_default_str();
  sub->add_option("--hidden", c.train.hidden, "MLP hidden width")->capture_default_str();
}

ExperimentOptions make_options(const Common& c) {
  if (c.train.epochs < 1) throw UsageError("--epochs", "must be at least 1");
  if (c.train.batch_size < 1) throw UsageError("--batch-size", "must be at least 1");
  if (!(c.train.lr > 0.0) || !std::isfinite(c.train.lr)) throw UsageError("--lr", "must be a positive number");
  if (c.train.hidden < 1) throw UsageError("--hidden", "must be at least 1");
  ExperimentOptions o;
  o.train = c.train;
  o.train.seed = c.seed;
  o.threads = c.threads;
  return o;
}

struct Session {
  std::unique_ptr<EmbeddingStore> store;
  std::string dataset;
};

Session open_session(const Common& c) {
  Session s;
  try {
    s.store = std::make_unique<EmbeddingStore>(load_manifest(c.manifest));
  } catch (const StoreError& e) {
    // An unreadable file is a runtime failure; a readable but invalid one is bad input.
    if (e.code() == StoreErrc::kMissingFile || e.code() == StoreErrc::kIo) {
      throw std::runtime_error("--manifest: " + std::string(e.what()));
    }
    throw UsageError("--manifest", e.what());
  }
  try {
    s.dataset = s.store->resolve_dataset(c.dataset);
  } catch (const ExperimentError& e) {
    throw UsageError("--dataset", e.what());
  }
  return s;
}

void require_model(const Session& s, const std::string& model, const std::string& flag) {
  const auto models = s.store->manifest().models(s.dataset);
  if (std::find(models.begin(), models.end(), model) == models.end()) {
    std::string known;
    for (const auto& m : models) known += (known.empty() ? "" : ", ") + m;
    throw UsageError(flag, "model '" + model + "' is not in the manifest; available: " + known);
  }
}

int resolve_layer(const Session& s, const std::string& model, const std::string& token, const std::string& flag) {
  int layer = 0;
  try {
    layer = s.store->resolve_layer(s.dataset, model, token);
  } catch (const ExperimentError& e) {
    throw UsageError(flag, e.what());
  }
  if (!s.store->manifest().find(s.dataset, Split::kTrain, model, layer)) {
    throw UsageError(flag, "layer " + std::to_string(layer) + " of '" + model + "' is not in the manifest");
  }
  return layer;
}

FusionInput parse_input(const Session& s, const std::string& text, const std::string& flag) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos || colon == 0) throw UsageError(flag, "expected model:layer, got '" + text + "'");
  FusionInput in;
  in.model = text.substr(0, colon);
  require_model(s, in.model, flag);
  in.layer = resolve_layer(s, in.model, text.substr(colon + 1), flag);
  return in;
}

/// Every option of `sub` with its given or default value.
json echo_config(const CLI::App& sub) {
  json j = {{"command", sub.get_name()}};
  for (const CLI::Option* opt : sub.get_options()) {
    if (opt->get_lnames().empty()) continue;
    const std::string& name = opt->get_lnames().front();
    if (name == "help") continue;
    if (opt->get_type_size() == 0) {
      j[name] = opt->count() > 0;
    } else if (opt->count() > 0) {
      const auto& r = opt->results();
      j[name] = opt->get_expected_max() > 1 ? json(r) : json(r.back());
    } else {
      j[name] = opt->get_default_str();
    }
  }
  return j;
}

void write_text(const fs::path& path, const std::string& text) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const bool ok = std::fwrite(text.data(), 1, text.size(), f) == text.size();
  if (std::fclose(f) != 0 || !ok) throw std::runtime_error("write failed for " + path.string());
}

fs::path prepare_out(const std::string& out, const CLI::App& sub, const json& extra = json::object()) {
  const fs::path dir(out);
  fs::create_directories(dir);
  json cfg = echo_config(sub);
  if (!extra.empty()) cfg["resolved"] = extra;
  write_text(dir / "config.json", cfg.dump(2) + "\n");
  return dir;
}

void write_results(const fs::path& dir, const SweepResult& r, std::ostream& out) {
  emit_report(r, ReportFormat::kCsv, dir / "results.csv");
  emit_report(r, ReportFormat::kJson, dir / "results.json");
  std::size_t failed = 0;
  for (const auto& row : r.rows) failed += row.ok() ? 0 : 1;
  out << r.rows.size() << " rows";
  if (failed) out << " (" << failed << " with errors)";
  out << " -> " << (dir / "results.csv").string() << "\n";
  if (r.best) {
    const auto& b = r.rows[*r.best];
    out << "best: " << format_inputs(b.inputs) << " " << to_string(b.method) << (b.residual ? "(R)" : "");
    if (b.aggregation) out << " " << to_string(*b.aggregation) << "@" << b.k;
    out << " accuracy " << format_accuracy(b.accuracy) << "\n";
  }
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::vector<std::string> inputs;
  std::string method;
  bool residual = false;
  std::size_t target_dim = 0;
};

void cmd_train(const TrainArgs& a, const CLI::App& sub, std::ostream& out) {
  const auto options = make_options(a.common);
  Session s = open_session(a.common);

  Cell cell;
  for (const auto& text : a.inputs) cell.spec.inputs.push_back(parse_input(s, text, "--input"));
  const std::string method = !a.method.empty() ? a.method : (a.inputs.size() == 1 ? "none" : "concat");
  try {
    cell.spec.method = parse_fusion_method(method);
  } catch (const FusionError& e) {
    throw UsageError("--method", e.what());
  }
  try {
    cell.spec.validate();
  } catch (const FusionError& e) {
    throw UsageError("--input", e.what());
  }
  cell.spec.residual = a.residual;
  cell.spec.target_dim = a.target_dim;
  try {
    cell.spec.validate();
  } catch (const FusionError& e) {
    throw UsageError("--residual", e.what());
  }
  std::vector<std::size_t> dims;
  for (const auto& in : cell.spec.inputs) dims.push_back(s.store->manifest().find(s.dataset, Split::kTrain, in.model, in.layer)->dim);
  try {
    (void)cell.spec.fused_dim(dims);
  } catch (const FusionError& e) {
    throw UsageError("--target-dim", e.what());
  }

  const std::string key = cell_key(s.dataset, cell);
  TrainConfig config = options.train;
  config.seed = cell_seed(options.train.seed, key);
  json resolved = {{"dataset", s.dataset}, {"spec", cell.spec}, {"train", config}, {"cell_key", key}};
  const fs::path dir = prepare_out(a.common.out, sub, resolved);

  const Dataset train_data = s.store->load(s.dataset, Split::kTrain, cell.spec.inputs);
  const bool has_test = s.store->manifest().has_split(s.dataset, Split::kTest);
  const TrainedModel model = train(train_data, config, cell.spec);
  const double acc = has_test ? evaluate(model, s.store->load(s.dataset, Split::kTest, cell.spec.inputs))
                              : evaluate(model, train_data);

  save_checkpoint(model, dir / "model.ckpt");
  write_history_csv(model, dir / "history.csv");
  SweepResult r;
  SweepRow row;
  row.dataset = s.dataset;
  row.inputs = cell.spec.inputs;
  row.method = cell.spec.method;
  row.residual = cell.spec.residual;
  row.accuracy = acc;
  row.fused_dim = model.fused_dim();
  row.memory_bytes = estimate_memory(train_data.size(), dims);
  r.rows.push_back(row);
  r.best = 0;
  write_results(dir, r, out);
  out << "final train loss " << model.history.back().loss << ", " << (has_test ? "test" : "train")
      << " accuracy " << format_accuracy(acc) << "\n";
}

struct LayerSweepArgs {
  Common common;
  std::string model;
};

void cmd_layer_sweep(const LayerSweepArgs& a, const CLI::App& sub, std::ostream& out) {
  auto options = make_options(a.common);
  Session s = open_session(a.common);
  require_model(s, a.model, "--model");
  options.dataset = s.dataset;
  const fs::path dir = prepare_out(a.common.out, sub, {{"dataset", s.dataset}});
  write_results(dir, layer_sweep(*s.store, a.model, options), out);
}

struct MultiLayerArgs {
  Common common;
  std::string model;
  std::string k = "1..10";
  std::string modes = "mean,max,min";
};

void cmd_multi_layer(const MultiLayerArgs& a, const CLI::App& sub, std::ostream& out) {
  auto options = make_options(a.common);
  const auto ks = parse_size_list(a.k, "--k");
  for (auto k : ks) {
    if (k < 1) throw UsageError("--k", "k must be at least 1");
  }
  std::vector<AggregationMode> modes;
  for (const auto& m : split_list(a.modes)) {
    try {
      modes.push_back(parse_aggregation_mode(m));
    } catch (const FusionError& e) {
      throw UsageError("--modes", e.what());
    }
  }
  if (modes.empty()) throw UsageError("--modes", "no modes given");
  Session s = open_session(a.common);
  require_model(s, a.model, "--model");
  options.dataset = s.dataset;
  const fs::path dir = prepare_out(a.common.out, sub, {{"dataset", s.dataset}});
  write_results(dir, multi_layer_sweep(*s.store, a.model, ks, modes, options), out);
}

struct PairGridArgs {
  Common common;
  std::string model_a;
  std::string model_b;
  std::string layers_a = "last";
  std::string layers_b = "last";
  std::string methods = "concat,sum,multiply,hadamard,quaternion,moe,all";
  std::string residual = "0";
  std::size_t target_dim = 0;
};

void cmd_pair_grid(const PairGridArgs& a, const CLI::App& sub, std::ostream& out) {
  auto options = make_options(a.common);
  PairGrid grid;
  for (const auto& m : split_list(a.methods)) {
    try {
      grid.methods.push_back(parse_fusion_method(m));
    } catch (const FusionError& e) {
      throw UsageError("--methods", e.what());
    }
  }
  if (grid.methods.empty()) throw UsageError("--methods", "no methods given");
  grid.residual.clear();
  for (const auto& r : split_list(a.residual)) {
    if (r != "0" && r != "1") throw UsageError("--residual", "expected 0 and/or 1, got '" + r + "'");
    grid.residual.push_back(r == "1");
  }
  if (grid.residual.empty()) throw UsageError("--residual", "no values given");
  grid.target_dim = a.target_dim;

  Session s = open_session(a.common);
  require_model(s, a.model_a, "--model-a");
  require_model(s, a.model_b, "--model-b");
  grid.model_a = a.model_a;
  grid.model_b = a.model_b;
  for (const auto& t : expand_list(a.layers_a, "--layers-a", true)) grid.layers_a.push_back(resolve_layer(s, a.model_a, t, "--layers-a"));
  for (const auto& t : expand_list(a.layers_b, "--layers-b", true)) grid.layers_b.push_back(resolve_layer(s, a.model_b, t, "--layers-b"));
  options.dataset = s.dataset;
  const fs::path dir = prepare_out(a.common.out, sub, {{"dataset", s.dataset}, {"layers_a", grid.layers_a}, {"layers_b", grid.layers_b}});
  write_results(dir, pair_fusion_grid(*s.store, grid, options), out);
}

struct ComboArgs {
  Common common;
  std::string models;
  std::string sizes;
  std::vector<std::string> layers;
};

void cmd_combo(const ComboArgs& a, const CLI::App& sub, std::ostream& out) {
  auto options = make_options(a.common);
  const auto models = split_list(a.models);
  if (models.size() < 2) throw UsageError("--models", "needs at least 2 models");
  std::vector<std::size_t> sizes;
  if (a.sizes.empty()) {
    for (std::size_t k = 2; k <= models.size(); ++k) sizes.push_back(k);
  } else {
    sizes = parse_size_list(a.sizes, "--sizes");
  }
  for (auto k : sizes) {
    if (k < 2 || k > models.size()) {
      throw UsageError("--sizes", "size " + std::to_string(k) + " is outside 2.." + std::to_string(models.size()));
    }
  }
  Session s = open_session(a.common);
  for (const auto& m : models) require_model(s, m, "--models");
  std::map<std::string, int> overrides;
  for (const auto& text : a.layers) {
    const FusionInput in = parse_input(s, text, "--layer");
    if (std::find(models.begin(), models.end(), in.model) == models.end()) {
      throw UsageError("--layer", "model '" + in.model + "' is not in --models");
    }
    overrides[in.model] = in.layer;
  }
  options.dataset = s.dataset;
  const fs::path dir = prepare_out(a.common.out, sub, {{"dataset", s.dataset}, {"layer_overrides", overrides}});
  const ComboResult r = combo_sweep(*s.store, models, sizes, options, overrides);
  write_results(dir, r.result, out);
  std::string summary = "size,count,mean,std\n";
  for (const auto& st : r.per_size) {
    summary += std::to_string(st.size) + "," + std::to_string(st.count) + "," + format_accuracy(st.mean) + "," +
               format_accuracy(st.stddev) + "\n";
    out << "size " << st.size << ": " << st.count << " runs, mean " << format_accuracy(st.mean) << ", std "
        << format_accuracy(st.stddev) << "\n";
  }
  write_text(dir / "summary.csv", summary);
}

struct EstimateArgs {
  std::uint64_t n = 0;
  std::string models;
  std::string dims;
};

void cmd_estimate(const EstimateArgs& a, std::ostream& out) {
  std::vector<std::size_t> dims;
  std::vector<std::string> labels;
  for (const auto& name : split_list(a.models)) {
    const auto info = find_model(name);
    if (!info) throw UsageError("--models", "unknown model '" + name + "'; known models: " + registry_names());
    dims.push_back(info->dim);
    labels.emplace_back(info->name);
  }
  if (!a.dims.empty()) {
    for (const auto& d : split_list(a.dims)) {
      const std::size_t v = parse_count(d, "--dims");
      if (v == 0) throw UsageError("--dims", "dimensions must be positive");
      dims.push_back(v);
      labels.push_back(d);
    }
  }
  if (dims.empty()) throw UsageError("--models", "give at least one model (or --dims)");
  std::uint64_t bytes = 0;
  try {
    bytes = estimate_memory(a.n, dims);
  } catch (const StoreError& e) {
    throw UsageError("--n", e.what());
  }
  std::size_t total = 0;
  std::string parts;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    total += dims[i];
    parts += (i ? " + " : "") + std::to_string(dims[i]);
  }
  out << "concatenated dim: " << parts << " = " << total << "\n";
  out << "samples: " << a.n << "\n";
  if (bytes == 0) {
    out << "memory: 0 bytes\n";
  } else {
    out << "memory: " << bytes << " bytes (" << format_gib(bytes) << ")\n";
  }
}

struct SynthArgs {
  std::string out;
  SyntheticSpec spec;
  std::string layers = "12";
  std::string dims = "32";
  std::string peaks = "8";
  std::string names;
  std::string layout = "shared";
};

void cmd_gen_synth(SynthArgs a, const CLI::App& sub, std::ostream& out) {
  a.spec.layers = parse_size_list(a.layers, "--layers");
  a.spec.dims = parse_size_list(a.dims, "--dim");
  a.spec.peak_layers = parse_size_list(a.peaks, "--peak-layer");
  a.spec.model_names = split_list(a.names);
  try {
    a.spec.layout = parse_feature_layout(a.layout);
  } catch (const std::invalid_argument& e) {
    throw UsageError("--layout", e.what());
  }
  static const std::map<std::string, std::string> kFlagOf = {
      {"dataset", "--dataset"},         {"n_models", "--n-models"},       {"model_names", "--model-names"},
      {"layers", "--layers"},           {"dims", "--dim"},                {"peak_layers", "--peak-layer"},
      {"n_train", "--n-train"},         {"n_classes", "--classes"},       {"latent_dim", "--latent-dim"},
      {"noise", "--noise"},             {"layer_decay", "--decay"},       {"final_layer_penalty", "--final-penalty"},
      {"overlap_fraction", "--overlap"},
  };
  try {
    a.spec.validate();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    const auto it = kFlagOf.find(msg.substr(0, msg.find(':')));
    throw UsageError(it != kFlagOf.end() ? it->second : "gen-synth", msg);
  }
  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "config.json", echo_config(sub).dump(2) + "\n");
  const Manifest m = gen_synthetic(a.spec, a.out);
  out << "wrote " << m.entries.size() << " embedding files -> " << (fs::path(a.out) / "manifest.json").string()
      << "\n";
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Layer-aware embedding selection and multi-model fusion for text classification"};
  app.name("layerfuse");
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train one classifier on one or more embeddings");
  add_common(train_cmd, train_args.common);
  train_cmd->add_option("--input", train_args.inputs, "model:layer (layer may be 'last'); repeat for fusion")
      ->required();
  train_cmd->add_option("--method", train_args.method,
                        "Fusion method: " + fusion_method_names() + " (default: none for 1 input, concat otherwise)");
  train_cmd->add_flag("--residual", train_args.residual, "Add the mean projected input to the fused output");
  train_cmd->add_option("--target-dim", train_args.target_dim, "Projection width (0: automatic)")
      ->capture_default_str();

  LayerSweepArgs sweep_args;
  auto* sweep_cmd = app.add_subcommand("layer-sweep", "Train and evaluate every layer of one model");
  add_common(sweep_cmd, sweep_args.common);
  sweep_cmd->add_option("--model", sweep_args.model, "Model name in the manifest")->required();

  MultiLayerArgs multi_args;
  auto* multi_cmd = app.add_subcommand("multi-layer", "Aggregate the last k layers of one model");
  add_common(multi_cmd, multi_args.common);
  multi_cmd->add_option("--model", multi_args.model, "Model name in the manifest")->required();
  multi_cmd->add_option("--k", multi_args.k, "k values, e.g. 1..10 or 1,2,4")->capture_default_str();
  multi_cmd->add_option("--modes", multi_args.modes, "Aggregation modes")->capture_default_str();

  PairGridArgs pair_args;
  auto* pair_cmd = app.add_subcommand("pair-grid", "Two-model grid over layers, methods and residual flags");
  add_common(pair_cmd, pair_args.common);
  pair_cmd->add_option("--model-a", pair_args.model_a, "First model")->required();
  pair_cmd->add_option("--model-b", pair_args.model_b, "Second model")->required();
  pair_cmd->add_option("--layers-a", pair_args.layers_a, "Layers of the first model, e.g. 20,24..28,last")
      ->capture_default_str();
  pair_cmd->add_option("--layers-b", pair_args.layers_b, "Layers of the second model")->capture_default_str();
  pair_cmd->add_option("--methods", pair_args.methods, "Fusion methods")->capture_default_str();
  pair_cmd->add_option("--residual", pair_args.residual, "Residual flags to try: 0, 1 or 0,1")
      ->capture_default_str();
  pair_cmd->add_option("--target-dim", pair_args.target_dim, "Projection width (0: automatic)")
      ->capture_default_str();

  ComboArgs combo_args;
  auto* combo_cmd = app.add_subcommand("combo", "Concatenate every subset of a model set");
  add_common(combo_cmd, combo_args.common);
  combo_cmd->add_option("--models", combo_args.models, "Comma-separated model names")->required();
  combo_cmd->add_option("--sizes", combo_args.sizes, "Subset sizes, e.g. 2,3 or 2..5 (default: 2..n)");
  combo_cmd->add_option("--layer", combo_args.layers, "Per-model layer override model:layer (default: last)");

  EstimateArgs est_args;
  auto* est_cmd = app.add_subcommand("estimate", "Storage needed for concatenated float32 embeddings");
  est_cmd->add_option("--n", est_args.n, "Number of samples")->required();
  est_cmd->add_option("--models", est_args.models, "Registry model names; known: " + registry_names());
  est_cmd->add_option("--dims", est_args.dims, "Explicit dimensions, comma-separated");

  SynthArgs synth_args;
  auto* synth_cmd = app.add_subcommand("gen-synth", "Write a synthetic embedding store with planted structure");
  synth_cmd->add_option("--out", synth_args.out, "Output directory")->required();
  synth_cmd->add_option("--dataset", synth_args.spec.dataset, "Dataset name")->capture_default_str();
  synth_cmd->add_option("--n-models", synth_args.spec.n_models, "Number of models")->capture_default_str();
  synth_cmd->add_option("--model-names", synth_args.names, "Comma-separated model names (default: m0, m1, ...)");
  synth_cmd->add_option("--layers", synth_args.layers, "Top layer per model (files for 0..L)")->capture_default_str();
  synth_cmd->add_option("--dim", synth_args.dims, "Embedding width per model")->capture_default_str();
  synth_cmd->add_option("--peak-layer", synth_args.peaks, "Most informative layer per model")->capture_default_str();
  synth_cmd->add_option("--n-train", synth_args.spec.n_train, "Train samples")->capture_default_str();
  synth_cmd->add_option("--n-test", synth_args.spec.n_test, "Test samples (0: no test split)")->capture_default_str();
  synth_cmd->add_option("--classes", synth_args.spec.n_classes, "Number of classes")->capture_default_str();
  synth_cmd->add_option("--latent-dim", synth_args.spec.latent_dim, "Latent width")->capture_default_str();
  synth_cmd->add_option("--noise", synth_args.spec.noise, "Additive noise scale")->capture_default_str();
  synth_cmd->add_option("--nuisance", synth_args.spec.nuisance, "Off-peak nuisance scale")->capture_default_str();
  synth_cmd->add_option("--decay", synth_args.spec.layer_decay, "Signal decay per layer away from the peak")
      ->capture_default_str();
  synth_cmd->add_option("--final-penalty", synth_args.spec.final_layer_penalty,
                        "Extra signal loss at the last layer when it is not the peak")
      ->capture_default_str();
  synth_cmd->add_option("--layout", synth_args.layout, "shared, disjoint or overlap")->capture_default_str();
  synth_cmd->add_option("--overlap", synth_args.spec.overlap_fraction, "Latent fraction per model (overlap layout)")
      ->capture_default_str();
  synth_cmd->add_option("--seed", synth_args.spec.seed, "Seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train_cmd->parsed()) cmd_train(train_args, *train_cmd, out);
    if (sweep_cmd->parsed()) cmd_layer_sweep(sweep_args, *sweep_cmd, out);
    if (multi_cmd->parsed()) cmd_multi_layer(multi_args, *multi_cmd, out);
    if (pair_cmd->parsed()) cmd_pair_grid(pair_args, *pair_cmd, out);
    if (combo_cmd->parsed()) cmd_combo(combo_args, *combo_cmd, out);
    if (est_cmd->parsed()) cmd_estimate(est_args, out);
    if (synth_cmd->parsed()) cmd_gen_synth(synth_args, *synth_cmd, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv = {"layerfuse"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace layerfuse::cli
