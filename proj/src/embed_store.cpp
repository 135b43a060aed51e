#include "layerfuse/embed_store.hpp"

#include "binary_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace layerfuse {

namespace fs = std::filesystem;

namespace binio {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StoreError(StoreErrc::kMissingFile, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw StoreError(StoreErrc::kIo, "read failed for " + path.string());
  return std::move(ss).str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw StoreError(StoreErrc::kIo, "cannot open for writing " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw StoreError(StoreErrc::kIo, "write failed for " + path.string());
}

}  // namespace binio

std::string_view to_string(StoreErrc code) {
  switch (code) {
    case StoreErrc::kIo: return "io error";
    case StoreErrc::kBadMagic: return "bad magic";
    case StoreErrc::kVersionMismatch: return "version mismatch";
    case StoreErrc::kBadDtype: return "unsupported dtype";
    case StoreErrc::kTruncated: return "truncated";
    case StoreErrc::kNonFinite: return "non-finite value";
    case StoreErrc::kShape: return "shape error";
    case StoreErrc::kLabelRange: return "label out of range";
    case StoreErrc::kMissingFile: return "missing file";
    case StoreErrc::kDimMismatch: return "dim mismatch";
    case StoreErrc::kSampleCountMismatch: return "sample-count mismatch";
    case StoreErrc::kAlignment: return "alignment error";
    case StoreErrc::kManifestFormat: return "manifest format error";
    case StoreErrc::kOverflow: return "overflow";
  }
  return "unknown";
}

namespace {

using binio::get_le;
using binio::put_le;

constexpr std::array<char, 4> kEmbeddingMagic = {'L', 'E', 'F', '1'};
constexpr std::array<char, 4> kLabelMagic = {'L', 'B', 'L', '1'};
constexpr std::uint16_t kFormatVersion = 1;
constexpr std::uint16_t kDtypeF32 = 1;

static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

std::string read_prefix(const fs::path& path, std::size_t n) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StoreError(StoreErrc::kMissingFile, "cannot open " + path.string());
  std::string buf(n, '\0');
  in.read(buf.data(), static_cast<std::streamsize>(n));
  buf.resize(static_cast<std::size_t>(in.gcount()));
  return buf;
}

std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
  std::uint64_t r;
  if (__builtin_mul_overflow(a, b, &r)) throw StoreError(StoreErrc::kOverflow, "size overflows 64 bits");
  return r;
}

EmbeddingHeader parse_embedding_header(const std::string& bytes, const fs::path& path) {
  if (bytes.size() >= 4 && !std::equal(kEmbeddingMagic.begin(), kEmbeddingMagic.end(), bytes.begin())) {
    throw StoreError(StoreErrc::kBadMagic, path.string() + " is not an embedding file");
  }
  if (bytes.size() < kEmbeddingHeaderBytes) {
    throw StoreError(StoreErrc::kTruncated, path.string() + ": header is " + std::to_string(bytes.size()) +
                                                " bytes, expected " + std::to_string(kEmbeddingHeaderBytes));
  }
  EmbeddingHeader h;
  h.version = get_le<std::uint16_t>(bytes.data() + 4);
  h.dtype = get_le<std::uint16_t>(bytes.data() + 6);
  h.n_samples = get_le<std::uint64_t>(bytes.data() + 8);
  h.dim = get_le<std::uint64_t>(bytes.data() + 16);
  if (h.version != kFormatVersion) {
    throw StoreError(StoreErrc::kVersionMismatch,
                     path.string() + ": version " + std::to_string(h.version) + ", expected 1");
  }
  if (h.dtype != kDtypeF32) {
    throw StoreError(StoreErrc::kBadDtype, path.string() + ": dtype " + std::to_string(h.dtype));
  }
  return h;
}

}  // namespace

EmbeddingMatrix::EmbeddingMatrix(std::size_t n, std::size_t d, std::vector<float> values)
    : n_samples(n), dim(d), data(std::move(values)) {
  if (data.size() != n * d) {
    throw StoreError(StoreErrc::kShape, "matrix data has " + std::to_string(data.size()) +
                                            " values, expected " + std::to_string(n) + "x" + std::to_string(d));
  }
}

void EmbeddingMatrix::validate() const {
  if (data.size() != n_samples * dim) throw StoreError(StoreErrc::kShape, "data length != n_samples * dim");
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!std::isfinite(data[i])) {
      throw StoreError(StoreErrc::kNonFinite, "entry (" + std::to_string(i / std::max<std::size_t>(dim, 1)) +
                                                  ", " + std::to_string(dim ? i % dim : 0) + ") is not finite");
    }
  }
}

void LabelVector::validate() const {
  if (n_classes == 0 || n_classes > 0xffff) {
    throw StoreError(StoreErrc::kShape, "n_classes must be in [1, 65535], got " + std::to_string(n_classes));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= n_classes) {
      throw StoreError(StoreErrc::kLabelRange, "label " + std::to_string(labels[i]) + " at sample " +
                                                   std::to_string(i) + " is not below " +
                                                   std::to_string(n_classes));
    }
  }
}

void write_embedding_file(const EmbeddingMatrix& matrix, const fs::path& path) {
  matrix.validate();
  std::string bytes;
  bytes.reserve(kEmbeddingHeaderBytes + matrix.data.size() * 4);
  bytes.append(kEmbeddingMagic.data(), kEmbeddingMagic.size());
  put_le<std::uint16_t>(bytes, kFormatVersion);
  put_le<std::uint16_t>(bytes, kDtypeF32);
  put_le<std::uint64_t>(bytes, matrix.n_samples);
  put_le<std::uint64_t>(bytes, matrix.dim);
  binio::put_f32_array(bytes, matrix.data);
  binio::write_file(path, bytes);
}

EmbeddingHeader read_embedding_header(const fs::path& path) {
  return parse_embedding_header(read_prefix(path, kEmbeddingHeaderBytes), path);
}

EmbeddingMatrix read_embedding_file(const fs::path& path) {
  const std::string bytes = binio::read_file(path);
  const EmbeddingHeader h = parse_embedding_header(bytes, path);
  const std::uint64_t payload = checked_mul(checked_mul(h.n_samples, h.dim), 4);
  const std::uint64_t have = bytes.size() - kEmbeddingHeaderBytes;
  if (have < payload) {
    throw StoreError(StoreErrc::kTruncated, path.string() + ": payload is " + std::to_string(have) +
                                                " bytes, header declares " + std::to_string(payload));
  }
  if (have > payload) {
    throw StoreError(StoreErrc::kShape, path.string() + ": " + std::to_string(have - payload) +
                                            " trailing bytes after payload");
  }
  EmbeddingMatrix m(h.n_samples, h.dim);
  binio::get_f32_array(bytes.data() + kEmbeddingHeaderBytes, m.data);
  m.validate();
  return m;
}

void write_label_file(const LabelVector& labels, const fs::path& path) {
  labels.validate();
  std::string bytes;
  bytes.reserve(kLabelHeaderBytes + labels.labels.size() * 4);
  bytes.append(kLabelMagic.data(), kLabelMagic.size());
  put_le<std::uint16_t>(bytes, kFormatVersion);
  put_le<std::uint16_t>(bytes, static_cast<std::uint16_t>(labels.n_classes));
  put_le<std::uint64_t>(bytes, labels.labels.size());
  for (std::uint32_t v : labels.labels) put_le<std::uint32_t>(bytes, v);
  binio::write_file(path, bytes);
}

LabelVector read_label_file(const fs::path& path) {
  const std::string bytes = binio::read_file(path);
  if (bytes.size() >= 4 && !std::equal(kLabelMagic.begin(), kLabelMagic.end(), bytes.begin())) {
    throw StoreError(StoreErrc::kBadMagic, path.string() + " is not a label file");
  }
  if (bytes.size() < kLabelHeaderBytes) throw StoreError(StoreErrc::kTruncated, path.string() + ": short header");
  const auto version = get_le<std::uint16_t>(bytes.data() + 4);
  if (version != kFormatVersion) {
    throw StoreError(StoreErrc::kVersionMismatch, path.string() + ": version " + std::to_string(version));
  }
  LabelVector out;
  out.n_classes = get_le<std::uint16_t>(bytes.data() + 6);
  const auto n = get_le<std::uint64_t>(bytes.data() + 8);
  const std::uint64_t payload = checked_mul(n, 4);
  const std::uint64_t have = bytes.size() - kLabelHeaderBytes;
  if (have < payload) throw StoreError(StoreErrc::kTruncated, path.string() + ": label payload truncated");
  if (have > payload) throw StoreError(StoreErrc::kShape, path.string() + ": trailing bytes after labels");
  out.labels.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) out.labels[i] = get_le<std::uint32_t>(bytes.data() + kLabelHeaderBytes + 4 * i);
  out.validate();
  return out;
}

std::string_view to_string(Split split) { return split == Split::kTrain ? "train" : "test"; }

Split parse_split(std::string_view text) {
  if (text == "train") return Split::kTrain;
  if (text == "test") return Split::kTest;
  throw StoreError(StoreErrc::kManifestFormat, "unknown split '" + std::string(text) + "' (expected train or test)");
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

fs::path Manifest::resolve(const fs::path& p) const { return p.is_absolute() ? p : base_dir / p; }

const ManifestEntry* Manifest::find(std::string_view dataset, Split split, std::string_view model,
                                    int layer) const {
  for (const auto& e : entries) {
    if (e.dataset == dataset && e.split == split && e.model == model && e.layer == layer) return &e;
  }
  return nullptr;
}

std::vector<std::string> Manifest::datasets() const {
  std::vector<std::string> out;
  for (const auto& e : entries) {
    if (std::find(out.begin(), out.end(), e.dataset) == out.end()) out.push_back(e.dataset);
  }
  return out;
}

std::vector<std::string> Manifest::models(std::string_view dataset) const {
  std::vector<std::string> out;
  for (const auto& e : entries) {
    if (e.dataset == dataset && std::find(out.begin(), out.end(), e.model) == out.end()) out.push_back(e.model);
  }
  return out;
}

std::vector<int> Manifest::layers(std::string_view dataset, std::string_view model) const {
  std::set<int> s;
  for (const auto& e : entries) {
    if (e.dataset == dataset && e.model == model && e.split == Split::kTrain) s.insert(e.layer);
  }
  return {s.begin(), s.end()};
}

bool Manifest::has_split(std::string_view dataset, Split split) const {
  return std::any_of(entries.begin(), entries.end(),
                     [&](const ManifestEntry& e) { return e.dataset == dataset && e.split == split; });
}

nlohmann::json Manifest::to_json() const {
  nlohmann::json doc = nlohmann::json::object();
  auto& arr = doc["entries"] = nlohmann::json::array();
  for (const auto& e : entries) {
    arr.push_back({{"dataset", e.dataset},
                   {"split", to_string(e.split)},
                   {"model", e.model},
                   {"layer", e.layer},
                   {"dim", e.dim},
                   {"n_samples", e.n_samples},
                   {"path", e.path.generic_string()}});
  }
  auto& lab = doc["labels"] = nlohmann::json::object();
  for (const auto& [split, p] : labels) lab[std::string(to_string(split))] = p.generic_string();
  if (!metadata.empty()) doc["metadata"] = metadata;
  return doc;
}

namespace {

template <typename V>
V require(const nlohmann::json& obj, const char* key, std::size_t index) {
  if (!obj.contains(key)) {
    throw StoreError(StoreErrc::kManifestFormat,
                     "entry " + std::to_string(index) + " is missing key '" + key + "'");
  }
  try {
    return obj.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw StoreError(StoreErrc::kManifestFormat,
                     "entry " + std::to_string(index) + " key '" + key + "': " + e.what());
  }
}

}  // namespace

Manifest parse_manifest(const nlohmann::json& doc, const fs::path& base_dir) {
  Manifest m;
  m.base_dir = base_dir;
  const nlohmann::json* entries = nullptr;
  if (doc.is_array()) {
    entries = &doc;
  } else if (doc.is_object() && doc.contains("entries") && doc.at("entries").is_array()) {
    entries = &doc.at("entries");
    if (doc.contains("labels")) {
      if (!doc.at("labels").is_object()) throw StoreError(StoreErrc::kManifestFormat, "'labels' must be an object");
      for (const auto& [k, v] : doc.at("labels").items()) {
        if (!v.is_string()) throw StoreError(StoreErrc::kManifestFormat, "label path for '" + k + "' must be a string");
        m.labels[parse_split(k)] = fs::path(v.get<std::string>());
      }
    }
    if (doc.contains("metadata")) m.metadata = doc.at("metadata");
  } else {
    throw StoreError(StoreErrc::kManifestFormat, "manifest must be an array of entries or an object with 'entries'");
  }

  for (std::size_t i = 0; i < entries->size(); ++i) {
    const auto& j = (*entries)[i];
    if (!j.is_object()) throw StoreError(StoreErrc::kManifestFormat, "entry " + std::to_string(i) + " is not an object");
    ManifestEntry e;
    e.dataset = require<std::string>(j, "dataset", i);
    e.split = parse_split(require<std::string>(j, "split", i));
    e.model = require<std::string>(j, "model", i);
    e.layer = require<int>(j, "layer", i);
    e.dim = require<std::size_t>(j, "dim", i);
    e.n_samples = require<std::size_t>(j, "n_samples", i);
    e.path = fs::path(require<std::string>(j, "path", i));
    if (e.layer < 0) throw StoreError(StoreErrc::kManifestFormat, "entry " + std::to_string(i) + " has negative layer");
    if (m.find(e.dataset, e.split, e.model, e.layer)) {
      throw StoreError(StoreErrc::kManifestFormat, "duplicate entry for " + e.dataset + "/" +
                                                       std::string(to_string(e.split)) + "/" + e.model + "/" +
                                                       std::to_string(e.layer));
    }
    m.entries.push_back(std::move(e));
  }

  // Each file must agree with its entry.
  for (const auto& e : m.entries) {
    const fs::path p = m.resolve(e.path);
    if (!fs::exists(p)) throw StoreError(StoreErrc::kMissingFile, p.string());
    const EmbeddingHeader h = read_embedding_header(p);
    if (h.dim != e.dim) {
      throw StoreError(StoreErrc::kDimMismatch, p.string() + ": header dim " + std::to_string(h.dim) +
                                                    " but manifest says " + std::to_string(e.dim));
    }
    if (h.n_samples != e.n_samples) {
      throw StoreError(StoreErrc::kSampleCountMismatch, p.string() + ": header n_samples " +
                                                            std::to_string(h.n_samples) + " but manifest says " +
                                                            std::to_string(e.n_samples));
    }
  }

  // Every (dataset, split) shares one sample count.
  std::map<std::pair<std::string, Split>, const ManifestEntry*> first;
  for (const auto& e : m.entries) {
    auto [it, inserted] = first.emplace(std::make_pair(e.dataset, e.split), &e);
    if (!inserted && it->second->n_samples != e.n_samples) {
      throw StoreError(StoreErrc::kAlignment,
                       e.dataset + "/" + std::string(to_string(e.split)) + ": " + it->second->model + " layer " +
                           std::to_string(it->second->layer) + " has " + std::to_string(it->second->n_samples) +
                           " samples but " + e.model + " layer " + std::to_string(e.layer) + " has " +
                           std::to_string(e.n_samples));
    }
  }

  for (const auto& [split, rel] : m.labels) {
    const fs::path p = m.resolve(rel);
    if (!fs::exists(p)) throw StoreError(StoreErrc::kMissingFile, p.string());
    const LabelVector lv = read_label_file(p);
    for (const auto& [key, e] : first) {
      if (key.second == split && e->n_samples != lv.n_samples()) {
        throw StoreError(StoreErrc::kAlignment, "label file " + p.string() + " has " +
                                                    std::to_string(lv.n_samples()) + " labels but " + key.first +
                                                    "/" + std::string(to_string(split)) + " has " +
                                                    std::to_string(e->n_samples) + " samples");
      }
    }
  }
  return m;
}

Manifest load_manifest(const fs::path& path) {
  const std::string text = binio::read_file(path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw StoreError(StoreErrc::kManifestFormat, path.string() + ": " + e.what());
  }
  return parse_manifest(doc, path.parent_path());
}

void save_manifest(const Manifest& manifest, const fs::path& path) {
  binio::write_file(path, manifest.to_json().dump(2) + "\n");
}

std::uint64_t estimate_memory(std::uint64_t n_samples, std::span<const std::size_t> dims) {
  if (dims.empty()) throw std::invalid_argument("estimate_memory: dims must be non-empty");
  std::uint64_t total_dim = 0;
  for (std::size_t d : dims) {
    if (__builtin_add_overflow(total_dim, static_cast<std::uint64_t>(d), &total_dim)) {
      throw StoreError(StoreErrc::kOverflow, "dimension sum overflows");
    }
  }
  return checked_mul(checked_mul(n_samples, total_dim), sizeof(float));
}

std::string format_gib(std::uint64_t bytes) {
  const double gib = static_cast<double>(bytes) / static_cast<double>(1ULL << 30);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f GiB", gib);
  return buf;
}

}  // namespace layerfuse
