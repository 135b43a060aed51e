#pragma once

// On-disk embedding and label formats, the JSON manifest that catalogs them,
// and the storage-cost estimator.
//
// Embedding file (all integers little-endian):
//   "LEF1" | u16 version=1 | u16 dtype=1 (f32) | u64 n_samples | u64 dim | f32 payload, row-major
// Label file:
//   "LBL1" | u16 version=1 | u16 n_classes | u64 n_samples | u32 labels

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace layerfuse {

enum class StoreErrc {
  kIo,
  kBadMagic,
  kVersionMismatch,
  kBadDtype,
  kTruncated,
  kNonFinite,
  kShape,
  kLabelRange,
  kMissingFile,
  kDimMismatch,
  kSampleCountMismatch,
  kAlignment,
  kManifestFormat,
  kOverflow,
};

std::string_view to_string(StoreErrc code);

class StoreError : public std::runtime_error {
 public:
  StoreError(StoreErrc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  StoreErrc code() const noexcept { return code_; }

 private:
  StoreErrc code_;
};

inline constexpr std::size_t kEmbeddingHeaderBytes = 24;
inline constexpr std::size_t kLabelHeaderBytes = 16;

/// N x d row-major f32 matrix: one embedding per text sample for one (model, layer).
struct EmbeddingMatrix {
  std::size_t n_samples = 0;
  std::size_t dim = 0;
  std::vector<float> data;

  EmbeddingMatrix() = default;
  EmbeddingMatrix(std::size_t n, std::size_t d) : n_samples(n), dim(d), data(n * d, 0.0f) {}
  EmbeddingMatrix(std::size_t n, std::size_t d, std::vector<float> values);

  std::span<const float> row(std::size_t i) const { return {data.data() + i * dim, dim}; }
  std::span<float> row(std::size_t i) { return {data.data() + i * dim, dim}; }

  /// Throws StoreError on a shape mismatch or a non-finite entry.
  void validate() const;

  bool operator==(const EmbeddingMatrix&) const = default;
};

struct LabelVector {
  std::size_t n_classes = 0;
  std::vector<std::uint32_t> labels;

  std::size_t n_samples() const { return labels.size(); }
  void validate() const;

  bool operator==(const LabelVector&) const = default;
};

struct EmbeddingHeader {
  std::uint16_t version = 0;
  std::uint16_t dtype = 0;
  std::uint64_t n_samples = 0;
  std::uint64_t dim = 0;
};

void write_embedding_file(const EmbeddingMatrix& matrix, const std::filesystem::path& path);
EmbeddingMatrix read_embedding_file(const std::filesystem::path& path);
EmbeddingHeader read_embedding_header(const std::filesystem::path& path);

void write_label_file(const LabelVector& labels, const std::filesystem::path& path);
LabelVector read_label_file(const std::filesystem::path& path);

enum class Split { kTrain, kTest };
std::string_view to_string(Split split);
Split parse_split(std::string_view text);

struct ManifestEntry {
  std::string dataset;
  Split split = Split::kTrain;
  std::string model;
  int layer = 0;  // 0 = token-embedding output, L = output of block L
  std::size_t dim = 0;
  std::size_t n_samples = 0;
  std::filesystem::path path;  // as written in the manifest; see Manifest::resolve
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  std::map<Split, std::filesystem::path> labels;
  nlohmann::json metadata = nlohmann::json::object();
  std::filesystem::path base_dir;  // relative paths resolve against this

  std::filesystem::path resolve(const std::filesystem::path& p) const;

  const ManifestEntry* find(std::string_view dataset, Split split, std::string_view model, int layer) const;
  std::vector<std::string> datasets() const;
  std::vector<std::string> models(std::string_view dataset) const;
  /// Sorted distinct layers available for `model` in the train split.
  std::vector<int> layers(std::string_view dataset, std::string_view model) const;
  bool has_split(std::string_view dataset, Split split) const;

  nlohmann::json to_json() const;
};

/// Parses and validates: every referenced file exists, its header agrees with
/// the entry, every (dataset, split) shares one n_samples, and the label
/// files match.
Manifest load_manifest(const std::filesystem::path& path);
Manifest parse_manifest(const nlohmann::json& doc, const std::filesystem::path& base_dir);
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);

/// n_samples * sum(dims) * 4 bytes. Throws StoreError(kOverflow) rather than wrapping.
std::uint64_t estimate_memory(std::uint64_t n_samples, std::span<const std::size_t> dims);

/// Renders bytes as GiB with one decimal, e.g. "1.3 GiB".
std::string format_gib(std::uint64_t bytes);

}  // namespace layerfuse
