#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace layerfuse {

/// Hidden size of a known source model, so storage estimates can be made
/// without any embedding files on disk.
struct ModelInfo {
  std::string_view name;          // canonical short name used on the command line
  std::string_view display_name;
  std::size_t dim;
  std::string_view parameters;
  int layers;                     // decoder depth; 0 for embedding-only models
};

std::span<const ModelInfo> model_registry();

/// Case-insensitive lookup by canonical name or alias ("nv-embed-v2", "qwen", ...).
std::optional<ModelInfo> find_model(std::string_view name);

/// Canonical names, comma-separated, for error messages.
std::string registry_names();

}  // namespace layerfuse
