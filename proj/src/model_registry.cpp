#include "layerfuse/model_registry.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <utility>

namespace layerfuse {

namespace {

constexpr std::array<ModelInfo, 7> kModels = {{
    {"llama2", "LLaMA2", 4096, "6.92B", 32},
    {"qwen2.5", "Qwen2.5", 3584, "7.62B", 28},
    {"falcon3", "Falcon 3", 3072, "6.98B", 28},
    {"mistral", "Mistral", 4096, "6.92B", 32},
    {"gemma2", "Gemma 2", 2304, "2B", 26},
    {"nv_embed", "NV-Embed-v2", 4096, "7.10B", 0},
    {"e5", "e5-large-v2", 1024, "0.335B", 0},
}};

constexpr std::array<std::pair<std::string_view, std::string_view>, 10> kAliases = {{
    {"qwen", "qwen2.5"},
    {"falcon", "falcon3"},
    {"gemma", "gemma2"},
    {"nv-embed-v2", "nv_embed"},
    {"nv_embed_v2", "nv_embed"},
    {"nv-embed", "nv_embed"},
    {"e5-large-v2", "e5"},
    {"e5_large_v2", "e5"},
    {"llama", "llama2"},
    {"mistral7b", "mistral"},
}};

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

}  // namespace

std::span<const ModelInfo> model_registry() { return kModels; }

std::optional<ModelInfo> find_model(std::string_view name) {
  std::string key = lower(name);
  for (const auto& [alias, canonical] : kAliases) {
    if (key == alias) key = std::string(canonical);
  }
  for (const auto& m : kModels) {
    if (key == m.name || key == lower(m.display_name)) return m;
  }
  return std::nullopt;
}

std::string registry_names() {
  std::string out;
  for (const auto& m : kModels) {
    if (!out.empty()) out += ", ";
    out += m.name;
  }
  return out;
}

}  // namespace layerfuse
