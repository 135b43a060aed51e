#include "layerfuse/fusion.hpp"

#include <algorithm>
#include <array>
#include <utility>

namespace layerfuse {

namespace {

constexpr std::array<std::pair<FusionMethod, std::string_view>, 8> kMethodNames = {{
    {FusionMethod::kNone, "none"},
    {FusionMethod::kConcat, "concat"},
    {FusionMethod::kSum, "sum"},
    {FusionMethod::kMultiply, "multiply"},
    {FusionMethod::kHadamard, "hadamard"},
    {FusionMethod::kQuaternion, "quaternion"},
    {FusionMethod::kMoe, "moe"},
    {FusionMethod::kAll, "all"},
}};

bool is_pairwise(FusionMethod m) {
  return m == FusionMethod::kMultiply || m == FusionMethod::kQuaternion || m == FusionMethod::kAll;
}

}  // namespace

std::string_view to_string(FusionMethod method) {
  for (const auto& [m, name] : kMethodNames) {
    if (m == method) return name;
  }
  return "?";
}

std::string fusion_method_names() {
  std::string out;
  for (const auto& [m, name] : kMethodNames) {
    if (!out.empty()) out += ", ";
    out += name;
  }
  return out;
}

FusionMethod parse_fusion_method(std::string_view name) {
  for (const auto& [m, n] : kMethodNames) {
    if (n == name) return m;
  }
  throw FusionError("unknown fusion method '" + std::string(name) + "'; valid methods: " + fusion_method_names());
}

bool supports_residual(FusionMethod method) {
  switch (method) {
    case FusionMethod::kSum:
    case FusionMethod::kMultiply:
    case FusionMethod::kHadamard:
    case FusionMethod::kQuaternion:
    case FusionMethod::kMoe:
      return true;
    default:
      return false;
  }
}

bool uses_projection(FusionMethod method) { return method != FusionMethod::kNone && method != FusionMethod::kConcat; }

std::string_view to_string(AggregationMode mode) {
  switch (mode) {
    case AggregationMode::kMean: return "mean";
    case AggregationMode::kMax: return "max";
    case AggregationMode::kMin: return "min";
  }
  return "?";
}

AggregationMode parse_aggregation_mode(std::string_view name) {
  if (name == "mean") return AggregationMode::kMean;
  if (name == "max") return AggregationMode::kMax;
  if (name == "min") return AggregationMode::kMin;
  throw FusionError("unknown aggregation mode '" + std::string(name) + "'; valid modes: mean, max, min");
}

void FusionSpec::validate() const {
  const std::string name(to_string(method));
  if (inputs.empty()) throw FusionError(name + ": no inputs given");
  if (method == FusionMethod::kNone) {
    if (inputs.size() != 1) throw FusionError("none: takes exactly 1 input, got " + std::to_string(inputs.size()));
  } else if (is_pairwise(method)) {
    if (inputs.size() != 2) {
      throw FusionError(name + ": takes exactly 2 inputs, got " + std::to_string(inputs.size()));
    }
  } else if (inputs.size() < 2) {
    throw FusionError(name + ": needs at least 2 inputs, got " + std::to_string(inputs.size()));
  }
  if (residual && !supports_residual(method)) {
    throw FusionError(name + ": residual enhancement is not available because the output does not keep the "
                             "projected width; use the non-residual variant");
  }
  for (const auto& in : inputs) {
    if (in.layer < 0) throw FusionError(name + ": negative layer for model '" + in.model + "'");
  }
}

std::size_t FusionSpec::resolved_target_dim(std::span<const std::size_t> input_dims) const {
  if (!uses_projection(method)) return 0;
  if (input_dims.empty()) throw FusionError("no input dims");
  std::size_t d = target_dim;
  if (d == 0) {
    d = is_pairwise(method) ? kDefaultPairwiseDim : *std::min_element(input_dims.begin(), input_dims.end());
  }
  const std::string name(to_string(method));
  if (d == 0) throw FusionError(name + ": target dim must be at least 1");
  if ((method == FusionMethod::kMultiply || method == FusionMethod::kAll) && detail::square_side(d) == 0) {
    throw FusionError(name + ": target dim " + std::to_string(d) + " is not a perfect square");
  }
  if ((method == FusionMethod::kQuaternion || method == FusionMethod::kAll) && d % 4 != 0) {
    throw FusionError(name + ": target dim " + std::to_string(d) + " is not divisible by 4");
  }
  return d;
}

std::size_t FusionSpec::fused_dim(std::span<const std::size_t> input_dims) const {
  switch (method) {
    case FusionMethod::kNone:
      return input_dims.empty() ? 0 : input_dims[0];
    case FusionMethod::kConcat: {
      std::size_t s = 0;
      for (std::size_t d : input_dims) s += d;
      return s;
    }
    case FusionMethod::kAll:
      return 4 * resolved_target_dim(input_dims);
    default:
      return resolved_target_dim(input_dims);
  }
}

void to_json(nlohmann::json& j, const FusionSpec& spec) {
  nlohmann::json inputs = nlohmann::json::array();
  for (const auto& in : spec.inputs) inputs.push_back({{"model", in.model}, {"layer", in.layer}});
  j = nlohmann::json{{"method", to_string(spec.method)},
                     {"residual", spec.residual},
                     {"inputs", std::move(inputs)},
                     {"target_dim", spec.target_dim}};
}

void from_json(const nlohmann::json& j, FusionSpec& spec) {
  if (!j.is_object()) throw FusionError("fusion spec must be a JSON object");
  try {
    spec.method = parse_fusion_method(j.at("method").get<std::string>());
    spec.residual = j.value("residual", false);
    spec.target_dim = j.value("target_dim", std::size_t{0});
    spec.inputs.clear();
    for (const auto& in : j.at("inputs")) {
      spec.inputs.push_back({in.at("model").get<std::string>(), in.at("layer").get<int>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FusionError(std::string("fusion spec: ") + e.what());
  }
}

}  // namespace layerfuse
