#pragma once

// Sweep result rows and their CSV / JSON renderings.
//
// CSV columns, in order:
//   dataset,inputs,method,residual,aggregation,k,accuracy,fused_dim,memory_bytes,error
// `inputs` is "model:layer" joined by '+'. Accuracies have 4 decimals,
// rounded half-up on the shortest decimal form of the value.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "layerfuse/fusion.hpp"

namespace layerfuse {

struct SweepRow {
  std::string dataset;
  std::vector<FusionInput> inputs;
  FusionMethod method = FusionMethod::kNone;
  bool residual = false;
  std::optional<AggregationMode> aggregation;  // multi-layer rows only
  std::size_t k = 1;                           // number of trailing layers aggregated
  double accuracy = 0.0;
  std::size_t fused_dim = 0;
  std::uint64_t memory_bytes = 0;
  double wall_seconds = 0.0;
  std::string error;  // non-empty for cells that could not run

  bool ok() const { return error.empty(); }
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::optional<std::size_t> best;
};

/// Row with the highest accuracy among successful rows whose first input is
/// `model` (any model when empty). Ties go to the earliest row.
std::optional<std::size_t> best_row(const SweepResult& result, std::string_view model = {});

enum class ReportFormat { kCsv, kJson };

struct ReportOptions {
  bool include_wall_time = false;  // adds a trailing wall_seconds column / key
};

std::string format_accuracy(double value);
std::string format_inputs(const std::vector<FusionInput>& inputs);
std::vector<FusionInput> parse_inputs(std::string_view text);

std::string render_csv(const SweepResult& result, const ReportOptions& options = {});
nlohmann::json render_json(const SweepResult& result, const ReportOptions& options = {});
void emit_report(const SweepResult& result, ReportFormat format, const std::filesystem::path& path,
                 const ReportOptions& options = {});

/// Inverse of render_csv (without wall time).
SweepResult parse_report_csv(std::string_view text);

}  // namespace layerfuse
