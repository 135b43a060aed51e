#include "layerfuse/report.hpp"

#include <charconv>
#include <cstdio>
#include <stdexcept>

#include "binary_io.hpp"

namespace layerfuse {

namespace {

constexpr std::string_view kCsvHeader =
    "dataset,inputs,method,residual,aggregation,k,accuracy,fused_dim,memory_bytes,error";

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    any = true;
    if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      any = false;
    } else if (c != '\r') {
      field += c;
    }
  }
  if (quoted) throw std::invalid_argument("csv: unterminated quoted field");
  if (any) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::size_t to_size(const std::string& s, const char* what) {
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw std::invalid_argument(std::string("csv: bad ") + what + " '" + s + "'");
  }
  return v;
}

}  // namespace

std::optional<std::size_t> best_row(const SweepResult& result, std::string_view model) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < result.rows.size(); ++i) {
    const auto& r = result.rows[i];
    if (!r.ok()) continue;
    if (!model.empty() && (r.inputs.empty() || r.inputs.front().model != model)) continue;
    if (!best || r.accuracy > result.rows[*best].accuracy) best = i;
  }
  return best;
}

std::string format_accuracy(double value) {
  // Shortest round-trip decimal, then decimal round-half-up to 4 places, so
  // that 0.97935 renders as 0.9794 even though its binary value is slightly lower.
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value, std::chars_format::fixed);
  if (ec != std::errc()) throw std::runtime_error("format_accuracy: value out of range");
  std::string s(buf, end);
  bool negative = false;
  if (!s.empty() && s[0] == '-') {
    negative = true;
    s.erase(0, 1);
  }
  auto dot = s.find('.');
  if (dot == std::string::npos) {
    s += '.';
    dot = s.size() - 1;
  }
  std::string frac = s.substr(dot + 1);
  std::string whole = s.substr(0, dot);
  const bool round_up = frac.size() > 4 && frac[4] >= '5';
  frac.resize(4, '0');
  std::string digits = whole + frac;
  if (round_up) {
    std::size_t i = digits.size();
    while (i > 0) {
      --i;
      if (digits[i] == '9') {
        digits[i] = '0';
      } else {
        ++digits[i];
        break;
      }
      if (i == 0) digits.insert(digits.begin(), '1');
    }
  }
  std::string out = digits.substr(0, digits.size() - 4) + "." + digits.substr(digits.size() - 4);
  if (negative && out.find_first_not_of("0.") != std::string::npos) out.insert(out.begin(), '-');
  return out;
}

std::string format_inputs(const std::vector<FusionInput>& inputs) {
  std::string out;
  for (const auto& in : inputs) {
    if (!out.empty()) out += '+';
    out += in.model + ":" + std::to_string(in.layer);
  }
  return out;
}

std::vector<FusionInput> parse_inputs(std::string_view text) {
  std::vector<FusionInput> out;
  while (!text.empty()) {
    const auto plus = text.find('+');
    const std::string_view item = text.substr(0, plus);
    const auto colon = item.rfind(':');
    if (colon == std::string_view::npos) throw std::invalid_argument("inputs: expected model:layer, got '" + std::string(item) + "'");
    FusionInput in;
    in.model = std::string(item.substr(0, colon));
    const std::string layer(item.substr(colon + 1));
    in.layer = static_cast<int>(to_size(layer, "layer"));
    out.push_back(std::move(in));
    if (plus == std::string_view::npos) break;
    text.remove_prefix(plus + 1);
  }
  return out;
}

std::string render_csv(const SweepResult& result, const ReportOptions& options) {
  std::string out(kCsvHeader);
  if (options.include_wall_time) out += ",wall_seconds";
  out += '\n';
  for (const auto& r : result.rows) {
    out += csv_field(r.dataset);
    out += ',' + csv_field(format_inputs(r.inputs));
    out += ',' + std::string(to_string(r.method));
    out += r.residual ? ",1" : ",0";
    out += ',' + std::string(r.aggregation ? to_string(*r.aggregation) : "none");
    out += ',' + std::to_string(r.k);
    out += ',' + (r.ok() ? format_accuracy(r.accuracy) : std::string());
    out += ',' + std::to_string(r.fused_dim);
    out += ',' + std::to_string(r.memory_bytes);
    out += ',' + csv_field(r.error);
    if (options.include_wall_time) {
      char buf[32];
      std::snprintf(buf, sizeof buf, ",%.3f", r.wall_seconds);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

nlohmann::json render_json(const SweepResult& result, const ReportOptions& options) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : result.rows) {
    nlohmann::json inputs = nlohmann::json::array();
    for (const auto& in : r.inputs) inputs.push_back({{"model", in.model}, {"layer", in.layer}});
    nlohmann::json row = {
        {"dataset", r.dataset},
        {"inputs", std::move(inputs)},
        {"method", to_string(r.method)},
        {"residual", r.residual},
        {"aggregation", r.aggregation ? to_string(*r.aggregation) : "none"},
        {"k", r.k},
        {"accuracy", r.ok() ? nlohmann::json(std::stod(format_accuracy(r.accuracy))) : nlohmann::json(nullptr)},
        {"fused_dim", r.fused_dim},
        {"memory_bytes", r.memory_bytes},
        {"error", r.error},
    };
    if (options.include_wall_time) row["wall_seconds"] = r.wall_seconds;
    rows.push_back(std::move(row));
  }
  return {{"best", result.best ? nlohmann::json(*result.best) : nlohmann::json(nullptr)}, {"rows", std::move(rows)}};
}

void emit_report(const SweepResult& result, ReportFormat format, const std::filesystem::path& path,
                 const ReportOptions& options) {
  if (result.rows.empty()) throw std::invalid_argument("emit_report: no rows to write");
  if (format == ReportFormat::kCsv) {
    binio::write_file(path, render_csv(result, options));
  } else {
    binio::write_file(path, render_json(result, options).dump(2) + "\n");
  }
}

SweepResult parse_report_csv(std::string_view text) {
  const auto table = parse_csv(text);
  if (table.empty()) throw std::invalid_argument("csv: empty report");
  std::string header;
  for (std::size_t i = 0; i < table[0].size(); ++i) header += (i ? "," : "") + table[0][i];
  if (header != kCsvHeader) throw std::invalid_argument("csv: unexpected header '" + header + "'");

  SweepResult result;
  for (std::size_t i = 1; i < table.size(); ++i) {
    const auto& f = table[i];
    if (f.size() != 10) throw std::invalid_argument("csv: row " + std::to_string(i) + " has " + std::to_string(f.size()) + " fields");
    SweepRow r;
    r.dataset = f[0];
    r.inputs = parse_inputs(f[1]);
    r.method = parse_fusion_method(f[2]);
    r.residual = f[3] == "1";
    if (f[4] != "none") r.aggregation = parse_aggregation_mode(f[4]);
    r.k = to_size(f[5], "k");
    r.error = f[9];
    if (!f[6].empty()) r.accuracy = std::stod(f[6]);
    r.fused_dim = to_size(f[7], "fused_dim");
    r.memory_bytes = to_size(f[8], "memory_bytes");
    result.rows.push_back(std::move(r));
  }
  result.best = best_row(result);
  return result;
}

}  // namespace layerfuse
