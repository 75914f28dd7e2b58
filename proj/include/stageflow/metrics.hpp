#pragma once

#include <iosfwd>

#include "stageflow/backend.hpp"
#include "stageflow/orchestrator.hpp"

namespace stageflow {

struct PriceTable {
  std::map<std::string, Price> by_model;
};

struct UsageRecord {
  std::string model;
  long long prompt_tokens = 0;
  long long completion_tokens = 0;
};

class UnpricedModelError : public std::runtime_error {
 public:
  explicit UnpricedModelError(const std::string& model)
      : std::runtime_error("no price for model: " + model), model(model) {}
  std::string model;
};

/// Sum over records of (prompt x input + completion x output) / 1e6.
double estimate_cost(std::span<const UsageRecord> usage, const PriceTable& prices);

struct BackendUsage {
  std::string model;
  std::uint64_t requests = 0;
  long long prompt_tokens = 0;
  long long completion_tokens = 0;
  long long cached_prefix_tokens = 0;
};

struct MetricsReport {
  std::string run_label;
  std::uint64_t seed = 0;
  std::vector<CompletionSample> ttft_samples;  // stage requests, completion order
  std::map<std::string, double> workflow_completion_ms;  // wf id -> completion time
  std::map<std::string, double> workflow_arrival_ms;
  double makespan_ms = 0;
  std::map<std::string, BackendUsage> usage_per_backend;  // includes control-plane calls
  std::map<std::string, double> cost_per_backend;
  double total_cost = 0;
  std::map<std::string, std::uint64_t> routing_split;  // backend ref -> routed workflows
  std::uint64_t workflows_total = 0;
  std::uint64_t workflows_failed = 0;

  std::size_t request_count() const { return ttft_samples.size(); }
  double mean_completion_ms() const;
  double median_completion_ms() const;
  double mean_ttft_ms() const;

  /// Nearest-rank percentiles 1..99 of the TTFT samples (empty when there
  /// are no samples).
  std::vector<double> ttft_cdf() const;

  void write_jsonl(std::ostream& out) const;
  void write_csv(std::ostream& out) const;
  void write_summary(std::ostream& out) const;
};

enum class ReportFormat { JsonLines, Csv, Summary };

ReportFormat report_format_from_name(const std::string& name);

/// Writes the report to `path` ("-" = stdout) in the requested format.
void emit_report(const MetricsReport& report, ReportFormat format, const std::string& path);

/// Nearest-rank percentile: smallest sample with cumulative rank >= p%.
double percentile_nearest_rank(std::vector<double> sorted_samples, int pct);

}  // namespace stageflow
