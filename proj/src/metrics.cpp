#include "stageflow/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>

namespace stageflow {

double estimate_cost(std::span<const UsageRecord> usage, const PriceTable& prices) {
  double total = 0;
  for (const auto& rec : usage) {
    auto it = prices.by_model.find(rec.model);
    if (it == prices.by_model.end()) throw UnpricedModelError(rec.model);
    total += (static_cast<double>(rec.prompt_tokens) * it->second.input_per_1m +
              static_cast<double>(rec.completion_tokens) * it->second.output_per_1m) /
             1e6;
  }
  return total;
}

double percentile_nearest_rank(std::vector<double> sorted_samples, int pct) {
  if (sorted_samples.empty()) throw std::invalid_argument("no samples");
  const auto n = static_cast<double>(sorted_samples.size());
  auto rank = static_cast<std::size_t>(std::ceil(static_cast<double>(pct) / 100.0 * n));
  rank = std::max<std::size_t>(rank, 1);
  return sorted_samples[rank - 1];
}

double MetricsReport::mean_completion_ms() const {
  if (workflow_completion_ms.empty()) return 0;
  double sum = 0;
  for (const auto& [_, v] : workflow_completion_ms) sum += v;
  return sum / static_cast<double>(workflow_completion_ms.size());
}

double MetricsReport::median_completion_ms() const {
  if (workflow_completion_ms.empty()) return 0;
  std::vector<double> v;
  v.reserve(workflow_completion_ms.size());
  for (const auto& [_, t] : workflow_completion_ms) v.push_back(t);
  std::sort(v.begin(), v.end());
  return percentile_nearest_rank(std::move(v), 50);
}

double MetricsReport::mean_ttft_ms() const {
  if (ttft_samples.empty()) return 0;
  double sum = 0;
  for (const auto& s : ttft_samples) sum += s.timing.ttft_ms;
  return sum / static_cast<double>(ttft_samples.size());
}

std::vector<double> MetricsReport::ttft_cdf() const {
  if (ttft_samples.empty()) return {};
  std::vector<double> sorted;
  sorted.reserve(ttft_samples.size());
  for (const auto& s : ttft_samples) sorted.push_back(s.timing.ttft_ms);
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> points;
  points.reserve(99);
  for (int p = 1; p <= 99; ++p) points.push_back(percentile_nearest_rank(sorted, p));
  return points;
}

void MetricsReport::write_jsonl(std::ostream& out) const {
  json header{{"type", "run"},
              {"label", run_label},
              {"seed", seed},
              {"requests", request_count()},
              {"workflows", workflows_total},
              {"workflows_failed", workflows_failed},
              {"makespan_ms", makespan_ms},
              {"mean_completion_ms", mean_completion_ms()},
              {"median_completion_ms", median_completion_ms()},
              {"total_cost", total_cost},
              {"routing_split", routing_split}};
  out << header.dump() << "\n";

  for (const auto& s : ttft_samples) {
    out << json{{"type", "ttft_sample"},
                {"backend", s.backend_ref},
                {"workflow", s.workflow_id},
                {"stage", s.stage_id},
                {"queue_ms", s.timing.queue_ms},
                {"ttft_ms", s.timing.ttft_ms},
                {"total_ms", s.timing.total_ms},
                {"prompt_tokens", s.usage.prompt_tokens},
                {"completion_tokens", s.usage.completion_tokens},
                {"cached_prefix_tokens", s.usage.cached_prefix_tokens}}
               .dump()
        << "\n";
  }
  for (const auto& [wf, t] : workflow_completion_ms) {
    out << json{{"type", "workflow"},
                {"id", wf},
                {"arrival_ms", workflow_arrival_ms.count(wf) ? workflow_arrival_ms.at(wf) : 0.0},
                {"completion_ms", t}}
               .dump()
        << "\n";
  }
  for (const auto& [backend, u] : usage_per_backend) {
    out << json{{"type", "backend_usage"},
                {"backend", backend},
                {"model", u.model},
                {"requests", u.requests},
                {"prompt_tokens", u.prompt_tokens},
                {"completion_tokens", u.completion_tokens},
                {"cached_prefix_tokens", u.cached_prefix_tokens},
                {"cost",
                 cost_per_backend.count(backend) ? cost_per_backend.at(backend) : 0.0}}
               .dump()
        << "\n";
  }
  auto cdf = ttft_cdf();
  for (std::size_t i = 0; i < cdf.size(); ++i) {
    out << json{{"type", "ttft_cdf"}, {"percentile", i + 1}, {"ttft_ms", cdf[i]}}.dump() << "\n";
  }
}

void MetricsReport::write_csv(std::ostream& out) const {
  out << "percentile,ttft_ms\n";
  auto cdf = ttft_cdf();
  for (std::size_t i = 0; i < cdf.size(); ++i) {
    out << (i + 1) << "," << cdf[i] << "\n";
  }
}

void MetricsReport::write_summary(std::ostream& out) const {
  out << "run: " << (run_label.empty() ? "(unnamed)" : run_label) << "\n";
  out << "  workflows:        " << workflows_total;
  if (workflows_failed) out << " (" << workflows_failed << " failed)";
  out << "\n";
  out << "  requests:         " << request_count() << "\n";
  out << "  makespan:         " << makespan_ms << " ms\n";
  out << "  mean completion:  " << mean_completion_ms() << " ms\n";
  out << "  median completion:" << median_completion_ms() << " ms\n";
  out << "  mean ttft:        " << mean_ttft_ms() << " ms\n";
  out << "  total cost:       " << total_cost << "\n";
  if (!routing_split.empty()) {
    out << "  routing split:    ";
    bool first = true;
    for (const auto& [backend, n] : routing_split) {
      if (!first) out << " / ";
      out << n << " " << backend;
      first = false;
    }
    out << "\n";
  }
  for (const auto& [backend, u] : usage_per_backend) {
    out << "  backend " << backend << ": " << u.requests << " requests, " << u.prompt_tokens
        << " prompt tok (" << u.cached_prefix_tokens << " cached), " << u.completion_tokens
        << " completion tok";
    if (cost_per_backend.count(backend)) out << ", cost " << cost_per_backend.at(backend);
    out << "\n";
  }
}

ReportFormat report_format_from_name(const std::string& name) {
  if (name == "jsonl") return ReportFormat::JsonLines;
  if (name == "csv") return ReportFormat::Csv;
  if (name == "summary") return ReportFormat::Summary;
  throw std::invalid_argument("unknown report format: " + name);
}

void emit_report(const MetricsReport& report, ReportFormat format, const std::string& path) {
  std::ofstream file;
  std::ostream* out = &std::cout;
  if (!path.empty() && path != "-") {
    file.open(path);
    if (!file) throw std::runtime_error("cannot open report path: " + path);
    out = &file;
  }
  switch (format) {
    case ReportFormat::JsonLines: report.write_jsonl(*out); break;
    case ReportFormat::Csv: report.write_csv(*out); break;
    case ReportFormat::Summary: report.write_summary(*out); break;
  }
}

}  // namespace stageflow
