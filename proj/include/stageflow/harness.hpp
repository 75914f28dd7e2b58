#pragma once

#include "stageflow/config.hpp"

namespace stageflow {

struct BenchmarkOptions {
  ClockMode clock = ClockMode::Virtual;
  std::uint64_t seed = 0;
  std::string label;  // overrides the config label in the report
};

/// Replays a trace: one workflow per record at its arrival time, all driven
/// concurrently through the orchestrator. Deterministic under the virtual
/// clock for a fixed (trace, config, seed).
MetricsReport run_benchmark(const std::vector<TraceRecord>& trace, const HarnessConfig& config,
                            BenchmarkOptions options = {});

struct ComparisonReport {
  MetricsReport a;
  MetricsReport b;
  void write_summary(std::ostream& out) const;
};

ComparisonReport compare_benchmarks(const std::vector<TraceRecord>& trace,
                                    const HarnessConfig& config_a, const HarnessConfig& config_b,
                                    BenchmarkOptions options = {});

struct LintFinding {
  std::string subject;
  std::string message;
  bool is_error = false;
};

/// Config/workflow lint: instantiates each template against a probe record
/// and validates it against the configured backends.
std::vector<LintFinding> validate_setup(const HarnessConfig& config);

}  // namespace stageflow
