#include "stageflow/harness.hpp"

#include <algorithm>
#include <ostream>

namespace stageflow {

MetricsReport run_benchmark(const std::vector<TraceRecord>& trace, const HarnessConfig& config,
                            BenchmarkOptions options) {
  EventLoop loop(options.clock);
  LogFn log = stderr_logger(LogLevel::Error);
  auto registry = build_registry(config, loop, log);
  ToolRegistry tools;
  SignalBus bus;
  MemoryManager memory(config.memory, &registry, log);
  memory.attach(bus);
  Orchestrator orch(loop, registry, tools, bus, config.orchestration, log);
  auto templates = build_templates(config);

  MetricsReport report;
  report.run_label = options.label.empty() ? config.label : options.label;
  report.seed = options.seed;

  orch.set_sample_sink([&report](const CompletionSample& s) { report.ttft_samples.push_back(s); });

  double first_enqueue = -1;
  double last_complete = 0;
  std::size_t remaining = trace.size();

  for (std::size_t i = 0; i < trace.size(); ++i) {
    const auto& rec = trace[i];
    const std::string workflow_id = rec.workflow_template + "-" + std::to_string(i);
    auto spec = templates.at(rec.workflow_template)(
        rec, workflow_id, config.template_params.value(rec.workflow_template, json::object()));
    if (spec.stages.empty()) {
      --remaining;
      continue;
    }
    // Stages without a declared scheduling policy inherit the config default.
    for (auto& [_, stage] : spec.stages) {
      if (stage.stage_scheduling_policy == "fcfs" && config.default_stage_policy != "fcfs") {
        stage.stage_scheduling_policy = config.default_stage_policy;
      }
      if (stage.request_scheduling_policy == "fcfs" && config.default_request_policy != "fcfs") {
        stage.request_scheduling_policy = config.default_request_policy;
      }
    }
    auto validated = validate_workflow(spec, registry);
    if (!validated.ok()) {
      std::string causes;
      for (const auto& e : validated.errors) causes += e.message + "; ";
      throw ConfigError("template " + rec.workflow_template + " produced an invalid workflow: " +
                        causes);
    }
    const auto& wf = *validated.workflow;
    if (!wf.spec().workflow_memory_policy.empty()) {
      memory.set_workflow_chain(workflow_id, wf.spec().workflow_memory_policy);
    }
    auto router = make_router(config, registry, wf);
    const double arrival = static_cast<double>(rec.arrival_ms);
    report.workflow_arrival_ms[workflow_id] = arrival;

    orch.submit_at(arrival, wf, std::move(router),
                   [&, workflow_id, arrival](ExecutionReport er) {
                     report.workflow_completion_ms[workflow_id] =
                         er.last_complete_ts - arrival;
                     if (!er.success()) ++report.workflows_failed;
                     for (const auto& [stage, backend] : er.routing) {
                       ++report.routing_split[backend];
                     }
                     if (first_enqueue < 0 || er.first_enqueue_ts < first_enqueue) {
                       first_enqueue = er.first_enqueue_ts;
                     }
                     last_complete = std::max(last_complete, er.last_complete_ts);
                     --remaining;
                   },
                   rec.annotations());
    ++report.workflows_total;
  }

  // Background pressure monitor; stops once the run drains.
  auto tick = std::make_shared<std::function<void()>>();
  if (config.memory.monitor_interval_ms > 0) {
    *tick = [&, wp = std::weak_ptr<std::function<void()>>(tick)] {
      if (remaining == 0) return;
      memory.pressure_tick(loop.now_ms());
      if (auto self = wp.lock()) loop.schedule_in(config.memory.monitor_interval_ms, *self);
    };
    loop.schedule_in(config.memory.monitor_interval_ms, *tick);
  }

  loop.run_until_idle();

  report.makespan_ms = (first_enqueue < 0) ? 0 : last_complete - first_enqueue;

  std::vector<UsageRecord> usage_records;
  for (const auto& ref : registry.refs()) {
    const auto& backend = registry.at(ref);
    const auto& stats = backend.stats();
    BackendUsage usage;
    usage.model = backend.descriptor().model;
    usage.requests = stats.completions;
    usage.prompt_tokens = stats.prompt_tokens;
    usage.completion_tokens = stats.completion_tokens;
    usage.cached_prefix_tokens = stats.cached_prefix_tokens;
    report.usage_per_backend[ref] = usage;
    UsageRecord rec{usage.model, usage.prompt_tokens, usage.completion_tokens};
    report.cost_per_backend[ref] =
        estimate_cost(std::span<const UsageRecord>(&rec, 1), config.prices);
    usage_records.push_back(rec);
  }
  report.total_cost =
      estimate_cost(std::span<const UsageRecord>(usage_records.data(), usage_records.size()),
                    config.prices);
  return report;
}

void ComparisonReport::write_summary(std::ostream& out) const {
  a.write_summary(out);
  out << "\n";
  b.write_summary(out);
  out << "\n";
  auto delta = [&out](const std::string& name, double va, double vb) {
    out << "  " << name << ": " << va << " vs " << vb;
    if (vb != 0) {
      out << "  (" << (va < vb ? "-" : "+")
          << (std::abs(va - vb) / std::abs(vb)) * 100.0 << "% vs b)";
    }
    out << "\n";
  };
  out << "delta (a vs b):\n";
  delta("makespan_ms", a.makespan_ms, b.makespan_ms);
  delta("mean_completion_ms", a.mean_completion_ms(), b.mean_completion_ms());
  delta("mean_ttft_ms", a.mean_ttft_ms(), b.mean_ttft_ms());
  delta("total_cost", a.total_cost, b.total_cost);
}

ComparisonReport compare_benchmarks(const std::vector<TraceRecord>& trace,
                                    const HarnessConfig& config_a, const HarnessConfig& config_b,
                                    BenchmarkOptions options) {
  ComparisonReport out;
  auto opts_a = options;
  if (opts_a.label.empty()) opts_a.label = config_a.label.empty() ? "a" : config_a.label;
  auto opts_b = options;
  if (opts_b.label.empty()) opts_b.label = config_b.label.empty() ? "b" : config_b.label;
  out.a = run_benchmark(trace, config_a, opts_a);
  out.b = run_benchmark(trace, config_b, opts_b);
  return out;
}

std::vector<LintFinding> validate_setup(const HarnessConfig& config) {
  std::vector<LintFinding> findings;
  EventLoop loop(ClockMode::Virtual);
  BackendRegistry registry;
  try {
    registry = build_registry(config, loop);
  } catch (const std::exception& e) {
    findings.push_back({"backends", e.what(), true});
    return findings;
  }

  for (const auto& name : {config.mapper.light, config.mapper.heavy}) {
    if (config.mapper.type != MapperConfig::Type::Explicit && !registry.contains(name)) {
      findings.push_back({"mapper", "mapper references unknown backend: " + name, true});
    }
  }
  if (config.mapper.type == MapperConfig::Type::OneBit &&
      !registry.contains(config.mapper.classifier)) {
    findings.push_back(
        {"mapper", "classifier references unknown backend: " + config.mapper.classifier, true});
  }

  for (const auto& name : config.memory.policy_chain) {
    try {
      memory_policy_by_name(name);
    } catch (const std::exception& e) {
      findings.push_back({"memory", e.what(), true});
    }
  }

  TemplateRegistry templates;
  try {
    templates = build_templates(config);
  } catch (const std::exception& e) {
    findings.push_back({"workflows", e.what(), true});
    return findings;
  }
  // Lint the templates this config actually uses: declarative workflows plus
  // built-ins with a "templates" entry. Unused built-ins reference default
  // backend refs a config need not define.
  std::set<std::string> to_lint;
  for (const auto& def : config.declarative_workflows) {
    to_lint.insert(def.value("name", ""));
  }
  for (const auto& [name, _] : config.template_params.items()) to_lint.insert(name);

  TraceRecord probe;
  probe.payload = json{{"prompt", "probe prompt"}, {"ticket", "probe ticket"}};
  for (const auto& name : to_lint) {
    if (!templates.contains(name)) {
      findings.push_back({"template " + name, "no such template", true});
      continue;
    }
    probe.workflow_template = name;
    try {
      auto spec = templates.at(name)(probe, "lint-" + name,
                                     config.template_params.value(name, json::object()));
      auto result = validate_workflow(spec, registry);
      for (const auto& e : result.errors) {
        findings.push_back({"template " + name, e.message, true});
      }
    } catch (const std::exception& e) {
      findings.push_back({"template " + name, e.what(), true});
    }
  }
  return findings;
}

}  // namespace stageflow
