#pragma once

#include "stageflow/backend.hpp"
#include "stageflow/mapper.hpp"
#include "stageflow/memory.hpp"
#include "stageflow/scheduler.hpp"
#include "stageflow/signals.hpp"
#include "stageflow/workflow.hpp"

namespace stageflow {

// ── Stage routing ────────────────────────────────────────────────────

/// Resolves a stage's backend at dispatch time. Explicit plans answer
/// immediately; dynamic mappers (one-bit, threshold) may route per request.
class StageRouter {
 public:
  using RouteCallback = std::function<void(std::string backend_ref, MappingProvenance)>;

  virtual ~StageRouter() = default;
  virtual void route(const StageSpec& stage, const Context& ctx, const RequestMetadata& meta,
                     RouteCallback done) = 0;
};

class PlanRouter : public StageRouter {
 public:
  explicit PlanRouter(MappingPlan plan) : plan_(std::move(plan)) {}
  void route(const StageSpec& stage, const Context&, const RequestMetadata&,
             RouteCallback done) override;

 private:
  MappingPlan plan_;
};

/// Routes the listed stages by score threshold; other stages keep their
/// declared backend. An empty stage set routes every stage.
class ThresholdRouter : public StageRouter {
 public:
  ThresholdRouter(ScoreFn score_fn, double threshold, std::string light, std::string heavy,
                  std::set<std::string> routable_stages = {});
  void route(const StageSpec& stage, const Context& ctx, const RequestMetadata&,
             RouteCallback done) override;

 private:
  ScoreFn score_fn_;
  double threshold_;
  std::string light_, heavy_;
  std::set<std::string> routable_;
};

/// Routes per request via a one-bit LLM classification on the light backend.
class OneBitRouter : public StageRouter {
 public:
  OneBitRouter(std::shared_ptr<Backend> classifier, std::string light, std::string heavy,
               std::set<std::string> routable_stages = {},
               std::string prompt_template = kDefaultClassifierPrompt);
  void route(const StageSpec& stage, const Context& ctx, const RequestMetadata& meta,
             RouteCallback done) override;

 private:
  std::shared_ptr<Backend> classifier_;
  std::string light_, heavy_;
  std::set<std::string> routable_;
  std::string prompt_template_;
};

// ── Tools ────────────────────────────────────────────────────────────

class ToolNotFoundError : public std::runtime_error {
 public:
  explicit ToolNotFoundError(const std::string& name)
      : std::runtime_error("tool not found: " + name), tool_name(name) {}
  std::string tool_name;
};

/// Invokes the registered handler. Handler exceptions become
/// ToolResult{is_error = true}; an unregistered name throws.
ToolResult execute_tool(const ToolCall& call, const ToolRegistry& registry);

json tool_wire_schema(const ToolSpec& tool);

/// Queue-depth threshold rerouting: stay on the primary while its depth is
/// below the limit, otherwise take the first alternate below the limit,
/// otherwise stay put.
std::string reroute_on_overload(const std::string& primary,
                                std::span<const std::string> alternates,
                                const std::function<std::size_t(const std::string&)>& queue_depth,
                                std::size_t limit);

// ── Execution ────────────────────────────────────────────────────────

struct ExecutionReport {
  std::string workflow_id;
  std::map<std::string, StageResult> results;
  std::set<std::string> failed;
  std::set<std::string> aborted;  // descendants of failed stages
  std::map<std::string, std::string> errors;
  double first_enqueue_ts = 0;
  double last_complete_ts = 0;
  double makespan_ms = 0;
  std::map<std::string, std::string> routing;  // stage -> backend actually used

  bool success() const { return failed.empty() && aborted.empty(); }
  json to_json() const;
};

/// One backend completion served, for metrics aggregation.
struct CompletionSample {
  std::string backend_ref;
  std::string model;
  std::string workflow_id;
  std::string stage_id;
  ResponseTiming timing;
  Usage usage;
  double dispatch_ts = 0;
  double complete_ts = 0;
};

using SampleSink = std::function<void(const CompletionSample&)>;

struct OrchestratorConfig {
  std::size_t reroute_queue_limit = 32;
  std::map<std::string, std::vector<std::string>> reroute_alternates;
};

class StageFailedError : public std::runtime_error {
 public:
  StageFailedError(const std::string& stage, const std::string& cause)
      : std::runtime_error("stage " + stage + " failed: " + cause), stage_id(stage) {}
  std::string stage_id;
};

/// Executes mapped workflows: dispatches ready stages concurrently through
/// per-backend two-level queues, runs single-shot and agent-loop stages,
/// propagates context, and emits lifecycle signals in causal order. All
/// orchestration runs on the driving event loop; many workflows may be in
/// flight at once.
class Orchestrator {
 public:
  Orchestrator(EventLoop& loop, BackendRegistry& backends, ToolRegistry& tools, SignalBus& bus,
               OrchestratorConfig config = {}, LogFn log = {});

  /// Starts a workflow now; `done` fires on the loop when it finishes.
  void submit(ValidatedWorkflow wf, std::shared_ptr<StageRouter> router,
              std::function<void(ExecutionReport)> done = {},
              std::map<std::string, std::string> annotations = {});

  /// Schedules a workflow to start at `at_ms` on the driving clock.
  void submit_at(double at_ms, ValidatedWorkflow wf, std::shared_ptr<StageRouter> router,
                 std::function<void(ExecutionReport)> done = {},
                 std::map<std::string, std::string> annotations = {});

  /// Convenience: submits and drives the loop until the workflow finishes.
  ExecutionReport execute_workflow(const ValidatedWorkflow& wf, const MappingPlan& plan);
  ExecutionReport execute_workflow(const ValidatedWorkflow& wf,
                                   std::shared_ptr<StageRouter> router);

  BackendQueue& queue(const std::string& backend_ref);
  std::size_t queue_depth(const std::string& backend_ref) const;

  PolicyRegistry& policies() { return policies_; }
  ToolRegistry& tools() { return tools_; }
  EventLoop& loop() { return loop_; }
  BackendRegistry& backends() { return backends_; }
  SignalBus& bus() { return bus_; }
  const OrchestratorConfig& config() const { return config_; }
  const LogFn& log() const { return log_; }

  void set_sample_sink(SampleSink sink) { sample_sink_ = std::move(sink); }
  void emit_sample(const CompletionSample& sample) const {
    if (sample_sink_) sample_sink_(sample);
  }

  /// Dispatches queued requests to the backend while it has capacity.
  void pump(const std::string& backend_ref);

  /// Issues one completion and re-pumps the backend when it finishes.
  void start_request(const std::string& backend_ref, CompletionRequest req,
                     CompletionCallback cb);

 private:
  EventLoop& loop_;
  BackendRegistry& backends_;
  ToolRegistry& tools_;
  SignalBus& bus_;
  OrchestratorConfig config_;
  LogFn log_;
  PolicyRegistry policies_;
  SampleSink sample_sink_;
  std::map<std::string, std::unique_ptr<BackendQueue>> queues_;
};

}  // namespace stageflow
