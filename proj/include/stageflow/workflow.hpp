#pragma once

#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "stageflow/types.hpp"

namespace stageflow {

class BackendRegistry;

enum class ExecutionMode { SingleShot, AgentLoop };
enum class CachePolicyOverride { None, Preserve, Flush };

const char* execution_mode_name(ExecutionMode mode);
const char* cache_policy_override_name(CachePolicyOverride o);

struct InferenceParams {
  double temperature = 0.0;
  long long max_tokens = 1024;
  std::optional<json> response_format;  // opaque schema blob, passed through
};

struct StageResult;
using UpstreamResults = std::map<std::string, StageResult>;

/// Builds a stage's context from its upstream results. When absent, the
/// default is the upstream contents concatenated in stage-id order followed
/// by the stage's static prompt.
using PromptBuilder = std::function<Context(const UpstreamResults&)>;

/// Computes scheduling hints at dispatch time from upstream results
/// (e.g. priority derived from a classification stage's output).
using HintsBuilder = std::function<SchedulingHints(const UpstreamResults&)>;

struct StageSpec {
  std::string id;
  std::string name;
  std::string backend_ref;
  std::string model;  // empty = the assigned backend's configured model
  ExecutionMode execution_mode = ExecutionMode::SingleShot;
  int max_turns = 1;  // AgentLoop only
  InferenceParams inference_params;
  std::vector<ToolSpec> tools;
  std::string static_prompt;
  PromptBuilder prompt_builder;
  HintsBuilder hints_builder;
  SchedulingHints scheduling_hints;
  CachePolicyOverride cache_policy_override = CachePolicyOverride::None;
  std::string stage_scheduling_policy = "fcfs";
  std::string request_scheduling_policy = "fcfs";
};

struct StageTiming {
  double enqueue_ts = 0;
  double dispatch_ts = 0;
  double first_token_ts = 0;
  double complete_ts = 0;
};

struct StageResult {
  std::string stage_id;
  std::string content;
  std::optional<json> structured;  // set when response_format was requested
  std::vector<std::pair<ToolCall, ToolResult>> tool_transcript;
  Usage usage;
  StageTiming timing;
  bool incomplete = false;  // turn limit hit while the model kept calling tools
};

struct WorkflowSpec {
  std::string id;
  std::map<std::string, StageSpec> stages;
  // Declared edge-by-edge as (downstream, upstream).
  std::vector<std::pair<std::string, std::string>> dependencies;
  std::vector<std::string> workflow_memory_policy;  // optional chain override
};

/// Single-owner mutable builder; workflows become immutable at validation.
class WorkflowBuilder {
 public:
  explicit WorkflowBuilder(std::string workflow_id) { spec_.id = std::move(workflow_id); }

  WorkflowBuilder& add_stage(StageSpec spec);
  WorkflowBuilder& add_dependency(const std::string& downstream, const std::string& upstream);
  WorkflowBuilder& set_memory_policy(std::vector<std::string> chain);

  const WorkflowSpec& spec() const { return spec_; }
  WorkflowSpec take() { return std::move(spec_); }

 private:
  WorkflowSpec spec_;
};

enum class ValidationErrorKind { CycleDetected, UnknownStage, UnknownBackend, IncompatibleParams };

struct ValidationError {
  ValidationErrorKind kind;
  std::string message;
  std::string stage_id;                 // offending stage when applicable
  std::vector<std::string> cycle_path;  // CycleDetected only
};

/// Frozen, shareable workflow graph with upstream sets normalized per stage.
class ValidatedWorkflow {
 public:
  const WorkflowSpec& spec() const { return graph_->spec; }
  const std::string& id() const { return graph_->spec.id; }
  std::size_t size() const { return graph_->spec.stages.size(); }

  bool has_stage(const std::string& stage_id) const;
  const StageSpec& stage(const std::string& stage_id) const;
  const std::set<std::string>& upstream(const std::string& stage_id) const;
  const std::set<std::string>& downstream(const std::string& stage_id) const;
  std::vector<std::string> stage_ids() const;  // sorted

  /// All transitive downstream stages of `stage_id`.
  std::set<std::string> descendants(const std::string& stage_id) const;

  bool same_graph(const ValidatedWorkflow& other) const { return graph_ == other.graph_; }

 private:
  friend struct ValidatedWorkflowAccess;
  struct Graph {
    WorkflowSpec spec;
    std::map<std::string, std::set<std::string>> upstream;
    std::map<std::string, std::set<std::string>> downstream;
  };
  std::shared_ptr<const Graph> graph_;
};

struct ValidationResult {
  std::optional<ValidatedWorkflow> workflow;
  std::vector<ValidationError> errors;
  bool ok() const { return workflow.has_value(); }
};

/// Validates the DAG, dependency endpoints, backend references, and
/// inference-parameter compatibility. Collects every error found.
ValidationResult validate_workflow(const WorkflowSpec& spec, const BackendRegistry& registry);

/// Stages eligible to run: not completed, not in flight, all upstreams completed.
std::set<std::string> ready_stages(const ValidatedWorkflow& wf,
                                   const std::set<std::string>& completed,
                                   const std::set<std::string>& in_flight);

Context build_context(const StageSpec& stage, const std::set<std::string>& upstream_ids,
                      const UpstreamResults& upstream);
Context build_context(const ValidatedWorkflow& wf, const std::string& stage_id,
                      const UpstreamResults& upstream);

// ── Errors ───────────────────────────────────────────────────────────
class WorkflowError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

class UnknownStageError : public WorkflowError {
 public:
  explicit UnknownStageError(const std::string& id)
      : WorkflowError("unknown stage: " + id), stage_id(id) {}
  std::string stage_id;
};

class MissingUpstreamError : public WorkflowError {
 public:
  explicit MissingUpstreamError(const std::string& id)
      : WorkflowError("missing upstream result: " + id), stage_id(id) {}
  std::string stage_id;
};

class BuilderFailedError : public WorkflowError {
 public:
  BuilderFailedError(const std::string& stage, const std::string& cause)
      : WorkflowError("builder failed for stage " + stage + ": " + cause),
        stage_id(stage),
        cause(cause) {}
  std::string stage_id;
  std::string cause;
};

}  // namespace stageflow
