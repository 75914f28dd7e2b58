#include "stageflow/workflow.hpp"

#include <algorithm>
#include <deque>

#include "stageflow/backend.hpp"

namespace stageflow {

const char* execution_mode_name(ExecutionMode mode) {
  return mode == ExecutionMode::SingleShot ? "single_shot" : "agent_loop";
}

const char* cache_policy_override_name(CachePolicyOverride o) {
  switch (o) {
    case CachePolicyOverride::None: return "none";
    case CachePolicyOverride::Preserve: return "preserve";
    case CachePolicyOverride::Flush: return "flush";
  }
  return "none";
}

WorkflowBuilder& WorkflowBuilder::add_stage(StageSpec spec) {
  if (spec.id.empty()) throw WorkflowError("stage id must be nonempty");
  if (spec_.stages.count(spec.id)) {
    throw WorkflowError("duplicate stage id: " + spec.id);
  }
  spec_.stages.emplace(spec.id, std::move(spec));
  return *this;
}

WorkflowBuilder& WorkflowBuilder::add_dependency(const std::string& downstream,
                                                 const std::string& upstream) {
  spec_.dependencies.emplace_back(downstream, upstream);
  return *this;
}

WorkflowBuilder& WorkflowBuilder::set_memory_policy(std::vector<std::string> chain) {
  spec_.workflow_memory_policy = std::move(chain);
  return *this;
}

bool ValidatedWorkflow::has_stage(const std::string& stage_id) const {
  return graph_->spec.stages.count(stage_id) > 0;
}

const StageSpec& ValidatedWorkflow::stage(const std::string& stage_id) const {
  auto it = graph_->spec.stages.find(stage_id);
  if (it == graph_->spec.stages.end()) throw UnknownStageError(stage_id);
  return it->second;
}

const std::set<std::string>& ValidatedWorkflow::upstream(const std::string& stage_id) const {
  auto it = graph_->upstream.find(stage_id);
  if (it == graph_->upstream.end()) throw UnknownStageError(stage_id);
  return it->second;
}

const std::set<std::string>& ValidatedWorkflow::downstream(const std::string& stage_id) const {
  auto it = graph_->downstream.find(stage_id);
  if (it == graph_->downstream.end()) throw UnknownStageError(stage_id);
  return it->second;
}

std::vector<std::string> ValidatedWorkflow::stage_ids() const {
  std::vector<std::string> ids;
  ids.reserve(graph_->spec.stages.size());
  for (const auto& [id, _] : graph_->spec.stages) ids.push_back(id);
  return ids;
}

std::set<std::string> ValidatedWorkflow::descendants(const std::string& stage_id) const {
  std::set<std::string> out;
  std::deque<std::string> frontier{stage_id};
  while (!frontier.empty()) {
    auto cur = frontier.front();
    frontier.pop_front();
    for (const auto& d : downstream(cur)) {
      if (out.insert(d).second) frontier.push_back(d);
    }
  }
  return out;
}

struct ValidatedWorkflowAccess {
  static ValidatedWorkflow make(WorkflowSpec spec,
                                std::map<std::string, std::set<std::string>> upstream,
                                std::map<std::string, std::set<std::string>> downstream) {
    auto graph = std::make_shared<ValidatedWorkflow::Graph>();
    graph->spec = std::move(spec);
    graph->upstream = std::move(upstream);
    graph->downstream = std::move(downstream);
    ValidatedWorkflow wf;
    wf.graph_ = std::move(graph);
    return wf;
  }
};

namespace {

// DFS cycle search returning one explicit cycle path [a, ..., a].
std::vector<std::string> find_cycle(const std::map<std::string, std::set<std::string>>& downstream) {
  enum class Mark { White, Grey, Black };
  std::map<std::string, Mark> mark;
  for (const auto& [id, _] : downstream) mark[id] = Mark::White;

  std::vector<std::string> stack;
  std::vector<std::string> cycle;

  std::function<bool(const std::string&)> visit = [&](const std::string& node) {
    mark[node] = Mark::Grey;
    stack.push_back(node);
    for (const auto& next : downstream.at(node)) {
      if (mark[next] == Mark::Grey) {
        auto it = std::find(stack.begin(), stack.end(), next);
        cycle.assign(it, stack.end());
        cycle.push_back(next);
        return true;
      }
      if (mark[next] == Mark::White && visit(next)) return true;
    }
    stack.pop_back();
    mark[node] = Mark::Black;
    return false;
  };

  for (const auto& [id, _] : downstream) {
    if (mark[id] == Mark::White && visit(id)) return cycle;
  }
  return {};
}

}  // namespace

ValidationResult validate_workflow(const WorkflowSpec& spec, const BackendRegistry& registry) {
  ValidationResult result;
  auto& errors = result.errors;

  std::map<std::string, std::set<std::string>> upstream;
  std::map<std::string, std::set<std::string>> downstream;
  for (const auto& [id, _] : spec.stages) {
    upstream[id];
    downstream[id];
  }

  for (const auto& [down, up] : spec.dependencies) {
    bool endpoints_ok = true;
    for (const auto& id : {down, up}) {
      if (!spec.stages.count(id)) {
        errors.push_back({ValidationErrorKind::UnknownStage,
                          "dependency endpoint names unknown stage: " + id, id, {}});
        endpoints_ok = false;
      }
    }
    if (!endpoints_ok) continue;
    if (down == up) {
      errors.push_back({ValidationErrorKind::CycleDetected,
                        "stage depends on itself: " + down, down, {down, down}});
      continue;
    }
    upstream[down].insert(up);
    downstream[up].insert(down);
  }

  if (auto cycle = find_cycle(downstream); !cycle.empty()) {
    std::string msg = "dependency cycle: ";
    for (std::size_t i = 0; i < cycle.size(); ++i) {
      if (i) msg += " -> ";
      msg += cycle[i];
    }
    errors.push_back({ValidationErrorKind::CycleDetected, msg, cycle.front(), cycle});
  }

  for (const auto& [id, stage] : spec.stages) {
    if (!registry.contains(stage.backend_ref)) {
      errors.push_back({ValidationErrorKind::UnknownBackend,
                        "stage " + id + " references unknown backend: " + stage.backend_ref, id, {}});
      continue;
    }
    const auto& desc = registry.descriptor(stage.backend_ref);
    const auto& params = stage.inference_params;
    if (params.temperature < 0.0) {
      errors.push_back({ValidationErrorKind::IncompatibleParams,
                        "stage " + id + ": temperature must be >= 0", id, {}});
    }
    if (params.max_tokens <= 0) {
      errors.push_back({ValidationErrorKind::IncompatibleParams,
                        "stage " + id + ": max_tokens must be positive", id, {}});
    } else if (params.max_tokens > desc.context_limit_tokens) {
      errors.push_back({ValidationErrorKind::IncompatibleParams,
                        "stage " + id + ": max_tokens " + std::to_string(params.max_tokens) +
                            " exceeds backend context limit " +
                            std::to_string(desc.context_limit_tokens),
                        id, {}});
    }
    if (stage.execution_mode == ExecutionMode::AgentLoop && stage.max_turns < 1) {
      errors.push_back({ValidationErrorKind::IncompatibleParams,
                        "stage " + id + ": agent loop requires max_turns >= 1", id, {}});
    }
    if (stage.execution_mode == ExecutionMode::SingleShot && !stage.tools.empty()) {
      errors.push_back({ValidationErrorKind::IncompatibleParams,
                        "stage " + id + ": single-shot stages cannot declare tools", id, {}});
    }
  }

  if (!errors.empty()) return result;

  result.workflow =
      ValidatedWorkflowAccess::make(spec, std::move(upstream), std::move(downstream));
  return result;
}

std::set<std::string> ready_stages(const ValidatedWorkflow& wf,
                                   const std::set<std::string>& completed,
                                   const std::set<std::string>& in_flight) {
  for (const auto& set : {completed, in_flight}) {
    for (const auto& id : set) {
      if (!wf.has_stage(id)) throw UnknownStageError(id);
    }
  }
  std::set<std::string> ready;
  for (const auto& id : wf.stage_ids()) {
    if (completed.count(id) || in_flight.count(id)) continue;
    const auto& ups = wf.upstream(id);
    if (std::all_of(ups.begin(), ups.end(),
                    [&](const std::string& u) { return completed.count(u) > 0; })) {
      ready.insert(id);
    }
  }
  return ready;
}

Context build_context(const StageSpec& stage, const std::set<std::string>& upstream_ids,
                      const UpstreamResults& upstream) {
  for (const auto& id : upstream_ids) {
    if (!upstream.count(id)) throw MissingUpstreamError(id);
  }
  if (stage.prompt_builder) {
    try {
      return stage.prompt_builder(upstream);
    } catch (const std::exception& e) {
      throw BuilderFailedError(stage.id, e.what());
    }
  }
  // Default: upstream contents in stage-id order, then the static prompt,
  // folded into a single user message.
  std::string text;
  for (const auto& id : upstream_ids) {  // std::set iterates in sorted order
    const auto& content = upstream.at(id).content;
    if (content.empty()) continue;
    if (!text.empty()) text += "\n";
    text += content;
  }
  if (!stage.static_prompt.empty()) {
    if (!text.empty()) text += "\n";
    text += stage.static_prompt;
  }
  return make_user_context(std::move(text));
}

Context build_context(const ValidatedWorkflow& wf, const std::string& stage_id,
                      const UpstreamResults& upstream) {
  return build_context(wf.stage(stage_id), wf.upstream(stage_id), upstream);
}

}  // namespace stageflow
