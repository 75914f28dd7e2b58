#pragma once

#include <string>
#include <vector>

#include "stageflow/workflow.hpp"

namespace stageflow {

/// Workflow lifecycle events emitted synchronously on the execution path, in
/// causal order per workflow: StageStart(s) precedes StageComplete(s), and
/// WorkflowComplete is the final signal for the workflow.
struct LifecycleSignal {
  enum class Kind { StageStart, StageComplete, WorkflowComplete };

  Kind kind = Kind::StageStart;
  std::string workflow_id;
  std::string stage_id;  // empty for WorkflowComplete
  std::string backend_ref;
  std::string model;
  long long context_tokens = 0;  // prompt tokens at this transition
  double ts = 0;                 // driving-clock milliseconds
  CachePolicyOverride cache_override = CachePolicyOverride::None;

  static LifecycleSignal stage_start(std::string wf, std::string stage, std::string backend,
                                     std::string model, long long tokens, double ts,
                                     CachePolicyOverride o = CachePolicyOverride::None) {
    return {Kind::StageStart, std::move(wf), std::move(stage), std::move(backend),
            std::move(model), tokens, ts, o};
  }
  static LifecycleSignal stage_complete(std::string wf, std::string stage, std::string backend,
                                        std::string model, long long tokens, double ts,
                                        CachePolicyOverride o = CachePolicyOverride::None) {
    return {Kind::StageComplete, std::move(wf), std::move(stage), std::move(backend),
            std::move(model), tokens, ts, o};
  }
  static LifecycleSignal workflow_complete(std::string wf, double ts) {
    return {Kind::WorkflowComplete, std::move(wf), {}, {}, {}, 0, ts,
            CachePolicyOverride::None};
  }
};

const char* signal_kind_name(LifecycleSignal::Kind kind);

using SignalSink = std::function<void(const LifecycleSignal&)>;

/// In-process channel between the orchestrator and signal consumers.
/// Delivery is synchronous and in subscription order.
class SignalBus {
 public:
  void subscribe(SignalSink sink) { sinks_.push_back(std::move(sink)); }
  void publish(const LifecycleSignal& sig) const {
    for (const auto& sink : sinks_) sink(sig);
  }

 private:
  std::vector<SignalSink> sinks_;
};

}  // namespace stageflow
