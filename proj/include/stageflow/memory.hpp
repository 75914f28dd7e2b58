#pragma once

#include <iosfwd>

#include "stageflow/backend.hpp"
#include "stageflow/signals.hpp"

namespace stageflow {

struct CacheEntry {
  std::string workflow_id;
  std::string backend_ref;
  std::string model;
  long long token_count = 0;
  bool preserved = false;
  double last_update_ts = 0;
};

struct CacheAction {
  enum class Kind { Preserve, Flush, NoOp };

  Kind kind = Kind::NoOp;
  std::string workflow_id;  // empty for NoOp
  std::string backend_ref;  // empty for NoOp
  std::string reason;       // policy name or "override"

  static CacheAction noop(std::string reason = {}) {
    return {Kind::NoOp, {}, {}, std::move(reason)};
  }
  static CacheAction preserve(std::string wf, std::string backend, std::string reason) {
    return {Kind::Preserve, std::move(wf), std::move(backend), std::move(reason)};
  }
  static CacheAction flush(std::string wf, std::string backend, std::string reason) {
    return {Kind::Flush, std::move(wf), std::move(backend), std::move(reason)};
  }
  bool is_noop() const { return kind == Kind::NoOp; }
};

const char* cache_action_kind_name(CacheAction::Kind kind);

struct LastStage {
  std::string backend_ref;
  std::string model;
  long long token_count = 0;
};

/// Bookkeeping of preserved KV state per (workflow, backend), in-flight
/// request counts, and each workflow's most recent stage.
class WorkflowTracker {
 public:
  const CacheEntry* entry(const std::string& workflow_id, const std::string& backend_ref) const;
  std::vector<CacheEntry> preserved_entries(const std::string& workflow_id) const;
  std::vector<CacheEntry> preserved_entries_on(const std::string& backend_ref) const;
  int in_flight(const std::string& backend_ref, const std::string& workflow_id) const;
  const LastStage* last_stage(const std::string& workflow_id) const;
  bool completed(const std::string& workflow_id) const;

  // Mutators (used by the manager and by property tests building scenarios).
  void upsert_entry(CacheEntry entry);
  void mark_flushed(const std::string& workflow_id, const std::string& backend_ref);
  void mark_unpreserved(const std::string& workflow_id, const std::string& backend_ref);
  void set_last_stage(const std::string& workflow_id, LastStage last);
  void adjust_in_flight(const std::string& backend_ref, const std::string& workflow_id, int delta);
  void note_completed(const std::string& workflow_id);
  void erase_workflow(const std::string& workflow_id);

 private:
  std::map<std::pair<std::string, std::string>, CacheEntry> entries_;  // (wf, backend)
  std::map<std::string, std::map<std::string, int>> in_flight_;        // backend -> wf -> n
  std::set<std::string> completed_;
  std::map<std::string, LastStage> last_stage_;
};

struct MemoryConfig {
  long long tau = 512;          // token-increment threshold
  double tau_pressure = 0.85;   // utilization threshold in (0, 1]
  double monitor_interval_ms = 100;
  std::vector<std::string> policy_chain = {"preserve_small_increment", "flush_at_boundary"};
};

/// A policy inspects a signal against the tracker and proposes actions.
/// An empty result means no-op; the first policy in the chain with a
/// non-noop result wins.
using MemoryPolicyFn = std::function<std::vector<CacheAction>(
    const LifecycleSignal&, const WorkflowTracker&, const MemoryConfig&)>;

// ── Built-in policies (pure functions) ───────────────────────────────

/// Preserve when the stage runs on the same backend and model as the
/// workflow's previous stage and the token increase is below tau. No-op when
/// the backend or model changes, there is no preceding stage, or the
/// increase reaches tau.
std::vector<CacheAction> policy_preserve_small_increment(const LifecycleSignal& sig,
                                                         const WorkflowTracker& tracker,
                                                         long long tau);

/// Flush every preserved entry at WorkflowComplete; flush the previous
/// backend's entry when a stage starts on a different backend or model.
std::vector<CacheAction> policy_flush_at_boundary(const LifecycleSignal& sig,
                                                  const WorkflowTracker& tracker);

/// For each backend above the utilization threshold, flush the oldest idle
/// workflow's entry (zero in-flight requests there); one flush per backend
/// per tick, never touching workflows with in-flight requests.
std::vector<CacheAction> pressure_actions(const WorkflowTracker& tracker,
                                          const std::map<std::string, double>& utilization,
                                          double tau_pressure);

MemoryPolicyFn memory_policy_by_name(const std::string& name);

/// Applies one action against live backends. Flush failures retry once;
/// returns false when the backend call ultimately failed.
bool apply_action(const CacheAction& action, BackendRegistry& backends, LogFn log = {});

class OutOfOrderSignalError : public std::logic_error {
  using std::logic_error::logic_error;
};

/// Owns the KV-cache lifecycle: resolves each lifecycle signal through
/// override -> policy chain -> no-op, keeps the tracker current, applies
/// actions to backends, and appends to a replayable action log.
class MemoryManager {
 public:
  MemoryManager(MemoryConfig config, BackendRegistry* backends = nullptr, LogFn log = {});
  MemoryManager(MemoryConfig config, std::vector<MemoryPolicyFn> chain,
                BackendRegistry* backends = nullptr, LogFn log = {});

  std::vector<CacheAction> on_signal(const LifecycleSignal& sig);

  /// Polls registered backends for utilization and applies pressure flushes.
  std::vector<CacheAction> pressure_tick(double now_ms = 0);
  /// Same decision path against caller-supplied utilization (no registry).
  std::vector<CacheAction> pressure_tick(const std::map<std::string, double>& utilization,
                                         double now_ms = 0);

  /// Per-workflow policy-chain override (workflow_memory_policy).
  void set_workflow_chain(const std::string& workflow_id, const std::vector<std::string>& names);

  void attach(SignalBus& bus);

  const WorkflowTracker& tracker() const { return tracker_; }
  const MemoryConfig& config() const { return config_; }

  struct LogRecord {
    std::string trigger;  // signal description or "pressure_tick"
    double ts = 0;
    CacheAction action;
  };
  const std::vector<LogRecord>& action_log() const { return action_log_; }
  void export_action_log(std::ostream& out) const;  // line-delimited JSON

 private:
  MemoryConfig config_;
  std::vector<MemoryPolicyFn> chain_;
  BackendRegistry* backends_;
  LogFn log_;
  WorkflowTracker tracker_;
  std::map<std::string, std::vector<MemoryPolicyFn>> workflow_chains_;
  std::vector<LogRecord> action_log_;
  // Causal-order validation state.
  std::map<std::string, std::set<std::string>> started_ever_;
  std::map<std::string, std::set<std::string>> open_stages_;

  std::vector<CacheAction> resolve(const LifecycleSignal& sig) const;
  void check_order(const LifecycleSignal& sig) const;
  void apply_and_record(const CacheAction& action, const std::string& trigger, double ts);
  void update_tracker(const LifecycleSignal& sig);
};

}  // namespace stageflow
