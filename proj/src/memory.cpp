#include "stageflow/memory.hpp"

#include <algorithm>
#include <ostream>

namespace stageflow {

const char* signal_kind_name(LifecycleSignal::Kind kind) {
  switch (kind) {
    case LifecycleSignal::Kind::StageStart: return "stage_start";
    case LifecycleSignal::Kind::StageComplete: return "stage_complete";
    case LifecycleSignal::Kind::WorkflowComplete: return "workflow_complete";
  }
  return "stage_start";
}

const char* cache_action_kind_name(CacheAction::Kind kind) {
  switch (kind) {
    case CacheAction::Kind::Preserve: return "preserve";
    case CacheAction::Kind::Flush: return "flush";
    case CacheAction::Kind::NoOp: return "noop";
  }
  return "noop";
}

// ── WorkflowTracker ──────────────────────────────────────────────────

const CacheEntry* WorkflowTracker::entry(const std::string& workflow_id,
                                         const std::string& backend_ref) const {
  auto it = entries_.find({workflow_id, backend_ref});
  return it == entries_.end() ? nullptr : &it->second;
}

std::vector<CacheEntry> WorkflowTracker::preserved_entries(const std::string& workflow_id) const {
  std::vector<CacheEntry> out;
  for (const auto& [key, entry] : entries_) {
    if (key.first == workflow_id && entry.preserved) out.push_back(entry);
  }
  return out;  // map order: sorted by backend_ref
}

std::vector<CacheEntry> WorkflowTracker::preserved_entries_on(
    const std::string& backend_ref) const {
  std::vector<CacheEntry> out;
  for (const auto& [key, entry] : entries_) {
    if (key.second == backend_ref && entry.preserved) out.push_back(entry);
  }
  return out;  // sorted by workflow_id
}

int WorkflowTracker::in_flight(const std::string& backend_ref,
                               const std::string& workflow_id) const {
  auto b = in_flight_.find(backend_ref);
  if (b == in_flight_.end()) return 0;
  auto w = b->second.find(workflow_id);
  return w == b->second.end() ? 0 : w->second;
}

const LastStage* WorkflowTracker::last_stage(const std::string& workflow_id) const {
  auto it = last_stage_.find(workflow_id);
  return it == last_stage_.end() ? nullptr : &it->second;
}

bool WorkflowTracker::completed(const std::string& workflow_id) const {
  return completed_.count(workflow_id) > 0;
}

void WorkflowTracker::upsert_entry(CacheEntry entry) {
  auto key = std::make_pair(entry.workflow_id, entry.backend_ref);
  entries_[key] = std::move(entry);
}

void WorkflowTracker::mark_flushed(const std::string& workflow_id,
                                   const std::string& backend_ref) {
  entries_.erase({workflow_id, backend_ref});
}

void WorkflowTracker::mark_unpreserved(const std::string& workflow_id,
                                       const std::string& backend_ref) {
  auto it = entries_.find({workflow_id, backend_ref});
  if (it != entries_.end()) it->second.preserved = false;
}

void WorkflowTracker::set_last_stage(const std::string& workflow_id, LastStage last) {
  last_stage_[workflow_id] = std::move(last);
}

void WorkflowTracker::adjust_in_flight(const std::string& backend_ref,
                                       const std::string& workflow_id, int delta) {
  int& n = in_flight_[backend_ref][workflow_id];
  n += delta;
  if (n < 0) throw std::logic_error("in-flight count went negative");
  if (n == 0) {
    in_flight_[backend_ref].erase(workflow_id);
    if (in_flight_[backend_ref].empty()) in_flight_.erase(backend_ref);
  }
}

void WorkflowTracker::note_completed(const std::string& workflow_id) {
  completed_.insert(workflow_id);
}

void WorkflowTracker::erase_workflow(const std::string& workflow_id) {
  for (auto it = entries_.begin(); it != entries_.end();) {
    it = it->first.first == workflow_id ? entries_.erase(it) : std::next(it);
  }
  for (auto it = in_flight_.begin(); it != in_flight_.end();) {
    it->second.erase(workflow_id);
    it = it->second.empty() ? in_flight_.erase(it) : std::next(it);
  }
  last_stage_.erase(workflow_id);
}

// ── Built-in policies ────────────────────────────────────────────────

std::vector<CacheAction> policy_preserve_small_increment(const LifecycleSignal& sig,
                                                         const WorkflowTracker& tracker,
                                                         long long tau) {
  if (sig.kind != LifecycleSignal::Kind::StageStart) return {};
  const auto* last = tracker.last_stage(sig.workflow_id);
  if (!last) return {};  // no preceding stage
  if (last->backend_ref != sig.backend_ref || last->model != sig.model) return {};
  if (sig.context_tokens - last->token_count >= tau) return {};
  return {CacheAction::preserve(sig.workflow_id, sig.backend_ref, "preserve_small_increment")};
}

std::vector<CacheAction> policy_flush_at_boundary(const LifecycleSignal& sig,
                                                  const WorkflowTracker& tracker) {
  std::vector<CacheAction> actions;
  if (sig.kind == LifecycleSignal::Kind::WorkflowComplete) {
    for (const auto& entry : tracker.preserved_entries(sig.workflow_id)) {
      actions.push_back(
          CacheAction::flush(sig.workflow_id, entry.backend_ref, "flush_at_boundary"));
    }
    return actions;
  }
  if (sig.kind == LifecycleSignal::Kind::StageStart) {
    const auto* last = tracker.last_stage(sig.workflow_id);
    if (last && (last->backend_ref != sig.backend_ref || last->model != sig.model)) {
      const auto* entry = tracker.entry(sig.workflow_id, last->backend_ref);
      if (entry && entry->preserved) {
        actions.push_back(
            CacheAction::flush(sig.workflow_id, last->backend_ref, "flush_at_boundary"));
      }
    }
  }
  return actions;
}

std::vector<CacheAction> pressure_actions(const WorkflowTracker& tracker,
                                          const std::map<std::string, double>& utilization,
                                          double tau_pressure) {
  std::vector<CacheAction> actions;
  for (const auto& [backend_ref, util] : utilization) {
    if (util <= tau_pressure) continue;
    auto entries = tracker.preserved_entries_on(backend_ref);  // workflow-id sorted
    const CacheEntry* oldest = nullptr;
    for (const auto& entry : entries) {
      if (tracker.in_flight(backend_ref, entry.workflow_id) > 0) continue;  // active
      // Strict < keeps the lexicographically first workflow on timestamp ties.
      if (!oldest || entry.last_update_ts < oldest->last_update_ts) oldest = &entry;
    }
    if (oldest) {
      actions.push_back(
          CacheAction::flush(oldest->workflow_id, backend_ref, "flush_under_pressure"));
    }
  }
  return actions;
}

MemoryPolicyFn memory_policy_by_name(const std::string& name) {
  if (name == "preserve_small_increment") {
    return [](const LifecycleSignal& sig, const WorkflowTracker& t, const MemoryConfig& c) {
      return policy_preserve_small_increment(sig, t, c.tau);
    };
  }
  if (name == "flush_at_boundary") {
    return [](const LifecycleSignal& sig, const WorkflowTracker& t, const MemoryConfig&) {
      return policy_flush_at_boundary(sig, t);
    };
  }
  throw std::invalid_argument("unknown memory policy: " + name);
}

bool apply_action(const CacheAction& action, BackendRegistry& backends, LogFn log) {
  switch (action.kind) {
    case CacheAction::Kind::NoOp:
      return true;
    case CacheAction::Kind::Flush: {
      auto scope = FlushScope::workflow(action.workflow_id);
      try {
        backends.at(action.backend_ref).flush(scope);
      } catch (const std::exception&) {
        try {
          backends.at(action.backend_ref).flush(scope);  // retry once
        } catch (const std::exception& second) {
          log_to(log, LogLevel::Error,
                 "flush failed twice on " + action.backend_ref + ": " + second.what());
          return false;
        }
      }
      return true;
    }
    case CacheAction::Kind::Preserve: {
      try {
        if (!backends.at(action.backend_ref).preserve(action.workflow_id)) {
          log_to(log, LogLevel::Warn,
                 "backend " + action.backend_ref +
                     " has no cache to preserve for workflow " + action.workflow_id);
        }
      } catch (const std::exception& e) {
        log_to(log, LogLevel::Error,
               "preserve failed on " + action.backend_ref + ": " + e.what());
        return false;
      }
      return true;
    }
  }
  return true;
}

// ── MemoryManager ────────────────────────────────────────────────────

namespace {
std::vector<MemoryPolicyFn> resolve_chain(const std::vector<std::string>& names) {
  std::vector<MemoryPolicyFn> chain;
  chain.reserve(names.size());
  for (const auto& name : names) chain.push_back(memory_policy_by_name(name));
  return chain;
}
}  // namespace

MemoryManager::MemoryManager(MemoryConfig config, BackendRegistry* backends, LogFn log)
    : MemoryManager(config, resolve_chain(config.policy_chain), backends, std::move(log)) {}

MemoryManager::MemoryManager(MemoryConfig config, std::vector<MemoryPolicyFn> chain,
                             BackendRegistry* backends, LogFn log)
    : config_(std::move(config)), chain_(std::move(chain)), backends_(backends),
      log_(std::move(log)) {
  if (config_.tau <= 0) throw std::invalid_argument("tau must be positive");
  if (config_.tau_pressure <= 0 || config_.tau_pressure > 1) {
    throw std::invalid_argument("tau_pressure must be in (0, 1]");
  }
}

void MemoryManager::set_workflow_chain(const std::string& workflow_id,
                                       const std::vector<std::string>& names) {
  if (names.empty()) return;
  workflow_chains_[workflow_id] = resolve_chain(names);
}

void MemoryManager::attach(SignalBus& bus) {
  bus.subscribe([this](const LifecycleSignal& sig) { on_signal(sig); });
}

void MemoryManager::check_order(const LifecycleSignal& sig) const {
  if (tracker_.completed(sig.workflow_id)) {
    throw OutOfOrderSignalError("signal after WorkflowComplete for " + sig.workflow_id);
  }
  switch (sig.kind) {
    case LifecycleSignal::Kind::StageStart: {
      auto it = started_ever_.find(sig.workflow_id);
      if (it != started_ever_.end() && it->second.count(sig.stage_id)) {
        throw OutOfOrderSignalError("duplicate StageStart for " + sig.workflow_id + "/" +
                                    sig.stage_id);
      }
      break;
    }
    case LifecycleSignal::Kind::StageComplete: {
      auto it = open_stages_.find(sig.workflow_id);
      if (it == open_stages_.end() || !it->second.count(sig.stage_id)) {
        throw OutOfOrderSignalError("StageComplete without StageStart for " + sig.workflow_id +
                                    "/" + sig.stage_id);
      }
      break;
    }
    case LifecycleSignal::Kind::WorkflowComplete: {
      auto it = open_stages_.find(sig.workflow_id);
      if (it != open_stages_.end() && !it->second.empty()) {
        throw OutOfOrderSignalError("WorkflowComplete with open stages for " + sig.workflow_id);
      }
      break;
    }
  }
}

std::vector<CacheAction> MemoryManager::resolve(const LifecycleSignal& sig) const {
  // Stage-level overrides take precedence, on the stage's start transition.
  if (sig.kind == LifecycleSignal::Kind::StageStart &&
      sig.cache_override != CachePolicyOverride::None) {
    const auto* last = tracker_.last_stage(sig.workflow_id);
    if (!last) return {CacheAction::noop("override")};
    if (sig.cache_override == CachePolicyOverride::Flush) {
      return {CacheAction::flush(sig.workflow_id, last->backend_ref, "override")};
    }
    return {CacheAction::preserve(sig.workflow_id, last->backend_ref, "override")};
  }

  const auto* chain = &chain_;
  if (auto it = workflow_chains_.find(sig.workflow_id); it != workflow_chains_.end()) {
    chain = &it->second;
  }
  for (const auto& policy : *chain) {
    auto actions = policy(sig, tracker_, config_);
    bool effective = std::any_of(actions.begin(), actions.end(),
                                 [](const CacheAction& a) { return !a.is_noop(); });
    if (effective) return actions;
  }
  return {CacheAction::noop("chain_exhausted")};
}

void MemoryManager::apply_and_record(const CacheAction& action, const std::string& trigger,
                                     double ts) {
  if (!action.is_noop()) {
    bool applied = true;
    if (backends_ && backends_->contains(action.backend_ref)) {
      applied = apply_action(action, *backends_, log_);
    }
    if (action.kind == CacheAction::Kind::Flush) {
      if (applied) {
        tracker_.mark_flushed(action.workflow_id, action.backend_ref);
      } else {
        tracker_.mark_unpreserved(action.workflow_id, action.backend_ref);
      }
    }
  }
  action_log_.push_back(LogRecord{trigger, ts, action});
}

void MemoryManager::update_tracker(const LifecycleSignal& sig) {
  switch (sig.kind) {
    case LifecycleSignal::Kind::StageStart:
      started_ever_[sig.workflow_id].insert(sig.stage_id);
      open_stages_[sig.workflow_id].insert(sig.stage_id);
      tracker_.adjust_in_flight(sig.backend_ref, sig.workflow_id, +1);
      break;
    case LifecycleSignal::Kind::StageComplete: {
      open_stages_[sig.workflow_id].erase(sig.stage_id);
      tracker_.adjust_in_flight(sig.backend_ref, sig.workflow_id, -1);
      CacheEntry entry;
      entry.workflow_id = sig.workflow_id;
      entry.backend_ref = sig.backend_ref;
      entry.model = sig.model;
      entry.token_count = sig.context_tokens;
      entry.preserved = sig.context_tokens > 0;
      entry.last_update_ts = sig.ts;
      tracker_.upsert_entry(std::move(entry));
      tracker_.set_last_stage(sig.workflow_id,
                              LastStage{sig.backend_ref, sig.model, sig.context_tokens});
      break;
    }
    case LifecycleSignal::Kind::WorkflowComplete:
      tracker_.note_completed(sig.workflow_id);
      tracker_.erase_workflow(sig.workflow_id);
      started_ever_.erase(sig.workflow_id);
      open_stages_.erase(sig.workflow_id);
      workflow_chains_.erase(sig.workflow_id);
      break;
  }
}

std::vector<CacheAction> MemoryManager::on_signal(const LifecycleSignal& sig) {
  check_order(sig);
  auto actions = resolve(sig);
  std::string trigger = std::string(signal_kind_name(sig.kind)) + " " + sig.workflow_id +
                        (sig.stage_id.empty() ? "" : "/" + sig.stage_id);
  for (const auto& action : actions) apply_and_record(action, trigger, sig.ts);
  update_tracker(sig);
  return actions;
}

std::vector<CacheAction> MemoryManager::pressure_tick(double now_ms) {
  std::map<std::string, double> utilization;
  if (backends_) {
    for (const auto& ref : backends_->refs()) {
      utilization[ref] = backends_->at(ref).cache_utilization();
    }
  }
  return pressure_tick(utilization, now_ms);
}

std::vector<CacheAction> MemoryManager::pressure_tick(
    const std::map<std::string, double>& utilization, double now_ms) {
  auto actions = pressure_actions(tracker_, utilization, config_.tau_pressure);
  for (const auto& action : actions) apply_and_record(action, "pressure_tick", now_ms);
  return actions;
}

void MemoryManager::export_action_log(std::ostream& out) const {
  for (const auto& rec : action_log_) {
    json line = {
        {"trigger", rec.trigger},
        {"ts", rec.ts},
        {"action", cache_action_kind_name(rec.action.kind)},
        {"workflow", rec.action.workflow_id},
        {"backend", rec.action.backend_ref},
        {"reason", rec.action.reason},
    };
    out << line.dump() << "\n";
  }
}

}  // namespace stageflow
