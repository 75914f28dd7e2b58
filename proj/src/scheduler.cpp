#include "stageflow/scheduler.hpp"

#include <algorithm>
#include <cassert>

namespace stageflow {

namespace {

// Shared tie-break: earlier arrival first, then lexicographic stage id.
bool arrives_before(const SubQueueHead& a, const SubQueueHead& b) {
  if (a.head->arrival_ts != b.head->arrival_ts) return a.head->arrival_ts < b.head->arrival_ts;
  return a.stage_id < b.stage_id;
}

std::size_t pick_fcfs(std::span<const SubQueueHead> heads) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < heads.size(); ++i) {
    if (arrives_before(heads[i], heads[best])) best = i;
  }
  return best;
}

std::size_t pick_priority(std::span<const SubQueueHead> heads) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < heads.size(); ++i) {
    if (heads[i].head->priority > heads[best].head->priority ||
        (heads[i].head->priority == heads[best].head->priority &&
         arrives_before(heads[i], heads[best]))) {
      best = i;
    }
  }
  return best;
}

std::size_t pick_request_fcfs(std::span<const QueuedRequest* const>) { return 0; }

std::size_t pick_request_priority(std::span<const QueuedRequest* const> reqs) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < reqs.size(); ++i) {
    // Sub-queues are arrival-ordered, so the first max-priority entry wins.
    if (reqs[i]->priority > reqs[best]->priority) best = i;
  }
  return best;
}

bool is_reserved(const std::string& name) { return name == "fcfs" || name == "priority"; }

}  // namespace

StagePolicyFn sjf_by_prompt_estimate() {
  return [](std::span<const SubQueueHead> heads) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < heads.size(); ++i) {
      if (heads[i].head->prompt_tokens_estimate < heads[best].head->prompt_tokens_estimate ||
          (heads[i].head->prompt_tokens_estimate == heads[best].head->prompt_tokens_estimate &&
           arrives_before(heads[i], heads[best]))) {
        best = i;
      }
    }
    return best;
  };
}

PolicyRegistry::PolicyRegistry() {
  stage_policies_["fcfs"] = pick_fcfs;
  stage_policies_["priority"] = pick_priority;
  request_policies_["fcfs"] = pick_request_fcfs;
  request_policies_["priority"] = pick_request_priority;
}

void PolicyRegistry::register_stage_policy(const std::string& name, StagePolicyFn fn) {
  if (name.empty()) throw PolicyError("policy name must be nonempty");
  if (is_reserved(name)) throw ReservedPolicyError(name);
  if (stage_policies_.count(name)) throw DuplicatePolicyError(name);
  stage_policies_[name] = std::move(fn);
}

void PolicyRegistry::register_request_policy(const std::string& name, RequestPolicyFn fn) {
  if (name.empty()) throw PolicyError("policy name must be nonempty");
  if (is_reserved(name)) throw ReservedPolicyError(name);
  if (request_policies_.count(name)) throw DuplicatePolicyError(name);
  request_policies_[name] = std::move(fn);
}

const StagePolicyFn& PolicyRegistry::stage_policy(const std::string& name) const {
  auto it = stage_policies_.find(name);
  if (it == stage_policies_.end()) throw UnknownPolicyError(name);
  return it->second;
}

const RequestPolicyFn& PolicyRegistry::request_policy(const std::string& name) const {
  auto it = request_policies_.find(name);
  if (it == request_policies_.end()) throw UnknownPolicyError(name);
  return it->second;
}

bool PolicyRegistry::has_stage_policy(const std::string& name) const {
  return stage_policies_.count(name) > 0;
}

bool PolicyRegistry::has_request_policy(const std::string& name) const {
  return request_policies_.count(name) > 0;
}

PolicyRegistry& default_policy_registry() {
  static PolicyRegistry registry;
  return registry;
}

BackendQueue::BackendQueue(std::string backend_ref, const PolicyRegistry* policies, LogFn log)
    : backend_ref_(std::move(backend_ref)), policies_(policies), log_(std::move(log)) {}

const PolicyRegistry& BackendQueue::registry() const {
  return policies_ ? *policies_ : default_policy_registry();
}

void BackendQueue::enqueue(QueuedRequest r) {
  std::lock_guard<std::mutex> lk(mu_);
  sub_queues_[r.stage_id].push_back(std::move(r));
}

std::optional<std::string> BackendQueue::select_stage_locked(
    const std::string& policy_name) const {
  if (sub_queues_.empty()) return std::nullopt;
  const auto& pick = registry().stage_policy(policy_name);
  std::vector<SubQueueHead> heads;
  heads.reserve(sub_queues_.size());
  for (const auto& [stage_id, q] : sub_queues_) {
    assert(!q.empty());
    heads.push_back(SubQueueHead{stage_id, &q.front(), q.size()});
  }
  std::size_t idx = pick(std::span<const SubQueueHead>(heads));
  if (idx >= heads.size()) throw PolicyError("stage policy returned out-of-range index");
  return heads[idx].stage_id;
}

std::optional<std::string> BackendQueue::select_stage(const std::string& policy_name) const {
  std::lock_guard<std::mutex> lk(mu_);
  return select_stage_locked(policy_name);
}

std::optional<QueuedRequest> BackendQueue::dequeue_next() {
  std::lock_guard<std::mutex> lk(mu_);
  auto stage = select_stage_locked(stage_policy_name_);
  if (!stage) return std::nullopt;
  auto& q = sub_queues_.at(*stage);
  const auto& pick = registry().request_policy(request_policy_name_);
  std::vector<const QueuedRequest*> view;
  view.reserve(q.size());
  for (const auto& r : q) view.push_back(&r);
  std::size_t idx = pick(std::span<const QueuedRequest* const>(view));
  if (idx >= q.size()) throw PolicyError("request policy returned out-of-range index");
  QueuedRequest out = std::move(q[idx]);
  q.erase(q.begin() + static_cast<std::ptrdiff_t>(idx));
  if (q.empty()) sub_queues_.erase(*stage);
  return out;
}

std::size_t BackendQueue::size() const {
  std::lock_guard<std::mutex> lk(mu_);
  std::size_t n = 0;
  for (const auto& [_, q] : sub_queues_) n += q.size();
  return n;
}

std::size_t BackendQueue::stage_depth(const std::string& stage_id) const {
  std::lock_guard<std::mutex> lk(mu_);
  auto it = sub_queues_.find(stage_id);
  return it == sub_queues_.end() ? 0 : it->second.size();
}

void BackendQueue::set_policies(const std::string& stage_policy,
                                const std::string& request_policy) {
  std::lock_guard<std::mutex> lk(mu_);
  registry().stage_policy(stage_policy);      // throws UnknownPolicyError early
  registry().request_policy(request_policy);
  if (stage_policy != stage_policy_name_ || request_policy != request_policy_name_) {
    if (!sub_queues_.empty()) {
      log_to(log_, LogLevel::Warn,
             "backend " + backend_ref_ + ": scheduling policy switched to " + stage_policy +
                 "/" + request_policy + " while requests are queued");
    }
    stage_policy_name_ = stage_policy;
    request_policy_name_ = request_policy;
  }
}

std::string BackendQueue::stage_policy() const {
  std::lock_guard<std::mutex> lk(mu_);
  return stage_policy_name_;
}

std::string BackendQueue::request_policy() const {
  std::lock_guard<std::mutex> lk(mu_);
  return request_policy_name_;
}

}  // namespace stageflow
