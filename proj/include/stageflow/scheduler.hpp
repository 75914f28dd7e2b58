#pragma once

#include <deque>
#include <mutex>
#include <optional>
#include <span>

#include "stageflow/types.hpp"

namespace stageflow {

struct QueuedRequest {
  std::string request_id;
  std::string workflow_id;
  std::string stage_id;
  Context context;
  double arrival_ts = 0;
  int priority = 0;  // higher wins; default 0
  long long prompt_tokens_estimate = 0;
  std::function<void(QueuedRequest)> on_dispatch;  // orchestrator continuation
};

/// Head-of-sub-queue view handed to stage policies: policies see only the
/// heads plus queue metadata, never full queue contents.
struct SubQueueHead {
  std::string stage_id;
  const QueuedRequest* head = nullptr;
  std::size_t depth = 0;
};

/// Picks which stage sub-queue to serve; returns an index into the
/// (nonempty, stage-id-sorted) span of heads.
using StagePolicyFn = std::function<std::size_t(std::span<const SubQueueHead>)>;

/// Picks the next request within the chosen sub-queue (arrival order).
using RequestPolicyFn = std::function<std::size_t(std::span<const QueuedRequest* const>)>;

class PolicyError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class UnknownPolicyError : public PolicyError {
 public:
  explicit UnknownPolicyError(const std::string& name)
      : PolicyError("unknown scheduling policy: " + name) {}
};
class DuplicatePolicyError : public PolicyError {
 public:
  explicit DuplicatePolicyError(const std::string& name)
      : PolicyError("scheduling policy already registered: " + name) {}
};
class ReservedPolicyError : public PolicyError {
 public:
  explicit ReservedPolicyError(const std::string& name)
      : PolicyError("scheduling policy name is reserved: " + name) {}
};

/// Shortest-job-first by the head request's prompt-size estimate; the
/// bundled example of a custom stage policy. Register it under "sjf".
StagePolicyFn sjf_by_prompt_estimate();

/// Registry of named policies. "fcfs" and "priority" ship at both levels and
/// are reserved.
class PolicyRegistry {
 public:
  enum class Level { Stage, Request };

  PolicyRegistry();

  void register_stage_policy(const std::string& name, StagePolicyFn fn);
  void register_request_policy(const std::string& name, RequestPolicyFn fn);

  const StagePolicyFn& stage_policy(const std::string& name) const;
  const RequestPolicyFn& request_policy(const std::string& name) const;
  bool has_stage_policy(const std::string& name) const;
  bool has_request_policy(const std::string& name) const;

 private:
  std::map<std::string, StagePolicyFn> stage_policies_;
  std::map<std::string, RequestPolicyFn> request_policies_;
};

/// Per-backend queue partitioned into per-stage sub-queues. Thread-safe:
/// enqueue and dequeue_next are linearizable under an internal mutex.
class BackendQueue {
 public:
  explicit BackendQueue(std::string backend_ref, const PolicyRegistry* policies = nullptr,
                        LogFn log = {});

  const std::string& backend_ref() const { return backend_ref_; }

  void enqueue(QueuedRequest r);

  /// Applies the named stage policy across sub-queue heads.
  std::optional<std::string> select_stage(const std::string& policy_name) const;

  /// Applies the queue's stage policy, then its request policy within the
  /// chosen sub-queue; removes and returns the request. Empty sub-queues are
  /// deleted.
  std::optional<QueuedRequest> dequeue_next();

  std::size_t size() const;
  bool empty() const { return size() == 0; }
  std::size_t stage_depth(const std::string& stage_id) const;

  /// Stages sharing a backend may declare conflicting policies; the policy of
  /// the stage that most recently enqueued wins, with a warning on change.
  void set_policies(const std::string& stage_policy, const std::string& request_policy);
  std::string stage_policy() const;
  std::string request_policy() const;

 private:
  std::string backend_ref_;
  const PolicyRegistry* policies_;
  LogFn log_;
  mutable std::mutex mu_;
  std::map<std::string, std::deque<QueuedRequest>> sub_queues_;
  std::string stage_policy_name_ = "fcfs";
  std::string request_policy_name_ = "fcfs";

  const PolicyRegistry& registry() const;
  std::optional<std::string> select_stage_locked(const std::string& policy_name) const;
};

/// Default process-wide registry with the built-in policies.
PolicyRegistry& default_policy_registry();

}  // namespace stageflow
