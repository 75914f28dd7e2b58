#pragma once

#include <deque>
#include <map>
#include <utility>

#include "stageflow/backend.hpp"

namespace stageflow {

struct ScriptedReply {
  std::string content;
  std::vector<ToolCall> tool_calls;
};

/// Per-call reply provider; `turn` counts prior calls for the same
/// (workflow, stage) pair, so agent loops can be scripted turn by turn.
using ReplyScript = std::function<ScriptedReply(const CompletionRequest& req, int turn)>;

struct OutputRule {
  enum class Kind { Constant, FromAnnotation, EchoAnnotation, Scripted };

  Kind kind = Kind::Constant;
  long long constant_tokens = 16;
  std::string annotation_key;
  ReplyScript script;

  static OutputRule constant(long long tokens) {
    OutputRule r;
    r.kind = Kind::Constant;
    r.constant_tokens = tokens;
    return r;
  }
  /// Output length read from a request annotation (e.g. a trace field),
  /// falling back to `fallback_tokens` when the annotation is absent.
  static OutputRule from_annotation(std::string key, long long fallback_tokens = 16) {
    OutputRule r;
    r.kind = Kind::FromAnnotation;
    r.annotation_key = std::move(key);
    r.constant_tokens = fallback_tokens;
    return r;
  }
  /// Reply content is the annotation value verbatim (scripted classifiers).
  static OutputRule echo_annotation(std::string key) {
    OutputRule r;
    r.kind = Kind::EchoAnnotation;
    r.annotation_key = std::move(key);
    return r;
  }
  static OutputRule scripted(ReplyScript fn) {
    OutputRule r;
    r.kind = Kind::Scripted;
    r.script = std::move(fn);
    return r;
  }
};

struct SimulatedBackendConfig {
  double prefill_ms_per_token = 1.0;
  double decode_ms_per_token = 10.0;
  double fixed_overhead_ms = 0.0;
  int max_concurrency = 1;
  long long cache_capacity_tokens = 1'000'000;
  OutputRule output;
};

/// Deterministic backend: parametric prefill/decode latency over the driving
/// clock plus a per-workflow pinned-prefix cache.
///
///   ttft  = queue + overhead + prefill_ms_per_token * (P - M)
///   total = ttft + decode_ms_per_token * O
///
/// where P is the prompt token count, M the cached-prefix match against the
/// workflow's pin, and O the output token count per the output rule. After a
/// request is served its prompt tokens become the workflow's pin (subject to
/// cache capacity); flush removes the pin.
class SimulatedBackend : public Backend {
 public:
  SimulatedBackend(EventLoop& loop, BackendDescriptor descriptor, SimulatedBackendConfig config,
                   LogFn log = {});

  const BackendDescriptor& descriptor() const override { return descriptor_; }
  bool has_capacity() const override;
  void complete(CompletionRequest req, CompletionCallback cb) override;
  long long flush(const FlushScope& scope) override;
  double cache_utilization() const override;
  bool preserve(const std::string& workflow_id) override;
  const BackendStats& stats() const override { return stats_; }

  const SimulatedBackendConfig& config() const { return config_; }

  // Cache inspection
  long long prefix_match(const std::string& workflow_id,
                         std::span<const std::string> tokens) const;
  long long pinned_token_count(const std::string& workflow_id) const;
  long long occupancy_tokens() const { return occupancy_; }
  long long capacity_tokens() const { return config_.cache_capacity_tokens; }
  std::uint64_t capacity_rejections() const { return capacity_rejections_; }

 private:
  struct Pending {
    CompletionRequest req;
    CompletionCallback cb;
    double arrival_ms;
  };

  EventLoop& loop_;
  BackendDescriptor descriptor_;
  SimulatedBackendConfig config_;
  LogFn log_;
  BackendStats stats_;

  int busy_ = 0;
  std::deque<Pending> pending_;
  std::map<std::string, std::vector<std::string>> pins_;  // workflow -> prompt tokens
  long long occupancy_ = 0;
  std::uint64_t capacity_rejections_ = 0;
  std::map<std::pair<std::string, std::string>, int> turn_counts_;

  void pump();
  void start(Pending item);
  ScriptedReply make_reply(const CompletionRequest& req, int turn, long long prompt_tokens) const;
  void pin_prompt(const std::string& workflow_id, std::vector<std::string> tokens);
};

}  // namespace stageflow
