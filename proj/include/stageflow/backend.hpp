#pragma once

#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stageflow/clock.hpp"
#include "stageflow/types.hpp"

namespace stageflow {

enum class BackendKind { Simulated, HttpOpenAICompatible };
enum class BackendTier { Light, Heavy };

const char* backend_kind_name(BackendKind kind);
const char* backend_tier_name(BackendTier tier);

struct Price {
  double input_per_1m = 0.0;
  double output_per_1m = 0.0;
};

struct BackendDescriptor {
  std::string ref;
  std::string endpoint_url;
  std::string model;
  BackendKind kind = BackendKind::Simulated;
  long long context_limit_tokens = 32768;
  Price price;
  BackendTier tier = BackendTier::Heavy;
};

struct RequestMetadata {
  std::string workflow_id;
  std::string stage_id;
  std::map<std::string, std::string> annotations;  // trace payload passthrough
};

struct CompletionRequest {
  std::string model;
  Context messages;
  double temperature = 0.0;
  long long max_tokens = 0;  // 0 = backend default
  std::vector<json> tool_schemas;  // OpenAI "tools" entries, opaque
  std::optional<json> response_format;
  RequestMetadata metadata;
};

struct ResponseTiming {
  double queue_ms = 0;
  double ttft_ms = 0;
  double total_ms = 0;
  bool ttft_is_total = false;  // non-streaming HTTP: first token unobservable
};

struct CompletionResponse {
  std::string content;
  std::vector<ToolCall> tool_calls;
  Usage usage;
  ResponseTiming timing;
};

struct FlushScope {
  bool all = false;
  std::string workflow_id;
  static FlushScope workflow(std::string id) { return {false, std::move(id)}; }
  static FlushScope everything() { return {true, {}}; }
};

struct BackendStats {
  std::uint64_t completions = 0;
  std::uint64_t flush_calls = 0;
  std::uint64_t preserve_calls = 0;
  // Served totals across every completion, for usage reconciliation.
  long long prompt_tokens = 0;
  long long completion_tokens = 0;
  long long cached_prefix_tokens = 0;
};

/// Result delivery: response plus a null exception pointer on success.
using CompletionCallback = std::function<void(CompletionResponse, std::exception_ptr)>;

class Backend {
 public:
  virtual ~Backend() = default;

  virtual const BackendDescriptor& descriptor() const = 0;

  /// True when the backend can start another request immediately.
  virtual bool has_capacity() const = 0;

  /// Issues one completion; the callback runs on the driving event loop.
  virtual void complete(CompletionRequest req, CompletionCallback cb) = 0;

  /// Evicts cached state; returns freed tokens (0 when nothing was held).
  virtual long long flush(const FlushScope& scope) = 0;

  virtual double cache_utilization() const = 0;

  /// Asks the backend to retain the workflow's cached prefix. Returns false
  /// when the backend has no cache API (warn-and-no-op).
  virtual bool preserve(const std::string& workflow_id) = 0;

  virtual const BackendStats& stats() const = 0;

  /// Invoked on the driving loop whenever a slot frees up, so a dispatcher
  /// can refill the backend. One listener; later registrations replace it.
  virtual void set_capacity_listener(std::function<void()> fn) { capacity_listener_ = std::move(fn); }

 protected:
  void notify_capacity() {
    if (capacity_listener_) capacity_listener_();
  }

 private:
  std::function<void()> capacity_listener_;
};

/// Holds descriptors (for validation) and live instances (for execution).
class BackendRegistry {
 public:
  void add(std::shared_ptr<Backend> backend);
  void add_descriptor(BackendDescriptor descriptor);  // validation-only entry

  bool contains(const std::string& ref) const;
  const BackendDescriptor& descriptor(const std::string& ref) const;
  Backend& at(const std::string& ref) const;
  std::shared_ptr<Backend> get(const std::string& ref) const;
  std::vector<std::string> refs() const;  // sorted

 private:
  struct Entry {
    BackendDescriptor descriptor;
    std::shared_ptr<Backend> backend;
  };
  std::map<std::string, Entry> entries_;
};

// ── Tokenization (simulation stand-in) ───────────────────────────────
// Whitespace-run split; token count = number of nonempty fields.
std::vector<std::string> tokenize_whitespace(std::string_view text);
long long count_tokens(std::string_view text);
std::vector<std::string> context_token_sequence(const Context& ctx);
long long count_context_tokens(const Context& ctx);

/// Convenience for tests and synchronous callers: submits the request and
/// drives the loop until the response arrives. The loop must not already be
/// running.
CompletionResponse complete_blocking(Backend& backend, EventLoop& loop, CompletionRequest req);

// ── Errors ───────────────────────────────────────────────────────────
class BackendError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

class UnknownBackendError : public BackendError {
 public:
  explicit UnknownBackendError(const std::string& ref)
      : BackendError("unknown backend: " + ref), ref(ref) {}
  std::string ref;
};

}  // namespace stageflow
