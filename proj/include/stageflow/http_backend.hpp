#pragma once

#include "stageflow/backend.hpp"

namespace stageflow {

// ── Chat-completions wire format ─────────────────────────────────────

/// Serializes a request to the chat-completions body. Object keys are
/// emitted sorted, so equal requests serialize to identical bytes.
json chat_request_to_wire(const CompletionRequest& req);
std::string serialize_chat_request(const CompletionRequest& req);

/// Parses a chat-completions response body (choices[0].message + usage).
/// Unknown fields are ignored; a missing or empty `choices` array throws.
CompletionResponse parse_chat_response(const std::string& body);

class TransportError : public BackendError {
  using BackendError::BackendError;
};

class HttpStatusError : public BackendError {
 public:
  HttpStatusError(int status, const std::string& body)
      : BackendError("http status " + std::to_string(status) + ": " + body), status(status),
        body(body) {}
  int status;
  std::string body;
};

class MalformedResponseError : public BackendError {
  using BackendError::BackendError;
};

/// Blocking POST to {endpoint}/v1/chat/completions. Timing is measured
/// client-side; without streaming the first token is unobservable, so
/// ttft_ms equals total_ms and is flagged.
CompletionResponse http_complete(const CompletionRequest& req, const std::string& endpoint,
                                 double timeout_sec = 120.0);

struct HttpBackendConfig {
  int max_concurrency = 8;
  double timeout_sec = 120.0;
};

/// OpenAI-compatible HTTP backend. Blocking calls run on an internal worker
/// pool and resolve back onto the driving loop, so this backend requires a
/// Wall-mode loop. Cache control maps to the sim-shim endpoints
/// (/sim/flush, /sim/utilization) when the server provides them; otherwise
/// flush/preserve warn and no-op.
class HttpBackend : public Backend {
 public:
  HttpBackend(EventLoop& loop, BackendDescriptor descriptor, HttpBackendConfig config = {},
              LogFn log = {});
  ~HttpBackend() override;

  const BackendDescriptor& descriptor() const override { return descriptor_; }
  bool has_capacity() const override;
  void complete(CompletionRequest req, CompletionCallback cb) override;
  long long flush(const FlushScope& scope) override;
  double cache_utilization() const override;
  bool preserve(const std::string& workflow_id) override;
  const BackendStats& stats() const override { return stats_; }

 private:
  struct Pool;

  EventLoop& loop_;
  BackendDescriptor descriptor_;
  HttpBackendConfig config_;
  LogFn log_;
  BackendStats stats_;
  int outstanding_ = 0;
  std::unique_ptr<Pool> pool_;
  mutable bool warned_no_cache_api_ = false;
};

}  // namespace stageflow
