#include "stageflow/http_backend.hpp"

#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <thread>

#include "httplib.h"

namespace stageflow {

namespace {

json message_to_wire(const Message& m) {
  json out{{"role", role_name(m.role)}, {"content", m.content}};
  if (!m.tool_call_id.empty()) out["tool_call_id"] = m.tool_call_id;
  if (!m.tool_calls.empty()) {
    json calls = json::array();
    for (const auto& c : m.tool_calls) {
      calls.push_back(json{{"id", c.call_id},
                           {"type", "function"},
                           {"function", json{{"name", c.tool_name},
                                             {"arguments", c.arguments.dump()}}}});
    }
    out["tool_calls"] = std::move(calls);
  }
  return out;
}

ToolCall tool_call_from_wire(const json& c) {
  ToolCall call;
  call.call_id = c.value("id", "");
  if (c.contains("function") && c.at("function").is_object()) {
    const auto& fn = c.at("function");
    call.tool_name = fn.value("name", "");
    if (fn.contains("arguments")) {
      const auto& args = fn.at("arguments");
      if (args.is_string()) {
        auto parsed = json::parse(args.get<std::string>(), nullptr, false);
        call.arguments = parsed.is_discarded() ? json(args.get<std::string>()) : parsed;
      } else {
        call.arguments = args;
      }
    }
  }
  return call;
}

}  // namespace

json chat_request_to_wire(const CompletionRequest& req) {
  json body;
  body["model"] = req.model;
  json messages = json::array();
  for (const auto& m : req.messages) messages.push_back(message_to_wire(m));
  body["messages"] = std::move(messages);
  body["temperature"] = req.temperature;
  if (req.max_tokens > 0) body["max_tokens"] = req.max_tokens;
  if (!req.tool_schemas.empty()) {
    json tools = json::array();
    for (const auto& t : req.tool_schemas) tools.push_back(t);
    body["tools"] = std::move(tools);
  }
  if (req.response_format) body["response_format"] = *req.response_format;
  if (!req.metadata.workflow_id.empty() || !req.metadata.stage_id.empty()) {
    json meta = json::object();
    if (!req.metadata.workflow_id.empty()) meta["workflow_id"] = req.metadata.workflow_id;
    if (!req.metadata.stage_id.empty()) meta["stage_id"] = req.metadata.stage_id;
    body["metadata"] = std::move(meta);
  }
  return body;
}

std::string serialize_chat_request(const CompletionRequest& req) {
  return chat_request_to_wire(req).dump();
}

CompletionResponse parse_chat_response(const std::string& body) {
  auto parsed = json::parse(body, nullptr, false);
  if (parsed.is_discarded() || !parsed.is_object()) {
    throw MalformedResponseError("response is not a JSON object");
  }
  if (!parsed.contains("choices") || !parsed.at("choices").is_array() ||
      parsed.at("choices").empty()) {
    throw MalformedResponseError("response has no choices");
  }
  const auto& choice = parsed.at("choices").at(0);
  if (!choice.contains("message") || !choice.at("message").is_object()) {
    throw MalformedResponseError("choice has no message");
  }
  const auto& message = choice.at("message");

  CompletionResponse resp;
  if (message.contains("content") && message.at("content").is_string()) {
    resp.content = message.at("content").get<std::string>();
  }
  if (message.contains("tool_calls") && message.at("tool_calls").is_array()) {
    for (const auto& c : message.at("tool_calls")) resp.tool_calls.push_back(tool_call_from_wire(c));
  }
  if (parsed.contains("usage") && parsed.at("usage").is_object()) {
    const auto& usage = parsed.at("usage");
    resp.usage.prompt_tokens = usage.value("prompt_tokens", 0LL);
    resp.usage.completion_tokens = usage.value("completion_tokens", 0LL);
    if (usage.contains("prompt_tokens_details") &&
        usage.at("prompt_tokens_details").is_object()) {
      resp.usage.cached_prefix_tokens =
          usage.at("prompt_tokens_details").value("cached_tokens", 0LL);
    }
  }
  return resp;
}

CompletionResponse http_complete(const CompletionRequest& req, const std::string& endpoint,
                                 double timeout_sec) {
  httplib::Client client(endpoint);
  client.set_read_timeout(std::chrono::milliseconds(static_cast<int>(timeout_sec * 1000)));
  client.set_connection_timeout(std::chrono::milliseconds(static_cast<int>(timeout_sec * 1000)));

  const auto body = serialize_chat_request(req);
  const auto t0 = std::chrono::steady_clock::now();
  auto res = client.Post("/v1/chat/completions", body, "application/json");
  const double elapsed_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

  if (!res) {
    throw TransportError("transport failure posting to " + endpoint + ": " +
                         httplib::to_string(res.error()));
  }
  if (res->status < 200 || res->status >= 300) {
    throw HttpStatusError(res->status, res->body);
  }
  auto resp = parse_chat_response(res->body);
  resp.timing.total_ms = elapsed_ms;
  resp.timing.ttft_ms = elapsed_ms;  // unobservable without streaming
  resp.timing.ttft_is_total = true;
  return resp;
}

// ── HttpBackend ──────────────────────────────────────────────────────

struct HttpBackend::Pool {
  explicit Pool(int threads) {
    for (int i = 0; i < threads; ++i) {
      workers_.emplace_back([this] {
        for (;;) {
          std::function<void()> job;
          {
            std::unique_lock<std::mutex> lk(mu_);
            cv_.wait(lk, [this] { return stop_ || !jobs_.empty(); });
            if (stop_ && jobs_.empty()) return;
            job = std::move(jobs_.front());
            jobs_.pop_front();
          }
          job();
        }
      });
    }
  }

  ~Pool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
  }

  void submit(std::function<void()> job) {
    {
      std::lock_guard<std::mutex> lk(mu_);
      jobs_.push_back(std::move(job));
    }
    cv_.notify_one();
  }

  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::function<void()>> jobs_;
  bool stop_ = false;
  std::vector<std::thread> workers_;
};

HttpBackend::HttpBackend(EventLoop& loop, BackendDescriptor descriptor, HttpBackendConfig config,
                         LogFn log)
    : loop_(loop), descriptor_(std::move(descriptor)), config_(config), log_(std::move(log)),
      pool_(std::make_unique<Pool>(std::max(1, config.max_concurrency))) {}

HttpBackend::~HttpBackend() = default;

bool HttpBackend::has_capacity() const { return outstanding_ < config_.max_concurrency; }

void HttpBackend::complete(CompletionRequest req, CompletionCallback cb) {
  ++stats_.completions;
  if (loop_.mode() == ClockMode::Virtual) {
    loop_.post([cb = std::move(cb)] {
      cb(CompletionResponse{}, std::make_exception_ptr(BackendError(
                                   "http backends require the wall clock")));
    });
    return;
  }
  ++outstanding_;
  loop_.begin_external();
  auto endpoint = descriptor_.endpoint_url;
  auto timeout = config_.timeout_sec;
  pool_->submit([this, endpoint, timeout, req = std::move(req), cb = std::move(cb)]() mutable {
    CompletionResponse resp;
    std::exception_ptr ep;
    try {
      resp = http_complete(req, endpoint, timeout);
    } catch (...) {
      ep = std::current_exception();
    }
    loop_.finish_external([this, resp = std::move(resp), ep, cb = std::move(cb)]() mutable {
      --outstanding_;
      if (!ep) {
        stats_.prompt_tokens += resp.usage.prompt_tokens;
        stats_.completion_tokens += resp.usage.completion_tokens;
        stats_.cached_prefix_tokens += resp.usage.cached_prefix_tokens;
      }
      cb(std::move(resp), ep);
      notify_capacity();
    });
  });
}

long long HttpBackend::flush(const FlushScope& scope) {
  ++stats_.flush_calls;
  httplib::Client client(descriptor_.endpoint_url);
  json body = scope.all ? json{{"scope", "all"}} : json{{"workflow_id", scope.workflow_id}};
  auto res = client.Post("/sim/flush", body.dump(), "application/json");
  if (!res || res->status != 200) {
    if (!warned_no_cache_api_) {
      log_to(log_, LogLevel::Warn,
             "backend " + descriptor_.ref + " exposes no cache API; flush is a no-op");
      warned_no_cache_api_ = true;
    }
    return 0;
  }
  auto parsed = json::parse(res->body, nullptr, false);
  return parsed.is_object() ? parsed.value("freed_tokens", 0LL) : 0LL;
}

double HttpBackend::cache_utilization() const {
  httplib::Client client(descriptor_.endpoint_url);
  auto res = client.Get("/sim/utilization");
  if (!res || res->status != 200) return 0.0;
  auto parsed = json::parse(res->body, nullptr, false);
  return parsed.is_object() ? parsed.value("utilization", 0.0) : 0.0;
}

bool HttpBackend::preserve(const std::string&) {
  ++stats_.preserve_calls;
  if (!warned_no_cache_api_) {
    log_to(log_, LogLevel::Warn,
           "backend " + descriptor_.ref + " exposes no cache API; preserve is a no-op");
    warned_no_cache_api_ = true;
  }
  return false;
}

}  // namespace stageflow
