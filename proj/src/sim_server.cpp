#include "stageflow/sim_server.hpp"

#include <future>

#include "httplib.h"
#include "stageflow/http_backend.hpp"

namespace stageflow {

struct SimServer::Impl {
  EventLoop loop{ClockMode::Wall};
  std::unique_ptr<SimulatedBackend> sim;
  httplib::Server server;
  std::thread loop_thread;
  std::thread server_thread;
  LogFn log;

  // Runs fn on the sim's loop thread and waits for its result.
  template <typename T>
  T on_loop(std::function<T()> fn) {
    std::promise<T> prom;
    loop.post([&] { prom.set_value(fn()); });
    return prom.get_future().get();
  }
};

SimServer::SimServer(BackendDescriptor descriptor, SimulatedBackendConfig config, LogFn log)
    : impl_(std::make_unique<Impl>()) {
  impl_->log = log;
  impl_->sim = std::make_unique<SimulatedBackend>(impl_->loop, std::move(descriptor),
                                                  std::move(config), std::move(log));

  impl_->server.Post("/v1/chat/completions", [this](const httplib::Request& req,
                                                    httplib::Response& res) {
    auto parsed = json::parse(req.body, nullptr, false);
    if (parsed.is_discarded() || !parsed.is_object() || !parsed.contains("messages")) {
      res.status = 400;
      res.set_content(json{{"error", "malformed request"}}.dump(), "application/json");
      return;
    }
    CompletionRequest creq;
    creq.model = parsed.value("model", impl_->sim->descriptor().model);
    creq.temperature = parsed.value("temperature", 0.0);
    creq.max_tokens = parsed.value("max_tokens", 0LL);
    for (const auto& m : parsed.at("messages")) {
      Message msg;
      msg.role = role_from_name(m.value("role", "user"));
      if (m.contains("content") && m.at("content").is_string()) {
        msg.content = m.at("content").get<std::string>();
      }
      msg.tool_call_id = m.value("tool_call_id", "");
      creq.messages.push_back(std::move(msg));
    }
    if (parsed.contains("metadata") && parsed.at("metadata").is_object()) {
      creq.metadata.workflow_id = parsed.at("metadata").value("workflow_id", "");
      creq.metadata.stage_id = parsed.at("metadata").value("stage_id", "");
    }

    const std::string model = creq.model;
    std::promise<std::pair<CompletionResponse, std::exception_ptr>> prom;
    impl_->loop.post([&] {
      impl_->sim->complete(std::move(creq), [&](CompletionResponse r, std::exception_ptr ep) {
        prom.set_value({std::move(r), ep});
      });
    });
    auto [sresp, ep] = prom.get_future().get();
    if (ep) {
      res.status = 500;
      res.set_content(json{{"error", "simulation failure"}}.dump(), "application/json");
      return;
    }

    json message{{"role", "assistant"}, {"content", sresp.content}};
    if (!sresp.tool_calls.empty()) {
      json calls = json::array();
      for (const auto& c : sresp.tool_calls) {
        calls.push_back(json{{"id", c.call_id},
                             {"type", "function"},
                             {"function", json{{"name", c.tool_name},
                                               {"arguments", c.arguments.dump()}}}});
      }
      message["tool_calls"] = std::move(calls);
    }
    json body{
        {"object", "chat.completion"},
        {"model", model},
        {"choices", json::array({json{{"index", 0},
                                      {"finish_reason",
                                       sresp.tool_calls.empty() ? "stop" : "tool_calls"},
                                      {"message", std::move(message)}}})},
        {"usage",
         {{"prompt_tokens", sresp.usage.prompt_tokens},
          {"completion_tokens", sresp.usage.completion_tokens},
          {"prompt_tokens_details", {{"cached_tokens", sresp.usage.cached_prefix_tokens}}}}},
    };
    res.set_content(body.dump(), "application/json");
  });

  impl_->server.Post("/sim/flush", [this](const httplib::Request& req, httplib::Response& res) {
    auto parsed = json::parse(req.body, nullptr, false);
    FlushScope scope = FlushScope::everything();
    if (parsed.is_object() && parsed.contains("workflow_id")) {
      scope = FlushScope::workflow(parsed.at("workflow_id").get<std::string>());
    }
    long long freed = impl_->on_loop<long long>([&] { return impl_->sim->flush(scope); });
    res.set_content(json{{"freed_tokens", freed}}.dump(), "application/json");
  });

  impl_->server.Get("/sim/utilization", [this](const httplib::Request&, httplib::Response& res) {
    auto body = impl_->on_loop<json>([&] {
      return json{{"utilization", impl_->sim->cache_utilization()},
                  {"occupancy_tokens", impl_->sim->occupancy_tokens()},
                  {"capacity_tokens", impl_->sim->capacity_tokens()}};
    });
    res.set_content(body.dump(), "application/json");
  });
}

SimServer::~SimServer() { stop(); }

int SimServer::start(const std::string& host, int port) {
  host_ = host;
  impl_->loop_thread = std::thread([this] { impl_->loop.run(); });
  if (port == 0) {
    port_ = impl_->server.bind_to_any_port(host);
  } else {
    impl_->server.bind_to_port(host, port);
    port_ = port;
  }
  impl_->server_thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return port_;
}

void SimServer::stop() {
  if (impl_->server_thread.joinable()) {
    impl_->server.stop();
    impl_->server_thread.join();
  }
  if (impl_->loop_thread.joinable()) {
    impl_->loop.stop();
    impl_->loop_thread.join();
  }
}

std::string SimServer::endpoint() const {
  return "http://" + host_ + ":" + std::to_string(port_);
}

}  // namespace stageflow
