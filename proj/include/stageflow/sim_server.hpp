#pragma once

#include <memory>
#include <thread>

#include "stageflow/simulated_backend.hpp"

namespace stageflow {

/// HTTP shim exposing a simulated backend behind the same wire protocol as a
/// real serving engine, so switching a stage between in-process simulation
/// and HTTP needs only an endpoint change:
///
///   POST /v1/chat/completions   chat-completions wire format
///   POST /sim/flush             {"workflow_id": id} or {"scope": "all"}
///   GET  /sim/utilization       {"utilization", "occupancy_tokens", ...}
class SimServer {
 public:
  SimServer(BackendDescriptor descriptor, SimulatedBackendConfig config, LogFn log = {});
  ~SimServer();

  /// Binds to an OS-assigned port and starts serving; returns the port.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  void stop();

  int port() const { return port_; }
  std::string endpoint() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_ = 0;
  std::string host_;
};

}  // namespace stageflow
