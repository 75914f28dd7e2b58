#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace stageflow {

using json = nlohmann::json;

// ── Logging ──────────────────────────────────────────────────────────
enum class LogLevel { Debug, Info, Warn, Error };

using LogFn = std::function<void(LogLevel, const std::string&)>;

LogFn stderr_logger(LogLevel min_level = LogLevel::Warn);

inline void log_to(const LogFn& log, LogLevel level, const std::string& msg) {
  if (log) log(level, msg);
}

// ── Chat primitives ──────────────────────────────────────────────────
enum class Role { System, User, Assistant, Tool };

const char* role_name(Role role);
Role role_from_name(const std::string& name);

struct ToolCall {
  std::string tool_name;
  json arguments = json::object();
  std::string call_id;
};

struct ToolResult {
  std::string call_id;
  std::string content;
  bool is_error = false;
};

struct Message {
  Role role = Role::User;
  std::string content;
  std::string tool_call_id;          // set on Role::Tool messages
  std::vector<ToolCall> tool_calls;  // set on assistant messages that invoke tools
};

/// A stage's execution context: the message list sent to a backend.
using Context = std::vector<Message>;

struct Usage {
  long long prompt_tokens = 0;
  long long completion_tokens = 0;
  long long cached_prefix_tokens = 0;
};

Context make_user_context(std::string text);
std::string context_text(const Context& ctx);  // contents joined by newline

/// Handler signature: receives the call arguments, returns tool output text.
/// Exceptions become ToolResult{is_error = true} and are fed back to the model.
struct ToolSpec {
  std::string name;
  json parameter_schema = json::object();
  std::function<std::string(const json& arguments)> handler;
  double latency_ms = 0.0;  // simulated time the tool call occupies
};

struct SchedulingHints {
  std::optional<int> priority;
};

class ToolRegistry {
 public:
  void add(ToolSpec spec);
  const ToolSpec* find(const std::string& name) const;
  bool contains(const std::string& name) const { return find(name) != nullptr; }
  std::size_t size() const { return tools_.size(); }

 private:
  std::map<std::string, ToolSpec> tools_;
};

}  // namespace stageflow
