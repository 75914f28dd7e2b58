#include "stageflow/types.hpp"

#include <iostream>

namespace stageflow {

LogFn stderr_logger(LogLevel min_level) {
  return [min_level](LogLevel level, const std::string& msg) {
    if (level < min_level) return;
    static const char* tags[] = {"DEBUG", "INFO", "WARN", "ERROR"};
    std::cerr << "[" << tags[static_cast<int>(level)] << "] " << msg << "\n";
  };
}

const char* role_name(Role role) {
  switch (role) {
    case Role::System: return "system";
    case Role::User: return "user";
    case Role::Assistant: return "assistant";
    case Role::Tool: return "tool";
  }
  return "user";
}

Role role_from_name(const std::string& name) {
  if (name == "system") return Role::System;
  if (name == "user") return Role::User;
  if (name == "assistant") return Role::Assistant;
  if (name == "tool") return Role::Tool;
  throw std::invalid_argument("unknown message role: " + name);
}

Context make_user_context(std::string text) {
  Context ctx;
  ctx.push_back(Message{Role::User, std::move(text), {}, {}});
  return ctx;
}

std::string context_text(const Context& ctx) {
  std::string out;
  for (const auto& m : ctx) {
    if (m.content.empty()) continue;
    if (!out.empty()) out += "\n";
    out += m.content;
  }
  return out;
}

void ToolRegistry::add(ToolSpec spec) {
  if (spec.name.empty()) throw std::invalid_argument("tool name must be nonempty");
  tools_[spec.name] = std::move(spec);
}

const ToolSpec* ToolRegistry::find(const std::string& name) const {
  auto it = tools_.find(name);
  return it == tools_.end() ? nullptr : &it->second;
}

}  // namespace stageflow
