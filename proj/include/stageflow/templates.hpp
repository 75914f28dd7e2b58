#pragma once

#include <set>

#include "stageflow/simulated_backend.hpp"
#include "stageflow/workflow.hpp"

namespace stageflow {

struct TraceRecord {
  std::string workflow_template;
  long long arrival_ms = 0;
  json payload = json::object();  // template variables

  /// Payload fields flattened to strings (request annotations for scripted
  /// backends and output-size rules).
  std::map<std::string, std::string> annotations() const;
};

class TraceParseError : public std::runtime_error {
 public:
  TraceParseError(std::size_t line, const std::string& cause)
      : std::runtime_error("trace line " + std::to_string(line) + ": " + cause), line(line) {}
  std::size_t line;
};

class UnknownTemplateError : public std::runtime_error {
 public:
  explicit UnknownTemplateError(const std::string& name)
      : std::runtime_error("unknown workflow template: " + name), name(name) {}
  std::string name;
};

/// Parses line-delimited records, validates template names, and returns the
/// records stably sorted by arrival_ms.
std::vector<TraceRecord> load_trace(const std::string& path,
                                    const std::set<std::string>& known_templates);
std::vector<TraceRecord> parse_trace(std::istream& in,
                                     const std::set<std::string>& known_templates);

// ── Workflow templates ───────────────────────────────────────────────

/// Instantiates one workflow from a trace record. `params` is the template's
/// entry in the config ("templates" section), possibly empty.
using WorkflowTemplate =
    std::function<WorkflowSpec(const TraceRecord& rec, const std::string& workflow_id,
                               const json& params)>;

class TemplateRegistry {
 public:
  void add(const std::string& name, WorkflowTemplate fn);
  const WorkflowTemplate& at(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::set<std::string> names() const;

 private:
  std::map<std::string, WorkflowTemplate> templates_;
};

/// Registers the bundled templates:
///   single_shot_patch  one single-shot stage; prompt from payload["prompt"]
///   math_chain_k       k-stage sequential chain on one backend; each stage
///                      extends a generated base context by append_tokens
///   customer_support   classify -> {policy_check -> reply, route_ticket}
///                      with agent loops, scripted tools and dynamic priority
void register_builtin_templates(TemplateRegistry& registry);

/// Deterministic filler text of exactly `tokens` whitespace-separated tokens.
std::string synthetic_prompt(long long tokens, const std::string& salt = "w");

/// Named reply scripts for simulated backends ("customer_support").
ReplyScript named_sim_script(const std::string& name);

}  // namespace stageflow
