#pragma once

#include "stageflow/http_backend.hpp"
#include "stageflow/memory.hpp"
#include "stageflow/metrics.hpp"
#include "stageflow/orchestrator.hpp"
#include "stageflow/simulated_backend.hpp"
#include "stageflow/templates.hpp"

namespace stageflow {

class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct BackendConfig {
  BackendDescriptor descriptor;
  SimulatedBackendConfig sim;  // kind == Simulated
  HttpBackendConfig http;      // kind == HttpOpenAICompatible
  std::string sim_script;      // named reply script, when the output rule is "script"
};

struct MapperConfig {
  enum class Type { Explicit, OneBit, Threshold };
  Type type = Type::Explicit;
  std::string classifier;  // OneBit: backend ref issuing the classification
  std::string light;
  std::string heavy;
  double threshold = 100;              // Threshold: prompt-token cutoff
  std::set<std::string> stages;        // routable stages; empty = all
  std::string prompt_template;         // OneBit override; empty = default
};

struct HarnessConfig {
  std::string label;
  std::vector<BackendConfig> backends;
  MapperConfig mapper;
  std::string default_stage_policy = "fcfs";
  std::string default_request_policy = "fcfs";
  MemoryConfig memory;
  OrchestratorConfig orchestration;
  json template_params = json::object();   // "templates" section, keyed by name
  std::vector<json> declarative_workflows; // "workflows" section
  PriceTable prices;                        // per-model prices (backend prices + overrides)
};

/// Parses a config document; comments (// and /* */) are allowed in files.
HarnessConfig parse_config(const json& doc);
HarnessConfig load_config(const std::string& path);

/// Environment override for backend endpoints:
/// STAGEFLOW_ENDPOINT_<REF> (ref uppercased, non-alphanumerics -> '_').
std::string endpoint_env_var(const std::string& ref);

/// Instantiates the configured backends on the loop. Http backends honor the
/// endpoint env override.
BackendRegistry build_registry(const HarnessConfig& config, EventLoop& loop, LogFn log = {});

/// Router for one workflow under the configured mapper. Explicit mappers get
/// a per-workflow plan; dynamic mappers share the configured classifier.
std::shared_ptr<StageRouter> make_router(const HarnessConfig& config, BackendRegistry& registry,
                                         const ValidatedWorkflow& wf);

/// Registers built-in templates plus the config's declarative workflows.
TemplateRegistry build_templates(const HarnessConfig& config);

}  // namespace stageflow
