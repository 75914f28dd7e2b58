#include "stageflow/config.hpp"

#include <cctype>
#include <cstdlib>
#include <fstream>

namespace stageflow {

namespace {

BackendTier tier_from_name(const std::string& name) {
  if (name == "light") return BackendTier::Light;
  if (name == "heavy") return BackendTier::Heavy;
  throw ConfigError("unknown backend tier: " + name);
}

OutputRule output_rule_from_json(const json& j, std::string* script_name) {
  if (j.is_null()) return OutputRule::constant(16);
  const auto rule = j.value("rule", "constant");
  if (rule == "constant") return OutputRule::constant(j.value("tokens", 16LL));
  if (rule == "from_trace") {
    return OutputRule::from_annotation(j.value("key", "expected_output_tokens"),
                                       j.value("fallback_tokens", 16LL));
  }
  if (rule == "echo") return OutputRule::echo_annotation(j.value("key", "complexity"));
  if (rule == "script") {
    *script_name = j.value("name", "");
    if (script_name->empty()) throw ConfigError("script output rule requires a name");
    return OutputRule::scripted(named_sim_script(*script_name));
  }
  throw ConfigError("unknown output rule: " + rule);
}

BackendConfig backend_from_json(const json& j) {
  BackendConfig cfg;
  auto& d = cfg.descriptor;
  d.ref = j.value("ref", "");
  if (d.ref.empty()) throw ConfigError("backend requires a ref");
  d.model = j.value("model", d.ref);
  d.endpoint_url = j.value("endpoint", "");
  d.context_limit_tokens = j.value("context_limit_tokens", 32768LL);
  d.tier = tier_from_name(j.value("tier", "heavy"));
  const auto kind = j.value("kind", "simulated");
  if (kind == "simulated") {
    d.kind = BackendKind::Simulated;
  } else if (kind == "http") {
    d.kind = BackendKind::HttpOpenAICompatible;
  } else {
    throw ConfigError("unknown backend kind: " + kind);
  }
  if (j.contains("price")) {
    d.price.input_per_1m = j.at("price").value("input_per_1m", 0.0);
    d.price.output_per_1m = j.at("price").value("output_per_1m", 0.0);
  }
  if (d.kind == BackendKind::Simulated) {
    const json sim = j.value("sim", json::object());
    cfg.sim.prefill_ms_per_token = sim.value("prefill_ms_per_token", 1.0);
    cfg.sim.decode_ms_per_token = sim.value("decode_ms_per_token", 10.0);
    cfg.sim.fixed_overhead_ms = sim.value("fixed_overhead_ms", 0.0);
    cfg.sim.max_concurrency = sim.value("max_concurrency", 1);
    cfg.sim.cache_capacity_tokens = sim.value("cache_capacity_tokens", 1000000LL);
    cfg.sim.output = output_rule_from_json(sim.value("output", json()), &cfg.sim_script);
  } else {
    const json http = j.value("http", json::object());
    cfg.http.max_concurrency = http.value("max_concurrency", 8);
    cfg.http.timeout_sec = http.value("timeout_sec", 120.0);
    if (d.endpoint_url.empty()) throw ConfigError("http backend " + d.ref + " needs an endpoint");
  }
  return cfg;
}

MapperConfig mapper_from_json(const json& j) {
  MapperConfig cfg;
  const auto type = j.value("type", "explicit");
  if (type == "explicit") {
    cfg.type = MapperConfig::Type::Explicit;
  } else if (type == "one_bit") {
    cfg.type = MapperConfig::Type::OneBit;
  } else if (type == "threshold") {
    cfg.type = MapperConfig::Type::Threshold;
  } else {
    throw ConfigError("unknown mapper type: " + type);
  }
  cfg.light = j.value("light", "light");
  cfg.heavy = j.value("heavy", "heavy");
  cfg.classifier = j.value("classifier", cfg.light);
  cfg.threshold = j.value("threshold", 100.0);
  cfg.prompt_template = j.value("prompt_template", "");
  if (j.contains("stages")) {
    for (const auto& s : j.at("stages")) cfg.stages.insert(s.get<std::string>());
  }
  return cfg;
}

}  // namespace

HarnessConfig parse_config(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  HarnessConfig cfg;
  cfg.label = doc.value("label", "");

  if (!doc.contains("backends") || !doc.at("backends").is_array() || doc.at("backends").empty()) {
    throw ConfigError("config requires a nonempty \"backends\" array");
  }
  for (const auto& b : doc.at("backends")) cfg.backends.push_back(backend_from_json(b));

  cfg.mapper = mapper_from_json(doc.value("mapper", json::object()));

  const json sched = doc.value("scheduling", json::object());
  cfg.default_stage_policy = sched.value("stage_policy", "fcfs");
  cfg.default_request_policy = sched.value("request_policy", "fcfs");

  const json mem = doc.value("memory", json::object());
  cfg.memory.tau = mem.value("tau", 512LL);
  cfg.memory.tau_pressure = mem.value("tau_pressure", 0.85);
  cfg.memory.monitor_interval_ms = mem.value("monitor_interval_ms", 100.0);
  if (mem.contains("chain")) {
    cfg.memory.policy_chain.clear();
    for (const auto& name : mem.at("chain")) {
      cfg.memory.policy_chain.push_back(name.get<std::string>());
    }
  }

  const json reroute = doc.value("reroute", json::object());
  cfg.orchestration.reroute_queue_limit = reroute.value("limit", 32ULL);
  if (reroute.contains("alternates")) {
    for (const auto& [primary, alts] : reroute.at("alternates").items()) {
      std::vector<std::string> list;
      for (const auto& a : alts) list.push_back(a.get<std::string>());
      cfg.orchestration.reroute_alternates[primary] = std::move(list);
    }
  }

  cfg.template_params = doc.value("templates", json::object());
  if (doc.contains("workflows")) {
    for (const auto& w : doc.at("workflows")) cfg.declarative_workflows.push_back(w);
  }

  for (const auto& b : cfg.backends) {
    cfg.prices.by_model[b.descriptor.model] = b.descriptor.price;
  }
  if (doc.contains("prices")) {
    for (const auto& [model, p] : doc.at("prices").items()) {
      cfg.prices.by_model[model] =
          Price{p.value("input_per_1m", 0.0), p.value("output_per_1m", 0.0)};
    }
  }
  return cfg;
}

HarnessConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  json doc = json::parse(in, nullptr, /*allow_exceptions=*/true, /*ignore_comments=*/true);
  auto cfg = parse_config(doc);
  if (cfg.label.empty()) cfg.label = path;
  return cfg;
}

std::string endpoint_env_var(const std::string& ref) {
  std::string var = "STAGEFLOW_ENDPOINT_";
  for (char c : ref) {
    var += std::isalnum(static_cast<unsigned char>(c))
               ? static_cast<char>(std::toupper(static_cast<unsigned char>(c)))
               : '_';
  }
  return var;
}

BackendRegistry build_registry(const HarnessConfig& config, EventLoop& loop, LogFn log) {
  BackendRegistry registry;
  for (const auto& b : config.backends) {
    auto descriptor = b.descriptor;
    if (const char* override_url = std::getenv(endpoint_env_var(descriptor.ref).c_str())) {
      descriptor.endpoint_url = override_url;
    }
    if (descriptor.kind == BackendKind::Simulated) {
      registry.add(std::make_shared<SimulatedBackend>(loop, descriptor, b.sim, log));
    } else {
      registry.add(std::make_shared<HttpBackend>(loop, descriptor, b.http, log));
    }
  }
  return registry;
}

std::shared_ptr<StageRouter> make_router(const HarnessConfig& config, BackendRegistry& registry,
                                         const ValidatedWorkflow& wf) {
  switch (config.mapper.type) {
    case MapperConfig::Type::Explicit:
      return std::make_shared<PlanRouter>(plan_explicit(wf, registry));
    case MapperConfig::Type::Threshold:
      return std::make_shared<ThresholdRouter>(
          [](const Context& ctx) { return static_cast<double>(count_context_tokens(ctx)); },
          config.mapper.threshold, config.mapper.light, config.mapper.heavy,
          config.mapper.stages);
    case MapperConfig::Type::OneBit: {
      auto classifier = registry.get(config.mapper.classifier);
      auto prompt = config.mapper.prompt_template.empty()
                        ? std::string(kDefaultClassifierPrompt)
                        : config.mapper.prompt_template;
      return std::make_shared<OneBitRouter>(std::move(classifier), config.mapper.light,
                                            config.mapper.heavy, config.mapper.stages,
                                            std::move(prompt));
    }
  }
  throw ConfigError("unhandled mapper type");
}

namespace {

WorkflowSpec declarative_workflow(const json& def, const TraceRecord& rec,
                                  const std::string& workflow_id) {
  WorkflowBuilder builder(workflow_id);
  if (!def.contains("stages") || !def.at("stages").is_array()) {
    throw ConfigError("declarative workflow requires a stages array");
  }
  for (const auto& s : def.at("stages")) {
    StageSpec stage;
    stage.id = s.value("id", "");
    if (stage.id.empty()) throw ConfigError("declarative stage requires an id");
    stage.name = s.value("name", stage.id);
    stage.backend_ref = s.value("backend", "");
    stage.model = s.value("model", "");
    const auto mode = s.value("mode", "single_shot");
    if (mode == "agent_loop") {
      stage.execution_mode = ExecutionMode::AgentLoop;
      stage.max_turns = s.value("max_turns", 4);
    } else if (mode != "single_shot") {
      throw ConfigError("unknown execution mode: " + mode);
    }
    stage.inference_params.temperature = s.value("temperature", 0.0);
    stage.inference_params.max_tokens = s.value("max_tokens", 1024LL);
    if (s.contains("response_format")) {
      stage.inference_params.response_format = s.at("response_format");
    }
    stage.static_prompt = s.value("prompt", "");
    if (s.contains("prompt_from_payload")) {
      stage.static_prompt =
          rec.payload.value(s.at("prompt_from_payload").get<std::string>(), stage.static_prompt);
    }
    if (s.contains("priority")) stage.scheduling_hints.priority = s.at("priority").get<int>();
    stage.stage_scheduling_policy = s.value("stage_policy", "fcfs");
    stage.request_scheduling_policy = s.value("request_policy", "fcfs");
    const auto cache = s.value("cache_policy", "none");
    if (cache == "flush") {
      stage.cache_policy_override = CachePolicyOverride::Flush;
    } else if (cache == "preserve") {
      stage.cache_policy_override = CachePolicyOverride::Preserve;
    } else if (cache != "none") {
      throw ConfigError("unknown cache_policy: " + cache);
    }
    builder.add_stage(std::move(stage));
  }
  if (def.contains("dependencies")) {
    for (const auto& d : def.at("dependencies")) {
      if (!d.is_array() || d.size() != 2) {
        throw ConfigError("dependency entries are [downstream, upstream] pairs");
      }
      builder.add_dependency(d.at(0).get<std::string>(), d.at(1).get<std::string>());
    }
  }
  if (def.contains("memory_policy")) {
    std::vector<std::string> chain;
    for (const auto& name : def.at("memory_policy")) chain.push_back(name.get<std::string>());
    builder.set_memory_policy(std::move(chain));
  }
  return builder.take();
}

}  // namespace

TemplateRegistry build_templates(const HarnessConfig& config) {
  TemplateRegistry registry;
  register_builtin_templates(registry);
  for (const auto& def : config.declarative_workflows) {
    const auto name = def.value("name", "");
    if (name.empty()) throw ConfigError("declarative workflow requires a name");
    registry.add(name, [def](const TraceRecord& rec, const std::string& workflow_id,
                             const json&) { return declarative_workflow(def, rec, workflow_id); });
  }
  return registry;
}

}  // namespace stageflow
