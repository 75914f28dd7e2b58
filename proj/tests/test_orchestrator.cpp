#include "doctest.h"
#include "stageflow/orchestrator.hpp"

#include <random>

#include "stageflow/templates.hpp"
#include "test_support.hpp"

using namespace stageflow;
using namespace stageflow::test;

namespace {

using Kind = LifecycleSignal::Kind;

struct Env {
  EventLoop loop{ClockMode::Virtual};
  BackendRegistry registry;
  ToolRegistry tools;
  SignalBus bus;
  std::vector<LifecycleSignal> signals;
  std::unique_ptr<Orchestrator> orch;

  explicit Env(OrchestratorConfig cfg = {}) {
    bus.subscribe([this](const LifecycleSignal& s) { signals.push_back(s); });
    orch = std::make_unique<Orchestrator>(loop, registry, tools, bus, std::move(cfg));
  }

  std::shared_ptr<SimulatedBackend> add_sim(const std::string& ref, SimulatedBackendConfig cfg,
                                            BackendTier tier = BackendTier::Heavy) {
    auto b = std::make_shared<SimulatedBackend>(loop, sim_descriptor(ref, tier), cfg);
    registry.add(b);
    return b;
  }

  ValidatedWorkflow validate(WorkflowSpec spec) {
    auto result = validate_workflow(spec, registry);
    REQUIRE(result.ok());
    return *result.workflow;
  }

  ExecutionReport run(const ValidatedWorkflow& wf) {
    return orch->execute_workflow(wf, plan_explicit(wf, registry));
  }

  std::size_t index_of(Kind kind, const std::string& stage) const {
    for (std::size_t i = 0; i < signals.size(); ++i) {
      if (signals[i].kind == kind && signals[i].stage_id == stage) return i;
    }
    REQUIRE(false);
    return 0;
  }
};

SimulatedBackendConfig quick_sim(int concurrency = 1, long long out_tokens = 0) {
  SimulatedBackendConfig cfg;
  cfg.prefill_ms_per_token = 1;
  cfg.decode_ms_per_token = 1;
  cfg.max_concurrency = concurrency;
  cfg.output = OutputRule::constant(out_tokens);
  return cfg;
}

}  // namespace

TEST_CASE("single stage emits start, complete, workflow-complete in order") {
  Env env;
  env.add_sim("b", quick_sim());
  WorkflowBuilder b("wf");
  b.add_stage(basic_stage("only", "b"));
  auto report = env.run(env.validate(b.take()));

  REQUIRE(report.success());
  REQUIRE(report.results.count("only") == 1);
  REQUIRE(env.signals.size() == 3);
  CHECK(env.signals[0].kind == Kind::StageStart);
  CHECK(env.signals[1].kind == Kind::StageComplete);
  CHECK(env.signals[2].kind == Kind::WorkflowComplete);
  const auto& t = report.results.at("only").timing;
  CHECK(t.enqueue_ts <= t.dispatch_ts);
  CHECK(t.dispatch_ts <= t.first_token_ts);
  CHECK(t.first_token_ts <= t.complete_ts);
}

TEST_CASE("three-stage chain at 100 ms per stage has a 300 ms makespan") {
  Env env;
  auto cfg = quick_sim();  // prefill 1 ms/token, no decode cost
  env.add_sim("b", cfg);
  WorkflowBuilder b("wf");
  for (int i = 1; i <= 3; ++i) {
    auto stage = basic_stage("s" + std::to_string(i), "b",
                             synthetic_prompt(100, "stage" + std::to_string(i) + "_"));
    b.add_stage(std::move(stage));
    if (i > 1) b.add_dependency("s" + std::to_string(i), "s" + std::to_string(i - 1));
  }
  auto report = env.run(env.validate(b.take()));
  REQUIRE(report.success());
  CHECK(report.makespan_ms == 300.0);
  CHECK(report.results.at("s1").timing.complete_ts == 100.0);
  CHECK(report.results.at("s3").timing.complete_ts == 300.0);
}

TEST_CASE("independent branches dispatch concurrently when the backend has slots") {
  Env env;
  env.add_sim("light", quick_sim(1));
  env.add_sim("heavy", quick_sim(2));
  auto report = env.run(env.validate(support_shape_spec()));
  REQUIRE(report.success());

  auto policy_start = env.index_of(Kind::StageStart, "policy_check");
  auto route_start = env.index_of(Kind::StageStart, "route_ticket");
  auto policy_done = env.index_of(Kind::StageComplete, "policy_check");
  auto route_done = env.index_of(Kind::StageComplete, "route_ticket");
  CHECK(policy_start < policy_done);
  CHECK(policy_start < route_done);
  CHECK(route_start < policy_done);
  CHECK(route_start < route_done);
  CHECK(env.signals.back().kind == Kind::WorkflowComplete);
}

TEST_CASE("structured output is passed through when a response format is set") {
  Env env;
  auto cfg = quick_sim();
  cfg.output = OutputRule::scripted([](const CompletionRequest&, int) {
    return ScriptedReply{R"({"category":"billing","needs_escalation":false})", {}};
  });
  env.add_sim("b", cfg);
  WorkflowBuilder b("wf");
  auto stage = basic_stage("classify", "b");
  stage.inference_params.response_format = json{{"type", "json_object"}};
  b.add_stage(std::move(stage));
  auto report = env.run(env.validate(b.take()));
  REQUIRE(report.success());
  const auto& result = report.results.at("classify");
  REQUIRE(result.structured.has_value());
  CHECK(result.structured->at("category") == "billing");
}

TEST_CASE("empty prompt fails the stage") {
  Env env;
  env.add_sim("b", quick_sim());
  WorkflowBuilder b("wf");
  b.add_stage(basic_stage("s", "b", ""));  // nothing to send
  auto report = env.run(env.validate(b.take()));
  CHECK_FALSE(report.success());
  REQUIRE(report.failed.count("s") == 1);
  CHECK(report.errors.at("s").find("EmptyPrompt") != std::string::npos);
}

TEST_CASE("cold 120-token prompt with 30-token reply: first token at 240 ms") {
  Env env;
  SimulatedBackendConfig cfg;
  cfg.prefill_ms_per_token = 2;
  cfg.decode_ms_per_token = 20;
  cfg.max_concurrency = 1;
  cfg.output = OutputRule::constant(30);
  env.add_sim("b", cfg);
  WorkflowBuilder b("wf");
  b.add_stage(basic_stage("s", "b", synthetic_prompt(120)));
  auto report = env.run(env.validate(b.take()));
  REQUIRE(report.success());
  const auto& t = report.results.at("s").timing;
  CHECK(t.first_token_ts - t.dispatch_ts == 240.0);
  CHECK(t.complete_ts - t.dispatch_ts == 840.0);
  CHECK(report.results.at("s").usage.completion_tokens == 30);
}

TEST_CASE("agent loop: one tool round then answer") {
  Env env;
  auto cfg = quick_sim();
  cfg.output = OutputRule::scripted([](const CompletionRequest&, int turn) {
    if (turn == 0) {
      return ScriptedReply{"", {ToolCall{"read_policy_yaml", json::object(), "c1"}}};
    }
    return ScriptedReply{"policy verdict: allowed", {}};
  });
  auto sim = env.add_sim("b", cfg);

  WorkflowBuilder b("wf");
  auto stage = basic_stage("policy_check", "b", "check the policy");
  stage.execution_mode = ExecutionMode::AgentLoop;
  stage.max_turns = 4;
  ToolSpec tool;
  tool.name = "read_policy_yaml";
  tool.handler = [](const json&) { return std::string("policy: be nice"); };
  stage.tools.push_back(tool);
  b.add_stage(std::move(stage));

  auto report = env.run(env.validate(b.take()));
  REQUIRE(report.success());
  CHECK(sim->stats().completions == 2);
  const auto& result = report.results.at("policy_check");
  REQUIRE(result.tool_transcript.size() == 1);
  CHECK(result.tool_transcript[0].first.tool_name == "read_policy_yaml");
  CHECK(result.tool_transcript[0].second.content == "policy: be nice");
  CHECK_FALSE(result.tool_transcript[0].second.is_error);
  CHECK(result.content == "policy verdict: allowed");
}

TEST_CASE("agent loop: no tool calls means a single completion") {
  Env env;
  auto cfg = quick_sim();
  cfg.output = OutputRule::scripted(
      [](const CompletionRequest&, int) { return ScriptedReply{"direct answer", {}}; });
  auto sim = env.add_sim("b", cfg);
  WorkflowBuilder b("wf");
  auto stage = basic_stage("s", "b", "question");
  stage.execution_mode = ExecutionMode::AgentLoop;
  stage.max_turns = 5;
  b.add_stage(std::move(stage));
  auto report = env.run(env.validate(b.take()));
  REQUIRE(report.success());
  CHECK(sim->stats().completions == 1);
  CHECK(report.results.at("s").tool_transcript.empty());
}

TEST_CASE("agent loop: turn limit produces MaxTurnsExceeded with a full transcript") {
  Env env;
  auto cfg = quick_sim();
  cfg.output = OutputRule::scripted([](const CompletionRequest&, int turn) {
    return ScriptedReply{"", {ToolCall{"probe", json::object(), "c" + std::to_string(turn)}}};
  });
  auto sim = env.add_sim("b", cfg);
  WorkflowBuilder b("wf");
  auto stage = basic_stage("s", "b", "never stops");
  stage.execution_mode = ExecutionMode::AgentLoop;
  stage.max_turns = 3;
  ToolSpec tool;
  tool.name = "probe";
  tool.handler = [](const json&) { return std::string("pong"); };
  stage.tools.push_back(tool);
  b.add_stage(std::move(stage));

  auto report = env.run(env.validate(b.take()));
  CHECK_FALSE(report.success());
  REQUIRE(report.failed.count("s") == 1);
  CHECK(report.errors.at("s").find("MaxTurnsExceeded") != std::string::npos);
  CHECK(sim->stats().completions == 3);
  REQUIRE(report.results.count("s") == 1);  // partial result, flagged
  CHECK(report.results.at("s").incomplete);
  CHECK(report.results.at("s").tool_transcript.size() == 3);
}

TEST_CASE("tool handler errors are fed back and the loop continues") {
  Env env;
  auto cfg = quick_sim();
  cfg.output = OutputRule::scripted([](const CompletionRequest&, int turn) {
    if (turn == 0) {
      return ScriptedReply{"", {ToolCall{"flaky", json::object(), "c1"}}};
    }
    return ScriptedReply{"recovered", {}};
  });
  env.add_sim("b", cfg);
  WorkflowBuilder b("wf");
  auto stage = basic_stage("s", "b", "try the tool");
  stage.execution_mode = ExecutionMode::AgentLoop;
  stage.max_turns = 4;
  ToolSpec tool;
  tool.name = "flaky";
  tool.handler = [](const json&) -> std::string { throw std::runtime_error("disk on fire"); };
  stage.tools.push_back(tool);
  b.add_stage(std::move(stage));

  auto report = env.run(env.validate(b.take()));
  REQUIRE(report.success());
  const auto& transcript = report.results.at("s").tool_transcript;
  REQUIRE(transcript.size() == 1);
  CHECK(transcript[0].second.is_error);
  CHECK(transcript[0].second.content == "disk on fire");
  CHECK(report.results.at("s").content == "recovered");
}

TEST_CASE("unknown tool fails the stage") {
  Env env;
  auto cfg = quick_sim();
  cfg.output = OutputRule::scripted([](const CompletionRequest&, int) {
    return ScriptedReply{"", {ToolCall{"ghost", json::object(), "c1"}}};
  });
  env.add_sim("b", cfg);
  WorkflowBuilder b("wf");
  auto stage = basic_stage("s", "b", "call something unknown");
  stage.execution_mode = ExecutionMode::AgentLoop;
  stage.max_turns = 2;
  b.add_stage(std::move(stage));
  auto report = env.run(env.validate(b.take()));
  CHECK_FALSE(report.success());
  CHECK(report.errors.at("s").find("ToolNotFound") != std::string::npos);
}

TEST_CASE("execute_tool basics") {
  ToolRegistry registry;
  ToolSpec send;
  send.name = "send_email";
  send.handler = [](const json& args) {
    REQUIRE(args.contains("to"));
    return std::string("sent");
  };
  registry.add(send);

  auto ok = execute_tool(ToolCall{"send_email", json{{"to", "x"}, {"body", "y"}}, "c1"}, registry);
  CHECK(ok.content == "sent");
  CHECK_FALSE(ok.is_error);
  CHECK(ok.call_id == "c1");
  CHECK_THROWS_AS(execute_tool(ToolCall{"nope", json::object(), "c2"}, registry),
                  ToolNotFoundError);
}

TEST_CASE("stage failure aborts descendants but independent branches finish") {
  Env env;
  auto cfg = quick_sim();
  cfg.output = OutputRule::scripted([](const CompletionRequest& req, int) {
    if (req.metadata.stage_id == "policy_check") {
      return ScriptedReply{"", {ToolCall{"missing_tool", json::object(), "c"}}};
    }
    return ScriptedReply{"fine", {}};
  });
  env.add_sim("light", cfg);
  env.add_sim("heavy", cfg);

  auto spec = support_shape_spec();
  auto& policy = spec.stages.at("policy_check");
  policy.execution_mode = ExecutionMode::AgentLoop;  // will hit the missing tool
  policy.max_turns = 2;
  auto report = env.run(env.validate(spec));

  CHECK_FALSE(report.success());
  CHECK(report.failed == std::set<std::string>{"policy_check"});
  CHECK(report.aborted == std::set<std::string>{"reply"});
  CHECK(report.results.count("classify") == 1);
  CHECK(report.results.count("route_ticket") == 1);  // independent branch survived
  CHECK(env.signals.back().kind == Kind::WorkflowComplete);
}

TEST_CASE("reroute_on_overload threshold rule") {
  std::map<std::string, std::size_t> depth{{"p", 3}, {"a1", 1}, {"a2", 0}};
  auto depth_fn = [&](const std::string& r) { return depth.at(r); };
  std::vector<std::string> alts{"a1", "a2"};

  CHECK(reroute_on_overload("p", alts, depth_fn, 10) == "p");
  depth["p"] = 12;
  depth["a1"] = 1;
  CHECK(reroute_on_overload("p", alts, depth_fn, 10) == "a1");
  depth["a1"] = 30;
  depth["a2"] = 30;
  CHECK(reroute_on_overload("p", alts, depth_fn, 10) == "p");  // stay put
}

TEST_CASE("overloaded primary reroutes a later workflow to its alternate") {
  OrchestratorConfig cfg;
  cfg.reroute_queue_limit = 1;
  cfg.reroute_alternates["primary"] = {"alternate"};
  Env env(cfg);
  env.add_sim("primary", quick_sim(1));
  env.add_sim("alternate", quick_sim(1));

  auto make_wf = [&](const std::string& id) {
    WorkflowBuilder b(id);
    b.add_stage(basic_stage("s", "primary", synthetic_prompt(50, id + "_")));
    return env.validate(b.take());
  };
  std::vector<ExecutionReport> reports(3);
  for (int i = 0; i < 3; ++i) {
    env.orch->submit(make_wf("wf" + std::to_string(i)),
                     std::make_shared<PlanRouter>(MappingPlan{{{"s", "primary"}}, {}}),
                     [&reports, i](ExecutionReport r) { reports[i] = std::move(r); });
  }
  env.loop.run_until_idle();
  CHECK(reports[0].routing.at("s") == "primary");   // dispatched immediately
  CHECK(reports[1].routing.at("s") == "primary");   // first in queue (depth 0 < 1)
  CHECK(reports[2].routing.at("s") == "alternate"); // queue full, rerouted
}

TEST_CASE("tool waits release the backend so queued work runs") {
  Env env;
  auto cfg = quick_sim(1);
  cfg.output = OutputRule::scripted([](const CompletionRequest& req, int turn) {
    if (req.metadata.workflow_id == "w1" && turn == 0) {
      return ScriptedReply{"", {ToolCall{"slow_tool", json::object(), "c1"}}};
    }
    return ScriptedReply{"done", {}};
  });
  env.add_sim("b", cfg);

  WorkflowBuilder b1("w1");
  auto agent = basic_stage("agent", "b", synthetic_prompt(10, "w1_"));
  agent.execution_mode = ExecutionMode::AgentLoop;
  agent.max_turns = 3;
  ToolSpec slow;
  slow.name = "slow_tool";
  slow.latency_ms = 500;
  slow.handler = [](const json&) { return std::string("eventually"); };
  agent.tools.push_back(slow);
  b1.add_stage(std::move(agent));

  WorkflowBuilder b2("w2");
  b2.add_stage(basic_stage("quick", "b", synthetic_prompt(10, "w2_")));

  ExecutionReport r1, r2;
  env.orch->submit(env.validate(b1.take()),
                   std::make_shared<PlanRouter>(MappingPlan{{{"agent", "b"}}, {}}),
                   [&](ExecutionReport r) { r1 = std::move(r); });
  env.orch->submit(env.validate(b2.take()),
                   std::make_shared<PlanRouter>(MappingPlan{{{"quick", "b"}}, {}}),
                   [&](ExecutionReport r) { r2 = std::move(r); });
  env.loop.run_until_idle();

  REQUIRE(r1.success());
  REQUIRE(r2.success());
  const double w1_turn1_done = 11.0;  // 10 tokens prefill + 1 tool-call token decode
  const double w1_turn2_start = w1_turn1_done + 500.0;
  const auto& quick = r2.results.at("quick").timing;
  CHECK(quick.dispatch_ts >= w1_turn1_done);
  CHECK(quick.complete_ts <= w1_turn2_start);  // served inside the tool window
  CHECK(r1.results.at("agent").timing.complete_ts > w1_turn2_start);
}

TEST_CASE("causal signal order and dependency timing over random DAGs") {
  std::mt19937 rng(987);
  for (int trial = 0; trial < 50; ++trial) {
    Env env;
    SimulatedBackendConfig cfg;
    cfg.prefill_ms_per_token = std::uniform_real_distribution<double>(0.5, 3.0)(rng);
    cfg.decode_ms_per_token = std::uniform_real_distribution<double>(0.5, 3.0)(rng);
    cfg.max_concurrency = std::uniform_int_distribution<int>(1, 4)(rng);
    cfg.output = OutputRule::constant(std::uniform_int_distribution<int>(0, 20)(rng));
    env.add_sim("b", cfg);

    auto spec = random_dag_spec(rng, 12, "b", "wf" + std::to_string(trial));
    auto wf = env.validate(spec);
    auto report = env.run(wf);
    REQUIRE(report.success());

    // Exactly one WorkflowComplete, at the end.
    int wc = 0;
    for (const auto& s : env.signals) wc += s.kind == Kind::WorkflowComplete;
    CHECK(wc == 1);
    CHECK(env.signals.back().kind == Kind::WorkflowComplete);

    for (const auto& id : wf.stage_ids()) {
      auto start_idx = env.index_of(Kind::StageStart, id);
      double dispatch = report.results.at(id).timing.dispatch_ts;
      for (const auto& u : wf.upstream(id)) {
        CHECK(env.index_of(Kind::StageComplete, u) < start_idx);
        CHECK(dispatch >= report.results.at(u).timing.complete_ts);
      }
    }
  }
}

TEST_CASE("identical runs produce byte-identical execution reports") {
  auto run_once = [] {
    Env env;
    auto cfg = quick_sim(2, 8);
    env.add_sim("light", cfg, BackendTier::Light);
    env.add_sim("heavy", cfg);
    auto report = env.run(env.validate(support_shape_spec()));
    return report.to_json().dump();
  };
  CHECK(run_once() == run_once());
}

TEST_CASE("hint builders set dynamic priority from upstream results") {
  Env env;
  auto cfg = quick_sim(1);
  cfg.output = OutputRule::scripted([](const CompletionRequest& req, int) {
    if (req.metadata.stage_id == "classify") {
      return ScriptedReply{R"({"category":"billing"})", {}};
    }
    return ScriptedReply{"ok", {}};
  });
  env.add_sim("b", cfg);

  WorkflowBuilder b("wf");
  b.add_stage(basic_stage("classify", "b", "the ticket"));
  auto downstream = basic_stage("handle", "b", "handle it");
  downstream.hints_builder = [](const UpstreamResults& upstream) {
    auto parsed = json::parse(upstream.at("classify").content, nullptr, false);
    int priority = parsed.is_object() && parsed.value("category", "") == "billing" ? 8 : 5;
    return SchedulingHints{priority};
  };
  downstream.prompt_builder = [](const UpstreamResults& upstream) {
    return make_user_context("deal with: " + upstream.at("classify").content);
  };
  b.add_stage(std::move(downstream));
  b.add_dependency("handle", "classify");

  std::vector<LifecycleSignal> starts;
  env.bus.subscribe([&](const LifecycleSignal& s) {
    if (s.kind == Kind::StageStart) starts.push_back(s);
  });
  auto report = env.run(env.validate(b.take()));
  REQUIRE(report.success());
  CHECK(report.results.at("handle").content == "ok");
}
