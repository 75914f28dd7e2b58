#include "stageflow/orchestrator.hpp"

#include <algorithm>
#include <cassert>

namespace stageflow {

// ── Routers ──────────────────────────────────────────────────────────

void PlanRouter::route(const StageSpec& stage, const Context&, const RequestMetadata&,
                       RouteCallback done) {
  auto it = plan_.assignments.find(stage.id);
  if (it == plan_.assignments.end()) throw UnknownStageError(stage.id);
  auto prov = plan_.provenance.count(stage.id) ? plan_.provenance.at(stage.id)
                                               : MappingProvenance{};
  done(it->second, prov);
}

ThresholdRouter::ThresholdRouter(ScoreFn score_fn, double threshold, std::string light,
                                 std::string heavy, std::set<std::string> routable_stages)
    : score_fn_(std::move(score_fn)), threshold_(threshold), light_(std::move(light)),
      heavy_(std::move(heavy)), routable_(std::move(routable_stages)) {}

void ThresholdRouter::route(const StageSpec& stage, const Context& ctx, const RequestMetadata&,
                            RouteCallback done) {
  if (!routable_.empty() && !routable_.count(stage.id)) {
    done(stage.backend_ref, MappingProvenance{MappingProvenance::Kind::Explicit, {}, 0});
    return;
  }
  auto [ref, score] = map_threshold(ctx, score_fn_, threshold_, light_, heavy_);
  done(ref, MappingProvenance{MappingProvenance::Kind::Threshold, {}, score});
}

OneBitRouter::OneBitRouter(std::shared_ptr<Backend> classifier, std::string light,
                           std::string heavy, std::set<std::string> routable_stages,
                           std::string prompt_template)
    : classifier_(std::move(classifier)), light_(std::move(light)), heavy_(std::move(heavy)),
      routable_(std::move(routable_stages)), prompt_template_(std::move(prompt_template)) {}

void OneBitRouter::route(const StageSpec& stage, const Context& ctx, const RequestMetadata& meta,
                         RouteCallback done) {
  if (!routable_.empty() && !routable_.count(stage.id)) {
    done(stage.backend_ref, MappingProvenance{MappingProvenance::Kind::Explicit, {}, 0});
    return;
  }
  map_one_bit_async(
      ctx, *classifier_, light_, heavy_,
      [done = std::move(done)](std::string ref, ComplexityLabel label) {
        std::string note = label.classifier_failed ? "classifier_failed"
                           : label.parse_failed    ? "unparseable"
                           : (label.value == Complexity::Simple ? "simple" : "complex");
        done(std::move(ref), MappingProvenance{MappingProvenance::Kind::OneBit, note, 0});
      },
      prompt_template_, meta);
}

// ── Tools ────────────────────────────────────────────────────────────

ToolResult execute_tool(const ToolCall& call, const ToolRegistry& registry) {
  const ToolSpec* spec = registry.find(call.tool_name);
  if (!spec) throw ToolNotFoundError(call.tool_name);
  ToolResult result;
  result.call_id = call.call_id;
  try {
    result.content = spec->handler ? spec->handler(call.arguments) : std::string{};
  } catch (const std::exception& e) {
    result.content = e.what();
    result.is_error = true;
  }
  return result;
}

json tool_wire_schema(const ToolSpec& tool) {
  return json{{"type", "function"},
              {"function", json{{"name", tool.name}, {"parameters", tool.parameter_schema}}}};
}

std::string reroute_on_overload(const std::string& primary,
                                std::span<const std::string> alternates,
                                const std::function<std::size_t(const std::string&)>& queue_depth,
                                std::size_t limit) {
  if (queue_depth(primary) < limit) return primary;
  for (const auto& alt : alternates) {
    if (queue_depth(alt) < limit) return alt;
  }
  return primary;
}

json ExecutionReport::to_json() const {
  json stages = json::object();
  for (const auto& [id, r] : results) {
    json transcript = json::array();
    for (const auto& [call, res] : r.tool_transcript) {
      transcript.push_back({{"tool", call.tool_name},
                            {"call_id", call.call_id},
                            {"is_error", res.is_error},
                            {"result", res.content}});
    }
    stages[id] = {
        {"content", r.content},
        {"structured", r.structured ? *r.structured : json()},
        {"incomplete", r.incomplete},
        {"tool_transcript", transcript},
        {"usage",
         {{"prompt_tokens", r.usage.prompt_tokens},
          {"completion_tokens", r.usage.completion_tokens},
          {"cached_prefix_tokens", r.usage.cached_prefix_tokens}}},
        {"timing",
         {{"enqueue_ts", r.timing.enqueue_ts},
          {"dispatch_ts", r.timing.dispatch_ts},
          {"first_token_ts", r.timing.first_token_ts},
          {"complete_ts", r.timing.complete_ts}}},
    };
  }
  return json{{"workflow_id", workflow_id},
              {"results", stages},
              {"failed", failed},
              {"aborted", aborted},
              {"errors", errors},
              {"routing", routing},
              {"first_enqueue_ts", first_enqueue_ts},
              {"last_complete_ts", last_complete_ts},
              {"makespan_ms", makespan_ms}};
}

// ── WorkflowRun ──────────────────────────────────────────────────────

namespace {

class WorkflowRun : public std::enable_shared_from_this<WorkflowRun> {
 public:
  WorkflowRun(Orchestrator& orch, ValidatedWorkflow wf, std::shared_ptr<StageRouter> router,
              std::function<void(ExecutionReport)> done,
              std::map<std::string, std::string> annotations)
      : orch_(orch), wf_(std::move(wf)), router_(std::move(router)), done_(std::move(done)),
        annotations_(std::move(annotations)) {}

  void start() { pump_ready(); }

 private:
  struct StageRun {
    const StageSpec* spec = nullptr;
    std::string backend_ref;
    std::string model;
    Context convo;
    int turns = 0;
    std::vector<std::pair<ToolCall, ToolResult>> transcript;
    ToolRegistry stage_tools;
    Usage usage;
    StageTiming timing;
    MappingProvenance provenance;
    int priority = 0;
    bool start_signaled = false;
    long long last_served_prompt_tokens = 0;
  };

  Orchestrator& orch_;
  ValidatedWorkflow wf_;
  std::shared_ptr<StageRouter> router_;
  std::function<void(ExecutionReport)> done_;
  std::map<std::string, std::string> annotations_;

  std::set<std::string> completed_, in_flight_, failed_, aborted_;
  std::map<std::string, StageRun> runs_;
  UpstreamResults results_;
  std::map<std::string, std::string> errors_;
  double first_enqueue_ts_ = -1;
  bool finished_ = false;

  double now() const { return orch_.loop().now_ms(); }

  void emit(const LifecycleSignal& sig) { orch_.bus().publish(sig); }

  std::set<std::string> blocked() const {
    std::set<std::string> b = in_flight_;
    b.insert(failed_.begin(), failed_.end());
    b.insert(aborted_.begin(), aborted_.end());
    return b;
  }

  bool untouched(const std::string& id) const {
    return !in_flight_.count(id) && !completed_.count(id) && !failed_.count(id) &&
           !aborted_.count(id);
  }

  void pump_ready() {
    if (finished_) return;
    auto ready = ready_stages(wf_, completed_, blocked());
    for (const auto& id : ready) {
      // A synchronous failure inside start_stage can re-enter pump_ready and
      // start later entries of this snapshot already; skip those.
      if (untouched(id)) start_stage(id);
    }
    maybe_finish();
  }

  UpstreamResults upstream_results(const std::string& stage_id) const {
    UpstreamResults ups;
    for (const auto& u : wf_.upstream(stage_id)) ups.emplace(u, results_.at(u));
    return ups;
  }

  void start_stage(const std::string& id) {
    in_flight_.insert(id);
    auto& sr = runs_[id];
    sr.spec = &wf_.stage(id);
    for (const auto& tool : sr.spec->tools) sr.stage_tools.add(tool);

    UpstreamResults ups;
    try {
      ups = upstream_results(id);
      sr.convo = build_context(wf_, id, ups);
    } catch (const std::exception& e) {
      fail_stage(id, e.what());
      return;
    }
    if (count_context_tokens(sr.convo) == 0) {
      fail_stage(id, "EmptyPrompt: stage context has no content");
      return;
    }

    sr.priority = sr.spec->scheduling_hints.priority.value_or(0);
    if (sr.spec->hints_builder) {
      try {
        auto hints = sr.spec->hints_builder(ups);
        if (hints.priority) sr.priority = *hints.priority;
      } catch (const std::exception& e) {
        fail_stage(id, std::string("hints builder failed: ") + e.what());
        return;
      }
    }

    RequestMetadata meta{wf_.id(), id, annotations_};
    auto self = shared_from_this();
    router_->route(*sr.spec, sr.convo, meta,
                   [self, id](std::string ref, MappingProvenance prov) {
                     self->on_routed(id, std::move(ref), std::move(prov));
                   });
  }

  void on_routed(const std::string& id, std::string ref, MappingProvenance prov) {
    if (finished_ || failed_.count(id) || aborted_.count(id)) return;
    auto& sr = runs_[id];

    const auto& alternates = orch_.config().reroute_alternates;
    if (auto it = alternates.find(ref); it != alternates.end()) {
      ref = reroute_on_overload(
          ref, std::span<const std::string>(it->second),
          [this](const std::string& r) { return orch_.queue_depth(r); },
          orch_.config().reroute_queue_limit);
    }

    if (!orch_.backends().contains(ref)) {
      fail_stage(id, "routed to unknown backend: " + ref);
      return;
    }
    sr.backend_ref = ref;
    sr.model = sr.spec->model.empty() ? orch_.backends().descriptor(ref).model : sr.spec->model;
    sr.provenance = std::move(prov);

    const double ts = now();
    sr.timing.enqueue_ts = ts;
    if (first_enqueue_ts_ < 0) first_enqueue_ts_ = ts;
    emit(LifecycleSignal::stage_start(wf_.id(), id, sr.backend_ref, sr.model,
                                      count_context_tokens(sr.convo), ts,
                                      sr.spec->cache_policy_override));
    sr.start_signaled = true;
    enqueue_turn(id);
  }

  void enqueue_turn(const std::string& id) {
    if (finished_ || failed_.count(id)) return;
    auto& sr = runs_[id];
    QueuedRequest r;
    r.request_id = wf_.id() + "/" + id + "#" + std::to_string(sr.turns);
    r.workflow_id = wf_.id();
    r.stage_id = id;
    r.context = sr.convo;
    r.arrival_ts = now();
    r.priority = sr.priority;
    r.prompt_tokens_estimate = count_context_tokens(sr.convo);
    auto self = shared_from_this();
    r.on_dispatch = [self, id](QueuedRequest qr) { self->on_dispatch(id, std::move(qr)); };

    auto& q = orch_.queue(sr.backend_ref);
    q.set_policies(sr.spec->stage_scheduling_policy, sr.spec->request_scheduling_policy);
    q.enqueue(std::move(r));
    orch_.pump(sr.backend_ref);
  }

  void on_dispatch(const std::string& id, QueuedRequest qr) {
    auto& sr = runs_[id];
    const double dispatched = now();
    const double sched_wait_ms = dispatched - qr.arrival_ts;
    if (sr.turns == 0) sr.timing.dispatch_ts = dispatched;

    CompletionRequest req;
    req.model = sr.model;
    req.messages = sr.convo;
    req.temperature = sr.spec->inference_params.temperature;
    req.max_tokens = sr.spec->inference_params.max_tokens;
    req.response_format = sr.spec->inference_params.response_format;
    if (sr.spec->execution_mode == ExecutionMode::AgentLoop) {
      for (const auto& tool : sr.spec->tools) req.tool_schemas.push_back(tool_wire_schema(tool));
    }
    req.metadata = RequestMetadata{qr.workflow_id, qr.stage_id, annotations_};

    auto self = shared_from_this();
    orch_.start_request(
        sr.backend_ref, std::move(req),
        [self, id, dispatched, sched_wait_ms](CompletionResponse resp, std::exception_ptr ep) {
          self->on_turn_complete(id, dispatched, sched_wait_ms, std::move(resp), ep);
        });
  }

  void on_turn_complete(const std::string& id, double dispatched, double sched_wait_ms,
                        CompletionResponse resp, std::exception_ptr ep) {
    if (finished_ || failed_.count(id)) return;
    auto& sr = runs_[id];
    if (ep) {
      std::string cause = "backend error";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        cause = e.what();
      }
      fail_stage(id, cause);
      return;
    }

    if (sr.turns == 0) sr.timing.first_token_ts = dispatched + resp.timing.ttft_ms;
    ++sr.turns;
    sr.usage.prompt_tokens += resp.usage.prompt_tokens;
    sr.usage.completion_tokens += resp.usage.completion_tokens;
    sr.usage.cached_prefix_tokens += resp.usage.cached_prefix_tokens;
    sr.last_served_prompt_tokens = resp.usage.prompt_tokens;

    // Samples measure from scheduler enqueue: queue wait covers both the
    // two-level queue and any backend-internal admission wait.
    ResponseTiming sampled = resp.timing;
    sampled.queue_ms += sched_wait_ms;
    sampled.ttft_ms += sched_wait_ms;
    sampled.total_ms += sched_wait_ms;
    orch_.emit_sample(CompletionSample{sr.backend_ref, sr.model, wf_.id(), id, sampled,
                                       resp.usage, dispatched, now()});

    sr.convo.push_back(Message{Role::Assistant, resp.content, {}, resp.tool_calls});

    const bool agent = sr.spec->execution_mode == ExecutionMode::AgentLoop;
    if (agent && !resp.tool_calls.empty()) {
      double tool_wait_ms = 0;
      for (const auto& call : resp.tool_calls) {
        const ToolRegistry* lookup = &sr.stage_tools;
        if (!lookup->contains(call.tool_name)) lookup = &orch_.tools();
        if (!lookup->contains(call.tool_name)) {
          fail_stage(id, "ToolNotFound: " + call.tool_name);
          return;
        }
        auto result = execute_tool(call, *lookup);
        tool_wait_ms += lookup->find(call.tool_name)->latency_ms;
        sr.convo.push_back(Message{Role::Tool, result.content, call.call_id, {}});
        sr.transcript.emplace_back(call, std::move(result));
      }
      if (sr.turns >= sr.spec->max_turns) {
        // Partial transcript is kept, flagged incomplete.
        sr.timing.complete_ts = now();
        results_[id] = make_result(sr, resp, /*incomplete=*/true);
        fail_stage(id, "MaxTurnsExceeded: turn limit " +
                           std::to_string(sr.spec->max_turns) + " reached");
        return;
      }
      // The request holds no backend slot during the tool wait; other queued
      // requests may be served in the meantime.
      auto self = shared_from_this();
      orch_.loop().schedule_in(tool_wait_ms, [self, id] { self->enqueue_turn(id); });
      return;
    }

    finalize_stage(id, resp);
  }

  StageResult make_result(const StageRun& sr, const CompletionResponse& last, bool incomplete) {
    StageResult result;
    result.stage_id = sr.spec->id;
    result.content = last.content;
    if (sr.spec->inference_params.response_format) {
      auto parsed = json::parse(last.content, nullptr, /*allow_exceptions=*/false);
      result.structured = parsed.is_discarded() ? json(last.content) : parsed;
    }
    result.tool_transcript = sr.transcript;
    result.usage = sr.usage;
    result.timing = sr.timing;
    result.incomplete = incomplete;
    return result;
  }

  void finalize_stage(const std::string& id, const CompletionResponse& last) {
    auto& sr = runs_[id];
    sr.timing.complete_ts = now();
    results_[id] = make_result(sr, last, false);
    in_flight_.erase(id);
    completed_.insert(id);
    emit(LifecycleSignal::stage_complete(wf_.id(), id, sr.backend_ref, sr.model,
                                         sr.last_served_prompt_tokens, now(),
                                         sr.spec->cache_policy_override));
    pump_ready();
  }

  void fail_stage(const std::string& id, const std::string& cause) {
    if (failed_.count(id)) return;
    auto& sr = runs_[id];
    in_flight_.erase(id);
    failed_.insert(id);
    errors_[id] = cause;
    log_to(orch_.log(), LogLevel::Warn, "workflow " + wf_.id() + ": stage " + id +
                                            " failed: " + cause);
    if (sr.start_signaled) {
      emit(LifecycleSignal::stage_complete(wf_.id(), id, sr.backend_ref, sr.model,
                                           sr.last_served_prompt_tokens, now(),
                                           sr.spec->cache_policy_override));
    }
    // Abort descendants; independent branches keep running.
    for (const auto& d : wf_.descendants(id)) {
      if (completed_.count(d) || failed_.count(d) || aborted_.count(d)) continue;
      aborted_.insert(d);
      errors_.emplace(d, "aborted: upstream stage " + id + " failed");
    }
    pump_ready();
  }

  void maybe_finish() {
    if (finished_) return;
    if (completed_.size() + failed_.size() + aborted_.size() != wf_.size()) return;
    finished_ = true;
    emit(LifecycleSignal::workflow_complete(wf_.id(), now()));

    ExecutionReport report;
    report.workflow_id = wf_.id();
    report.results = results_;
    report.failed = failed_;
    report.aborted = aborted_;
    report.errors = errors_;
    report.first_enqueue_ts = std::max(first_enqueue_ts_, 0.0);
    double last = report.first_enqueue_ts;
    for (const auto& [_, r] : report.results) last = std::max(last, r.timing.complete_ts);
    report.last_complete_ts = last;
    report.makespan_ms = last - report.first_enqueue_ts;
    for (const auto& [id, sr] : runs_) {
      if (!sr.backend_ref.empty()) report.routing[id] = sr.backend_ref;
    }
    if (done_) done_(std::move(report));
  }
};

}  // namespace

// ── Orchestrator ─────────────────────────────────────────────────────

Orchestrator::Orchestrator(EventLoop& loop, BackendRegistry& backends, ToolRegistry& tools,
                           SignalBus& bus, OrchestratorConfig config, LogFn log)
    : loop_(loop), backends_(backends), tools_(tools), bus_(bus), config_(std::move(config)),
      log_(std::move(log)) {
  policies_.register_stage_policy("sjf", sjf_by_prompt_estimate());
}

BackendQueue& Orchestrator::queue(const std::string& backend_ref) {
  auto it = queues_.find(backend_ref);
  if (it == queues_.end()) {
    it = queues_.emplace(backend_ref,
                         std::make_unique<BackendQueue>(backend_ref, &policies_, log_)).first;
    if (backends_.contains(backend_ref)) {
      // Refill whenever a slot frees, including completions of requests that
      // bypassed the queue (e.g. routing classifier calls).
      backends_.at(backend_ref).set_capacity_listener(
          [this, backend_ref] { pump(backend_ref); });
    }
  }
  return *it->second;
}

std::size_t Orchestrator::queue_depth(const std::string& backend_ref) const {
  auto it = queues_.find(backend_ref);
  return it == queues_.end() ? 0 : it->second->size();
}

void Orchestrator::pump(const std::string& backend_ref) {
  auto& q = queue(backend_ref);
  auto& backend = backends_.at(backend_ref);
  while (backend.has_capacity()) {
    auto r = q.dequeue_next();
    if (!r) break;
    auto dispatch = std::move(r->on_dispatch);
    if (dispatch) {
      dispatch(std::move(*r));
    } else {
      log_to(log_, LogLevel::Warn, "dropped request without dispatch continuation: " +
                                       r->request_id);
    }
  }
}

void Orchestrator::start_request(const std::string& backend_ref, CompletionRequest req,
                                 CompletionCallback cb) {
  // Re-pumping on completion is handled by the backend's capacity listener.
  backends_.at(backend_ref).complete(std::move(req), std::move(cb));
}

void Orchestrator::submit(ValidatedWorkflow wf, std::shared_ptr<StageRouter> router,
                          std::function<void(ExecutionReport)> done,
                          std::map<std::string, std::string> annotations) {
  auto run = std::make_shared<WorkflowRun>(*this, std::move(wf), std::move(router),
                                           std::move(done), std::move(annotations));
  loop_.post([run] { run->start(); });
}

void Orchestrator::submit_at(double at_ms, ValidatedWorkflow wf,
                             std::shared_ptr<StageRouter> router,
                             std::function<void(ExecutionReport)> done,
                             std::map<std::string, std::string> annotations) {
  auto run = std::make_shared<WorkflowRun>(*this, std::move(wf), std::move(router),
                                           std::move(done), std::move(annotations));
  loop_.schedule_at(at_ms, [run] { run->start(); });
}

ExecutionReport Orchestrator::execute_workflow(const ValidatedWorkflow& wf,
                                               const MappingPlan& plan) {
  return execute_workflow(wf, std::make_shared<PlanRouter>(plan));
}

ExecutionReport Orchestrator::execute_workflow(const ValidatedWorkflow& wf,
                                               std::shared_ptr<StageRouter> router) {
  std::optional<ExecutionReport> out;
  submit(wf, std::move(router), [&](ExecutionReport report) { out = std::move(report); });
  loop_.run_until_idle();
  if (!out) throw std::logic_error("workflow did not finish: " + wf.id());
  return std::move(*out);
}

}  // namespace stageflow
