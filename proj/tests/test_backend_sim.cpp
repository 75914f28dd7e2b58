#include "doctest.h"
#include "stageflow/simulated_backend.hpp"

#include <random>

#include "stageflow/templates.hpp"
#include "test_support.hpp"

using namespace stageflow;
using namespace stageflow::test;

namespace {

SimulatedBackendConfig sim_config(double prefill, double decode, double overhead = 0,
                                  int concurrency = 1, long long capacity = 1'000'000) {
  SimulatedBackendConfig cfg;
  cfg.prefill_ms_per_token = prefill;
  cfg.decode_ms_per_token = decode;
  cfg.fixed_overhead_ms = overhead;
  cfg.max_concurrency = concurrency;
  cfg.cache_capacity_tokens = capacity;
  return cfg;
}

CompletionRequest request_with_tokens(long long tokens, const std::string& workflow = "w",
                                      const std::string& stage = "s") {
  CompletionRequest req;
  req.model = "m";
  req.messages = make_user_context(synthetic_prompt(tokens));
  req.metadata.workflow_id = workflow;
  req.metadata.stage_id = stage;
  return req;
}

}  // namespace

TEST_CASE("whitespace tokenizer") {
  CHECK(count_tokens("fix the bug") == 3);
  CHECK(count_tokens("") == 0);
  CHECK(count_tokens("a  b\nc") == 3);
  CHECK(count_tokens("  leading and trailing \t ") == 3);
  CHECK(tokenize_whitespace("a  b\nc") == std::vector<std::string>{"a", "b", "c"});
}

TEST_CASE("cold completion arithmetic: P=120 O=30 prefill=2 decode=20") {
  EventLoop loop;
  auto cfg = sim_config(2, 20);
  cfg.output = OutputRule::constant(30);
  SimulatedBackend sim(loop, sim_descriptor("b"), cfg);

  auto resp = complete_blocking(sim, loop, request_with_tokens(120));
  CHECK(resp.timing.queue_ms == 0.0);
  CHECK(resp.timing.ttft_ms == 240.0);
  CHECK(resp.timing.total_ms == 840.0);
  CHECK(resp.usage.prompt_tokens == 120);
  CHECK(resp.usage.completion_tokens == 30);
  CHECK(resp.usage.cached_prefix_tokens == 0);
  CHECK(loop.now_ms() == 840.0);
}

TEST_CASE("warm completion: 100 of 120 tokens cached gives ttft 40") {
  EventLoop loop;
  auto cfg = sim_config(2, 20);
  cfg.output = OutputRule::constant(0);
  SimulatedBackend sim(loop, sim_descriptor("b"), cfg);

  auto first = complete_blocking(sim, loop, request_with_tokens(100));
  CHECK(first.usage.cached_prefix_tokens == 0);
  CHECK(sim.pinned_token_count("w") == 100);

  auto second = complete_blocking(sim, loop, request_with_tokens(120));
  CHECK(second.usage.cached_prefix_tokens == 100);
  CHECK(second.timing.ttft_ms == 40.0);
}

TEST_CASE("zero-prefill request: ttft = queue + overhead") {
  EventLoop loop;
  auto cfg = sim_config(2, 20, /*overhead=*/7);
  cfg.output = OutputRule::constant(0);
  SimulatedBackend sim(loop, sim_descriptor("b"), cfg);
  CompletionRequest req;
  req.model = "m";
  req.messages = {Message{Role::User, "", {}, {}}};
  auto resp = complete_blocking(sim, loop, std::move(req));
  CHECK(resp.usage.prompt_tokens == 0);
  CHECK(resp.timing.ttft_ms == 7.0);
}

TEST_CASE("prefix_match is the longest common prefix") {
  EventLoop loop;
  SimulatedBackend sim(loop, sim_descriptor("b"), sim_config(1, 1));
  CompletionRequest pin;
  pin.model = "m";
  pin.messages = make_user_context("a b c");
  pin.metadata.workflow_id = "w";
  complete_blocking(sim, loop, std::move(pin));

  std::vector<std::string> extended{"a", "b", "c", "d", "e"};
  CHECK(sim.prefix_match("w", std::span<const std::string>(extended)) == 3);
  std::vector<std::string> unrelated{"x", "y"};
  CHECK(sim.prefix_match("w", std::span<const std::string>(unrelated)) == 0);
  CHECK(sim.prefix_match("other", std::span<const std::string>(extended)) == 0);
}

TEST_CASE("flush frees pinned tokens and resets matches") {
  EventLoop loop;
  SimulatedBackend sim(loop, sim_descriptor("b"), sim_config(1, 1, 0, 1, 1000));
  complete_blocking(sim, loop, request_with_tokens(500, "w1"));
  CHECK(sim.occupancy_tokens() == 500);
  CHECK(sim.cache_utilization() == doctest::Approx(0.5));

  CHECK(sim.flush(FlushScope::workflow("w2")) == 0);  // nothing pinned for w2
  CHECK(sim.flush(FlushScope::workflow("w1")) == 500);
  CHECK(sim.occupancy_tokens() == 0);
  auto again = complete_blocking(sim, loop, request_with_tokens(500, "w1"));
  CHECK(again.usage.cached_prefix_tokens == 0);  // flush-then-cold

  complete_blocking(sim, loop, request_with_tokens(300, "w2"));
  complete_blocking(sim, loop, request_with_tokens(200, "w3"));
  CHECK(sim.flush(FlushScope::everything()) == 1000);
  CHECK(sim.occupancy_tokens() == 0);
}

TEST_CASE("cache utilization is occupancy over capacity") {
  EventLoop loop;
  SimulatedBackend sim(loop, sim_descriptor("b"), sim_config(1, 1, 0, 1, 1000));
  CHECK(sim.cache_utilization() == 0.0);
  complete_blocking(sim, loop, request_with_tokens(850, "w"));
  CHECK(sim.cache_utilization() == doctest::Approx(0.85));
  complete_blocking(sim, loop, request_with_tokens(1000, "w"));
  CHECK(sim.cache_utilization() == 1.0);
}

TEST_CASE("capacity overflow leaves the old pin and counts a rejection") {
  EventLoop loop;
  SimulatedBackend sim(loop, sim_descriptor("b"), sim_config(1, 1, 0, 1, 100));
  complete_blocking(sim, loop, request_with_tokens(60, "w1"));
  CHECK(sim.occupancy_tokens() == 60);
  auto resp = complete_blocking(sim, loop, request_with_tokens(80, "w2"));
  CHECK(resp.usage.cached_prefix_tokens == 0);  // still served
  CHECK(sim.occupancy_tokens() == 60);          // w2 not pinned
  CHECK(sim.pinned_token_count("w2") == 0);
  CHECK(sim.capacity_rejections() == 1);
}

TEST_CASE("warm-equals-delta: extending a served context prefills only the delta") {
  EventLoop loop;
  auto cfg = sim_config(3, 5, 11);
  cfg.output = OutputRule::constant(4);
  SimulatedBackend sim(loop, sim_descriptor("b"), cfg);

  complete_blocking(sim, loop, request_with_tokens(200, "w"));
  auto resp = complete_blocking(sim, loop, request_with_tokens(200 + 37, "w"));
  CHECK(resp.usage.cached_prefix_tokens == 200);
  CHECK(resp.timing.ttft_ms == doctest::Approx(11 + 3 * 37).epsilon(1e-12));
}

TEST_CASE("latency monotonicity in cache hits and output length") {
  std::mt19937 rng(4242);
  std::uniform_int_distribution<long long> p_dist(10, 400);
  for (int trial = 0; trial < 30; ++trial) {
    const long long p = p_dist(rng);
    const long long m1 = std::uniform_int_distribution<long long>(0, p)(rng);
    const long long m2 = std::uniform_int_distribution<long long>(m1, p)(rng);
    const long long o1 = std::uniform_int_distribution<long long>(0, 100)(rng);
    const long long o2 = o1 + std::uniform_int_distribution<long long>(1, 50)(rng);

    auto run = [&](long long matched, long long out) {
      EventLoop loop;
      auto cfg = sim_config(2, 3);
      cfg.output = OutputRule::constant(out);
      SimulatedBackend sim(loop, sim_descriptor("b"), cfg);
      if (matched > 0) {
        auto warm = request_with_tokens(matched, "w");
        complete_blocking(sim, loop, std::move(warm));
      }
      return complete_blocking(sim, loop, request_with_tokens(p, "w"));
    };

    auto low_match = run(m1, o1);
    auto high_match = run(m2, o1);
    CHECK(high_match.timing.ttft_ms <= low_match.timing.ttft_ms);

    auto short_out = run(m1, o1);
    auto long_out = run(m1, o2);
    CHECK(long_out.timing.total_ms > short_out.timing.total_ms);
  }
}

TEST_CASE("occupancy equals the sum of pinned lengths under serve/flush churn") {
  std::mt19937 rng(77);
  EventLoop loop;
  SimulatedBackend sim(loop, sim_descriptor("b"), sim_config(1, 1, 0, 1, 2000));
  std::vector<std::string> workflows{"w0", "w1", "w2", "w3"};
  for (int step = 0; step < 60; ++step) {
    const auto& w = workflows[std::uniform_int_distribution<int>(0, 3)(rng)];
    if (std::uniform_real_distribution<double>(0, 1)(rng) < 0.7) {
      complete_blocking(sim, loop,
                        request_with_tokens(std::uniform_int_distribution<int>(1, 400)(rng), w));
    } else {
      sim.flush(FlushScope::workflow(w));
    }
    long long total = 0;
    for (const auto& each : workflows) total += sim.pinned_token_count(each);
    CHECK(total == sim.occupancy_tokens());
    CHECK(sim.occupancy_tokens() <= sim.capacity_tokens());
  }
}

TEST_CASE("backend admission is FCFS within max_concurrency slots") {
  EventLoop loop;
  auto cfg = sim_config(1, 1);  // 1 slot
  cfg.output = OutputRule::constant(0);
  SimulatedBackend sim(loop, sim_descriptor("b"), cfg);

  std::vector<double> queue_ms;
  for (int i = 0; i < 2; ++i) {
    sim.complete(request_with_tokens(100, "w" + std::to_string(i)),
                 [&](CompletionResponse r, std::exception_ptr) {
                   queue_ms.push_back(r.timing.queue_ms);
                 });
  }
  CHECK_FALSE(sim.has_capacity());
  loop.run_until_idle();
  REQUIRE(queue_ms.size() == 2);
  CHECK(queue_ms[0] == 0.0);
  CHECK(queue_ms[1] == 100.0);  // waited for the first 100-token prefill
}

TEST_CASE("scripted replies are keyed by stage and turn") {
  EventLoop loop;
  auto cfg = sim_config(1, 1);
  cfg.output = OutputRule::scripted([](const CompletionRequest& req, int turn) {
    if (turn == 0) {
      return ScriptedReply{"", {ToolCall{"probe", json::object(), "c1"}}};
    }
    return ScriptedReply{req.metadata.stage_id + " done at turn " + std::to_string(turn), {}};
  });
  SimulatedBackend sim(loop, sim_descriptor("b"), cfg);

  auto first = complete_blocking(sim, loop, request_with_tokens(5, "w", "alpha"));
  REQUIRE(first.tool_calls.size() == 1);
  CHECK(first.tool_calls[0].tool_name == "probe");
  CHECK(first.usage.completion_tokens == 1);  // tool-call turns cost one token

  auto second = complete_blocking(sim, loop, request_with_tokens(5, "w", "alpha"));
  CHECK(second.content == "alpha done at turn 1");
  auto other_stage = complete_blocking(sim, loop, request_with_tokens(5, "w", "beta"));
  REQUIRE(other_stage.tool_calls.size() == 1);  // independent turn counter
}

TEST_CASE("annotation-driven output rules") {
  EventLoop loop;
  auto cfg = sim_config(1, 1);
  cfg.output = OutputRule::from_annotation("expected_output_tokens", 3);
  SimulatedBackend sim(loop, sim_descriptor("b"), cfg);
  auto req = request_with_tokens(5);
  req.metadata.annotations["expected_output_tokens"] = "12";
  CHECK(complete_blocking(sim, loop, std::move(req)).usage.completion_tokens == 12);
  CHECK(complete_blocking(sim, loop, request_with_tokens(5)).usage.completion_tokens == 3);

  auto echo_cfg = sim_config(1, 1);
  echo_cfg.output = OutputRule::echo_annotation("complexity");
  SimulatedBackend echo(loop, sim_descriptor("b2"), echo_cfg);
  auto labeled = request_with_tokens(5);
  labeled.metadata.annotations["complexity"] = "simple";
  CHECK(complete_blocking(echo, loop, std::move(labeled)).content == "simple");
}

TEST_CASE("max_tokens caps the reply") {
  EventLoop loop;
  auto cfg = sim_config(1, 1);
  cfg.output = OutputRule::constant(50);
  SimulatedBackend sim(loop, sim_descriptor("b"), cfg);
  auto req = request_with_tokens(5);
  req.max_tokens = 8;
  auto resp = complete_blocking(sim, loop, std::move(req));
  CHECK(resp.usage.completion_tokens == 8);
  CHECK(count_tokens(resp.content) == 8);
}
