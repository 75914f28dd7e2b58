#include "doctest.h"
#include "stageflow/scheduler.hpp"

#include <algorithm>
#include <random>
#include <set>

using namespace stageflow;

namespace {

QueuedRequest req(std::string id, std::string stage, double arrival, int priority = 0,
                  long long estimate = 0) {
  QueuedRequest r;
  r.request_id = std::move(id);
  r.stage_id = std::move(stage);
  r.arrival_ts = arrival;
  r.priority = priority;
  r.prompt_tokens_estimate = estimate;
  return r;
}

// Brute-force FCFS order: (arrival_ts, stage_id, insertion index).
struct OracleEntry {
  double arrival;
  std::string stage;
  std::size_t insertion;
  std::string id;
};

std::vector<std::string> fcfs_oracle(std::vector<OracleEntry> entries) {
  std::stable_sort(entries.begin(), entries.end(), [](const OracleEntry& a, const OracleEntry& b) {
    if (a.arrival != b.arrival) return a.arrival < b.arrival;
    if (a.stage != b.stage) return a.stage < b.stage;
    return a.insertion < b.insertion;
  });
  std::vector<std::string> ids;
  for (const auto& e : entries) ids.push_back(e.id);
  return ids;
}

}  // namespace

TEST_CASE("enqueue builds per-stage sub-queues in arrival order") {
  BackendQueue q("b");
  CHECK(q.empty());
  q.enqueue(req("r1", "A", 1));
  CHECK(q.stage_depth("A") == 1);
  q.enqueue(req("r2", "A", 2));
  q.enqueue(req("r3", "B", 2));
  CHECK(q.size() == 3);
  CHECK(q.stage_depth("A") == 2);
  CHECK(q.stage_depth("B") == 1);

  auto first = q.dequeue_next();
  REQUIRE(first);
  CHECK(first->request_id == "r1");
}

TEST_CASE("select_stage: fcfs picks the earliest head") {
  BackendQueue q("b");
  q.enqueue(req("rA", "A", 1));
  q.enqueue(req("rB", "B", 3));
  CHECK(q.select_stage("fcfs") == std::string("A"));
}

TEST_CASE("select_stage: priority picks the highest head, arrival breaks ties") {
  BackendQueue q("b");
  q.enqueue(req("rA", "A", 1, 5));
  q.enqueue(req("rB", "B", 3, 8));
  CHECK(q.select_stage("priority") == std::string("B"));

  BackendQueue tie("b2");
  tie.enqueue(req("rA", "A", 2, 8));
  tie.enqueue(req("rB", "B", 1, 8));
  CHECK(tie.select_stage("priority") == std::string("B"));  // earlier arrival wins
}

TEST_CASE("select_stage: empty queue and unknown policy") {
  BackendQueue q("b");
  CHECK_FALSE(q.select_stage("fcfs").has_value());
  q.enqueue(req("r", "A", 1));
  CHECK_THROWS_AS(q.select_stage("nonexistent"), UnknownPolicyError);
}

TEST_CASE("dequeue_next applies stage then request policy and deletes empty sub-queues") {
  BackendQueue q("b");
  q.enqueue(req("r1", "A", 1));
  q.enqueue(req("r2", "A", 2));
  auto first = q.dequeue_next();
  REQUIRE(first);
  CHECK(first->request_id == "r1");
  CHECK(q.size() == 1);

  BackendQueue two("b2");
  two.enqueue(req("rA", "A", 5));
  two.enqueue(req("rB", "B", 2));
  CHECK(two.dequeue_next()->request_id == "rB");  // min head arrival across sub-queues

  BackendQueue prio("b3");
  prio.set_policies("priority", "fcfs");
  prio.enqueue(req("rA", "A", 1, 2));
  prio.enqueue(req("rB", "B", 2, 9));
  CHECK(prio.dequeue_next()->request_id == "rB");  // max head priority
  CHECK(prio.dequeue_next()->request_id == "rA");
  CHECK_FALSE(prio.dequeue_next().has_value());
}

TEST_CASE("registering the bundled sjf example makes it selectable") {
  PolicyRegistry reg;
  reg.register_stage_policy("sjf", sjf_by_prompt_estimate());
  BackendQueue q("b", &reg);
  q.enqueue(req("big", "A", 1, 0, 900));
  q.enqueue(req("small", "B", 2, 0, 30));
  CHECK(q.select_stage("sjf") == std::string("B"));
  q.set_policies("sjf", "fcfs");
  CHECK(q.dequeue_next()->request_id == "small");
}

TEST_CASE("policy registry rejects reserved, duplicate, and unknown names") {
  PolicyRegistry reg;
  CHECK_THROWS_AS(reg.register_stage_policy("fcfs", sjf_by_prompt_estimate()),
                  ReservedPolicyError);
  CHECK_THROWS_AS(reg.register_request_policy("priority", [](auto) { return std::size_t{0}; }),
                  ReservedPolicyError);
  reg.register_stage_policy("mine", sjf_by_prompt_estimate());
  CHECK_THROWS_AS(reg.register_stage_policy("mine", sjf_by_prompt_estimate()),
                  DuplicatePolicyError);
  CHECK_THROWS_AS(reg.stage_policy("foo"), UnknownPolicyError);
}

TEST_CASE("conservation: every request dequeued exactly once under random interleaving") {
  std::mt19937 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    BackendQueue q("b");
    std::uniform_int_distribution<int> stage_pick(0, 4);
    std::uniform_real_distribution<double> coin(0, 1);
    std::multiset<std::string> enqueued, dequeued;
    double clock = 0;
    int made = 0;
    int total = 120;
    while (made < total || !q.empty()) {
      bool do_enqueue = made < total && (q.empty() || coin(rng) < 0.55);
      if (do_enqueue) {
        clock += coin(rng) < 0.3 ? 0.0 : 1.0;  // allow arrival ties
        auto id = "r" + std::to_string(made);
        q.enqueue(req(id, "s" + std::to_string(stage_pick(rng)), clock));
        enqueued.insert(id);
        ++made;
      } else {
        auto r = q.dequeue_next();
        REQUIRE(r);
        dequeued.insert(r->request_id);
      }
    }
    CHECK(enqueued == dequeued);
  }
}

TEST_CASE("fcfs dequeue order equals the brute-force global arrival sort") {
  std::mt19937 rng(20240201);
  for (int trial = 0; trial < 20; ++trial) {
    BackendQueue q("b");
    std::uniform_int_distribution<int> stage_pick(0, 9);
    std::uniform_int_distribution<int> gap(0, 2);
    std::vector<OracleEntry> entries;
    double clock = 0;
    std::map<std::string, std::size_t> insertion_within_stage;
    const int n = 200;
    for (int i = 0; i < n; ++i) {
      clock += gap(rng);  // frequent ties
      auto stage = "s" + std::to_string(stage_pick(rng));
      auto id = "r" + std::to_string(i);
      q.enqueue(req(id, stage, clock));
      entries.push_back(OracleEntry{clock, stage, insertion_within_stage[stage]++, id});
    }
    auto expect = fcfs_oracle(entries);
    std::vector<std::string> got;
    while (auto r = q.dequeue_next()) got.push_back(r->request_id);
    CHECK(got == expect);
  }
}

TEST_CASE("priority dominance: dequeued head beats every other sub-queue head") {
  std::mt19937 rng(99);
  BackendQueue q("b");
  q.set_policies("priority", "fcfs");
  std::uniform_int_distribution<int> stage_pick(0, 5);
  std::uniform_int_distribution<int> prio(0, 9);
  std::map<std::string, std::deque<int>> heads;  // mirror of sub-queue priorities
  double clock = 0;
  for (int i = 0; i < 150; ++i) {
    clock += 1;
    const auto stage = "s" + std::to_string(stage_pick(rng));
    const int p = prio(rng);
    q.enqueue(req("r" + std::to_string(i), stage, clock, p));
    heads[stage].push_back(p);
  }
  while (auto r = q.dequeue_next()) {
    for (const auto& [stage, queue] : heads) {
      if (queue.empty() || stage == r->stage_id) continue;
      CHECK(r->priority >= queue.front());
    }
    auto& mine = heads[r->stage_id];
    REQUIRE_FALSE(mine.empty());
    CHECK(mine.front() == r->priority);
    mine.pop_front();
  }
}

TEST_CASE("same-stage relative order survives stage policy changes") {
  BackendQueue q("b");
  for (int i = 0; i < 6; ++i) {
    q.enqueue(req("a" + std::to_string(i), "A", i, i % 3));
    q.enqueue(req("b" + std::to_string(i), "B", i, (i + 1) % 3));
  }
  std::vector<std::string> order_a;
  int flips = 0;
  while (auto r = q.dequeue_next()) {
    if (r->stage_id == "A") order_a.push_back(r->request_id);
    q.set_policies(++flips % 2 ? "priority" : "fcfs", "fcfs");
  }
  CHECK(order_a == std::vector<std::string>{"a0", "a1", "a2", "a3", "a4", "a5"});
}
