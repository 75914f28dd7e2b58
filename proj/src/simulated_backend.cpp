#include "stageflow/simulated_backend.hpp"

#include <algorithm>

namespace stageflow {

namespace {

std::string placeholder_text(long long tokens) {
  std::string out;
  for (long long i = 0; i < tokens; ++i) {
    if (i) out += ' ';
    out += "out" + std::to_string(i);
  }
  return out;
}

}  // namespace

SimulatedBackend::SimulatedBackend(EventLoop& loop, BackendDescriptor descriptor,
                                   SimulatedBackendConfig config, LogFn log)
    : loop_(loop), descriptor_(std::move(descriptor)), config_(std::move(config)),
      log_(std::move(log)) {
  if (config_.max_concurrency < 1) throw BackendError("max_concurrency must be >= 1");
  if (config_.cache_capacity_tokens <= 0) throw BackendError("cache capacity must be positive");
  if (config_.prefill_ms_per_token <= 0 || config_.decode_ms_per_token <= 0) {
    throw BackendError("latency parameters must be positive");
  }
}

bool SimulatedBackend::has_capacity() const {
  return busy_ + static_cast<int>(pending_.size()) < config_.max_concurrency;
}

void SimulatedBackend::complete(CompletionRequest req, CompletionCallback cb) {
  ++stats_.completions;
  pending_.push_back(Pending{std::move(req), std::move(cb), loop_.now_ms()});
  pump();
}

void SimulatedBackend::pump() {
  while (busy_ < config_.max_concurrency && !pending_.empty()) {
    auto item = std::move(pending_.front());
    pending_.pop_front();
    start(std::move(item));
  }
}

ScriptedReply SimulatedBackend::make_reply(const CompletionRequest& req, int turn,
                                           long long /*prompt_tokens*/) const {
  const auto& anns = req.metadata.annotations;
  switch (config_.output.kind) {
    case OutputRule::Kind::Scripted:
      return config_.output.script(req, turn);
    case OutputRule::Kind::EchoAnnotation: {
      auto it = anns.find(config_.output.annotation_key);
      return {it == anns.end() ? std::string{} : it->second, {}};
    }
    case OutputRule::Kind::FromAnnotation: {
      long long n = config_.output.constant_tokens;
      if (auto it = anns.find(config_.output.annotation_key); it != anns.end()) {
        n = std::max(0LL, std::stoll(it->second));
      }
      return {placeholder_text(n), {}};
    }
    case OutputRule::Kind::Constant:
    default:
      return {placeholder_text(config_.output.constant_tokens), {}};
  }
}

void SimulatedBackend::start(Pending item) {
  const double now = loop_.now_ms();
  const double queue_ms = now - item.arrival_ms;

  auto prompt_tokens = context_token_sequence(item.req.messages);
  const long long prompt_count = static_cast<long long>(prompt_tokens.size());
  const long long matched =
      prefix_match(item.req.metadata.workflow_id, std::span<const std::string>(prompt_tokens));

  const auto turn_key = std::make_pair(item.req.metadata.workflow_id, item.req.metadata.stage_id);
  const int turn = turn_counts_[turn_key]++;

  auto reply = make_reply(item.req, turn, prompt_count);
  long long output_count = count_tokens(reply.content);
  if (item.req.max_tokens > 0 && output_count > item.req.max_tokens) {
    auto kept = tokenize_whitespace(reply.content);
    kept.resize(static_cast<std::size_t>(item.req.max_tokens));
    std::string truncated;
    for (const auto& t : kept) {
      if (!truncated.empty()) truncated += ' ';
      truncated += t;
    }
    reply.content = std::move(truncated);
    output_count = item.req.max_tokens;
  }
  if (output_count == 0 && !reply.tool_calls.empty()) output_count = 1;

  const double prefill_ms =
      config_.fixed_overhead_ms +
      config_.prefill_ms_per_token * static_cast<double>(prompt_count - matched);
  const double decode_ms = config_.decode_ms_per_token * static_cast<double>(output_count);

  CompletionResponse resp;
  resp.content = std::move(reply.content);
  resp.tool_calls = std::move(reply.tool_calls);
  resp.usage.prompt_tokens = prompt_count;
  resp.usage.completion_tokens = output_count;
  resp.usage.cached_prefix_tokens = matched;
  resp.timing.queue_ms = queue_ms;
  resp.timing.ttft_ms = queue_ms + prefill_ms;
  resp.timing.total_ms = resp.timing.ttft_ms + decode_ms;

  ++busy_;
  stats_.prompt_tokens += prompt_count;
  stats_.completion_tokens += output_count;
  stats_.cached_prefix_tokens += matched;

  auto workflow_id = item.req.metadata.workflow_id;
  auto cb = std::move(item.cb);
  loop_.schedule_in(prefill_ms + decode_ms,
                    [this, resp = std::move(resp), cb = std::move(cb),
                     workflow_id = std::move(workflow_id),
                     prompt_tokens = std::move(prompt_tokens)]() mutable {
                      if (!workflow_id.empty()) {
                        pin_prompt(workflow_id, std::move(prompt_tokens));
                      }
                      --busy_;
                      pump();
                      cb(std::move(resp), nullptr);
                      notify_capacity();
                    });
}

void SimulatedBackend::pin_prompt(const std::string& workflow_id,
                                  std::vector<std::string> tokens) {
  long long old_len = 0;
  if (auto it = pins_.find(workflow_id); it != pins_.end()) {
    old_len = static_cast<long long>(it->second.size());
  }
  const long long new_len = static_cast<long long>(tokens.size());
  if (occupancy_ - old_len + new_len > config_.cache_capacity_tokens) {
    ++capacity_rejections_;
    log_to(log_, LogLevel::Warn,
           "sim backend " + descriptor_.ref + ": cache capacity exceeded, prefix for workflow " +
               workflow_id + " not pinned");
    return;
  }
  occupancy_ += new_len - old_len;
  pins_[workflow_id] = std::move(tokens);
}

long long SimulatedBackend::prefix_match(const std::string& workflow_id,
                                         std::span<const std::string> tokens) const {
  auto it = pins_.find(workflow_id);
  if (it == pins_.end()) return 0;
  const auto& pinned = it->second;
  std::size_t n = std::min(pinned.size(), tokens.size());
  std::size_t i = 0;
  while (i < n && pinned[i] == tokens[i]) ++i;
  return static_cast<long long>(i);
}

long long SimulatedBackend::pinned_token_count(const std::string& workflow_id) const {
  auto it = pins_.find(workflow_id);
  return it == pins_.end() ? 0 : static_cast<long long>(it->second.size());
}

long long SimulatedBackend::flush(const FlushScope& scope) {
  ++stats_.flush_calls;
  long long freed = 0;
  if (scope.all) {
    freed = occupancy_;
    pins_.clear();
    occupancy_ = 0;
    return freed;
  }
  if (auto it = pins_.find(scope.workflow_id); it != pins_.end()) {
    freed = static_cast<long long>(it->second.size());
    occupancy_ -= freed;
    pins_.erase(it);
  }
  return freed;
}

double SimulatedBackend::cache_utilization() const {
  return static_cast<double>(occupancy_) / static_cast<double>(config_.cache_capacity_tokens);
}

bool SimulatedBackend::preserve(const std::string& workflow_id) {
  ++stats_.preserve_calls;
  return pins_.count(workflow_id) > 0;
}

}  // namespace stageflow
