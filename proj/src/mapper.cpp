#include "stageflow/mapper.hpp"

#include <algorithm>
#include <cmath>

namespace stageflow {

MappingPlan plan_explicit(const ValidatedWorkflow& wf, const BackendRegistry& registry) {
  MappingPlan plan;
  for (const auto& id : wf.stage_ids()) {
    const auto& stage = wf.stage(id);
    if (!registry.contains(stage.backend_ref)) throw UnknownBackendError(stage.backend_ref);
    plan.assignments[id] = stage.backend_ref;
    plan.provenance[id] = MappingProvenance{MappingProvenance::Kind::Explicit, {}, 0};
  }
  return plan;
}

std::pair<std::string, double> map_threshold(const Context& request, const ScoreFn& score_fn,
                                             double threshold, const std::string& light,
                                             const std::string& heavy) {
  if (light == heavy) throw std::invalid_argument("light and heavy refs must differ");
  if (!std::isfinite(threshold)) throw std::invalid_argument("threshold must be finite");
  double score = 0;
  try {
    score = score_fn(request);
  } catch (const std::exception& e) {
    throw ScoreFnFailedError(e.what());
  }
  return {score <= threshold ? light : heavy, score};
}

const char* const kDefaultClassifierPrompt =
    "Classify the complexity of the request below. Reply with exactly one "
    "word: simple or complex.\n\nRequest:\n{request}";

std::string build_classifier_prompt(const Context& request, const std::string& prompt_template) {
  const std::string placeholder = "{request}";
  std::string prompt = prompt_template;
  auto pos = prompt.find(placeholder);
  if (pos == std::string::npos) {
    prompt += "\n" + context_text(request);
  } else {
    prompt.replace(pos, placeholder.size(), context_text(request));
  }
  return prompt;
}

ComplexityLabel parse_complexity_label(const std::string& reply) {
  std::string lower(reply.size(), '\0');
  std::transform(reply.begin(), reply.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  auto simple_pos = lower.find("simple");
  auto complex_pos = lower.find("complex");

  ComplexityLabel label;
  label.raw_classifier_output = reply;
  if (simple_pos == std::string::npos && complex_pos == std::string::npos) {
    label.value = Complexity::Complex;
    label.parse_failed = true;
    return label;
  }
  label.value = simple_pos < complex_pos ? Complexity::Simple : Complexity::Complex;
  return label;
}

void map_one_bit_async(const Context& request, Backend& classifier, const std::string& light,
                       const std::string& heavy,
                       std::function<void(std::string, ComplexityLabel)> done,
                       const std::string& prompt_template, RequestMetadata metadata) {
  CompletionRequest req;
  req.model = classifier.descriptor().model;
  req.messages = make_user_context(build_classifier_prompt(request, prompt_template));
  req.temperature = 0.0;
  req.max_tokens = 8;
  // Control-plane call: annotations travel, but no workflow or stage
  // identity, so the reply isn't confused with a stage request and the
  // one-shot prompt never pins cache.
  req.metadata = std::move(metadata);
  req.metadata.workflow_id.clear();
  req.metadata.stage_id.clear();

  classifier.complete(std::move(req), [done = std::move(done), light, heavy](
                                          CompletionResponse resp, std::exception_ptr ep) {
    if (ep) {
      ComplexityLabel label;
      label.value = Complexity::Complex;
      label.classifier_failed = true;
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        label.raw_classifier_output = e.what();
      }
      done(heavy, std::move(label));
      return;
    }
    auto label = parse_complexity_label(resp.content);
    done(label.value == Complexity::Simple ? light : heavy, std::move(label));
  });
}

std::pair<std::string, ComplexityLabel> map_one_bit(const Context& request, Backend& classifier,
                                                    EventLoop& loop, const std::string& light,
                                                    const std::string& heavy,
                                                    const std::string& prompt_template,
                                                    RequestMetadata metadata) {
  std::pair<std::string, ComplexityLabel> out;
  map_one_bit_async(
      request, classifier, light, heavy,
      [&](std::string ref, ComplexityLabel label) { out = {std::move(ref), std::move(label)}; },
      prompt_template, std::move(metadata));
  loop.run_until_idle();
  return out;
}

}  // namespace stageflow
