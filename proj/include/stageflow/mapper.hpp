#pragma once

#include "stageflow/backend.hpp"
#include "stageflow/workflow.hpp"

namespace stageflow {

struct MappingProvenance {
  enum class Kind { Explicit, OneBit, Threshold };
  Kind kind = Kind::Explicit;
  std::string label;  // OneBit: parsed classifier label or failure note
  double score = 0;   // Threshold: the computed score
};

struct MappingPlan {
  std::map<std::string, std::string> assignments;  // stage_id -> backend ref
  std::map<std::string, MappingProvenance> provenance;
};

/// Maps every stage to its declared backend_ref.
MappingPlan plan_explicit(const ValidatedWorkflow& wf, const BackendRegistry& registry);

// ── Threshold routing ────────────────────────────────────────────────
using ScoreFn = std::function<double(const Context&)>;

class ScoreFnFailedError : public std::runtime_error {
 public:
  explicit ScoreFnFailedError(const std::string& cause)
      : std::runtime_error("score function failed: " + cause) {}
};

/// Light iff score <= threshold (light on ties). Returns (ref, score).
std::pair<std::string, double> map_threshold(const Context& request, const ScoreFn& score_fn,
                                             double threshold, const std::string& light,
                                             const std::string& heavy);

// ── One-bit LLM routing ──────────────────────────────────────────────
enum class Complexity { Simple, Complex };

struct ComplexityLabel {
  Complexity value = Complexity::Complex;
  std::string raw_classifier_output;
  bool parse_failed = false;       // no label found in the reply
  bool classifier_failed = false;  // classifier call itself failed
};

/// Fixed default classification prompt; "{request}" is replaced with the
/// request text. Overridable per deployment for reproducible routing.
extern const char* const kDefaultClassifierPrompt;

std::string build_classifier_prompt(const Context& request,
                                    const std::string& prompt_template = kDefaultClassifierPrompt);

/// Scans the reply left to right, case-insensitively, for "simple" or
/// "complex"; the earliest occurrence wins. No match => parse_failed and the
/// fail-safe Complex label.
ComplexityLabel parse_complexity_label(const std::string& reply);

/// Issues exactly one classification call on `classifier` (expected to be the
/// light-tier backend) and routes Simple->light, Complex->heavy. Classifier
/// failure or an unparseable reply routes to heavy.
void map_one_bit_async(const Context& request, Backend& classifier, const std::string& light,
                       const std::string& heavy,
                       std::function<void(std::string ref, ComplexityLabel label)> done,
                       const std::string& prompt_template = kDefaultClassifierPrompt,
                       RequestMetadata metadata = {});

/// Blocking form for callers that own the loop (tests, one-off tools).
std::pair<std::string, ComplexityLabel> map_one_bit(
    const Context& request, Backend& classifier, EventLoop& loop, const std::string& light,
    const std::string& heavy, const std::string& prompt_template = kDefaultClassifierPrompt,
    RequestMetadata metadata = {});

}  // namespace stageflow
