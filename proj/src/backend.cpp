#include "stageflow/backend.hpp"

#include <cctype>

namespace stageflow {

const char* backend_kind_name(BackendKind kind) {
  return kind == BackendKind::Simulated ? "simulated" : "http";
}

const char* backend_tier_name(BackendTier tier) {
  return tier == BackendTier::Light ? "light" : "heavy";
}

void BackendRegistry::add(std::shared_ptr<Backend> backend) {
  const auto& desc = backend->descriptor();
  if (entries_.count(desc.ref)) {
    throw BackendError("backend ref already registered: " + desc.ref);
  }
  entries_[desc.ref] = Entry{desc, std::move(backend)};
}

void BackendRegistry::add_descriptor(BackendDescriptor descriptor) {
  if (entries_.count(descriptor.ref)) {
    throw BackendError("backend ref already registered: " + descriptor.ref);
  }
  auto ref = descriptor.ref;
  entries_[ref] = Entry{std::move(descriptor), nullptr};
}

bool BackendRegistry::contains(const std::string& ref) const {
  return entries_.count(ref) > 0;
}

const BackendDescriptor& BackendRegistry::descriptor(const std::string& ref) const {
  auto it = entries_.find(ref);
  if (it == entries_.end()) throw UnknownBackendError(ref);
  return it->second.descriptor;
}

Backend& BackendRegistry::at(const std::string& ref) const {
  auto it = entries_.find(ref);
  if (it == entries_.end() || !it->second.backend) throw UnknownBackendError(ref);
  return *it->second.backend;
}

std::shared_ptr<Backend> BackendRegistry::get(const std::string& ref) const {
  auto it = entries_.find(ref);
  if (it == entries_.end() || !it->second.backend) throw UnknownBackendError(ref);
  return it->second.backend;
}

std::vector<std::string> BackendRegistry::refs() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [ref, _] : entries_) out.push_back(ref);
  return out;
}

std::vector<std::string> tokenize_whitespace(std::string_view text) {
  std::vector<std::string> tokens;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t start = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i > start) tokens.emplace_back(text.substr(start, i - start));
  }
  return tokens;
}

long long count_tokens(std::string_view text) {
  long long n = 0;
  bool in_token = false;
  for (char c : text) {
    bool space = std::isspace(static_cast<unsigned char>(c));
    if (!space && !in_token) ++n;
    in_token = !space;
  }
  return n;
}

std::vector<std::string> context_token_sequence(const Context& ctx) {
  std::vector<std::string> tokens;
  for (const auto& m : ctx) {
    auto t = tokenize_whitespace(m.content);
    tokens.insert(tokens.end(), std::make_move_iterator(t.begin()),
                  std::make_move_iterator(t.end()));
  }
  return tokens;
}

long long count_context_tokens(const Context& ctx) {
  long long n = 0;
  for (const auto& m : ctx) n += count_tokens(m.content);
  return n;
}

CompletionResponse complete_blocking(Backend& backend, EventLoop& loop, CompletionRequest req) {
  std::optional<CompletionResponse> out;
  std::exception_ptr err;
  backend.complete(std::move(req), [&](CompletionResponse resp, std::exception_ptr ep) {
    if (ep) {
      err = ep;
    } else {
      out = std::move(resp);
    }
  });
  loop.run_until_idle();
  if (err) std::rethrow_exception(err);
  if (!out) throw BackendError("completion never resolved");
  return std::move(*out);
}

}  // namespace stageflow
