#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace cacheproc {

using Span = std::pair<size_t, size_t>;  // half-open [start, end)

// A tokenized reasoning trajectory. step_spans partition the completion
// [prompt_len, tokens.size()); every span except possibly the last ends with
// the NEWLINE token.
struct Trace {
    std::vector<int> tokens;
    size_t prompt_len = 0;
    std::vector<Span> step_spans;
    nlohmann::json meta = nlohmann::json::object();

    void validate(int vocab_size) const;
};

// Splits the completion after each NEWLINE; a trailing span without NEWLINE is
// allowed (the final answer line).
std::vector<Span> segment_steps(const std::vector<int>& tokens, size_t prompt_len);

std::vector<Trace> load_traces(const std::string& path, int vocab_size);
void save_traces(const std::string& path, const std::vector<Trace>& traces);

// Single-record JSON used by the trace file format (one object per line).
nlohmann::json trace_to_json(const Trace& t);
Trace trace_from_json(const nlohmann::json& j);

}  // namespace cacheproc
