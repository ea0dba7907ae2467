#include "cacheproc/trace.h"

#include <fstream>

#include "cacheproc/common.h"
#include "cacheproc/vocab.h"

namespace cacheproc {

std::vector<Span> segment_steps(const std::vector<int>& tokens, size_t prompt_len) {
    check(prompt_len <= tokens.size(),
          "segment_steps: prompt_len " + std::to_string(prompt_len) + " exceeds " +
              std::to_string(tokens.size()) + " tokens");
    std::vector<Span> spans;
    size_t start = prompt_len;
    for (size_t i = prompt_len; i < tokens.size(); ++i) {
        if (tokens[i] == Vocab::kNewline) {
            spans.emplace_back(start, i + 1);
            start = i + 1;
        }
    }
    if (start < tokens.size()) {
        spans.emplace_back(start, tokens.size());
    }
    return spans;
}

void Trace::validate(int vocab_size) const {
    check(prompt_len <= tokens.size(), "trace: prompt_len out of range");
    for (int t : tokens) {
        check(t >= 0 && t < vocab_size,
              "trace: token id " + std::to_string(t) + " outside vocabulary of size " +
                  std::to_string(vocab_size));
    }
    const auto expect = segment_steps(tokens, prompt_len);
    check(step_spans == expect, "trace: step_spans disagree with NEWLINE positions");
}

nlohmann::json trace_to_json(const Trace& t) {
    nlohmann::json j;
    j["tokens"] = t.tokens;
    j["prompt_len"] = t.prompt_len;
    auto spans = nlohmann::json::array();
    for (const Span& s : t.step_spans) {
        spans.push_back({s.first, s.second});
    }
    j["step_spans"] = spans;
    j["meta"] = t.meta;
    return j;
}

Trace trace_from_json(const nlohmann::json& j) {
    check(j.contains("tokens") && j.contains("prompt_len") && j.contains("step_spans"),
          "trace record is missing required fields");
    Trace t;
    t.tokens = j.at("tokens").get<std::vector<int>>();
    t.prompt_len = j.at("prompt_len").get<size_t>();
    for (const auto& s : j.at("step_spans")) {
        check(s.is_array() && s.size() == 2, "trace record has a malformed span");
        t.step_spans.emplace_back(s[0].get<size_t>(), s[1].get<size_t>());
    }
    if (j.contains("meta")) t.meta = j.at("meta");
    return t;
}

std::vector<Trace> load_traces(const std::string& path, int vocab_size) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "load_traces: cannot open '" + path + "'");
    std::vector<Trace> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            Trace t = trace_from_json(nlohmann::json::parse(line));
            t.validate(vocab_size);
            out.push_back(std::move(t));
        } catch (const std::exception& e) {
            throw std::runtime_error("load_traces: " + path + ":" + std::to_string(lineno) +
                                     ": " + e.what());
        }
    }
    return out;
}

void save_traces(const std::string& path, const std::vector<Trace>& traces) {
    std::ofstream f(path, std::ios::binary);
    check(f.good(), "save_traces: cannot open '" + path + "' for writing");
    for (const Trace& t : traces) {
        f << trace_to_json(t).dump() << "\n";
    }
    check(f.good(), "save_traces: write to '" + path + "' failed");
}

}  // namespace cacheproc
