#include "cacheproc/synth.h"

#include <unordered_set>

#include "cacheproc/common.h"
#include "cacheproc/rng.h"

namespace cacheproc {

namespace {
const std::vector<std::string> kKeywords = {"start", "add", "to", "ask", "ans", "=", ";", "x"};
constexpr int kDistractorVars = 6;

std::string var_name(int i) { return "y" + std::to_string(i + 1); }
}  // namespace

Vocab build_synth_vocab(const SynthTaskSpec& spec) {
    check(spec.modulus >= 2, "synth: modulus must be >= 2");
    check(spec.chain_length >= 1, "synth: chain length must be >= 1");
    const int needed = 5 + static_cast<int>(kKeywords.size()) + kDistractorVars + spec.modulus;
    check(needed <= spec.vocab_cap,
          "synth: vocabulary cap " + std::to_string(spec.vocab_cap) + " too small to encode " +
              std::to_string(spec.modulus) + " values (needs " + std::to_string(needed) + ")");
    Vocab v = Vocab::base();
    for (const auto& k : kKeywords) v.add(k);
    for (int i = 0; i < kDistractorVars; ++i) v.add(var_name(i));
    for (int i = 0; i < spec.modulus; ++i) v.add(std::to_string(i));
    return v;
}

Trace make_problem_trace(const Vocab& vocab, int modulus, int start_value,
                         const std::vector<std::pair<std::string, int>>& ordered_facts) {
    std::vector<int> toks;
    toks.push_back(Vocab::kBos);
    auto word = [&](const std::string& s) { toks.push_back(vocab.id(s)); };
    word("start");
    word("x");
    word("=");
    word(std::to_string(start_value));
    word(";");
    for (const auto& [var, delta] : ordered_facts) {
        word("add");
        word(std::to_string(delta));
        word("to");
        word(var);
        word(";");
    }
    word("ask");
    word("x");
    toks.push_back(Vocab::kNewline);
    const size_t prompt_len = toks.size();

    int value = start_value % modulus;
    for (const auto& [var, delta] : ordered_facts) {
        if (var != "x") continue;
        value = (value + delta) % modulus;
        word("x");
        word("=");
        word(std::to_string(value));
        toks.push_back(Vocab::kNewline);
    }
    word("ans");
    word(std::to_string(value));
    toks.push_back(Vocab::kEos);

    check(toks.size() <= kMaxTraceLen, "synth: trace exceeds the " +
                                           std::to_string(kMaxTraceLen) + " token limit");

    Trace t;
    t.tokens = std::move(toks);
    t.prompt_len = prompt_len;
    t.step_spans = segment_steps(t.tokens, prompt_len);
    t.meta["answer"] = "ans " + std::to_string(value);
    return t;
}

std::vector<Trace> generate_synthetic(const SynthTaskSpec& spec, size_t n, const Vocab& vocab) {
    check(spec.modulus >= 2, "synth: modulus must be >= 2");
    check(spec.chain_length >= 1, "synth: chain length must be >= 1");
    check(spec.distractors >= 0, "synth: distractor count must be >= 0");

    Rng rng(spec.seed);
    std::unordered_set<std::string> seen;
    std::vector<Trace> out;
    out.reserve(n);
    size_t attempts = 0;
    const size_t max_attempts = 100 * (n + 16);
    while (out.size() < n) {
        check(++attempts <= max_attempts,
              "synth: could not generate " + std::to_string(n) +
                  " distinct problems; task space too small");
        const int v0 = static_cast<int>(rng.uniform_u64(spec.modulus));
        std::vector<std::pair<std::string, int>> facts;
        for (int i = 0; i < spec.chain_length; ++i) {
            facts.emplace_back("x", static_cast<int>(rng.uniform_u64(spec.modulus)));
        }
        for (int i = 0; i < spec.distractors; ++i) {
            const int v = static_cast<int>(rng.uniform_u64(kDistractorVars));
            facts.emplace_back(var_name(v), static_cast<int>(rng.uniform_u64(spec.modulus)));
        }
        rng.shuffle(facts);
        Trace t = make_problem_trace(vocab, spec.modulus, v0, facts);

        std::string identity;
        for (size_t i = 0; i < t.prompt_len; ++i) identity += std::to_string(t.tokens[i]) + ",";
        if (!seen.insert(identity).second) continue;

        t.meta["id"] = out.size();
        out.push_back(std::move(t));
    }
    return out;
}

SynthSplits generate_splits(const SynthTaskSpec& spec, size_t n_train, size_t n_heldout,
                            const Vocab& vocab) {
    std::vector<Trace> all = generate_synthetic(spec, n_train + n_heldout, vocab);
    SynthSplits s;
    s.train.assign(all.begin(), all.begin() + n_train);
    s.heldout.assign(all.begin() + n_train, all.end());
    return s;
}

std::optional<std::string> expected_answer(const Vocab& vocab, const Trace& trace) {
    // Prompt grammar: <bos> start x = V ; (add D to VAR ;)* ask x \n
    const std::vector<int>& t = trace.tokens;
    size_t i = 0;
    auto want = [&](const std::string& sym) -> bool {
        if (i >= trace.prompt_len) return false;
        if (t[i] != vocab.id(sym)) return false;
        ++i;
        return true;
    };
    auto read_int = [&]() -> std::optional<int> {
        if (i >= trace.prompt_len) return std::nullopt;
        const std::string& s = vocab.symbol(t[i]);
        if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
            return std::nullopt;
        }
        ++i;
        return std::stoi(s);
    };

    if (i >= t.size() || t[i] != Vocab::kBos) return std::nullopt;
    ++i;
    if (!want("start") || !want("x") || !want("=")) return std::nullopt;
    auto v0 = read_int();
    if (!v0 || !want(";")) return std::nullopt;

    // Modulus is not spelled in the prompt; recover it from the vocab, whose
    // numeric symbols are exactly 0..m-1.
    int modulus = 0;
    while (vocab.has(std::to_string(modulus))) ++modulus;
    if (modulus < 2) return std::nullopt;

    int value = *v0 % modulus;
    while (i < trace.prompt_len && t[i] == vocab.id("add")) {
        ++i;
        auto delta = read_int();
        if (!delta || !want("to")) return std::nullopt;
        if (i >= trace.prompt_len) return std::nullopt;
        const std::string var = vocab.symbol(t[i]);
        ++i;
        if (!want(";")) return std::nullopt;
        if (var == "x") value = (value + *delta) % modulus;
    }
    if (!want("ask") || !want("x")) return std::nullopt;
    return "ans " + std::to_string(value);
}

}  // namespace cacheproc
