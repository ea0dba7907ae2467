#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cacheproc/trace.h"
#include "cacheproc/vocab.h"

namespace cacheproc {

// Modular-arithmetic chain task: a start value, a shuffled mix of relevant and
// distractor update facts, one update applied per reasoning line, final answer
// line. Distractor facts are syntactically identical but touch unused
// variables, so the history carries extraneous content.
struct SynthTaskSpec {
    int modulus = 10;
    int chain_length = 3;
    int distractors = 4;
    int vocab_cap = 64;  // generation fails if the task needs more symbols
    uint64_t seed = 1;
};

inline constexpr size_t kMaxTraceLen = 512;

Vocab build_synth_vocab(const SynthTaskSpec& spec);

// Deterministic: the same spec yields a byte-identical corpus. Problems are
// unique by prompt identity.
std::vector<Trace> generate_synthetic(const SynthTaskSpec& spec, size_t n, const Vocab& vocab);

// Convenience split; train and held-out sets are disjoint by problem identity.
struct SynthSplits {
    std::vector<Trace> train;
    std::vector<Trace> heldout;
};
SynthSplits generate_splits(const SynthTaskSpec& spec, size_t n_train, size_t n_heldout,
                            const Vocab& vocab);

// Builds one problem from explicit values; the generator uses this internally.
// ordered_facts holds (variable symbol, delta) pairs in prompt order; updates
// to "x" apply in that order.
Trace make_problem_trace(const Vocab& vocab, int modulus, int start_value,
                         const std::vector<std::pair<std::string, int>>& ordered_facts);

// Independent arithmetic evaluator: re-derives the expected answer line from
// the prompt tokens alone. Returns nullopt when the prompt does not parse.
std::optional<std::string> expected_answer(const Vocab& vocab, const Trace& trace);

}  // namespace cacheproc
