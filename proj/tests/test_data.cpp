#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "cacheproc/synth.h"
#include "cacheproc/trace.h"
#include "cacheproc/vocab.h"

using namespace cacheproc;

namespace {
std::string tmp_path(const std::string& name) { return "/tmp/cacheproc_test_" + name; }
}  // namespace

TEST_CASE("segment_steps basic shapes") {
    const int NL = Vocab::kNewline;
    // prompt of 2, completion "a b \n c \n"
    std::vector<int> two{9, 9, 5, 6, NL, 7, NL};
    auto spans = segment_steps(two, 2);
    REQUIRE(spans.size() == 2);
    CHECK(spans[0] == Span{2, 5});
    CHECK(spans[1] == Span{5, 7});

    // no newline at all: one span covering the completion
    std::vector<int> flat{9, 9, 5, 6, 7};
    auto one = segment_steps(flat, 2);
    REQUIRE(one.size() == 1);
    CHECK(one[0] == Span{2, 5});

    // "x \n \n y": middle span is the lone newline
    std::vector<int> gap{9, 5, NL, NL, 6};
    auto three = segment_steps(gap, 1);
    REQUIRE(three.size() == 3);
    CHECK(three[0] == Span{1, 3});
    CHECK(three[1] == Span{3, 4});
    CHECK(three[2] == Span{4, 5});

    CHECK_THROWS(segment_steps(flat, 6));  // prompt_len out of range
    CHECK(segment_steps(flat, 5).empty());
}

TEST_CASE("segmentation is idempotent under re-tokenization") {
    SynthTaskSpec spec;
    spec.seed = 5;
    Vocab v = build_synth_vocab(spec);
    auto traces = generate_synthetic(spec, 20, v);
    for (const Trace& t : traces) {
        const std::string text = v.decode(t.tokens);
        const std::vector<int> again = v.encode(text);
        CHECK(again == t.tokens);
        CHECK(segment_steps(again, t.prompt_len) == t.step_spans);
    }
}

TEST_CASE("known chain: start 3, +4 then +5 mod 10 answers 2") {
    SynthTaskSpec spec;
    spec.modulus = 10;
    Vocab v = build_synth_vocab(spec);
    Trace t = make_problem_trace(v, 10, 3, {{"x", 4}, {"x", 5}});
    CHECK(t.meta["answer"] == "ans 2");
    // two update lines plus the answer line
    CHECK(t.step_spans.size() == 3);
    CHECK(expected_answer(v, t) == std::string("ans 2"));
}

TEST_CASE("chain length 1 with no distractors gives a 2-line completion") {
    SynthTaskSpec spec;
    spec.chain_length = 1;
    spec.distractors = 0;
    Vocab v = build_synth_vocab(spec);
    auto traces = generate_synthetic(spec, 5, v);
    for (const Trace& t : traces) {
        CHECK(t.step_spans.size() == 2);
    }
}

TEST_CASE("same seed yields a byte-identical corpus") {
    SynthTaskSpec spec;
    spec.seed = 42;
    Vocab v = build_synth_vocab(spec);
    auto a = generate_synthetic(spec, 30, v);
    auto b = generate_synthetic(spec, 30, v);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(trace_to_json(a[i]).dump() == trace_to_json(b[i]).dump());
    }
}

TEST_CASE("every generated answer matches the independent evaluator") {
    SynthTaskSpec spec;
    spec.modulus = 7;
    spec.chain_length = 4;
    spec.distractors = 5;
    spec.seed = 9;
    Vocab v = build_synth_vocab(spec);
    auto traces = generate_synthetic(spec, 100, v);
    for (const Trace& t : traces) {
        auto expect = expected_answer(v, t);
        REQUIRE(expect.has_value());
        CHECK(*expect == t.meta["answer"].get<std::string>());
        // the completion's last line is the answer line
        const Span last = t.step_spans.back();
        std::vector<int> line(t.tokens.begin() + last.first, t.tokens.begin() + last.second);
        CHECK(v.decode_text(line) == *expect);
    }
}

TEST_CASE("train and held-out splits are disjoint by problem identity") {
    SynthTaskSpec spec;
    spec.seed = 77;
    Vocab v = build_synth_vocab(spec);
    auto s = generate_splits(spec, 50, 20, v);
    std::unordered_set<std::string> train_ids;
    for (const Trace& t : s.train) {
        std::string id;
        for (size_t i = 0; i < t.prompt_len; ++i) id += std::to_string(t.tokens[i]) + ",";
        train_ids.insert(id);
    }
    for (const Trace& t : s.heldout) {
        std::string id;
        for (size_t i = 0; i < t.prompt_len; ++i) id += std::to_string(t.tokens[i]) + ",";
        CHECK(train_ids.count(id) == 0);
    }
}

TEST_CASE("vocab cap too small to encode the modulus errors") {
    SynthTaskSpec spec;
    spec.modulus = 40;
    spec.vocab_cap = 30;
    CHECK_THROWS(build_synth_vocab(spec));
}

TEST_CASE("trace file round trip") {
    SynthTaskSpec spec;
    spec.seed = 12;
    Vocab v = build_synth_vocab(spec);
    auto traces = generate_synthetic(spec, 25, v);
    const std::string path = tmp_path("roundtrip.jsonl");
    save_traces(path, traces);
    auto loaded = load_traces(path, v.size());
    REQUIRE(loaded.size() == traces.size());
    for (size_t i = 0; i < traces.size(); ++i) {
        CHECK(loaded[i].tokens == traces[i].tokens);
        CHECK(loaded[i].prompt_len == traces[i].prompt_len);
        CHECK(loaded[i].step_spans == traces[i].step_spans);
    }
    std::remove(path.c_str());
}

TEST_CASE("empty trace file loads as an empty list") {
    const std::string path = tmp_path("empty.jsonl");
    std::ofstream(path).close();
    CHECK(load_traces(path, 10).empty());
    std::remove(path.c_str());
}

TEST_CASE("loader rejects bad records with the line number") {
    const std::string path = tmp_path("bad.jsonl");
    SynthTaskSpec spec;
    Vocab v = build_synth_vocab(spec);
    Trace good = make_problem_trace(v, 10, 1, {{"x", 2}});

    SUBCASE("token id out of vocabulary") {
        Trace bad = good;
        bad.tokens[0] = v.size() + 5;
        std::ofstream f(path);
        f << trace_to_json(good).dump() << "\n" << trace_to_json(bad).dump() << "\n";
        f.close();
        try {
            load_traces(path, v.size());
            FAIL("expected an exception");
        } catch (const std::runtime_error& e) {
            CHECK(std::string(e.what()).find(":2:") != std::string::npos);
        }
    }
    SUBCASE("missing fields") {
        std::ofstream f(path);
        f << "{\"tokens\": [1,2,3]}\n";
        f.close();
        CHECK_THROWS(load_traces(path, v.size()));
    }
    SUBCASE("spans disagreeing with newline positions") {
        Trace bad = good;
        bad.step_spans[0].second -= 1;
        bad.step_spans[1].first -= 1;
        std::ofstream f(path);
        f << trace_to_json(bad).dump() << "\n";
        f.close();
        CHECK_THROWS(load_traces(path, v.size()));
    }
    std::remove(path.c_str());
}

TEST_CASE("reserved ids are distinct and dense") {
    Vocab v = Vocab::base();
    CHECK(v.size() == 5);
    CHECK(Vocab::kPad == 0);
    CHECK(Vocab::kNewline == 2);
    CHECK(v.symbol(Vocab::kNewline) == "\n");
    CHECK(v.id("<eos>") == Vocab::kEos);
}
