#include <functional>
#include <map>
#include <mutex>
#include <set>

#include "doctest.h"
#include "sgdl/subgoal.hpp"

using namespace sgdl;
using namespace sgdl::subgoal;

namespace {

std::vector<std::string> split(const std::string &s, char sep) {
    std::vector<std::string> out{""};
    for (char c : s) {
        if (c == sep) {
            out.emplace_back();
        } else {
            out.back().push_back(c);
        }
    }
    return out;
}

Prompts oracle_prompts() {
    Prompts p;
    p.initialize = "I|{statement}|{demos}";
    p.verify = "V|{from}|{to}";
    p.correct = "C|{from}|{to}";
    return p;
}

/// Scripted LLM whose verify proofs go through the real toy prover.
struct Oracle {
    std::function<bool(const std::string &, const std::string &)> passes = [](auto &, auto &) { return true; };
    std::map<std::pair<std::string, std::string>, std::string> decompositions;
    std::function<std::string(const std::string &)> initializer = [](const std::string &) {
        return std::string("Step 1: a");
    };
    std::vector<std::string> trace;
    std::vector<std::string> prompts;
    std::mutex mutex;

    std::string reply(const std::string &prompt) {
        const auto parts = split(prompt, '|');
        std::lock_guard lock(mutex);
        prompts.push_back(prompt);
        if (parts[0] == "V") {
            trace.push_back("V " + parts[1] + "->" + parts[2]);
            return passes(parts[1], parts[2]) ? "assert 1 + 1 = 2" : "assert 1 + 1 = 3";
        }
        if (parts[0] == "C") {
            trace.push_back("C " + parts[1] + "->" + parts[2]);
            const auto it = decompositions.find({parts[1], parts[2]});
            return it == decompositions.end() ? std::string() : it->second;
        }
        trace.push_back("I " + parts[1]);
        return initializer(parts[1]);
    }

    long count(char kind) {
        long n = 0;
        for (const auto &t : trace) {
            n += t[0] == kind ? 1 : 0;
        }
        return n;
    }
};

struct Rig {
    Oracle oracle;
    clients::FunctionLlm llm{[this](const clients::CompletionRequest &r) { return oracle.reply(r.prompt); }};
    clients::ToyProver prover;
    Prompts prompts = oracle_prompts();
    Counters counters;
    Engine engine{llm, prover, prompts, RefinementConfig{}, &counters};
};

std::vector<std::string> texts(const std::vector<Subgoal> &seg) {
    std::vector<std::string> out;
    for (const auto &s : seg) {
        out.push_back(s.text);
    }
    return out;
}

bool all_verified(const std::vector<Subgoal> &seg) {
    for (std::size_t k = 0; k + 1 < seg.size(); ++k) {
        if (!seg[k].verified) {
            return false;
        }
    }
    return true;
}

PoolRecord record(const std::string &id, const std::string &statement, int tokens = 10) {
    return {id, statement, "", "sketch of " + id, tokens};
}

} // namespace

TEST_CASE("step parsing") {
    CHECK(parse_steps("Step 1: a\nStep 2: b\n") == std::vector<std::string>{"a", "b"});
    CHECK(parse_steps("\n  Step 1: a\n  more of a\n\nStep 2: b") == std::vector<std::string>{"a\nmore of a", "b"});
    CHECK(parse_steps("Step 1:\nx = 2") == std::vector<std::string>{"x = 2"});
    for (const char *bad : {"We simply compute.", "", "Intro\nStep 1: a", "Step 1: a\nStep 3: b", "Step 2: a",
                            "Step 1: a\nStep 2:", "Step one: a"}) {
        try {
            parse_steps(bad);
            FAIL("parsed: " << bad);
        } catch (const ParseError &e) {
            CHECK(e.raw_text() == bad);
        }
    }
    CHECK(parse_steps(format_steps({"x", "y", "z"})) == std::vector<std::string>{"x", "y", "z"});
}

TEST_CASE("boundary subgoals from the statement") {
    CHECK(initial_state("assumes h0: x = 2 shows x * x = 4") == "h0: x = 2");
    CHECK(final_state("assumes h0: x = 2 shows x * x = 4") == "x * x = 4");
    CHECK(initial_state("shows 2 + 2 = 4") == "no assumptions");
    CHECK(initial_state("2 + 2 = 4") == "no assumptions");
    CHECK(final_state("2 + 2 = 4") == "2 + 2 = 4");
    CHECK(final_state("the showstopper shows 1 = 1") == "1 = 1");
    CHECK(final_state("showsx = 1") == "showsx = 1");
}

TEST_CASE("initialize_subgoals") {
    Rig rig;
    rig.oracle.initializer = [](const std::string &) { return std::string("Step 1: x = 2\nStep 2: x * x = 4"); };
    const std::vector<PoolRecord> demos{record("d0", "one"), record("d1", "two"), record("d2", "three")};
    const auto seq = initialize_subgoals("assumes x = 2 shows x * x = 4", "sketch", demos, rig.engine, 5);
    CHECK(seq.steps.size() == 4);
    CHECK(seq.texts() == std::vector<std::string>{"x = 2", "x = 2", "x * x = 4", "x * x = 4"});
    CHECK_FALSE(seq.valid());
    CHECK(seq.sketch == "sketch");

    const auto again = initialize_subgoals("assumes x = 2 shows x * x = 4", "sketch", demos, rig.engine, 5);
    CHECK(again.texts() == seq.texts());
    CHECK(rig.oracle.prompts[0] == rig.oracle.prompts[1]);

    SUBCASE("prose is a parse error") {
        rig.oracle.initializer = [](const std::string &) { return std::string("It is obvious."); };
        CHECK_THROWS_AS(initialize_subgoals("s", "k", demos, rig.engine, 1), ParseError);
    }
    SUBCASE("demonstrations are a random order packed to the budget") {
        rig.engine.config.demo_sample_budget = 25;
        std::set<std::string> orders;
        for (std::uint64_t seed = 0; seed < 40; ++seed) {
            rig.oracle.prompts.clear();
            initialize_subgoals("s", "k", demos, rig.engine, seed);
            const std::string &p = rig.oracle.prompts.back();
            int shown = 0;
            std::string order;
            for (const auto &d : demos) {
                const auto pos = p.find("sketch of " + d.id);
                if (pos != std::string::npos) {
                    ++shown;
                    order += d.id;
                }
            }
            CHECK(shown == 2);
            orders.insert(order);
        }
        CHECK(orders.size() > 1);
    }
    CHECK_THROWS_AS(initialize_subgoals("s", "k", {}, rig.engine, 1), InvalidArgument);
}

TEST_CASE("verify against the toy prover") {
    clients::ToyProver prover;
    Prompts prompts;
    for (const auto &[proof, expected] : std::vector<std::pair<std::string, bool>>{{"assert 2+2 = 4", true},
                                                                                    {"assert 2+2 = 5", false}}) {
        clients::FunctionLlm llm([&](const clients::CompletionRequest &) { return proof; });
        Engine engine{llm, prover, prompts, RefinementConfig{}};
        const auto out = verify("a", "b", "s", engine);
        CHECK(out.passed == expected);
        CHECK(out.proof == proof);
        CHECK(out.message.empty() == expected);
    }
    clients::FunctionLlm llm([](const clients::CompletionRequest &) { return std::string("assert 1 = 1"); });
    Engine engine{llm, prover, prompts, RefinementConfig{}};
    CHECK_THROWS_AS(verify("", "b", "s", engine), InvalidArgument);
}

TEST_CASE("walkthrough verify sequence: fail, pass, fail") {
    Rig rig;
    rig.oracle.passes = [](const std::string &from, const std::string &to) {
        return (from == "s0" && to == "a") || (from == "b1") || (from == "b" && to == "s1");
    };
    CHECK_FALSE(verify("s0", "s1", "thm", rig.engine).passed);
    CHECK(verify("s0", "a", "thm", rig.engine).passed);
    CHECK_FALSE(verify("a", "b", "thm", rig.engine).passed);
}

TEST_CASE("correct") {
    Rig rig;
    rig.oracle.decompositions[{"s0", "s1"}] = "Step 1: a\nStep 2: b\nStep 3: s1";
    CHECK(correct("s0", "s1", "thm", rig.engine) == std::vector<std::string>{"a", "b", "s1"});
    CHECK(correct("s0", "s1", "thm", rig.engine) == correct("s0", "s1", "thm", rig.engine));
    CHECK_THROWS_AS(correct("x", "y", "thm", rig.engine), CorrectionFailed);
    rig.oracle.decompositions[{"p", "q"}] = "Step 1: q";
    CHECK_THROWS_AS(correct("p", "q", "thm", rig.engine), CorrectionFailed);
    rig.oracle.decompositions[{"p", "r"}] = "no steps here";
    CHECK_THROWS_AS(correct("p", "r", "thm", rig.engine), CorrectionFailed);
    rig.engine.config.max_branch = 2;
    CHECK_THROWS_AS(correct("s0", "s1", "thm", rig.engine), CorrectionFailed);
}

TEST_CASE("verify_and_correct") {
    Rig rig;
    SUBCASE("always pass") {
        const auto seg = verify_and_correct("s0", "s1", 0, "thm", rig.engine);
        CHECK(texts(seg) == std::vector<std::string>{"s0", "s1"});
        CHECK(seg[0].verified);
        CHECK(seg[0].proof == "assert 1 + 1 = 2");
        CHECK(rig.oracle.count('V') == 1);
    }
    SUBCASE("walkthrough: fail, 3-way split, sub-fail, 2-way split, all pass") {
        rig.oracle.passes = [](const std::string &from, const std::string &to) {
            return !(from == "s0" && to == "s1") && !(from == "a" && to == "b");
        };
        rig.oracle.decompositions[{"s0", "s1"}] = "Step 1: a\nStep 2: b\nStep 3: s1 restated";
        rig.oracle.decompositions[{"a", "b"}] = "Step 1: b1\nStep 2: b restated";
        const auto seg = verify_and_correct("s0", "s1", 0, "thm", rig.engine);
        CHECK(texts(seg) == std::vector<std::string>{"s0", "a", "b1", "b", "s1"});
        CHECK(all_verified(seg));
        CHECK(rig.oracle.trace == std::vector<std::string>{"V s0->s1", "C s0->s1", "V s0->a", "V a->b", "C a->b",
                                                            "V a->b1", "V b1->b", "V b->s1"});
        CHECK(rig.counters.verify_calls == 6);
        CHECK(rig.counters.correct_calls == 2);
        CHECK(rig.counters.llm_calls == 8);
    }
    SUBCASE("depth exhausted leaves the pair unverified") {
        rig.oracle.passes = [](auto &, auto &) { return false; };
        rig.engine.config.max_correct_depth = 0;
        const auto seg = verify_and_correct("s0", "s1", 0, "thm", rig.engine);
        CHECK(texts(seg) == std::vector<std::string>{"s0", "s1"});
        CHECK_FALSE(seg[0].verified);
        CHECK(rig.oracle.trace == std::vector<std::string>{"V s0->s1"});
        CHECK_THROWS_AS(verify_and_correct("s0", "s1", 1, "thm", rig.engine), InvalidArgument);
    }
    SUBCASE("failed correction leaves the pair unverified") {
        rig.oracle.passes = [](auto &, auto &) { return false; };
        const auto seg = verify_and_correct("s0", "s1", 0, "thm", rig.engine);
        CHECK_FALSE(seg[0].verified);
        CHECK(rig.oracle.count('C') == 1);
    }
}

TEST_CASE("refine call-count law with an always-pass oracle") {
    for (int delta = 0; delta <= 6; ++delta) {
        Rig rig;
        std::vector<std::string> middles;
        for (int k = 1; k <= delta; ++k) {
            middles.push_back("s" + std::to_string(k));
        }
        const auto seg = refine("s0", "end", middles, "thm", rig.engine);
        std::vector<std::string> expected{"s0"};
        expected.insert(expected.end(), middles.begin(), middles.end());
        expected.push_back("end");
        CHECK(texts(seg) == expected);
        CHECK(all_verified(seg));
        CHECK(rig.oracle.count('V') == delta + 1);
        CHECK(rig.oracle.count('C') == 0);
    }
}

TEST_CASE("refine replaces only the failing segment") {
    Rig rig;
    rig.oracle.passes = [](const std::string &from, const std::string &to) { return !(from == "s2" && to == "s3"); };
    rig.oracle.decompositions[{"s2", "s3"}] = "Step 1: m\nStep 2: s3";
    const auto seg = refine("s0", "s5", {"s1", "s2", "s3", "s4"}, "thm", rig.engine);
    CHECK(texts(seg) == std::vector<std::string>{"s0", "s1", "s2", "m", "s3", "s4", "s5"});
    CHECK(all_verified(seg));
}

TEST_CASE("verify calls under an always-fail oracle match the recursion bound") {
    for (int depth = 0; depth <= 3; ++depth) {
        for (int branch = 2; branch <= 3; ++branch) {
            for (int delta = 0; delta <= 2; ++delta) {
                Rig rig;
                rig.engine.config.max_correct_depth = depth;
                rig.engine.config.max_branch = branch;
                rig.oracle.passes = [](auto &, auto &) { return false; };
                // Every pair splits into `branch` steps with fresh names.
                int fresh = 0;
                rig.oracle.decompositions.clear();
                clients::FunctionLlm llm([&](const clients::CompletionRequest &r) {
                    const auto parts = split(r.prompt, '|');
                    if (parts[0] == "C") {
                        rig.oracle.trace.push_back("C");
                        std::vector<std::string> steps;
                        for (int b = 0; b + 1 < branch; ++b) {
                            steps.push_back("n" + std::to_string(fresh++));
                        }
                        steps.push_back(parts[2]);
                        return format_steps(steps);
                    }
                    return rig.oracle.reply(r.prompt);
                });
                Engine engine{llm, rig.prover, rig.prompts, rig.engine.config, &rig.counters};
                std::vector<std::string> middles;
                for (int k = 1; k <= delta; ++k) {
                    middles.push_back("s" + std::to_string(k));
                }
                const auto seg = refine("s0", "end", middles, "thm", engine);
                long geometric = 0, power = 1;
                for (int i = 0; i <= depth; ++i) {
                    geometric += power;
                    power *= branch;
                }
                CHECK(rig.counters.verify_calls == (delta + 1) * geometric);
                CHECK_FALSE(all_verified(seg));
                CHECK(seg.front().text == "s0");
                CHECK(seg.back().text == "end");
            }
        }
    }
}

TEST_CASE("iterative refinement") {
    clients::HeuristicTokenizer tok;
    const std::vector<PoolRecord> seeds{record("e0", "assumes a shows b"), record("e1", "shows c"),
                                        record("e2", "d")};

    SUBCASE("zero iterations return the seed set") {
        Rig rig;
        rig.engine.config.iterations = 0;
        const auto out = iterative_refinement(seeds, rig.engine, tok, 1);
        CHECK(out.examples == seeds);
        CHECK(out.rounds.empty());
        CHECK(rig.oracle.trace.empty());
    }
    SUBCASE("one always-pass round keeps the initializer's steps verbatim") {
        Rig rig;
        rig.engine.config.iterations = 1;
        rig.oracle.initializer = [](const std::string &stmt) { return "Step 1: first of " + stmt + "\nStep 2: second"; };
        const auto out = iterative_refinement(seeds, rig.engine, tok, 1);
        REQUIRE(out.examples.size() == 3);
        for (std::size_t k = 0; k < seeds.size(); ++k) {
            CHECK(out.examples[k].subgoal_proof ==
                  "Step 1: first of " + seeds[k].statement + "\nStep 2: second\n");
            CHECK(out.examples[k].token_count == tok.count(render_demo(rig.prompts, out.examples[k])));
            CHECK(out.examples[k].id == seeds[k].id);
        }
        CHECK(out.rounds[0].replaced == 3);
        CHECK(rig.oracle.count('V') == 9);
    }
    SUBCASE("invalid refinements retain the previous version") {
        Rig rig;
        rig.engine.config.iterations = 2;
        rig.engine.config.max_correct_depth = 0;
        int init_calls = 0;
        rig.oracle.initializer = [&](const std::string &) {
            return std::string(++init_calls <= 3 ? "Step 1: good" : "Step 1: bad");
        };
        rig.oracle.passes = [](const std::string &from, const std::string &to) { return from != "bad" && to != "bad"; };
        const auto out = iterative_refinement(seeds, rig.engine, tok, 3);
        for (const auto &e : out.examples) {
            CHECK(e.subgoal_proof == "Step 1: good\n");
        }
        CHECK(out.rounds[0].replaced == 3);
        CHECK(out.rounds[1].retained == 3);
    }
    SUBCASE("client errors abort an example after the retry budget") {
        Rig rig;
        rig.engine.config.iterations = 1;
        rig.engine.config.client_retries = 2;
        int tries = 0;
        clients::FunctionLlm flaky([&](const clients::CompletionRequest &r) -> std::string {
            if (r.prompt.find("I|shows c|") == 0) {
                ++tries;
                throw ClientError("down");
            }
            return rig.oracle.reply(r.prompt);
        });
        Engine engine{flaky, rig.prover, rig.prompts, rig.engine.config};
        const auto out = iterative_refinement(seeds, engine, tok, 1);
        CHECK(tries == 3);
        CHECK(out.rounds[0].aborted == 1);
        CHECK(out.rounds[0].replaced == 2);
        CHECK(out.examples[1] == seeds[1]);
    }
    SUBCASE("parallel rounds equal sequential ones") {
        std::vector<PoolRecord> many;
        for (int k = 0; k < 12; ++k) {
            many.push_back(record("p" + std::to_string(k), "shows t" + std::to_string(k), 5 + k));
        }
        auto run = [&](int workers) {
            Rig rig;
            rig.engine.config.iterations = 2;
            rig.engine.config.workers = workers;
            rig.engine.config.demo_sample_budget = 40;
            rig.oracle.initializer = [](const std::string &stmt) { return "Step 1: via " + stmt; };
            rig.oracle.passes = [](const std::string &from, const std::string &) { return from.find("t3") == std::string::npos; };
            auto out = iterative_refinement(many, rig.engine, tok, 9);
            std::multiset<std::string> prompts(rig.oracle.prompts.begin(), rig.oracle.prompts.end());
            return std::make_pair(out.examples, prompts);
        };
        const auto one = run(1);
        const auto four = run(4);
        CHECK(one.first == four.first);
        CHECK(one.second == four.second);
    }
    Rig rig;
    CHECK_THROWS_AS(iterative_refinement({}, rig.engine, tok, 1), InvalidArgument);
}
