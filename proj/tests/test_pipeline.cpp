#include <atomic>
#include <functional>
#include <mutex>

#include "doctest.h"
#include "sgdl/pipeline.hpp"

using namespace sgdl;
using namespace sgdl::pipeline;

namespace {

class FunctionProver : public clients::ProverClient {
public:
    explicit FunctionProver(std::function<bool(const std::string &)> fn) : fn_(std::move(fn)) {}

    clients::VerifyResult verify_theory(const std::string &source) override {
        ++calls;
        const bool ok = fn_(source);
        return {ok, ok ? "" : "rejected", {}};
    }

    std::atomic<int> calls{0};

private:
    std::function<bool(const std::string &)> fn_;
};

std::vector<PoolRecord> make_pool(int n) {
    std::vector<PoolRecord> pool;
    for (int k = 0; k < n; ++k) {
        pool.push_back({"d" + std::to_string(k), "statement " + std::to_string(k), "Step 1: s" + std::to_string(k),
                        "sketch of d" + std::to_string(k), 100});
    }
    return pool;
}

Prompts tagged_prompts() {
    Prompts p;
    p.subgoal_proof = "PROOF|{statement}|{demos}";
    p.sketch = "SKETCH|{statement}|{demos}";
    return p;
}

std::string statement_of(const std::string &prompt) {
    const auto a = prompt.find('|');
    const auto b = prompt.find('|', a + 1);
    return prompt.substr(a + 1, b - a - 1);
}

struct Rig {
    std::vector<PoolRecord> pool = make_pool(6);
    organizer::PoolView view = make_view(pool, {});
    Prompts prompts = tagged_prompts();
    std::function<std::string(const std::string &)> author = [](const std::string &prompt) {
        return prompt.rfind("PROOF", 0) == 0 ? std::string("Step 1: compute") : std::string("assert 1 = 1");
    };
    std::atomic<int> llm_calls{0};
    clients::FunctionLlm llm{[this](const clients::CompletionRequest &r) {
        ++llm_calls;
        return author(r.prompt);
    }};
    clients::ToyProver toy;
    clients::HashEmbedder embedder{1};

    Resources resources(clients::ProverClient &prover) {
        return {pool, view, nullptr, llm, prover, embedder, prompts, organizer::OrganizerConfig{}, clients::Sampling{}};
    }
};

} // namespace

TEST_CASE("check_sketch") {
    CHECK_FALSE(check_sketch("proof\n  sorry\nqed"));
    CHECK_FALSE(check_sketch("by (simp) oops"));
    CHECK_FALSE(check_sketch("sorry"));
    CHECK_FALSE(check_sketch("x (* oops. *)"));
    CHECK(check_sketch("assert 1 = 1"));
    CHECK(check_sketch("sorrysome oopsie unsorry"));
    CHECK(check_sketch(""));
}

TEST_CASE("prove") {
    Rig rig;
    SUBCASE("accepted sketch passes on the first attempt with two calls") {
        const auto r = rig.resources(rig.toy);
        const auto a = prove({"p", "shows 1 = 1"}, r, 3, 1);
        CHECK(a.verdict == Verdict::Pass);
        CHECK(a.attempts_used == 1);
        CHECK(a.llm_calls_used == 2);
        CHECK(a.subgoal_proof == "Step 1: compute");
        CHECK(a.sketch == "assert 1 = 1");
        CHECK(a.context.total_tokens <= a.context.budget);
        CHECK_FALSE(a.context.example_ids.empty());
    }
    SUBCASE("sorry fails without a prover call") {
        rig.author = [](const std::string &) { return std::string("assert 1 = 1 sorry"); };
        FunctionProver prover([](const std::string &) { return true; });
        const auto a = prove({"p", "s"}, rig.resources(prover), 4, 1);
        CHECK(a.verdict == Verdict::Fail);
        CHECK(prover.calls == 0);
        CHECK(a.attempts_used == 4);
        CHECK(a.llm_calls_used == 8);
    }
    SUBCASE("client failures consume attempts without crashing") {
        int n = 0;
        rig.author = [&](const std::string &prompt) -> std::string {
            if (++n <= 3) {
                throw ClientError("flaky");
            }
            return prompt.rfind("PROOF", 0) == 0 ? "Step 1: x" : "assert 2 = 2";
        };
        const auto r = rig.resources(rig.toy);
        const auto first = prove({"p", "s"}, r, 1, 1);
        CHECK(first.verdict == Verdict::Error);
        CHECK(first.message.find("flaky") != std::string::npos);
        const auto later = prove({"p", "s"}, r, 3, 1);
        CHECK(later.verdict == Verdict::Pass);
        CHECK(later.attempts_used == 3);
        CHECK(later.llm_calls_used <= 2 * 3);
    }
    SUBCASE("missing transcript entries become error verdicts") {
        clients::TranscriptLlm empty({});
        Resources r{rig.pool, rig.view, nullptr, empty, rig.toy, rig.embedder, rig.prompts, {}, {}};
        const auto a = prove({"p", "s"}, r, 2, 1);
        CHECK(a.verdict == Verdict::Error);
        CHECK(a.llm_calls_used == 2);
    }
    SUBCASE("pass implies a clean sketch the prover accepted") {
        rig.author = [](const std::string &prompt) {
            const auto s = statement_of(prompt);
            if (prompt.rfind("PROOF", 0) == 0) {
                return std::string("Step 1: think");
            }
            return s == "a" ? std::string("assert 1 = 2") : s == "b" ? std::string("oops") : std::string("assert 3 = 3");
        };
        for (const char *s : {"a", "b", "c"}) {
            FunctionProver prover([](const std::string &src) { return clients::ToyProver().verify_theory(src).accepted; });
            const auto a = prove({s, s}, rig.resources(prover), 2, 7);
            if (a.verdict == Verdict::Pass) {
                CHECK(check_sketch(a.sketch));
                CHECK(rig.toy.verify_theory(a.sketch).accepted);
            }
            CHECK(a.llm_calls_used <= 4);
            CHECK((a.verdict == Verdict::Pass) == (std::string(s) == "c"));
        }
    }
    SUBCASE("attempts use fresh organizations") {
        std::vector<std::string> prompts;
        std::mutex m;
        rig.author = [&](const std::string &prompt) {
            std::lock_guard lock(m);
            prompts.push_back(prompt);
            return std::string("assert 1 = 2");
        };
        const auto r = rig.resources(rig.toy);
        prove({"p", "s"}, r, 5, 3);
        std::set<std::string> distinct(prompts.begin(), prompts.end());
        CHECK(distinct.size() > 2);
    }
    const auto r = rig.resources(rig.toy);
    CHECK_THROWS_AS(prove({"p", "s"}, r, 0, 1), InvalidArgument);
}

TEST_CASE("prove with a model embeds the statement") {
    Rig rig;
    clients::HashEmbedder embedder(3, 4);
    std::vector<std::vector<double>> embeddings;
    for (const auto &rec : rig.pool) {
        embeddings.push_back(embedder.embed(rec.statement));
    }
    organizer::PoolView view = make_view(rig.pool, embeddings);
    gnn::DenoiserConfig c;
    c.layers = 1;
    c.hidden_dim = 8;
    c.embed_dim = 4;
    c.pool_size = 6;
    organizer::Model model{gnn::init_params(c, 1), diffusion::build_schedule(5), organizer::LengthLaw::from_lengths({3})};
    organizer::OrganizerConfig oc;
    oc.candidates = 10;
    oc.n_mc = 2;
    Resources r{rig.pool, view, &model, rig.llm, rig.toy, embedder, rig.prompts, oc, {}};
    const auto a = prove({"p", "shows 1 = 1"}, r, 1, 5);
    CHECK(a.verdict == Verdict::Pass);
    CHECK(a.context.example_ids.size() == 3);
    const auto b = prove({"p", "shows 1 = 1"}, r, 1, 5);
    CHECK(a.context.example_ids == b.context.example_ids);
}

TEST_CASE("demonstrations leave room for the prompt and the proof") {
    Rig rig;
    clients::HeuristicTokenizer tok;
    auto r = rig.resources(rig.toy);
    const Problem problem{"p", "shows 1 = 1"};
    CHECK(demo_budget(problem, r, 3072) == 3072);
    r.context_limit = 1300;
    r.tokenizer = &tok;
    r.sampling.max_output_tokens = 1000;
    // "SKETCH|shows 1 = 1|" is 19 bytes, 5 tokens, plus the reserved proof.
    CHECK(demo_budget(problem, r, 3072) == 1300 - 1005);
    CHECK(demo_budget(problem, r, 200) == 200);
    const auto a = prove(problem, r, 1, 1);
    CHECK(a.context.budget == 295);
    CHECK(a.context.total_tokens <= 295);
    CHECK(a.context.example_ids.size() <= 2);
    r.context_limit = 900;
    CHECK(demo_budget(problem, r, 3072) == 0);
}

TEST_CASE("collect_training_pairs") {
    Rig rig;
    // The sketch names the demonstrations it saw; the prover accepts exactly contexts with d3.
    rig.author = [](const std::string &prompt) {
        return prompt.find("sketch of d3") != std::string::npos ? std::string("assert 3 = 3")
                                                                : std::string("assert 3 = 4");
    };
    const std::vector<Problem> problems{{"a", "sa"}, {"b", "sb"}, {"c", "sc"}};
    const auto r = rig.resources(rig.toy);
    const auto pairs = collect_training_pairs(problems, r, 3072, 20, 11);
    CHECK_FALSE(pairs.empty());
    for (const auto &p : pairs) {
        CHECK(std::find(p.order.begin(), p.order.end(), 3) != p.order.end());
        CHECK(organizer::decode_path(organizer::encode_path(p.order, 6)) == p.order);
    }
    CHECK(pairs.size() < 60);
    CHECK(collect_training_pairs(problems, r, 3072, 20, 11).size() == pairs.size());

    const int before = rig.llm_calls;
    CHECK(collect_training_pairs(problems, r, 0, 20, 11).empty());
    CHECK(rig.llm_calls == before);

    const auto text = pairs_to_jsonl(pairs, rig.pool);
    const auto back = parse_pairs(text, "pairs", rig.pool);
    REQUIRE(back.size() == pairs.size());
    for (std::size_t k = 0; k < pairs.size(); ++k) {
        CHECK(back[k].order == pairs[k].order);
        CHECK(back[k].problem_id == pairs[k].problem_id);
        CHECK(back[k].statement == pairs[k].statement);
    }
    CHECK_THROWS_AS(parse_pairs(R"({"problem_id":"a","statement":"s","order":["zz"]})", "f", rig.pool), FormatError);
    CHECK_THROWS_AS(parse_pairs(R"({"problem_id":"a","statement":"s","order":["d1","d1"]})", "f", rig.pool),
                    FormatError);
}

TEST_CASE("evaluate") {
    Rig rig;
    std::vector<Problem> problems;
    for (int k = 0; k < 20; ++k) {
        problems.push_back({"p" + std::to_string(k), "t" + std::to_string(k)});
    }
    rig.author = [](const std::string &prompt) {
        if (prompt.rfind("PROOF", 0) == 0) {
            return std::string("Step 1: go");
        }
        const int k = std::stoi(statement_of(prompt).substr(1));
        return k < 13 ? std::string("assert 2 * 3 = 6") : std::string("assert 2 * 3 = 7");
    };
    const auto r = rig.resources(rig.toy);
    const auto one = evaluate(problems, r, 2, 1, 4);
    CHECK(one.pass_rate == 0.65);
    CHECK(one.passed == 13);
    CHECK(one.total == 20);
    CHECK(one.llm_calls == 13 * 2 + 7 * 4);
    REQUIRE(one.ledger.size() == 20);
    CHECK(one.ledger[0].problem_id == "p0");
    CHECK(one.ledger[19].verdict == Verdict::Fail);
    const auto four = evaluate(problems, r, 2, 4, 4);
    CHECK(four.to_json().dump() == one.to_json().dump());
    CHECK_THROWS_AS(evaluate({}, r, 1, 1, 4), InvalidArgument);

    SUBCASE("more attempts never lower the rate") {
        rig.author = [](const std::string &prompt) {
            // Passes only when the first demonstration shown has an even index.
            const auto pos = prompt.find("sketch of d");
            const int first = prompt[pos + 11] - '0';
            return first % 2 == 0 ? std::string("assert 1 = 1") : std::string("assert 1 = 0");
        };
        const auto r2 = rig.resources(rig.toy);
        const auto low = evaluate(problems, r2, 1, 1, 8);
        const auto high = evaluate(problems, r2, 20, 1, 8);
        CHECK(low.pass_rate <= high.pass_rate);
        CHECK(high.pass_rate > low.pass_rate);
        for (const auto &e : high.ledger) {
            CHECK(e.llm_calls <= 2 * 20);
        }
    }
}

TEST_CASE("cumulative pass rate") {
    CHECK(cumulative_pass_rate({"a", "b", "c"}, {"c", "d"}, 10) == doctest::Approx(0.4));
    CHECK(cumulative_pass_rate({"a", "b", "c"}, {"d", "e"}, 10) == doctest::Approx(0.5));
    CHECK(cumulative_pass_rate({"a"}, {"a", "b"}, 4) == doctest::Approx(0.5));
    CHECK(cumulative_pass_rate({}, {}, 3) == 0.0);
    CHECK_THROWS_AS(cumulative_pass_rate({}, {}, 0), InvalidArgument);
}

TEST_CASE("problem and pool files") {
    const auto problems = parse_problems("{\"id\":\"a\",\"statement\":\"s\"}\n\n{\"id\":\"b\",\"statement\":\"t\"}\n", "p");
    CHECK(problems.size() == 2);
    try {
        parse_problems("{\"id\":\"a\",\"statement\":\"s\"}\n{\"id\":\"a\",\"statement\":\"t\"}\n", "probs.jsonl");
        FAIL("duplicate accepted");
    } catch (const FormatError &e) {
        CHECK(e.section() == "probs.jsonl:2");
    }
    clients::HeuristicTokenizer tok;
    Prompts prompts;
    const auto pool = make_pool(3);
    const auto text = pool_to_jsonl(pool);
    const auto back = parse_pool(text, "pool", prompts, tok);
    REQUIRE(back.size() == 3);
    CHECK(back[1].id == "d1");
    CHECK(back[1].token_count == tok.count(render_demo(prompts, back[1])));
    CHECK_THROWS_AS(parse_pool("{\"id\":\"x\",\"statement\":\"\",\"formal_sketch\":\"k\"}", "pool", prompts, tok),
                    FormatError);
    CHECK_THROWS_AS(parse_pool("not json", "pool", prompts, tok), FormatError);
}

TEST_CASE("template filling") {
    CHECK(fill("{a} and {b} but {c} and {}", {{"a", "1"}, {"b", "{a}"}}) == "1 and {a} but {c} and {}");
    CHECK(fill("lemma {x: nat}", {{"x", "y"}}) == "lemma {x: nat}");
    Prompts p;
    p.verify = "custom";
    CHECK(Prompts::from_json(p.to_json()) == p);
    CHECK_THROWS_AS(Prompts::from_json({{"nope", "x"}}), InvalidArgument);
}
