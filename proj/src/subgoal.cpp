#include "sgdl/subgoal.hpp"

#include <cctype>
#include <mutex>
#include <numeric>
#include <sstream>

#include "sgdl/errors.hpp"
#include "sgdl/organizer.hpp"
#include "sgdl/parallel.hpp"
#include "sgdl/rng.hpp"

namespace sgdl::subgoal {

namespace {

std::string trim(const std::string &s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) {
        ++b;
    }
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) {
        --e;
    }
    return s.substr(b, e - b);
}

bool word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

/// Position of the last standalone occurrence of `word`, or npos.
std::size_t find_word(const std::string &text, const std::string &word) {
    std::size_t pos = text.rfind(word);
    while (pos != std::string::npos) {
        const bool left = pos == 0 || !word_char(text[pos - 1]);
        const bool right = pos + word.size() >= text.size() || !word_char(text[pos + word.size()]);
        if (left && right) {
            return pos;
        }
        if (pos == 0) {
            break;
        }
        pos = text.rfind(word, pos - 1);
    }
    return std::string::npos;
}

void count(std::atomic<long> Counters::*field, Engine &engine) {
    if (engine.counters != nullptr) {
        ++(engine.counters->*field);
    }
}

std::string ask(const std::string &prompt, Engine &engine) {
    count(&Counters::llm_calls, engine);
    return engine.llm.complete(engine.config.sampling.request(prompt));
}

/// Appends `segment`, letting its first subgoal replace the shared boundary at the end of `out`.
void append_segment(std::vector<Subgoal> &out, std::vector<Subgoal> segment) {
    if (!out.empty()) {
        out.pop_back();
    }
    out.insert(out.end(), std::make_move_iterator(segment.begin()), std::make_move_iterator(segment.end()));
}

} // namespace

bool SubgoalSequence::valid() const {
    if (steps.size() < 2) {
        return false;
    }
    for (std::size_t k = 0; k + 1 < steps.size(); ++k) {
        if (!steps[k].verified) {
            return false;
        }
    }
    return true;
}

std::vector<std::string> SubgoalSequence::texts() const {
    std::vector<std::string> out;
    for (const auto &s : steps) {
        out.push_back(s.text);
    }
    return out;
}

void RefinementConfig::validate() const {
    if (iterations < 0 || max_correct_depth < 0) {
        throw InvalidArgument("refinement iterations and depth must be non-negative");
    }
    if (max_branch < 2) {
        throw InvalidArgument("max_branch must be at least 2");
    }
    if (demo_sample_budget < 0 || client_retries < 0 || workers < 1) {
        throw InvalidArgument("invalid refinement budget, retry or worker count");
    }
}

std::string initial_state(const std::string &statement) {
    const std::size_t pos = find_word(statement, "shows");
    if (pos == std::string::npos) {
        return "no assumptions";
    }
    std::string hyp = trim(statement.substr(0, pos));
    const std::size_t assumes = hyp.find("assumes");
    if (assumes == 0 && (hyp.size() == 7 || !word_char(hyp[7]))) {
        hyp = trim(hyp.substr(7));
    }
    return hyp.empty() ? "no assumptions" : hyp;
}

std::string final_state(const std::string &statement) {
    const std::size_t pos = find_word(statement, "shows");
    return pos == std::string::npos ? trim(statement) : trim(statement.substr(pos + 5));
}

std::vector<std::string> parse_steps(const std::string &text) {
    std::vector<std::string> steps;
    std::istringstream in(text);
    std::string raw;
    while (std::getline(in, raw)) {
        const std::string line = trim(raw);
        if (line.empty()) {
            continue;
        }
        bool is_step = false;
        if (line.rfind("Step ", 0) == 0) {
            std::size_t k = 5;
            while (k < line.size() && std::isdigit(static_cast<unsigned char>(line[k]))) {
                ++k;
            }
            if (k > 5 && k < line.size() && line[k] == ':') {
                is_step = true;
                const long number = std::stol(line.substr(5, k - 5));
                if (number != static_cast<long>(steps.size()) + 1) {
                    throw ParseError("expected Step " + std::to_string(steps.size() + 1) + ", found Step " +
                                         std::to_string(number),
                                     text);
                }
                steps.push_back(trim(line.substr(k + 1)));
            }
        }
        if (!is_step) {
            if (steps.empty()) {
                throw ParseError("text before the first 'Step k:' line", text);
            }
            steps.back() += steps.back().empty() ? line : "\n" + line;
        }
    }
    if (steps.empty()) {
        throw ParseError("no 'Step k:' lines", text);
    }
    for (std::size_t k = 0; k < steps.size(); ++k) {
        if (steps[k].empty()) {
            throw ParseError("Step " + std::to_string(k + 1) + " is empty", text);
        }
    }
    return steps;
}

std::string format_steps(const std::vector<std::string> &steps) {
    std::string out;
    for (std::size_t k = 0; k < steps.size(); ++k) {
        out += "Step " + std::to_string(k + 1) + ": " + steps[k] + "\n";
    }
    return out;
}

SubgoalSequence initialize_subgoals(const std::string &statement, const std::string &sketch,
                                    const std::vector<PoolRecord> &demos, Engine &engine, std::uint64_t seed) {
    if (demos.empty()) {
        throw InvalidArgument("subgoal initialization needs demonstrations");
    }
    Rng rng(seed);
    std::vector<int> order(demos.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t k = order.size(); k > 1; --k) {
        std::swap(order[k - 1], order[rng.below(k)]);
    }
    std::vector<int> tokens;
    for (const auto &d : demos) {
        tokens.push_back(d.token_count);
    }
    const auto ctx = organizer::pack_context(order, tokens, engine.config.demo_sample_budget);
    const std::string prompt = fill(engine.prompts.initialize, {{"demos", render_demos(engine.prompts, demos, ctx.example_ids)},
                                                                {"statement", statement},
                                                                {"sketch", sketch}});
    const auto middles = parse_steps(ask(prompt, engine));

    SubgoalSequence seq;
    seq.statement = statement;
    seq.sketch = sketch;
    seq.steps.push_back({initial_state(statement), "", false});
    for (const auto &m : middles) {
        seq.steps.push_back({m, "", false});
    }
    seq.steps.push_back({final_state(statement), "", false});
    return seq;
}

VerifyOutcome verify(const std::string &from, const std::string &to, const std::string &statement, Engine &engine) {
    if (from.empty() || to.empty()) {
        throw InvalidArgument("verify needs two non-empty subgoals");
    }
    count(&Counters::verify_calls, engine);
    const std::map<std::string, std::string> vars{{"statement", statement}, {"from", from}, {"to", to}};
    VerifyOutcome out;
    out.proof = ask(fill(engine.prompts.verify, vars), engine);
    auto theory_vars = vars;
    theory_vars["proof"] = out.proof;
    const auto result = engine.prover.verify_theory(fill(engine.prompts.step_theory, theory_vars));
    out.passed = result.accepted;
    out.message = result.message;
    return out;
}

std::vector<std::string> correct(const std::string &from, const std::string &to, const std::string &statement,
                                 Engine &engine) {
    count(&Counters::correct_calls, engine);
    const std::string reply =
        ask(fill(engine.prompts.correct, {{"statement", statement}, {"from", from}, {"to", to}}), engine);
    std::vector<std::string> steps;
    try {
        steps = parse_steps(reply);
    } catch (const ParseError &e) {
        throw CorrectionFailed(std::string("unusable decomposition: ") + e.what());
    }
    if (steps.size() < 2) {
        throw CorrectionFailed("decomposition adds no intermediate subgoal");
    }
    if (static_cast<int>(steps.size()) > engine.config.max_branch) {
        throw CorrectionFailed("decomposition has " + std::to_string(steps.size()) + " steps, more than max_branch " +
                               std::to_string(engine.config.max_branch));
    }
    return steps;
}

std::vector<Subgoal> verify_and_correct(const std::string &from, const std::string &to, int depth,
                                        const std::string &statement, Engine &engine) {
    if (depth < 0 || depth > engine.config.max_correct_depth) {
        throw InvalidArgument("correction depth " + std::to_string(depth) + " outside 0.." +
                              std::to_string(engine.config.max_correct_depth));
    }
    const auto outcome = verify(from, to, statement, engine);
    if (outcome.passed) {
        return {{from, outcome.proof, true}, {to, "", false}};
    }
    const std::vector<Subgoal> unverified{{from, "", false}, {to, "", false}};
    if (depth == engine.config.max_correct_depth) {
        return unverified;
    }
    std::vector<std::string> points;
    try {
        points = correct(from, to, statement, engine);
    } catch (const CorrectionFailed &) {
        return unverified;
    }
    points.back() = to;
    points.insert(points.begin(), from);
    std::vector<Subgoal> out;
    for (std::size_t k = 0; k + 1 < points.size(); ++k) {
        append_segment(out, verify_and_correct(points[k], points[k + 1], depth + 1, statement, engine));
    }
    return out;
}

std::vector<Subgoal> refine(const std::string &first, const std::string &last, const std::vector<std::string> &middles,
                            const std::string &statement, Engine &engine) {
    if (middles.empty()) {
        return verify_and_correct(first, last, 0, statement, engine);
    }
    auto out = refine(first, middles.front(), {}, statement, engine);
    const std::vector<std::string> rest(middles.begin() + 1, middles.end());
    append_segment(out, refine(middles.front(), last, rest, statement, engine));
    return out;
}

RefinementResult iterative_refinement(const std::vector<PoolRecord> &seed_examples, Engine &engine,
                                      const clients::Tokenizer &tokenizer, std::uint64_t seed) {
    engine.config.validate();
    if (seed_examples.empty()) {
        throw InvalidArgument("refinement needs a non-empty seed set");
    }
    RefinementResult result;
    result.examples = seed_examples;
    const std::uint64_t round_seed = derive_seed(seed, "refinement");
    for (int round = 1; round <= engine.config.iterations; ++round) {
        const std::vector<PoolRecord> previous = result.examples;
        std::vector<PoolRecord> next = previous;
        RoundReport report;
        std::mutex report_mutex;
        const std::uint64_t seed_k = derive_seed(round_seed, static_cast<std::uint64_t>(round));

        parallel_for(previous.size(), engine.config.workers, [&](std::size_t i) {
            std::vector<PoolRecord> demos;
            for (std::size_t j = 0; j < previous.size(); ++j) {
                if (j != i) {
                    demos.push_back(previous[j]);
                }
            }
            if (demos.empty()) {
                demos = previous;
            }
            const PoolRecord &current = previous[i];
            enum class Fate { Replaced, Retained, Aborted } fate = Fate::Retained;
            for (int attempt = 0; attempt <= engine.config.client_retries; ++attempt) {
                try {
                    const auto seq = initialize_subgoals(current.statement, current.formal_sketch, demos, engine,
                                                         derive_seed(seed_k, static_cast<std::uint64_t>(i)));
                    std::vector<std::string> middles;
                    for (std::size_t k = 1; k + 1 < seq.steps.size(); ++k) {
                        middles.push_back(seq.steps[k].text);
                    }
                    SubgoalSequence refined{seq.statement, seq.sketch,
                                            refine(seq.steps.front().text, seq.steps.back().text, middles,
                                                   current.statement, engine)};
                    if (refined.valid()) {
                        const auto texts = refined.texts();
                        next[i].subgoal_proof = format_steps({texts.begin() + 1, texts.end() - 1});
                        update_token_count(next[i], engine.prompts, tokenizer);
                        fate = Fate::Replaced;
                    }
                    break;
                } catch (const ParseError &) {
                    break;
                } catch (const ClientError &) {
                    if (attempt == engine.config.client_retries) {
                        fate = Fate::Aborted;
                    }
                }
            }
            std::lock_guard lock(report_mutex);
            (fate == Fate::Replaced ? report.replaced : fate == Fate::Aborted ? report.aborted : report.retained)++;
        });
        result.examples = std::move(next);
        result.rounds.push_back(report);
    }
    return result;
}

} // namespace sgdl::subgoal
