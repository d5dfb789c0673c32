#ifndef SGDL_SUBGOAL_HPP
#define SGDL_SUBGOAL_HPP

#include <atomic>
#include <cstdint>
#include <string>
#include <vector>

#include "sgdl/clients.hpp"
#include "sgdl/pool.hpp"

namespace sgdl::subgoal {

/// A subgoal plus the verified step from it to the next one in its sequence.
struct Subgoal {
    std::string text;
    std::string proof;     ///< proof of the step to the next subgoal, when verified
    bool verified = false; ///< the step to the next subgoal was accepted by the prover

    bool operator==(const Subgoal &) const = default;
};

/// s_0 ... s_{D+1}. The flags of the last subgoal are unused.
struct SubgoalSequence {
    std::string statement;
    std::string sketch;
    std::vector<Subgoal> steps;

    /// Every adjacent pair verified.
    bool valid() const;
    std::vector<std::string> texts() const;
};

struct RefinementConfig {
    int iterations = 15;
    int max_correct_depth = 3;
    int max_branch = 6;            ///< widest accepted decomposition, counted in steps
    int demo_sample_budget = 2048; ///< tokens of demonstrations per initialization prompt
    int client_retries = 2;        ///< extra tries of an example after a client error
    int workers = 1;               ///< examples refined concurrently within a round
    clients::Sampling sampling;

    void validate() const;
};

struct Counters {
    std::atomic<long> llm_calls{0};
    std::atomic<long> verify_calls{0};
    std::atomic<long> correct_calls{0};
};

/// What the refinement functions need besides their arguments.
struct Engine {
    clients::LlmClient &llm;
    clients::ProverClient &prover;
    const Prompts &prompts;
    RefinementConfig config;
    Counters *counters = nullptr;
};

/// s_0: the text before the last standalone "shows" without a leading "assumes",
/// or "no assumptions" when that is empty or there is no "shows".
std::string initial_state(const std::string &statement);
/// s_{D+1}: the text after the last standalone "shows", or the whole statement.
std::string final_state(const std::string &statement);

/// Lines "Step <k>: text" with k = 1, 2, ... in order; following lines continue the step.
/// Anything else raises ParseError carrying `text`.
std::vector<std::string> parse_steps(const std::string &text);

/// "Step 1: ...\n" lines of the given subgoals.
std::string format_steps(const std::vector<std::string> &steps);

/// Prompts with a random order of `demos` packed to the demo budget, parses s_1..s_D and
/// adds s_0 and s_{D+1}.
SubgoalSequence initialize_subgoals(const std::string &statement, const std::string &sketch,
                                    const std::vector<PoolRecord> &demos, Engine &engine, std::uint64_t seed);

struct VerifyOutcome {
    bool passed = false;
    std::string proof;
    std::string message;
};

/// Asks the LLM for a proof of from -> to and checks the assembled theory with the prover.
VerifyOutcome verify(const std::string &from, const std::string &to, const std::string &statement, Engine &engine);

/// Finer steps for from -> to, as returned by the LLM; the last one restates `to`.
/// Raises CorrectionFailed unless there are 2..max_branch steps.
std::vector<std::string> correct(const std::string &from, const std::string &to, const std::string &statement,
                                 Engine &engine);

/// Segment from `from` to `to` inclusive; each pair is verified or left unverified.
/// After a failed verify the decomposition minus its last step is inserted between the
/// endpoints and every new pair is handled at depth + 1.
std::vector<Subgoal> verify_and_correct(const std::string &from, const std::string &to, int depth,
                                        const std::string &statement, Engine &engine);

/// Splits off the first pair and recurses on the rest; the shared subgoal appears once.
std::vector<Subgoal> refine(const std::string &first, const std::string &last, const std::vector<std::string> &middles,
                            const std::string &statement, Engine &engine);

struct RoundReport {
    int replaced = 0; ///< examples whose refined sequence was valid
    int retained = 0; ///< examples kept from the previous round
    int aborted = 0;  ///< examples given up after client errors
};

struct RefinementResult {
    std::vector<PoolRecord> examples;
    std::vector<RoundReport> rounds;
};

/// K rounds of initialize + refine over the whole set, each round using the previous one
/// as demonstrations (minus the example itself). A refined proof replaces the old one only
/// when valid. Token counts are recomputed with `tokenizer`.
RefinementResult iterative_refinement(const std::vector<PoolRecord> &seed_examples, Engine &engine,
                                      const clients::Tokenizer &tokenizer, std::uint64_t seed);

} // namespace sgdl::subgoal

#endif // SGDL_SUBGOAL_HPP
