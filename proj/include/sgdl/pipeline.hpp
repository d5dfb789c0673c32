#ifndef SGDL_PIPELINE_HPP
#define SGDL_PIPELINE_HPP

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "sgdl/checkpoint.hpp"
#include "sgdl/clients.hpp"
#include "sgdl/organizer.hpp"
#include "sgdl/pool.hpp"
#include "sgdl/training.hpp"

namespace sgdl::pipeline {

struct Problem {
    std::string id;
    std::string statement;
};

/// JSON-lines of {id, statement}; ids must be unique. Errors name the source and line.
std::vector<Problem> parse_problems(const std::string &text, const std::string &source_name);

enum class Verdict { Pass, Fail, Error };

std::string to_string(Verdict verdict);

struct ProofAttempt {
    std::string statement_id;
    organizer::DemonstrationContext context; ///< of the last attempt made
    std::string subgoal_proof;
    std::string sketch;
    Verdict verdict = Verdict::Fail;
    std::string message;
    int llm_calls_used = 0; ///< over all attempts
    int attempts_used = 0;
};

/// False iff the sketch contains "sorry" or "oops" as a standalone word.
bool check_sketch(const std::string &sketch);

/// Everything a proof attempt reads. Clients must tolerate concurrent calls when
/// evaluation runs with several workers.
struct Resources {
    const std::vector<PoolRecord> &pool;
    const organizer::PoolView &view;
    const organizer::Model *model; ///< null: random organization
    clients::LlmClient &llm;
    clients::ProverClient &prover;
    clients::Embedder &embedder;
    const Prompts &prompts;
    organizer::OrganizerConfig organizer;
    clients::Sampling sampling;
    /// When set, demonstrations are packed to what the context limit leaves after the
    /// prompt text and a subgoal proof of up to max_output_tokens.
    int context_limit = 0;
    const clients::Tokenizer *tokenizer = nullptr;
};

/// Organizer budget for `problem` under the context limit of `resources`.
int demo_budget(const Problem &problem, const Resources &resources, int budget);

/// Pool view with token counts from the records and the given embeddings (may be empty
/// when no model is used).
organizer::PoolView make_view(const std::vector<PoolRecord> &pool, std::vector<std::vector<double>> embeddings);

/// Up to n_attempts rounds of organize, subgoal proof, sketch, check_sketch and prover;
/// stops at the first pass. Errors inside an attempt end that attempt with verdict Error.
ProofAttempt prove(const Problem &problem, const Resources &resources, int n_attempts, std::uint64_t seed);

struct TrainingPair {
    std::string problem_id;
    std::string statement;
    std::vector<int> order; ///< pool indices in context order
};

/// One pair per successful random organization. Organizations whose packed context is
/// empty are skipped, so budget 0 yields nothing.
std::vector<TrainingPair> collect_training_pairs(const std::vector<Problem> &problems, const Resources &resources,
                                                 int budget, int organizations, std::uint64_t seed);

/// Pairs file line {problem_id, statement, order: [pool ids]}.
std::string pairs_to_jsonl(const std::vector<TrainingPair> &pairs, const std::vector<PoolRecord> &pool);
std::vector<TrainingPair> parse_pairs(const std::string &text, const std::string &source_name,
                                      const std::vector<PoolRecord> &pool);

struct LedgerEntry {
    std::string problem_id;
    Verdict verdict = Verdict::Fail;
    int attempts = 0;
    int llm_calls = 0;
    std::vector<std::string> context_ids;
    std::string message;
};

struct Evaluation {
    int passed = 0;
    int total = 0;
    double pass_rate = 0.0;
    long llm_calls = 0;
    std::vector<LedgerEntry> ledger; ///< in problem order

    nlohmann::json to_json() const;
};

/// Proves every problem with seeds derived from the problem id, on up to `workers`
/// threads; the ledger is assembled in problem order.
Evaluation evaluate(const std::vector<Problem> &problems, const Resources &resources, int n_attempts, int workers,
                    std::uint64_t seed);

/// Embedding of each record's statement, in pool order.
std::vector<std::vector<double>> embed_pool(const std::vector<PoolRecord> &pool, clients::Embedder &embedder);

/// Embeddings file lines {id, vector} in pool order.
std::string embeddings_to_jsonl(const std::vector<PoolRecord> &pool, const std::vector<std::vector<double>> &embeddings);
/// Every pool id exactly once, all vectors of one length; result is in pool order.
std::vector<std::vector<double>> parse_embeddings(const std::string &text, const std::string &source_name,
                                                  const std::vector<PoolRecord> &pool);

/// Supervised instance for a pair: the path over the whole pool and its features.
gnn::Example training_example(const TrainingPair &pair, const std::vector<double> &statement_embedding,
                              const organizer::PoolView &view);

/// Model file with the candidate length law under extra["length_law"].
gnn::Checkpoint make_checkpoint(const gnn::DenoiserParams &params, const diffusion::NoiseSchedule &schedule,
                                const organizer::LengthLaw &lengths);
/// Falls back to the uniform length law when the file carries none.
organizer::Model model_from_checkpoint(const gnn::Checkpoint &checkpoint);

/// |collection union inference| / total.
double cumulative_pass_rate(const std::set<std::string> &collection, const std::set<std::string> &inference,
                            int total);

} // namespace sgdl::pipeline

#endif // SGDL_PIPELINE_HPP
