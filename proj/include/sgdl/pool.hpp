#ifndef SGDL_POOL_HPP
#define SGDL_POOL_HPP

#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "sgdl/clients.hpp"

namespace sgdl {

/// One demonstration example.
struct PoolRecord {
    std::string id;
    std::string statement;
    std::string subgoal_proof; ///< may be empty before refinement
    std::string formal_sketch;
    int token_count = 0;       ///< tokens of the rendered demonstration

    bool operator==(const PoolRecord &) const = default;
};

/// Prompt templates. `{name}` placeholders are filled by `fill`; other braces are literal.
struct Prompts {
    std::string demo = "Statement: {statement}\nSubgoal proof:\n{subgoal_proof}\nFormal sketch:\n{formal_sketch}\n";
    std::string initialize = "{demos}\nStatement: {statement}\nFormal sketch:\n{sketch}\n"
                             "Write the subgoal proof as lines 'Step k: ...'.\n";
    std::string verify = "Statement: {statement}\nFrom: {from}\nTo: {to}\nProve this step.\n";
    std::string correct = "Statement: {statement}\nFrom: {from}\nTo: {to}\n"
                          "This step could not be proved. Split it into finer lines 'Step k: ...'; "
                          "the last line restates the target.\n";
    std::string step_theory = "{proof}";
    std::string subgoal_proof = "{demos}\nStatement: {statement}\nSubgoal proof:\n";
    std::string sketch = "{demos}\nStatement: {statement}\nSubgoal proof:\n{subgoal_proof}\nFormal sketch:\n";
    std::string sketch_theory = "{sketch}";

    nlohmann::json to_json() const;
    /// Missing fields keep their defaults.
    static Prompts from_json(const nlohmann::json &j);

    bool operator==(const Prompts &) const = default;
};

/// Replaces each `{name}` whose name is a key of `vars`. Substituted text is not rescanned.
std::string fill(const std::string &tmpl, const std::map<std::string, std::string> &vars);

std::string render_demo(const Prompts &prompts, const PoolRecord &record);

/// Demonstrations in the given order, separated by blank lines.
std::string render_demos(const Prompts &prompts, const std::vector<PoolRecord> &pool, const std::vector<int> &ids);

/// Sets token_count from the rendered demonstration.
void update_token_count(PoolRecord &record, const Prompts &prompts, const clients::Tokenizer &tokenizer);

/// JSON-lines of {id, statement, subgoal_proof, formal_sketch}. token_count is always
/// recomputed. Errors name the source and line.
std::vector<PoolRecord> parse_pool(const std::string &text, const std::string &source_name, const Prompts &prompts,
                                   const clients::Tokenizer &tokenizer);

std::string pool_to_jsonl(const std::vector<PoolRecord> &pool);

/// Index of each id.
std::map<std::string, int> pool_index(const std::vector<PoolRecord> &pool);

} // namespace sgdl

#endif // SGDL_POOL_HPP
