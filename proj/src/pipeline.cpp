#include "sgdl/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

#include "sgdl/errors.hpp"
#include "sgdl/parallel.hpp"
#include "sgdl/rng.hpp"

namespace sgdl::pipeline {

using nlohmann::json;

namespace {

bool word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

bool contains_word(const std::string &text, const std::string &word) {
    for (auto pos = text.find(word); pos != std::string::npos; pos = text.find(word, pos + 1)) {
        const bool left = pos == 0 || !word_char(text[pos - 1]);
        const bool right = pos + word.size() == text.size() || !word_char(text[pos + word.size()]);
        if (left && right) {
            return true;
        }
    }
    return false;
}

/// Proof, sketch, check and prover for one packed context. Client errors propagate.
void run_attempt(const Problem &problem, const Resources &res, ProofAttempt &out) {
    const std::string demos = render_demos(res.prompts, res.pool, out.context.example_ids);
    ++out.llm_calls_used;
    out.subgoal_proof = res.llm.complete(
        res.sampling.request(fill(res.prompts.subgoal_proof, {{"demos", demos}, {"statement", problem.statement}})));
    ++out.llm_calls_used;
    out.sketch = res.llm.complete(res.sampling.request(fill(
        res.prompts.sketch,
        {{"demos", demos}, {"statement", problem.statement}, {"subgoal_proof", out.subgoal_proof}})));
    if (!check_sketch(out.sketch)) {
        out.verdict = Verdict::Fail;
        out.message = "sketch contains sorry or oops";
        return;
    }
    const auto result = res.prover.verify_theory(
        fill(res.prompts.sketch_theory, {{"sketch", out.sketch}, {"statement", problem.statement}}));
    out.verdict = result.accepted ? Verdict::Pass : Verdict::Fail;
    out.message = result.message;
}

/// Runs one attempt, turning library errors into an Error verdict.
void guarded_attempt(const Problem &problem, const Resources &res, ProofAttempt &out) {
    try {
        run_attempt(problem, res, out);
    } catch (const Error &e) {
        out.verdict = Verdict::Error;
        out.message = e.what();
    }
}

std::vector<int> id_indices(const json &ids, const std::map<std::string, int> &index, const std::string &where) {
    std::vector<int> out;
    for (const auto &id : ids) {
        const auto it = index.find(id.get<std::string>());
        if (it == index.end()) {
            throw FormatError(where, "unknown pool id '" + id.get<std::string>() + "'");
        }
        out.push_back(it->second);
    }
    return out;
}

} // namespace

std::vector<Problem> parse_problems(const std::string &text, const std::string &source_name) {
    std::vector<Problem> problems;
    std::set<std::string> ids;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (clients::normalize_prompt(line).empty()) {
            continue;
        }
        const std::string where = source_name + ":" + std::to_string(line_no);
        Problem p;
        try {
            const json j = json::parse(line);
            p.id = j.at("id").get<std::string>();
            p.statement = j.at("statement").get<std::string>();
        } catch (const json::exception &e) {
            throw FormatError(where, e.what());
        }
        if (p.id.empty() || p.statement.empty()) {
            throw FormatError(where, "id and statement must be non-empty");
        }
        if (!ids.insert(p.id).second) {
            throw FormatError(where, "duplicate id '" + p.id + "'");
        }
        problems.push_back(std::move(p));
    }
    return problems;
}

std::string to_string(Verdict verdict) {
    switch (verdict) {
    case Verdict::Pass:
        return "pass";
    case Verdict::Fail:
        return "fail";
    case Verdict::Error:
        return "error";
    }
    return "unknown";
}

bool check_sketch(const std::string &sketch) { return !contains_word(sketch, "sorry") && !contains_word(sketch, "oops"); }

organizer::PoolView make_view(const std::vector<PoolRecord> &pool, std::vector<std::vector<double>> embeddings) {
    organizer::PoolView view;
    for (const auto &r : pool) {
        view.token_counts.push_back(r.token_count);
    }
    view.embeddings = std::move(embeddings);
    return view;
}

int demo_budget(const Problem &problem, const Resources &resources, int budget) {
    if (resources.context_limit <= 0 || resources.tokenizer == nullptr) {
        return budget;
    }
    const auto &tok = *resources.tokenizer;
    const int proof_prompt =
        tok.count(fill(resources.prompts.subgoal_proof, {{"demos", ""}, {"statement", problem.statement}}));
    const int sketch_prompt =
        tok.count(fill(resources.prompts.sketch,
                       {{"demos", ""}, {"statement", problem.statement}, {"subgoal_proof", ""}})) +
        resources.sampling.max_output_tokens;
    return std::clamp(resources.context_limit - std::max(proof_prompt, sketch_prompt), 0, budget);
}

ProofAttempt prove(const Problem &problem, const Resources &resources, int n_attempts, std::uint64_t seed) {
    if (n_attempts < 1) {
        throw InvalidArgument("prove needs at least one attempt");
    }
    ProofAttempt out;
    out.statement_id = problem.id;
    std::vector<double> embedding;
    auto config = resources.organizer;
    config.budget = demo_budget(problem, resources, config.budget);
    for (int a = 0; a < n_attempts; ++a) {
        ++out.attempts_used;
        out.subgoal_proof.clear();
        out.sketch.clear();
        out.context = {};
        try {
            if (resources.model != nullptr && embedding.empty()) {
                embedding = resources.embedder.embed(problem.statement);
            }
            out.context = organizer::organize(embedding, resources.view, resources.model, config,
                                              derive_seed(seed, static_cast<std::uint64_t>(a)))
                              .context;
        } catch (const Error &e) {
            out.verdict = Verdict::Error;
            out.message = e.what();
            continue;
        }
        guarded_attempt(problem, resources, out);
        if (out.verdict == Verdict::Pass) {
            break;
        }
    }
    return out;
}

std::vector<TrainingPair> collect_training_pairs(const std::vector<Problem> &problems, const Resources &resources,
                                                 int budget, int organizations, std::uint64_t seed) {
    if (budget < 0 || organizations < 0) {
        throw InvalidArgument("collection needs a non-negative budget and organization count");
    }
    auto config = resources.organizer;
    std::vector<TrainingPair> pairs;
    const std::uint64_t collect_seed = derive_seed(seed, "collect");
    for (const auto &problem : problems) {
        const std::uint64_t problem_seed = derive_seed(collect_seed, problem.id);
        config.budget = demo_budget(problem, resources, budget);
        for (int r = 0; r < organizations; ++r) {
            ProofAttempt attempt;
            attempt.statement_id = problem.id;
            attempt.context = organizer::organize({}, resources.view, nullptr, config,
                                                  derive_seed(problem_seed, static_cast<std::uint64_t>(r)))
                                  .context;
            if (attempt.context.example_ids.empty()) {
                continue;
            }
            guarded_attempt(problem, resources, attempt);
            if (attempt.verdict == Verdict::Pass) {
                pairs.push_back({problem.id, problem.statement, attempt.context.example_ids});
            }
        }
    }
    return pairs;
}

std::string pairs_to_jsonl(const std::vector<TrainingPair> &pairs, const std::vector<PoolRecord> &pool) {
    std::string out;
    for (const auto &p : pairs) {
        json ids = json::array();
        for (int k : p.order) {
            ids.push_back(pool.at(static_cast<std::size_t>(k)).id);
        }
        out += json{{"problem_id", p.problem_id}, {"statement", p.statement}, {"order", ids}}.dump();
        out += '\n';
    }
    return out;
}

std::vector<TrainingPair> parse_pairs(const std::string &text, const std::string &source_name,
                                      const std::vector<PoolRecord> &pool) {
    const auto index = pool_index(pool);
    std::vector<TrainingPair> pairs;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (clients::normalize_prompt(line).empty()) {
            continue;
        }
        const std::string where = source_name + ":" + std::to_string(line_no);
        TrainingPair p;
        try {
            const json j = json::parse(line);
            p.problem_id = j.at("problem_id").get<std::string>();
            p.statement = j.at("statement").get<std::string>();
            p.order = id_indices(j.at("order"), index, where);
        } catch (const json::exception &e) {
            throw FormatError(where, e.what());
        }
        std::set<int> seen(p.order.begin(), p.order.end());
        if (p.order.empty() || seen.size() != p.order.size()) {
            throw FormatError(where, "order must be a non-empty list of distinct pool ids");
        }
        pairs.push_back(std::move(p));
    }
    return pairs;
}

json Evaluation::to_json() const {
    json entries = json::array();
    for (const auto &e : ledger) {
        entries.push_back({{"problem_id", e.problem_id},
                           {"verdict", to_string(e.verdict)},
                           {"attempts", e.attempts},
                           {"llm_calls", e.llm_calls},
                           {"context_ids", e.context_ids},
                           {"message", e.message}});
    }
    return {{"pass_rate", pass_rate}, {"passed", passed}, {"total", total}, {"llm_calls", llm_calls},
            {"problems", entries}};
}

Evaluation evaluate(const std::vector<Problem> &problems, const Resources &resources, int n_attempts, int workers,
                    std::uint64_t seed) {
    if (problems.empty()) {
        throw InvalidArgument("cannot evaluate an empty problem set");
    }
    if (n_attempts < 1) {
        throw InvalidArgument("evaluation needs at least one attempt per problem");
    }
    std::vector<ProofAttempt> attempts(problems.size());
    const std::uint64_t eval_seed = derive_seed(seed, "evaluate");
    parallel_for(problems.size(), workers, [&](std::size_t k) {
        attempts[k] = prove(problems[k], resources, n_attempts, derive_seed(eval_seed, problems[k].id));
    });

    Evaluation out;
    out.total = static_cast<int>(problems.size());
    for (const auto &a : attempts) {
        LedgerEntry e;
        e.problem_id = a.statement_id;
        e.verdict = a.verdict;
        e.attempts = a.attempts_used;
        e.llm_calls = a.llm_calls_used;
        e.message = a.message;
        for (int id : a.context.example_ids) {
            e.context_ids.push_back(resources.pool.at(static_cast<std::size_t>(id)).id);
        }
        out.passed += a.verdict == Verdict::Pass ? 1 : 0;
        out.llm_calls += a.llm_calls_used;
        out.ledger.push_back(std::move(e));
    }
    out.pass_rate = static_cast<double>(out.passed) / out.total;
    return out;
}

std::vector<std::vector<double>> embed_pool(const std::vector<PoolRecord> &pool, clients::Embedder &embedder) {
    std::vector<std::vector<double>> out;
    out.reserve(pool.size());
    for (const auto &r : pool) {
        out.push_back(embedder.embed(r.statement));
    }
    return out;
}

std::string embeddings_to_jsonl(const std::vector<PoolRecord> &pool,
                                const std::vector<std::vector<double>> &embeddings) {
    if (embeddings.size() != pool.size()) {
        throw InvalidArgument("one embedding per pool record is required");
    }
    std::string out;
    for (std::size_t k = 0; k < pool.size(); ++k) {
        out += json{{"id", pool[k].id}, {"vector", embeddings[k]}}.dump();
        out += '\n';
    }
    return out;
}

std::vector<std::vector<double>> parse_embeddings(const std::string &text, const std::string &source_name,
                                                  const std::vector<PoolRecord> &pool) {
    const auto index = pool_index(pool);
    std::vector<std::vector<double>> out(pool.size());
    std::vector<bool> seen(pool.size(), false);
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    std::size_t dim = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (clients::normalize_prompt(line).empty()) {
            continue;
        }
        const std::string where = source_name + ":" + std::to_string(line_no);
        std::string id;
        std::vector<double> v;
        try {
            const json j = json::parse(line);
            id = j.at("id").get<std::string>();
            v = j.at("vector").get<std::vector<double>>();
        } catch (const json::exception &e) {
            throw FormatError(where, e.what());
        }
        const auto it = index.find(id);
        if (it == index.end()) {
            throw FormatError(where, "unknown pool id '" + id + "'");
        }
        const auto k = static_cast<std::size_t>(it->second);
        if (seen[k]) {
            throw FormatError(where, "duplicate id '" + id + "'");
        }
        if (v.empty() || (dim != 0 && v.size() != dim)) {
            throw FormatError(where, "vector length " + std::to_string(v.size()) + " differs from " +
                                         std::to_string(dim));
        }
        dim = v.size();
        seen[k] = true;
        out[k] = std::move(v);
    }
    for (std::size_t k = 0; k < pool.size(); ++k) {
        if (!seen[k]) {
            throw FormatError(source_name, "no embedding for pool id '" + pool[k].id + "'");
        }
    }
    return out;
}

gnn::Example training_example(const TrainingPair &pair, const std::vector<double> &statement_embedding,
                              const organizer::PoolView &view) {
    gnn::Example ex{organizer::encode_path(pair.order, view.size()), {statement_embedding, view.embeddings}};
    return ex;
}

gnn::Checkpoint make_checkpoint(const gnn::DenoiserParams &params, const diffusion::NoiseSchedule &schedule,
                                const organizer::LengthLaw &lengths) {
    gnn::Checkpoint ck{params, schedule, json::object()};
    ck.extra["length_law"] = lengths.to_json();
    return ck;
}

organizer::Model model_from_checkpoint(const gnn::Checkpoint &checkpoint) {
    organizer::Model model{checkpoint.params, checkpoint.schedule, {}};
    const int n = checkpoint.params.config.pool_size;
    if (checkpoint.extra.contains("length_law")) {
        try {
            model.lengths = organizer::LengthLaw::from_json(checkpoint.extra.at("length_law"));
        } catch (const std::exception &e) {
            throw FormatError("extra.length_law", e.what());
        }
    }
    if (model.lengths.empty()) {
        model.lengths = organizer::LengthLaw::fallback(n);
    }
    return model;
}

double cumulative_pass_rate(const std::set<std::string> &collection, const std::set<std::string> &inference,
                            int total) {
    if (total < 1) {
        throw InvalidArgument("cumulative pass rate needs a positive total");
    }
    std::set<std::string> all = collection;
    all.insert(inference.begin(), inference.end());
    if (static_cast<int>(all.size()) > total) {
        throw InvalidArgument("more solved problems than problems");
    }
    return static_cast<double>(all.size()) / total;
}

} // namespace sgdl::pipeline
