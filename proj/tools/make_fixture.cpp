// Writes the scripted 20-problem evaluation suite: pool, problems, config and the
// LLM transcript recorded from a scripted author. The suite is replayed before
// anything is written, so a seed whose prompts collide is reported instead of saved.

#include <filesystem>
#include <iostream>
#include <map>
#include <mutex>

#include "sgdl/config.hpp"
#include "sgdl/errors.hpp"
#include "sgdl/fileio.hpp"
#include "sgdl/pipeline.hpp"

using namespace sgdl;
using nlohmann::json;

namespace {

enum class Behavior { Pass, PassSecond, FalseClaim, Sorry, Oops, Missing, WrongArithmetic };

struct Scripted {
    std::string statement;
    std::string claim; ///< the equation the author writes into the sketch
    Behavior behavior;
};

std::vector<Scripted> script() {
    return {
        {"Show that 2 + 3 = 5.", "2 + 3 = 5", Behavior::Pass},
        {"Show that 7 * 6 = 42.", "7 * 6 = 42", Behavior::Pass},
        {"Show that (4 + 5) * 3 = 27.", "(4 + 5) * 3 = 27", Behavior::Pass},
        {"Show that 100 - 58 = 42.", "100 - 58 = 42", Behavior::Pass},
        {"Show that 12 * 12 = 144.", "12 * 12 = 144", Behavior::Pass},
        {"Show that 2 * (3 + 4) - 5 = 9.", "2 * (3 + 4) - 5 = 9", Behavior::Pass},
        {"Show that 15 * 15 - 25 = 200.", "15 * 15 - 25 = 200", Behavior::Pass},
        {"Show that -3 * -3 = 9.", "-3 * -3 = 9", Behavior::Pass},
        {"Show that 1000 - 1 = 999.", "1000 - 1 = 999", Behavior::Pass},
        {"Show that 8 * 125 = 1000.", "8 * 125 = 1000", Behavior::Pass},
        {"Show that 11 * 11 = 121.", "11 * 11 = 121", Behavior::PassSecond},
        {"Show that 9 + 10 = 19.", "9 + 10 = 19", Behavior::PassSecond},
        {"Show that 6 * 7 + 8 = 50.", "6 * 7 + 8 = 50", Behavior::PassSecond},
        {"Show that 2 + 2 = 5.", "2 + 2 = 5", Behavior::FalseClaim},
        {"Show that 3 * 3 = 10.", "3 * 3 = 10", Behavior::FalseClaim},
        {"Show that 10 - 4 = 7.", "10 - 4 = 7", Behavior::FalseClaim},
        {"Show that 5 * 5 = 25.", "5 * 5 = 25", Behavior::Sorry},
        {"Show that 14 + 28 = 42.", "14 + 28 = 42", Behavior::Oops},
        {"Show that 13 * 3 = 39.", "13 * 3 = 39", Behavior::Missing},
        {"Show that 9 * 9 = 81.", "9 * 9 = 72", Behavior::WrongArithmetic},
    };
}

std::vector<PoolRecord> pool_records() {
    const std::vector<std::pair<std::string, std::string>> claims = {
        {"1 + 1 = 2", "Add one to one."},       {"3 * 4 = 12", "Multiply three by four."},
        {"20 - 7 = 13", "Subtract seven."},     {"(1 + 2) * 5 = 15", "Add, then multiply by five."},
        {"6 * 6 = 36", "Square six."},          {"50 - 25 = 25", "Halve fifty by subtraction."},
        {"2 * 2 * 2 = 8", "Multiply out the cube."}, {"9 - 12 = -3", "Subtract past zero."},
    };
    std::vector<PoolRecord> pool;
    for (std::size_t k = 0; k < claims.size(); ++k) {
        PoolRecord r;
        r.id = "demo" + std::to_string(k + 1);
        r.statement = "Show that " + claims[k].first + ".";
        r.subgoal_proof = "Step 1: " + claims[k].second + "\nStep 2: Conclude " + claims[k].first + ".\n";
        r.formal_sketch = "assert " + claims[k].first;
        pool.push_back(std::move(r));
    }
    return pool;
}

/// Last "Statement: " line of the prompt, which is the problem being asked about.
std::string asked_statement(const std::string &prompt) {
    const auto pos = prompt.rfind("Statement: ");
    if (pos == std::string::npos) {
        throw Error("prompt without a statement");
    }
    const auto start = pos + 11;
    return prompt.substr(start, prompt.find('\n', start) - start);
}

class Author {
public:
    explicit Author(const std::vector<Scripted> &items) {
        for (const auto &s : items) {
            by_statement_[s.statement] = s;
        }
    }

    std::string operator()(const clients::CompletionRequest &request) {
        const std::string &prompt = request.prompt;
        const Scripted &s = by_statement_.at(asked_statement(prompt));
        if (s.behavior == Behavior::Missing) {
            throw Error("scripted author has no answer for '" + s.statement + "'");
        }
        const bool sketch = prompt.size() >= 15 && prompt.compare(prompt.size() - 15, 15, "Formal sketch:\n") == 0;
        if (!sketch) {
            return "Step 1: Evaluate the left side.\nStep 2: Compare with the right side.";
        }
        std::lock_guard lock(mutex_);
        const int seen = sketches_[s.statement]++;
        switch (s.behavior) {
        case Behavior::PassSecond:
            return seen == 0 ? "sorry" : "assert " + s.claim;
        case Behavior::Sorry:
            return "assert " + s.claim + "\nsorry";
        case Behavior::Oops:
            return "oops";
        default:
            return "assert " + s.claim;
        }
    }

private:
    std::map<std::string, Scripted> by_statement_;
    std::map<std::string, int> sketches_;
    std::mutex mutex_;
};

std::vector<std::string> verdicts(const pipeline::Evaluation &e) {
    std::vector<std::string> out;
    for (const auto &l : e.ledger) {
        out.push_back(pipeline::to_string(l.verdict));
    }
    return out;
}

} // namespace

int main(int argc, char **argv) {
    if (argc != 2 && argc != 3) {
        std::cerr << "usage: " << argv[0] << " OUT_DIR [SEED]\n";
        return 2;
    }
    const std::filesystem::path dir = argv[1];
    RunConfig config;
    config.seed = argc == 3 ? std::stoull(argv[2]) : 1;
    config.pipeline.attempts = 2;
    const auto items = script();

    clients::HeuristicTokenizer tokenizer;
    auto pool = pool_records();
    for (auto &r : pool) {
        update_token_count(r, config.prompts, tokenizer);
    }
    std::vector<pipeline::Problem> problems;
    for (std::size_t k = 0; k < items.size(); ++k) {
        problems.push_back({"p" + std::to_string(k + 1), items[k].statement});
    }

    const auto view = pipeline::make_view(pool, {});
    clients::ToyProver prover;
    clients::HashEmbedder embedder;
    Author author(items);
    clients::FunctionLlm scripted([&](const clients::CompletionRequest &r) { return author(r); });
    clients::RecordingLlm recording(scripted);
    const pipeline::Resources recorded_res{pool,           view,          nullptr, recording, prover, embedder,
                                           config.prompts, config.organizer, config.clients.sampling,
                                           config.clients.context_limit, &tokenizer};
    const auto recorded = pipeline::evaluate(problems, recorded_res, config.pipeline.attempts, 1, config.seed);

    auto replay = clients::TranscriptLlm::from_jsonl(recording.to_jsonl());
    const pipeline::Resources replay_res{pool,           view,          nullptr, replay, prover, embedder,
                                         config.prompts, config.organizer, config.clients.sampling,
                                         config.clients.context_limit, &tokenizer};
    const auto replayed = pipeline::evaluate(problems, replay_res, config.pipeline.attempts, 1, config.seed);

    std::cerr << "recorded pass rate " << recorded.pass_rate << ", replayed " << replayed.pass_rate << ", "
              << recording.size() << " transcript records\n";
    if (recorded.passed != 13 || verdicts(recorded) != verdicts(replayed)) {
        std::cerr << "seed " << config.seed << " does not reproduce the scripted outcome; try another\n";
        return 1;
    }

    std::filesystem::create_directories(dir);
    std::string problems_text;
    for (const auto &p : problems) {
        problems_text += json{{"id", p.id}, {"statement", p.statement}}.dump() + '\n';
    }
    write_file_atomic((dir / "pool.jsonl").string(), pool_to_jsonl(pool));
    write_file_atomic((dir / "problems.jsonl").string(), problems_text);
    write_file_atomic((dir / "transcript.jsonl").string(), recording.to_jsonl());
    write_file_atomic((dir / "config.json").string(),
                      json{{"seed", config.seed}, {"pipeline", {{"attempts", config.pipeline.attempts}}}}.dump(2) +
                          '\n');
    return 0;
}
