#include <iostream>
#include <memory>
#include <optional>

#include "CLI11.hpp"
#include "sgdl/config.hpp"
#include "sgdl/errors.hpp"
#include "sgdl/fileio.hpp"
#include "sgdl/pipeline.hpp"
#include "sgdl/rng.hpp"

using namespace sgdl;
using nlohmann::json;

namespace {

/// Client adapters selected by the config, wrapped in context check, retry and limiter.
class ClientStack {
public:
    explicit ClientStack(const ClientSettings &s) : limiter_(s.in_flight) {
        if (!s.fixtures.empty()) {
            base_llm_ = std::make_unique<clients::TranscriptLlm>(clients::TranscriptLlm::load(s.fixtures));
        } else {
            base_llm_ = std::make_unique<clients::HttpLlm>(s.llm.with_env_overrides());
        }
        checked_ = std::make_unique<clients::ContextCheckedLlm>(*base_llm_, tokenizer, s.context_limit);
        llm_ = std::make_unique<clients::GuardedLlm>(*checked_, s.retry, &limiter_);
        if (s.prover_command.empty()) {
            base_prover_ = std::make_unique<clients::ToyProver>();
        } else {
            base_prover_ = std::make_unique<clients::ProcessProver>(s.prover_command,
                                                                    std::chrono::seconds(s.prover_timeout_seconds));
        }
        prover_ = std::make_unique<clients::GuardedProver>(*base_prover_, s.retry, &limiter_);
        if (s.embedder.url.empty()) {
            embedder_ = std::make_unique<clients::HashEmbedder>(s.embed_seed);
        } else {
            embedder_ = std::make_unique<clients::HttpEmbedder>(s.embedder);
        }
    }

    clients::LlmClient &llm() { return *llm_; }
    clients::ProverClient &prover() { return *prover_; }
    clients::Embedder &embedder() { return *embedder_; }

    clients::HeuristicTokenizer tokenizer;

private:
    clients::CallLimiter limiter_;
    std::unique_ptr<clients::LlmClient> base_llm_;
    std::unique_ptr<clients::ContextCheckedLlm> checked_;
    std::unique_ptr<clients::GuardedLlm> llm_;
    std::unique_ptr<clients::ProverClient> base_prover_;
    std::unique_ptr<clients::GuardedProver> prover_;
    std::unique_ptr<clients::Embedder> embedder_;
};

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string pool;
    std::string embeddings;
    std::string checkpoint;
    std::string fixtures;
    std::string out;
    std::string problems;
    std::string pairs;
    std::string statement;
    std::optional<int> attempts;
    std::optional<int> budget;
    std::optional<int> organizations;
    std::optional<int> workers;
    std::optional<double> validation_fraction;
};

RunConfig effective_config(const Options &o) {
    RunConfig c = o.config.empty() ? RunConfig{} : load_config(o.config);
    if (o.seed) {
        c.seed = *o.seed;
    }
    if (!o.fixtures.empty()) {
        c.clients.fixtures = o.fixtures;
    }
    if (o.attempts) {
        c.pipeline.attempts = *o.attempts;
    }
    if (o.budget) {
        c.organizer.budget = *o.budget;
    }
    if (o.organizations) {
        c.pipeline.collection_organizations = *o.organizations;
    }
    if (o.workers) {
        c.pipeline.workers = *o.workers;
        c.refinement.workers = *o.workers;
    }
    if (o.validation_fraction) {
        c.training.validation_fraction = *o.validation_fraction;
    }
    c.validate();
    return c;
}

void emit(const Options &o, const std::string &bytes) {
    if (o.out.empty()) {
        std::cout << bytes;
    } else {
        write_file_atomic(o.out, bytes);
    }
}

std::vector<PoolRecord> load_pool(const std::string &path, const RunConfig &c, const clients::Tokenizer &tokenizer) {
    return parse_pool(read_file(path), path, c.prompts, tokenizer);
}

std::vector<std::vector<double>> pool_embeddings(const Options &o, const std::vector<PoolRecord> &pool,
                                                 ClientStack &stack) {
    if (!o.embeddings.empty()) {
        return pipeline::parse_embeddings(read_file(o.embeddings), o.embeddings, pool);
    }
    return pipeline::embed_pool(pool, stack.embedder());
}

std::optional<organizer::Model> load_model(const Options &o) {
    if (o.checkpoint.empty()) {
        return std::nullopt;
    }
    return pipeline::model_from_checkpoint(gnn::load_checkpoint(o.checkpoint));
}

void check_model(const organizer::Model &model, const organizer::PoolView &view) {
    const auto &mc = model.params.config;
    if (mc.pool_size != view.size()) {
        throw InvalidArgument("checkpoint was trained on " + std::to_string(mc.pool_size) + " pool records, pool has " +
                              std::to_string(view.size()));
    }
    if (!view.embeddings.empty() && static_cast<int>(view.embeddings.front().size()) != mc.embed_dim) {
        throw InvalidArgument("checkpoint expects embeddings of length " + std::to_string(mc.embed_dim));
    }
}

int cmd_ingest(const Options &o) {
    const RunConfig c = effective_config(o);
    ClientStack stack(c.clients);
    const auto pool = load_pool(o.pool, c, stack.tokenizer);
    emit(o, pipeline::embeddings_to_jsonl(pool, pipeline::embed_pool(pool, stack.embedder())));
    return 0;
}

int cmd_collect(const Options &o) {
    const RunConfig c = effective_config(o);
    ClientStack stack(c.clients);
    const auto pool = load_pool(o.pool, c, stack.tokenizer);
    const auto problems = pipeline::parse_problems(read_file(o.problems), o.problems);
    const auto view = pipeline::make_view(pool, {});
    const pipeline::Resources res{pool,         view,       nullptr,     stack.llm(), stack.prover(), stack.embedder(),
                                  c.prompts,    c.organizer, c.clients.sampling, c.clients.context_limit,
                                  &stack.tokenizer};
    const auto pairs = pipeline::collect_training_pairs(problems, res, c.organizer.budget,
                                                        c.pipeline.collection_organizations, c.seed);
    emit(o, pipeline::pairs_to_jsonl(pairs, pool));
    std::cerr << "collected " << pairs.size() << " pairs\n";
    return 0;
}

int cmd_train(const Options &o) {
    const RunConfig c = effective_config(o);
    ClientStack stack(c.clients);
    const auto pool = load_pool(o.pool, c, stack.tokenizer);
    const auto pairs = pipeline::parse_pairs(read_file(o.pairs), o.pairs, pool);
    if (pairs.empty()) {
        throw InvalidArgument(o.pairs + " holds no training pairs");
    }
    const auto view = pipeline::make_view(pool, pool_embeddings(o, pool, stack));

    std::vector<gnn::Example> examples;
    std::vector<int> lengths;
    for (const auto &p : pairs) {
        examples.push_back(pipeline::training_example(p, stack.embedder().embed(p.statement), view));
        lengths.push_back(static_cast<int>(p.order.size()));
    }
    auto n_val = static_cast<std::size_t>(c.training.validation_fraction * static_cast<double>(examples.size()));
    n_val = std::min(n_val, examples.size() - 1);
    const std::vector<gnn::Example> validation(examples.end() - static_cast<std::ptrdiff_t>(n_val), examples.end());
    examples.resize(examples.size() - n_val);

    gnn::DenoiserConfig dc;
    dc.layers = c.denoiser.layers;
    dc.hidden_dim = c.denoiser.hidden_dim;
    dc.time_embed_dim = c.denoiser.time_embed_dim;
    dc.embed_dim = static_cast<int>(view.embeddings.front().size());
    dc.pool_size = view.size();
    const auto schedule = c.diffusion.build();
    const auto result = gnn::train(examples, validation, dc, schedule, c.training.train, derive_seed(c.seed, "train"));
    for (const auto &e : result.log) {
        std::cerr << "epoch " << e.epoch << " train " << e.train_loss << " val " << e.val_loss << '\n';
    }
    if (result.diverged) {
        throw NumericError("training diverged");
    }
    gnn::save_checkpoint(pipeline::make_checkpoint(result.params, schedule,
                                                   organizer::LengthLaw::from_lengths(lengths)),
                         o.out);
    std::cerr << "best epoch " << result.best_epoch << '\n';
    return 0;
}

int cmd_organize(const Options &o) {
    const RunConfig c = effective_config(o);
    ClientStack stack(c.clients);
    const auto pool = load_pool(o.pool, c, stack.tokenizer);
    const auto model = load_model(o);
    std::vector<std::vector<double>> embeddings;
    std::vector<double> statement;
    if (model) {
        embeddings = pool_embeddings(o, pool, stack);
        statement = stack.embedder().embed(o.statement);
    }
    const auto view = pipeline::make_view(pool, std::move(embeddings));
    if (model) {
        check_model(*model, view);
    }
    const auto org = organizer::organize(statement, view, model ? &*model : nullptr, c.organizer,
                                         derive_seed(c.seed, "organize"));
    std::string text;
    for (int id : org.context.example_ids) {
        text += pool.at(static_cast<std::size_t>(id)).id + '\n';
    }
    emit(o, text);
    return 0;
}

int cmd_refine(const Options &o) {
    const RunConfig c = effective_config(o);
    ClientStack stack(c.clients);
    const auto pool = load_pool(o.pool, c, stack.tokenizer);
    subgoal::Counters counters;
    subgoal::Engine engine{stack.llm(), stack.prover(), c.prompts, c.refinement, &counters};
    const auto result = subgoal::iterative_refinement(pool, engine, stack.tokenizer, c.seed);
    for (std::size_t r = 0; r < result.rounds.size(); ++r) {
        const auto &round = result.rounds[r];
        std::cerr << "round " << r + 1 << " replaced " << round.replaced << " retained " << round.retained
                  << " aborted " << round.aborted << '\n';
    }
    std::cerr << "llm calls " << counters.llm_calls << " verify calls " << counters.verify_calls << '\n';
    emit(o, pool_to_jsonl(result.examples));
    return 0;
}

/// Shared by prove and evaluate: pool, optional model and embeddings, then the pipeline.
pipeline::Evaluation run_pipeline(const Options &o, const RunConfig &c, ClientStack &stack,
                                  const std::vector<pipeline::Problem> &problems) {
    const auto pool = load_pool(o.pool, c, stack.tokenizer);
    const auto model = load_model(o);
    const auto view = pipeline::make_view(pool, model ? pool_embeddings(o, pool, stack)
                                                      : std::vector<std::vector<double>>{});
    if (model) {
        check_model(*model, view);
    }
    const pipeline::Resources res{pool,      view,        model ? &*model : nullptr, stack.llm(), stack.prover(),
                                  stack.embedder(), c.prompts, c.organizer, c.clients.sampling, c.clients.context_limit,
                                  &stack.tokenizer};
    return pipeline::evaluate(problems, res, c.pipeline.attempts, c.pipeline.workers, c.seed);
}

void report(const pipeline::Evaluation &e) {
    std::cout << "pass_rate " << e.pass_rate << '\n'
              << "passed " << e.passed << " of " << e.total << '\n'
              << "llm_calls " << e.llm_calls << '\n';
}

int cmd_prove(const Options &o) {
    const RunConfig c = effective_config(o);
    ClientStack stack(c.clients);
    const auto eval = run_pipeline(o, c, stack, {{"statement", o.statement}});
    const auto &entry = eval.ledger.front();
    std::cout << "verdict " << pipeline::to_string(entry.verdict) << '\n';
    if (!entry.message.empty()) {
        std::cout << "message " << entry.message << '\n';
    }
    if (!o.out.empty()) {
        write_file_atomic(o.out, eval.to_json().dump(2) + '\n');
    }
    return 0;
}

int cmd_evaluate(const Options &o) {
    const RunConfig c = effective_config(o);
    ClientStack stack(c.clients);
    const auto problems = pipeline::parse_problems(read_file(o.problems), o.problems);
    const auto eval = run_pipeline(o, c, stack, problems);
    if (!o.out.empty()) {
        write_file_atomic(o.out, eval.to_json().dump(2) + '\n');
    }
    report(eval);
    return 0;
}

int cmd_dump_config(const Options &o) {
    emit(o, effective_config(o).to_json().dump(2) + '\n');
    return 0;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"Demonstration organization and subgoal learning for formal theorem proving"};
    app.require_subcommand(1);
    Options o;
    const auto existing = CLI::ExistingFile;

    auto common = [&](CLI::App *cmd) {
        cmd->add_option("--config", o.config, "JSON run config")->check(existing);
        cmd->add_option("--seed", o.seed, "top-level seed");
        cmd->add_option("--fixtures", o.fixtures, "LLM transcript to replay")->check(existing);
    };
    auto pool = [&](CLI::App *cmd) {
        cmd->add_option("--pool", o.pool, "demonstration pool (JSON lines)")->required()->check(existing);
    };
    auto embeddings = [&](CLI::App *cmd) {
        cmd->add_option("--embeddings", o.embeddings, "pool embeddings from ingest")->check(existing);
    };

    auto *ingest = app.add_subcommand("ingest", "embed every pool record");
    common(ingest);
    pool(ingest);
    ingest->add_option("--out", o.out, "embeddings output");

    auto *collect = app.add_subcommand("collect", "collect training pairs from random organizations");
    common(collect);
    pool(collect);
    collect->add_option("--problems", o.problems, "statements (JSON lines)")->required()->check(existing);
    collect->add_option("--budget", o.budget, "token budget of the packed context");
    collect->add_option("--organizations", o.organizations, "random organizations per statement");
    collect->add_option("--out", o.out, "pairs output");

    auto *train = app.add_subcommand("train", "train the denoiser on collected pairs");
    common(train);
    pool(train);
    embeddings(train);
    train->add_option("--pairs", o.pairs, "pairs from collect")->required()->check(existing);
    train->add_option("--validation-fraction", o.validation_fraction, "tail share of pairs held out");
    train->add_option("--out", o.out, "checkpoint output")->required();

    auto *organize = app.add_subcommand("organize", "print the organized context ids for a statement");
    common(organize);
    pool(organize);
    embeddings(organize);
    organize->add_option("--statement", o.statement, "statement text")->required();
    organize->add_option("--checkpoint", o.checkpoint, "trained model; random organization without it")
        ->check(existing);
    organize->add_option("--budget", o.budget, "token budget of the packed context");
    organize->add_option("--out", o.out, "output instead of standard output");

    auto *refine = app.add_subcommand("refine", "iteratively refine the subgoal proofs of a pool");
    common(refine);
    pool(refine);
    refine->add_option("--workers", o.workers, "examples refined concurrently");
    refine->add_option("--out", o.out, "refined pool output");

    auto *prove = app.add_subcommand("prove", "attempt one statement");
    common(prove);
    pool(prove);
    embeddings(prove);
    prove->add_option("--statement", o.statement, "statement text")->required();
    prove->add_option("--checkpoint", o.checkpoint, "trained model")->check(existing);
    prove->add_option("--attempts", o.attempts, "attempt budget");
    prove->add_option("--budget", o.budget, "token budget of the packed context");
    prove->add_option("--out", o.out, "ledger output");

    auto *evaluate = app.add_subcommand("evaluate", "run the pipeline over a problem set");
    common(evaluate);
    pool(evaluate);
    embeddings(evaluate);
    evaluate->add_option("--problems", o.problems, "problems (JSON lines)")->required()->check(existing);
    evaluate->add_option("--checkpoint", o.checkpoint, "trained model")->check(existing);
    evaluate->add_option("--attempts", o.attempts, "attempts per problem");
    evaluate->add_option("--budget", o.budget, "token budget of the packed context");
    evaluate->add_option("--workers", o.workers, "problems proved concurrently");
    evaluate->add_option("--out", o.out, "ledger output");

    auto *dump = app.add_subcommand("dump-config", "print the effective config");
    common(dump);
    dump->add_option("--out", o.out, "output instead of standard output");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        app.exit(e);
        std::cerr << "usage: " << argv[0] << " <command> [options]; see --help\n";
        return 2;
    }

    try {
        if (ingest->parsed()) {
            return cmd_ingest(o);
        }
        if (collect->parsed()) {
            return cmd_collect(o);
        }
        if (train->parsed()) {
            return cmd_train(o);
        }
        if (organize->parsed()) {
            return cmd_organize(o);
        }
        if (refine->parsed()) {
            return cmd_refine(o);
        }
        if (prove->parsed()) {
            return cmd_prove(o);
        }
        if (evaluate->parsed()) {
            return cmd_evaluate(o);
        }
        return cmd_dump_config(o);
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
