#include "sgdl/config.hpp"

#include <cmath>

#include "sgdl/errors.hpp"
#include "sgdl/fileio.hpp"

namespace sgdl {

using nlohmann::json;

namespace {

void reject_unknown(const json &given, const json &known, const std::string &path) {
    if (!given.is_object()) {
        throw InvalidArgument("config " + (path.empty() ? std::string("document") : "'" + path + "'") +
                              " must be an object");
    }
    for (const auto &[key, value] : given.items()) {
        const std::string here = path.empty() ? key : path + "." + key;
        if (!known.contains(key)) {
            throw InvalidArgument("unknown config key '" + here + "'");
        }
        if (known.at(key).is_object()) {
            reject_unknown(value, known.at(key), here);
        }
    }
}

json endpoint_json(const clients::HttpEndpoint &e) {
    return {{"url", e.url}, {"api_key", e.api_key}, {"model", e.model}, {"timeout_seconds", e.timeout.count()}};
}

clients::HttpEndpoint endpoint_from(const json &j) {
    clients::HttpEndpoint e;
    e.url = j.at("url").get<std::string>();
    e.api_key = j.at("api_key").get<std::string>();
    e.model = j.at("model").get<std::string>();
    e.timeout = std::chrono::seconds(j.at("timeout_seconds").get<long>());
    return e;
}

} // namespace

diffusion::NoiseSchedule DiffusionSettings::build() const {
    if (schedule == diffusion::ScheduleKind::Custom) {
        if (!betas.empty() && static_cast<int>(betas.size()) != steps) {
            throw InvalidArgument("custom schedule has " + std::to_string(betas.size()) + " ratios for " +
                                  std::to_string(steps) + " steps");
        }
    }
    auto built = schedule == diffusion::ScheduleKind::Custom
                     ? diffusion::NoiseSchedule(betas, diffusion::ScheduleKind::Custom)
                     : diffusion::build_schedule(steps, schedule);
    // The prior over psi_T is uniform, so the chain must end there.
    const double flip = built.qbar(built.steps())[0][1];
    if (std::abs(flip - 0.5) > kMixingTolerance) {
        throw InvalidArgument("schedule does not mix: terminal flip probability " + std::to_string(flip) +
                              " is not within " + std::to_string(kMixingTolerance) + " of 1/2");
    }
    return built;
}

json RunConfig::to_json() const {
    const auto &t = training.train;
    return {
        {"seed", seed},
        {"diffusion", {{"steps", diffusion.steps}, {"schedule", diffusion::to_string(diffusion.schedule)}, {"betas", diffusion.betas}}},
        {"denoiser", {{"layers", denoiser.layers}, {"hidden_dim", denoiser.hidden_dim}, {"time_embed_dim", denoiser.time_embed_dim}}},
        {"training",
         {{"learning_rate", t.learning_rate},
          {"batch_size", t.batch_size},
          {"epochs", t.epochs},
          {"objective", gnn::to_string(t.objective)},
          {"adam_beta1", t.adam_beta1},
          {"adam_beta2", t.adam_beta2},
          {"adam_eps", t.adam_eps},
          {"bn_momentum", t.bn_momentum},
          {"validation_fraction", training.validation_fraction}}},
        {"organizer", {{"candidates", organizer.candidates}, {"n_mc", organizer.n_mc}, {"budget", organizer.budget}}},
        {"refinement",
         {{"iterations", refinement.iterations},
          {"max_correct_depth", refinement.max_correct_depth},
          {"max_branch", refinement.max_branch},
          {"demo_sample_budget", refinement.demo_sample_budget},
          {"client_retries", refinement.client_retries},
          {"workers", refinement.workers}}},
        {"pipeline",
         {{"attempts", pipeline.attempts},
          {"collection_organizations", pipeline.collection_organizations},
          {"workers", pipeline.workers}}},
        {"clients",
         {{"context_limit", clients.context_limit},
          {"temperature", clients.sampling.temperature},
          {"max_output_tokens", clients.sampling.max_output_tokens},
          {"fixtures", clients.fixtures},
          {"llm", endpoint_json(clients.llm)},
          {"embedder", endpoint_json(clients.embedder)},
          {"embed_seed", clients.embed_seed},
          {"prover_command", clients.prover_command},
          {"prover_timeout_seconds", clients.prover_timeout_seconds},
          {"in_flight", clients.in_flight},
          {"retry",
           {{"max_retries", clients.retry.max_retries},
            {"initial_backoff_ms", clients.retry.initial_backoff.count()},
            {"factor", clients.retry.factor},
            {"max_backoff_ms", clients.retry.max_backoff.count()}}}}},
        {"prompts", prompts.to_json()},
    };
}

RunConfig RunConfig::from_json(const json &j) {
    json merged = RunConfig{}.to_json();
    reject_unknown(j, merged, "");
    merged.merge_patch(j);
    RunConfig c;
    try {
        c.seed = merged.at("seed").get<std::uint64_t>();
        const auto &d = merged.at("diffusion");
        c.diffusion.steps = d.at("steps").get<int>();
        c.diffusion.schedule = diffusion::schedule_kind_from_string(d.at("schedule").get<std::string>());
        c.diffusion.betas = d.at("betas").get<std::vector<double>>();
        const auto &n = merged.at("denoiser");
        c.denoiser.layers = n.at("layers").get<int>();
        c.denoiser.hidden_dim = n.at("hidden_dim").get<int>();
        c.denoiser.time_embed_dim = n.at("time_embed_dim").get<int>();
        const auto &t = merged.at("training");
        c.training.train.learning_rate = t.at("learning_rate").get<double>();
        c.training.train.batch_size = t.at("batch_size").get<int>();
        c.training.train.epochs = t.at("epochs").get<int>();
        c.training.train.objective = gnn::objective_from_string(t.at("objective").get<std::string>());
        c.training.train.adam_beta1 = t.at("adam_beta1").get<double>();
        c.training.train.adam_beta2 = t.at("adam_beta2").get<double>();
        c.training.train.adam_eps = t.at("adam_eps").get<double>();
        c.training.train.bn_momentum = t.at("bn_momentum").get<double>();
        c.training.validation_fraction = t.at("validation_fraction").get<double>();
        const auto &o = merged.at("organizer");
        c.organizer.candidates = o.at("candidates").get<int>();
        c.organizer.n_mc = o.at("n_mc").get<int>();
        c.organizer.budget = o.at("budget").get<int>();
        const auto &r = merged.at("refinement");
        c.refinement.iterations = r.at("iterations").get<int>();
        c.refinement.max_correct_depth = r.at("max_correct_depth").get<int>();
        c.refinement.max_branch = r.at("max_branch").get<int>();
        c.refinement.demo_sample_budget = r.at("demo_sample_budget").get<int>();
        c.refinement.client_retries = r.at("client_retries").get<int>();
        c.refinement.workers = r.at("workers").get<int>();
        const auto &p = merged.at("pipeline");
        c.pipeline.attempts = p.at("attempts").get<int>();
        c.pipeline.collection_organizations = p.at("collection_organizations").get<int>();
        c.pipeline.workers = p.at("workers").get<int>();
        const auto &k = merged.at("clients");
        c.clients.context_limit = k.at("context_limit").get<int>();
        c.clients.sampling.temperature = k.at("temperature").get<double>();
        c.clients.sampling.max_output_tokens = k.at("max_output_tokens").get<int>();
        c.clients.fixtures = k.at("fixtures").get<std::string>();
        c.clients.llm = endpoint_from(k.at("llm"));
        c.clients.embedder = endpoint_from(k.at("embedder"));
        c.clients.embed_seed = k.at("embed_seed").get<std::uint64_t>();
        c.clients.prover_command = k.at("prover_command").get<std::vector<std::string>>();
        c.clients.prover_timeout_seconds = k.at("prover_timeout_seconds").get<int>();
        c.clients.in_flight = k.at("in_flight").get<int>();
        const auto &rt = k.at("retry");
        c.clients.retry.max_retries = rt.at("max_retries").get<int>();
        c.clients.retry.initial_backoff = std::chrono::milliseconds(rt.at("initial_backoff_ms").get<long>());
        c.clients.retry.factor = rt.at("factor").get<double>();
        c.clients.retry.max_backoff = std::chrono::milliseconds(rt.at("max_backoff_ms").get<long>());
        c.refinement.sampling = c.clients.sampling;
        c.prompts = Prompts::from_json(merged.at("prompts"));
    } catch (const json::exception &e) {
        throw InvalidArgument(std::string("bad config value: ") + e.what());
    }
    c.validate();
    return c;
}

void RunConfig::validate() const {
    if (diffusion.steps < 1) {
        throw InvalidArgument("diffusion.steps must be positive");
    }
    diffusion.build();
    gnn::DenoiserConfig probe;
    probe.layers = denoiser.layers;
    probe.hidden_dim = denoiser.hidden_dim;
    probe.time_embed_dim = denoiser.time_embed_dim;
    probe.validate();
    const auto &t = training.train;
    if (!(t.learning_rate > 0.0) || t.batch_size < 1 || t.epochs < 0) {
        throw InvalidArgument("training needs a positive learning rate and batch size and non-negative epochs");
    }
    if (!(training.validation_fraction >= 0.0 && training.validation_fraction < 1.0)) {
        throw InvalidArgument("training.validation_fraction must lie in [0, 1)");
    }
    if (organizer.candidates < 1 || organizer.n_mc < 1 || organizer.budget < 0) {
        throw InvalidArgument("organizer needs candidates >= 1, n_mc >= 1 and budget >= 0");
    }
    refinement.validate();
    if (pipeline.attempts < 1 || pipeline.collection_organizations < 0 || pipeline.workers < 1) {
        throw InvalidArgument("pipeline needs attempts >= 1, organizations >= 0 and workers >= 1");
    }
    if (clients.context_limit < 1 || clients.sampling.temperature < 0.0 || clients.sampling.max_output_tokens < 1 ||
        clients.prover_timeout_seconds < 1 || clients.in_flight < 1 || clients.retry.max_retries < 0) {
        throw InvalidArgument("invalid client settings");
    }
}

RunConfig load_config(const std::string &path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception &e) {
        throw FormatError(path, e.what());
    }
    try {
        return RunConfig::from_json(j);
    } catch (const InvalidArgument &e) {
        throw FormatError(path, e.what());
    }
}

} // namespace sgdl
