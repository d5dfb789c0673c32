#ifndef SGDL_CONFIG_HPP
#define SGDL_CONFIG_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "sgdl/clients.hpp"
#include "sgdl/diffusion.hpp"
#include "sgdl/organizer.hpp"
#include "sgdl/pool.hpp"
#include "sgdl/subgoal.hpp"
#include "sgdl/training.hpp"

namespace sgdl {

struct DiffusionSettings {
    int steps = 80;
    diffusion::ScheduleKind schedule = diffusion::ScheduleKind::Reciprocal;
    std::vector<double> betas; ///< only for the custom schedule

    /// Largest accepted distance of the terminal flip probability from 1/2.
    static constexpr double kMixingTolerance = 1e-2;

    diffusion::NoiseSchedule build() const;
};

struct DenoiserSettings {
    int layers = 3;
    int hidden_dim = 256;
    int time_embed_dim = 0;
};

struct TrainingSettings {
    gnn::TrainConfig train;
    double validation_fraction = 0.4; ///< tail share of the pairs file held out
};

struct PipelineSettings {
    int attempts = 1;
    int collection_organizations = 20;
    int workers = 1;
};

struct ClientSettings {
    int context_limit = clients::kDefaultContextLimit;
    clients::Sampling sampling;
    std::string fixtures;            ///< transcript file; empty means the HTTP adapter
    clients::HttpEndpoint llm;       ///< SGDL_LLM_URL / SGDL_LLM_KEY override url and key
    clients::HttpEndpoint embedder;  ///< empty url means the hash embedder
    std::uint64_t embed_seed = 0;
    std::vector<std::string> prover_command; ///< empty means the toy prover
    int prover_timeout_seconds = 120;
    int in_flight = 4;
    clients::RetryPolicy retry;
};

struct RunConfig {
    std::uint64_t seed = 0;
    DiffusionSettings diffusion;
    DenoiserSettings denoiser;
    TrainingSettings training;
    organizer::OrganizerConfig organizer;
    subgoal::RefinementConfig refinement;
    PipelineSettings pipeline;
    ClientSettings clients;
    Prompts prompts;

    nlohmann::json to_json() const;
    /// Keys absent from `j` keep their defaults; unknown keys are rejected.
    static RunConfig from_json(const nlohmann::json &j);
    void validate() const;
};

/// Parses and validates a config file; errors name the file.
RunConfig load_config(const std::string &path);

} // namespace sgdl

#endif // SGDL_CONFIG_HPP
