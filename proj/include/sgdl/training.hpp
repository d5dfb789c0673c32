#ifndef SGDL_TRAINING_HPP
#define SGDL_TRAINING_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "sgdl/denoiser.hpp"
#include "sgdl/diffusion.hpp"

namespace sgdl::gnn {

/// One supervised instance: a successful organization and its conditioning features.
struct Example {
    EdgeState psi0;
    InstanceFeatures features;
};

enum class Objective {
    Elbo,         ///< per-step ELBO terms (reconstruction at t = 1, posterior KL above)
    CrossEntropy, ///< -log p(psi_0 | psi_t) at the sampled step
};

std::string to_string(Objective objective);
Objective objective_from_string(const std::string &name);

struct LossResult {
    double loss = 0.0;
    DenoiserParams gradients;
    Trace trace; ///< batch statistics for running-average updates
};

/// Batch-mean training loss and its gradient.
///
/// Each instance draws one step t uniformly from 1..T and one corruption psi_t.
/// The draws come from a stream keyed by the seed and the instance content, so a
/// repeated instance sees the same draws wherever it sits in the batch. The
/// ELBO objective is scaled by T so its expectation is the full per-edge
/// negative ELBO without the prior term.
LossResult loss_and_gradients(const std::vector<const Example *> &batch, const DenoiserParams &params,
                              const diffusion::NoiseSchedule &schedule, Objective objective, std::uint64_t seed,
                              Mode mode = Mode::Train);

/// Same estimator without gradients, in eval mode.
double evaluate_loss(const std::vector<const Example *> &examples, const DenoiserParams &params,
                     const diffusion::NoiseSchedule &schedule, Objective objective, std::uint64_t seed);

/// Mean of -log p(psi_0 | psi_t) per edge over `draws` sampled steps, eval mode.
double reconstruction_cross_entropy(const std::vector<const Example *> &examples, const DenoiserParams &params,
                                    const diffusion::NoiseSchedule &schedule, int draws, std::uint64_t seed);

struct TrainConfig {
    double learning_rate = 5e-4;
    int batch_size = 16;
    int epochs = 50;
    Objective objective = Objective::Elbo;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double bn_momentum = 0.1;
};

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
};

struct TrainResult {
    DenoiserParams params; ///< snapshot with the best validation loss
    std::vector<EpochLog> log;
    int best_epoch = 0;
    bool diverged = false;
};

TrainResult train(const std::vector<Example> &dataset, const std::vector<Example> &validation,
                  const DenoiserConfig &config, const diffusion::NoiseSchedule &schedule,
                  const TrainConfig &train_config, std::uint64_t seed);

TrainResult train(const std::vector<Example> &dataset, const std::vector<Example> &validation,
                  DenoiserParams initial, const diffusion::NoiseSchedule &schedule,
                  const TrainConfig &train_config, std::uint64_t seed);

} // namespace sgdl::gnn

#endif // SGDL_TRAINING_HPP
