#include "sgdl/training.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

#include "sgdl/errors.hpp"
#include "sgdl/rng.hpp"

namespace sgdl::gnn {

namespace {

std::uint64_t fingerprint(const Example &ex) {
    std::uint64_t h = fnv1a64("example");
    const int n = ex.psi0.nodes();
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            h = fnv1a64(ex.psi0.at(i, j) ? "1" : "0", h);
        }
    }
    auto mix = [&h](const std::vector<double> &v) {
        h = fnv1a64(std::string_view(reinterpret_cast<const char *>(v.data()), v.size() * sizeof(double)), h);
        h = fnv1a64("|", h);
    };
    mix(ex.features.statement);
    for (const auto &e : ex.features.examples) {
        mix(e);
    }
    return h;
}

struct Draw {
    int t;
    EdgeState psit;
};

Draw draw(const Example &ex, const diffusion::NoiseSchedule &schedule, std::uint64_t stream) {
    Rng rng(stream);
    const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(schedule.steps())));
    const int n = ex.psi0.nodes();
    std::vector<double> u(static_cast<std::size_t>(n) * n);
    for (auto &x : u) {
        x = rng.uniform();
    }
    return {t, diffusion::forward_sample(ex.psi0, t, schedule, u)};
}

struct BatchLoss {
    double loss = 0.0;
    Mat dlogits;
    Trace trace;
};

BatchLoss batch_loss(const std::vector<const Example *> &batch, const DenoiserParams &params,
                     const diffusion::NoiseSchedule &schedule, Objective objective, std::uint64_t seed, Mode mode,
                     bool keep_trace) {
    if (batch.empty()) {
        throw InvalidArgument("loss needs a non-empty batch");
    }
    std::vector<Draw> draws;
    draws.reserve(batch.size());
    std::vector<GraphInput> inputs;
    inputs.reserve(batch.size());
    for (const Example *ex : batch) {
        if (ex->psi0.nodes() < 2) {
            throw InvalidArgument("training instances need at least two nodes");
        }
        draws.push_back(draw(*ex, schedule, derive_seed(seed, fingerprint(*ex))));
    }
    for (std::size_t b = 0; b < batch.size(); ++b) {
        inputs.push_back(GraphInput{&draws[b].psit, draws[b].t, &batch[b]->features});
    }

    BatchLoss out;
    const Mat logits = forward(inputs, params, mode, keep_trace ? &out.trace : nullptr);
    const int n = batch.front()->psi0.nodes();
    const int edges = n * (n - 1);
    const double step_scale = objective == Objective::Elbo ? static_cast<double>(schedule.steps()) : 1.0;
    const double scale = step_scale / (static_cast<double>(edges) * static_cast<double>(batch.size()));
    out.dlogits = Mat::Zero(logits.rows(), 1);
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const int term_step = objective == Objective::Elbo ? draws[b].t : 1;
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                if (i == j) {
                    continue;
                }
                const Eigen::Index r = static_cast<Eigen::Index>(b) * edges + edge_row(n, i, j);
                const double p = sigmoid(logits(r, 0));
                const auto term = diffusion::edge_elbo_term(schedule, batch[b]->psi0.at(i, j),
                                                            draws[b].psit.at(i, j), p, term_step);
                out.loss += scale * term.value;
                out.dlogits(r, 0) = scale * term.d_p0_one * p * (1.0 - p);
            }
        }
    }
    return out;
}

template <class F>
void for_each_learnable_pair(DenoiserParams &a, const DenoiserParams &b, F &&f) {
    std::vector<const Mat *> rhs;
    b.for_each([&rhs](const std::string &, const Mat &m, bool learnable) {
        if (learnable) {
            rhs.push_back(&m);
        }
    });
    std::size_t k = 0;
    a.for_each([&](const std::string &, Mat &m, bool learnable) {
        if (learnable) {
            f(m, *rhs[k++]);
        }
    });
}

bool all_finite(const DenoiserParams &p) {
    bool ok = true;
    p.for_each([&ok](const std::string &, const Mat &m, bool) { ok = ok && m.allFinite(); });
    return ok;
}

} // namespace

std::string to_string(Objective objective) {
    return objective == Objective::Elbo ? "elbo" : "cross_entropy";
}

Objective objective_from_string(const std::string &name) {
    if (name == "elbo") {
        return Objective::Elbo;
    }
    if (name == "cross_entropy") {
        return Objective::CrossEntropy;
    }
    throw InvalidArgument("unknown training objective '" + name + "'");
}

LossResult loss_and_gradients(const std::vector<const Example *> &batch, const DenoiserParams &params,
                              const diffusion::NoiseSchedule &schedule, Objective objective, std::uint64_t seed,
                              Mode mode) {
    BatchLoss bl = batch_loss(batch, params, schedule, objective, seed, mode, true);
    LossResult out;
    out.loss = bl.loss;
    out.gradients = backward(bl.trace, bl.dlogits, params);
    out.trace = std::move(bl.trace);
    return out;
}

double evaluate_loss(const std::vector<const Example *> &examples, const DenoiserParams &params,
                     const diffusion::NoiseSchedule &schedule, Objective objective, std::uint64_t seed) {
    if (examples.empty()) {
        throw InvalidArgument("no examples to evaluate");
    }
    constexpr std::size_t kChunk = 32;
    double total = 0.0;
    for (std::size_t start = 0; start < examples.size(); start += kChunk) {
        const std::size_t stop = std::min(examples.size(), start + kChunk);
        std::vector<const Example *> chunk(examples.begin() + static_cast<std::ptrdiff_t>(start),
                                           examples.begin() + static_cast<std::ptrdiff_t>(stop));
        total += batch_loss(chunk, params, schedule, objective, seed, Mode::Eval, false).loss *
                 static_cast<double>(chunk.size());
    }
    return total / static_cast<double>(examples.size());
}

double reconstruction_cross_entropy(const std::vector<const Example *> &examples, const DenoiserParams &params,
                                    const diffusion::NoiseSchedule &schedule, int draws, std::uint64_t seed) {
    if (examples.empty() || draws < 1) {
        throw InvalidArgument("cross-entropy needs examples and at least one draw");
    }
    double total = 0.0;
    std::size_t count = 0;
    for (const Example *ex : examples) {
        const std::uint64_t base = derive_seed(seed, fingerprint(*ex));
        for (int k = 0; k < draws; ++k) {
            const Draw d = draw(*ex, schedule, derive_seed(base, static_cast<std::uint64_t>(k)));
            const EdgeDistribution p0 = predict_p0(d.psit, d.t, ex->features, params, Mode::Eval);
            const int n = ex->psi0.nodes();
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < n; ++j) {
                    if (i != j) {
                        total += diffusion::edge_elbo_term(schedule, ex->psi0.at(i, j), 0, p0.p_one(i, j), 1).value;
                        ++count;
                    }
                }
            }
        }
    }
    return total / static_cast<double>(count);
}

TrainResult train(const std::vector<Example> &dataset, const std::vector<Example> &validation,
                  const DenoiserConfig &config, const diffusion::NoiseSchedule &schedule,
                  const TrainConfig &train_config, std::uint64_t seed) {
    return train(dataset, validation, init_params(config, derive_seed(seed, "init")), schedule, train_config, seed);
}

TrainResult train(const std::vector<Example> &dataset, const std::vector<Example> &validation,
                  DenoiserParams initial, const diffusion::NoiseSchedule &schedule,
                  const TrainConfig &train_config, std::uint64_t seed) {
    if (dataset.empty()) {
        throw InvalidArgument("training needs at least one pair");
    }
    if (train_config.batch_size < 1 || train_config.epochs < 0 || !(train_config.learning_rate > 0.0)) {
        throw InvalidArgument("invalid training configuration");
    }

    DenoiserParams params = std::move(initial);
    DenoiserParams first_moment = params.zeros_like();
    DenoiserParams second_moment = params.zeros_like();

    TrainResult result;
    result.params = params;
    double best = std::numeric_limits<double>::infinity();

    std::vector<const Example *> val_ptrs;
    for (const auto &ex : validation) {
        val_ptrs.push_back(&ex);
    }
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffler(derive_seed(seed, "shuffle"));
    const std::uint64_t batch_seed = derive_seed(seed, "batch");
    const std::uint64_t val_seed = derive_seed(seed, "validation");
    const auto batch_size = static_cast<std::size_t>(train_config.batch_size);
    std::uint64_t step = 0;

    for (int epoch = 1; epoch <= train_config.epochs && !result.diverged; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[shuffler.below(i)]);
        }
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += batch_size) {
            const std::size_t stop = std::min(order.size(), start + batch_size);
            std::vector<const Example *> batch;
            for (std::size_t k = start; k < stop; ++k) {
                batch.push_back(&dataset[order[k]]);
            }
            ++step;
            LossResult lr;
            try {
                lr = loss_and_gradients(batch, params, schedule, train_config.objective,
                                        derive_seed(batch_seed, step), Mode::Train);
            } catch (const NumericError &) {
                result.diverged = true;
                break;
            }
            if (!std::isfinite(lr.loss) || !all_finite(lr.gradients)) {
                result.diverged = true;
                break;
            }
            epoch_loss += lr.loss * static_cast<double>(batch.size());
            update_running_stats(params, lr.trace, train_config.bn_momentum);

            const double b1 = train_config.adam_beta1;
            const double b2 = train_config.adam_beta2;
            const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
            std::vector<Mat *> m_ptrs;
            std::vector<Mat *> v_ptrs;
            first_moment.for_each([&m_ptrs](const std::string &, Mat &m, bool learnable) {
                if (learnable) {
                    m_ptrs.push_back(&m);
                }
            });
            second_moment.for_each([&v_ptrs](const std::string &, Mat &m, bool learnable) {
                if (learnable) {
                    v_ptrs.push_back(&m);
                }
            });
            std::size_t k = 0;
            for_each_learnable_pair(params, lr.gradients, [&](Mat &p, const Mat &g) {
                Mat &m = *m_ptrs[k];
                Mat &v = *v_ptrs[k];
                ++k;
                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
                p.array() -= train_config.learning_rate * (m.array() / c1) /
                             ((v.array() / c2).sqrt() + train_config.adam_eps);
            });
            if (!all_finite(params)) {
                result.diverged = true;
                break;
            }
        }
        if (result.diverged) {
            break;
        }
        EpochLog entry;
        entry.epoch = epoch;
        entry.train_loss = epoch_loss / static_cast<double>(dataset.size());
        try {
            entry.val_loss = val_ptrs.empty()
                                 ? entry.train_loss
                                 : evaluate_loss(val_ptrs, params, schedule, train_config.objective, val_seed);
        } catch (const NumericError &) {
            entry.val_loss = std::numeric_limits<double>::quiet_NaN();
        }
        result.log.push_back(entry);
        if (!std::isfinite(entry.val_loss)) {
            result.diverged = true;
            break;
        }
        if (entry.val_loss < best) {
            best = entry.val_loss;
            result.params = params;
            result.best_epoch = epoch;
        }
    }
    return result;
}

} // namespace sgdl::gnn
