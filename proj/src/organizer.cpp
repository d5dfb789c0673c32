#include "sgdl/organizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sgdl::organizer {

namespace {

constexpr std::size_t kScoreChunk = 32;

} // namespace

EdgeState encode_path(const std::vector<int> &order, int n) {
    EdgeState s(n);
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    for (int v : order) {
        if (v < 0 || v >= n) {
            throw InvalidArgument("path node " + std::to_string(v) + " outside 0.." + std::to_string(n - 1));
        }
        if (seen[static_cast<std::size_t>(v)]) {
            throw InvalidArgument("path visits node " + std::to_string(v) + " twice");
        }
        seen[static_cast<std::size_t>(v)] = 1;
    }
    for (std::size_t k = 0; k + 1 < order.size(); ++k) {
        s.set(order[k], order[k + 1], 1);
    }
    return s;
}

LengthLaw::LengthLaw(std::map<int, double> weights) {
    for (const auto &[k, w] : weights) {
        if (k < 1 || !(w >= 0.0) || !std::isfinite(w)) {
            throw InvalidArgument("length law needs positive lengths and non-negative weights");
        }
        if (w > 0.0) {
            weights_[k] = w;
            total_ += w;
        }
    }
}

LengthLaw LengthLaw::fallback(int n_nodes) {
    std::map<int, double> w;
    for (int k = 1; k <= std::min(n_nodes, 8); ++k) {
        w[k] = 1.0;
    }
    return LengthLaw(std::move(w));
}

LengthLaw LengthLaw::from_lengths(const std::vector<int> &lengths) {
    std::map<int, double> w;
    for (int k : lengths) {
        w[k] += 1.0;
    }
    return LengthLaw(std::move(w));
}

int LengthLaw::sample(Rng &rng) const {
    if (empty()) {
        throw InvalidArgument("empty length law");
    }
    double u = rng.uniform() * total_;
    for (const auto &[k, w] : weights_) {
        if (u < w) {
            return k;
        }
        u -= w;
    }
    return weights_.rbegin()->first;
}

nlohmann::json LengthLaw::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto &[k, w] : weights_) {
        j[std::to_string(k)] = w;
    }
    return j;
}

LengthLaw LengthLaw::from_json(const nlohmann::json &j) {
    std::map<int, double> w;
    for (const auto &[key, value] : j.items()) {
        w[std::stoi(key)] = value.get<double>();
    }
    return LengthLaw(std::move(w));
}

std::vector<CandidatePath> sample_candidates(int n_nodes, int count, const LengthLaw &law, std::uint64_t seed) {
    if (law.empty()) {
        throw InvalidArgument("candidate sampling needs a non-empty length law");
    }
    if (n_nodes < 1 || count < 0) {
        throw InvalidArgument("candidate sampling needs nodes and a non-negative count");
    }
    Rng rng(seed);
    const int lo = std::min(2, n_nodes);
    std::vector<CandidatePath> out;
    out.reserve(static_cast<std::size_t>(count));
    std::vector<int> perm(static_cast<std::size_t>(n_nodes));
    for (int c = 0; c < count; ++c) {
        const int k = std::clamp(law.sample(rng), lo, n_nodes);
        std::iota(perm.begin(), perm.end(), 0);
        for (int m = 0; m < k; ++m) {
            const auto pick = m + static_cast<int>(rng.below(static_cast<std::uint64_t>(n_nodes - m)));
            std::swap(perm[static_cast<std::size_t>(m)], perm[static_cast<std::size_t>(pick)]);
        }
        CandidatePath path;
        path.order.assign(perm.begin(), perm.begin() + k);
        path.encoding = encode_path(path.order, n_nodes);
        out.push_back(std::move(path));
    }
    return out;
}

std::vector<double> score_candidates(const std::vector<CandidatePath> &candidates,
                                     const gnn::InstanceFeatures &features, const gnn::DenoiserParams &params,
                                     const diffusion::NoiseSchedule &schedule, int n_mc, std::uint64_t seed) {
    if (candidates.empty()) {
        throw InvalidArgument("no candidates to score");
    }
    if (n_mc < 1) {
        throw InvalidArgument("scoring needs at least one Monte-Carlo draw");
    }
    const int n = candidates.front().encoding.nodes();
    if (n < 2) {
        throw InvalidArgument("scoring needs at least two nodes");
    }
    const int edges = n * (n - 1);
    std::vector<double> nll(candidates.size(), 0.0);

    for (int m = 0; m < n_mc; ++m) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(m)));
        const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(schedule.steps())));
        std::vector<double> u(static_cast<std::size_t>(n) * n);
        for (auto &x : u) {
            x = rng.uniform();
        }
        for (std::size_t start = 0; start < candidates.size(); start += kScoreChunk) {
            const std::size_t stop = std::min(candidates.size(), start + kScoreChunk);
            std::vector<EdgeState> noisy;
            noisy.reserve(stop - start);
            for (std::size_t c = start; c < stop; ++c) {
                if (candidates[c].encoding.nodes() != n) {
                    throw InvalidArgument("candidates must share one node count");
                }
                noisy.push_back(diffusion::forward_sample(candidates[c].encoding, t, schedule, u));
            }
            std::vector<gnn::GraphInput> batch;
            for (const auto &s : noisy) {
                batch.push_back({&s, t, &features});
            }
            const Mat logits = gnn::forward(batch, params, gnn::Mode::Eval);
            for (std::size_t c = start; c < stop; ++c) {
                const auto &psi = candidates[c].encoding;
                const Eigen::Index base = static_cast<Eigen::Index>(c - start) * edges;
                double sum = 0.0;
                for (int i = 0; i < n; ++i) {
                    for (int j = 0; j < n; ++j) {
                        if (i == j) {
                            continue;
                        }
                        const double p = std::clamp(gnn::sigmoid(logits(base + gnn::edge_row(n, i, j), 0)),
                                                    diffusion::kProbFloor, 1.0 - diffusion::kProbFloor);
                        sum -= std::log(psi.at(i, j) ? p : 1.0 - p);
                    }
                }
                nll[c] += sum / edges;
            }
        }
    }

    std::vector<double> scores(candidates.size());
    for (std::size_t c = 0; c < candidates.size(); ++c) {
        scores[c] = -nll[c] / n_mc;
        if (!std::isfinite(scores[c])) {
            throw NumericError("score of candidate " + std::to_string(c) + " is not finite");
        }
    }
    return scores;
}

std::size_t select_best(const std::vector<double> &scores) {
    if (scores.empty()) {
        throw InvalidArgument("no scores to select from");
    }
    std::size_t best = 0;
    for (std::size_t k = 1; k < scores.size(); ++k) {
        if (scores[k] > scores[best]) {
            best = k;
        }
    }
    return best;
}

std::string to_string(DecodeFailure kind) {
    switch (kind) {
    case DecodeFailure::CycleDetected:
        return "cycle detected";
    case DecodeFailure::BranchingNode:
        return "branching node";
    case DecodeFailure::DisconnectedPaths:
        return "disconnected paths";
    case DecodeFailure::EmptyGraph:
        return "empty graph";
    }
    return "unknown";
}

std::vector<int> decode_path(const EdgeState &psi) {
    const int n = psi.nodes();
    std::vector<int> in(static_cast<std::size_t>(n), 0), out(static_cast<std::size_t>(n), 0),
        next(static_cast<std::size_t>(n), -1);
    int edge_total = 0;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (i != j && psi.at(i, j)) {
                ++out[static_cast<std::size_t>(i)];
                ++in[static_cast<std::size_t>(j)];
                next[static_cast<std::size_t>(i)] = j;
                ++edge_total;
            }
        }
    }
    if (edge_total == 0) {
        throw DecodeError(DecodeFailure::EmptyGraph);
    }
    for (int v = 0; v < n; ++v) {
        if (in[static_cast<std::size_t>(v)] > 1 || out[static_cast<std::size_t>(v)] > 1) {
            throw DecodeError(DecodeFailure::BranchingNode);
        }
    }
    std::vector<std::vector<int>> paths;
    int walked = 0;
    for (int v = 0; v < n; ++v) {
        if (in[static_cast<std::size_t>(v)] == 0 && out[static_cast<std::size_t>(v)] == 1) {
            std::vector<int> path{v};
            for (int u = next[static_cast<std::size_t>(v)]; u >= 0; u = next[static_cast<std::size_t>(u)]) {
                path.push_back(u);
                ++walked;
            }
            paths.push_back(std::move(path));
        }
    }
    // With in/out degree at most one, edges not reachable from a source lie on cycles.
    if (walked < edge_total) {
        throw DecodeError(DecodeFailure::CycleDetected);
    }
    if (paths.size() > 1) {
        throw DecodeError(DecodeFailure::DisconnectedPaths);
    }
    return paths.front();
}

DemonstrationContext pack_context(const std::vector<int> &ordering, const std::vector<int> &token_counts,
                                  int budget) {
    if (budget < 0) {
        throw InvalidArgument("token budget must be non-negative");
    }
    std::vector<char> seen(token_counts.size(), 0);
    for (int id : ordering) {
        if (id < 0 || static_cast<std::size_t>(id) >= token_counts.size()) {
            throw InvalidArgument("unknown example id " + std::to_string(id));
        }
        if (seen[static_cast<std::size_t>(id)]) {
            throw InvalidArgument("example id " + std::to_string(id) + " repeated in ordering");
        }
        seen[static_cast<std::size_t>(id)] = 1;
    }
    DemonstrationContext ctx;
    ctx.budget = budget;
    for (int id : ordering) {
        const int cost = token_counts[static_cast<std::size_t>(id)];
        if (ctx.total_tokens + cost > budget) {
            break;
        }
        ctx.example_ids.push_back(id);
        ctx.total_tokens += cost;
    }
    return ctx;
}

Organization organize(const std::vector<double> &statement_embedding, const PoolView &pool, const Model *model,
                      const OrganizerConfig &config, std::uint64_t seed) {
    const int n = pool.size();
    if (n < 1) {
        throw InvalidArgument("cannot organize an empty pool");
    }
    if (static_cast<int>(pool.embeddings.size()) != n && model != nullptr) {
        throw InvalidArgument("pool embeddings do not match the pool size");
    }
    if (config.candidates < 1) {
        throw InvalidArgument("organizer needs at least one candidate");
    }
    const LengthLaw law = model != nullptr && !model->lengths.empty() ? model->lengths : LengthLaw::fallback(n);
    const auto candidates = sample_candidates(n, model != nullptr ? config.candidates : 1, law,
                                              derive_seed(seed, "candidates"));
    Organization out;
    if (model != nullptr && n >= 2) {
        gnn::InstanceFeatures features{statement_embedding, pool.embeddings};
        out.scores = score_candidates(candidates, features, model->params, model->schedule, config.n_mc,
                                      derive_seed(seed, "scores"));
        out.chosen = select_best(out.scores);
    }
    try {
        out.order = decode_path(candidates[out.chosen].encoding);
    } catch (const DecodeError &) {
        out.order = candidates[out.chosen].order;
    }
    out.context = pack_context(out.order, pool.token_counts, config.budget);
    return out;
}

} // namespace sgdl::organizer
