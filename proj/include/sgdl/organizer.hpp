#ifndef SGDL_ORGANIZER_HPP
#define SGDL_ORGANIZER_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "sgdl/denoiser.hpp"
#include "sgdl/diffusion.hpp"
#include "sgdl/errors.hpp"

namespace sgdl::organizer {

using diffusion::EdgeState;

/// A simple directed path over a subset of pool nodes.
struct CandidatePath {
    std::vector<int> order;
    EdgeState encoding;
};

/// Edges order[m] -> order[m + 1] over n nodes. Throws InvalidArgument on repeated or out-of-range ids.
EdgeState encode_path(const std::vector<int> &order, int n);

/// Empirical distribution of path lengths.
class LengthLaw {
public:
    LengthLaw() = default;
    explicit LengthLaw(std::map<int, double> weights);

    /// Uniform on 1..min(n, 8), used before any training pairs exist.
    static LengthLaw fallback(int n_nodes);
    /// Counts of observed path lengths.
    static LengthLaw from_lengths(const std::vector<int> &lengths);

    bool empty() const { return weights_.empty(); }
    const std::map<int, double> &weights() const { return weights_; }
    int sample(Rng &rng) const;

    nlohmann::json to_json() const;
    static LengthLaw from_json(const nlohmann::json &j);

private:
    std::map<int, double> weights_;
    double total_ = 0.0;
};

/// Uniformly random K-permutations with K from `law`, clamped to [2, n] when n >= 2
/// so that every candidate has at least one edge.
std::vector<CandidatePath> sample_candidates(int n_nodes, int count, const LengthLaw &law, std::uint64_t seed);

/// Monte-Carlo denoising log-likelihood per candidate; higher is better.
///
/// Every candidate sees the same n_mc (step, uniform matrix) draws, so equal
/// candidates get equal scores and differences between candidates are low-variance.
std::vector<double> score_candidates(const std::vector<CandidatePath> &candidates,
                                     const gnn::InstanceFeatures &features, const gnn::DenoiserParams &params,
                                     const diffusion::NoiseSchedule &schedule, int n_mc, std::uint64_t seed);

/// Index of the largest score, lowest index on ties.
std::size_t select_best(const std::vector<double> &scores);

enum class DecodeFailure { CycleDetected, BranchingNode, DisconnectedPaths, EmptyGraph };

std::string to_string(DecodeFailure kind);

class DecodeError : public Error {
public:
    explicit DecodeError(DecodeFailure kind) : Error(message(kind)), kind_(kind) {}

    DecodeFailure kind() const { return kind_; }

private:
    static std::string message(DecodeFailure kind) {
        std::string text = "cannot decode path: ";
        text.append(to_string(kind));
        return text;
    }

    DecodeFailure kind_;
};

/// Node sequence of the single simple path in `psi`; all other nodes must be isolated.
std::vector<int> decode_path(const EdgeState &psi);

struct DemonstrationContext {
    std::vector<int> example_ids;
    int total_tokens = 0;
    int budget = 0;
};

/// Longest prefix of `ordering` whose token counts fit in `budget`.
DemonstrationContext pack_context(const std::vector<int> &ordering, const std::vector<int> &token_counts, int budget);

struct OrganizerConfig {
    int candidates = 200;
    int n_mc = 8;
    int budget = 3072;
};

/// A trained denoiser plus what inference needs alongside it.
struct Model {
    gnn::DenoiserParams params;
    diffusion::NoiseSchedule schedule{std::vector<double>{1.0}};
    LengthLaw lengths;
};

/// Embedded pool, indexed by node id.
struct PoolView {
    std::vector<int> token_counts;
    std::vector<std::vector<double>> embeddings;

    int size() const { return static_cast<int>(token_counts.size()); }
};

struct Organization {
    DemonstrationContext context;
    std::vector<int> order;     ///< decoded order before packing
    std::size_t chosen = 0;     ///< index of the selected candidate
    std::vector<double> scores; ///< empty when no model was used
};

/// Samples candidates, scores them with `model`, decodes the best one and packs it.
/// Without a model the first random candidate is used.
Organization organize(const std::vector<double> &statement_embedding, const PoolView &pool, const Model *model,
                      const OrganizerConfig &config, std::uint64_t seed);

} // namespace sgdl::organizer

#endif // SGDL_ORGANIZER_HPP
