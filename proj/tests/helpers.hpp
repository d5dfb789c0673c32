#ifndef SGDL_TESTS_HELPERS_HPP
#define SGDL_TESTS_HELPERS_HPP

#include <numeric>
#include <vector>

#include "sgdl/denoiser.hpp"
#include "sgdl/training.hpp"
#include "sgdl/rng.hpp"

namespace helpers {

using sgdl::diffusion::EdgeState;
using sgdl::gnn::DenoiserParams;
using sgdl::gnn::InstanceFeatures;

inline std::vector<double> random_vector(sgdl::Rng &rng, int dim) {
    std::vector<double> v(static_cast<std::size_t>(dim));
    for (auto &x : v) {
        x = rng.normal();
    }
    return v;
}

inline InstanceFeatures random_features(sgdl::Rng &rng, int n, int embed) {
    InstanceFeatures f;
    f.statement = random_vector(rng, embed);
    for (int i = 0; i < n; ++i) {
        f.examples.push_back(random_vector(rng, embed));
    }
    return f;
}

inline EdgeState random_state(sgdl::Rng &rng, int n, double density = 0.4) {
    EdgeState s(n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (i != j && rng.uniform() < density) {
                s.set(i, j, 1);
            }
        }
    }
    return s;
}

inline std::vector<int> random_permutation(sgdl::Rng &rng, int n) {
    std::vector<int> p(static_cast<std::size_t>(n));
    std::iota(p.begin(), p.end(), 0);
    for (int i = n - 1; i > 0; --i) {
        std::swap(p[static_cast<std::size_t>(i)], p[rng.below(static_cast<std::uint64_t>(i + 1))]);
    }
    return p;
}

/// Node i moves to position perm[i].
inline EdgeState permute(const EdgeState &s, const std::vector<int> &perm) {
    EdgeState out(s.nodes());
    for (int i = 0; i < s.nodes(); ++i) {
        for (int j = 0; j < s.nodes(); ++j) {
            if (i != j) {
                out.set(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)], s.at(i, j));
            }
        }
    }
    return out;
}

inline InstanceFeatures permute(const InstanceFeatures &f, const std::vector<int> &perm) {
    InstanceFeatures out = f;
    for (std::size_t i = 0; i < perm.size(); ++i) {
        out.examples[static_cast<std::size_t>(perm[i])] = f.examples[i];
    }
    return out;
}

/// Every tensor randomized, including the zero-initialized head and the BN statistics.
inline DenoiserParams random_params(const sgdl::gnn::DenoiserConfig &config, std::uint64_t seed) {
    DenoiserParams p = sgdl::gnn::init_params(config, seed);
    sgdl::Rng rng(sgdl::derive_seed(seed, "perturb"));
    p.for_each([&rng](const std::string &name, sgdl::Mat &m, bool) {
        const bool variance = name.find("running_var") != std::string::npos;
        const bool scale = name.find("gamma") != std::string::npos;
        for (Eigen::Index k = 0; k < m.size(); ++k) {
            double &x = m.data()[k];
            if (variance) {
                x = 0.5 + rng.uniform();
            } else if (scale) {
                x = 0.5 + rng.uniform();
            } else if (name.rfind("head.", 0) == 0 || name.find("running_mean") != std::string::npos ||
                       name.find("beta") != std::string::npos) {
                x = 0.5 * (2.0 * rng.uniform() - 1.0);
            }
        }
    });
    return p;
}

inline EdgeState path_state(const std::vector<int> &order, int n) {
    EdgeState s(n);
    for (std::size_t k = 0; k + 1 < order.size(); ++k) {
        s.set(order[k], order[k + 1], 1);
    }
    return s;
}

/// Synthetic organization task: a random k-node order whose ranks are written into the
/// example embeddings (one-hot slot per rank, one shared slot for unselected nodes) plus noise.
struct Planted {
    std::vector<int> order;
    sgdl::gnn::Example example;
};

inline Planted planted_instance(sgdl::Rng &rng, int n, int k, int embed, double noise) {
    Planted out;
    out.order = random_permutation(rng, n);
    out.order.resize(static_cast<std::size_t>(k));
    std::vector<int> rank(static_cast<std::size_t>(n), k);
    for (int r = 0; r < k; ++r) {
        rank[static_cast<std::size_t>(out.order[static_cast<std::size_t>(r)])] = r;
    }
    InstanceFeatures f;
    f.statement.resize(static_cast<std::size_t>(embed));
    for (auto &x : f.statement) {
        x = noise * rng.normal();
    }
    for (int i = 0; i < n; ++i) {
        std::vector<double> v(static_cast<std::size_t>(embed));
        for (auto &x : v) {
            x = noise * rng.normal();
        }
        v[static_cast<std::size_t>(rank[static_cast<std::size_t>(i)])] += 1.0;
        f.examples.push_back(std::move(v));
    }
    out.example = {path_state(out.order, n), std::move(f)};
    return out;
}

} // namespace helpers

#endif // SGDL_TESTS_HELPERS_HPP
