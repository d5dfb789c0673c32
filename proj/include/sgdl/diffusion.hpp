#ifndef SGDL_DIFFUSION_HPP
#define SGDL_DIFFUSION_HPP

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sgdl/rng.hpp"

/// Discrete (binary) diffusion over the directed edges of a demonstration graph.
///
/// Every off-diagonal edge is an independent binary variable that is corrupted by
/// a symmetric flip channel Q_t = [[1-b, b], [b, 1-b]]. Steps are 1-based:
/// t = 1 is the least corrupted latent and t = T the terminal one.
namespace sgdl::diffusion {

using Mat2 = std::array<std::array<double, 2>, 2>;

/// Probability floor applied before every logarithm.
inline constexpr double kProbFloor = 1e-12;

/// Directed 0/1 adjacency over n nodes without self-loops.
class EdgeState {
public:
    EdgeState() = default;
    explicit EdgeState(int n);

    int nodes() const { return n_; }
    int at(int i, int j) const { return bits_[index(i, j)]; }
    void set(int i, int j, int value);
    /// Number of edges with value 1.
    int edge_count() const;
    /// Number of binary variables, n(n-1).
    int variables() const { return n_ * (n_ - 1); }

    bool operator==(const EdgeState &) const = default;

private:
    std::size_t index(int i, int j) const { return static_cast<std::size_t>(i) * n_ + j; }

    int n_ = 0;
    std::vector<std::uint8_t> bits_;
};

/// Independent Bernoulli law per edge; p_one(i, j) is P(edge = 1).
class EdgeDistribution {
public:
    EdgeDistribution() = default;
    explicit EdgeDistribution(int n);

    int nodes() const { return n_; }
    double p_one(int i, int j) const { return p_[static_cast<std::size_t>(i) * n_ + j]; }
    void set(int i, int j, double p);

private:
    int n_ = 0;
    std::vector<double> p_;
};

enum class ScheduleKind {
    Reciprocal, ///< b_t = 1/(T-t+1), the default
    Linear,     ///< b_t = t/(2T)
    Custom,     ///< caller-supplied list
};

std::string to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(const std::string &name);

/// T corruption ratios with their one-step and cumulative transition matrices.
class NoiseSchedule {
public:
    /// Builds Q_t and Qbar_t from explicit ratios; every ratio must lie in [0, 1].
    explicit NoiseSchedule(std::vector<double> betas, ScheduleKind kind = ScheduleKind::Custom);

    int steps() const { return static_cast<int>(betas_.size()); }
    ScheduleKind kind() const { return kind_; }
    const std::vector<double> &betas() const { return betas_; }
    double beta(int t) const;
    const Mat2 &q(int t) const;
    /// Qbar_t = Q_1 ... Q_t; qbar(0) is the identity.
    const Mat2 &qbar(int t) const;

private:
    ScheduleKind kind_;
    std::vector<double> betas_;
    std::vector<Mat2> q_;
    std::vector<Mat2> qbar_;
};

Mat2 transition_matrix(double beta);
NoiseSchedule build_schedule(int steps, ScheduleKind kind = ScheduleKind::Reciprocal);

/// Off-diagonal of Qbar_t from the product formula (1 - prod(1 - 2 b_s)) / 2.
double closed_form_flip(const NoiseSchedule &schedule, int t);

// Per-edge laws. Values are probabilities of the two outcomes {0, 1}.

/// q(psi_t | psi_0 = v0).
std::array<double, 2> edge_marginal(const NoiseSchedule &schedule, int v0, int t);
/// q(psi_{t-1} | psi_t, psi_0). For t = 1 this is the point mass on psi_0.
std::array<double, 2> edge_posterior(const NoiseSchedule &schedule, int vt, int v0, int t);
/// p(psi_{t-1} | psi_t) = sum_a q(psi_{t-1} | psi_t, a) p0(a).
std::array<double, 2> edge_reverse(const NoiseSchedule &schedule, int vt, double p0_one, int t);

/// One per-edge term of the negative ELBO and its derivative in p0_one.
/// t = 1 gives -log p0(v0); t > 1 gives KL[q(. | vt, v0) || p(. | vt)].
struct EdgeTerm {
    double value;
    double d_p0_one;
};
EdgeTerm edge_elbo_term(const NoiseSchedule &schedule, int v0, int vt, double p0_one, int t);
/// KL[q(psi_T | v0) || Bernoulli(0.5)].
double edge_prior_kl(const NoiseSchedule &schedule, int v0);

EdgeDistribution forward_marginal(const EdgeState &psi0, int t, const NoiseSchedule &schedule);
/// Corrupts each edge with its own uniform draw: bit = u(i, j) < p_one(i, j).
EdgeState forward_sample(const EdgeState &psi0, int t, const NoiseSchedule &schedule,
                         const std::vector<double> &uniforms);
EdgeState forward_sample(const EdgeState &psi0, int t, const NoiseSchedule &schedule, std::uint64_t seed);

EdgeDistribution posterior(const EdgeState &psit, const EdgeState &psi0, int t, const NoiseSchedule &schedule);
EdgeDistribution reverse_distribution(const EdgeState &psit, const EdgeDistribution &p0, int t,
                                      const NoiseSchedule &schedule);
EdgeState reverse_step(const EdgeState &psit, const EdgeDistribution &p0, int t, const NoiseSchedule &schedule,
                       std::uint64_t seed);

/// Predicts p(psi_0 | psi_t) given the noisy state and its step.
using Denoiser = std::function<EdgeDistribution(const EdgeState &, int)>;

enum class ElboMode {
    Sampled, ///< one psi_t ~ q(psi_t | psi_0) per step
    Exact,   ///< expectation by enumerating every psi_t; needs n(n-1) <= 16
};

struct ElboTerms {
    double elbo = 0.0;           ///< reconstruction - sum(kl) - prior_kl
    double reconstruction = 0.0; ///< log p(psi_0 | psi_1)
    std::vector<double> kl;      ///< kl[t - 2] for t = 2..T
    double prior_kl = 0.0;       ///< constant in the denoiser parameters
};

ElboTerms elbo(const EdgeState &psi0, const Denoiser &denoiser, const NoiseSchedule &schedule,
               std::uint64_t seed, ElboMode mode = ElboMode::Sampled);

} // namespace sgdl::diffusion

#endif // SGDL_DIFFUSION_HPP
