#include "sgdl/diffusion.hpp"

#include <cmath>

#include "sgdl/errors.hpp"

namespace sgdl::diffusion {

namespace {

void check_node(int n, int i, int j) {
    if (i < 0 || j < 0 || i >= n || j >= n) {
        throw InvalidArgument("edge (" + std::to_string(i) + ", " + std::to_string(j) + ") outside " +
                              std::to_string(n) + " nodes");
    }
}

void check_step(const NoiseSchedule &schedule, int t) {
    if (t < 1 || t > schedule.steps()) {
        throw InvalidArgument("step " + std::to_string(t) + " outside [1, " + std::to_string(schedule.steps()) +
                              "]");
    }
}

double safe_log(double p) { return std::log(p > kProbFloor ? p : kProbFloor); }

Mat2 multiply(const Mat2 &a, const Mat2 &b) {
    Mat2 c{};
    for (int r = 0; r < 2; ++r) {
        for (int k = 0; k < 2; ++k) {
            c[r][k] = a[r][0] * b[0][k] + a[r][1] * b[1][k];
        }
    }
    return c;
}

constexpr Mat2 kIdentity{{{1.0, 0.0}, {0.0, 1.0}}};

} // namespace

EdgeState::EdgeState(int n) : n_(n) {
    if (n < 0) {
        throw InvalidArgument("negative node count");
    }
    bits_.assign(static_cast<std::size_t>(n) * n, 0);
}

void EdgeState::set(int i, int j, int value) {
    check_node(n_, i, j);
    if (value != 0 && value != 1) {
        throw InvalidArgument("edge values are binary");
    }
    if (i == j && value != 0) {
        throw InvalidArgument("self-loops are not representable");
    }
    bits_[index(i, j)] = static_cast<std::uint8_t>(value);
}

int EdgeState::edge_count() const {
    int count = 0;
    for (auto b : bits_) {
        count += b;
    }
    return count;
}

EdgeDistribution::EdgeDistribution(int n) : n_(n) {
    if (n < 0) {
        throw InvalidArgument("negative node count");
    }
    p_.assign(static_cast<std::size_t>(n) * n, 0.0);
}

void EdgeDistribution::set(int i, int j, double p) {
    check_node(n_, i, j);
    if (!std::isfinite(p)) {
        throw NumericError("probability of edge (" + std::to_string(i) + ", " + std::to_string(j) +
                           ") is not finite");
    }
    if (!(p >= 0.0 && p <= 1.0)) {
        throw InvalidArgument("edge probability outside [0, 1]");
    }
    if (i == j && p != 0.0) {
        throw InvalidArgument("diagonal probabilities must be zero");
    }
    p_[static_cast<std::size_t>(i) * n_ + j] = p;
}

std::string to_string(ScheduleKind kind) {
    switch (kind) {
    case ScheduleKind::Reciprocal:
        return "reciprocal";
    case ScheduleKind::Linear:
        return "linear";
    case ScheduleKind::Custom:
        return "custom";
    }
    return "custom";
}

ScheduleKind schedule_kind_from_string(const std::string &name) {
    if (name == "reciprocal" || name == "default") {
        return ScheduleKind::Reciprocal;
    }
    if (name == "linear") {
        return ScheduleKind::Linear;
    }
    if (name == "custom") {
        return ScheduleKind::Custom;
    }
    throw InvalidArgument("unknown schedule kind '" + name + "'");
}

Mat2 transition_matrix(double beta) {
    if (!(beta >= 0.0 && beta <= 1.0)) {
        throw InvalidArgument("corruption ratio outside [0, 1]");
    }
    return Mat2{{{1.0 - beta, beta}, {beta, 1.0 - beta}}};
}

NoiseSchedule::NoiseSchedule(std::vector<double> betas, ScheduleKind kind)
    : kind_(kind), betas_(std::move(betas)) {
    if (betas_.empty()) {
        throw InvalidArgument("a schedule needs at least one step");
    }
    q_.reserve(betas_.size());
    qbar_.reserve(betas_.size() + 1);
    qbar_.push_back(kIdentity);
    for (double b : betas_) {
        q_.push_back(transition_matrix(b));
        qbar_.push_back(multiply(qbar_.back(), q_.back()));
    }
}

double NoiseSchedule::beta(int t) const {
    check_step(*this, t);
    return betas_[t - 1];
}

const Mat2 &NoiseSchedule::q(int t) const {
    check_step(*this, t);
    return q_[t - 1];
}

const Mat2 &NoiseSchedule::qbar(int t) const {
    if (t < 0 || t > steps()) {
        throw InvalidArgument("cumulative step " + std::to_string(t) + " outside [0, " + std::to_string(steps()) +
                              "]");
    }
    return qbar_[t];
}

NoiseSchedule build_schedule(int steps, ScheduleKind kind) {
    if (steps < 1) {
        throw InvalidArgument("diffusion needs T >= 1");
    }
    std::vector<double> betas(steps);
    for (int t = 1; t <= steps; ++t) {
        switch (kind) {
        case ScheduleKind::Reciprocal:
            betas[t - 1] = 1.0 / static_cast<double>(steps - t + 1);
            break;
        case ScheduleKind::Linear:
            betas[t - 1] = static_cast<double>(t) / (2.0 * steps);
            break;
        case ScheduleKind::Custom:
            throw InvalidArgument("custom schedules are built from an explicit ratio list");
        }
    }
    return NoiseSchedule(std::move(betas), kind);
}

double closed_form_flip(const NoiseSchedule &schedule, int t) {
    double keep = 1.0;
    for (int s = 1; s <= t; ++s) {
        keep *= 1.0 - 2.0 * schedule.beta(s);
    }
    return 0.5 * (1.0 - keep);
}

std::array<double, 2> edge_marginal(const NoiseSchedule &schedule, int v0, int t) {
    check_step(schedule, t);
    const auto &row = schedule.qbar(t)[v0];
    return {row[0], row[1]};
}

std::array<double, 2> edge_posterior(const NoiseSchedule &schedule, int vt, int v0, int t) {
    check_step(schedule, t);
    if (t == 1) {
        return v0 == 1 ? std::array<double, 2>{0.0, 1.0} : std::array<double, 2>{1.0, 0.0};
    }
    const Mat2 &qt = schedule.q(t);
    const Mat2 &prev = schedule.qbar(t - 1);
    const double den = schedule.qbar(t)[v0][vt];
    if (den > 0.0) {
        return {qt[0][vt] * prev[v0][0] / den, qt[1][vt] * prev[v0][1] / den};
    }
    // psi_t is impossible under this psi_0; keep only the one-step likelihood.
    const double norm = qt[0][vt] + qt[1][vt];
    return {qt[0][vt] / norm, qt[1][vt] / norm};
}

std::array<double, 2> edge_reverse(const NoiseSchedule &schedule, int vt, double p0_one, int t) {
    const auto from0 = edge_posterior(schedule, vt, 0, t);
    const auto from1 = edge_posterior(schedule, vt, 1, t);
    return {(1.0 - p0_one) * from0[0] + p0_one * from1[0], (1.0 - p0_one) * from0[1] + p0_one * from1[1]};
}

EdgeTerm edge_elbo_term(const NoiseSchedule &schedule, int v0, int vt, double p0_one, int t) {
    check_step(schedule, t);
    if (t == 1) {
        const double p = v0 == 1 ? p0_one : 1.0 - p0_one;
        const double grad = p > kProbFloor ? (v0 == 1 ? -1.0 / p : 1.0 / p) : 0.0;
        return {-safe_log(p), grad};
    }
    const auto q = edge_posterior(schedule, vt, v0, t);
    const auto from0 = edge_posterior(schedule, vt, 0, t);
    const auto from1 = edge_posterior(schedule, vt, 1, t);
    EdgeTerm term{0.0, 0.0};
    for (int v = 0; v < 2; ++v) {
        if (q[v] <= 0.0) {
            continue;
        }
        const double p = (1.0 - p0_one) * from0[v] + p0_one * from1[v];
        term.value += q[v] * (safe_log(q[v]) - safe_log(p));
        if (p > kProbFloor) {
            term.d_p0_one -= q[v] / p * (from1[v] - from0[v]);
        }
    }
    return term;
}

double edge_prior_kl(const NoiseSchedule &schedule, int v0) {
    const auto m = edge_marginal(schedule, v0, schedule.steps());
    double kl = 0.0;
    for (double p : m) {
        if (p > 0.0) {
            kl += p * (std::log(p) - std::log(0.5));
        }
    }
    return kl;
}

EdgeDistribution forward_marginal(const EdgeState &psi0, int t, const NoiseSchedule &schedule) {
    check_step(schedule, t);
    const int n = psi0.nodes();
    EdgeDistribution out(n);
    const Mat2 &m = schedule.qbar(t);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (i != j) {
                out.set(i, j, m[psi0.at(i, j)][1]);
            }
        }
    }
    return out;
}

EdgeState forward_sample(const EdgeState &psi0, int t, const NoiseSchedule &schedule,
                         const std::vector<double> &uniforms) {
    const int n = psi0.nodes();
    if (uniforms.size() != static_cast<std::size_t>(n) * n) {
        throw InvalidArgument("one uniform per (i, j) cell is required");
    }
    const EdgeDistribution marginal = forward_marginal(psi0, t, schedule);
    EdgeState out(n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (i != j && uniforms[static_cast<std::size_t>(i) * n + j] < marginal.p_one(i, j)) {
                out.set(i, j, 1);
            }
        }
    }
    return out;
}

namespace {

std::vector<double> draw_uniforms(int n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> u(static_cast<std::size_t>(n) * n);
    for (auto &x : u) {
        x = rng.uniform();
    }
    return u;
}

} // namespace

EdgeState forward_sample(const EdgeState &psi0, int t, const NoiseSchedule &schedule, std::uint64_t seed) {
    return forward_sample(psi0, t, schedule, draw_uniforms(psi0.nodes(), seed));
}

EdgeDistribution posterior(const EdgeState &psit, const EdgeState &psi0, int t, const NoiseSchedule &schedule) {
    check_step(schedule, t);
    if (psit.nodes() != psi0.nodes()) {
        throw InvalidArgument("posterior needs states over the same nodes");
    }
    const int n = psi0.nodes();
    EdgeDistribution out(n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (i != j) {
                out.set(i, j, edge_posterior(schedule, psit.at(i, j), psi0.at(i, j), t)[1]);
            }
        }
    }
    return out;
}

EdgeDistribution reverse_distribution(const EdgeState &psit, const EdgeDistribution &p0, int t,
                                      const NoiseSchedule &schedule) {
    check_step(schedule, t);
    if (psit.nodes() != p0.nodes()) {
        throw InvalidArgument("denoiser output shape does not match the noisy state");
    }
    const int n = psit.nodes();
    EdgeDistribution out(n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (i != j) {
                const double p1 = edge_reverse(schedule, psit.at(i, j), p0.p_one(i, j), t)[1];
                out.set(i, j, std::min(1.0, std::max(0.0, p1)));
            }
        }
    }
    return out;
}

EdgeState reverse_step(const EdgeState &psit, const EdgeDistribution &p0, int t, const NoiseSchedule &schedule,
                       std::uint64_t seed) {
    const EdgeDistribution law = reverse_distribution(psit, p0, t, schedule);
    const int n = psit.nodes();
    const auto u = draw_uniforms(n, seed);
    EdgeState out(n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (i != j && u[static_cast<std::size_t>(i) * n + j] < law.p_one(i, j)) {
                out.set(i, j, 1);
            }
        }
    }
    return out;
}

namespace {

EdgeDistribution checked_denoise(const Denoiser &denoiser, const EdgeState &psit, int t) {
    EdgeDistribution p0 = denoiser(psit, t);
    if (p0.nodes() != psit.nodes()) {
        throw InvalidArgument("denoiser output shape does not match the noisy state");
    }
    const int n = p0.nodes();
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (i != j && !std::isfinite(p0.p_one(i, j))) {
                throw NumericError("denoiser output at edge (" + std::to_string(i) + ", " + std::to_string(j) +
                                   ") at step " + std::to_string(t) + " is not finite");
            }
        }
    }
    return p0;
}

double summed_term(const NoiseSchedule &schedule, const EdgeState &psi0, const EdgeState &psit,
                   const EdgeDistribution &p0, int t) {
    const int n = psi0.nodes();
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (i != j) {
                total += edge_elbo_term(schedule, psi0.at(i, j), psit.at(i, j), p0.p_one(i, j), t).value;
            }
        }
    }
    return total;
}

} // namespace

ElboTerms elbo(const EdgeState &psi0, const Denoiser &denoiser, const NoiseSchedule &schedule,
               std::uint64_t seed, ElboMode mode) {
    const int n = psi0.nodes();
    const int T = schedule.steps();
    ElboTerms out;
    out.kl.assign(T > 1 ? T - 1 : 0, 0.0);

    std::vector<std::pair<int, int>> cells;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (i != j) {
                cells.emplace_back(i, j);
                out.prior_kl += edge_prior_kl(schedule, psi0.at(i, j));
            }
        }
    }

    if (mode == ElboMode::Exact && cells.size() > 16) {
        throw InvalidArgument("exact ELBO enumerates 2^(n(n-1)) states; at most 16 edges supported");
    }

    Rng rng(seed);
    for (int t = 1; t <= T; ++t) {
        double term = 0.0;
        if (mode == ElboMode::Sampled) {
            std::vector<double> u(static_cast<std::size_t>(n) * n);
            for (auto &x : u) {
                x = rng.uniform();
            }
            const EdgeState psit = forward_sample(psi0, t, schedule, u);
            term = summed_term(schedule, psi0, psit, checked_denoise(denoiser, psit, t), t);
        } else {
            const std::uint64_t configs = std::uint64_t{1} << cells.size();
            for (std::uint64_t mask = 0; mask < configs; ++mask) {
                EdgeState psit(n);
                double weight = 1.0;
                for (std::size_t e = 0; e < cells.size(); ++e) {
                    const int bit = static_cast<int>((mask >> e) & 1U);
                    const auto [i, j] = cells[e];
                    weight *= edge_marginal(schedule, psi0.at(i, j), t)[bit];
                    psit.set(i, j, bit);
                }
                if (weight == 0.0) {
                    continue;
                }
                term += weight * summed_term(schedule, psi0, psit, checked_denoise(denoiser, psit, t), t);
            }
        }
        if (t == 1) {
            out.reconstruction = -term;
        } else {
            out.kl[t - 2] = term;
        }
    }

    out.elbo = out.reconstruction - out.prior_kl;
    for (double k : out.kl) {
        out.elbo -= k;
    }
    return out;
}

} // namespace sgdl::diffusion
