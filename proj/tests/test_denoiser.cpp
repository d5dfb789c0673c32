#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "sgdl/denoiser.hpp"
#include "sgdl/errors.hpp"
#include "sgdl/training.hpp"

using namespace sgdl;
using namespace sgdl::gnn;

namespace {

DenoiserConfig tiny_config() {
    DenoiserConfig c;
    c.layers = 2;
    c.hidden_dim = 8;
    c.embed_dim = 5;
    c.pool_size = 4;
    return c;
}

} // namespace

TEST_CASE("config validation") {
    DenoiserConfig c;
    CHECK_NOTHROW(c.validate());
    c.layers = 0;
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    c = DenoiserConfig{};
    c.hidden_dim = 1;
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    c = DenoiserConfig{};
    c.time_embed_dim = 7;
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    CHECK(DenoiserConfig{}.time_dim() == 256);
}

TEST_CASE("time embedding") {
    const auto zero = time_embedding(0, 16);
    for (int k = 0; k < 8; ++k) {
        CHECK(zero[2 * k] == 0.0);
        CHECK(zero[2 * k + 1] == 1.0);
    }
    CHECK(time_embedding(5, 256).size() == 256);
    CHECK_THROWS_AS(time_embedding(3, 7), InvalidArgument);

    double worst = -1.0;
    for (int a = 1; a <= 80; ++a) {
        const auto u = time_embedding(a, 256);
        for (int b = a + 1; b <= 80; ++b) {
            const auto v = time_embedding(b, 256);
            double dot = 0, nu = 0, nv = 0;
            for (std::size_t k = 0; k < u.size(); ++k) {
                dot += u[k] * v[k];
                nu += u[k] * u[k];
                nv += v[k] * v[k];
            }
            worst = std::max(worst, dot / std::sqrt(nu * nv));
        }
    }
    CHECK(worst < 1.0 - 1e-6);
}

TEST_CASE("node feature initialization") {
    Rng rng(3);
    SUBCASE("zero embeddings give zero features") {
        InstanceFeatures f;
        f.statement.assign(6, 0.0);
        f.examples.assign(4, std::vector<double>(6, 0.0));
        const Mat w = Mat::Random(12, 8);
        CHECK(init_node_features(f, w).isZero(0.0));
    }
    SUBCASE("full-size shapes and the concatenation rule") {
        const auto f = helpers::random_features(rng, 61, 1536);
        DenoiserConfig c;
        const auto p = init_params(c, 1);
        CHECK(p.node_init.rows() == 3072);
        const Mat h = init_node_features(f, p.node_init);
        CHECK(h.rows() == 61);
        CHECK(h.cols() == 256);
        Eigen::RowVectorXd x(3072);
        for (int k = 0; k < 1536; ++k) {
            x(k) = f.statement[static_cast<std::size_t>(k)];
            x(1536 + k) = f.examples[7][static_cast<std::size_t>(k)];
        }
        const Eigen::RowVectorXd want = x * p.node_init;
        CHECK((h.row(7) - want).cwiseAbs().maxCoeff() <= 1e-10);
    }
    SUBCASE("dimension mismatch") {
        const auto f = helpers::random_features(rng, 3, 4);
        CHECK_THROWS_AS(init_node_features(f, Mat::Zero(10, 8)), InvalidArgument);
    }
}

TEST_CASE("edge feature initialization") {
    Mat table(2, 4);
    table << 1, 0, 0, 0, 0, 1, 0, 0;
    SUBCASE("all-zero state") {
        const auto e = init_edge_features(EdgeState(3), table);
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) {
                if (i == j) {
                    CHECK(e.edge(i, j).isZero(0.0));
                } else {
                    CHECK(e.edge(i, j) == table.row(0));
                }
            }
        }
    }
    SUBCASE("locality and round trip") {
        Rng rng(8);
        const auto s = helpers::random_state(rng, 5);
        auto flipped = s;
        flipped.set(1, 3, 1 - s.at(1, 3));
        const auto a = init_edge_features(s, table);
        const auto b = init_edge_features(flipped, table);
        for (int i = 0; i < 5; ++i) {
            for (int j = 0; j < 5; ++j) {
                CHECK((a.edge(i, j) == b.edge(i, j)) == !(i == 1 && j == 3));
                if (i != j) {
                    const int nearest = (a.edge(i, j) - table.row(1)).norm() < (a.edge(i, j) - table.row(0)).norm();
                    CHECK(nearest == s.at(i, j));
                }
            }
        }
    }
}

TEST_CASE("gnn layer") {
    Rng rng(21);
    const auto c = tiny_config();
    const int n = 5;
    const Mat h = Mat::Random(n, c.hidden_dim);
    EdgeTensor e{n, Mat::Random(n * n, c.hidden_dim)};
    const auto t_emb = time_embedding(4, c.time_dim());

    SUBCASE("zero parameters pass features through at any depth") {
        const auto zero = zero_params(c);
        Mat hh = h;
        EdgeTensor ee = e;
        for (int rep = 0; rep < 5; ++rep) {
            for (auto mode : {Mode::Train, Mode::Eval}) {
                auto [h2, e2] = gnn_layer(hh, ee, t_emb, zero.layers[0], mode);
                CHECK(h2 == hh);
                CHECK(e2.data == ee.data);
                hh = h2;
                ee = e2;
            }
        }
    }
    SUBCASE("shapes") {
        const auto p = helpers::random_params(c, 4);
        const auto [h2, e2] = gnn_layer(h, e, t_emb, p.layers[0], Mode::Eval);
        CHECK(h2.rows() == n);
        CHECK(h2.cols() == c.hidden_dim);
        CHECK(e2.data.rows() == n * n);
        CHECK(e2.data.cols() == c.hidden_dim);
    }
    SUBCASE("permutation equivariance") {
        const auto p = helpers::random_params(c, 5);
        const auto perm = helpers::random_permutation(rng, n);
        Mat ph(n, c.hidden_dim);
        EdgeTensor pe{n, Mat::Zero(n * n, c.hidden_dim)};
        for (int i = 0; i < n; ++i) {
            ph.row(perm[i]) = h.row(i);
            for (int j = 0; j < n; ++j) {
                pe.data.row(perm[i] * n + perm[j]) = e.edge(i, j);
            }
        }
        const auto [h1, e1] = gnn_layer(h, e, t_emb, p.layers[0], Mode::Eval);
        const auto [h2, e2] = gnn_layer(ph, pe, t_emb, p.layers[0], Mode::Eval);
        for (int i = 0; i < n; ++i) {
            CHECK(h2.row(perm[i]) == h1.row(i));
            for (int j = 0; j < n; ++j) {
                CHECK(e2.edge(perm[i], perm[j]) == e1.edge(i, j));
            }
        }
    }
    SUBCASE("non-finite input") {
        const auto p = helpers::random_params(c, 5);
        Mat bad = h;
        bad(2, 1) = std::nan("");
        CHECK_THROWS_AS(gnn_layer(bad, e, t_emb, p.layers[0], Mode::Eval), NumericError);
    }
}

TEST_CASE("predict_p0") {
    Rng rng(12);
    auto c = tiny_config();
    c.hidden_dim = 16;
    const int n = 6;
    const auto p = helpers::random_params(c, 9);
    const auto f = helpers::random_features(rng, n, c.embed_dim);
    const auto s = helpers::random_state(rng, n);

    SUBCASE("eval mode is bit-reproducible and strictly inside (0, 1)") {
        const auto a = predict_p0(s, 3, f, p, Mode::Eval);
        const auto b = predict_p0(s, 3, f, p, Mode::Eval);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                CHECK(a.p_one(i, j) == b.p_one(i, j));
                if (i != j) {
                    CHECK(a.p_one(i, j) > 0.0);
                    CHECK(a.p_one(i, j) < 1.0);
                }
            }
        }
    }
    SUBCASE("fresh parameters predict one half") {
        const auto fresh = init_params(c, 2);
        const auto a = predict_p0(s, 3, f, fresh, Mode::Train);
        CHECK(a.p_one(0, 1) == 0.5);
        CHECK(a.p_one(4, 2) == 0.5);
    }
    SUBCASE("permutation equivariance") {
        for (int trial = 0; trial < 20; ++trial) {
            const auto perm = helpers::random_permutation(rng, n);
            const auto a = predict_p0(s, 1 + trial, f, p, Mode::Eval);
            const auto b = predict_p0(helpers::permute(s, perm), 1 + trial, helpers::permute(f, perm), p, Mode::Eval);
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < n; ++j) {
                    CHECK(b.p_one(perm[i], perm[j]) == a.p_one(i, j));
                }
            }
        }
    }
    SUBCASE("batched forward matches single-graph calls") {
        const auto s2 = helpers::random_state(rng, n);
        const auto f2 = helpers::random_features(rng, n, c.embed_dim);
        const Mat both = forward({{&s, 3, &f}, {&s2, 7, &f2}}, p, Mode::Eval);
        const auto second = predict_p0(s2, 7, f2, p, Mode::Eval);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                if (i != j) {
                    const double q = sigmoid(both(n * (n - 1) + edge_row(n, i, j), 0));
                    CHECK(q == second.p_one(i, j));
                }
            }
        }
    }
    SUBCASE("rejects mismatched parameters") {
        auto other = c;
        other.embed_dim = 3;
        CHECK_THROWS_AS(predict_p0(s, 3, f, init_params(other, 1), Mode::Eval), InvalidArgument);
    }
}

TEST_CASE("gradients match central differences") {
    Rng rng(77);
    const auto c = tiny_config();
    const auto schedule = diffusion::build_schedule(5, diffusion::ScheduleKind::Linear);
    std::vector<Example> data;
    for (int k = 0; k < 3; ++k) {
        data.push_back({helpers::random_state(rng, 4), helpers::random_features(rng, 4, c.embed_dim)});
    }
    std::vector<const Example *> batch;
    for (const auto &ex : data) {
        batch.push_back(&ex);
    }
    for (auto objective : {Objective::Elbo, Objective::CrossEntropy}) {
        DenoiserParams params = helpers::random_params(c, 31);
        const auto result = loss_and_gradients(batch, params, schedule, objective, 5);

        std::vector<const Mat *> grads;
        result.gradients.for_each([&grads](const std::string &, const Mat &m, bool) { grads.push_back(&m); });
        double worst = 0.0;
        std::string worst_name;
        std::size_t index = 0;
        int checked = 0;
        params.for_each([&](const std::string &name, Mat &m, bool learnable) {
            const Mat &g = *grads[index++];
            if (!learnable) {
                CHECK(g.isZero(0.0));
                return;
            }
            for (Eigen::Index k = 0; k < m.size(); ++k) {
                const double keep = m.data()[k];
                const double h = 1e-5;
                m.data()[k] = keep + h;
                const double up = loss_and_gradients(batch, params, schedule, objective, 5).loss;
                m.data()[k] = keep - h;
                const double down = loss_and_gradients(batch, params, schedule, objective, 5).loss;
                m.data()[k] = keep;
                const double fd = (up - down) / (2 * h);
                const double an = g.data()[k];
                const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
                if (rel > worst) {
                    worst = rel;
                    worst_name = name;
                }
                ++checked;
            }
        });
        INFO("objective " << to_string(objective) << ", worst tensor " << worst_name);
        CHECK(checked > 1000);
        CHECK(worst < 1e-4);
    }
}
