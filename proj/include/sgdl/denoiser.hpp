#ifndef SGDL_DENOISER_HPP
#define SGDL_DENOISER_HPP

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sgdl/diffusion.hpp"
#include "sgdl/tensor.hpp"

/// Anisotropic edge-gated GNN that predicts p(psi_0 | psi_t, x).
///
/// Node i starts from W [x; e_i] (statement and example embeddings), edge (i, j)
/// from a learned embedding of its noisy value. Each layer updates
///
///   ehat_ij = P e_ij + Q h_i + R h_j
///   e_ij   <- e_ij + MLP_e(BN(ehat_ij)) + MLP_t(t)
///   h_i    <- h_i + ReLU(BN(U h_i + sum_{j != i} sigmoid(ehat_ij) * V h_j))
///
/// and a two-layer head maps the final edge features to one logit per edge.
/// Linear maps are stored input-major (x * W), so a d x d matrix acts on row vectors.
namespace sgdl::gnn {

using diffusion::EdgeDistribution;
using diffusion::EdgeState;

struct DenoiserConfig {
    int layers = 3;
    int hidden_dim = 256;
    int embed_dim = 1536;
    int time_embed_dim = 0; ///< 0 means hidden_dim
    int pool_size = 61;

    int time_dim() const { return time_embed_dim > 0 ? time_embed_dim : hidden_dim; }
    void validate() const;

    bool operator==(const DenoiserConfig &) const = default;
};

enum class Mode { Train, Eval };

/// Two-layer perceptron: w2^T relu(w1^T x + b1) + b2.
struct Mlp {
    Mat w1, b1, w2, b2;
};

/// Per-feature batch normalization with running statistics for eval mode.
struct BatchNorm {
    Mat gamma, beta, running_mean, running_var;
};

struct LayerParams {
    Mat P, Q, R, U, V;
    Mlp edge_mlp;
    Mlp time_mlp;
    BatchNorm edge_norm;
    BatchNorm node_norm;
};

struct DenoiserParams {
    DenoiserConfig config;
    Mat node_init;  ///< 2 * embed_dim x d
    Mat edge_embed; ///< 2 x d, row v embeds a noisy edge value v
    std::vector<LayerParams> layers;
    Mlp head;       ///< d -> d -> 1

    /// Visits every tensor as f(name, tensor, learnable). Running statistics are not learnable.
    template <class F>
    void for_each(F &&f) {
        visit(*this, f);
    }
    template <class F>
    void for_each(F &&f) const {
        visit(*this, f);
    }

    /// Same shapes, every entry zero.
    DenoiserParams zeros_like() const;

private:
    template <class Self, class F>
    static void visit(Self &self, F &f) {
        f(std::string("node_init"), self.node_init, true);
        f(std::string("edge_embed"), self.edge_embed, true);
        for (std::size_t l = 0; l < self.layers.size(); ++l) {
            auto &layer = self.layers[l];
            const std::string p = "layer" + std::to_string(l) + ".";
            f(p + "P", layer.P, true);
            f(p + "Q", layer.Q, true);
            f(p + "R", layer.R, true);
            f(p + "U", layer.U, true);
            f(p + "V", layer.V, true);
            visit_mlp(p + "edge_mlp.", layer.edge_mlp, f);
            visit_mlp(p + "time_mlp.", layer.time_mlp, f);
            visit_norm(p + "edge_norm.", layer.edge_norm, f);
            visit_norm(p + "node_norm.", layer.node_norm, f);
        }
        visit_mlp(std::string("head."), self.head, f);
    }
    template <class M, class F>
    static void visit_mlp(const std::string &p, M &mlp, F &f) {
        f(p + "w1", mlp.w1, true);
        f(p + "b1", mlp.b1, true);
        f(p + "w2", mlp.w2, true);
        f(p + "b2", mlp.b2, true);
    }
    template <class N, class F>
    static void visit_norm(const std::string &p, N &bn, F &f) {
        f(p + "gamma", bn.gamma, true);
        f(p + "beta", bn.beta, true);
        f(p + "running_mean", bn.running_mean, false);
        f(p + "running_var", bn.running_var, false);
    }
};

/// Fan-in uniform weights, unit BN scale, zero final head layer (initial p_one = 0.5).
DenoiserParams init_params(const DenoiserConfig &config, std::uint64_t seed);
/// Every tensor zero, including BN scale and running statistics.
DenoiserParams zero_params(const DenoiserConfig &config);

/// Embeddings of the statement and of every pooled example.
struct InstanceFeatures {
    std::vector<double> statement;
    std::vector<std::vector<double>> examples;

    int nodes() const { return static_cast<int>(examples.size()); }
    void validate(int embed_dim) const;
};

/// N x N x d edge features; row i * n + j holds edge (i, j).
struct EdgeTensor {
    int n = 0;
    Mat data;

    auto edge(int i, int j) const { return data.row(static_cast<Eigen::Index>(i) * n + j); }
};

/// Interleaved sin/cos features at frequencies 10000^(-2k/dim).
std::vector<double> time_embedding(int t, int dim);

Mat init_node_features(const InstanceFeatures &features, const Mat &node_init);
EdgeTensor init_edge_features(const EdgeState &psit, const Mat &table);

/// One message-passing layer on a single graph. Diagonal edge features pass through unchanged.
std::pair<Mat, EdgeTensor> gnn_layer(const Mat &h, const EdgeTensor &e, const std::vector<double> &t_emb,
                                     const LayerParams &layer, Mode mode);

EdgeDistribution predict_p0(const EdgeState &psit, int t, const InstanceFeatures &features,
                            const DenoiserParams &params, Mode mode);

// ---------------------------------------------------------------------------
// Batched engine used by training and scoring.

struct GraphInput {
    const EdgeState *psit;
    int t;
    const InstanceFeatures *features;
};

struct BatchNormTrace {
    Mat xhat;
    Eigen::RowVectorXd inv_std;
    Eigen::RowVectorXd batch_mean;
    Eigen::RowVectorXd batch_var; ///< biased
    Eigen::Index count = 0;
};

struct LayerTrace {
    Mat e_in, h_in;
    Mat hv;
    Mat gate;
    BatchNormTrace edge_bn;
    Mat edge_bn_out, a1;
    Mat ta;
    BatchNormTrace node_bn;
    Mat node_bn_out;
};

/// Everything backward() needs from a forward pass.
struct Trace {
    Mode mode = Mode::Eval;
    int graphs = 0;
    int nodes = 0;
    int edges_per_graph = 0;
    std::vector<int> src, dst;       ///< global node row of each edge's endpoints
    std::vector<std::uint8_t> noisy; ///< psi_t value of each edge row
    Mat x0, t_emb;
    std::vector<LayerTrace> layers;
    Mat e_final, o1, oa;
};

/// Row of edge (i, j) inside one graph's block of n(n-1) edge rows.
inline int edge_row(int n, int i, int j) { return i * (n - 1) + (j < i ? j : j - 1); }

/// Logits for every off-diagonal edge of every graph, (graphs * n(n-1)) x 1.
/// All graphs must have the same node count.
Mat forward(const std::vector<GraphInput> &batch, const DenoiserParams &params, Mode mode, Trace *trace = nullptr);

/// Gradients of sum(dlogits .* logits) for every learnable tensor; running statistics come back zero.
DenoiserParams backward(const Trace &trace, const Mat &dlogits, const DenoiserParams &params);

/// Folds the batch statistics of a train-mode pass into the running averages.
void update_running_stats(DenoiserParams &params, const Trace &trace, double momentum);

double sigmoid(double x);

} // namespace sgdl::gnn

#endif // SGDL_DENOISER_HPP
