#include "sgdl/denoiser.hpp"

#include <algorithm>
#include <cmath>

#include "sgdl/errors.hpp"
#include "sgdl/rng.hpp"

namespace sgdl::gnn {

namespace {

constexpr double kBnEps = 1e-5;

struct Topology {
    int graphs = 0;
    int nodes = 0;
    int edges = 0; // per graph
    std::vector<int> src, dst;
};

Topology make_topology(int graphs, int n) {
    Topology topo;
    topo.graphs = graphs;
    topo.nodes = n;
    topo.edges = n * (n - 1);
    topo.src.reserve(static_cast<std::size_t>(graphs) * topo.edges);
    topo.dst.reserve(static_cast<std::size_t>(graphs) * topo.edges);
    for (int b = 0; b < graphs; ++b) {
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                if (i != j) {
                    topo.src.push_back(b * n + i);
                    topo.dst.push_back(b * n + j);
                }
            }
        }
    }
    return topo;
}

Mat uniform_matrix(Rng &rng, Eigen::Index rows, Eigen::Index cols, double bound) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = (2.0 * rng.uniform() - 1.0) * bound;
    }
    return m;
}

Mlp uniform_mlp(Rng &rng, int in, int hidden, int out) {
    const double b_in = 1.0 / std::sqrt(static_cast<double>(in));
    const double b_hidden = 1.0 / std::sqrt(static_cast<double>(hidden));
    Mlp mlp;
    mlp.w1 = uniform_matrix(rng, in, hidden, b_in);
    mlp.b1 = uniform_matrix(rng, 1, hidden, b_in);
    mlp.w2 = uniform_matrix(rng, hidden, out, b_hidden);
    mlp.b2 = uniform_matrix(rng, 1, out, b_hidden);
    return mlp;
}

BatchNorm unit_norm(int d) {
    return BatchNorm{Mat::Ones(1, d), Mat::Zero(1, d), Mat::Zero(1, d), Mat::Ones(1, d)};
}

Mat relu(const Mat &x) { return x.cwiseMax(0.0); }

Mat sigmoid_matrix(const Mat &x) {
    Mat out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        out.data()[i] = sigmoid(x.data()[i]);
    }
    return out;
}

Mat positive_mask(const Mat &x) { return (x.array() > 0.0).cast<double>().matrix(); }

Mat batch_norm_forward(const Mat &x, const BatchNorm &bn, Mode mode, BatchNormTrace *trace) {
    Eigen::RowVectorXd mean;
    Eigen::RowVectorXd inv_std;
    Eigen::RowVectorXd var;
    if (mode == Mode::Train) {
        const double m = static_cast<double>(std::max<Eigen::Index>(x.rows(), 1));
        mean = x.colwise().sum() / m;
        var = (x.rowwise() - mean).array().square().colwise().sum().matrix() / m;
        inv_std = (var.array() + kBnEps).rsqrt().matrix();
    } else {
        mean = bn.running_mean.row(0);
        inv_std = (bn.running_var.row(0).array() + kBnEps).rsqrt().matrix();
    }
    Mat xhat = ((x.rowwise() - mean).array().rowwise() * inv_std.array()).matrix();
    Mat y = (xhat.array().rowwise() * bn.gamma.row(0).array()).matrix();
    y.rowwise() += bn.beta.row(0);
    if (trace != nullptr) {
        trace->xhat = std::move(xhat);
        trace->inv_std = inv_std;
        trace->batch_mean = mean;
        trace->batch_var = var;
        trace->count = x.rows();
    }
    return y;
}

Mat batch_norm_backward(const Mat &dy, const BatchNorm &bn, const BatchNormTrace &trace, Mode mode,
                        BatchNorm &grad) {
    grad.gamma += dy.cwiseProduct(trace.xhat).colwise().sum();
    grad.beta += dy.colwise().sum();
    const Mat dxhat = (dy.array().rowwise() * bn.gamma.row(0).array()).matrix();
    if (mode == Mode::Eval) {
        return (dxhat.array().rowwise() * trace.inv_std.array()).matrix();
    }
    const double m = static_cast<double>(std::max<Eigen::Index>(trace.count, 1));
    const Eigen::RowVectorXd sum1 = dxhat.colwise().sum();
    const Eigen::RowVectorXd sum2 = dxhat.cwiseProduct(trace.xhat).colwise().sum();
    Mat dx = m * dxhat;
    dx.rowwise() -= sum1;
    dx -= (trace.xhat.array().rowwise() * sum2.array()).matrix();
    return (dx.array().rowwise() * (trace.inv_std.array() / m)).matrix();
}

void mlp_backward(const Mat &input, const Mat &hidden, const Mat &dout, const Mlp &mlp, Mlp &grad, Mat *dinput) {
    grad.w2.noalias() += hidden.transpose() * dout;
    grad.b2 += dout.colwise().sum();
    Mat dhidden = (dout * mlp.w2.transpose()).cwiseProduct(positive_mask(hidden));
    grad.w1.noalias() += input.transpose() * dhidden;
    grad.b1 += dhidden.colwise().sum();
    if (dinput != nullptr) {
        *dinput = dhidden * mlp.w1.transpose();
    }
}

/// Sum over j != i of gate_ij * v_j, per feature. Terms are added in sorted order
/// so the result depends only on the multiset of neighbor contributions.
Mat gated_messages(const Topology &topo, const Mat &gate, const Mat &hv) {
    const int n = topo.nodes;
    const Eigen::Index d = hv.cols();
    Mat msg = Mat::Zero(static_cast<Eigen::Index>(topo.graphs) * n, d);
    if (n < 2) {
        return msg;
    }
    Mat terms(n - 1, d);
    std::vector<double> column(static_cast<std::size_t>(n - 1));
    for (int b = 0; b < topo.graphs; ++b) {
        for (int i = 0; i < n; ++i) {
            const Eigen::Index base = static_cast<Eigen::Index>(b) * topo.edges + static_cast<Eigen::Index>(i) * (n - 1);
            for (int k = 0; k < n - 1; ++k) {
                terms.row(k) = gate.row(base + k).cwiseProduct(hv.row(topo.dst[base + k]));
            }
            for (Eigen::Index f = 0; f < d; ++f) {
                for (int k = 0; k < n - 1; ++k) {
                    column[k] = terms(k, f);
                }
                std::sort(column.begin(), column.end());
                double acc = 0.0;
                for (double v : column) {
                    acc += v;
                }
                msg(static_cast<Eigen::Index>(b) * n + i, f) = acc;
            }
        }
    }
    return msg;
}

void check_finite(const Mat &m, const std::string &where) {
    if (!m.allFinite()) {
        throw NumericError("non-finite activations in " + where);
    }
}

/// Applies one layer in place.
void layer_forward(const LayerParams &p, const Topology &topo, const Mat &t_emb, Mode mode, Mat &h, Mat &e,
                   LayerTrace *trace) {
    const Eigen::Index rows = e.rows();
    Mat ehat = matmul(e, p.P);
    {
        const Mat hq = matmul(h, p.Q);
        const Mat hr = matmul(h, p.R);
        for (Eigen::Index r = 0; r < rows; ++r) {
            ehat.row(r) += hq.row(topo.src[r]);
            ehat.row(r) += hr.row(topo.dst[r]);
        }
    }
    const Mat hv = matmul(h, p.V);

    BatchNormTrace edge_bn;
    const Mat edge_bn_out = batch_norm_forward(ehat, p.edge_norm, mode, trace ? &edge_bn : nullptr);
    Mat a1 = relu(affine(edge_bn_out, p.edge_mlp.w1, p.edge_mlp.b1));
    const Mat z2 = affine(a1, p.edge_mlp.w2, p.edge_mlp.b2);

    Mat ta = relu(affine(t_emb, p.time_mlp.w1, p.time_mlp.b1));
    const Mat t2 = affine(ta, p.time_mlp.w2, p.time_mlp.b2);

    Mat gate = sigmoid_matrix(ehat);
    const Mat msg = gated_messages(topo, gate, hv);
    Mat pre = matmul(h, p.U);
    pre += msg;
    BatchNormTrace node_bn;
    Mat node_bn_out = batch_norm_forward(pre, p.node_norm, mode, trace ? &node_bn : nullptr);

    if (trace != nullptr) {
        trace->e_in = e;
        trace->h_in = h;
    }

    e += z2;
    for (Eigen::Index r = 0; r < rows; ++r) {
        e.row(r) += t2.row(r / topo.edges);
    }
    h += relu(node_bn_out);

    if (trace != nullptr) {
        trace->hv = hv;
        trace->gate = std::move(gate);
        trace->edge_bn = std::move(edge_bn);
        trace->edge_bn_out = edge_bn_out;
        trace->a1 = std::move(a1);
        trace->ta = std::move(ta);
        trace->node_bn = std::move(node_bn);
        trace->node_bn_out = std::move(node_bn_out);
    }
}

void check_layer_shapes(const DenoiserConfig &c, const LayerParams &p) {
    const int d = c.hidden_dim;
    auto square = [d](const Mat &m) { return m.rows() == d && m.cols() == d; };
    if (!square(p.P) || !square(p.Q) || !square(p.R) || !square(p.U) || !square(p.V) ||
        p.time_mlp.w1.rows() != c.time_dim()) {
        throw InvalidArgument("layer parameters do not match the denoiser configuration");
    }
}

} // namespace

double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double z = std::exp(x);
    return z / (1.0 + z);
}

void DenoiserConfig::validate() const {
    if (layers < 1) {
        throw InvalidArgument("denoiser needs at least one layer");
    }
    if (hidden_dim < 2) {
        throw InvalidArgument("hidden dimension must be at least 2");
    }
    if (embed_dim < 1) {
        throw InvalidArgument("embedding dimension must be positive");
    }
    if (time_dim() % 2 != 0) {
        throw InvalidArgument("time embedding dimension must be even");
    }
}

DenoiserParams DenoiserParams::zeros_like() const {
    DenoiserParams out = *this;
    out.for_each([](const std::string &, Mat &m, bool) { m.setZero(); });
    return out;
}

DenoiserParams init_params(const DenoiserConfig &config, std::uint64_t seed) {
    config.validate();
    const int d = config.hidden_dim;
    const int dt = config.time_dim();
    const int in = 2 * config.embed_dim;
    Rng rng(seed);
    DenoiserParams p;
    p.config = config;
    p.node_init = uniform_matrix(rng, in, d, 1.0 / std::sqrt(static_cast<double>(in)));
    p.edge_embed = uniform_matrix(rng, 2, d, 1.0);
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    for (int l = 0; l < config.layers; ++l) {
        LayerParams layer;
        layer.P = uniform_matrix(rng, d, d, bound);
        layer.Q = uniform_matrix(rng, d, d, bound);
        layer.R = uniform_matrix(rng, d, d, bound);
        layer.U = uniform_matrix(rng, d, d, bound);
        layer.V = uniform_matrix(rng, d, d, bound);
        layer.edge_mlp = uniform_mlp(rng, d, d, d);
        layer.time_mlp = uniform_mlp(rng, dt, d, d);
        layer.edge_norm = unit_norm(d);
        layer.node_norm = unit_norm(d);
        p.layers.push_back(std::move(layer));
    }
    p.head = uniform_mlp(rng, d, d, 1);
    p.head.w2.setZero();
    p.head.b2.setZero();
    return p;
}

DenoiserParams zero_params(const DenoiserConfig &config) { return init_params(config, 0).zeros_like(); }

void InstanceFeatures::validate(int embed_dim) const {
    auto check = [embed_dim](const std::vector<double> &v, const std::string &what) {
        if (static_cast<int>(v.size()) != embed_dim) {
            throw InvalidArgument(what + " has length " + std::to_string(v.size()) + ", expected " +
                                  std::to_string(embed_dim));
        }
        for (double x : v) {
            if (!std::isfinite(x)) {
                throw InvalidArgument(what + " is not finite");
            }
        }
    };
    check(statement, "statement embedding");
    for (std::size_t i = 0; i < examples.size(); ++i) {
        check(examples[i], "example embedding " + std::to_string(i));
    }
}

std::vector<double> time_embedding(int t, int dim) {
    if (dim % 2 != 0 || dim <= 0) {
        throw InvalidArgument("time embedding dimension must be positive and even");
    }
    if (t < 0) {
        throw InvalidArgument("time step must be non-negative");
    }
    std::vector<double> out(static_cast<std::size_t>(dim));
    const int half = dim / 2;
    for (int k = 0; k < half; ++k) {
        const double freq = std::pow(10000.0, -2.0 * k / dim);
        out[2 * k] = std::sin(t * freq);
        out[2 * k + 1] = std::cos(t * freq);
    }
    return out;
}

Mat init_node_features(const InstanceFeatures &features, const Mat &node_init) {
    const auto embed = static_cast<Eigen::Index>(features.statement.size());
    if (node_init.rows() != 2 * embed) {
        throw InvalidArgument("node initializer expects " + std::to_string(node_init.rows()) +
                              " inputs, features give " + std::to_string(2 * embed));
    }
    Mat x(features.nodes(), 2 * embed);
    for (int i = 0; i < features.nodes(); ++i) {
        if (static_cast<Eigen::Index>(features.examples[i].size()) != embed) {
            throw InvalidArgument("example embedding " + std::to_string(i) + " has the wrong length");
        }
        for (Eigen::Index k = 0; k < embed; ++k) {
            x(i, k) = features.statement[k];
            x(i, embed + k) = features.examples[i][k];
        }
    }
    return matmul(x, node_init);
}

EdgeTensor init_edge_features(const EdgeState &psit, const Mat &table) {
    if (table.rows() != 2) {
        throw InvalidArgument("edge embedding table needs two rows");
    }
    const int n = psit.nodes();
    EdgeTensor out{n, Mat::Zero(static_cast<Eigen::Index>(n) * n, table.cols())};
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (i != j) {
                out.data.row(static_cast<Eigen::Index>(i) * n + j) = table.row(psit.at(i, j));
            }
        }
    }
    return out;
}

std::pair<Mat, EdgeTensor> gnn_layer(const Mat &h, const EdgeTensor &e, const std::vector<double> &t_emb,
                                     const LayerParams &layer, Mode mode) {
    const int n = e.n;
    const Eigen::Index d = h.cols();
    if (h.rows() != n || e.data.rows() != static_cast<Eigen::Index>(n) * n || e.data.cols() != d ||
        layer.P.rows() != d || layer.time_mlp.w1.rows() != static_cast<Eigen::Index>(t_emb.size())) {
        throw InvalidArgument("gnn_layer shape mismatch");
    }
    check_finite(h, "node input");
    check_finite(e.data, "edge input");
    const Topology topo = make_topology(1, n);
    Mat edges(topo.edges, d);
    for (int r = 0; r < topo.edges; ++r) {
        edges.row(r) = e.data.row(static_cast<Eigen::Index>(topo.src[r]) * n + topo.dst[r]);
    }
    Mat tt(1, static_cast<Eigen::Index>(t_emb.size()));
    for (std::size_t k = 0; k < t_emb.size(); ++k) {
        tt(0, static_cast<Eigen::Index>(k)) = t_emb[k];
    }
    Mat nodes = h;
    layer_forward(layer, topo, tt, mode, nodes, edges, nullptr);
    EdgeTensor out{n, e.data};
    for (int r = 0; r < topo.edges; ++r) {
        out.data.row(static_cast<Eigen::Index>(topo.src[r]) * n + topo.dst[r]) = edges.row(r);
    }
    return {std::move(nodes), std::move(out)};
}

Mat forward(const std::vector<GraphInput> &batch, const DenoiserParams &params, Mode mode, Trace *trace) {
    if (batch.empty()) {
        throw InvalidArgument("empty batch");
    }
    const DenoiserConfig &c = params.config;
    const int n = batch.front().psit->nodes();
    const int d = c.hidden_dim;
    const int embed = c.embed_dim;
    const int graphs = static_cast<int>(batch.size());
    for (const auto &g : batch) {
        if (g.psit->nodes() != n || g.features->nodes() != n) {
            throw InvalidArgument("every graph in a batch needs the same node count");
        }
        if (g.t < 0) {
            throw InvalidArgument("negative time step");
        }
    }
    if (params.node_init.rows() != 2 * embed || params.node_init.cols() != d ||
        static_cast<int>(params.layers.size()) != c.layers) {
        throw InvalidArgument("parameters do not match the denoiser configuration");
    }

    const Topology topo = make_topology(graphs, n);
    const Eigen::Index edge_rows = static_cast<Eigen::Index>(graphs) * topo.edges;

    Mat x0(static_cast<Eigen::Index>(graphs) * n, 2 * embed);
    Mat tt(graphs, c.time_dim());
    Mat e(edge_rows, d);
    std::vector<std::uint8_t> noisy(static_cast<std::size_t>(edge_rows));
    for (int b = 0; b < graphs; ++b) {
        const InstanceFeatures &f = *batch[b].features;
        f.validate(embed);
        for (int i = 0; i < n; ++i) {
            const Eigen::Index row = static_cast<Eigen::Index>(b) * n + i;
            for (int k = 0; k < embed; ++k) {
                x0(row, k) = f.statement[k];
                x0(row, embed + k) = f.examples[i][k];
            }
        }
        const auto te = time_embedding(batch[b].t, c.time_dim());
        for (int k = 0; k < c.time_dim(); ++k) {
            tt(b, k) = te[k];
        }
    }
    for (Eigen::Index r = 0; r < edge_rows; ++r) {
        const int b = static_cast<int>(r / topo.edges);
        const int i = topo.src[r] - b * n;
        const int j = topo.dst[r] - b * n;
        noisy[r] = static_cast<std::uint8_t>(batch[b].psit->at(i, j));
        e.row(r) = params.edge_embed.row(noisy[r]);
    }
    Mat h = matmul(x0, params.node_init);

    if (trace != nullptr) {
        trace->mode = mode;
        trace->graphs = graphs;
        trace->nodes = n;
        trace->edges_per_graph = topo.edges;
        trace->src = topo.src;
        trace->dst = topo.dst;
        trace->noisy = noisy;
        trace->x0 = x0;
        trace->t_emb = tt;
        trace->layers.assign(params.layers.size(), LayerTrace{});
    }

    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        check_layer_shapes(c, params.layers[l]);
        layer_forward(params.layers[l], topo, tt, mode, h, e, trace ? &trace->layers[l] : nullptr);
        check_finite(e, "edge features after layer " + std::to_string(l));
        check_finite(h, "node features after layer " + std::to_string(l));
    }

    Mat o1 = affine(e, params.head.w1, params.head.b1);
    Mat oa = relu(o1);
    Mat logits = affine(oa, params.head.w2, params.head.b2);
    check_finite(logits, "output head");
    if (trace != nullptr) {
        trace->e_final = std::move(e);
        trace->o1 = std::move(o1);
        trace->oa = std::move(oa);
    }
    return logits;
}

DenoiserParams backward(const Trace &trace, const Mat &dlogits, const DenoiserParams &params) {
    DenoiserParams g = params.zeros_like();
    const int n = trace.nodes;
    const int edges = trace.edges_per_graph;
    const Eigen::Index edge_rows = static_cast<Eigen::Index>(trace.graphs) * edges;
    const Eigen::Index node_rows = static_cast<Eigen::Index>(trace.graphs) * n;
    if (dlogits.rows() != edge_rows || dlogits.cols() != 1) {
        throw InvalidArgument("logit gradient shape does not match the trace");
    }

    Mat de;
    mlp_backward(trace.e_final, trace.oa, dlogits, params.head, g.head, &de);
    Mat dh = Mat::Zero(node_rows, params.config.hidden_dim);

    for (int l = static_cast<int>(params.layers.size()) - 1; l >= 0; --l) {
        const LayerParams &p = params.layers[l];
        const LayerTrace &lt = trace.layers[l];
        LayerParams &gp = g.layers[l];

        // Time MLP feeds every edge of its graph.
        Mat dt2 = Mat::Zero(trace.graphs, de.cols());
        for (Eigen::Index r = 0; r < edge_rows; ++r) {
            dt2.row(r / edges) += de.row(r);
        }
        mlp_backward(trace.t_emb, lt.ta, dt2, p.time_mlp, gp.time_mlp, nullptr);

        Mat dbn_e;
        mlp_backward(lt.edge_bn_out, lt.a1, de, p.edge_mlp, gp.edge_mlp, &dbn_e);
        Mat dehat = batch_norm_backward(dbn_e, p.edge_norm, lt.edge_bn, trace.mode, gp.edge_norm);

        const Mat dnode_bn = dh.cwiseProduct(positive_mask(lt.node_bn_out));
        const Mat dpre = batch_norm_backward(dnode_bn, p.node_norm, lt.node_bn, trace.mode, gp.node_norm);

        Mat dhv = Mat::Zero(node_rows, dh.cols());
        for (Eigen::Index r = 0; r < edge_rows; ++r) {
            const auto dmsg = dpre.row(trace.src[r]);
            const auto g_r = lt.gate.row(r);
            const Eigen::RowVectorXd dgate = dmsg.cwiseProduct(lt.hv.row(trace.dst[r]));
            dhv.row(trace.dst[r]) += dmsg.cwiseProduct(g_r);
            dehat.row(r) += dgate.cwiseProduct(g_r).cwiseProduct((1.0 - g_r.array()).matrix());
        }

        Mat dhq = Mat::Zero(node_rows, dh.cols());
        Mat dhr = Mat::Zero(node_rows, dh.cols());
        for (Eigen::Index r = 0; r < edge_rows; ++r) {
            dhq.row(trace.src[r]) += dehat.row(r);
            dhr.row(trace.dst[r]) += dehat.row(r);
        }

        gp.P.noalias() += lt.e_in.transpose() * dehat;
        gp.Q.noalias() += lt.h_in.transpose() * dhq;
        gp.R.noalias() += lt.h_in.transpose() * dhr;
        gp.V.noalias() += lt.h_in.transpose() * dhv;
        gp.U.noalias() += lt.h_in.transpose() * dpre;

        de.noalias() += dehat * p.P.transpose();
        dh.noalias() += dhq * p.Q.transpose();
        dh.noalias() += dhr * p.R.transpose();
        dh.noalias() += dhv * p.V.transpose();
        dh.noalias() += dpre * p.U.transpose();
    }

    for (Eigen::Index r = 0; r < edge_rows; ++r) {
        g.edge_embed.row(trace.noisy[r]) += de.row(r);
    }
    g.node_init.noalias() += trace.x0.transpose() * dh;
    return g;
}

void update_running_stats(DenoiserParams &params, const Trace &trace, double momentum) {
    auto fold = [momentum](BatchNorm &bn, const BatchNormTrace &t) {
        const double m = static_cast<double>(t.count);
        const Eigen::RowVectorXd unbiased = m > 1.0 ? Eigen::RowVectorXd(t.batch_var * (m / (m - 1.0))) : t.batch_var;
        bn.running_mean = (1.0 - momentum) * bn.running_mean + momentum * Mat(t.batch_mean);
        bn.running_var = (1.0 - momentum) * bn.running_var + momentum * Mat(unbiased);
    };
    if (trace.mode != Mode::Train) {
        return;
    }
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        fold(params.layers[l].edge_norm, trace.layers[l].edge_bn);
        fold(params.layers[l].node_norm, trace.layers[l].node_bn);
    }
}

EdgeDistribution predict_p0(const EdgeState &psit, int t, const InstanceFeatures &features,
                            const DenoiserParams &params, Mode mode) {
    if (t < 1) {
        throw InvalidArgument("denoising step must be at least 1");
    }
    const Mat logits = forward({GraphInput{&psit, t, &features}}, params, mode);
    const int n = psit.nodes();
    EdgeDistribution out(n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (i != j) {
                const double p = sigmoid(logits(edge_row(n, i, j), 0));
                out.set(i, j, std::clamp(p, diffusion::kProbFloor, 1.0 - diffusion::kProbFloor));
            }
        }
    }
    return out;
}

} // namespace sgdl::gnn
