#pragma once

// Graph attention autoencoder used to produce smoothed positive views, and a
// Gaussian-kernel smoother used in its place for ablations.
//
// Encoder layer t (1..L):
//   Wh    = h^(t-1) W^(t)
//   alpha = a_src . LeakyReLU(Wh_i) + a_dst . LeakyReLU(Wh_j)   (w_att = [a_src; a_dst])
//   att   = softmax of alpha over the neighbor set of i (self included)
//   h^(t) = LeakyReLU(sum_j att_ij Wh_j)
// The decoder walks back through the layers with transposed weights and the
// encoder's attention coefficients; its last layer is linear.

#include "darlc/autodiff.hpp"
#include "darlc/binio.hpp"
#include "darlc/data.hpp"
#include "darlc/optim.hpp"

#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace darlc {

struct GatConfig {
    std::vector<Index> widths{64, 16};  // encoder widths after the input channels
    double radius = 2.0;
    double slope = 0.2;
    Index epochs = 100;
    double lr = 1e-3;
    Index batch_size = 16;

    void validate() const {
        require(!widths.empty(), "gat_denoiser", "at least one encoder layer is required", ErrorKind::config);
        for (Index w : widths) require(w >= 1, "gat_denoiser", "layer widths must be >= 1", ErrorKind::config);
        require(radius >= 1.0, "gat_denoiser", "radius must be >= 1", ErrorKind::config);
        require(epochs >= 0, "gat_denoiser", "epochs must be >= 0", ErrorKind::config);
        require(lr >= 0.0, "gat_denoiser", "lr must be >= 0", ErrorKind::config);
        require(batch_size >= 1, "gat_denoiser", "batch_size must be >= 1", ErrorKind::config);
    }
};

/// Encoder weights W1..WL (d_{t-1} x d_t) and attention vectors att1..attL (2 d_t x 1).
/// The decoder reuses them transposed, so there are no decoder-only parameters.
struct GatParams {
    std::vector<Index> dims;  // d0 = channels, d1..dL
    double radius = 2.0;
    double slope = 0.2;
    ad::ParamSet params;

    Index layers() const { return static_cast<Index>(dims.size()) - 1; }
    static std::string weight_name(Index t) { return "W" + std::to_string(t); }
    static std::string att_name(Index t) { return "att" + std::to_string(t); }
};

inline GatParams init_gat(Index channels, const GatConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    GatParams g;
    g.dims.push_back(channels);
    g.dims.insert(g.dims.end(), cfg.widths.begin(), cfg.widths.end());
    g.radius = cfg.radius;
    g.slope = cfg.slope;
    std::mt19937_64 rng(seed);
    for (Index t = 1; t <= g.layers(); ++t) {
        const Index in = g.dims[static_cast<std::size_t>(t - 1)], out = g.dims[static_cast<std::size_t>(t)];
        const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
        std::uniform_real_distribution<double> u(-bound, bound);
        Matrix w(in, out);
        for (Index k = 0; k < w.size(); ++k) w.data()[k] = u(rng);
        const double abound = std::sqrt(6.0 / static_cast<double>(2 * out + 1));
        std::uniform_real_distribution<double> ua(-abound, abound);
        Matrix a(2 * out, 1);
        for (Index k = 0; k < a.size(); ++k) a.data()[k] = ua(rng);
        g.params.add(GatParams::weight_name(t), std::move(w));
        g.params.add(GatParams::att_name(t), std::move(a));
    }
    return g;
}

namespace gat_ops {

/// Per-edge softmax of alpha_ij = src_i + dst_j over each node's neighbor set.
/// Nodes are stacked image-major: node b*P + p. Output is (batch * edges) x 1.
/// The graph must outlive the tape.
inline ad::Var edge_softmax(const ad::Var& src, const ad::Var& dst, const PixelGraph& g, Index batch) {
    const Index P = g.pixels(), E = g.edges();
    require(src.rows() == batch * P && dst.rows() == batch * P && src.cols() == 1 && dst.cols() == 1,
            "gat_denoiser", "edge_softmax: score shape mismatch");
    Matrix att(batch * E, 1);
    const Matrix& s = src.value();
    const Matrix& d = dst.value();
    for (Index b = 0; b < batch; ++b)
        for (Index p = 0; p < P; ++p) {
            const Index e0 = g.offsets[static_cast<std::size_t>(p)], e1 = g.offsets[static_cast<std::size_t>(p + 1)];
            auto alpha = [&](Index e) { return s(b * P + p, 0) + d(b * P + g.neighbors[static_cast<std::size_t>(e)], 0); };
            double m = -std::numeric_limits<double>::infinity();
            for (Index e = e0; e < e1; ++e) m = std::max(m, alpha(e));
            double z = 0;
            for (Index e = e0; e < e1; ++e) {
                const double v = std::exp(alpha(e) - m);
                att(b * E + e, 0) = v;
                z += v;
            }
            for (Index e = e0; e < e1; ++e) att(b * E + e, 0) /= z;
        }
    return src.tape()->record(att, {src, dst}, [src, dst, att, &g, batch, P, E](ad::Tape& t, const Matrix& gr) {
        Matrix gs = Matrix::Zero(batch * P, 1), gd = Matrix::Zero(batch * P, 1);
        for (Index b = 0; b < batch; ++b)
            for (Index p = 0; p < P; ++p) {
                const Index e0 = g.offsets[static_cast<std::size_t>(p)], e1 = g.offsets[static_cast<std::size_t>(p + 1)];
                double dot = 0;
                for (Index e = e0; e < e1; ++e) dot += att(b * E + e, 0) * gr(b * E + e, 0);
                for (Index e = e0; e < e1; ++e) {
                    const double ga = att(b * E + e, 0) * (gr(b * E + e, 0) - dot);
                    gs(b * P + p, 0) += ga;
                    gd(b * P + g.neighbors[static_cast<std::size_t>(e)], 0) += ga;
                }
            }
        t.accumulate(src, gs);
        t.accumulate(dst, gd);
    });
}

/// out_i = sum over neighbors j of att_ij * x_j.
inline ad::Var aggregate(const ad::Var& att, const ad::Var& x, const PixelGraph& g, Index batch) {
    const Index P = g.pixels(), E = g.edges();
    require(att.rows() == batch * E && x.rows() == batch * P, "gat_denoiser", "aggregate: shape mismatch");
    const Matrix& a = att.value();
    const Matrix& xv = x.value();
    Matrix out = Matrix::Zero(batch * P, x.cols());
    for (Index b = 0; b < batch; ++b)
        for (Index p = 0; p < P; ++p)
            for (Index e = g.offsets[static_cast<std::size_t>(p)]; e < g.offsets[static_cast<std::size_t>(p + 1)]; ++e)
                out.row(b * P + p) += a(b * E + e, 0) * xv.row(b * P + g.neighbors[static_cast<std::size_t>(e)]);
    return att.tape()->record(std::move(out), {att, x}, [att, x, &g, batch, P, E](ad::Tape& t, const Matrix& gr) {
        const Matrix& a = att.value();
        const Matrix& xv = x.value();
        const bool need_a = t.requires_grad(att), need_x = t.requires_grad(x);
        Matrix ga = need_a ? Matrix::Zero(batch * E, 1) : Matrix();
        Matrix gx = need_x ? Matrix::Zero(batch * P, xv.cols()) : Matrix();
        for (Index b = 0; b < batch; ++b)
            for (Index p = 0; p < P; ++p)
                for (Index e = g.offsets[static_cast<std::size_t>(p)]; e < g.offsets[static_cast<std::size_t>(p + 1)];
                     ++e) {
                    const Index j = b * P + g.neighbors[static_cast<std::size_t>(e)];
                    if (need_a) ga(b * E + e, 0) = gr.row(b * P + p).dot(xv.row(j));
                    if (need_x) gx.row(j) += a(b * E + e, 0) * gr.row(b * P + p);
                }
        if (need_a) t.accumulate(att, ga);
        if (need_x) t.accumulate(x, gx);
    });
}

}  // namespace gat_ops

struct GatOutput {
    ad::Var codes;                // h^(L), (batch*P) x dL
    ad::Var reconstruction;       // (batch*P) x C
    std::vector<ad::Var> attention;  // per layer, (batch*E) x 1
};

/// Binds parameters either as trainable leaves or as constants.
inline ad::Var bind(ad::Tape& tape, ad::Parameter& p, bool trainable) {
    return trainable ? tape.param(p) : tape.constant(p.value);
}

/// Forward pass on a stack of `batch` images given as (batch*P) x C node features.
inline GatOutput gat_forward(ad::Tape& tape, const Matrix& nodes, const PixelGraph& graph, Index batch,
                             GatParams& params, bool trainable = true) {
    require(nodes.rows() == batch * graph.pixels(), "gat_denoiser", "node count does not match graph");
    require(nodes.cols() == params.dims.front(), "gat_denoiser", "channel count does not match parameters");
    GatOutput out;
    std::vector<ad::Var> weights;
    ad::Var h = tape.constant(nodes);
    for (Index t = 1; t <= params.layers(); ++t) {
        ad::Var w = bind(tape, params.params[GatParams::weight_name(t)], trainable);
        ad::Var a = bind(tape, params.params[GatParams::att_name(t)], trainable);
        const Index d = params.dims[static_cast<std::size_t>(t)];
        ad::Var wh = ad::matmul(h, w);
        ad::Var act = ad::leaky_relu(wh, params.slope);
        ad::Var src = ad::matmul(act, ad::slice_rows(a, 0, d));
        ad::Var dst = ad::matmul(act, ad::slice_rows(a, d, d));
        ad::Var att = gat_ops::edge_softmax(src, dst, graph, batch);
        h = ad::leaky_relu(gat_ops::aggregate(att, wh, graph, batch), params.slope);
        weights.push_back(w);
        out.attention.push_back(att);
    }
    out.codes = h;
    ad::Var r = h;
    for (Index t = params.layers(); t >= 1; --t) {
        const auto k = static_cast<std::size_t>(t - 1);
        r = gat_ops::aggregate(out.attention[k], ad::matmul(r, ad::transpose(weights[k])), graph, batch);
        if (t > 1) r = ad::leaky_relu(r, params.slope);
    }
    out.reconstruction = r;
    return out;
}

/// Attention coefficients of one layer for plain (non-tape) inputs: per-edge weights in CSR order.
inline Vector attention_scores(const Matrix& h_prev, const PixelGraph& graph, const Matrix& weight,
                               const Matrix& att_vector, double slope = 0.2) {
    ad::Tape tape;
    const Index d = weight.cols();
    require(att_vector.rows() == 2 * d && att_vector.cols() == 1, "gat_denoiser", "attention vector must be 2d x 1");
    ad::Var wh = ad::matmul(tape.constant(h_prev), tape.constant(weight));
    ad::Var act = ad::leaky_relu(wh, slope);
    ad::Var src = ad::matmul(act, tape.constant(att_vector.topRows(d)));
    ad::Var dst = ad::matmul(act, tape.constant(att_vector.bottomRows(d)));
    return gat_ops::edge_softmax(src, dst, graph, 1).value().col(0);
}

inline Matrix stack_nodes(const ImageTensor& imgs, const std::vector<Index>& idx) {
    const Index P = imgs.pixels();
    Matrix nodes(static_cast<Index>(idx.size()) * P, imgs.channels());
    for (std::size_t j = 0; j < idx.size(); ++j) nodes.middleRows(static_cast<Index>(j) * P, P) = imgs.pixel_matrix(idx[j]);
    return nodes;
}

/// L_denoise summed over pixels, averaged over the images of the batch.
inline ad::Var denoise_loss(ad::Tape& tape, const Matrix& nodes, const GatOutput& out, Index batch) {
    ad::Var resid = ad::sub(tape.constant(nodes), out.reconstruction);
    return ad::scale(ad::sum_row_norms(resid), 1.0 / static_cast<double>(batch));
}

struct DenoiserFit {
    GatParams params;
    std::vector<double> epoch_loss;  // mean per-image loss over each epoch
};

/// Minibatch gradient descent with a fixed step on L_denoise.
inline DenoiserFit train_denoiser(const ImageTensor& imgs, const PixelGraph& graph, const GatConfig& cfg,
                                  std::uint64_t seed) {
    cfg.validate();
    require(imgs.count() >= 1, "gat_denoiser", "training needs at least one image");
    require(imgs.height() == graph.height && imgs.width() == graph.width, "gat_denoiser",
            "graph size does not match images");
    DenoiserFit fit{init_gat(imgs.channels(), cfg, split_seed(seed, "gat.init")), {}};
    std::mt19937_64 rng(split_seed(seed, "gat.order"));
    std::vector<Index> order(static_cast<std::size_t>(imgs.count()));
    std::iota(order.begin(), order.end(), Index{0});
    for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<Index> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(stop));
            const auto B = static_cast<Index>(idx.size());
            Matrix nodes = stack_nodes(imgs, idx);
            fit.params.params.zero_grad();
            ad::Tape tape;
            GatOutput out = gat_forward(tape, nodes, graph, B, fit.params);
            ad::Var loss = denoise_loss(tape, nodes, out, B);
            require(std::isfinite(loss.scalar()), "gat_denoiser",
                    "non-finite denoising loss at epoch " + std::to_string(epoch), ErrorKind::numeric);
            tape.backward(loss);
            ad::sgd_step(fit.params.params, cfg.lr);
            total += loss.scalar() * static_cast<double>(B);
        }
        fit.epoch_loss.push_back(total / static_cast<double>(imgs.count()));
    }
    require(fit.params.params.all_finite(), "gat_denoiser", "parameters diverged", ErrorKind::numeric);
    return fit;
}

/// Runs the trained autoencoder over every image and returns the reconstructions.
inline ImageTensor smooth(const ImageTensor& imgs, GatParams& params) {
    const PixelGraph graph = build_pixel_graph(imgs.height(), imgs.width(), params.radius);
    ImageTensor out(imgs.count(), imgs.channels(), imgs.height(), imgs.width());
    constexpr Index chunk = 32;
    for (Index start = 0; start < imgs.count(); start += chunk) {
        std::vector<Index> idx;
        for (Index i = start; i < std::min(imgs.count(), start + chunk); ++i) idx.push_back(i);
        const auto B = static_cast<Index>(idx.size());
        ad::Tape tape;
        GatOutput o = gat_forward(tape, stack_nodes(imgs, idx), graph, B, params, false);
        for (Index b = 0; b < B; ++b)
            out.set_pixel_matrix(idx[static_cast<std::size_t>(b)],
                                 o.reconstruction.value().middleRows(b * graph.pixels(), graph.pixels()));
    }
    return out;
}

/// Separable Gaussian blur with half-sample reflective borders; kernel radius int(3*sigma + 0.5).
inline ImageTensor gks_smooth(const ImageTensor& imgs, double sigma) {
    require(sigma > 0.0, "gat_denoiser", "gks sigma must be > 0");
    const auto radius = static_cast<Index>(3.0 * sigma + 0.5);
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double z = 0;
    for (Index d = -radius; d <= radius; ++d) {
        const double v = std::exp(-static_cast<double>(d * d) / (2.0 * sigma * sigma));
        k[static_cast<std::size_t>(d + radius)] = v;
        z += v;
    }
    for (double& v : k) v /= z;
    auto reflect = [](Index i, Index n) {
        if (n == 1) return Index{0};
        const Index period = 2 * n;
        i %= period;
        if (i < 0) i += period;
        return i < n ? i : period - 1 - i;
    };
    const Index H = imgs.height(), W = imgs.width();
    ImageTensor out(imgs.count(), imgs.channels(), H, W);
    Matrix tmp(H, W);
    for (Index i = 0; i < imgs.count(); ++i)
        for (Index c = 0; c < imgs.channels(); ++c) {
            for (Index y = 0; y < H; ++y)
                for (Index x = 0; x < W; ++x) {
                    double s = 0;
                    for (Index d = -radius; d <= radius; ++d)
                        s += k[static_cast<std::size_t>(d + radius)] * imgs.at(i, c, y, reflect(x + d, W));
                    tmp(y, x) = s;
                }
            for (Index y = 0; y < H; ++y)
                for (Index x = 0; x < W; ++x) {
                    double s = 0;
                    for (Index d = -radius; d <= radius; ++d)
                        s += k[static_cast<std::size_t>(d + radius)] * tmp(reflect(y + d, H), x);
                    out.at(i, c, y, x) = static_cast<float>(s);
                }
        }
    return out;
}

// GAT1 checkpoint: "GAT1 L d0 .. dL radius\n", then per layer W (row-major) and w_att, float64 LE.

inline void write_gat(const std::string& path, const GatParams& g) {
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), "gat_denoiser", "cannot open '" + path + "' for writing", ErrorKind::io);
    os << "GAT1 " << g.layers();
    for (Index d : g.dims) os << ' ' << d;
    os.precision(17);
    os << ' ' << g.radius << '\n';
    for (Index t = 1; t <= g.layers(); ++t) {
        binio::put_matrix(os, g.params[GatParams::weight_name(t)].value);
        binio::put_matrix(os, g.params[GatParams::att_name(t)].value);
    }
    require(static_cast<bool>(os), "gat_denoiser", "write failed for '" + path + "'", ErrorKind::io);
}

inline GatParams read_gat(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), "gat_denoiser", "cannot open '" + path + "'", ErrorKind::io);
    std::string line;
    std::getline(is, line);
    std::istringstream hs(line);
    std::string magic;
    Index L = 0;
    hs >> magic >> L;
    require(magic == "GAT1" && hs && L >= 1, "gat_denoiser", path + ": malformed GAT1 header", ErrorKind::io);
    GatParams g;
    g.dims.resize(static_cast<std::size_t>(L + 1));
    for (Index& d : g.dims) hs >> d;
    hs >> g.radius;
    require(static_cast<bool>(hs), "gat_denoiser", path + ": malformed GAT1 header", ErrorKind::io);
    for (Index t = 1; t <= L; ++t) {
        const Index in = g.dims[static_cast<std::size_t>(t - 1)], out = g.dims[static_cast<std::size_t>(t)];
        g.params.add(GatParams::weight_name(t), binio::get_matrix(is, in, out, path));
        g.params.add(GatParams::att_name(t), binio::get_matrix(is, 2 * out, 1, path));
    }
    return g;
}

}  // namespace darlc
