#pragma once

// Self-supervised representation module: a small ViT encoder shared by the
// masked-patch branch and the online contrastive branch, a linear pixel
// decoder, linear embedding heads, an EMA target copy, and the loss terms that
// tie them together (masked reconstruction, two-sided contrastive loss and the
// uncertainty-weighted combiner).

#include "darlc/autodiff.hpp"
#include "darlc/data.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace darlc {

struct VitConfig {
    Index channels = 1;
    Index height = 16;
    Index width = 16;
    Index patch = 4;
    Index dim = 32;
    Index depth = 4;
    Index heads = 4;
    Index mlp_ratio = 4;
    double mask_ratio = 0.8;

    Index grid_h() const { return height / patch; }
    Index grid_w() const { return width / patch; }
    Index tokens() const { return grid_h() * grid_w(); }
    Index patch_dim() const { return channels * patch * patch; }

    void validate() const {
        require(channels >= 1 && height >= 1 && width >= 1, "repr_module", "image shape must be positive",
                ErrorKind::config);
        require(patch >= 1 && height % patch == 0 && width % patch == 0, "repr_module",
                "image size must be divisible by the patch size (pad first)", ErrorKind::config);
        require(dim >= 1 && heads >= 1 && dim % heads == 0, "repr_module", "dim must be divisible by heads",
                ErrorKind::config);
        require(depth >= 1 && mlp_ratio >= 1, "repr_module", "depth and mlp_ratio must be >= 1", ErrorKind::config);
        require(mask_ratio > 0.0 && mask_ratio < 1.0, "repr_module", "mask_ratio must lie in (0, 1)",
                ErrorKind::config);
    }
};

// ---------------------------------------------------------------------------
// Patches and masking
// ---------------------------------------------------------------------------

/// Patch vectors of the selected images, one row per (image, patch) in row-major grid order.
/// Each patch vector is ordered (channel, dy, dx).
inline Matrix patchify(const ImageTensor& imgs, const std::vector<Index>& idx, Index patch) {
    require(imgs.height() % patch == 0 && imgs.width() % patch == 0, "repr_module",
            "image size not divisible by patch size");
    const Index gh = imgs.height() / patch, gw = imgs.width() / patch, T = gh * gw;
    const Index pd = imgs.channels() * patch * patch;
    Matrix out(static_cast<Index>(idx.size()) * T, pd);
    for (std::size_t b = 0; b < idx.size(); ++b)
        for (Index gy = 0; gy < gh; ++gy)
            for (Index gx = 0; gx < gw; ++gx) {
                const Index row = static_cast<Index>(b) * T + gy * gw + gx;
                Index k = 0;
                for (Index c = 0; c < imgs.channels(); ++c)
                    for (Index dy = 0; dy < patch; ++dy)
                        for (Index dx = 0; dx < patch; ++dx)
                            out(row, k++) = imgs.at(idx[b], c, gy * patch + dy, gx * patch + dx);
            }
    return out;
}

inline Matrix patchify(const ImageTensor& imgs, Index patch) {
    std::vector<Index> idx(static_cast<std::size_t>(imgs.count()));
    std::iota(idx.begin(), idx.end(), Index{0});
    return patchify(imgs, idx, patch);
}

/// Inverse of patchify for whole tensors.
inline ImageTensor unpatchify(const Matrix& patches, Index n, Index channels, Index H, Index W, Index patch) {
    const Index gh = H / patch, gw = W / patch, T = gh * gw;
    require(patches.rows() == n * T && patches.cols() == channels * patch * patch, "repr_module",
            "unpatchify: shape mismatch");
    ImageTensor out(n, channels, H, W);
    for (Index b = 0; b < n; ++b)
        for (Index gy = 0; gy < gh; ++gy)
            for (Index gx = 0; gx < gw; ++gx) {
                Index k = 0;
                for (Index c = 0; c < channels; ++c)
                    for (Index dy = 0; dy < patch; ++dy)
                        for (Index dx = 0; dx < patch; ++dx)
                            out.at(b, c, gy * patch + dy, gx * patch + dx) =
                                static_cast<float>(patches(b * T + gy * gw + gx, k++));
            }
    return out;
}

struct PatchMask {
    std::vector<Index> kept;    // ascending
    std::vector<Index> masked;  // ascending, size round(ratio * T)
};

inline PatchMask mask_patches(Index n_patches, double ratio, std::uint64_t seed) {
    require(ratio > 0.0 && ratio < 1.0, "repr_module", "masking ratio must lie in (0, 1)");
    const auto n_masked = static_cast<Index>(std::llround(ratio * static_cast<double>(n_patches)));
    std::vector<Index> order(static_cast<std::size_t>(n_patches));
    std::iota(order.begin(), order.end(), Index{0});
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    PatchMask m;
    m.masked.assign(order.begin(), order.begin() + n_masked);
    m.kept.assign(order.begin() + n_masked, order.end());
    std::sort(m.masked.begin(), m.masked.end());
    std::sort(m.kept.begin(), m.kept.end());
    return m;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Online parameters hold the shared encoder ("enc."), the pixel decoder ("dec.") and the
/// online head ("head."); the target set holds EMA copies of "enc." and "head." only.
struct ReprModel {
    VitConfig cfg;
    ad::ParamSet online;
    ad::ParamSet target;
};

namespace detail {
inline Matrix xavier(Index in, Index out, std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-bound, bound);
    Matrix w(in, out);
    for (Index k = 0; k < w.size(); ++k) w.data()[k] = u(rng);
    return w;
}
inline Matrix normal(Index r, Index c, double sd, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, sd);
    Matrix w(r, c);
    for (Index k = 0; k < w.size(); ++k) w.data()[k] = n(rng);
    return w;
}
inline std::string blk(Index l, const char* name) { return "enc.block" + std::to_string(l) + "." + name; }
}  // namespace detail

inline ReprModel init_repr(const VitConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ReprModel m{cfg, {}, {}};
    std::mt19937_64 rng(seed);
    const Index D = cfg.dim, H = cfg.dim * cfg.mlp_ratio;
    auto& p = m.online;
    p.add("enc.patch_w", detail::xavier(cfg.patch_dim(), D, rng));
    p.add("enc.patch_b", Matrix::Zero(1, D));
    p.add("enc.pos", detail::normal(cfg.tokens(), D, 0.02, rng));
    p.add("enc.mask_token", detail::normal(1, D, 0.02, rng));
    for (Index l = 0; l < cfg.depth; ++l) {
        p.add(detail::blk(l, "ln1_g"), Matrix::Ones(1, D));
        p.add(detail::blk(l, "ln1_b"), Matrix::Zero(1, D));
        p.add(detail::blk(l, "qkv_w"), detail::xavier(D, 3 * D, rng));
        p.add(detail::blk(l, "qkv_b"), Matrix::Zero(1, 3 * D));
        p.add(detail::blk(l, "proj_w"), detail::xavier(D, D, rng));
        p.add(detail::blk(l, "proj_b"), Matrix::Zero(1, D));
        p.add(detail::blk(l, "ln2_g"), Matrix::Ones(1, D));
        p.add(detail::blk(l, "ln2_b"), Matrix::Zero(1, D));
        p.add(detail::blk(l, "fc1_w"), detail::xavier(D, H, rng));
        p.add(detail::blk(l, "fc1_b"), Matrix::Zero(1, H));
        p.add(detail::blk(l, "fc2_w"), detail::xavier(H, D, rng));
        p.add(detail::blk(l, "fc2_b"), Matrix::Zero(1, D));
    }
    p.add("enc.ln_g", Matrix::Ones(1, D));
    p.add("enc.ln_b", Matrix::Zero(1, D));
    p.add("dec.w", detail::xavier(D, cfg.patch_dim(), rng));
    p.add("dec.b", Matrix::Zero(1, cfg.patch_dim()));
    p.add("head.w", detail::xavier(D, D, rng));
    p.add("head.b", Matrix::Zero(1, D));
    for (const auto& q : m.online)
        if (q.name.starts_with("enc.") || q.name.starts_with("head.")) m.target.add(q.name, q.value);
    return m;
}

/// target <- m * target + (1 - m) * online, for every target tensor.
inline void ema_update(const ad::ParamSet& online, ad::ParamSet& target, double momentum) {
    require(momentum >= 0.0 && momentum <= 1.0, "repr_module", "EMA momentum must lie in [0, 1]");
    for (auto& t : target) t.value = momentum * t.value + (1.0 - momentum) * online[t.name].value;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// Resolves parameter tensors onto a tape, as trainable leaves or as constants.
class Binder {
public:
    Binder(ad::Tape& tape, ad::ParamSet& params, bool trainable) : tape_(tape), params_(params), trainable_(trainable) {}
    ad::Var operator()(std::string_view name) const {
        ad::Parameter& p = params_[name];
        return trainable_ ? tape_.param(p) : tape_.constant(p.value);
    }
    ad::Tape& tape() const { return tape_; }

private:
    ad::Tape& tape_;
    ad::ParamSet& params_;
    bool trainable_;
};

inline ad::Var linear(const ad::Var& x, const ad::Var& w, const ad::Var& b) { return ad::add_row(ad::matmul(x, w), b); }

/// Token representations (B*T x D) after the final layer norm. When `masked` is given, the
/// flagged token embeddings are replaced by the mask token before positions are added.
inline ad::Var encode_tokens(const Binder& bind, const Matrix& patches, const VitConfig& cfg,
                             const std::vector<bool>* masked = nullptr) {
    ad::Tape& tape = bind.tape();
    ad::Var x = linear(tape.constant(patches), bind("enc.patch_w"), bind("enc.patch_b"));
    if (masked) x = ad::replace_rows(x, bind("enc.mask_token"), *masked);
    x = ad::add_tiled(x, bind("enc.pos"));
    for (Index l = 0; l < cfg.depth; ++l) {
        ad::Var h = ad::layer_norm(x, bind(detail::blk(l, "ln1_g")), bind(detail::blk(l, "ln1_b")));
        ad::Var qkv = linear(h, bind(detail::blk(l, "qkv_w")), bind(detail::blk(l, "qkv_b")));
        ad::Var att = ad::multihead_attention(qkv, cfg.tokens(), cfg.heads);
        x = ad::add(x, linear(att, bind(detail::blk(l, "proj_w")), bind(detail::blk(l, "proj_b"))));
        h = ad::layer_norm(x, bind(detail::blk(l, "ln2_g")), bind(detail::blk(l, "ln2_b")));
        h = ad::gelu(linear(h, bind(detail::blk(l, "fc1_w")), bind(detail::blk(l, "fc1_b"))));
        x = ad::add(x, linear(h, bind(detail::blk(l, "fc2_w")), bind(detail::blk(l, "fc2_b"))));
    }
    return ad::layer_norm(x, bind("enc.ln_g"), bind("enc.ln_b"));
}

/// Masked-branch reconstruction in patch layout (B*T x patch_dim).
inline ad::Var mim_forward(const Binder& bind, const Matrix& patches, const VitConfig& cfg,
                           const std::vector<bool>& masked) {
    ad::Var tokens = encode_tokens(bind, patches, cfg, &masked);
    return linear(tokens, bind("dec.w"), bind("dec.b"));
}

/// Image-level embedding: head(mean over tokens of the unmasked encoder output).
inline ad::Var embed(const Binder& bind, const Matrix& patches, const VitConfig& cfg) {
    ad::Var pooled = ad::mean_pool(encode_tokens(bind, patches, cfg), cfg.tokens());
    return linear(pooled, bind("head.w"), bind("head.b"));
}

struct EmbeddingPair {
    ad::Var online;  // e, differentiable w.r.t. the online parameters
    ad::Var target;  // e-bar, a constant: no gradient reaches the target parameters
};

inline EmbeddingPair embed_pair(ad::Tape& tape, ReprModel& model, const Matrix& raw_patches,
                                const Matrix& smooth_patches, bool trainable = true) {
    EmbeddingPair out;
    out.online = embed(Binder(tape, model.online, trainable), raw_patches, model.cfg);
    out.target = embed(Binder(tape, model.target, false), smooth_patches, model.cfg);
    return out;
}

/// Per-row mask flags for a batch, one independent mask per image.
struct BatchMask {
    std::vector<bool> flags;             // B*T
    std::vector<Index> masked_per_image;  // B
};

inline BatchMask batch_mask(Index batch, const VitConfig& cfg, std::uint64_t seed) {
    BatchMask m;
    const Index T = cfg.tokens();
    m.flags.assign(static_cast<std::size_t>(batch * T), false);
    for (Index b = 0; b < batch; ++b) {
        PatchMask pm = mask_patches(T, cfg.mask_ratio, split_seed(seed, static_cast<std::uint64_t>(b)));
        for (Index j : pm.masked) m.flags[static_cast<std::size_t>(b * T + j)] = true;
        m.masked_per_image.push_back(static_cast<Index>(pm.masked.size()));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// (1/B) sum_i (1/N_masked,i) sum over masked patches j of ||p_ij - p_hat_ij||^2.
inline ad::Var rec_loss(ad::Tape& tape, const Matrix& patches, const ad::Var& predicted, const BatchMask& mask) {
    const auto B = static_cast<Index>(mask.masked_per_image.size());
    require(B > 0 && predicted.rows() % B == 0 && predicted.rows() == patches.rows(), "repr_module",
            "rec_loss: shape mismatch");
    const Index T = predicted.rows() / B;
    Vector w = Vector::Zero(predicted.rows());
    for (Index b = 0; b < B; ++b) {
        const Index nm = mask.masked_per_image[static_cast<std::size_t>(b)];
        require(nm > 0, "repr_module", "rec_loss needs a non-empty masked set");
        for (Index j = 0; j < T; ++j)
            if (mask.flags[static_cast<std::size_t>(b * T + j)]) w(b * T + j) = 1.0 / static_cast<double>(B * nm);
    }
    Matrix diff = predicted.value() - patches;
    const double v = (diff.rowwise().squaredNorm().array() * w.array()).sum();
    return tape.record(Matrix::Constant(1, 1, v), {predicted}, [predicted, diff, w](ad::Tape& t, const Matrix& g) {
        t.accumulate(predicted, (diff.array().colwise() * (2.0 * g(0, 0) * w.array())).matrix());
    });
}

/// Plain-value reconstruction loss for per-image patch matrices (rows = patches) and one masked set.
inline double rec_loss(const std::vector<Matrix>& original, const std::vector<Matrix>& predicted,
                       const std::vector<Index>& masked) {
    require(!masked.empty(), "repr_module", "rec_loss needs a non-empty masked set");
    require(original.size() == predicted.size() && !original.empty(), "repr_module", "rec_loss: batch mismatch");
    double total = 0;
    for (std::size_t i = 0; i < original.size(); ++i) {
        double s = 0;
        for (Index j : masked) s += (original[i].row(j) - predicted[i].row(j)).squaredNorm();
        total += s / static_cast<double>(masked.size());
    }
    return total / static_cast<double>(original.size());
}

/// Mean over i of the two-sided contrastive loss with s(a, b) = exp(cos(a, b) / tau).
/// Anchor e_i: positive e-bar_i against {e_k, k != i} and {e-bar_k, all k};
/// anchor e-bar_i: positive e_i against {e_k, all k} and {e-bar_k, k != i}.
inline ad::Var contrastive_loss(const ad::Var& e, const ad::Var& ebar, double tau = 0.5) {
    const Index N = e.rows(), D = e.cols();
    require(N >= 1 && ebar.rows() == N && ebar.cols() == D, "repr_module", "contrastive_loss: shape mismatch");
    require(tau > 0.0, "repr_module", "temperature must be > 0");
    Matrix V(2 * N, D);
    V.topRows(N) = e.value();
    V.bottomRows(N) = ebar.value();
    Vector norms = V.rowwise().norm();
    for (Index r = 0; r < 2 * N; ++r)
        require(norms(r) > 0.0, "repr_module", "contrastive_loss: zero-norm embedding", ErrorKind::numeric);
    Matrix U = V.array().colwise() / norms.array();
    Matrix logits = U * U.transpose() / tau;
    Matrix G = Matrix::Zero(2 * N, 2 * N);  // d loss / d logits
    double loss = 0;
    for (Index a = 0; a < 2 * N; ++a) {
        const Index pos = a < N ? a + N : a - N;
        double m = -std::numeric_limits<double>::infinity();
        for (Index b = 0; b < 2 * N; ++b)
            if (b != a) m = std::max(m, logits(a, b));
        double z = 0;
        for (Index b = 0; b < 2 * N; ++b)
            if (b != a) z += std::exp(logits(a, b) - m);
        loss += -logits(a, pos) + m + std::log(z);
        for (Index b = 0; b < 2 * N; ++b)
            if (b != a) G(a, b) = std::exp(logits(a, b) - m) / z / static_cast<double>(N);
        G(a, pos) -= 1.0 / static_cast<double>(N);
    }
    loss /= static_cast<double>(N);
    return e.tape()->record(Matrix::Constant(1, 1, loss), {e, ebar},
                            [e, ebar, U, G, norms, tau, N](ad::Tape& t, const Matrix& g) {
                                Matrix gU = (G + G.transpose()) * U / tau * g(0, 0);
                                Matrix gV(gU.rows(), gU.cols());
                                for (Index r = 0; r < gU.rows(); ++r) {
                                    const double proj = U.row(r).dot(gU.row(r));
                                    gV.row(r) = (gU.row(r) - proj * U.row(r)) / norms(r);
                                }
                                t.accumulate(e, gV.topRows(N));
                                t.accumulate(ebar, gV.bottomRows(N));
                            });
}

/// Trainable noise scales for one uncertainty-weighted composite; sigma = exp(log_sigma).
struct UwlState {
    ad::ParamSet params;

    explicit UwlState(Index n_losses = 2, const std::string& name = "uwl.log_sigma") : name_(name) {
        params.add(name, Matrix::Zero(1, n_losses));
    }
    ad::Parameter& log_sigma() { return params[name_]; }
    const ad::Parameter& log_sigma() const { return params[name_]; }
    RowVector sigma() const { return log_sigma().value.row(0).array().exp(); }
    Index size() const { return log_sigma().value.cols(); }

private:
    std::string name_;
};

/// sum_j L_j / (2 sigma_j^2) + log(1 + sigma_j^2), with log_sigma a 1 x n tape variable.
inline ad::Var uwl(const std::vector<ad::Var>& losses, const ad::Var& log_sigma) {
    require(!losses.empty() && log_sigma.cols() == static_cast<Index>(losses.size()) && log_sigma.rows() == 1,
            "repr_module", "uwl needs one sigma per loss");
    ad::Var total;
    for (std::size_t j = 0; j < losses.size(); ++j) {
        ad::Var s = ad::slice_cols(log_sigma, static_cast<Index>(j), 1);
        ad::Var weight = ad::scale(ad::exp(ad::scale(s, -2.0)), 0.5);
        ad::Var term = ad::add(ad::scalar_mul(weight, losses[j]), ad::softplus(ad::scale(s, 2.0)));
        total = j == 0 ? term : ad::add(total, term);
    }
    return total;
}

/// Plain-value form.
inline double uwl(const std::vector<double>& losses, const std::vector<double>& sigma) {
    require(losses.size() == sigma.size() && !losses.empty(), "repr_module", "uwl needs one sigma per loss");
    double v = 0;
    for (std::size_t j = 0; j < losses.size(); ++j)
        v += losses[j] / (2.0 * sigma[j] * sigma[j]) + std::log1p(sigma[j] * sigma[j]);
    return v;
}

}  // namespace darlc
