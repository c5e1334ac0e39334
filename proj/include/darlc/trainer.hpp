#pragma once

// Two-phase training loop. Phase A pretrains the representation module on the
// masked-reconstruction and contrastive objectives. Phase B alternates, per
// epoch, a MAP-EM refit of the mixture plus one step on the epoch-level
// composite, and per batch a step on the KL self-training composite that also
// moves the mixture parameters.

#include "darlc/cluster_losses.hpp"
#include "darlc/optim.hpp"
#include "darlc/repr.hpp"
#include "darlc/smm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace darlc {

struct TrainSchedule {
    Index pretrain_epochs = 50;
    Index joint_epochs = 50;
    Index batch_size = 4;
    double pretrain_lr = 1e-3;
    double joint_lr = 1e-4;
    double smm_lr = 1e-3;
    double eta0 = 0.5;
    double upsilon = 0.0;  // 0 selects 1.5 / K
    double ema_momentum = 0.999;
    double tau = 0.5;
    double change_tol = 0.001;
    Index proj_dim = 32;
    double sigma_min = 1e-2;
    double sigma_max = 1e2;
    bool use_contrastive = true;
    SmmOptions em;
    PriorConfig priors;

    void validate() const {
        auto cfg = [](bool ok, const std::string& key, const std::string& msg) {
            require(ok, "joint_trainer", key + ": " + msg, ErrorKind::config);
        };
        cfg(pretrain_epochs >= 0, "pretrain_epochs", "must be >= 0");
        cfg(joint_epochs >= 1, "joint_epochs", "must be >= 1");
        cfg(batch_size >= 2, "batch_size", "must be >= 2");
        cfg(pretrain_lr > 0 && joint_lr > 0 && smm_lr >= 0, "lr", "learning rates must be positive");
        cfg(eta0 >= 0 && eta0 <= 1, "eta0", "must lie in [0, 1]");
        cfg(upsilon >= 0 && upsilon <= 1, "upsilon", "must lie in (0, 1], or 0 for the default");
        cfg(ema_momentum >= 0 && ema_momentum <= 1, "ema_momentum", "must lie in [0, 1]");
        cfg(tau > 0, "tau", "must be > 0");
        cfg(change_tol >= 0, "change_tol", "must be >= 0");
        cfg(proj_dim >= 1, "proj_dim", "must be >= 1");
        cfg(sigma_min > 0 && sigma_max >= sigma_min, "sigma_min/sigma_max", "need 0 < sigma_min <= sigma_max");
        em.validate();
        priors.validate();
    }

    double eta_at(Index epoch) const {
        if (joint_epochs <= 1) return eta0;
        return eta0 * (1.0 - static_cast<double>(epoch) / static_cast<double>(joint_epochs - 1));
    }
    double upsilon_for(Index K) const { return upsilon > 0 ? upsilon : std::min(1.0, 1.5 / static_cast<double>(K)); }
};

struct EpochLog {
    std::string phase;  // "pretrain" | "joint"
    Index epoch = 0;
    double rec = std::numeric_limits<double>::quiet_NaN();
    double clr = std::numeric_limits<double>::quiet_NaN();
    double lap = std::numeric_limits<double>::quiet_NaN();
    double ll = std::numeric_limits<double>::quiet_NaN();
    double size = std::numeric_limits<double>::quiet_NaN();
    double kl = std::numeric_limits<double>::quiet_NaN();
    double change = std::numeric_limits<double>::quiet_NaN();
    double eta = std::numeric_limits<double>::quiet_NaN();
};

/// Network-side state that persists across both phases.
struct Learner {
    ReprModel model;
    ProjectionHead head;
    UwlState uwl_ssl{2, "uwl_ssl.log_sigma"};
    UwlState uwl_l1{3, "uwl_l1.log_sigma"};
    UwlState uwl_l2{3, "uwl_l2.log_sigma"};
};

inline Learner init_learner(const VitConfig& vit, const TrainSchedule& sched, std::uint64_t seed) {
    sched.validate();
    Learner l{init_repr(vit, split_seed(seed, "repr.init")),
              init_projection(vit.dim, sched.proj_dim, split_seed(seed, "proj.init"))};
    return l;
}

namespace detail {

/// Shuffled batches; a trailing batch of one row is merged into the previous one.
inline std::vector<std::vector<Index>> make_batches(Index n, Index batch, std::mt19937_64& rng) {
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<Index>> out;
    for (Index s = 0; s < n; s += batch)
        out.emplace_back(order.begin() + s, order.begin() + std::min(n, s + batch));
    if (out.size() > 1 && out.back().size() < 2) {
        out[out.size() - 2].insert(out[out.size() - 2].end(), out.back().begin(), out.back().end());
        out.pop_back();
    }
    return out;
}

inline Matrix rows_of(const Matrix& m, const std::vector<Index>& idx) {
    Matrix out(static_cast<Index>(idx.size()), m.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) out.row(static_cast<Index>(r)) = m.row(idx[r]);
    return out;
}

/// Row blocks of `tokens` rows per image.
inline Matrix token_rows(const Matrix& patches, Index tokens, const std::vector<Index>& idx) {
    Matrix out(static_cast<Index>(idx.size()) * tokens, patches.cols());
    for (std::size_t r = 0; r < idx.size(); ++r)
        out.middleRows(static_cast<Index>(r) * tokens, tokens) = patches.middleRows(idx[r] * tokens, tokens);
    return out;
}

inline void clamp_sigma(UwlState& u, double lo, double hi) {
    u.log_sigma().value = u.log_sigma().value.cwiseMax(std::log(lo)).cwiseMin(std::log(hi));
}

inline void check_finite(double v, const std::string& what, const std::string& where) {
    require(std::isfinite(v), "joint_trainer", "non-finite " + what + " at " + where, ErrorKind::numeric);
}

inline std::vector<int> argmax_rows(const Matrix& m) {
    std::vector<int> out(static_cast<std::size_t>(m.rows()));
    for (Index i = 0; i < m.rows(); ++i) {
        Index k = 0;
        m.row(i).maxCoeff(&k);
        out[static_cast<std::size_t>(i)] = static_cast<int>(k);
    }
    return out;
}

}  // namespace detail

using EpochCallback = std::function<void(const EpochLog&)>;

/// Phase A. `raw` and `smooth` are patch matrices (N*T x patch_dim) of the same images.
inline std::vector<EpochLog> pretrain(Learner& L, const Matrix& raw, const Matrix& smooth, const TrainSchedule& s,
                                      std::uint64_t seed, const EpochCallback& on_epoch = {}) {
    s.validate();
    const VitConfig& cfg = L.model.cfg;
    const Index T = cfg.tokens();
    require(raw.rows() % T == 0 && raw.rows() == smooth.rows(), "joint_trainer", "patch matrices do not match");
    const Index N = raw.rows() / T;
    ad::Adam opt_net({s.pretrain_lr}), opt_uwl({s.pretrain_lr});
    std::mt19937_64 rng(split_seed(seed, "pretrain.order"));
    std::vector<EpochLog> logs;
    for (Index epoch = 0; epoch < s.pretrain_epochs; ++epoch) {
        EpochLog log{"pretrain", epoch};
        double rec_sum = 0, clr_sum = 0;
        auto batches = detail::make_batches(N, s.batch_size, rng);
        for (std::size_t b = 0; b < batches.size(); ++b) {
            const auto& idx = batches[b];
            const auto B = static_cast<Index>(idx.size());
            const std::string where = "pretrain epoch " + std::to_string(epoch) + " batch " + std::to_string(b);
            Matrix xb = detail::token_rows(raw, T, idx);
            BatchMask mask = batch_mask(B, cfg, split_seed(split_seed(seed, "pretrain.mask"),
                                                            static_cast<std::uint64_t>(epoch * 100003 + static_cast<Index>(b))));
            L.model.online.zero_grad();
            L.uwl_ssl.params.zero_grad();
            ad::Tape tape;
            Binder bind(tape, L.model.online, true);
            ad::Var rec = rec_loss(tape, xb, mim_forward(bind, xb, cfg, mask.flags), mask);
            ad::Var loss = rec;
            detail::check_finite(rec.scalar(), "L_rec", where);
            rec_sum += rec.scalar() * static_cast<double>(B);
            if (s.use_contrastive) {
                EmbeddingPair ep = embed_pair(tape, L.model, xb, detail::token_rows(smooth, T, idx));
                ad::Var clr = contrastive_loss(ep.online, ep.target, s.tau);
                detail::check_finite(clr.scalar(), "L_clr", where);
                clr_sum += clr.scalar() * static_cast<double>(B);
                loss = uwl({rec, clr}, tape.param(L.uwl_ssl.log_sigma()));
            }
            detail::check_finite(loss.scalar(), "L_ssl", where);
            tape.backward(loss);
            opt_net.step(L.model.online);
            if (s.use_contrastive) {
                opt_uwl.step(L.uwl_ssl.params);
                detail::clamp_sigma(L.uwl_ssl, s.sigma_min, s.sigma_max);
            }
            ema_update(L.model.online, L.model.target, s.ema_momentum);
        }
        log.rec = rec_sum / static_cast<double>(N);
        if (s.use_contrastive) log.clr = clr_sum / static_cast<double>(N);
        logs.push_back(log);
        if (on_epoch) on_epoch(log);
    }
    return logs;
}

/// Embeddings e (N x dim) of the online branch, computed in chunks without gradients.
inline Matrix online_embeddings(ReprModel& model, const Matrix& raw, Index chunk = 64) {
    const Index T = model.cfg.tokens(), N = raw.rows() / T;
    Matrix out(N, model.cfg.dim);
    for (Index s = 0; s < N; s += chunk) {
        const Index n = std::min(chunk, N - s);
        ad::Tape tape;
        out.middleRows(s, n) = embed(Binder(tape, model.online, false), raw.middleRows(s * T, n * T), model.cfg).value();
    }
    return out;
}

/// Final representation: running statistics recalibrated on the full set, then eval-mode projection.
inline Matrix final_representation(Learner& L, const Matrix& raw) {
    Matrix e = online_embeddings(L.model, raw);
    recalibrate(L.head, e);
    return project(L.head, e, BnMode::eval);
}

struct JointResult {
    SmmParams theta;
    Matrix Z;        // N x proj_dim, eval-mode representation
    Matrix Q;        // N x K normalized responsibilities
    Matrix log_q;    // N x K log(pi_k phi_k(z_i))
    std::vector<int> labels;
    std::vector<EpochLog> logs;
    Index epochs_run = 0;
    bool converged = false;
};

/// Phase B with K clusters and seeding similarity S (N x N).
inline JointResult joint_train(Learner& L, const Matrix& raw, const Matrix& smooth, const Matrix& S, Index K,
                               const TrainSchedule& s, std::uint64_t seed, const EpochCallback& on_epoch = {}) {
    s.validate();
    const VitConfig& cfg = L.model.cfg;
    const Index T = cfg.tokens(), N = raw.rows() / T;
    require(S.rows() == N && S.cols() == N, "joint_trainer", "similarity matrix size does not match the data");
    require(K >= 1 && K <= N, "joint_trainer", "K must lie in [1, N]", ErrorKind::config);
    const Matrix lap = normalized_laplacian(S);
    const double upsilon = s.upsilon_for(K);

    ad::Adam opt_net({s.joint_lr}), opt_head({s.joint_lr}), opt_l1({s.joint_lr}), opt_l2({s.joint_lr}),
        opt_smm({s.smm_lr});
    std::mt19937_64 rng(split_seed(seed, "joint.order"));
    JointResult out;
    std::vector<int> prev_labels;
    bool have_theta = false;

    for (Index epoch = 0; epoch < s.joint_epochs; ++epoch) {
        const std::string where = "joint epoch " + std::to_string(epoch);
        EpochLog log{"joint", epoch};
        log.eta = s.eta_at(epoch);

        // Epoch level: full-set Z, MAP-EM refit, one step on L1 with the mixture held fixed.
        L.model.online.zero_grad();
        L.head.params.zero_grad();
        L.uwl_l1.params.zero_grad();
        SmmFit fit;
        Matrix Qn;
        {
            ad::Tape tape;
            Binder bind(tape, L.model.online, true);
            ad::Var e = embed(bind, raw, cfg);
            ad::Var Z = project(tape, L.head, e, BnMode::train);
            const Matrix& Zv = Z.value();
            detail::check_finite(Zv.allFinite() ? 0.0 : std::numeric_limits<double>::quiet_NaN(), "Z", where);
            SmmPriors priors = s.priors.for_data(Zv);
            fit = have_theta ? fit_map_em(Zv, out.theta, priors, s.em)
                             : fit_map_em(Zv, K, priors, split_seed(seed, "smm.init"), s.em);
            out.theta = fit.params;
            have_theta = true;
            Qn = fit.stats.xi;

            SmmRaw fixed = to_raw(out.theta, s.em.v_min, s.em.v_max);
            ad::Var log_q = smm_log_q(tape, Z, fixed, false);
            ad::Var lap_l = laplacian_loss_from(Z, lap);
            ad::Var ll = loglik_loss(log_q);
            ad::Var size = size_loss(log_q, upsilon);
            BatchMask mask = batch_mask(N, cfg, split_seed(split_seed(seed, "joint.mask.full"), static_cast<std::uint64_t>(epoch)));
            ad::Var rec = rec_loss(tape, raw, mim_forward(bind, raw, cfg, mask.flags), mask);
            ad::Var l1 = compose_L1(lap_l, ll, size, rec, log.eta, tape.param(L.uwl_l1.log_sigma()));
            log.lap = lap_l.scalar();
            log.ll = ll.scalar();
            log.size = size.scalar();
            for (double v : {log.lap, log.ll, log.size, rec.scalar(), l1.scalar()}) detail::check_finite(v, "L1 term", where);
            tape.backward(l1);
            opt_net.step(L.model.online);
            opt_head.step(L.head.params);
            opt_l1.step(L.uwl_l1.params);
            detail::clamp_sigma(L.uwl_l1, s.sigma_min, s.sigma_max);
            ema_update(L.model.online, L.model.target, s.ema_momentum);
        }
        const Matrix P = target_distribution(Qn);

        // Batch level: L2 = UWL(L_kl, L_rec, L_clr), updating the network and the mixture. The head
        // normalizes with full-set statistics here so batch scores stay comparable with P.
        recalibrate(L.head, online_embeddings(L.model, raw));
        SmmRaw raw_theta = to_raw(out.theta, s.em.v_min, s.em.v_max);
        double kl_sum = 0, rec_sum = 0, clr_sum = 0;
        auto batches = detail::make_batches(N, s.batch_size, rng);
        for (std::size_t b = 0; b < batches.size(); ++b) {
            const auto& idx = batches[b];
            const auto B = static_cast<Index>(idx.size());
            const std::string bwhere = where + " batch " + std::to_string(b);
            Matrix xb = detail::token_rows(raw, T, idx);
            BatchMask mask = batch_mask(B, cfg, split_seed(split_seed(seed, "joint.mask"),
                                                            static_cast<std::uint64_t>(epoch * 100003 + static_cast<Index>(b))));
            L.model.online.zero_grad();
            L.head.params.zero_grad();
            L.uwl_l2.params.zero_grad();
            raw_theta.params.zero_grad();
            ad::Tape tape;
            Binder bind(tape, L.model.online, true);
            EmbeddingPair ep = embed_pair(tape, L.model, xb, detail::token_rows(smooth, T, idx));
            ad::Var Zb = project(tape, L.head, ep.online, BnMode::eval);
            ad::Var log_q = smm_log_q(tape, Zb, raw_theta, true);
            ad::Var kl = kl_loss(detail::rows_of(P, idx), log_q);
            ad::Var rec = rec_loss(tape, xb, mim_forward(bind, xb, cfg, mask.flags), mask);
            ad::Var clr = s.use_contrastive ? contrastive_loss(ep.online, ep.target, s.tau) : tape.scalar(0.0);
            ad::Var l2 = uwl({kl, rec, clr}, tape.param(L.uwl_l2.log_sigma()));
            for (double v : {kl.scalar(), rec.scalar(), clr.scalar(), l2.scalar()}) detail::check_finite(v, "L2 term", bwhere);
            kl_sum += kl.scalar();
            rec_sum += rec.scalar() * static_cast<double>(B);
            clr_sum += clr.scalar() * static_cast<double>(B);
            tape.backward(l2);
            opt_net.step(L.model.online);
            opt_head.step(L.head.params);
            opt_l2.step(L.uwl_l2.params);
            detail::clamp_sigma(L.uwl_l2, s.sigma_min, s.sigma_max);
            if (s.smm_lr > 0) opt_smm.step(raw_theta.params);
            ema_update(L.model.online, L.model.target, s.ema_momentum);
        }
        out.theta = from_raw(raw_theta);
        require(raw_theta.params.all_finite(), "joint_trainer", "mixture parameters diverged at " + where,
                ErrorKind::numeric);

        log.kl = kl_sum;
        log.rec = rec_sum / static_cast<double>(N);
        if (s.use_contrastive) log.clr = clr_sum / static_cast<double>(N);
        std::vector<int> labels = detail::argmax_rows(Qn);
        if (!prev_labels.empty()) {
            Index changed = 0;
            for (std::size_t i = 0; i < labels.size(); ++i) changed += labels[i] != prev_labels[i];
            log.change = static_cast<double>(changed) / static_cast<double>(N);
        }
        prev_labels = std::move(labels);
        out.logs.push_back(log);
        out.epochs_run = epoch + 1;
        if (on_epoch) on_epoch(log);
        if (!std::isnan(log.change) && log.change < s.change_tol) {
            out.converged = true;
            break;
        }
    }

    out.Z = final_representation(L, raw);
    SmmFit fin = fit_map_em(out.Z, out.theta, s.priors.for_data(out.Z), s.em);
    out.theta = fin.params;
    out.Q = fin.stats.xi;
    out.log_q = fin.stats.log_q;
    out.labels = fin.labels();
    return out;
}

inline void write_logs_csv(const std::string& path, const std::vector<EpochLog>& logs) {
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), "joint_trainer", "cannot open " + path, ErrorKind::io);
    os << "phase,epoch,L_rec,L_clr,L_lap,L_ll,L_size,L_kl,change_fraction,eta\n";
    auto cell = [&](double v) {
        os << ',';
        if (std::isnan(v)) return;
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.10g", v);
        os << buf;
    };
    for (const auto& l : logs) {
        os << l.phase << ',' << l.epoch;
        for (double v : {l.rec, l.clr, l.lap, l.ll, l.size, l.kl, l.change, l.eta}) cell(v);
        os << '\n';
    }
    require(static_cast<bool>(os), "joint_trainer", "write failed: " + path, ErrorKind::io);
}

// ---------------------------------------------------------------------------
// VIT1 checkpoint: one config line, then named float64 tensors, then "END".
// ---------------------------------------------------------------------------

namespace detail {
inline void put_tensor(std::ostream& os, const std::string& name, const Matrix& m) {
    os << "T " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
    binio::put_matrix(os, m);
}
}  // namespace detail

inline void write_vit(std::ostream& os, const Learner& L) {
    const VitConfig& c = L.model.cfg;
    char ratio[32];
    std::snprintf(ratio, sizeof ratio, "%.17g", c.mask_ratio);
    os << "VIT1 " << c.channels << ' ' << c.height << ' ' << c.width << ' ' << c.patch << ' ' << c.dim << ' '
       << c.depth << ' ' << c.heads << ' ' << c.mlp_ratio << ' ' << ratio << ' ' << L.head.out_dim() << '\n';
    for (const auto& p : L.model.online) detail::put_tensor(os, "online/" + p.name, p.value);
    for (const auto& p : L.model.target) detail::put_tensor(os, "target/" + p.name, p.value);
    for (const auto& p : L.head.params) detail::put_tensor(os, "head/" + p.name, p.value);
    detail::put_tensor(os, "head/running_mean", L.head.running_mean);
    detail::put_tensor(os, "head/running_var", L.head.running_var);
    for (const UwlState* u : {&L.uwl_ssl, &L.uwl_l1, &L.uwl_l2})
        for (const auto& p : u->params) detail::put_tensor(os, "uwl/" + p.name, p.value);
    os << "END\n";
    require(static_cast<bool>(os), "repr_module", "VIT1 write failed", ErrorKind::io);
}

inline Learner read_vit(std::istream& is, const std::string& origin = "VIT1 stream") {
    auto fail = [&](const std::string& msg) { throw Error(ErrorKind::io, "repr_module", origin + ": " + msg); };
    std::string line;
    if (!std::getline(is, line)) fail("missing header");
    std::istringstream hs(line);
    std::string magic;
    VitConfig c;
    Index proj = 0;
    hs >> magic >> c.channels >> c.height >> c.width >> c.patch >> c.dim >> c.depth >> c.heads >> c.mlp_ratio >>
        c.mask_ratio >> proj;
    if (magic != "VIT1" || !hs) fail("bad VIT1 header");
    c.validate();
    Learner L{init_repr(c, 0), init_projection(c.dim, proj, 0)};
    while (std::getline(is, line)) {
        if (line == "END") return L;
        std::istringstream ts(line);
        std::string tag, name;
        long long r = 0, k = 0;
        ts >> tag >> name >> r >> k;
        if (tag != "T" || !ts || r < 0 || k < 0) fail("bad tensor record");
        Matrix m = binio::get_matrix(is, r, k, origin);
        const auto slash = name.find('/');
        if (slash == std::string::npos) fail("unknown tensor " + name);
        const std::string group = name.substr(0, slash), key = name.substr(slash + 1);
        Matrix* dst = nullptr;
        if (group == "online" && L.model.online.contains(key)) dst = &L.model.online[key].value;
        else if (group == "target" && L.model.target.contains(key)) dst = &L.model.target[key].value;
        else if (group == "head" && L.head.params.contains(key)) dst = &L.head.params[key].value;
        else if (group == "uwl") {
            for (UwlState* u : {&L.uwl_ssl, &L.uwl_l1, &L.uwl_l2})
                if (u->params.contains(key)) dst = &u->params[key].value;
        }
        if (group == "head" && key == "running_mean") {
            L.head.running_mean = m.row(0);
            continue;
        }
        if (group == "head" && key == "running_var") {
            L.head.running_var = m.row(0);
            continue;
        }
        if (!dst) fail("unknown tensor " + name);
        if (dst->rows() != m.rows() || dst->cols() != m.cols()) fail("shape mismatch for " + name);
        *dst = std::move(m);
    }
    fail("missing END marker");
    return L;
}

inline void write_vit(const std::string& path, const Learner& L) {
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), "repr_module", "cannot open " + path, ErrorKind::io);
    write_vit(os, L);
}

inline Learner read_vit(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), "repr_module", "cannot open " + path, ErrorKind::io);
    return read_vit(is, path);
}

}  // namespace darlc
