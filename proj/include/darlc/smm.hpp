#pragma once

// Student's-t mixture clustering head: projection head, mixture density,
// MAP-EM with Dirichlet / normal-inverse-Wishart priors, a differentiable
// log-score op for end-to-end training, and the SMM1 checkpoint.

#include "darlc/autodiff.hpp"
#include "darlc/binio.hpp"
#include "darlc/kmeans.hpp"

#include <Eigen/Cholesky>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/tools/roots.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <numbers>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace darlc {

// ---------------------------------------------------------------------------
// Projection head: z = SELU(BN(e W))
// ---------------------------------------------------------------------------

enum class BnMode { train, eval };

struct ProjectionHead {
    ad::ParamSet params;  // proj.w (in x out), proj.gamma, proj.beta (1 x out)
    RowVector running_mean;
    RowVector running_var;
    double momentum = 0.1;
    double eps = 1e-9;

    Index in_dim() const { return params["proj.w"].value.rows(); }
    Index out_dim() const { return params["proj.w"].value.cols(); }
};

inline ProjectionHead init_projection(Index in_dim, Index out_dim, std::uint64_t seed) {
    require(in_dim >= 1 && out_dim >= 1, "smm_cluster", "projection dims must be positive", ErrorKind::config);
    std::mt19937_64 rng(seed);
    // LeCun normal, the usual pairing with SELU
    std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(in_dim)));
    Matrix w(in_dim, out_dim);
    for (Index k = 0; k < w.size(); ++k) w.data()[k] = n(rng);
    ProjectionHead h;
    h.params.add("proj.w", std::move(w));
    h.params.add("proj.gamma", Matrix::Ones(1, out_dim));
    h.params.add("proj.beta", Matrix::Zero(1, out_dim));
    h.running_mean = RowVector::Zero(out_dim);
    h.running_var = RowVector::Ones(out_dim);
    return h;
}

/// Train mode normalizes with batch statistics and updates the running averages.
inline ad::Var project(ad::Tape& tape, ProjectionHead& head, const ad::Var& e, BnMode mode, bool trainable = true) {
    require(e.cols() == head.in_dim(), "smm_cluster", "projection: embedding width mismatch");
    auto bind = [&](const char* name) {
        ad::Parameter& p = head.params[name];
        return trainable ? tape.param(p) : tape.constant(p.value);
    };
    ad::Var pre = ad::matmul(e, bind("proj.w"));
    ad::Var normed;
    if (mode == BnMode::train) {
        ad::BatchStats st;
        normed = ad::batch_normalize(pre, head.eps, &st);
        head.running_mean = (1.0 - head.momentum) * head.running_mean + head.momentum * st.mean;
        head.running_var = (1.0 - head.momentum) * head.running_var + head.momentum * st.var;
    } else {
        RowVector inv = (head.running_var.array() + head.eps).rsqrt();
        normed = ad::mul_row(ad::add_row(pre, tape.constant(-head.running_mean)), tape.constant(inv));
    }
    return ad::selu(ad::add_row(ad::mul_row(normed, bind("proj.gamma")), bind("proj.beta")));
}

inline Matrix project(ProjectionHead& head, const Matrix& e, BnMode mode) {
    ad::Tape tape;
    return project(tape, head, tape.constant(e), mode, false).value();
}

/// Replaces the running statistics with the exact statistics of `e`.
inline void recalibrate(ProjectionHead& head, const Matrix& e) {
    Matrix pre = e * head.params["proj.w"].value;
    head.running_mean = pre.colwise().mean();
    head.running_var = (pre.rowwise() - head.running_mean).array().square().colwise().mean();
}

// ---------------------------------------------------------------------------
// Parameters and priors
// ---------------------------------------------------------------------------

struct SmmParams {
    Vector pi;                 // K
    Matrix means;              // K x D
    std::vector<Matrix> cov;   // K of D x D
    Vector dof;                // K

    Index K() const { return pi.size(); }
    Index D() const { return means.cols(); }
};

struct SmmOptions {
    double v_min = 1.0;
    double v_max = 200.0;
    double v_init = 10.0;
    double ridge = 1e-6;
    double tol = 1e-6;
    int max_iter = 200;
    bool update_dof = true;

    void validate() const {
        require(v_min > 0 && v_max > v_min && v_init >= v_min && v_init <= v_max, "smm_cluster",
                "need 0 < v_min <= v_init <= v_max", ErrorKind::config);
        require(ridge >= 0 && tol >= 0 && max_iter >= 1, "smm_cluster", "bad EM options", ErrorKind::config);
    }
};

struct SmmPriors {
    double alpha = 2.0;
    double kappa = 0.01;
    Vector m0;
    Matrix S0;
    double rho = 0.0;
    bool improper = false;  // set only by flat(); skips validation

    /// Data-dependent defaults: m0 = mean(Z), S0 = s0_scale * diag(cov Z) * D, rho = D + rho_extra.
    static SmmPriors defaults(const Matrix& Z, double alpha = 2.0, double kappa = 0.01, double s0_scale = 0.1,
                              double rho_extra = 2.0) {
        require(Z.rows() >= 1, "smm_cluster", "priors need data");
        const Index D = Z.cols();
        SmmPriors p;
        p.alpha = alpha;
        p.kappa = kappa;
        p.m0 = Z.colwise().mean().transpose();
        Matrix centered = Z.rowwise() - p.m0.transpose();
        Vector var = centered.array().square().colwise().mean().transpose();
        p.S0 = Matrix::Zero(D, D);
        for (Index j = 0; j < D; ++j) p.S0(j, j) = std::max(s0_scale * var(j) * static_cast<double>(D), 1e-12);
        p.rho = static_cast<double>(D) + rho_extra;
        return p;
    }

    /// Improper flat limit: the MAP updates reduce to maximum likelihood.
    static SmmPriors flat(Index D) {
        SmmPriors p;
        p.alpha = 1.0;
        p.kappa = 0.0;
        p.m0 = Vector::Zero(D);
        p.S0 = Matrix::Zero(D, D);
        p.rho = -static_cast<double>(D + 2);
        p.improper = true;
        return p;
    }

    void validate(Index D) const {
        require(m0.size() == D && S0.rows() == D && S0.cols() == D, "smm_cluster", "prior dimension mismatch",
                ErrorKind::config);
        if (improper) return;
        require(alpha > 0 && kappa > 0 && rho > static_cast<double>(D) - 1, "smm_cluster",
                "priors need alpha > 0, kappa > 0, rho > D - 1", ErrorKind::config);
        require(Eigen::LLT<Matrix>(S0).info() == Eigen::Success, "smm_cluster", "S0 must be SPD", ErrorKind::config);
    }
};

/// Scalar knobs for SmmPriors::defaults, as carried in run configs.
struct PriorConfig {
    double alpha = 2.0;
    double kappa = 0.01;
    double s0_scale = 0.1;
    double rho_extra = 2.0;

    void validate() const {
        require(alpha > 0 && kappa > 0 && s0_scale > 0 && rho_extra > -1, "smm_cluster",
                "priors need alpha, kappa, s0_scale > 0 and rho_extra > -1", ErrorKind::config);
    }
    SmmPriors for_data(const Matrix& Z) const { return SmmPriors::defaults(Z, alpha, kappa, s0_scale, rho_extra); }
};

inline Eigen::LLT<Matrix> checked_llt(const Matrix& S) {
    Eigen::LLT<Matrix> llt(S);
    require(llt.info() == Eigen::Success && llt.matrixLLT().diagonal().minCoeff() > 0, "smm_cluster",
            "covariance is not symmetric positive definite", ErrorKind::numeric);
    return llt;
}

// ---------------------------------------------------------------------------
// Densities
// ---------------------------------------------------------------------------

inline double log_t_normalizer(double v, Index D) {
    const double d = static_cast<double>(D);
    return std::lgamma((v + d) / 2.0) - std::lgamma(v / 2.0) - d / 2.0 * std::log(v * std::numbers::pi);
}

struct ComponentTerms {
    Matrix log_phi;  // N x K
    Matrix delta;    // N x K Mahalanobis distances
};

inline ComponentTerms component_terms(const Matrix& Z, const SmmParams& p) {
    require(Z.cols() == p.D(), "smm_cluster", "data dimension does not match the mixture");
    const Index N = Z.rows(), K = p.K(), D = p.D();
    ComponentTerms out{Matrix(N, K), Matrix(N, K)};
    for (Index k = 0; k < K; ++k) {
        auto llt = checked_llt(p.cov[static_cast<std::size_t>(k)]);
        Matrix L = llt.matrixL();
        const double logdet_half = L.diagonal().array().log().sum();
        Eigen::MatrixXd R = (Z.rowwise() - p.means.row(k)).transpose();
        L.triangularView<Eigen::Lower>().solveInPlace(R);
        const double v = p.dof(k);
        const double c = log_t_normalizer(v, D) - logdet_half;
        for (Index i = 0; i < N; ++i) {
            const double delta = R.col(i).squaredNorm();
            out.delta(i, k) = delta;
            out.log_phi(i, k) = c - (v + static_cast<double>(D)) / 2.0 * std::log1p(delta / v);
        }
    }
    return out;
}

/// log(pi_k phi_k(z_i)), N x K.
inline Matrix log_scores(const Matrix& Z, const SmmParams& p) {
    Matrix lq = component_terms(Z, p).log_phi;
    for (Index k = 0; k < p.K(); ++k) lq.col(k).array() += std::log(p.pi(k));
    return lq;
}

inline Vector smm_log_pdf(const Matrix& Z, const SmmParams& p) { return ad::logsumexp_rows_value(log_scores(Z, p)); }

inline double smm_pdf(const RowVector& z, const SmmParams& p) {
    return std::exp(smm_log_pdf(Matrix(z), p)(0));
}

// ---------------------------------------------------------------------------
// MAP-EM
// ---------------------------------------------------------------------------

struct EStepStats {
    Matrix xi;     // responsibilities, rows sum to 1
    Matrix zeta;   // expected scales
    Matrix log_q;  // log(pi_k phi_k(z_i))
};

inline EStepStats e_step(const Matrix& Z, const SmmParams& p) {
    ComponentTerms t = component_terms(Z, p);
    EStepStats s;
    s.log_q = t.log_phi;
    for (Index k = 0; k < p.K(); ++k) s.log_q.col(k).array() += std::log(p.pi(k));
    s.xi = ad::softmax_rows_value(s.log_q);
    s.zeta.resize(Z.rows(), p.K());
    const double D = static_cast<double>(p.D());
    for (Index k = 0; k < p.K(); ++k)
        s.zeta.col(k) = ((p.dof(k) + D) / (p.dof(k) + t.delta.col(k).array())).matrix();
    return s;
}

/// Root of -psi(v/2) + log(v/2) + 1 + c on [v_min, v_max]; the left side decreases in v,
/// so without a sign change the maximizer sits on the nearer boundary.
inline double solve_dof(double c, double v_min, double v_max) {
    using boost::math::digamma;
    auto f = [c](double v) { return -digamma(v / 2.0) + std::log(v / 2.0) + 1.0 + c; };
    const double fa = f(v_min), fb = f(v_max);
    if (fa <= 0) return v_min;
    if (fb >= 0) return v_max;
    std::uintmax_t iters = 200;
    auto r = boost::math::tools::toms748_solve(f, v_min, v_max, fa, fb, boost::math::tools::eps_tolerance<double>(50),
                                               iters);
    return 0.5 * (r.first + r.second);
}

inline SmmParams m_step(const Matrix& Z, const EStepStats& s, const SmmPriors& priors, const SmmParams& prev,
                        const SmmOptions& opt = {}) {
    const Index N = Z.rows(), K = prev.K(), D = Z.cols();
    require(s.xi.rows() == N && s.xi.cols() == K, "smm_cluster", "m_step: statistics do not match data");
    priors.validate(D);
    const double Dd = static_cast<double>(D);
    SmmParams p = prev;
    Vector nk = s.xi.colwise().sum().transpose();
    std::vector<Index> empty;
    for (Index k = 0; k < K; ++k) {
        if (nk(k) < 1e-8 * static_cast<double>(N)) {
            empty.push_back(k);
            continue;
        }
        Vector w = s.xi.col(k).cwiseProduct(s.zeta.col(k));
        const double sw = w.sum();
        Vector mu = (priors.kappa * priors.m0 + Z.transpose() * w) / (priors.kappa + sw);
        Matrix R = Z.rowwise() - mu.transpose();
        Matrix S = priors.S0 + R.transpose() * (R.array().colwise() * w.array()).matrix();
        Vector dm = mu - priors.m0;
        S += priors.kappa * dm * dm.transpose();
        S /= priors.rho + nk(k) + Dd + 2.0;
        S = 0.5 * (S + S.transpose());
        S.diagonal().array() += opt.ridge;
        p.means.row(k) = mu.transpose();
        p.cov[static_cast<std::size_t>(k)] = S;
        if (opt.update_dof) {
            const double v_old = prev.dof(k);
            double acc = 0;
            for (Index i = 0; i < N; ++i) {
                const double x = s.xi(i, k);
                if (x > 0) acc += x * (std::log(s.zeta(i, k)) - s.zeta(i, k));
            }
            const double c = acc / nk(k) + boost::math::digamma((v_old + Dd) / 2.0) - std::log((v_old + Dd) / 2.0);
            p.dof(k) = solve_dof(c, opt.v_min, opt.v_max);
        }
    }
    double total = 0;
    for (Index k = 0; k < K; ++k) {
        p.pi(k) = std::max(nk(k) + priors.alpha - 1.0, 0.0);
        total += p.pi(k);
    }
    if (!empty.empty()) {
        Vector logpdf = smm_log_pdf(Z, prev);
        Index worst = 0;
        logpdf.minCoeff(&worst);
        for (Index k : empty) {
            p.means.row(k) = Z.row(worst);
            if (p.pi(k) <= 0) {
                p.pi(k) = total > 0 ? total / static_cast<double>(N) : 1.0;
                total += p.pi(k);
            }
        }
    }
    require(total > 0, "smm_cluster", "mixture weights collapsed", ErrorKind::numeric);
    p.pi /= p.pi.sum();
    return p;
}

/// Log posterior up to an additive constant: log-likelihood + log Dir(pi) + sum_k log NIW(mu_k, Sigma_k).
inline double map_objective(const Matrix& Z, const SmmParams& p, const SmmPriors& priors) {
    double obj = smm_log_pdf(Z, p).sum();
    const double D = static_cast<double>(p.D());
    for (Index k = 0; k < p.K(); ++k) {
        if (priors.alpha != 1.0) obj += (priors.alpha - 1.0) * std::log(p.pi(k));
        auto llt = checked_llt(p.cov[static_cast<std::size_t>(k)]);
        const double logdet = 2.0 * Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum();
        Vector dm = p.means.row(k).transpose() - priors.m0;
        obj += -0.5 * (priors.rho + D + 2.0) * logdet;
        if (priors.kappa != 0.0) obj += -0.5 * priors.kappa * dm.dot(llt.solve(dm));
        if (priors.S0.squaredNorm() > 0) obj += -0.5 * llt.solve(priors.S0).trace();
    }
    return obj;
}

inline Matrix global_covariance(const Matrix& Z, double ridge) {
    const Index D = Z.cols();
    Matrix C = Z.rowwise() - Z.colwise().mean();
    Matrix S = Z.rows() > 1 ? Matrix(C.transpose() * C / static_cast<double>(Z.rows())) : Matrix::Zero(D, D);
    S.diagonal().array() += ridge;
    if (Eigen::LLT<Matrix>(S).info() != Eigen::Success) S = Matrix::Identity(D, D);
    return S;
}

/// k-means++ / Lloyd centres, shared global covariance, uniform weights.
inline SmmParams init_smm(const Matrix& Z, Index K, std::uint64_t seed, const SmmOptions& opt = {}) {
    require(K >= 1, "smm_cluster", "K must be >= 1", ErrorKind::config);
    require(K <= Z.rows(), "smm_cluster", "K exceeds the number of points");
    KMeansResult km = kmeans(Z, K, seed, 4);
    SmmParams p;
    p.pi = Vector::Constant(K, 1.0 / static_cast<double>(K));
    p.means = km.centers;
    p.cov.assign(static_cast<std::size_t>(K), global_covariance(Z, std::max(opt.ridge, 1e-12)));
    p.dof = Vector::Constant(K, opt.v_init);
    return p;
}

struct SmmFit {
    SmmParams params;
    EStepStats stats;            // at the returned params
    std::vector<double> trace;   // objective before the first and after every iteration
    int iterations = 0;
    bool converged = false;

    Matrix q() const { return stats.log_q.array().exp(); }
    std::vector<int> labels() const {
        std::vector<int> out(static_cast<std::size_t>(stats.xi.rows()));
        for (Index i = 0; i < stats.xi.rows(); ++i) {
            Index k = 0;
            stats.xi.row(i).maxCoeff(&k);
            out[static_cast<std::size_t>(i)] = static_cast<int>(k);
        }
        return out;
    }
};

/// Warm-started MAP-EM.
inline SmmFit fit_map_em(const Matrix& Z, SmmParams init, const SmmPriors& priors, const SmmOptions& opt = {}) {
    opt.validate();
    require(init.K() <= Z.rows(), "smm_cluster", "K exceeds the number of points");
    SmmFit fit;
    fit.params = std::move(init);
    double obj = map_objective(Z, fit.params, priors);
    fit.trace.push_back(obj);
    for (int it = 0; it < opt.max_iter; ++it) {
        EStepStats s = e_step(Z, fit.params);
        fit.params = m_step(Z, s, priors, fit.params, opt);
        const double next = map_objective(Z, fit.params, priors);
        require(std::isfinite(next), "smm_cluster", "MAP objective is not finite", ErrorKind::numeric);
        fit.trace.push_back(next);
        fit.iterations = it + 1;
        const bool done = next - obj < opt.tol;
        obj = next;
        if (done) {
            fit.converged = true;
            break;
        }
    }
    fit.stats = e_step(Z, fit.params);
    return fit;
}

inline SmmFit fit_map_em(const Matrix& Z, Index K, const SmmPriors& priors, std::uint64_t seed,
                         const SmmOptions& opt = {}) {
    opt.validate();
    return fit_map_em(Z, init_smm(Z, K, seed, opt), priors, opt);
}

// ---------------------------------------------------------------------------
// Differentiable scores for end-to-end training
// ---------------------------------------------------------------------------

/// Unconstrained parameterization: pi = softmax(logits); Sigma = L L^T with L lower
/// triangular and diag(L) = exp(raw diagonal); v = v_min + (v_max - v_min) * sigmoid(raw).
struct SmmRaw {
    ad::ParamSet params;  // smm.logits (1 x K), smm.means (K x D), smm.chol (K x D*D), smm.dof (1 x K)
    double v_min = 1.0;
    double v_max = 200.0;
};

inline SmmRaw to_raw(const SmmParams& p, double v_min, double v_max) {
    const Index K = p.K(), D = p.D();
    SmmRaw r;
    r.v_min = v_min;
    r.v_max = v_max;
    Matrix logits(1, K), chol = Matrix::Zero(K, D * D), dof(1, K);
    const double span = v_max - v_min;
    for (Index k = 0; k < K; ++k) {
        logits(0, k) = std::log(std::max(p.pi(k), 1e-300));
        Matrix L = checked_llt(p.cov[static_cast<std::size_t>(k)]).matrixL();
        for (Index a = 0; a < D; ++a)
            for (Index b = 0; b <= a; ++b) chol(k, a * D + b) = a == b ? std::log(L(a, a)) : L(a, b);
        const double u = std::clamp((p.dof(k) - v_min) / span, 1e-9, 1.0 - 1e-9);
        dof(0, k) = std::log(u / (1.0 - u));
    }
    r.params.add("smm.logits", std::move(logits));
    r.params.add("smm.means", p.means);
    r.params.add("smm.chol", std::move(chol));
    r.params.add("smm.dof", std::move(dof));
    return r;
}

namespace detail {
inline Matrix chol_from_raw(const Matrix& chol, Index k, Index D) {
    Matrix L = Matrix::Zero(D, D);
    for (Index a = 0; a < D; ++a)
        for (Index b = 0; b <= a; ++b) L(a, b) = a == b ? std::exp(chol(k, a * D + b)) : chol(k, a * D + b);
    return L;
}
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
}  // namespace detail

inline SmmParams from_raw(const SmmRaw& r) {
    const Matrix& logits = r.params["smm.logits"].value;
    const Matrix& chol = r.params["smm.chol"].value;
    const Index K = logits.cols(), D = r.params["smm.means"].value.cols();
    SmmParams p;
    p.pi = ad::softmax_rows_value(logits).row(0).transpose();
    p.means = r.params["smm.means"].value;
    p.dof.resize(K);
    for (Index k = 0; k < K; ++k) {
        Matrix L = detail::chol_from_raw(chol, k, D);
        p.cov.push_back(L * L.transpose());
        p.dof(k) = r.v_min + (r.v_max - r.v_min) * detail::sigmoid(r.params["smm.dof"].value(0, k));
    }
    return p;
}

/// log(pi_k phi_k(z_i)) as an N x K tape variable, differentiable in Z and every raw parameter.
inline ad::Var smm_log_q(const ad::Var& Z, const ad::Var& logits, const ad::Var& means, const ad::Var& chol,
                         const ad::Var& dof_raw, double v_min, double v_max) {
    const Index N = Z.rows(), D = Z.cols(), K = logits.cols();
    require(means.rows() == K && means.cols() == D && chol.rows() == K && chol.cols() == D * D &&
                dof_raw.cols() == K,
            "smm_cluster", "smm_log_q: parameter shapes do not match");
    const double Dd = static_cast<double>(D);
    Matrix log_pi = ad::softmax_rows_value(logits.value()).array().log();
    Matrix out(N, K), W(N, K), delta(N, K);
    std::vector<Matrix> Ls, Us, Ys;  // per component: L, U = L^-1 R^T (D x N), Y = L^-T U
    Vector v(K);
    for (Index k = 0; k < K; ++k) {
        Matrix L = detail::chol_from_raw(chol.value(), k, D);
        v(k) = v_min + (v_max - v_min) * detail::sigmoid(dof_raw.value()(0, k));
        Matrix U = (Z.value().rowwise() - means.value().row(k)).transpose();
        L.triangularView<Eigen::Lower>().solveInPlace(U);
        Matrix Y = U;
        L.transpose().triangularView<Eigen::Upper>().solveInPlace(Y);
        const double c = log_t_normalizer(v(k), D) - L.diagonal().array().log().sum() + log_pi(0, k);
        for (Index i = 0; i < N; ++i) {
            const double d = U.col(i).squaredNorm();
            delta(i, k) = d;
            W(i, k) = (v(k) + Dd) / (v(k) + d);
            out(i, k) = c - (v(k) + Dd) / 2.0 * std::log1p(d / v(k));
        }
        Ls.push_back(std::move(L));
        Us.push_back(std::move(U));
        Ys.push_back(std::move(Y));
    }
    Matrix pi = log_pi.array().exp();
    return Z.tape()->record(
        std::move(out), {Z, logits, means, chol, dof_raw},
        [=](ad::Tape& t, const Matrix& g) {
            using boost::math::digamma;
            Matrix gZ = Matrix::Zero(N, D), gM(K, D), gC = Matrix::Zero(K, D * D), gV(1, K);
            for (Index k = 0; k < K; ++k) {
                const Matrix& L = Ls[static_cast<std::size_t>(k)];
                const Matrix& U = Us[static_cast<std::size_t>(k)];
                const Matrix& Y = Ys[static_cast<std::size_t>(k)];
                Vector gw = g.col(k).cwiseProduct(W.col(k));  // N
                Matrix GY = Y * gw.asDiagonal();                 // D x N, columns g w y
                gZ -= GY.transpose();
                gM.row(k) = GY.rowwise().sum().transpose();
                Matrix gL = GY * U.transpose();  // sum_i g w y u^T
                const double gsum = g.col(k).sum();
                for (Index a = 0; a < D; ++a) {
                    gL(a, a) -= gsum / L(a, a);
                    for (Index b = 0; b <= a; ++b)
                        gC(k, a * D + b) = a == b ? gL(a, a) * L(a, a) : gL(a, b);
                }
                const double vk = v(k);
                const double base = 0.5 * digamma((vk + Dd) / 2.0) - 0.5 * digamma(vk / 2.0) - Dd / (2.0 * vk);
                double acc = 0;
                for (Index i = 0; i < N; ++i) {
                    const double d = delta(i, k);
                    acc += g(i, k) * (base - 0.5 * std::log1p(d / vk) + (vk + Dd) * d / (2.0 * vk * (vk + d)));
                }
                gV(0, k) = acc * (vk - v_min) * (v_max - vk) / (v_max - v_min);
            }
            RowVector gcol = g.colwise().sum();
            Matrix gLogit = gcol - pi * g.sum();
            t.accumulate(Z, gZ);
            t.accumulate(means, gM);
            t.accumulate(chol, gC);
            t.accumulate(dof_raw, gV);
            t.accumulate(logits, gLogit);
        });
}

inline ad::Var smm_log_q(ad::Tape& tape, const ad::Var& Z, SmmRaw& raw, bool trainable = true) {
    auto bind = [&](const char* name) {
        ad::Parameter& p = raw.params[name];
        return trainable ? tape.param(p) : tape.constant(p.value);
    };
    return smm_log_q(Z, bind("smm.logits"), bind("smm.means"), bind("smm.chol"), bind("smm.dof"), raw.v_min,
                     raw.v_max);
}

// ---------------------------------------------------------------------------
// SMM1 checkpoint and CSV export
// ---------------------------------------------------------------------------

inline void write_smm(std::ostream& os, const SmmParams& p) {
    const Index K = p.K(), D = p.D();
    os << "SMM1 " << K << ' ' << D << '\n';
    for (Index k = 0; k < K; ++k) binio::put_f64(os, p.pi(k));
    binio::put_matrix(os, p.means);
    for (Index k = 0; k < K; ++k) {
        Matrix L = checked_llt(p.cov[static_cast<std::size_t>(k)]).matrixL();
        binio::put_matrix(os, L);
    }
    for (Index k = 0; k < K; ++k) binio::put_f64(os, p.dof(k));
    require(static_cast<bool>(os), "smm_cluster", "write failed", ErrorKind::io);
}

inline SmmParams read_smm(std::istream& is, const std::string& origin = "SMM1 stream") {
    std::string line;
    require(static_cast<bool>(std::getline(is, line)), "smm_cluster", origin + ": missing header", ErrorKind::io);
    std::istringstream hs(line);
    std::string magic;
    long long K = 0, D = 0;
    hs >> magic >> K >> D;
    require(magic == "SMM1" && hs && K >= 1 && D >= 1, "smm_cluster", origin + ": bad SMM1 header", ErrorKind::io);
    SmmParams p;
    p.pi.resize(K);
    for (Index k = 0; k < K; ++k) p.pi(k) = binio::get_f64(is, origin);
    p.means = binio::get_matrix(is, K, D, origin);
    for (Index k = 0; k < K; ++k) {
        Matrix L = binio::get_matrix(is, D, D, origin);
        p.cov.push_back(L * L.transpose());
    }
    p.dof.resize(K);
    for (Index k = 0; k < K; ++k) p.dof(k) = binio::get_f64(is, origin);
    return p;
}

inline void write_smm(const std::string& path, const SmmParams& p) {
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), "smm_cluster", "cannot open " + path, ErrorKind::io);
    write_smm(os, p);
}

inline SmmParams read_smm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), "smm_cluster", "cannot open " + path, ErrorKind::io);
    return read_smm(is, path);
}

/// Plain CSV, one row per matrix row, shortest round-trip-safe decimal form.
inline void write_csv(std::ostream& os, const Matrix& m) {
    char buf[32];
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", m(i, j));
            if (j) os << ',';
            os << buf;
        }
        os << '\n';
    }
}

inline void write_csv(const std::string& path, const Matrix& m) {
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), "smm_cluster", "cannot open " + path, ErrorKind::io);
    write_csv(os, m);
    require(static_cast<bool>(os), "smm_cluster", "write failed: " + path, ErrorKind::io);
}

/// Reads a rectangular numeric CSV written by write_csv.
inline Matrix read_csv(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), "cli", "cannot open " + path, ErrorKind::io);
    std::vector<double> vals;
    Index rows = 0, cols = -1;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        Index n = 0;
        std::size_t pos = 0;
        while (pos <= line.size()) {
            const std::size_t end = std::min(line.find(',', pos), line.size());
            const std::string cell = line.substr(pos, end - pos);
            char* stop = nullptr;
            const double v = std::strtod(cell.c_str(), &stop);
            require(!cell.empty() && stop == cell.c_str() + cell.size(), "cli",
                    path + ": bad number '" + cell + "' on row " + std::to_string(rows + 1), ErrorKind::io);
            vals.push_back(v);
            ++n;
            pos = end + 1;
        }
        require(cols < 0 || n == cols, "cli", path + ": ragged row " + std::to_string(rows + 1), ErrorKind::io);
        cols = n;
        ++rows;
    }
    require(rows > 0, "cli", path + ": empty CSV", ErrorKind::io);
    return Eigen::Map<Matrix>(vals.data(), rows, cols);
}

}  // namespace darlc
