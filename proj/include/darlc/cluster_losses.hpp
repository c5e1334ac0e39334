#pragma once

// Clustering-side objectives of the joint phase: Laplacian consistency with the
// seeding graph, mixture log-likelihood, cluster-size entropy, the sharpened
// target distribution and its KL term, and the epoch-level composite.

#include "darlc/kinfer.hpp"
#include "darlc/repr.hpp"

#include <cmath>
#include <vector>

namespace darlc {

/// I - D^-1/2 S D^-1/2.
inline Matrix normalized_laplacian(const Matrix& S) {
    validate_similarity(S, "joint_trainer");
    Vector inv = S.rowwise().sum().array().rsqrt();
    Matrix M = -(inv.asDiagonal() * S * inv.asDiagonal());
    M.diagonal().array() += 1.0;
    return M;
}

/// Tr(Z^T (I - D^-1/2 S D^-1/2) Z). Pass a precomputed normalized Laplacian to avoid rebuilding it.
inline ad::Var laplacian_loss_from(const ad::Var& Z, const Matrix& norm_lap) { return ad::trace_quadratic(Z, norm_lap); }

inline ad::Var laplacian_loss(const ad::Var& Z, const Matrix& S) {
    return laplacian_loss_from(Z, normalized_laplacian(S));
}

inline double laplacian_loss(const Matrix& Z, const Matrix& S) {
    Matrix M = normalized_laplacian(S);
    return (Z.transpose() * M * Z).trace();
}

/// sum_i log sum_k q_ik, from log-space scores.
inline ad::Var loglik_loss(const ad::Var& log_q) { return ad::sum(ad::logsumexp_rows(log_q)); }

inline double loglik_loss(const Matrix& q) {
    double total = 0;
    for (Index i = 0; i < q.rows(); ++i) {
        const double s = q.row(i).sum();
        require(s > 0, "joint_trainer", "loglik_loss: all-zero row " + std::to_string(i), ErrorKind::numeric);
        total += std::log(s);
    }
    return total;
}

/// Cluster mass fractions J_k = mean_i resp_ik.
inline RowVector cluster_fractions(const Matrix& resp) { return resp.colwise().mean(); }

/// sum_k -J_k log J_k over clusters with J_k <= upsilon; larger clusters are exempt (J := 1).
inline double size_loss(const RowVector& J, double upsilon) {
    require(upsilon > 0 && upsilon <= 1, "joint_trainer", "upsilon must lie in (0, 1]", ErrorKind::config);
    double v = 0;
    for (Index k = 0; k < J.size(); ++k)
        if (J(k) <= upsilon && J(k) > 0) v -= J(k) * std::log(J(k));
    return v;
}

inline double size_loss(const Matrix& resp, double upsilon) { return size_loss(RowVector(cluster_fractions(resp)), upsilon); }

/// Differentiable form on log-space scores (responsibilities are their row softmax).
inline ad::Var size_loss(const ad::Var& log_q, double upsilon) {
    require(upsilon > 0 && upsilon <= 1, "joint_trainer", "upsilon must lie in (0, 1]", ErrorKind::config);
    ad::Tape& tape = *log_q.tape();
    ad::Var resp = ad::softmax_rows(log_q);
    ad::Var J = ad::scale(ad::matmul(tape.constant(Matrix::Ones(1, log_q.rows())), resp),
                          1.0 / static_cast<double>(log_q.rows()));
    const RowVector jv = J.value().row(0);
    return tape.record(Matrix::Constant(1, 1, size_loss(jv, upsilon)), {J}, [J, jv, upsilon](ad::Tape& t, const Matrix& g) {
        Matrix gj = Matrix::Zero(1, jv.size());
        for (Index k = 0; k < jv.size(); ++k)
            if (jv(k) <= upsilon && jv(k) > 0) gj(0, k) = -(std::log(jv(k)) + 1.0) * g(0, 0);
        t.accumulate(J, gj);
    });
}

/// p_ik proportional to q_ik^2 / f_k with soft frequencies f_k = sum_i q_ik (floored at eps).
inline Matrix target_distribution(const Matrix& Q, double eps = 1e-12) {
    RowVector f = Q.colwise().sum().cwiseMax(eps);
    Matrix P = Q.array().square().rowwise() / f.array();
    for (Index i = 0; i < P.rows(); ++i) {
        const double s = P.row(i).sum();
        require(s > 0, "joint_trainer", "target_distribution: zero row", ErrorKind::numeric);
        P.row(i) /= s;
    }
    return P;
}

/// sum_i sum_k p_ik log(p_ik / q_ik), with q clamped at eps.
inline double kl_loss(const Matrix& P, const Matrix& Q, double eps = 1e-12) {
    require(P.rows() == Q.rows() && P.cols() == Q.cols(), "joint_trainer", "kl_loss: shape mismatch");
    double v = 0;
    for (Index k = 0; k < P.size(); ++k) {
        const double p = P.data()[k];
        if (p > 0) v += p * (std::log(p) - std::log(std::max(Q.data()[k], eps)));
    }
    return v;
}

/// Differentiable in the scores: Q is the row softmax of log_q, so log Q never underflows.
inline ad::Var kl_loss(const Matrix& P, const ad::Var& log_q) {
    require(P.rows() == log_q.rows() && P.cols() == log_q.cols(), "joint_trainer", "kl_loss: shape mismatch");
    double ent = 0;
    for (Index k = 0; k < P.size(); ++k)
        if (P.data()[k] > 0) ent += P.data()[k] * std::log(P.data()[k]);
    ad::Tape& tape = *log_q.tape();
    ad::Var cross = ad::sum(ad::mul(tape.constant(P), ad::log_softmax_rows(log_q)));
    return ad::add_scalar(ad::scale(cross, -1.0), ent);
}

/// eta * L_lap + (1 - eta) * UWL(-L_ll, -L_size, L_rec).
inline ad::Var compose_L1(const ad::Var& lap, const ad::Var& ll, const ad::Var& size, const ad::Var& rec, double eta,
                          const ad::Var& log_sigma) {
    require(eta >= 0 && eta <= 1, "joint_trainer", "eta must lie in [0, 1]", ErrorKind::config);
    ad::Var u = uwl({ad::scale(ll, -1.0), ad::scale(size, -1.0), rec}, log_sigma);
    return ad::add(ad::scale(lap, eta), ad::scale(u, 1.0 - eta));
}

inline double compose_L1(double lap, double ll, double size, double rec, double eta, const std::vector<double>& sigma) {
    require(eta >= 0 && eta <= 1, "joint_trainer", "eta must lie in [0, 1]", ErrorKind::config);
    return eta * lap + (1.0 - eta) * uwl({-ll, -size, rec}, sigma);
}

}  // namespace darlc
