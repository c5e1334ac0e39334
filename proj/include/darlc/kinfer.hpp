#pragma once

// Seeding similarity graph and cluster-count estimation from the eigengap of
// the boosted normalized Laplacian D^-1/2 (L + L^2) D^-1/2.

#include "darlc/common.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <numeric>
#include <vector>

namespace darlc {

/// Cosine similarity of per-image mean-centred rows, negatives clamped to 0, each row
/// sparsified to its top_k off-diagonal entries, then symmetrized by max. A row left with
/// zero degree gets a unit self-loop so the graph stays valid.
inline Matrix seed_similarity(const Matrix& X, Index top_k = 15) {
    const Index N = X.rows();
    require(N >= 2 && top_k >= 1, "joint_trainer", "seed similarity needs N >= 2 and top_k >= 1");
    Matrix U = X.colwise() - X.rowwise().mean();
    for (Index i = 0; i < N; ++i) {
        const double n = U.row(i).norm();
        if (n > 0) U.row(i) /= n;
    }
    Matrix C = (U * U.transpose()).cwiseMax(0.0);
    C.diagonal().setZero();
    Matrix A = Matrix::Zero(N, N);
    std::vector<Index> order(static_cast<std::size_t>(N));
    const auto keep = static_cast<std::ptrdiff_t>(std::min(top_k, N - 1));
    for (Index i = 0; i < N; ++i) {
        std::iota(order.begin(), order.end(), Index{0});
        std::partial_sort(order.begin(), order.begin() + keep, order.end(), [&](Index a, Index b) {
            return C(i, a) != C(i, b) ? C(i, a) > C(i, b) : a < b;
        });
        for (std::ptrdiff_t r = 0; r < keep; ++r) A(i, order[static_cast<std::size_t>(r)]) = C(i, order[static_cast<std::size_t>(r)]);
    }
    A = A.cwiseMax(A.transpose()).eval();
    for (Index i = 0; i < N; ++i)
        if (A.row(i).sum() <= 0) A(i, i) = 1.0;
    return A;
}

inline void validate_similarity(const Matrix& S, const char* module) {
    require(S.rows() == S.cols() && S.rows() >= 1, module, "similarity matrix must be square");
    require(S.allFinite() && S.minCoeff() >= 0.0, module, "similarity must be finite and non-negative");
    require((S - S.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, S.cwiseAbs().maxCoeff()), module,
            "similarity must be symmetric");
    require(S.rowwise().sum().minCoeff() > 0.0, module, "similarity has a zero-degree row");
}

struct EigengapResult {
    Vector eigenvalues;   // ascending
    Index gap_index = 0;  // 1-based i* of the selected gap lambda_(i*) - lambda_(i*-1)
    Index k = 0;          // reported cluster count, i* - 1
    Index zero_count = 0; // eigenvalues <= zero_tol
    Index literal_gap_index = 0;  // argmax over every i >= 2, for reference
};

inline Matrix boosted_laplacian(const Matrix& S) {
    validate_similarity(S, "k_inference");
    Vector d = S.rowwise().sum();
    Matrix L = -S;
    L.diagonal() += d;
    Matrix Lp = L + L * L;
    Vector inv = d.array().rsqrt();
    Matrix out = inv.asDiagonal() * Lp * inv.asDiagonal();
    return 0.5 * (out + out.transpose());
}

/// With several (numerically) zero eigenvalues the graph is disconnected and their count is
/// reported directly. Otherwise the largest gap is searched among the first k_max + 1 values:
/// the L^2 term scales the upper spectrum with the degrees, so an unrestricted argmax tends to
/// land on a high-degree outlier instead of the cluster boundary.
inline EigengapResult infer_k(const Matrix& S, Index k_max = 10, double zero_tol = 1e-9) {
    const Index N = S.rows();
    require(N >= 2, "k_inference", "need at least 2 nodes");
    require(k_max >= 1, "k_inference", "k_max must be >= 1", ErrorKind::config);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(boosted_laplacian(S)),
                                                      Eigen::EigenvaluesOnly);
    require(es.info() == Eigen::Success, "k_inference", "eigendecomposition failed", ErrorKind::numeric);
    EigengapResult r;
    r.eigenvalues = es.eigenvalues();
    const double scale = std::max(1.0, r.eigenvalues.cwiseAbs().maxCoeff());
    for (Index i = 0; i < N; ++i)
        if (r.eigenvalues(i) <= zero_tol * scale) ++r.zero_count;

    auto argmax_gap = [&](Index lo, Index hi) {  // 1-based i in [lo, hi]
        Index best = lo;
        double gap = -1;
        for (Index i = lo; i <= hi; ++i) {
            const double g = r.eigenvalues(i - 1) - r.eigenvalues(i - 2);
            if (g > gap) {
                gap = g;
                best = i;
            }
        }
        return best;
    };
    r.literal_gap_index = argmax_gap(2, N);
    if (r.zero_count >= 2 && r.zero_count < N) {
        r.gap_index = r.zero_count + 1;
    } else {
        r.gap_index = argmax_gap(2, std::min(N, k_max + 1));
    }
    r.k = r.gap_index - 1;
    return r;
}

}  // namespace darlc
