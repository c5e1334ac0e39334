#pragma once

// k-means++ seeding and Lloyd iterations. Used to initialize the mixture and as
// the raw-pixel baseline.

#include "darlc/common.hpp"

#include <limits>
#include <random>
#include <vector>

namespace darlc {

struct KMeansResult {
    Matrix centers;  // K x D
    std::vector<int> labels;
    double inertia = 0;
};

inline Matrix kmeans_pp(const Matrix& X, Index K, std::mt19937_64& rng) {
    const Index N = X.rows();
    require(K >= 1 && K <= N, "smm_cluster", "k-means++ needs 1 <= K <= N");
    Matrix C(K, X.cols());
    std::uniform_int_distribution<Index> pick(0, N - 1);
    C.row(0) = X.row(pick(rng));
    Vector d2 = (X.rowwise() - C.row(0)).rowwise().squaredNorm();
    for (Index k = 1; k < K; ++k) {
        const double total = d2.sum();
        Index chosen = 0;
        if (total <= 0) {
            chosen = pick(rng);
        } else {
            double r = std::uniform_real_distribution<double>(0.0, total)(rng);
            for (chosen = 0; chosen < N - 1; ++chosen) {
                r -= d2(chosen);
                if (r <= 0) break;
            }
        }
        C.row(k) = X.row(chosen);
        d2 = d2.cwiseMin((X.rowwise() - C.row(k)).rowwise().squaredNorm());
    }
    return C;
}

inline double assign_nearest(const Matrix& X, const Matrix& C, std::vector<int>& labels) {
    labels.assign(static_cast<std::size_t>(X.rows()), 0);
    double inertia = 0;
    for (Index i = 0; i < X.rows(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (Index k = 0; k < C.rows(); ++k) {
            const double d = (X.row(i) - C.row(k)).squaredNorm();
            if (d < best) {
                best = d;
                labels[static_cast<std::size_t>(i)] = static_cast<int>(k);
            }
        }
        inertia += best;
    }
    return inertia;
}

/// Best of `n_init` seeded k-means++ / Lloyd runs by inertia.
inline KMeansResult kmeans(const Matrix& X, Index K, std::uint64_t seed, int n_init = 10, int max_iter = 300) {
    require(n_init >= 1 && max_iter >= 1, "smm_cluster", "k-means needs n_init, max_iter >= 1");
    KMeansResult best;
    best.inertia = std::numeric_limits<double>::infinity();
    for (int run = 0; run < n_init; ++run) {
        std::mt19937_64 rng(split_seed(seed, static_cast<std::uint64_t>(run)));
        KMeansResult r;
        r.centers = kmeans_pp(X, K, rng);
        r.inertia = assign_nearest(X, r.centers, r.labels);
        for (int it = 0; it < max_iter; ++it) {
            Matrix sums = Matrix::Zero(K, X.cols());
            Vector counts = Vector::Zero(K);
            for (Index i = 0; i < X.rows(); ++i) {
                sums.row(r.labels[static_cast<std::size_t>(i)]) += X.row(i);
                counts(r.labels[static_cast<std::size_t>(i)]) += 1;
            }
            for (Index k = 0; k < K; ++k)
                if (counts(k) > 0) r.centers.row(k) = sums.row(k) / counts(k);
            std::vector<int> prev = r.labels;
            r.inertia = assign_nearest(X, r.centers, r.labels);
            if (prev == r.labels) break;
        }
        if (r.inertia < best.inertia) best = std::move(r);
    }
    return best;
}

}  // namespace darlc
