#pragma once

// Clustering evaluation: Davies-Bouldin (Euclidean / Pearson), NMI, ARI, and
// spectral-angle quality grouping.

#include "darlc/common.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace darlc {

enum class Distance { euclidean, pearson };

inline std::string to_string(Distance d) { return d == Distance::euclidean ? "euclidean" : "pearson"; }

inline Distance parse_distance(const std::string& s) {
    if (s == "euclidean") return Distance::euclidean;
    if (s == "pearson") return Distance::pearson;
    throw Error(ErrorKind::config, "metrics", "unknown distance '" + s + "'");
}

inline double pearson_distance(const RowVector& a, const RowVector& b) {
    require(a.size() == b.size() && a.size() >= 2, "metrics", "pearson distance needs equal lengths >= 2");
    RowVector ca = a.array() - a.mean(), cb = b.array() - b.mean();
    const double den = ca.norm() * cb.norm();
    require(den > 0, "metrics", "pearson distance undefined for a constant vector", ErrorKind::numeric);
    return 1.0 - ca.dot(cb) / den;
}

inline double distance(const RowVector& a, const RowVector& b, Distance kind) {
    return kind == Distance::euclidean ? (a - b).norm() : pearson_distance(a, b);
}

/// Maps arbitrary integer labels to 0..K-1 in order of first appearance.
inline std::vector<int> compact_labels(const std::vector<int>& labels, int* n_clusters = nullptr) {
    std::map<int, int> ids;
    std::vector<int> out;
    out.reserve(labels.size());
    for (int l : labels) out.push_back(ids.try_emplace(l, static_cast<int>(ids.size())).first->second);
    if (n_clusters) *n_clusters = static_cast<int>(ids.size());
    return out;
}

inline double dbi(const Matrix& Z, const std::vector<int>& labels, Distance kind = Distance::euclidean) {
    require(static_cast<Index>(labels.size()) == Z.rows(), "metrics", "dbi: one label per row is required");
    int K = 0;
    std::vector<int> lab = compact_labels(labels, &K);
    require(K >= 2, "metrics", "dbi needs at least 2 non-empty clusters");
    Matrix C = Matrix::Zero(K, Z.cols());
    Vector count = Vector::Zero(K);
    for (Index i = 0; i < Z.rows(); ++i) {
        C.row(lab[static_cast<std::size_t>(i)]) += Z.row(i);
        count(lab[static_cast<std::size_t>(i)]) += 1;
    }
    for (int k = 0; k < K; ++k) C.row(k) /= count(k);
    Vector width = Vector::Zero(K);
    for (Index i = 0; i < Z.rows(); ++i) {
        const int k = lab[static_cast<std::size_t>(i)];
        width(k) += distance(Z.row(i), C.row(k), kind);
    }
    width.array() /= count.array();
    double total = 0;
    for (int i = 0; i < K; ++i) {
        double worst = 0;
        for (int j = 0; j < K; ++j) {
            if (i == j) continue;
            const double dij = distance(C.row(i), C.row(j), kind);
            require(dij > 0, "metrics", "dbi undefined: coincident cluster centroids", ErrorKind::numeric);
            worst = std::max(worst, (width(i) + width(j)) / dij);
        }
        total += worst;
    }
    return total / K;
}

namespace detail {
struct Contingency {
    Matrix table;  // ka x kb
    Vector a, b;   // marginals
    double n = 0;
};

inline Contingency contingency(const std::vector<int>& la, const std::vector<int>& lb) {
    require(la.size() == lb.size() && la.size() >= 2, "metrics", "label vectors need equal lengths >= 2");
    int ka = 0, kb = 0;
    auto a = compact_labels(la, &ka);
    auto b = compact_labels(lb, &kb);
    Contingency c{Matrix::Zero(ka, kb), {}, {}, static_cast<double>(la.size())};
    for (std::size_t i = 0; i < a.size(); ++i) c.table(a[i], b[i]) += 1;
    c.a = c.table.rowwise().sum();
    c.b = c.table.colwise().sum().transpose();
    return c;
}

inline double comb2(double x) { return x * (x - 1.0) / 2.0; }

inline double entropy(const Vector& counts, double n) {
    double h = 0;
    for (Index k = 0; k < counts.size(); ++k)
        if (counts(k) > 0) h -= counts(k) / n * std::log(counts(k) / n);
    return h;
}
}  // namespace detail

/// Mutual information normalized by the geometric mean of the entropies; 0 if either is 0.
inline double nmi(const std::vector<int>& la, const std::vector<int>& lb) {
    auto c = detail::contingency(la, lb);
    const double ha = detail::entropy(c.a, c.n), hb = detail::entropy(c.b, c.n);
    if (ha <= 0 || hb <= 0) return 0.0;
    double mi = 0;
    for (Index i = 0; i < c.table.rows(); ++i)
        for (Index j = 0; j < c.table.cols(); ++j) {
            const double nij = c.table(i, j);
            if (nij > 0) mi += nij / c.n * std::log(c.n * nij / (c.a(i) * c.b(j)));
        }
    return std::clamp(mi / std::sqrt(ha * hb), 0.0, 1.0);
}

inline double ari(const std::vector<int>& la, const std::vector<int>& lb) {
    auto c = detail::contingency(la, lb);
    double sum_ij = 0, sum_a = 0, sum_b = 0;
    for (Index k = 0; k < c.table.size(); ++k) sum_ij += detail::comb2(c.table.data()[k]);
    for (Index k = 0; k < c.a.size(); ++k) sum_a += detail::comb2(c.a(k));
    for (Index k = 0; k < c.b.size(); ++k) sum_b += detail::comb2(c.b(k));
    const double expected = sum_a * sum_b / detail::comb2(c.n);
    const double max_index = 0.5 * (sum_a + sum_b);
    if (max_index == expected) return 1.0;  // both trivial partitions
    return (sum_ij - expected) / (max_index - expected);
}

/// Spectral angle between two non-zero vectors, in [0, pi].
inline double sam(const RowVector& u, const RowVector& v) {
    require(u.size() == v.size(), "metrics", "sam: length mismatch");
    const double nu = u.norm(), nv = v.norm();
    require(nu > 0 && nv > 0, "metrics", "sam undefined for a zero vector");
    return std::acos(std::clamp(u.dot(v) / (nu * nv), -1.0, 1.0));
}

struct QualitySplit {
    std::vector<int> high;     // cluster labels with mean SAM below the threshold
    std::vector<int> medium;
    std::map<int, double> mean_sam;
    double threshold = 0;
};

/// Mean pairwise SAM per cluster (pairs with a zero vector are skipped; singleton clusters score 0).
/// Without an explicit threshold the median of the per-cluster scores is used.
inline QualitySplit cluster_quality_split(const Matrix& images, const std::vector<int>& labels,
                                          std::optional<double> threshold = std::nullopt) {
    require(static_cast<Index>(labels.size()) == images.rows(), "metrics", "one label per image is required");
    std::map<int, std::vector<Index>> members;
    for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(static_cast<Index>(i));
    QualitySplit out;
    std::vector<double> scores;
    for (const auto& [k, idx] : members) {
        double total = 0;
        long pairs = 0;
        for (std::size_t a = 0; a < idx.size(); ++a)
            for (std::size_t b = a + 1; b < idx.size(); ++b) {
                if (images.row(idx[a]).squaredNorm() == 0 || images.row(idx[b]).squaredNorm() == 0) continue;
                total += sam(images.row(idx[a]), images.row(idx[b]));
                ++pairs;
            }
        out.mean_sam[k] = pairs ? total / static_cast<double>(pairs) : 0.0;
        scores.push_back(out.mean_sam[k]);
    }
    if (threshold) {
        out.threshold = *threshold;
    } else {
        std::sort(scores.begin(), scores.end());
        const std::size_t m = scores.size();
        out.threshold = m % 2 ? scores[m / 2] : 0.5 * (scores[m / 2 - 1] + scores[m / 2]);
    }
    for (const auto& [k, s] : out.mean_sam) (s < out.threshold ? out.high : out.medium).push_back(k);
    return out;
}

}  // namespace darlc
