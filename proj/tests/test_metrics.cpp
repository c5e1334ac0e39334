#include "darlc/metrics.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

using namespace darlc;

namespace {

Matrix column(std::initializer_list<double> v) {
    Matrix m(static_cast<Index>(v.size()), 1);
    Index i = 0;
    for (double x : v) m(i++, 0) = x;
    return m;
}

// Unadjusted pair counting over all i < j.
double brute_ari(const std::vector<int>& a, const std::vector<int>& b) {
    const std::size_t n = a.size();
    double both = 0, in_a = 0, in_b = 0, pairs = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const bool sa = a[i] == a[j], sb = b[i] == b[j];
            both += sa && sb;
            in_a += sa;
            in_b += sb;
            pairs += 1;
        }
    const double expected = in_a * in_b / pairs;
    return (both - expected) / (0.5 * (in_a + in_b) - expected);
}

double brute_nmi(const std::vector<int>& a, const std::vector<int>& b) {
    const double n = static_cast<double>(a.size());
    std::map<int, double> pa, pb;
    std::map<std::pair<int, int>, double> pab;
    for (std::size_t i = 0; i < a.size(); ++i) {
        pa[a[i]] += 1 / n;
        pb[b[i]] += 1 / n;
        pab[{a[i], b[i]}] += 1 / n;
    }
    double ha = 0, hb = 0, mi = 0;
    for (auto& [k, p] : pa) ha -= p * std::log(p);
    for (auto& [k, p] : pb) hb -= p * std::log(p);
    for (auto& [k, p] : pab) mi += p * std::log(p / (pa[k.first] * pb[k.second]));
    return ha > 0 && hb > 0 ? mi / std::sqrt(ha * hb) : 0.0;
}

std::vector<int> random_labels(std::size_t n, int k, std::mt19937_64& g) {
    std::vector<int> out(n);
    for (auto& v : out) v = static_cast<int>(g() % static_cast<unsigned>(k));
    return out;
}

}  // namespace

TEST(Dbi, HandValueOnTwoIntervals) {
    EXPECT_NEAR(dbi(column({-1, 1, 3, 5}), {0, 0, 1, 1}), 0.5, 1e-12);
}

TEST(Dbi, SingletonClustersScoreZero) {
    EXPECT_EQ(dbi(column({0.0, 2.0}), {0, 1}), 0.0);
}

TEST(Dbi, DuplicatingPointsLeavesValueUnchanged) {
    std::mt19937_64 g(1);
    std::normal_distribution<double> n;
    Matrix Z(12, 3);
    for (Index k = 0; k < Z.size(); ++k) Z.data()[k] = n(g);
    std::vector<int> lab{0, 0, 0, 1, 1, 1, 2, 2, 2, 2, 1, 0};
    Matrix Z2(24, 3);
    Z2 << Z, Z;
    std::vector<int> lab2 = lab;
    lab2.insert(lab2.end(), lab.begin(), lab.end());
    for (Distance d : {Distance::euclidean, Distance::pearson})
        EXPECT_NEAR(dbi(Z2, lab2, d), dbi(Z, lab, d), 1e-12) << to_string(d);
}

TEST(Dbi, TranslationAndRotationInvariant) {
    std::mt19937_64 g(2);
    std::normal_distribution<double> n;
    Matrix Z(15, 4);
    for (Index k = 0; k < Z.size(); ++k) Z.data()[k] = n(g);
    std::vector<int> lab = random_labels(15, 3, g);
    lab[0] = 0, lab[1] = 1, lab[2] = 2;
    Matrix R(4, 4);
    for (Index k = 0; k < R.size(); ++k) R.data()[k] = n(g);
    Matrix Qm = Eigen::HouseholderQR<Matrix>(R).householderQ();
    RowVector shift = RowVector::LinSpaced(4, -3.0, 5.0);
    const double base = dbi(Z, lab);
    EXPECT_NEAR(dbi(Matrix(Z.rowwise() + shift), lab), base, 1e-10);
    EXPECT_NEAR(dbi(Matrix(Z * Qm), lab), base, 1e-10);
}

TEST(Dbi, PearsonVariantHandValue) {
    // within each cluster the rows are perfectly correlated with the centroid
    Matrix Z(4, 3);
    Z << 1, 2, 3, 2, 4, 6, 3, 2, 1, 6, 4, 2;
    // centroids (1.5,3,4.5) and (4.5,3,1.5): correlation -1, distance 2
    EXPECT_NEAR(dbi(Z, {0, 0, 1, 1}, Distance::pearson), 0.0, 1e-12);
    EXPECT_NEAR(pearson_distance(Z.row(0), Z.row(2)), 2.0, 1e-12);
    EXPECT_NEAR(pearson_distance(Z.row(0), Z.row(1)), 0.0, 1e-12);
}

TEST(Dbi, ErrorsOnDegenerateInput) {
    EXPECT_THROW(dbi(column({1, 1, 2, 0}), {0, 0, 1, 1}), Error);  // coincident centroids
    EXPECT_THROW(dbi(column({1, 2}), {0, 0}), Error);
    EXPECT_THROW(dbi(column({1, 2}), {0}), Error);
    EXPECT_EQ(parse_distance("pearson"), Distance::pearson);
    EXPECT_THROW(parse_distance("cosine"), Error);
}

TEST(NmiAri, IdenticalAndRenamedLabelings) {
    std::vector<int> a{0, 0, 1, 1, 2, 2, 2}, renamed{5, 5, -1, -1, 9, 9, 9};
    EXPECT_DOUBLE_EQ(nmi(a, a), 1.0);
    EXPECT_DOUBLE_EQ(ari(a, a), 1.0);
    EXPECT_NEAR(nmi(a, renamed), 1.0, 1e-12);
    EXPECT_NEAR(ari(renamed, a), 1.0, 1e-12);
}

TEST(NmiAri, CrossedLabelingsHandValues) {
    std::vector<int> a{0, 0, 1, 1}, b{0, 1, 0, 1};
    EXPECT_NEAR(ari(a, b), -0.5, 1e-12);
    EXPECT_NEAR(brute_ari(a, b), -0.5, 1e-12);
    EXPECT_NEAR(nmi(a, b), 0.0, 1e-12);
    EXPECT_NEAR(brute_nmi(a, b), 0.0, 1e-12);
}

TEST(NmiAri, MatchBruteForceOnRandomLabelings) {
    std::mt19937_64 g(3);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 5 + g() % 40;
        auto a = random_labels(n, 2 + static_cast<int>(g() % 4), g), b = random_labels(n, 2 + static_cast<int>(g() % 4), g);
        const double ha = brute_nmi(a, a), hb = brute_nmi(b, b);
        if (ha == 0 || hb == 0) continue;
        EXPECT_NEAR(nmi(a, b), brute_nmi(a, b), 1e-12);
        EXPECT_NEAR(ari(a, b), brute_ari(a, b), 1e-12);
        EXPECT_GE(nmi(a, b), 0.0);
        EXPECT_LE(nmi(a, b), 1.0);
        EXPECT_GE(ari(a, b), -1.0);
        EXPECT_LE(ari(a, b), 1.0);
        // permutation of the label names on one side
        std::vector<int> p = b;
        for (int& v : p) v = (v * 7 + 3) % 11;
        EXPECT_NEAR(nmi(a, p), nmi(a, b), 1e-12);
        EXPECT_NEAR(ari(p, a), ari(a, b), 1e-12);
    }
}

TEST(NmiAri, DegenerateCases) {
    EXPECT_EQ(nmi({1, 1, 1}, {0, 1, 2}), 0.0);
    EXPECT_THROW(nmi({1}, {1}), Error);
    EXPECT_THROW(ari({1, 2}, {1, 2, 3}), Error);
}

TEST(Sam, HandAnglesAndScaleInvariance) {
    RowVector u(3), v(3);
    u << 1, 2, 3;
    v << -2, 1, 0;
    EXPECT_NEAR(sam(u, u), 0.0, 1e-7);
    EXPECT_NEAR(sam(u, v), std::numbers::pi / 2, 1e-12);
    EXPECT_NEAR(sam(u, -u), std::numbers::pi, 1e-7);
    RowVector w(3);
    w << 0.3, -1, 4;
    EXPECT_NEAR(sam(2.5 * u, w), sam(u, w), 1e-12);
    EXPECT_THROW(sam(u, RowVector::Zero(3)), Error);
}

TEST(QualitySplit, IdenticalImagesAreHigh) {
    std::mt19937_64 g(4);
    std::normal_distribution<double> n;
    Matrix X(9, 50);
    for (Index k = 0; k < X.size(); ++k) X.data()[k] = n(g);
    X.row(1) = X.row(0);
    X.row(2) = 3.0 * X.row(0);
    auto q = cluster_quality_split(X, {0, 0, 0, 1, 1, 1, 2, 2, 2});
    EXPECT_NEAR(q.mean_sam[0], 0.0, 1e-7);
    EXPECT_EQ(q.high, std::vector<int>{0});
    EXPECT_EQ(q.medium, (std::vector<int>{1, 2}));
}

TEST(QualitySplit, RandomHighDimensionalVectorsNearRightAngle) {
    std::mt19937_64 g(5);
    std::normal_distribution<double> n;
    Matrix X(30, 2000);
    for (Index k = 0; k < X.size(); ++k) X.data()[k] = n(g);
    X.topRows(10) = X.row(0).replicate(10, 1) + 0.01 * X.middleRows(10, 10);
    std::vector<int> lab(30);
    for (Index i = 0; i < 30; ++i) lab[static_cast<std::size_t>(i)] = static_cast<int>(i / 10);
    auto q = cluster_quality_split(X, lab, 1.0);
    EXPECT_NEAR(q.mean_sam[1], std::numbers::pi / 2, 0.05);
    EXPECT_NEAR(q.mean_sam[2], std::numbers::pi / 2, 0.05);
    EXPECT_EQ(q.high, std::vector<int>{0});
    EXPECT_EQ(q.medium, (std::vector<int>{1, 2}));
    // default threshold is the median score; the median cluster itself lands in medium
    auto d = cluster_quality_split(X, lab);
    EXPECT_EQ(d.high, std::vector<int>{0});
}

TEST(QualitySplit, ThresholdPiMakesEveryClusterHigh) {
    std::mt19937_64 g(6);
    std::normal_distribution<double> n;
    Matrix X(12, 6);
    for (Index k = 0; k < X.size(); ++k) X.data()[k] = n(g);
    auto q = cluster_quality_split(X, {0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3}, std::numbers::pi);
    EXPECT_EQ(q.high.size(), 4u);
    EXPECT_TRUE(q.medium.empty());
}
