#include "darlc/cluster_losses.hpp"
#include "darlc/gradcheck.hpp"
#include "darlc/optim.hpp"
#include "darlc/repr.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace darlc;

namespace {

Matrix randn(Index r, Index c, std::mt19937_64& g, double sd = 1.0) {
    std::normal_distribution<double> n(0.0, sd);
    Matrix m(r, c);
    for (Index k = 0; k < m.size(); ++k) m.data()[k] = n(g);
    return m;
}

}  // namespace

TEST(GradCheck, SumOfSquares) {
    ad::ParamSet ps;
    Matrix x(1, 3);
    x << 1, 2, 3;
    ps.add("x", x);
    auto fn = [&](ad::Tape& t) { return ad::sum(ad::square(t.param(ps["x"]))); };
    ad::analytic_gradient(fn, ps);
    Matrix expected(1, 3);
    expected << 2, 4, 6;
    EXPECT_LT((ps["x"].grad - expected).cwiseAbs().maxCoeff(), 1e-12);
    auto r = ad::grad_check(fn, ps);
    EXPECT_TRUE(r.valid);
    EXPECT_LT(r.worst, 1e-8);
}

TEST(GradCheck, ConstantLossHasZeroGradient) {
    ad::ParamSet ps;
    ps.add("x", Matrix::Constant(2, 2, 0.3));
    auto r = ad::grad_check([&](ad::Tape& t) {
        t.param(ps["x"]);
        return t.scalar(4.0);
    }, ps);
    EXPECT_TRUE(r.valid);
    EXPECT_EQ(r.worst, 0.0);
    EXPECT_EQ(ps["x"].grad.cwiseAbs().maxCoeff(), 0.0);
}

TEST(GradCheck, ContrastiveLossOnFourEmbeddings) {
    std::mt19937_64 g(7);
    ad::ParamSet ps;
    ps.add("e", randn(4, 6, g));
    ps.add("eb", randn(4, 6, g));
    auto r = ad::grad_check([&](ad::Tape& t) { return contrastive_loss(t.param(ps["e"]), t.param(ps["eb"]), 0.5); },
                            ps, 1e-5);
    EXPECT_TRUE(r.valid);
    EXPECT_LT(r.worst, 1e-4);
}

TEST(GradCheck, NonFiniteLossIsFlagged) {
    ad::ParamSet ps;
    ps.add("x", Matrix::Constant(1, 1, -1.0));
    auto r = ad::grad_check([&](ad::Tape& t) { return ad::log(t.param(ps["x"])); }, ps);
    EXPECT_FALSE(r.valid);
    EXPECT_FALSE(r.diagnostic.empty());
}

TEST(GradCheck, EpsilonOutsideRangeIsRejected) {
    ad::ParamSet ps;
    ps.add("x", Matrix::Ones(1, 1));
    auto fn = [&](ad::Tape& t) { return ad::sum(t.param(ps["x"])); };
    EXPECT_THROW(ad::grad_check(fn, ps, 1e-2), Error);
    EXPECT_THROW(ad::grad_check(fn, ps, 1e-9), Error);
}

// Every primitive on a small random instance.
TEST(GradCheck, Primitives) {
    std::mt19937_64 g(3);
    ad::ParamSet ps;
    ps.add("a", randn(3, 4, g));
    ps.add("b", randn(4, 2, g));
    ps.add("row", randn(1, 4, g));
    ps.add("pos", Matrix::Constant(3, 4, 0.7) + randn(3, 4, g, 0.1));
    ps.add("gamma", randn(1, 4, g));
    ps.add("beta", randn(1, 4, g));
    const Matrix W = randn(3, 4, g);
    auto weighted = [&](const ad::Var& v, const Matrix& w) { return ad::sum(ad::mul(v, v.tape()->constant(w))); };
    struct Case {
        const char* name;
        ad::LossFn fn;
    };
    std::vector<Case> cases{
        {"matmul", [&](ad::Tape& t) { return ad::sum(ad::square(ad::matmul(t.param(ps["a"]), t.param(ps["b"])))); }},
        {"add_row+mul_row",
         [&](ad::Tape& t) {
             return weighted(ad::mul_row(ad::add_row(t.param(ps["a"]), t.param(ps["row"])), t.param(ps["row"])), W);
         }},
        {"selu", [&](ad::Tape& t) { return weighted(ad::selu(t.param(ps["a"])), W); }},
        {"gelu", [&](ad::Tape& t) { return weighted(ad::gelu(t.param(ps["a"])), W); }},
        {"leaky_relu", [&](ad::Tape& t) { return weighted(ad::leaky_relu(t.param(ps["a"]), 0.2), W); }},
        {"exp+log", [&](ad::Tape& t) { return weighted(ad::log(ad::add_scalar(ad::exp(t.param(ps["a"])), 1.0)), W); }},
        {"softplus", [&](ad::Tape& t) { return weighted(ad::softplus(t.param(ps["a"])), W); }},
        {"softmax_rows", [&](ad::Tape& t) { return weighted(ad::softmax_rows(t.param(ps["a"])), W); }},
        {"log_softmax_rows", [&](ad::Tape& t) { return weighted(ad::log_softmax_rows(t.param(ps["a"])), W); }},
        {"logsumexp_rows", [&](ad::Tape& t) { return ad::sum(ad::logsumexp_rows(t.param(ps["a"]))); }},
        {"layer_norm",
         [&](ad::Tape& t) {
             return weighted(ad::layer_norm(t.param(ps["a"]), t.param(ps["gamma"]), t.param(ps["beta"])), W);
         }},
        {"batch_normalize", [&](ad::Tape& t) { return weighted(ad::batch_normalize(t.param(ps["a"]), 1e-9), W); }},
        {"transpose+slices",
         [&](ad::Tape& t) {
             ad::Var a = t.param(ps["a"]);
             return ad::add(ad::sum(ad::square(ad::slice_rows(a, 1, 2))),
                            ad::sum(ad::square(ad::slice_cols(ad::transpose(a), 0, 2))));
         }},
        {"sum_row_norms", [&](ad::Tape& t) { return ad::sum_row_norms(t.param(ps["pos"])); }},
        {"trace_quadratic",
         [&](ad::Tape& t) {
             Matrix M = W * W.transpose();
             return ad::trace_quadratic(t.param(ps["a"]), M);
         }},
    };
    for (const auto& c : cases) {
        auto r = ad::grad_check(c.fn, ps);
        EXPECT_TRUE(r.valid) << c.name;
        EXPECT_LT(r.worst, 1e-6) << c.name;
    }
}

TEST(GradCheck, MultiheadAttentionAndPooling) {
    std::mt19937_64 g(11);
    const Index T = 4, B = 2, D = 6, H = 2;
    ad::ParamSet ps;
    ps.add("qkv", randn(B * T, 3 * D, g));
    const Matrix W = randn(B, D, g);
    auto r = ad::grad_check([&](ad::Tape& t) {
        ad::Var att = ad::multihead_attention(t.param(ps["qkv"]), T, H);
        return ad::sum(ad::mul(ad::mean_pool(att, T), t.constant(W)));
    }, ps);
    EXPECT_TRUE(r.valid);
    EXPECT_LT(r.worst, 1e-6);
}

// grad(a L1 + b L2) = a grad(L1) + b grad(L2)
TEST(Gradients, AccumulationIsLinear) {
    std::mt19937_64 g(5);
    ad::ParamSet ps;
    ps.add("z", randn(5, 3, g));
    Matrix S = randn(5, 5, g).cwiseAbs();
    S = (S + S.transpose()).eval();
    const double a = 0.7, b = -1.9;
    auto l1 = [&](ad::Tape& t) { return laplacian_loss(t.param(ps["z"]), S); };
    auto l2 = [&](ad::Tape& t) { return ad::sum(ad::logsumexp_rows(t.param(ps["z"]))); };
    ad::analytic_gradient(l1, ps);
    Matrix g1 = ps["z"].grad;
    ad::analytic_gradient(l2, ps);
    Matrix g2 = ps["z"].grad;
    ad::analytic_gradient([&](ad::Tape& t) { return ad::add(ad::scale(l1(t), a), ad::scale(l2(t), b)); }, ps);
    EXPECT_LT((ps["z"].grad - (a * g1 + b * g2)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Gradients, SharedLeafAccumulates) {
    ad::ParamSet ps;
    ps.add("x", Matrix::Constant(1, 1, 2.0));
    ad::analytic_gradient([&](ad::Tape& t) {
        ad::Var x = t.param(ps["x"]);
        return ad::sum(ad::mul(x, x));
    }, ps);
    EXPECT_DOUBLE_EQ(ps["x"].grad(0, 0), 4.0);
}

TEST(ParamSet, RejectsDuplicatesAndKeepsOrder) {
    ad::ParamSet ps;
    ps.add("b", Matrix::Zero(1, 1));
    ps.add("a", Matrix::Zero(2, 3));
    EXPECT_THROW(ps.add("a", Matrix::Zero(1, 1)), Error);
    std::vector<std::string> names;
    for (const auto& p : ps) names.push_back(p.name);
    EXPECT_EQ(names, (std::vector<std::string>{"b", "a"}));
    EXPECT_EQ(ps.scalar_count(), 7u);
    EXPECT_EQ(ps["a"].grad.rows(), 2);
    EXPECT_EQ(ps["a"].grad.cols(), 3);
    EXPECT_THROW(ps["missing"], Error);
}

TEST(ParamSet, CopiesAreIndependent) {
    ad::ParamSet ps;
    ps.add("w", Matrix::Ones(2, 2));
    ad::ParamSet copy = ps;
    copy["w"].value.setZero();
    EXPECT_EQ(ps["w"].value.sum(), 4.0);
}

TEST(Optim, SgdAndAdamMoveDownhill) {
    ad::ParamSet ps;
    ps.add("x", Matrix::Constant(1, 2, 3.0));
    auto fn = [&](ad::Tape& t) { return ad::sum(ad::square(t.param(ps["x"]))); };
    const double start = ad::evaluate_loss(fn);
    ad::analytic_gradient(fn, ps);
    ad::sgd_step(ps, 0.1);
    EXPECT_LT(ad::evaluate_loss(fn), start);
    ad::Adam adam({0.05});
    for (int i = 0; i < 200; ++i) {
        ad::analytic_gradient(fn, ps);
        adam.step(ps);
    }
    EXPECT_LT(ad::evaluate_loss(fn), 1e-2);
    EXPECT_EQ(adam.steps(), 200);
}

TEST(Optim, AdamFirstStepHasMagnitudeLr) {
    ad::ParamSet ps;
    ps.add("x", Matrix::Constant(1, 1, 1.0));
    ps["x"].grad(0, 0) = 123.0;
    ad::Adam adam({0.01});
    adam.step(ps);
    EXPECT_NEAR(ps["x"].value(0, 0), 0.99, 1e-9);
}
