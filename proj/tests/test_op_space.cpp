#include <gtest/gtest.h>

#include <cmath>

#include "pdarts/op_space.hpp"

using namespace pdarts;

namespace {

Tensor random_input(Rng& rng, int b, int c, int h, int w) {
    Tensor x({b, c, h, w}, true);
    for (auto& v : *x.data) v = rng.normal(0.0, 1.0);
    return x;
}

MixedEdge make_edge(const std::vector<OpKind>& kinds, int channels, int stride, Rng& rng,
                    Tensor* alpha_out = nullptr) {
    Tensor alpha = param({static_cast<int>(kinds.size())});
    for (auto& v : *alpha.data) v = rng.normal(0.0, 1.0);
    if (alpha_out) *alpha_out = alpha;
    return MixedEdge(0, 2, kinds, channels, stride, alpha, rng);
}

}  // namespace

TEST(OpSpace, NamesRoundTrip) {
    for (OpKind k : kAllOps) {
        auto back = op_from_name(op_name(k));
        ASSERT_TRUE(back.has_value());
        EXPECT_EQ(*back, k);
    }
    EXPECT_FALSE(op_from_name("conv_7x7").has_value());
}

TEST(OpSpace, MixtureWeightsSumToOneAndAreShiftInvariant) {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<OpKind> kinds(kAllOps.begin(), kAllOps.end());
        MixedEdge e = make_edge(kinds, 4, 1, rng);
        auto w = mixture_weights(e);
        double s = 0.0;
        for (double v : w) s += v;
        EXPECT_NEAR(s, 1.0, 1e-12);
        for (double v : w) EXPECT_GT(v, 0.0);
        // Shifting every logit by a constant leaves the mixture unchanged.
        auto shifted = e;
        for (auto& v : *shifted.alpha.data) v += 123.25;
        auto w2 = mixture_weights(shifted);
        for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(w[i], w2[i], 1e-12);
    }
}

TEST(OpSpace, MixtureWeightsRejectNaN) {
    Rng rng(3);
    MixedEdge e = make_edge({OpKind::zero, OpKind::skip_connect}, 4, 1, rng);
    (*e.alpha.data)[0] = std::nan("");
    EXPECT_THROW(mixture_weights(e), NonFiniteError);
}

// The mixed edge must equal the explicitly unrolled sum of
// softmax-weight * branch output, computed branch by branch outside the edge.
TEST(OpSpace, MixedForwardMatchesBranchByBranchOracle) {
    Rng rng(11);
    for (int stride : {1, 2}) {
        for (int trial = 0; trial < 10; ++trial) {
            std::vector<OpKind> kinds(kAllOps.begin(), kAllOps.end());
            MixedEdge e = make_edge(kinds, 4, stride, rng);
            Tensor x = random_input(rng, 2, 4, 8, 8);
            Tape tape;
            Rng drng(99);
            Tensor mixed = mixed_forward(tape, e, x, false, drng);

            auto w = mixture_weights(e);
            std::vector<double> expect(mixed.size(), 0.0);
            for (std::size_t i = 0; i < e.ops.size(); ++i) {
                Tape t2;
                Tensor y = e.ops[i].forward(t2, x, false);
                ASSERT_EQ(y.shape, mixed.shape);
                for (std::int64_t p = 0; p < y.size(); ++p) expect[p] += w[i] * (*y.data)[p];
            }
            double max_diff = 0.0;
            for (std::int64_t p = 0; p < mixed.size(); ++p)
                max_diff = std::max(max_diff, std::abs((*mixed.data)[p] - expect[p]));
            EXPECT_LE(max_diff, 1e-10);
        }
    }
}

TEST(OpSpace, ParamCountFormulaMatchesModules) {
    Rng rng(5);
    for (int stride : {1, 2})
        for (int channels : {3, 4, 8})
            for (OpKind k : kAllOps) {
                CandidateOp op(k, channels, stride, rng);
                EXPECT_EQ(op.param_count(), op_param_count(k, channels, stride))
                    << op_name(k) << " c=" << channels << " s=" << stride;
            }
    // Hand oracle: separable 3x3 at 4 channels is two stacks of
    // depthwise 3*3*4 + pointwise 4*4 + BN 2*4 = 60, so 120 total.
    EXPECT_EQ(op_param_count(OpKind::sep_conv_3x3, 4, 1), 120);
    // Identity carries no parameters; its strided form is a factorized
    // reduction with 2*(4*2) conv weights plus BN 2*4.
    EXPECT_EQ(op_param_count(OpKind::skip_connect, 4, 1), 0);
    EXPECT_EQ(op_param_count(OpKind::skip_connect, 4, 2), 2 * 4 + 2 * 4 + 8);
}

TEST(OpSpace, ZeroOpPassesNoGradientToInput) {
    Rng rng(13);
    Tensor alpha;
    MixedEdge e = make_edge({OpKind::zero, OpKind::skip_connect}, 4, 1, rng, &alpha);
    Tensor x = random_input(rng, 2, 4, 8, 8);
    Tape tape;
    Rng drng(1);
    Tensor y = mixed_forward(tape, e, x, false, drng);
    Tensor loss = sum(tape, y);
    tape.backward(loss);
    // Only the identity branch reaches x, so dL/dx is its softmax weight.
    const double w_skip = mixture_weights(e)[1];
    for (auto g : *x.grad) EXPECT_NEAR(g, w_skip, 1e-12);
}

TEST(OpSpace, SkipDropoutZeroIsExactlyInert) {
    Rng rng(17);
    MixedEdge e = make_edge({OpKind::skip_connect}, 4, 1, rng);
    e.skip_dropout_rate = 0.0;
    Tensor x = random_input(rng, 2, 4, 8, 8);
    Rng d1(42), d2(42);
    Tape t1, t2;
    Tensor train_y = mixed_forward(t1, e, x, true, d1);
    Tensor eval_y = mixed_forward(t2, e, x, false, d2);
    for (std::int64_t p = 0; p < train_y.size(); ++p)
        EXPECT_EQ((*train_y.data)[p], (*eval_y.data)[p]);
}

TEST(OpSpace, SkipDropoutScalesSurvivors) {
    Rng rng(19);
    MixedEdge e = make_edge({OpKind::skip_connect}, 1, 1, rng);
    (*e.alpha.data)[0] = 0.0;
    e.skip_dropout_rate = 0.5;
    Tensor x = full({1, 1, 32, 32}, 1.0);
    Rng drng(5);
    Tape tape;
    Tensor y = mixed_forward(tape, e, x, true, drng);
    int dropped = 0;
    for (double v : *y.data) {
        if (v == 0.0)
            ++dropped;
        else
            EXPECT_NEAR(v, 2.0, 1e-12);  // inverted scaling by 1/(1-rate)
    }
    EXPECT_GT(dropped, 0);
    EXPECT_LT(dropped, 1024);
}

TEST(OpSpace, AlphaGradientMatchesFiniteDifference) {
    Rng rng(23);
    std::vector<OpKind> kinds(kAllOps.begin(), kAllOps.end());
    Tensor alpha;
    MixedEdge e = make_edge(kinds, 4, 1, rng, &alpha);
    Tensor x = random_input(rng, 2, 4, 8, 8);
    // Fix a scalar projection of the mixed output and compare the tape
    // gradient of alpha to central differences (eval mode keeps the branch
    // modules pure functions of alpha).
    Tensor proj({1, 4, 8, 8}, false);
    {
        Rng prng(29);
        for (auto& v : *proj.data) v = prng.normal(0.0, 1.0);
    }
    auto loss_value = [&]() {
        Tape tape;
        Rng drng(1);
        Tensor y = mixed_forward(tape, e, x, false, drng);
        double acc = 0.0;
        for (int b = 0; b < y.shape[0]; ++b)
            for (std::int64_t p = 0; p < proj.size(); ++p)
                acc += (*y.data)[b * proj.size() + p] * (*proj.data)[p];
        return acc;
    };
    Tape tape2;
    Rng drng2(1);
    Tensor y2 = mixed_forward(tape2, e, x, false, drng2);
    Tensor flat_w(y2.shape, false);
    for (int b = 0; b < y2.shape[0]; ++b)
        for (std::int64_t p = 0; p < proj.size(); ++p)
            (*flat_w.data)[b * proj.size() + p] = (*proj.data)[p];
    Tensor loss = sum(tape2, mul(tape2, y2, flat_w));
    alpha.zero_grad();
    tape2.backward(loss);
    const double h = 1e-5;
    for (std::int64_t i = 0; i < alpha.size(); ++i) {
        const double keep = (*alpha.data)[i];
        (*alpha.data)[i] = keep + h;
        const double up = loss_value();
        (*alpha.data)[i] = keep - h;
        const double dn = loss_value();
        (*alpha.data)[i] = keep;
        const double fd = (up - dn) / (2 * h);
        const double an = (*alpha.grad)[i];
        EXPECT_LE(std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)}), 1e-4);
    }
}

TEST(OpSpace, RejectsBadConstruction) {
    Rng rng(1);
    EXPECT_THROW(CandidateOp(OpKind::sep_conv_3x3, 4, 3, rng), ShapeError);
    EXPECT_THROW(CandidateOp(OpKind::sep_conv_3x3, 0, 1, rng), ShapeError);
    Tensor alpha = param({2});
    EXPECT_THROW(MixedEdge(2, 2, {OpKind::zero, OpKind::skip_connect}, 4, 1, alpha, rng),
                 ShapeError);
    Tensor bad = param({3});
    EXPECT_THROW(MixedEdge(0, 2, {OpKind::zero, OpKind::skip_connect}, 4, 1, bad, rng), ShapeError);
}
