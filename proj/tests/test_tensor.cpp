#include <gtest/gtest.h>

#include <cmath>

#include "pdarts/gradcheck.hpp"
#include "pdarts/tensor.hpp"

using namespace pdarts;

TEST(Tensor, ShapeInvariant) {
    Tensor t({2, 3, 4}, true);
    EXPECT_EQ(t.size(), 24);
    EXPECT_EQ(t.data->size(), 24u);
    EXPECT_EQ(t.grad->size(), 24u);
}

TEST(Tensor, ShapeMismatchNamesPrimitiveAndShapes) {
    Tape tape;
    Tensor a = zeros({2, 3}), b = zeros({3, 2});
    try {
        add(tape, a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("add"), std::string::npos);
        EXPECT_NE(msg.find("(2,3)"), std::string::npos);
        EXPECT_NE(msg.find("(3,2)"), std::string::npos);
    }
}

TEST(Tensor, Conv2dOnesCenterIsNine) {
    // all-ones 1x1x3x3 input, all-ones 1x1x3x3 kernel, pad 1 stride 1
    Tape tape;
    Tensor x = full({1, 1, 3, 3}, 1.0);
    Tensor w = full({1, 1, 3, 3}, 1.0);
    Tensor y = conv2d(tape, x, w, {1, 1, 1, 1});
    ASSERT_EQ(y.shape, (Shape{1, 1, 3, 3}));
    EXPECT_DOUBLE_EQ((*y.data)[4], 9.0);
    EXPECT_DOUBLE_EQ((*y.data)[0], 4.0);
}

TEST(Tensor, SoftmaxClosedForm) {
    Tape tape;
    Tensor x = from_vector({2}, {0.0, std::log(2.0)});
    Tensor y = softmax(tape, x);
    EXPECT_NEAR((*y.data)[0], 1.0 / 3.0, 1e-15);
    EXPECT_NEAR((*y.data)[1], 2.0 / 3.0, 1e-15);
}

TEST(Tensor, QuadraticGradient) {
    // loss = sum(w * w), w = [1, 2] -> grad = [2, 4]
    Tape tape;
    Tensor w = from_vector({2}, {1.0, 2.0}, true);
    Tensor loss = sum(tape, mul(tape, w, w));
    tape.backward(loss);
    EXPECT_DOUBLE_EQ((*w.grad)[0], 2.0);
    EXPECT_DOUBLE_EQ((*w.grad)[1], 4.0);
}

TEST(Tensor, CrossEntropyGradientIsSoftmaxMinusOneHot) {
    Tape tape;
    Tensor logits = from_vector({1, 3}, {0.2, -0.4, 1.1}, true);
    Tensor loss = cross_entropy(tape, logits, {2});
    tape.backward(loss);
    Tape t2;
    Tensor probs = softmax(t2, from_vector({3}, {0.2, -0.4, 1.1}));
    EXPECT_NEAR((*logits.grad)[0], (*probs.data)[0], 1e-12);
    EXPECT_NEAR((*logits.grad)[1], (*probs.data)[1], 1e-12);
    EXPECT_NEAR((*logits.grad)[2], (*probs.data)[2] - 1.0, 1e-12);
}

TEST(Tensor, BackwardTwiceThrows) {
    Tape tape;
    Tensor w = from_vector({2}, {1.0, 2.0}, true);
    Tensor loss = sum(tape, mul(tape, w, w));
    tape.backward(loss);
    EXPECT_THROW(tape.backward(loss), TapeError);
    tape.reset();
}

TEST(Tensor, NonFiniteLossThrows) {
    Tape tape;
    Tensor w = from_vector({1}, {std::numeric_limits<double>::infinity()}, true);
    Tensor loss = sum(tape, w);
    EXPECT_THROW(tape.backward(loss), NonFiniteError);
}

TEST(Tensor, ConcatSplitIdentityDataAndGrad) {
    Rng rng(7);
    Tensor a({2, 3, 4, 4}, true), b({2, 2, 4, 4}, true);
    for (auto& v : *a.data) v = rng.normal();
    for (auto& v : *b.data) v = rng.normal();
    Tape tape;
    Tensor cat = concat_channels(tape, {a, b});
    Tensor sa = slice_channels(tape, cat, 0, 3);
    Tensor sb = slice_channels(tape, cat, 3, 2);
    EXPECT_EQ(*sa.data, *a.data);
    EXPECT_EQ(*sb.data, *b.data);
    // push a pseudo-random cotangent through and check it lands unchanged
    Tensor c1(sa.shape, false), c2(sb.shape, false);
    for (auto& v : *c1.data) v = rng.normal();
    for (auto& v : *c2.data) v = rng.normal();
    Tensor loss = add(tape, sum(tape, mul(tape, sa, c1)), sum(tape, mul(tape, sb, c2)));
    tape.backward(loss);
    for (std::int64_t i = 0; i < a.size(); ++i) EXPECT_DOUBLE_EQ((*a.grad)[i], (*c1.data)[i]);
    for (std::int64_t i = 0; i < b.size(); ++i) EXPECT_DOUBLE_EQ((*b.grad)[i], (*c2.data)[i]);
}

TEST(Tensor, PoolOfConstantIsConstant) {
    Tape tape;
    Tensor x = full({1, 2, 6, 6}, 3.25);
    Tensor mx = pool2d(tape, x, PoolMode::max, 3, 1, 1);
    Tensor av = pool2d(tape, x, PoolMode::avg, 3, 1, 1);
    for (auto v : *mx.data) EXPECT_DOUBLE_EQ(v, 3.25);
    for (auto v : *av.data) EXPECT_DOUBLE_EQ(v, 3.25);
    Tensor av2 = pool2d(tape, x, PoolMode::avg, 3, 2, 1);
    for (auto v : *av2.data) EXPECT_DOUBLE_EQ(v, 3.25);
}

TEST(Tensor, BatchNormTrainNormalizes) {
    Rng rng(11);
    Tensor x({4, 3, 5, 5}, false);
    for (auto& v : *x.data) v = rng.normal(2.0, 1.7);
    Tensor gamma = full({3}, 1.0), beta = zeros({3});
    BatchNormState state(3);
    Tape tape;
    Tensor y = batch_norm(tape, x, gamma, beta, state, true);
    const int plane = 25, B = 4, C = 3;
    for (int c = 0; c < C; ++c) {
        double mean = 0.0, var = 0.0;
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < plane; ++i) mean += (*y.data)[(b * C + c) * plane + i];
        mean /= B * plane;
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < plane; ++i) {
                double d = (*y.data)[(b * C + c) * plane + i] - mean;
                var += d * d;
            }
        var /= B * plane;
        EXPECT_NEAR(mean, 0.0, 1e-6);
        EXPECT_NEAR(var, 1.0, 1e-3);  // eps shifts variance slightly below 1
    }
}

TEST(Tensor, DropoutPreservesExpectationShape) {
    Rng rng(5);
    Tensor x = full({1, 1, 10, 10}, 1.0);
    Tape tape;
    Tensor y = dropout(tape, x, 0.4, rng, true);
    int kept = 0;
    for (auto v : *y.data) {
        if (v != 0.0) {
            EXPECT_NEAR(v, 1.0 / 0.6, 1e-12);
            ++kept;
        }
    }
    EXPECT_GT(kept, 30);
    EXPECT_LT(kept, 90);
    // identity at inference
    Tensor z = dropout(tape, x, 0.4, rng, false);
    EXPECT_EQ(z.data, x.data);
}

// Checks every primitive against the central finite-difference oracle,
// 20 random seeds each.
TEST(Tensor, GradcheckSuiteTwentySeeds) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        auto results = gradcheck::run_suite(seed);
        for (const auto& r : results)
            EXPECT_TRUE(r.pass) << r.name << " seed " << seed << " max_rel_err " << r.max_rel_err;
    }
}
