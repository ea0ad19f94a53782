#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "libra/error.hpp"
#include "libra/num/autodiff.hpp"
#include "libra/num/grad_check.hpp"
#include "libra/num/ops.hpp"
#include "libra/rng.hpp"

using namespace libra;
using namespace libra::num;

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, double sd = 1.0) {
    return Tensor::matrix(r, c, rng.normal_vector(r * c, sd));
}

}  // namespace

TEST(Forward, MatmulByIdentity) {
    const auto eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
    const auto m = Tensor::matrix(2, 2, {1.5, -2, 3.25, 4});
    const auto out = matmul(eye, m);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(out[i], m[i]);
}

TEST(Forward, SoftmaxOfZerosIsUniform) {
    const auto p = softmax_rows(Tensor::matrix(1, 3, {0, 0, 0}));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p[i], 1.0 / 3.0, 1e-15);
}

TEST(Forward, CrossEntropyOfUniformLogits) {
    const std::vector<int> target{0};
    EXPECT_NEAR(cross_entropy(Tensor::matrix(1, 2, {0, 0}), target).item(), std::log(2.0), 1e-15);
}

TEST(Forward, ShapeMismatchNamesShapes) {
    try {
        matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
        FAIL() << "expected ContractViolation";
    } catch (const ContractViolation& e) {
        EXPECT_NE(std::string(e.what()).find("(2, 3)"), std::string::npos);
    }
    EXPECT_THROW(add(Tensor::zeros({2}), Tensor::zeros({3})), ContractViolation);
    EXPECT_THROW(Tensor::constant({2, 2}, {1, 2, 3}), ContractViolation);
}

TEST(Forward, NonFiniteOutputIsHardError) {
    const auto big = Tensor::matrix(1, 1, {1e308});
    EXPECT_THROW(scale(big, 10.0), NumericError);
}

TEST(Forward, MaskedEntriesGetZeroProbabilityAndRowsSumToOne) {
    Rng rng(3);
    for (int seed = 0; seed < 20; ++seed) {
        const std::size_t n = 1 + rng.index(7);
        const auto p = softmax_rows(tril_mask(random_matrix(rng, n, n, 5.0)));
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                s += p.at(i, j);
                if (j > i) EXPECT_EQ(p.at(i, j), 0.0);
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(Forward, ConcatThenSplitIsIdentity) {
    Rng rng(11);
    for (int seed = 0; seed < 20; ++seed) {
        const std::size_t rows = 1 + rng.index(4);
        std::vector<std::size_t> widths{1 + rng.index(3), 1 + rng.index(3), 1 + rng.index(3)};
        std::vector<Tensor> parts;
        for (auto w : widths) parts.push_back(random_matrix(rng, rows, w));
        const auto back = split_cols(concat_cols(parts), widths);
        ASSERT_EQ(back.size(), parts.size());
        for (std::size_t t = 0; t < parts.size(); ++t) {
            ASSERT_EQ(back[t].shape(), parts[t].shape());
            for (std::size_t i = 0; i < parts[t].size(); ++i) EXPECT_EQ(back[t][i], parts[t][i]);
        }
    }
}

TEST(Forward, MatmulNtAgreesBitwiseWithMatmulOfTranspose) {
    Rng rng(5);
    const auto a = random_matrix(rng, 3, 5);
    const auto b = random_matrix(rng, 4, 5);
    std::vector<double> bt(20);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 5; ++j) bt[j * 4 + i] = b.at(i, j);
    const auto x = matmul_nt(a, b);
    const auto y = matmul(a, Tensor::matrix(5, 4, bt));
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(x[i], y[i]);
}

TEST(Backward, SumGivesOnes) {
    const auto x = Tensor::parameter({3}, {0.5, -1, 2});
    const auto g = backward(sum(x));
    const auto gx = g.dense(x);
    EXPECT_EQ(gx, (std::vector<double>{1, 1, 1}));
}

TEST(Backward, SquareAtTwoGivesFour) {
    const auto x = Tensor::parameter({}, {2.0});
    const auto g = backward(sum(mul(x, x)));
    EXPECT_EQ(g.dense(x)[0], 4.0);
}

TEST(Backward, NonScalarLossRejected) {
    const auto x = Tensor::parameter({2}, {1, 2});
    EXPECT_THROW(backward(scale(x, 2.0)), ContractViolation);
}

TEST(Backward, ConstantLeavesGetNoGradient) {
    const auto x = Tensor::parameter({1, 2}, {1, 2});
    const auto c = Tensor::matrix(1, 2, {3, 4});
    const auto g = backward(sum(mul(x, c)));
    EXPECT_TRUE(g.contains(x));
    EXPECT_FALSE(g.contains(c));
    EXPECT_EQ(g.dense(c), (std::vector<double>{0, 0}));
    EXPECT_EQ(g.dense(x), (std::vector<double>{3, 4}));
}

TEST(Backward, SharedSubexpressionAccumulates) {
    // y = (x*x) + (x*x) through one shared node: dy/dx = 4x
    const auto x = Tensor::parameter({}, {1.5});
    const auto sq = mul(x, x);
    const auto g = backward(sum(add(sq, sq)));
    EXPECT_DOUBLE_EQ(g.dense(x)[0], 6.0);
}

TEST(Backward, NoGradGuardStopsRecording) {
    const auto x = Tensor::parameter({1}, {1});
    NoGradGuard guard;
    EXPECT_FALSE(scale(x, 2.0).requires_grad());
}

TEST(Backward, ThreeLayerMlpMatchesFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed, "mlp");
        const auto input = random_matrix(rng, 4, 5);
        const std::vector<Tensor> params{random_matrix(rng, 5, 6, 0.5), Tensor::matrix(1, 6, rng.normal_vector(6, 0.1)),
                                         random_matrix(rng, 6, 6, 0.5), random_matrix(rng, 6, 3, 0.5)};
        const std::vector<int> targets{0, 2, 1, 2};
        auto f = [&](const std::vector<Tensor>& p) {
            auto h = gelu(add_row(matmul(input, p[0]), p[1]));
            h = silu(matmul(h, p[2]));
            return cross_entropy(matmul(h, p[3]), targets);
        };
        EXPECT_LT(finite_diff_check(f, params, 1e-6), 1e-5) << "seed " << seed;
    }
}

TEST(GradCheck, SquareFunction) {
    auto f = [](const std::vector<Tensor>& p) { return sum(mul(p[0], p[0])); };
    EXPECT_LT(finite_diff_check(f, {Tensor::scalar(3.0)}, 1e-6), 1e-8);
}

TEST(GradCheck, ConstantFunctionHasZeroError) {
    auto f = [](const std::vector<Tensor>&) { return Tensor::scalar(42.0); };
    EXPECT_EQ(finite_diff_check(f, {Tensor::matrix(1, 3, {1, 2, 3})}, 1e-6), 0.0);
}

TEST(GradCheck, RejectsNonPositiveEpsAndNonFiniteOutput) {
    auto f = [](const std::vector<Tensor>& p) { return sum(p[0]); };
    EXPECT_THROW(finite_diff_check(f, {Tensor::scalar(1.0)}, 0.0), ContractViolation);
    auto bad = [](const std::vector<Tensor>&) { return Tensor::scalar(std::numeric_limits<double>::quiet_NaN()); };
    EXPECT_THROW(finite_diff_check(bad, {Tensor::scalar(1.0)}, 1e-6), NumericError);
}

// Every differentiable primitive, random small shapes, 20 seeds each.
class PrimitiveGradients : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradients, MatchFiniteDifferences) {
    const auto seed = static_cast<std::uint64_t>(GetParam());
    Rng rng(seed, "primitives");
    const std::size_t m = 1 + rng.index(4), n = 2 * (1 + rng.index(3)), k = 1 + rng.index(4);
    const auto a = random_matrix(rng, m, n);
    const auto b = random_matrix(rng, m, n);
    const auto c = random_matrix(rng, n, k);
    const auto row = Tensor::matrix(1, n, rng.normal_vector(n, 1.0));
    const auto sq = random_matrix(rng, m, m);
    const auto w = random_matrix(rng, m, n);  // readout weights so sums are non-trivial
    auto readout = [&w](const Tensor& t) {
        if (t.shape() == w.shape()) return sum(mul(t, w));
        return sum(mul(t, t));
    };
    std::vector<int> tg(m);
    for (auto& t : tg) t = static_cast<int>(rng.index(n));
    std::vector<double> wt(m);
    for (auto& v : wt) v = rng.uniform(0.1, 1.0);
    std::vector<std::size_t> ids{rng.index(m), rng.index(m), rng.index(m)};
    const auto other = random_matrix(rng, 2, n);
    const bool take_arr[5] = {true, false, true, true, false};
    const std::span<const bool> take_span(take_arr, 5);

    const std::vector<std::pair<const char*, ScalarFn>> cases{
        {"matmul", [&](auto& p) { return readout(matmul(p[0], p[1])); }},
        {"matmul_nt", [&](auto& p) { return readout(matmul_nt(p[0], p[1])); }},
        {"add", [&](auto& p) { return readout(add(p[0], p[1])); }},
        {"sub", [&](auto& p) { return readout(sub(p[0], p[1])); }},
        {"mul", [&](auto& p) { return readout(mul(p[0], p[1])); }},
        {"scale", [&](auto& p) { return readout(scale(p[0], -1.7)); }},
        {"add_row", [&](auto& p) { return readout(add_row(p[0], p[2])); }},
        {"concat_split", [&](auto& p) {
             auto cat = concat_cols({p[0], p[1]});
             return add(readout(slice_cols(cat, 1, n)), readout(concat_rows({p[0], p[1]})));
         }},
        {"slice_rows", [&](auto& p) { return readout(slice_rows(p[0], 0, 1)); }},
        {"gather_merge", [&](auto& p) { return readout(merge_rows(gather_rows(p[0], ids), p[3], take_span)); }},
        {"softmax_tril", [&](auto& p) { return readout(softmax_rows(tril_mask(p[4]))); }},
        {"rms_norm", [&](auto& p) { return readout(rms_norm(p[0], p[2])); }},
        {"silu", [&](auto& p) { return readout(silu(p[0])); }},
        {"gelu", [&](auto& p) { return readout(gelu(p[0])); }},
        {"sigmoid", [&](auto& p) { return readout(sigmoid(p[0])); }},
        {"binary_entropy", [&](auto& p) { return readout(binary_entropy(sigmoid(p[0]))); }},
        {"cross_entropy", [&](auto& p) { return cross_entropy(p[0], tg, wt); }},
        {"col_mean", [&](auto& p) { return readout(col_mean(p[0])); }},
        {"mean", [&](auto& p) { return mean(mul(p[0], p[1])); }},
        {"rope", [&](auto& p) { return readout(rope(p[0], n / 2, 3)); }},
    };
    for (const auto& [name, f] : cases) {
        std::vector<Tensor> params{a, name == std::string("matmul") ? c : b, row, other, sq};
        if (name == std::string("matmul_nt")) params[1] = random_matrix(rng, k, n);
        EXPECT_LT(finite_diff_check(f, params, 1e-6), 1e-5) << name << " seed " << seed;
    }
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGradients, ::testing::Range(0, 20));

TEST(Backward, StraightThroughSignIsIdentityBackward) {
    const auto z = Tensor::parameter({1, 4}, {0.3, -0.2, 0.0, 2.0});
    const auto s = sign_straight_through(z);
    EXPECT_EQ(std::vector<double>(s.data().begin(), s.data().end()), (std::vector<double>{1, -1, -1, 1}));
    const auto g = backward(sum(s));
    EXPECT_EQ(g.dense(z), (std::vector<double>{1, 1, 1, 1}));
}
