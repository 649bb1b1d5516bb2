#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace hopflow;
using testutil::attention_oracle;
using ad::Tape;
using ad::Var;
using T64 = Tensor<double>;

namespace {

constexpr double kTol = 1e-6;

T64 tensor(Shape s, std::vector<double> v) { return T64(std::move(s), std::move(v)); }

/// Scalar objective sum(out * r) with a fixed random r, so every output entry gets a distinct weight.
Var weighted_sum(Tape<double>& t, Var out, std::uint64_t seed = 99)
{
    std::mt19937_64 rng(seed);
    auto r = testutil::random_tensor(t.shape(out), rng);
    return ad::sum(t, ad::mul(t, out, t.constant(r)));
}

void expect_grad_ok(const std::vector<T64>& inputs, const gradcheck::Builder& f, double tol = 1e-6)
{
    auto res = gradcheck::check_inputs(inputs, f);
    EXPECT_GT(res.checked, 0u);
    EXPECT_LT(res.max_error, tol) << "worst " << res.worst;
}

} // namespace

TEST(Linear, IdentityAndHandCase)
{
    Tape<double> t;
    auto x = t.constant(tensor({2, 2}, {1, 2, 3, 4}));
    auto eye = t.constant(tensor({2, 2}, {1, 0, 0, 1}));
    auto zero = t.constant(tensor({2}, {0, 0}));
    EXPECT_EQ(t.value(ad::linear(t, x, eye, zero)), (std::vector<double>{1, 2, 3, 4}));

    auto y = ad::linear(t, t.constant(tensor({1, 2}, {1, 2})), t.constant(tensor({2, 1}, {1, 1})), t.constant(tensor({1}, {0.5})));
    EXPECT_EQ(t.shape(y), (Shape{1, 1}));
    EXPECT_DOUBLE_EQ(t.scalar(y), 3.5);
}

TEST(Linear, ShapeMismatch)
{
    Tape<double> t;
    auto x = t.constant(T64({2, 3}));
    EXPECT_THROW(ad::linear(t, x, t.constant(T64({2, 2}))), ConfigError);
    EXPECT_THROW(ad::linear(t, x, t.constant(T64({3, 2})), t.constant(T64({3}))), ConfigError);
}

TEST(Linear, GradientCheck)
{
    std::mt19937_64 rng(1);
    expect_grad_ok({testutil::random_tensor({3, 4}, rng), testutil::random_tensor({4, 2}, rng), testutil::random_tensor({2}, rng)},
                   [](Tape<double>& t, const std::vector<Var>& v) { return weighted_sum(t, ad::linear(t, v[0], v[1], v[2])); });
    expect_grad_ok({testutil::random_tensor({2, 3, 4}, rng), testutil::random_tensor({4, 5}, rng)},
                   [](Tape<double>& t, const std::vector<Var>& v) { return weighted_sum(t, ad::linear(t, v[0], v[1])); });
}

TEST(LayerNorm, Examples)
{
    Tape<double> t;
    auto gamma = t.constant(tensor({2}, {1, 1}));
    auto beta = t.constant(tensor({2}, {0, 0}));
    auto c = ad::layer_norm(t, t.constant(tensor({1, 2}, {3, 3})), gamma, beta);
    for (double v : t.value(c)) EXPECT_DOUBLE_EQ(v, 0.0);
    auto y = ad::layer_norm(t, t.constant(tensor({1, 2}, {1, 3})), gamma, beta);
    EXPECT_NEAR(t.value(y)[0], -1.0, 1e-5);
    EXPECT_NEAR(t.value(y)[1], 1.0, 1e-5);
    auto b2 = t.constant(tensor({2}, {0.25, -1}));
    auto z = ad::layer_norm(t, t.constant(tensor({1, 2}, {7, 7})), gamma, b2);
    EXPECT_DOUBLE_EQ(t.value(z)[0], 0.25);
    EXPECT_DOUBLE_EQ(t.value(z)[1], -1.0);
}

TEST(LayerNorm, GradientCheck)
{
    std::mt19937_64 rng(2);
    expect_grad_ok({testutil::random_tensor({2, 3, 5}, rng), testutil::random_tensor({5}, rng), testutil::random_tensor({5}, rng)},
                   [](Tape<double>& t, const std::vector<Var>& v) { return weighted_sum(t, ad::layer_norm(t, v[0], v[1], v[2])); }, 1e-5);
}

TEST(Dropout, IdentityCases)
{
    std::mt19937_64 rng(3);
    Tape<double> t;
    auto x = t.constant(testutil::random_tensor({4, 5}, rng));
    EXPECT_EQ(t.value(ad::dropout(t, x, 0.0, rng, true)), t.value(x));
    EXPECT_EQ(t.value(ad::dropout(t, x, 0.7, rng, false)), t.value(x));
    EXPECT_THROW(ad::dropout(t, x, 1.0, rng, true), ConfigError);
}

TEST(Dropout, ExpectationIsPreserved)
{
    std::mt19937_64 rng(4);
    const std::size_t n = 16, trials = 100000;
    std::vector<double> acc(n, 0.0);
    Tape<float> t;
    for (std::size_t k = 0; k < trials; ++k) {
        t.reset();
        auto y = ad::dropout(t, t.constant(Tensor<float>({n}, 1.0f)), 0.5, rng, true);
        for (std::size_t i = 0; i < n; ++i) acc[i] += t.value(y)[i];
    }
    for (double a : acc) EXPECT_NEAR(a / trials, 1.0, 0.01);
}

TEST(Dropout, GradientUsesSavedMask)
{
    std::mt19937_64 rng(5);
    auto x = testutil::random_tensor({3, 4}, rng);
    expect_grad_ok({x}, [](Tape<double>& t, const std::vector<Var>& v) {
        std::mt19937_64 mask_rng(77);
        return weighted_sum(t, ad::dropout(t, v[0], 0.4, mask_rng, true));
    });
}

TEST(Softmax, ExamplesAndStability)
{
    Tape<double> t;
    auto a = ad::softmax(t, t.constant(tensor({1, 2}, {0, 0})));
    EXPECT_DOUBLE_EQ(t.value(a)[0], 0.5);
    auto b = ad::softmax(t, t.constant(tensor({1, 2}, {1000, 0})));
    EXPECT_DOUBLE_EQ(t.value(b)[0], 1.0);
    EXPECT_EQ(t.value(b)[1], 0.0);
    std::mt19937_64 rng(6);
    auto c = ad::softmax(t, t.constant(testutil::random_tensor({4, 7}, rng, 20.0)));
    for (std::size_t r = 0; r < 4; ++r) {
        double s = 0;
        for (std::size_t j = 0; j < 7; ++j) {
            EXPECT_GE(t.value(c)[r * 7 + j], 0.0);
            s += t.value(c)[r * 7 + j];
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Softmax, GradientCheck)
{
    std::mt19937_64 rng(7);
    expect_grad_ok({testutil::random_tensor({2, 5}, rng)},
                   [](Tape<double>& t, const std::vector<Var>& v) { return weighted_sum(t, ad::softmax(t, v[0])); });
}

TEST(Attention, SingleTokenReturnsValues)
{
    std::mt19937_64 rng(8);
    Tape<double> t;
    auto h = t.constant(testutil::random_tensor({3, 1, 4}, rng));
    auto wq = t.constant(testutil::random_tensor({4, 4}, rng));
    auto wk = t.constant(testutil::random_tensor({4, 4}, rng));
    auto wv = t.constant(testutil::random_tensor({4, 4}, rng));
    auto out = ad::multi_head_attention(t, h, wq, wk, wv, 2);
    auto v = ad::linear(t, h, wv);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(t.value(out)[i], t.value(v)[i], 1e-12);
}

TEST(Attention, IdenticalTokensGiveUniformWeights)
{
    std::mt19937_64 rng(9);
    auto row = testutil::random_tensor({4}, rng);
    T64 x({2, 5, 4});
    for (std::size_t i = 0; i < 10; ++i) std::copy(row.data.begin(), row.data.end(), x.data.begin() + static_cast<std::ptrdiff_t>(i * 4));
    Tape<double> t;
    auto q = ad::linear(t, t.constant(x), t.constant(testutil::random_tensor({4, 4}, rng)));
    auto k = ad::linear(t, t.constant(x), t.constant(testutil::random_tensor({4, 4}, rng)));
    auto v = ad::linear(t, t.constant(x), t.constant(testutil::random_tensor({4, 4}, rng)));
    auto out = ad::attention(t, q, k, v, 2);
    for (double w : ad::attention_weights(t, out)) EXPECT_NEAR(w, 0.2, 1e-12);
    for (std::size_t i = 0; i < 40; ++i) EXPECT_NEAR(t.value(out)[i], t.value(v)[i], 1e-12);
}

TEST(Attention, MatchesNestedLoopOracle)
{
    std::mt19937_64 rng(10);
    for (std::size_t heads : {1u, 2u, 4u}) {
        const std::size_t b = 2, T = 3, d = 4;
        auto x = testutil::random_tensor({b, T, d}, rng);
        auto wq = testutil::random_tensor({d, d}, rng), wk = testutil::random_tensor({d, d}, rng), wv = testutil::random_tensor({d, d}, rng);
        Tape<double> t;
        auto out = ad::multi_head_attention(t, t.constant(x), t.constant(wq), t.constant(wk), t.constant(wv), heads);
        for (std::size_t n = 0; n < b; ++n) {
            std::vector<double> xn(x.data.begin() + static_cast<std::ptrdiff_t>(n * T * d), x.data.begin() + static_cast<std::ptrdiff_t>((n + 1) * T * d));
            auto ref = attention_oracle(xn, wq.data, wk.data, wv.data, T, d, heads);
            for (std::size_t i = 0; i < T * d; ++i) EXPECT_NEAR(t.value(out)[n * T * d + i], ref[i], kTol);
        }
    }
}

TEST(Attention, HeadsEqualIndependentSingleHeads)
{
    std::mt19937_64 rng(11);
    const std::size_t b = 2, T = 4, d = 6, heads = 3, dh = 2;
    auto q = testutil::random_tensor({b, T, d}, rng), k = testutil::random_tensor({b, T, d}, rng), v = testutil::random_tensor({b, T, d}, rng);
    Tape<double> t;
    auto multi = t.value(ad::attention(t, t.constant(q), t.constant(k), t.constant(v), heads));
    for (std::size_t h = 0; h < heads; ++h) {
        auto cols = [&](const T64& src) {
            T64 out({b, T, dh});
            for (std::size_t r = 0; r < b * T; ++r)
                for (std::size_t c = 0; c < dh; ++c) out.data[r * dh + c] = src.data[r * d + h * dh + c];
            return out;
        };
        auto single = t.value(ad::attention(t, t.constant(cols(q)), t.constant(cols(k)), t.constant(cols(v)), 1));
        for (std::size_t r = 0; r < b * T; ++r)
            for (std::size_t c = 0; c < dh; ++c) EXPECT_NEAR(multi[r * d + h * dh + c], single[r * dh + c], 1e-12);
    }
}

TEST(Attention, DivisibilityViolation)
{
    Tape<double> t;
    auto x = t.constant(T64({1, 2, 6}));
    auto w = t.constant(T64({6, 6}));
    EXPECT_THROW(ad::multi_head_attention(t, x, w, w, w, 4), ConfigError);
}

TEST(Attention, GradientCheck)
{
    std::mt19937_64 rng(12);
    for (std::size_t heads : {1u, 2u}) {
        std::vector<T64> in{testutil::random_tensor({2, 3, 4}, rng), testutil::random_tensor({4, 4}, rng), testutil::random_tensor({4, 4}, rng),
                            testutil::random_tensor({4, 4}, rng), testutil::random_tensor({4, 4}, rng)};
        expect_grad_ok(in, [heads](Tape<double>& t, const std::vector<Var>& v) {
            return weighted_sum(t, ad::multi_head_attention(t, v[0], v[1], v[2], v[3], heads, v[4]));
        }, 1e-5);
    }
}

TEST(Pooling, Examples)
{
    Tape<double> t;
    auto h = t.constant(tensor({1, 2, 2}, {0, 2, 2, 0}));
    EXPECT_EQ(t.value(ad::mean_hops(t, h)), (std::vector<double>{1, 1}));
    EXPECT_EQ(t.value(ad::max_hops(t, h)), (std::vector<double>{2, 2}));
    auto same = t.constant(tensor({1, 3, 2}, {4, -1, 4, -1, 4, -1}));
    EXPECT_EQ(t.value(ad::mean_hops(t, same)), (std::vector<double>{4, -1}));
    EXPECT_EQ(t.value(ad::max_hops(t, same)), (std::vector<double>{4, -1}));
}

TEST(Pooling, MeanGradientSpreadsEvenly)
{
    Tape<double> t;
    auto h = t.variable(T64({2, 4, 3}, 1.0));
    t.backward(ad::sum(t, ad::mean_hops(t, h)));
    for (double g : t.grad(h)) EXPECT_DOUBLE_EQ(g, 0.25);
}

TEST(Pooling, GradientChecks)
{
    std::mt19937_64 rng(13);
    auto x = testutil::random_tensor({2, 4, 3}, rng);
    expect_grad_ok({x}, [](Tape<double>& t, const std::vector<Var>& v) { return weighted_sum(t, ad::mean_hops(t, v[0])); });
    expect_grad_ok({x}, [](Tape<double>& t, const std::vector<Var>& v) { return weighted_sum(t, ad::max_hops(t, v[0])); });
    expect_grad_ok({x}, [](Tape<double>& t, const std::vector<Var>& v) { return weighted_sum(t, ad::hop_mean_all(t, v[0])); });
    expect_grad_ok({x}, [](Tape<double>& t, const std::vector<Var>& v) { return weighted_sum(t, ad::hop_mean_others(t, v[0])); });
    expect_grad_ok({x, testutil::random_tensor({3}, rng)}, [](Tape<double>& t, const std::vector<Var>& v) {
        auto w = ad::softmax(t, ad::project_last(t, v[0], v[1]));
        return weighted_sum(t, ad::weighted_hops(t, v[0], w));
    });
}

TEST(Elementwise, Examples)
{
    Tape<double> t;
    auto x = t.constant(tensor({3}, {-1, 2, 0.5}));
    auto zero = t.constant(T64({3}));
    auto sum = ad::add(t, x, zero);
    EXPECT_EQ(t.value(sum), (std::vector<double>{-1, 2, 0.5}));
    EXPECT_EQ(t.value(ad::relu(t, x)), (std::vector<double>{0, 2, 0.5}));
    std::mt19937_64 rng(14);
    auto h = t.constant(testutil::random_tensor({2, 3, 4}, rng));
    auto back = ad::reshape(t, ad::flatten(t, h), {2, 3, 4});
    EXPECT_EQ(t.shape(ad::flatten(t, h)), (Shape{2, 12}));
    EXPECT_EQ(t.value(back), t.value(h));
    EXPECT_THROW(ad::add(t, x, t.constant(T64({2}))), ConfigError);
}

TEST(Elementwise, GradientChecks)
{
    std::mt19937_64 rng(15);
    auto a = testutil::random_tensor({2, 3, 4}, rng), b = testutil::random_tensor({2, 3, 4}, rng);
    auto e = testutil::random_tensor({3, 4}, rng);
    expect_grad_ok({a, b}, [](Tape<double>& t, const std::vector<Var>& v) { return weighted_sum(t, ad::mul(t, ad::add(t, v[0], v[1]), v[0])); });
    expect_grad_ok({a, e}, [](Tape<double>& t, const std::vector<Var>& v) { return weighted_sum(t, ad::add_broadcast(t, v[0], v[1])); });
    expect_grad_ok({a}, [](Tape<double>& t, const std::vector<Var>& v) { return weighted_sum(t, ad::relu(t, ad::scale(t, v[0], 1.5))); });
    expect_grad_ok({a, b}, [](Tape<double>& t, const std::vector<Var>& v) { return weighted_sum(t, ad::concat_last(t, v[0], v[1])); });
    expect_grad_ok({e, e}, [](Tape<double>& t, const std::vector<Var>& v) { return weighted_sum(t, ad::concat_rows(t, v[0], v[1])); });
    expect_grad_ok({a}, [](Tape<double>& t, const std::vector<Var>& v) { return weighted_sum(t, ad::flatten(t, v[0])); });
}

TEST(Backward, BasicLosses)
{
    std::mt19937_64 rng(16);
    auto x0 = testutil::random_tensor({5}, rng);
    {
        Tape<double> t;
        auto x = t.variable(x0);
        t.backward(ad::sum(t, x));
        for (double g : t.grad(x)) EXPECT_DOUBLE_EQ(g, 1.0);
    }
    {
        Tape<double> t;
        auto x = t.variable(x0);
        t.backward(ad::scale(t, ad::sum(t, ad::mul(t, x, x)), 0.5));
        EXPECT_EQ(t.grad(x), x0.data);
    }
}

TEST(Backward, Errors)
{
    Tape<double> t;
    EXPECT_THROW(t.backward(Var{0}), std::exception);
    auto x = t.variable(T64({3}, 1.0));
    EXPECT_THROW(t.backward(ad::relu(t, x)), ConfigError);
    auto s = ad::sum(t, x);
    t.backward(s);
    EXPECT_THROW(t.backward(s), ConfigError);
    t.reset();
    auto y = t.variable(T64({2}, 1.0));
    EXPECT_NO_THROW(t.backward(ad::sum(t, y)));
}

TEST(Backward, ParameterGradientsAccumulateAndUnreachedStayZero)
{
    ParamStore<double> store;
    store.add("w", T64({2}, 3.0));
    store.add("unused", T64({2}, 1.0));
    for (int step = 0; step < 2; ++step) {
        Tape<double> t;
        auto w = t.parameter(store, "w");
        EXPECT_EQ(w.id, t.parameter(store, "w").id);
        t.parameter(store, "unused");
        t.backward(ad::sum(t, ad::mul(t, w, w)));
    }
    EXPECT_EQ(store.grad("w"), (std::vector<double>{12, 12}));
    EXPECT_EQ(store.grad("unused"), (std::vector<double>{0, 0}));
}

TEST(Forward, DeterministicGivenSeed)
{
    auto run = [] {
        std::mt19937_64 rng(17);
        auto x = testutil::random_tensor<float>({4, 3, 8}, rng);
        auto w = testutil::random_tensor<float>({8, 8}, rng);
        Tape<float> t;
        auto drop_rng = make_rng(5, RngPurpose::dropout);
        auto h = ad::dropout(t, t.constant(x), 0.3, drop_rng, true);
        return t.value(ad::multi_head_attention(t, h, t.constant(w), t.constant(w), t.constant(w), 2));
    };
    EXPECT_EQ(run(), run());
}
