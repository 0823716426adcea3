#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "fd_check.hpp"
#include "s2scast/tensorgrad.hpp"

using namespace s2scast;
using fdcheck::FdInput;
using fdcheck::max_fd_rel_error;

namespace {

std::string temp_path(const std::string& name) {
    return std::string("/tmp/s2scast_test_") + name;
}

// plain triple-loop reference for matmul checks
std::vector<double> naive_matmul(const std::vector<double>& a, std::size_t ar, std::size_t ac,
                                 bool ta, const std::vector<double>& b, std::size_t br,
                                 std::size_t bc, bool tb) {
    const std::size_t M = ta ? ac : ar;
    const std::size_t K = ta ? ar : ac;
    const std::size_t N = tb ? br : bc;
    std::vector<double> out(M * N, 0.0);
    for (std::size_t m = 0; m < M; ++m)
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t k = 0; k < K; ++k) {
                const double av = ta ? a[k * ac + m] : a[m * ac + k];
                const double bv = tb ? b[n * bc + k] : b[k * bc + n];
                out[m * N + n] += av * bv;
            }
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Scalar calculus sanity checks.
// ---------------------------------------------------------------------------

TEST_CASE("square function gradient at x=3 is 6") {
    Tensor x = Tensor::param({1}, {3.0});
    Tensor y = mul(x, x);
    y.backward();
    CHECK(y.values()[0] == Catch::Approx(9.0));
    CHECK(x.grad()[0] == Catch::Approx(6.0).margin(1e-12));
}

TEST_CASE("sigmoid at zero: value 0.5, slope 0.25") {
    Tensor x = Tensor::param({1}, {0.0});
    Tensor y = sigmoid(x);
    y.backward();
    CHECK(y.values()[0] == Catch::Approx(0.5).margin(1e-15));
    CHECK(x.grad()[0] == Catch::Approx(0.25).margin(1e-15));
}

TEST_CASE("tanh at zero has unit slope") {
    Tensor x = Tensor::param({1}, {0.0});
    tanh(x).backward();
    CHECK(x.grad()[0] == Catch::Approx(1.0).margin(1e-15));
}

TEST_CASE("value reused on several paths accumulates gradients") {
    // f(x) = x*x + 3x  =>  f'(2) = 2*2 + 3 = 7
    Tensor x = Tensor::param({1}, {2.0});
    Tensor y = add(mul(x, x), scale(x, 3.0));
    y.backward();
    CHECK(x.grad()[0] == Catch::Approx(7.0).margin(1e-12));
}

TEST_CASE("backward called twice accumulates into gradients") {
    Tensor x = Tensor::param({1}, {2.0});
    Tensor y = mul(x, x);
    y.backward();
    const double once = x.grad()[0];
    y.backward();
    CHECK(x.grad()[0] == Catch::Approx(2.0 * once).margin(1e-12));
    x.zero_grad();
    CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("backward rejects non-scalar losses and constant graphs") {
    Tensor x = Tensor::param({2, 2}, {1.0, 2.0, 3.0, 4.0});
    CHECK_THROWS_AS(mul(x, x).backward(), ArgumentError);

    Tensor c = Tensor::constant({1}, {5.0});
    CHECK_THROWS_AS(mul(c, c).backward(), ArgumentError);
}

// ---------------------------------------------------------------------------
// Shape rules.
// ---------------------------------------------------------------------------

TEST_CASE("binary ops broadcast only suffix shapes") {
    Tensor a = Tensor::param({3, 4}, std::vector<double>(12, 1.0));
    Tensor bias = Tensor::param({4}, {1.0, 2.0, 3.0, 4.0});
    Tensor y = add(a, bias);
    REQUIRE(y.shape() == Shape{3, 4});
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 4; ++c)
            CHECK(y.values()[r * 4 + c] == Catch::Approx(1.0 + double(c + 1)));

    // bias gradient sums over the leading axis
    reduce_sum_all(y).backward();
    for (std::size_t c = 0; c < 4; ++c) CHECK(bias.grad()[c] == Catch::Approx(3.0));

    Tensor wrong = Tensor::param({3}, {1.0, 1.0, 1.0});
    CHECK_THROWS_AS(add(a, wrong), ShapeError);
    CHECK_THROWS_AS(mul(a, Tensor::param({2, 4}, std::vector<double>(8, 0.0))), ShapeError);
}

TEST_CASE("tensor construction validates data length") {
    CHECK_THROWS_AS(Tensor::constant({2, 3}, {1.0, 2.0}), ShapeError);
}

// ---------------------------------------------------------------------------
// Matmul against a naive reference, all transpose combinations.
// ---------------------------------------------------------------------------

TEST_CASE("matmul matches triple-loop reference for every transpose flag pair") {
    Rng rng(99);
    for (int ta = 0; ta < 2; ++ta) {
        for (int tb = 0; tb < 2; ++tb) {
            const std::size_t M = 5, K = 7, N = 3;
            const std::size_t ar = ta ? K : M, ac = ta ? M : K;
            const std::size_t br = tb ? N : K, bc = tb ? K : N;
            std::vector<double> av(ar * ac), bv(br * bc);
            for (auto& v : av) v = rng.gaussian();
            for (auto& v : bv) v = rng.gaussian();
            Tensor a = Tensor::constant({ar, ac}, av);
            Tensor b = Tensor::constant({br, bc}, bv);
            Tensor c = matmul(a, b, ta != 0, tb != 0);
            const auto ref = naive_matmul(av, ar, ac, ta != 0, bv, br, bc, tb != 0);
            REQUIRE(c.shape() == Shape{M, N});
            for (std::size_t i = 0; i < ref.size(); ++i)
                CHECK(c.values()[i] == Catch::Approx(ref[i]).margin(1e-12));
        }
    }
}

TEST_CASE("matmul rejects mismatched inner dimensions and non-2-D operands") {
    Tensor a = Tensor::constant({2, 3}, std::vector<double>(6, 1.0));
    Tensor b = Tensor::constant({4, 3}, std::vector<double>(12, 1.0));
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
    CHECK_NOTHROW(matmul(a, b, false, true));
    Tensor v = Tensor::constant({3}, {1.0, 2.0, 3.0});
    CHECK_THROWS_AS(matmul(a, v), ShapeError);
}

// ---------------------------------------------------------------------------
// Softmax.
// ---------------------------------------------------------------------------

TEST_CASE("softmax of equal logits is uniform") {
    Tensor x = Tensor::constant({4}, {1.7, 1.7, 1.7, 1.7});
    Tensor y = softmax(x, 0);
    for (double v : y.values()) CHECK(v == Catch::Approx(0.25).margin(1e-15));
}

TEST_CASE("softmax rows sum to one along the chosen axis") {
    Rng rng(5);
    std::vector<double> data(7 * 5);
    for (auto& v : data) v = 10.0 * rng.gaussian();
    Tensor x = Tensor::constant({7, 5}, data);

    Tensor rows = softmax(x, 1);
    for (std::size_t r = 0; r < 7; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < 5; ++c) s += rows.values()[r * 5 + c];
        CHECK(std::fabs(s - 1.0) <= 1e-12);
    }
    Tensor cols = softmax(x, 0);
    for (std::size_t c = 0; c < 5; ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < 7; ++r) s += cols.values()[r * 5 + c];
        CHECK(std::fabs(s - 1.0) <= 1e-12);
    }
}

TEST_CASE("softmax is shift invariant and survives huge logits") {
    Tensor a = Tensor::constant({3}, {1000.0, 1001.0, 999.0});
    Tensor y = softmax(a, 0);
    REQUIRE(all_finite(y.values()));
    Tensor b = Tensor::constant({3}, {0.0, 1.0, -1.0});
    Tensor z = softmax(b, 0);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(y.values()[i] == Catch::Approx(z.values()[i]).margin(1e-14));
}

// ---------------------------------------------------------------------------
// Shape surgery ops.
// ---------------------------------------------------------------------------

TEST_CASE("concat then slice returns the original parts") {
    Tensor a = Tensor::constant({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::constant({2, 2}, {7, 8, 9, 10});
    Tensor cat = concat({a, b}, 1);
    REQUIRE(cat.shape() == Shape{2, 5});
    CHECK(cat.values() == std::vector<double>{1, 2, 3, 7, 8, 4, 5, 6, 9, 10});

    Tensor back = slice(cat, 1, 3, 2);
    CHECK(back.values() == b.values());

    Tensor rows = concat({a, a}, 0);
    REQUIRE(rows.shape() == Shape{4, 3});
    CHECK(slice(rows, 0, 2, 2).values() == a.values());

    CHECK_THROWS_AS(concat({a, b}, 0), ShapeError);
    CHECK_THROWS_AS(slice(cat, 1, 4, 2), ShapeError);
}

TEST_CASE("expand repeats a unit axis and its gradient sums back") {
    Tensor x = Tensor::param({1, 3}, {1.0, 2.0, 3.0});
    Tensor y = expand(x, 0, 4);
    REQUIRE(y.shape() == Shape{4, 3});
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 3; ++c)
            CHECK(y.values()[r * 3 + c] == Catch::Approx(double(c + 1)));
    reduce_sum_all(y).backward();
    for (std::size_t c = 0; c < 3; ++c) CHECK(x.grad()[c] == Catch::Approx(4.0));
    CHECK_THROWS_AS(expand(y, 0, 2), ShapeError);
}

TEST_CASE("row select, scatter, and gather semantics") {
    Tensor x = Tensor::param({3, 2}, {1, 2, 3, 4, 5, 6});

    Tensor sel = select_rows(x, {2, 0, 2});
    CHECK(sel.values() == std::vector<double>{5, 6, 1, 2, 5, 6});

    Tensor scat = scatter_rows(Tensor::constant({2, 2}, {10, 20, 30, 40}), {2, 0}, 4);
    REQUIRE(scat.shape() == Shape{4, 2});
    CHECK(scat.values() == std::vector<double>{30, 40, 0, 0, 10, 20, 0, 0});

    Tensor picked = gather_rows(x, {1, 0, 1});
    CHECK(picked.values() == std::vector<double>{2, 3, 6});

    // duplicated selection accumulates gradient on the shared row
    reduce_sum_all(sel).backward();
    CHECK(x.grad()[4] == Catch::Approx(2.0));
    CHECK(x.grad()[0] == Catch::Approx(1.0));
    CHECK(x.grad()[2] == Catch::Approx(0.0));

    CHECK_THROWS_AS(select_rows(x, {3}), ArgumentError);
    CHECK_THROWS_AS(gather_rows(x, {0, 0}), ShapeError);
    CHECK_THROWS_AS(scatter_rows(x, {0, 1, 4}, 4), ArgumentError);
}

TEST_CASE("reductions match manual sums") {
    Tensor x = Tensor::constant({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(reduce_sum(x, 0).values() == std::vector<double>{5, 7, 9});
    CHECK(reduce_sum(x, 1).values() == std::vector<double>{6, 15});
    CHECK(reduce_sum(x, 1, true).shape() == Shape{2, 1});
    CHECK(reduce_mean(x, 0).values() == std::vector<double>{2.5, 3.5, 4.5});
    CHECK(reduce_sum_all(x).values()[0] == Catch::Approx(21.0));
    CHECK(reduce_mean_all(x).values()[0] == Catch::Approx(3.5));
}

// ---------------------------------------------------------------------------
// Dropout.
// ---------------------------------------------------------------------------

TEST_CASE("dropout in eval mode is the identity") {
    Tensor x = Tensor::param({4, 4}, std::vector<double>(16, 2.5));
    Tensor y = dropout(x, 0.5, false, 1, 2, 3);
    CHECK(y.values() == x.values());
    Tensor z = dropout(x, 0.0, true, 1, 2, 3);
    CHECK(z.values() == x.values());
}

TEST_CASE("dropout in train mode preserves the mean within two percent") {
    const std::size_t n = 200 * 200;
    Tensor x = Tensor::constant({200, 200}, std::vector<double>(n, 1.0));
    Tensor y = dropout(x, 0.3, true, /*seed=*/7, /*layer=*/1, /*step=*/0);
    const double mean = std::accumulate(y.values().begin(), y.values().end(), 0.0) / double(n);
    CHECK(std::fabs(mean - 1.0) <= 0.02);

    // masks are a pure function of (seed, layer, step)
    Tensor y2 = dropout(x, 0.3, true, 7, 1, 0);
    CHECK(y2.values() == y.values());
    Tensor y3 = dropout(x, 0.3, true, 7, 1, 1);
    CHECK(y3.values() != y.values());
    Tensor y4 = dropout(x, 0.3, true, 8, 1, 0);
    CHECK(y4.values() != y.values());
}

TEST_CASE("dropout rejects out-of-range rates") {
    Tensor x = Tensor::constant({2}, {1.0, 2.0});
    CHECK_THROWS_AS(dropout(x, 1.0, true, 0, 0, 0), ArgumentError);
    CHECK_THROWS_AS(dropout(x, -0.1, true, 0, 0, 0), ArgumentError);
}

// ---------------------------------------------------------------------------
// Layer norm and batch norm.
// ---------------------------------------------------------------------------

TEST_CASE("layer_norm standardizes each row") {
    Rng rng(11);
    std::vector<double> data(6 * 5);
    for (auto& v : data) v = 3.0 * rng.gaussian() + 1.0;
    Tensor x = Tensor::constant({6, 5}, data);
    Tensor gamma = Tensor::constant({5}, std::vector<double>(5, 1.0));
    Tensor beta = Tensor::constant({5}, std::vector<double>(5, 0.0));
    Tensor y = layer_norm(x, gamma, beta, 1e-12);
    for (std::size_t r = 0; r < 6; ++r) {
        double m = 0.0, v2 = 0.0;
        for (std::size_t c = 0; c < 5; ++c) m += y.values()[r * 5 + c];
        m /= 5.0;
        for (std::size_t c = 0; c < 5; ++c) {
            const double d = y.values()[r * 5 + c] - m;
            v2 += d * d;
        }
        v2 /= 5.0;
        CHECK(std::fabs(m) <= 1e-9);
        CHECK(v2 == Catch::Approx(1.0).margin(1e-6));
    }
    CHECK_THROWS_AS(layer_norm(x, Tensor::constant({4}, std::vector<double>(4, 1.0)), beta),
                    ShapeError);
}

TEST_CASE("batch_norm train mode standardizes each feature and records stats") {
    Rng rng(12);
    std::vector<double> data(30 * 3);
    for (auto& v : data) v = 2.0 * rng.gaussian() - 4.0;
    Tensor x = Tensor::constant({30, 3}, data);
    Tensor gamma = Tensor::constant({3}, {1.0, 1.0, 1.0});
    Tensor beta = Tensor::constant({3}, {0.0, 0.0, 0.0});
    BatchNormState state;
    Tensor y = batch_norm(x, gamma, beta, state, true);

    for (std::size_t f = 0; f < 3; ++f) {
        double m = 0.0, v2 = 0.0;
        for (std::size_t b = 0; b < 30; ++b) m += y.values()[b * 3 + f];
        m /= 30.0;
        for (std::size_t b = 0; b < 30; ++b) {
            const double d = y.values()[b * 3 + f] - m;
            v2 += d * d;
        }
        v2 /= 30.0;
        CHECK(std::fabs(m) <= 1e-9);
        CHECK(v2 == Catch::Approx(1.0).margin(1e-4));

        // first batch seeds running stats with the batch stats
        double bm = 0.0;
        for (std::size_t b = 0; b < 30; ++b) bm += data[b * 3 + f];
        bm /= 30.0;
        CHECK(state.running_mean[f] == Catch::Approx(bm).margin(1e-12));
    }
    REQUIRE(state.initialized);

    // second batch blends with momentum
    const double before = state.running_mean[0];
    batch_norm(x, gamma, beta, state, true);
    CHECK(state.running_mean[0] == Catch::Approx(before).margin(1e-12));
}

TEST_CASE("batch_norm eval mode is frozen and deterministic") {
    Tensor gamma = Tensor::constant({2}, {2.0, 1.0});
    Tensor beta = Tensor::constant({2}, {0.5, -0.5});
    BatchNormState state;
    state.running_mean = {1.0, -1.0};
    state.running_var = {4.0, 9.0};
    state.eps = 0.0;
    state.initialized = true;

    Tensor x = Tensor::constant({2, 2}, {3.0, 2.0, -1.0, -4.0});
    Tensor y1 = batch_norm(x, gamma, beta, state, false);
    Tensor y2 = batch_norm(x, gamma, beta, state, false);
    CHECK(y1.values() == y2.values());

    // closed form: gamma * (x - mean) / sd + beta
    CHECK(y1.values()[0] == Catch::Approx(2.0 * (3.0 - 1.0) / 2.0 + 0.5));
    CHECK(y1.values()[1] == Catch::Approx(1.0 * (2.0 + 1.0) / 3.0 - 0.5));
    CHECK(y1.values()[2] == Catch::Approx(2.0 * (-1.0 - 1.0) / 2.0 + 0.5));
    CHECK(y1.values()[3] == Catch::Approx(1.0 * (-4.0 + 1.0) / 3.0 - 0.5));

    // eval must not touch the stored statistics
    CHECK(state.running_mean == std::vector<double>{1.0, -1.0});
    CHECK(state.running_var == std::vector<double>{4.0, 9.0});
}

// ---------------------------------------------------------------------------
// Attention.
// ---------------------------------------------------------------------------

TEST_CASE("attention with a single token returns V") {
    Tensor q = Tensor::constant({1, 4}, {0.3, -0.7, 2.0, 0.1});
    Tensor k = Tensor::constant({1, 4}, {1.0, 1.0, -1.0, 0.5});
    Tensor v = Tensor::constant({1, 4}, {5.0, 6.0, 7.0, 8.0});
    for (std::size_t heads : {std::size_t{1}, std::size_t{2}, std::size_t{4}}) {
        Tensor out = scaled_dot_product_attention(q, k, v, heads);
        REQUIRE(out.shape() == Shape{1, 4});
        for (std::size_t i = 0; i < 4; ++i)
            CHECK(out.values()[i] == Catch::Approx(v.values()[i]).margin(1e-14));
    }
}

TEST_CASE("attention output rows are convex combinations of V rows") {
    Rng rng(21);
    std::vector<double> qd(6 * 8), kd(6 * 8), vd(6 * 8);
    for (auto& x : qd) x = rng.gaussian();
    for (auto& x : kd) x = rng.gaussian();
    for (auto& x : vd) x = rng.gaussian();
    Tensor out = scaled_dot_product_attention(Tensor::constant({6, 8}, qd),
                                              Tensor::constant({6, 8}, kd),
                                              Tensor::constant({6, 8}, vd), 2);
    REQUIRE(out.shape() == Shape{6, 8});
    // every output element must lie inside the per-head column range of V
    for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t c = h * 4; c < (h + 1) * 4; ++c) {
            double lo = 1e30, hi = -1e30;
            for (std::size_t r = 0; r < 6; ++r) {
                lo = std::min(lo, vd[r * 8 + c]);
                hi = std::max(hi, vd[r * 8 + c]);
            }
            for (std::size_t r = 0; r < 6; ++r) {
                CHECK(out.values()[r * 8 + c] >= lo - 1e-12);
                CHECK(out.values()[r * 8 + c] <= hi + 1e-12);
            }
        }
}

TEST_CASE("attention validates head divisibility and widths") {
    Tensor q = Tensor::constant({2, 6}, std::vector<double>(12, 0.0));
    CHECK_THROWS_AS(scaled_dot_product_attention(q, q, q, 4), ShapeError);
    CHECK_THROWS_AS(scaled_dot_product_attention(q, q, q, 0), ShapeError);
    Tensor narrow = Tensor::constant({2, 4}, std::vector<double>(8, 0.0));
    CHECK_THROWS_AS(scaled_dot_product_attention(q, narrow, q, 2), ShapeError);
}

// ---------------------------------------------------------------------------
// Finite-difference sweeps, one clause per op family.
// ---------------------------------------------------------------------------

TEST_CASE("finite differences confirm elementwise arithmetic gradients") {
    Rng rng(31);
    auto a = fdcheck::random_input({3, 4}, rng);
    auto b = fdcheck::random_positive_input({3, 4}, rng);
    auto bias = fdcheck::random_positive_input({4}, rng);

    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return add(t[0], t[1]); }, {a, b}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return sub(t[0], t[1]); }, {a, b}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return mul(t[0], t[1]); }, {a, b}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return div(t[0], t[1]); }, {a, b}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return add(t[0], t[1]); }, {a, bias}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return mul(t[0], t[1]); }, {a, bias}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return div(t[0], t[1]); }, {a, bias}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return scale(neg(add_const(t[0], 0.7)), -1.3); }, {a}) <= 1e-6);
}

TEST_CASE("finite differences confirm unary op gradients") {
    Rng rng(32);
    auto smooth = fdcheck::random_input({4, 5}, rng);
    auto positive = fdcheck::random_positive_input({4, 5}, rng);
    auto kinkfree = fdcheck::random_kink_free_input({4, 5}, rng);

    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return sigmoid(t[0]); }, {smooth}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return tanh(t[0]); }, {smooth}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return gelu(t[0]); }, {smooth}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return exp(t[0]); }, {smooth}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return log(t[0]); }, {positive}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return sqrt(t[0]); }, {positive}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return relu(t[0]); }, {kinkfree}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return clamp_min(t[0], 0.1); }, {kinkfree}) <= 1e-6);
}

TEST_CASE("finite differences confirm matmul gradients for all transpose pairs") {
    Rng rng(33);
    for (int ta = 0; ta < 2; ++ta)
        for (int tb = 0; tb < 2; ++tb) {
            const std::size_t M = 3, K = 4, N = 2;
            auto a = fdcheck::random_input({ta ? K : M, ta ? M : K}, rng);
            auto b = fdcheck::random_input({tb ? N : K, tb ? K : N}, rng);
            CHECK(max_fd_rel_error(
                      [ta, tb](const std::vector<Tensor>& t) {
                          return matmul(t[0], t[1], ta != 0, tb != 0);
                      },
                      {a, b}) <= 1e-6);
        }
}

TEST_CASE("finite differences confirm shape surgery gradients") {
    Rng rng(34);
    auto a = fdcheck::random_input({3, 4}, rng);
    auto b = fdcheck::random_input({2, 4}, rng);
    auto c = fdcheck::random_input({3, 2}, rng);
    auto unit = fdcheck::random_input({1, 4}, rng);

    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return concat({t[0], t[1]}, 0); }, {a, b}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return concat({t[0], t[1]}, 1); }, {a, c}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return slice(t[0], 1, 1, 2); }, {a}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return expand(t[0], 0, 5); }, {unit}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return select_rows(t[0], {2, 0, 2, 1}); }, {a}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return scatter_rows(t[0], {4, 1, 0}, 6); }, {a}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return gather_rows(t[0], {3, 0, 1}); }, {a}) <= 1e-6);
}

TEST_CASE("finite differences confirm reduction and softmax gradients") {
    Rng rng(35);
    auto a = fdcheck::random_input({3, 4}, rng);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return reduce_sum(t[0], 0); }, {a}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return reduce_mean(t[0], 1, true); }, {a}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return reduce_sum_all(t[0]); }, {a}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return reduce_mean_all(t[0]); }, {a}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return reduce_max(t[0], 1); }, {a}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return reduce_min(t[0], 0, true); }, {a}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return softmax(t[0], 0); }, {a}) <= 1e-6);
    CHECK(max_fd_rel_error([](const std::vector<Tensor>& t) { return softmax(t[0], 1); }, {a}) <= 1e-6);
}

TEST_CASE("reduce_max and reduce_min pick the right extremes") {
    Tensor x = Tensor::param({2, 3}, {5, -1, 2, 0, 7, -3});
    CHECK(reduce_max(x, 1).values() == std::vector<double>{5, 7});
    CHECK(reduce_min(x, 1).values() == std::vector<double>{-1, -3});
    CHECK(reduce_max(x, 0).values() == std::vector<double>{5, 7, 2});
    reduce_sum_all(reduce_max(x, 1)).backward();
    CHECK(x.grad() == std::vector<double>{1, 0, 0, 0, 1, 0});
}

TEST_CASE("finite differences confirm dropout, norm, and attention gradients") {
    Rng rng(36);
    auto x = fdcheck::random_input({4, 6}, rng);
    auto gamma = fdcheck::random_positive_input({6}, rng);
    auto beta = fdcheck::random_input({6}, rng);

    CHECK(max_fd_rel_error(
              [](const std::vector<Tensor>& t) { return dropout(t[0], 0.4, true, 3, 1, 2); },
              {x}) <= 1e-6);
    CHECK(max_fd_rel_error(
              [](const std::vector<Tensor>& t) { return layer_norm(t[0], t[1], t[2]); },
              {x, gamma, beta}) <= 1e-6);
    CHECK(max_fd_rel_error(
              [](const std::vector<Tensor>& t) {
                  BatchNormState state;
                  return batch_norm(t[0], t[1], t[2], state, true);
              },
              {x, gamma, beta}) <= 1e-6);

    auto q = fdcheck::random_input({3, 4}, rng);
    auto k = fdcheck::random_input({3, 4}, rng);
    auto v = fdcheck::random_input({3, 4}, rng);
    CHECK(max_fd_rel_error(
              [](const std::vector<Tensor>& t) {
                  return scaled_dot_product_attention(t[0], t[1], t[2], 2);
              },
              {q, k, v}) <= 1e-6);
}

TEST_CASE("finite differences confirm a three-layer network end to end") {
    Rng rng(37);
    auto x = fdcheck::random_input({5, 6}, rng);
    auto w1 = fdcheck::random_input({6, 8}, rng);
    auto b1 = fdcheck::random_input({8}, rng);
    auto w2 = fdcheck::random_input({8, 8}, rng);
    auto b2 = fdcheck::random_input({8}, rng);
    auto w3 = fdcheck::random_input({8, 4}, rng);
    auto b3 = fdcheck::random_input({4}, rng);
    const std::vector<std::size_t> labels = {0, 3, 1, 2, 0};

    auto net = [labels](const std::vector<Tensor>& t) {
        Tensor h1 = tanh(add(matmul(t[0], t[1]), t[2]));
        Tensor h2 = gelu(add(matmul(h1, t[3]), t[4]));
        Tensor logits = add(matmul(h2, t[5]), t[6]);
        Tensor probs = softmax(logits, 1);
        Tensor picked = gather_rows(probs, labels);
        return neg(reduce_mean_all(log(clamp_min(picked, 1e-12))));
    };
    CHECK(max_fd_rel_error(net, {x, w1, b1, w2, b2, w3, b3}) <= 1e-6);
}

// ---------------------------------------------------------------------------
// Optimizer.
// ---------------------------------------------------------------------------

TEST_CASE("adam with zero gradients leaves parameters untouched") {
    Tensor w = Tensor::param({3}, {1.0, -2.0, 0.5});
    Adam opt({w}, AdamConfig{});
    opt.zero_grad();
    opt.step();
    CHECK(w.values() == std::vector<double>{1.0, -2.0, 0.5});
}

TEST_CASE("adam minimizes a quadratic") {
    Tensor w = Tensor::param({2}, {4.0, -3.0});
    AdamConfig cfg;
    cfg.lr = 0.1;
    Adam opt({w}, cfg);
    for (int i = 0; i < 300; ++i) {
        opt.zero_grad();
        reduce_sum_all(mul(w, w)).backward();
        opt.step();
    }
    CHECK(std::fabs(w.values()[0]) < 1e-3);
    CHECK(std::fabs(w.values()[1]) < 1e-3);
}

TEST_CASE("global norm clipping rescales exactly to the threshold") {
    Tensor a = Tensor::param({2}, {0.0, 0.0});
    Tensor b = Tensor::param({1}, {0.0});
    // hand-built gradient of norm 10: (6, 0) and (8)
    a.grad() = {6.0, 0.0};
    b.grad() = {8.0};
    std::vector<Tensor> params{a, b};
    const double before = clip_global_norm(params, 0.827);
    CHECK(before == Catch::Approx(10.0).margin(1e-12));
    const double after = std::sqrt(a.grad()[0] * a.grad()[0] + a.grad()[1] * a.grad()[1] +
                                   b.grad()[0] * b.grad()[0]);
    CHECK(std::fabs(after - 0.827) <= 1e-10);

    // below the threshold nothing moves
    a.grad() = {0.1, 0.0};
    b.grad() = {0.2};
    clip_global_norm(params, 0.827);
    CHECK(a.grad()[0] == 0.1);
    CHECK(b.grad()[0] == 0.2);
}

// ---------------------------------------------------------------------------
// Checkpoints.
// ---------------------------------------------------------------------------

TEST_CASE("checkpoint round trip preserves shapes and exact values") {
    const std::string path = temp_path("ckpt.tsr");
    Checkpoint saved;
    saved["encoder.w"] = {{3, 4}, std::vector<double>{0.1, -2.5e-14, 3.0, 4.0, 5.5, 6.0, 7.0, 8.0,
                                                      9.0, 1.0 / 3.0, 11.0, 1e300}};
    saved["encoder.b"] = {{4}, {1.0, 2.0, 3.0, 4.0}};
    saved["scalar"] = {{1}, {0.123456789012345678}};
    save_checkpoint(saved, path);

    const Checkpoint loaded = load_checkpoint(path);
    REQUIRE(loaded.size() == 3);
    REQUIRE(loaded.count("encoder.w") == 1);
    CHECK(loaded.at("encoder.w").shape == Shape{3, 4});
    CHECK(loaded.at("encoder.w").values == saved.at("encoder.w").values);
    CHECK(loaded.at("encoder.b").values == saved.at("encoder.b").values);
    CHECK(loaded.at("scalar").values == saved.at("scalar").values);

    CHECK(checkpoint_digest(loaded) == checkpoint_digest(saved));
    std::remove(path.c_str());
}

TEST_CASE("checkpoint digest distinguishes different parameter values") {
    Checkpoint a, b;
    a["w"] = {{2}, {1.0, 2.0}};
    b["w"] = {{2}, {1.0, 2.0000000001}};
    CHECK(checkpoint_digest(a) != checkpoint_digest(b));
}

TEST_CASE("checkpoint reader rejects damaged files") {
    const std::string path = temp_path("ckpt_bad.tsr");
    Checkpoint saved;
    saved["w"] = {{2, 2}, {1.0, 2.0, 3.0, 4.0}};
    save_checkpoint(saved, path);

    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    SECTION("wrong magic") {
        bytes[0] = 'X';
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.close();
        CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    }
    SECTION("truncated payload") {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 9));
        out.close();
        CHECK_THROWS_AS(load_checkpoint(path), CorruptionError);
    }
    SECTION("trailing garbage") {
        bytes += "junk";
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.close();
        CHECK_THROWS_AS(load_checkpoint(path), CorruptionError);
    }
    std::remove(path.c_str());
}

TEST_CASE("checkpoint writer validates entry consistency") {
    Checkpoint bad;
    bad["w"] = {{2, 2}, {1.0, 2.0}};
    CHECK_THROWS_AS(save_checkpoint(bad, temp_path("ckpt_invalid.tsr")), ValidationError);
}
