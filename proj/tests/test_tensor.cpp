#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "omniflow/ops.hpp"
#include "omniflow/tensor.hpp"
#include "testutil.hpp"

using namespace omniflow;
using testutil::fd_grad;
using testutil::max_abs_diff;
using testutil::max_rel_err;

namespace {

// Independent triple-loop product used as the matmul oracle.  Accumulates in
// the same k-ascending order, so agreement must be exact, not approximate.
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
    Tensor c({a.rows(), b.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) acc += a.at(i, k) * b.at(k, j);
            c.at(i, j) = acc;
        }
    return c;
}

double dot_all(const Tensor& w, const Tensor& x) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.data.size(); ++i) s += w.data[i] * x.data[i];
    return s;
}

}  // namespace

TEST_CASE("tensor construction and accessors") {
    Tensor t({2, 3});
    REQUIRE(t.size() == 6);
    REQUIRE(t.rank() == 2);
    for (double v : t.data) REQUIRE(v == 0.0);

    Tensor u({2, 2}, {1, 2, 3, 4});
    REQUIRE(u.at(0, 1) == 2.0);
    REQUIRE(u.at(1, 0) == 3.0);

    REQUIRE_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), std::invalid_argument);

    Tensor i3 = Tensor::identity(3);
    REQUIRE(i3.at(0, 0) == 1.0);
    REQUIRE(i3.at(0, 1) == 0.0);
    REQUIRE(i3.at(2, 2) == 1.0);
}

TEST_CASE("matmul identity") {
    Tensor i2 = Tensor::identity(2);
    Tensor out = matmul(i2, i2);
    REQUIRE(out.same_shape(i2));
    REQUIRE(max_abs_diff(out, i2) == 0.0);
}

TEST_CASE("matmul hand-worked 2x2 by 2x1") {
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor b({2, 1}, {0, 1});
    Tensor c = matmul(a, b);
    REQUIRE(c.rows() == 2);
    REQUIRE(c.cols() == 1);
    REQUIRE(c.at(0, 0) == 2.0);
    REQUIRE(c.at(1, 0) == 4.0);
}

TEST_CASE("matmul matches naive oracle exactly on random input") {
    Rng rng(11);
    Tensor a = rng.normal_tensor({3, 4});
    Tensor b = rng.normal_tensor({4, 2});
    Tensor got = matmul(a, b);
    Tensor want = naive_matmul(a, b);
    REQUIRE(got.same_shape(want));
    for (std::size_t i = 0; i < got.data.size(); ++i) REQUIRE(got.data[i] == want.data[i]);
}

TEST_CASE("matmul rejects inner-dimension mismatch") {
    Tensor a({2, 3});
    Tensor b({2, 3});
    REQUIRE_THROWS_AS(matmul(a, b), std::invalid_argument);
}

TEST_CASE("matmul backward matches finite differences") {
    Rng rng(12);
    Tensor a = rng.normal_tensor({3, 4});
    Tensor b = rng.normal_tensor({4, 2});
    Tensor w = rng.normal_tensor({3, 2});  // fixed weights define the scalar loss

    Tensor da, db;
    matmul_backward(w, a, b, da, db);

    Tensor fd_a = fd_grad([&](const Tensor& x) { return dot_all(w, matmul(x, b)); }, a);
    Tensor fd_b = fd_grad([&](const Tensor& x) { return dot_all(w, matmul(a, x)); }, b);
    REQUIRE(max_rel_err(da, fd_a) < 1e-5);
    REQUIRE(max_rel_err(db, fd_b) < 1e-5);
}

TEST_CASE("softmax of a constant row is uniform") {
    Tensor x({1, 3}, {0.7, 0.7, 0.7});
    Tensor y = softmax_rows(x);
    for (double v : y.data) REQUIRE(std::fabs(v - 1.0 / 3.0) < 1e-15);
}

TEST_CASE("softmax of [0, ln 3] is [0.25, 0.75]") {
    Tensor x({1, 2}, {0.0, std::log(3.0)});
    Tensor y = softmax_rows(x);
    REQUIRE(std::fabs(y.at(0, 0) - 0.25) < 1e-12);
    REQUIRE(std::fabs(y.at(0, 1) - 0.75) < 1e-12);
}

TEST_CASE("softmax is stable for large logits") {
    Tensor x({1, 2}, {1000.0, 0.0});
    Tensor y = softmax_rows(x);
    REQUIRE(y.all_finite());
    REQUIRE(y.at(0, 0) > 0.999999);
    REQUIRE(y.at(0, 1) >= 0.0);
}

TEST_CASE("softmax rows sum to one and respect column permutations") {
    Rng rng(13);
    Tensor x = rng.normal_tensor({5, 7}, 3.0);
    Tensor y = softmax_rows(x);
    for (std::size_t r = 0; r < y.rows(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < y.cols(); ++c) s += y.at(r, c);
        REQUIRE(std::fabs(s - 1.0) < 1e-12);
    }

    // Swap two columns of the input; the output must swap the same columns.
    Tensor xp = x;
    for (std::size_t r = 0; r < x.rows(); ++r) std::swap(xp.at(r, 1), xp.at(r, 4));
    Tensor yp = softmax_rows(xp);
    for (std::size_t r = 0; r < y.rows(); ++r)
        for (std::size_t c = 0; c < y.cols(); ++c) {
            std::size_t src = c == 1 ? 4 : c == 4 ? 1 : c;
            REQUIRE(std::fabs(yp.at(r, c) - y.at(r, src)) < 1e-15);
        }
}

TEST_CASE("softmax backward matches finite differences") {
    Rng rng(14);
    Tensor x = rng.normal_tensor({4, 5});
    Tensor w = rng.normal_tensor({4, 5});
    Tensor y = softmax_rows(x);
    Tensor dx = softmax_rows_backward(w, y);
    Tensor fd = fd_grad([&](const Tensor& t) { return dot_all(w, softmax_rows(t)); }, x);
    REQUIRE(max_rel_err(dx, fd) < 1e-5);
}

TEST_CASE("attention with a single key returns that value row") {
    Tensor q({3, 2}, {0.3, -1.0, 2.0, 0.1, 0.0, 0.0});
    Tensor k({1, 2}, {5.0, -2.0});
    Tensor v({1, 4}, {1.0, 2.0, 3.0, 4.0});
    Tensor out = scaled_dot_attention(q, k, v);
    REQUIRE(out.rows() == 3);
    REQUIRE(out.cols() == 4);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 4; ++c) REQUIRE(out.at(r, c) == v.at(0, c));
}

TEST_CASE("attention with identity q/k/v matches brute-force oracle") {
    Tensor i2 = Tensor::identity(2);
    Tensor out = scaled_dot_attention(i2, i2, i2);

    // Oracle computed from first principles for each query row.
    const double s = 1.0 / std::sqrt(2.0);
    const double e = std::exp(s);
    const double p_hi = e / (e + 1.0);
    const double p_lo = 1.0 / (e + 1.0);
    REQUIRE(std::fabs(out.at(0, 0) - p_hi) < 1e-12);
    REQUIRE(std::fabs(out.at(0, 1) - p_lo) < 1e-12);
    REQUIRE(std::fabs(out.at(1, 0) - p_lo) < 1e-12);
    REQUIRE(std::fabs(out.at(1, 1) - p_hi) < 1e-12);
}

TEST_CASE("attention scaling tracks key dimension") {
    // Zero-padding q and k to twice the width halves q.k, while scaling k by
    // sqrt(2) must restore the original logits exactly.
    Rng rng(15);
    Tensor q = rng.normal_tensor({4, 3});
    Tensor k = rng.normal_tensor({5, 3});
    Tensor v = rng.normal_tensor({5, 6});
    Tensor base = scaled_dot_attention(q, k, v);

    Tensor q2({4, 6});
    Tensor k2({5, 6});
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 3; ++c) q2.at(r, c) = q.at(r, c);
    const double root2 = std::sqrt(2.0);
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t c = 0; c < 3; ++c) k2.at(r, c) = k.at(r, c) * root2;
    Tensor padded = scaled_dot_attention(q2, k2, v);
    REQUIRE(max_abs_diff(base, padded) < 1e-12);
}

TEST_CASE("attention equals its three-step composition exactly") {
    Rng rng(16);
    Tensor q = rng.normal_tensor({4, 3});
    Tensor k = rng.normal_tensor({5, 3});
    Tensor v = rng.normal_tensor({5, 2});

    Tensor logits = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(3.0));
    Tensor want = matmul(softmax_rows(logits), v);
    Tensor got = scaled_dot_attention(q, k, v);
    for (std::size_t i = 0; i < got.data.size(); ++i) REQUIRE(got.data[i] == want.data[i]);
}

TEST_CASE("attention rejects mismatched key/value row counts") {
    Tensor q({2, 3});
    Tensor k({4, 3});
    Tensor v({5, 2});
    REQUIRE_THROWS_AS(scaled_dot_attention(q, k, v), std::invalid_argument);
}

TEST_CASE("attention backward matches finite differences") {
    Rng rng(17);
    Tensor q = rng.normal_tensor({3, 4});
    Tensor k = rng.normal_tensor({5, 4});
    Tensor v = rng.normal_tensor({5, 2});
    Tensor w = rng.normal_tensor({3, 2});

    AttentionGrads g = scaled_dot_attention_backward(w, q, k, v);
    Tensor fq = fd_grad([&](const Tensor& t) { return dot_all(w, scaled_dot_attention(t, k, v)); }, q);
    Tensor fk = fd_grad([&](const Tensor& t) { return dot_all(w, scaled_dot_attention(q, t, v)); }, k);
    Tensor fv = fd_grad([&](const Tensor& t) { return dot_all(w, scaled_dot_attention(q, k, t)); }, v);
    REQUIRE(max_rel_err(g.d_q, fq) < 1e-5);
    REQUIRE(max_rel_err(g.d_k, fk) < 1e-5);
    REQUIRE(max_rel_err(g.d_v, fv) < 1e-5);
}

TEST_CASE("linear layer identity and hand-worked case") {
    Tensor x({1, 2}, {1.0, 1.0});
    Tensor w_id = Tensor::identity(2);
    Tensor b0({2});
    Tensor y0 = linear_forward(x, w_id, b0);
    REQUIRE(y0.at(0, 0) == 1.0);
    REQUIRE(y0.at(0, 1) == 1.0);

    Tensor w({2, 2}, {1, 0, 0, 2});
    Tensor b({2}, {1, 1});
    Tensor y = linear_forward(x, w, b);
    REQUIRE(y.at(0, 0) == 2.0);
    REQUIRE(y.at(0, 1) == 3.0);
}

TEST_CASE("linear backward matches finite differences") {
    Rng rng(18);
    Tensor x = rng.normal_tensor({4, 3});
    Tensor w = rng.normal_tensor({3, 5});
    Tensor b = rng.normal_tensor({5});
    Tensor up = rng.normal_tensor({4, 5});

    Tensor dx, dw, db;
    linear_backward(up, x, w, dx, dw, db);
    Tensor fx = fd_grad([&](const Tensor& t) { return dot_all(up, linear_forward(t, w, b)); }, x);
    Tensor fw = fd_grad([&](const Tensor& t) { return dot_all(up, linear_forward(x, t, b)); }, w);
    Tensor fb = fd_grad([&](const Tensor& t) { return dot_all(up, linear_forward(x, w, t)); }, b);
    REQUIRE(max_rel_err(dx, fx) < 1e-5);
    REQUIRE(max_rel_err(dw, fw) < 1e-6);
    REQUIRE(max_rel_err(db, fb) < 1e-6);
}

TEST_CASE("rms_norm hand-worked rows") {
    Tensor gain({2}, {1.0, 1.0});

    Tensor ones({1, 2}, {1.0, 1.0});
    Tensor y1 = rms_norm(ones, gain);
    // mean square is 1, plus eps; output is 1/sqrt(1+eps), barely below 1.
    REQUIRE(std::fabs(y1.at(0, 0) - 1.0 / std::sqrt(1.0 + kRmsEps)) < 1e-15);

    Tensor x({1, 2}, {3.0, 4.0});
    Tensor y = rms_norm(x, gain);
    const double inv = 1.0 / std::sqrt(12.5 + kRmsEps);
    REQUIRE(std::fabs(y.at(0, 0) - 3.0 * inv) < 1e-15);
    REQUIRE(std::fabs(y.at(0, 1) - 4.0 * inv) < 1e-15);

    Tensor z({1, 2});
    Tensor yz = rms_norm(z, gain);
    REQUIRE(yz.at(0, 0) == 0.0);
    REQUIRE(yz.at(0, 1) == 0.0);
    REQUIRE(yz.all_finite());
}

TEST_CASE("rms_norm applies gain per column") {
    Tensor gain({3}, {2.0, 0.5, -1.0});
    Tensor x({1, 3}, {1.0, 1.0, 1.0});
    Tensor y = rms_norm(x, gain);
    const double inv = 1.0 / std::sqrt(1.0 + kRmsEps);
    REQUIRE(std::fabs(y.at(0, 0) - 2.0 * inv) < 1e-15);
    REQUIRE(std::fabs(y.at(0, 1) - 0.5 * inv) < 1e-15);
    REQUIRE(std::fabs(y.at(0, 2) + 1.0 * inv) < 1e-15);
}

TEST_CASE("rms_norm backward matches finite differences") {
    Rng rng(19);
    Tensor x = rng.normal_tensor({4, 6});
    Tensor gain = rng.uniform_tensor({6}, 0.5, 1.5);
    Tensor up = rng.normal_tensor({4, 6});

    Tensor dx, dg;
    rms_norm_backward(up, x, gain, dx, dg);
    Tensor fx = fd_grad([&](const Tensor& t) { return dot_all(up, rms_norm(t, gain)); }, x);
    Tensor fg = fd_grad([&](const Tensor& t) { return dot_all(up, rms_norm(x, t)); }, gain);
    REQUIRE(max_rel_err(dx, fx) < 1e-5);
    REQUIRE(max_rel_err(dg, fg) < 1e-5);
}

TEST_CASE("gelu values and backward") {
    Tensor x({1, 3}, {-2.0, 0.0, 2.0});
    Tensor y = gelu(x);
    REQUIRE(y.at(0, 1) == 0.0);
    // gelu(2) = 2 * Phi(2) with Phi the standard normal CDF.
    const double phi2 = 0.5 * (1.0 + std::erf(2.0 * kInvSqrt2));
    REQUIRE(std::fabs(y.at(0, 2) - 2.0 * phi2) < 1e-14);
    REQUIRE(std::fabs(y.at(0, 2) - y.at(0, 0) - 2.0) < 1e-14);  // gelu(x)-gelu(-x)=x

    Rng rng(20);
    Tensor xr = rng.normal_tensor({3, 4});
    Tensor up = rng.normal_tensor({3, 4});
    Tensor dx = gelu_backward(up, xr);
    Tensor fd = fd_grad([&](const Tensor& t) { return dot_all(up, gelu(t)); }, xr);
    REQUIRE(max_rel_err(dx, fd) < 1e-5);
}

TEST_CASE("row and column slicing round-trips") {
    Rng rng(21);
    Tensor x = rng.normal_tensor({6, 5});

    Tensor rows = slice_rows(x, 2, 3);
    REQUIRE(rows.rows() == 3);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 5; ++c) REQUIRE(rows.at(r, c) == x.at(r + 2, c));

    Tensor cols = slice_cols(x, 1, 2);
    REQUIRE(cols.cols() == 2);
    for (std::size_t r = 0; r < 6; ++r)
        for (std::size_t c = 0; c < 2; ++c) REQUIRE(cols.at(r, c) == x.at(r, c + 1));

    Tensor rebuilt({6, 5});
    paste_cols(rebuilt, slice_cols(x, 0, 1), 0);
    paste_cols(rebuilt, slice_cols(x, 1, 2), 1);
    paste_cols(rebuilt, slice_cols(x, 3, 2), 3);
    REQUIRE(max_abs_diff(rebuilt, x) == 0.0);

    Tensor stacked = concat_rows(std::vector<Tensor>{slice_rows(x, 0, 4), slice_rows(x, 4, 2)}, 5);
    REQUIRE(max_abs_diff(stacked, x) == 0.0);

    REQUIRE_THROWS_AS(slice_rows(x, 5, 3), std::invalid_argument);
    REQUIRE_THROWS_AS(slice_cols(x, 4, 2), std::invalid_argument);
}

TEST_CASE("rng reproducibility and stream independence") {
    Rng a(42);
    Rng b(42);
    Tensor ta = a.normal_tensor({4, 4});
    Tensor tb = b.normal_tensor({4, 4});
    REQUIRE(std::memcmp(ta.data.data(), tb.data.data(), ta.size() * sizeof(double)) == 0);

    // Different seeds must diverge immediately.
    Rng c(43);
    REQUIRE(Rng(42).next_u64() != c.next_u64());

    // Forked streams depend on the id, not on draw order.
    Rng f1 = Rng::fork(7, 100);
    Rng f2 = Rng::fork(7, 101);
    REQUIRE(f1.next_u64() != f2.next_u64());
    Rng f1_again = Rng::fork(7, 100);
    REQUIRE(Rng::fork(7, 100).next_u64() == f1_again.next_u64());
}

TEST_CASE("rng uniform stays in the half-open unit interval") {
    Rng rng(99);
    for (int i = 0; i < 10000; ++i) {
        double u = rng.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
    }
}

TEST_CASE("rng normal has roughly standard moments") {
    Rng rng(123);
    const int n = 50000;
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < n; ++i) {
        double v = rng.normal();
        sum += v;
        sumsq += v * v;
    }
    const double mean = sum / n;
    const double var = sumsq / n - mean * mean;
    REQUIRE(std::fabs(mean) < 0.02);
    REQUIRE(std::fabs(var - 1.0) < 0.05);
}
