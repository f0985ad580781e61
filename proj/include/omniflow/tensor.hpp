#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace omniflow {

/// Dense row-major array of 64-bit floats. Shape is a list of extents;
/// rank-2 tensors get rows()/cols() accessors since most ops live there.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
        data.assign(count(shape), 0.0);
    }

    Tensor(std::vector<std::size_t> s, std::vector<double> d)
        : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != count(shape)) {
            throw std::invalid_argument("Tensor: data length does not match shape");
        }
    }

    static std::size_t count(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t e : s) n *= e;
        return s.empty() ? 0 : n;
    }

    static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<std::size_t> s, double v) {
        Tensor t(std::move(s));
        for (double& x : t.data) x = v;
        return t;
    }

    /// 2-D literal, e.g. Tensor::of_rows({{1,2},{3,4}}).
    static Tensor of_rows(std::initializer_list<std::initializer_list<double>> rows) {
        std::size_t r = rows.size();
        std::size_t c = r == 0 ? 0 : rows.begin()->size();
        Tensor t({r, c});
        std::size_t i = 0;
        for (const auto& row : rows) {
            if (row.size() != c) throw std::invalid_argument("of_rows: ragged rows");
            for (double v : row) t.data[i++] = v;
        }
        return t;
    }

    static Tensor identity(std::size_t n) {
        Tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) t.data[i * n + i] = 1.0;
        return t;
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    std::size_t rows() const {
        require_rank2("rows");
        return shape[0];
    }
    std::size_t cols() const {
        require_rank2("cols");
        return shape[1];
    }

    double& at(std::size_t r, std::size_t c) {
        require_rank2("at");
        return data[r * shape[1] + c];
    }
    double at(std::size_t r, std::size_t c) const {
        require_rank2("at");
        return data[r * shape[1] + c];
    }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    void require_rank2(const char* who) const {
        if (shape.size() != 2) {
            throw std::invalid_argument(std::string(who) + ": tensor is not rank-2");
        }
    }
};

inline Tensor operator+(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("tensor add: shape mismatch");
    Tensor out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return out;
}

inline Tensor operator-(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("tensor sub: shape mismatch");
    Tensor out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.data[i];
    return out;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor out = a;
    for (double& v : out.data) v *= s;
    return out;
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("hadamard: shape mismatch");
    Tensor out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
    return out;
}

inline void accumulate(Tensor& into, const Tensor& what) {
    if (!into.same_shape(what)) throw std::invalid_argument("accumulate: shape mismatch");
    for (std::size_t i = 0; i < into.data.size(); ++i) into.data[i] += what.data[i];
}

/// Reinterpret as rank-2 [rows x cols] without copying layout (row-major).
inline Tensor reshape2(const Tensor& t, std::size_t rows, std::size_t cols) {
    if (rows * cols != t.size() && !(t.size() == 0 && (rows == 0 || cols == 0))) {
        throw std::invalid_argument("reshape2: element count mismatch");
    }
    Tensor out = t;
    out.shape = {rows, cols};
    return out;
}

// splitmix64, used both for seeding and for hash-derived values.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Deterministic xorshift64* generator (Vigna's constants). Seed state is the
/// splitmix64 scramble of the user seed so nearby seeds decorrelate; equal
/// seeds give identical draw sequences on every platform.
struct Rng {
    std::uint64_t state;

    explicit Rng(std::uint64_t seed = 0) {
        state = splitmix64(seed);
        if (state == 0) state = 0x9E3779B97F4A7C15ULL;
    }

    std::uint64_t next_u64() {
        std::uint64_t x = state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        state = x;
        return x * 0x2545F4914F6CDD1DULL;
    }

    /// Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller (hand-rolled so draws are
    /// platform-independent; std::normal_distribution is not).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    Tensor normal_tensor(std::vector<std::size_t> shape, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (double& v : t.data) v = stddev * normal();
        return t;
    }

    Tensor uniform_tensor(std::vector<std::size_t> shape, double lo, double hi) {
        Tensor t(std::move(shape));
        for (double& v : t.data) v = uniform(lo, hi);
        return t;
    }

    /// Derived per-item stream: seed = base ^ id, re-scrambled.
    static Rng fork(std::uint64_t base_seed, std::uint64_t id) {
        return Rng(base_seed ^ splitmix64(id));
    }

private:
    bool have_spare_ = false;
    double spare_ = 0.0;
};

/// A parameter tensor paired with its gradient accumulator. The grad always
/// mirrors the value's shape and is zeroed between optimizer steps.
struct Param {
    Tensor value;
    Tensor grad;

    Param() = default;
    explicit Param(Tensor v) : value(std::move(v)), grad(Tensor::zeros(value.shape)) {}

    void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

}  // namespace omniflow
