#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>

#include "omniflow/tensor.hpp"

// Differentiable primitives. Each forward has a hand-derived backward that is
// checked against central finite differences in the test suite; there is no
// autodiff graph.

namespace omniflow {

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul: rank-2 inputs required");
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner extents do not match");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor c({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a.data.data() + i * k;
        double* crow = c.data.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b.data.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

inline Tensor transpose(const Tensor& x) {
    if (x.rank() != 2) throw std::invalid_argument("transpose: rank-2 input required");
    Tensor out({x.cols(), x.rows()});
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) out.at(j, i) = x.at(i, j);
    return out;
}

// dC -> (dA, dB) with dA = dC * B^T, dB = A^T * dC.
inline void matmul_backward(const Tensor& d_c, const Tensor& a, const Tensor& b,
                            Tensor& d_a, Tensor& d_b) {
    d_a = matmul(d_c, transpose(b));
    d_b = matmul(transpose(a), d_c);
}

/// Row-wise softmax with max subtraction; rows sum to 1 within 1e-12.
inline Tensor softmax_rows(const Tensor& x) {
    if (x.rank() != 2) throw std::invalid_argument("softmax_rows: rank-2 input required");
    const std::size_t m = x.rows(), n = x.cols();
    Tensor y({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* in = x.data.data() + i * n;
        double* out = y.data.data() + i * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            out[j] = std::exp(in[j] - mx);
            sum += out[j];
        }
        for (std::size_t j = 0; j < n; ++j) out[j] /= sum;
    }
    return y;
}

// dX_ij = Y_ij * (dY_ij - sum_k dY_ik Y_ik), taking the forward output Y.
inline Tensor softmax_rows_backward(const Tensor& d_y, const Tensor& y) {
    if (!d_y.same_shape(y)) throw std::invalid_argument("softmax_rows_backward: shape mismatch");
    const std::size_t m = y.rows(), n = y.cols();
    Tensor d_x({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* dy = d_y.data.data() + i * n;
        const double* yy = y.data.data() + i * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += dy[j] * yy[j];
        double* dx = d_x.data.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) dx[j] = yy[j] * (dy[j] - dot);
    }
    return d_x;
}

/// softmax(Q K^T / sqrt(d)) V, implemented literally as the three-step
/// composition matmul -> softmax_rows -> matmul.
inline Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
        throw std::invalid_argument("attention: rank-2 inputs required");
    if (q.cols() != k.cols() || q.cols() == 0)
        throw std::invalid_argument("attention: query/key width mismatch");
    if (k.rows() != v.rows())
        throw std::invalid_argument("attention: key and value row counts differ");
    const double s = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Tensor probs = softmax_rows(scale(matmul(q, transpose(k)), s));
    return matmul(probs, v);
}

struct AttentionGrads {
    Tensor d_q, d_k, d_v;
};

inline AttentionGrads scaled_dot_attention_backward(const Tensor& d_out, const Tensor& q,
                                                    const Tensor& k, const Tensor& v) {
    const double s = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Tensor probs = softmax_rows(scale(matmul(q, transpose(k)), s));
    AttentionGrads g;
    Tensor d_probs = matmul(d_out, transpose(v));
    g.d_v = matmul(transpose(probs), d_out);
    Tensor d_logits = scale(softmax_rows_backward(d_probs, probs), s);
    g.d_q = matmul(d_logits, k);
    g.d_k = matmul(transpose(d_logits), q);
    return g;
}

/// x W + b with b broadcast over rows. b must be rank-1 of length d_out.
inline Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (b.rank() != 1 || b.shape[0] != w.cols())
        throw std::invalid_argument("linear_forward: bias length != output width");
    Tensor y = matmul(x, w);
    for (std::size_t i = 0; i < y.rows(); ++i)
        for (std::size_t j = 0; j < y.cols(); ++j) y.at(i, j) += b.data[j];
    return y;
}

inline void linear_backward(const Tensor& d_y, const Tensor& x, const Tensor& w,
                            Tensor& d_x, Tensor& d_w, Tensor& d_b) {
    d_x = matmul(d_y, transpose(w));
    d_w = matmul(transpose(x), d_y);
    d_b = Tensor({w.cols()});
    for (std::size_t i = 0; i < d_y.rows(); ++i)
        for (std::size_t j = 0; j < d_y.cols(); ++j) d_b.data[j] += d_y.at(i, j);
}

inline constexpr double kRmsEps = 1e-6;

/// Each row divided by sqrt(mean of squares + 1e-6), scaled per-column by gain.
inline Tensor rms_norm(const Tensor& x, const Tensor& gain) {
    if (x.rank() != 2) throw std::invalid_argument("rms_norm: rank-2 input required");
    if (gain.rank() != 1 || gain.shape[0] != x.cols())
        throw std::invalid_argument("rms_norm: gain length != width");
    const std::size_t m = x.rows(), n = x.cols();
    Tensor y({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double ms = 0.0;
        for (std::size_t j = 0; j < n; ++j) ms += x.at(i, j) * x.at(i, j);
        ms /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(ms + kRmsEps);
        for (std::size_t j = 0; j < n; ++j) y.at(i, j) = x.at(i, j) * inv * gain.data[j];
    }
    return y;
}

inline void rms_norm_backward(const Tensor& d_y, const Tensor& x, const Tensor& gain,
                              Tensor& d_x, Tensor& d_gain) {
    const std::size_t m = x.rows(), n = x.cols();
    d_x = Tensor({m, n});
    d_gain = Tensor({n});
    for (std::size_t i = 0; i < m; ++i) {
        double ms = 0.0;
        for (std::size_t j = 0; j < n; ++j) ms += x.at(i, j) * x.at(i, j);
        ms /= static_cast<double>(n);
        const double r = std::sqrt(ms + kRmsEps);
        const double inv = 1.0 / r;
        double dot = 0.0;  // sum_j dY_ij * g_j * x_ij
        for (std::size_t j = 0; j < n; ++j) dot += d_y.at(i, j) * gain.data[j] * x.at(i, j);
        const double c = dot / (static_cast<double>(n) * r * r * r);
        for (std::size_t j = 0; j < n; ++j) {
            d_x.at(i, j) = d_y.at(i, j) * gain.data[j] * inv - x.at(i, j) * c;
            d_gain.data[j] += d_y.at(i, j) * x.at(i, j) * inv;
        }
    }
}

inline constexpr double kInvSqrt2 = 0.70710678118654752440;

inline double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

inline double gelu_grad_scalar(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;  // 1/sqrt(2*pi)
    return cdf + x * pdf;
}

inline Tensor gelu(const Tensor& x) {
    Tensor y = x;
    for (double& v : y.data) v = gelu_scalar(v);
    return y;
}

inline Tensor gelu_backward(const Tensor& d_y, const Tensor& x) {
    Tensor d_x = d_y;
    for (std::size_t i = 0; i < x.data.size(); ++i) d_x.data[i] *= gelu_grad_scalar(x.data[i]);
    return d_x;
}

// ---- row/column block helpers used by attention heads and segment maps ----

inline Tensor slice_rows(const Tensor& x, std::size_t offset, std::size_t len) {
    if (x.rank() != 2) throw std::invalid_argument("slice_rows: rank-2 input required");
    if (offset + len > x.rows()) throw std::invalid_argument("slice_rows: out of range");
    Tensor out({len, x.cols()});
    std::copy(x.data.begin() + static_cast<std::ptrdiff_t>(offset * x.cols()),
              x.data.begin() + static_cast<std::ptrdiff_t>((offset + len) * x.cols()),
              out.data.begin());
    return out;
}

inline Tensor slice_cols(const Tensor& x, std::size_t offset, std::size_t len) {
    if (x.rank() != 2) throw std::invalid_argument("slice_cols: rank-2 input required");
    if (offset + len > x.cols()) throw std::invalid_argument("slice_cols: out of range");
    Tensor out({x.rows(), len});
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < len; ++j) out.at(i, j) = x.at(i, offset + j);
    return out;
}

inline void paste_cols(Tensor& into, const Tensor& block, std::size_t offset) {
    if (into.rows() != block.rows() || offset + block.cols() > into.cols())
        throw std::invalid_argument("paste_cols: block does not fit");
    for (std::size_t i = 0; i < block.rows(); ++i)
        for (std::size_t j = 0; j < block.cols(); ++j) into.at(i, offset + j) = block.at(i, j);
}

inline void paste_rows(Tensor& into, const Tensor& block, std::size_t offset) {
    if (into.cols() != block.cols() || offset + block.rows() > into.rows())
        throw std::invalid_argument("paste_rows: block does not fit");
    std::copy(block.data.begin(), block.data.end(),
              into.data.begin() + static_cast<std::ptrdiff_t>(offset * into.cols()));
}

/// Multi-head attention over column blocks: head h attends with columns
/// [h*d_head, (h+1)*d_head) of q/k and the matching value block; outputs are
/// concatenated back in head order.
inline Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                  std::size_t n_heads) {
    if (n_heads == 0 || q.cols() % n_heads != 0 || v.cols() % n_heads != 0)
        throw std::invalid_argument("multihead_attention: head count must divide widths");
    const std::size_t dq = q.cols() / n_heads, dv = v.cols() / n_heads;
    Tensor out({q.rows(), v.cols()});
    for (std::size_t h = 0; h < n_heads; ++h) {
        Tensor oh = scaled_dot_attention(slice_cols(q, h * dq, dq), slice_cols(k, h * dq, dq),
                                         slice_cols(v, h * dv, dv));
        paste_cols(out, oh, h * dv);
    }
    return out;
}

inline void multihead_attention_backward(const Tensor& d_out, const Tensor& q, const Tensor& k,
                                         const Tensor& v, std::size_t n_heads, Tensor& d_q,
                                         Tensor& d_k, Tensor& d_v) {
    const std::size_t dq = q.cols() / n_heads, dv = v.cols() / n_heads;
    d_q = Tensor(q.shape);
    d_k = Tensor(k.shape);
    d_v = Tensor(v.shape);
    for (std::size_t h = 0; h < n_heads; ++h) {
        AttentionGrads g = scaled_dot_attention_backward(
            slice_cols(d_out, h * dv, dv), slice_cols(q, h * dq, dq), slice_cols(k, h * dq, dq),
            slice_cols(v, h * dv, dv));
        paste_cols(d_q, g.d_q, h * dq);
        paste_cols(d_k, g.d_k, h * dq);
        paste_cols(d_v, g.d_v, h * dv);
    }
}

inline Tensor concat_rows(std::span<const Tensor> parts, std::size_t width) {
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.cols() != width)
            throw std::invalid_argument("concat_rows: width mismatch");
        total += p.rows();
    }
    Tensor out({total, width});
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        paste_rows(out, p, off);
        off += p.rows();
    }
    return out;
}

}  // namespace omniflow
