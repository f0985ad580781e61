#pragma once

// Toy diffusion transformer. Pre-norm residual blocks: self-attention over
// latent tokens, cross-attention whose keys/values come from the unified
// condition sequence (shared by every block), and a GELU MLP. Two expert
// instances (low-noise / high-noise) hang off a threshold router. Backward
// passes are written out by hand and accumulate into Param::grad.

#include <array>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "omniflow/conditioning.hpp"
#include "omniflow/ops.hpp"
#include "omniflow/tensor.hpp"

namespace omniflow {

struct DiTHyper {
    std::size_t n_blocks = 2;
    std::size_t n_heads = 4;
    std::size_t d_dit = 32;
    std::size_t d_latent = 4;   // latent channels per token
    std::size_t d_mllm = 16;    // interaction-feature width
    std::size_t d_txt = 16;     // text-stub width
    std::size_t ref_channels = 4;
    std::size_t max_latent_tokens = 64;

    std::size_t d_head() const { return d_dit / n_heads; }

    void validate() const {
        if (n_blocks == 0 || n_heads == 0 || d_dit == 0 || d_latent == 0 || d_mllm == 0 ||
            d_txt == 0 || ref_channels == 0 || max_latent_tokens == 0)
            throw std::invalid_argument("DiTHyper: all extents must be positive");
        if (d_dit % n_heads != 0)
            throw std::invalid_argument("DiTHyper: d_dit must be divisible by n_heads");
        if (d_dit % 2 != 0)
            throw std::invalid_argument("DiTHyper: d_dit must be even for the time embedding");
    }

    nlohmann::json to_json() const {
        return {{"n_blocks", n_blocks},   {"n_heads", n_heads},
                {"d_dit", d_dit},         {"d_latent", d_latent},
                {"d_mllm", d_mllm},       {"d_txt", d_txt},
                {"ref_channels", ref_channels}, {"max_latent_tokens", max_latent_tokens}};
    }

    static DiTHyper from_json(const nlohmann::json& j) {
        DiTHyper h;
        h.n_blocks = j.at("n_blocks").get<std::size_t>();
        h.n_heads = j.at("n_heads").get<std::size_t>();
        h.d_dit = j.at("d_dit").get<std::size_t>();
        h.d_latent = j.at("d_latent").get<std::size_t>();
        h.d_mllm = j.at("d_mllm").get<std::size_t>();
        h.d_txt = j.at("d_txt").get<std::size_t>();
        h.ref_channels = j.at("ref_channels").get<std::size_t>();
        h.max_latent_tokens = j.at("max_latent_tokens").get<std::size_t>();
        h.validate();
        return h;
    }
};

struct LatentGrid {
    Tensor tokens;  // [S x c], S = frames*h*w
    std::array<std::size_t, 3> grid_shape = {0, 0, 0};  // (frames, h, w)

    std::size_t seq_len() const { return grid_shape[0] * grid_shape[1] * grid_shape[2]; }

    void validate() const {
        if (tokens.rank() != 2 || tokens.rows() != seq_len())
            throw std::invalid_argument("LatentGrid: token count != frames*h*w");
    }
};

struct DiTBlockParams {
    Param norm1_gain, wq, wk, wv, wo;
    Param norm2_gain, cq, ck, cv, co;
    Param norm3_gain, mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct DiTParams {
    DiTHyper hyper;
    Param input_w, input_b, pos_embed;
    std::vector<DiTBlockParams> blocks;
    Param final_gain, out_w, out_b;
    // Condition adapters: one projector per source, no biases, so zeroed
    // segments stay zero after projection.
    Param adapter_mllm, adapter_tgt, adapter_edit, adapter_ref;

    template <typename F>
    void visit(F&& f) {
        f("input.w", input_w);
        f("input.b", input_b);
        f("pos_embed", pos_embed);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = "block" + std::to_string(i) + ".";
            DiTBlockParams& b = blocks[i];
            f(p + "norm1.gain", b.norm1_gain);
            f(p + "self.wq", b.wq);
            f(p + "self.wk", b.wk);
            f(p + "self.wv", b.wv);
            f(p + "self.wo", b.wo);
            f(p + "norm2.gain", b.norm2_gain);
            f(p + "cross.wq", b.cq);
            f(p + "cross.wk", b.ck);
            f(p + "cross.wv", b.cv);
            f(p + "cross.wo", b.co);
            f(p + "norm3.gain", b.norm3_gain);
            f(p + "mlp.w1", b.mlp_w1);
            f(p + "mlp.b1", b.mlp_b1);
            f(p + "mlp.w2", b.mlp_w2);
            f(p + "mlp.b2", b.mlp_b2);
        }
        f("final.gain", final_gain);
        f("out.w", out_w);
        f("out.b", out_b);
        f("adapter.mllm", adapter_mllm);
        f("adapter.tgt", adapter_tgt);
        f("adapter.edit", adapter_edit);
        f("adapter.ref", adapter_ref);
    }

    template <typename F>
    void visit(F&& f) const {
        const_cast<DiTParams*>(this)->visit(
            [&](const std::string& name, Param& p) { f(name, static_cast<const Param&>(p)); });
    }

    void zero_grads() {
        visit([](const std::string&, Param& p) { p.zero_grad(); });
    }

    /// Fresh parameters: fan-in scaled normals for weight matrices, ones for
    /// norm gains, zeros for biases, and a zero output head so the initial
    /// velocity prediction is exactly zero.
    static DiTParams init(const DiTHyper& hyper, Rng& rng) {
        hyper.validate();
        DiTParams p;
        p.hyper = hyper;
        const std::size_t d = hyper.d_dit;
        auto mat = [&](std::size_t in, std::size_t out) {
            return Param(rng.normal_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in))));
        };
        auto ones_vec = [](std::size_t n) { return Param(Tensor::full({n}, 1.0)); };
        auto zero_vec = [](std::size_t n) { return Param(Tensor({n})); };

        p.input_w = mat(hyper.d_latent, d);
        p.input_b = zero_vec(d);
        p.pos_embed = Param(rng.normal_tensor({hyper.max_latent_tokens, d}, 0.02));
        for (std::size_t i = 0; i < hyper.n_blocks; ++i) {
            DiTBlockParams b;
            b.norm1_gain = ones_vec(d);
            b.wq = mat(d, d);
            b.wk = mat(d, d);
            b.wv = mat(d, d);
            b.wo = mat(d, d);
            b.norm2_gain = ones_vec(d);
            b.cq = mat(d, d);
            b.ck = mat(d, d);
            b.cv = mat(d, d);
            b.co = mat(d, d);
            b.norm3_gain = ones_vec(d);
            b.mlp_w1 = mat(d, 4 * d);
            b.mlp_b1 = zero_vec(4 * d);
            b.mlp_w2 = mat(4 * d, d);
            b.mlp_b2 = zero_vec(d);
            p.blocks.push_back(std::move(b));
        }
        p.final_gain = ones_vec(d);
        p.out_w = Param(Tensor({d, hyper.d_latent}));
        p.out_b = zero_vec(hyper.d_latent);
        p.adapter_mllm = mat(hyper.d_mllm, d);
        p.adapter_tgt = mat(hyper.d_txt, d);
        p.adapter_edit = mat(hyper.d_txt, d);
        p.adapter_ref = mat(hyper.ref_channels, d);
        return p;
    }
};

/// Sinusoidal features of the flow time u: pairs (sin, cos) at d/2 linearly
/// spaced frequencies (i+1)*pi/2, injective on [0,1].
inline Tensor time_embed(double u, std::size_t d_dit) {
    if (!(u >= 0.0 && u <= 1.0)) throw std::invalid_argument("time_embed: u outside [0,1]");
    if (d_dit == 0 || d_dit % 2 != 0)
        throw std::invalid_argument("time_embed: d_dit must be positive and even");
    Tensor e({d_dit});
    const double half_pi = 1.5707963267948966;
    for (std::size_t i = 0; i < d_dit / 2; ++i) {
        const double w = static_cast<double>(i + 1) * half_pi;
        e.data[2 * i] = std::sin(u * w);
        e.data[2 * i + 1] = std::cos(u * w);
    }
    return e;
}

struct BlockCache {
    Tensor x_in;                   // block input
    Tensor h1, q1, k1, v1, a1;     // self-attention branch
    Tensor x2, h2, q2, k2, v2, a2; // cross-attention branch (empty tensors when L_C = 0)
    Tensor x3, h3, m1;             // mlp branch (m1 = pre-activation)
};

struct ForwardCache {
    Tensor x0;       // raw latent tokens [S x d_latent]
    Tensor cond;     // concatenated condition sequence [L_C x d_dit]
    std::vector<BlockCache> blocks;
    Tensor x_final;  // input to the final norm
    Tensor h_final;  // normed output before the head
};

namespace detail {

inline void check_finite(const Tensor& x, std::size_t block_index) {
    if (!x.all_finite())
        throw std::runtime_error("model_forward: non-finite activations in block " +
                                 std::to_string(block_index) + " (training divergence)");
}

}  // namespace detail

/// One pre-norm residual block. Cross-attention reads keys/values from the
/// cached condition sequence; an empty sequence contributes nothing.
inline Tensor dit_block_forward_cached(const Tensor& x_in, const Tensor& cond,
                                       const DiTBlockParams& b, std::size_t n_heads,
                                       BlockCache& cache) {
    cache.x_in = x_in;

    cache.h1 = rms_norm(x_in, b.norm1_gain.value);
    cache.q1 = matmul(cache.h1, b.wq.value);
    cache.k1 = matmul(cache.h1, b.wk.value);
    cache.v1 = matmul(cache.h1, b.wv.value);
    cache.a1 = multihead_attention(cache.q1, cache.k1, cache.v1, n_heads);
    cache.x2 = cache.x_in + matmul(cache.a1, b.wo.value);

    if (cond.rows() > 0) {
        cache.h2 = rms_norm(cache.x2, b.norm2_gain.value);
        cache.q2 = matmul(cache.h2, b.cq.value);
        cache.k2 = matmul(cond, b.ck.value);
        cache.v2 = matmul(cond, b.cv.value);
        cache.a2 = multihead_attention(cache.q2, cache.k2, cache.v2, n_heads);
        cache.x3 = cache.x2 + matmul(cache.a2, b.co.value);
    } else {
        cache.x3 = cache.x2;
    }

    cache.h3 = rms_norm(cache.x3, b.norm3_gain.value);
    cache.m1 = linear_forward(cache.h3, b.mlp_w1.value, b.mlp_b1.value);
    return cache.x3 + linear_forward(gelu(cache.m1), b.mlp_w2.value, b.mlp_b2.value);
}

inline Tensor dit_block_forward(const Tensor& x_in, const ConditionBundle& c,
                                const DiTBlockParams& b, std::size_t n_heads) {
    BlockCache scratch;
    return dit_block_forward_cached(x_in, c.concatenated(), b, n_heads, scratch);
}

/// Full velocity prediction v_theta(z_u, u | C). The cache keeps every
/// intermediate needed by model_backward.
inline Tensor model_forward_cached(const LatentGrid& z_u, double u, const ConditionBundle& c,
                                   const DiTParams& p, ForwardCache& cache) {
    z_u.validate();
    const std::size_t S = z_u.tokens.rows();
    if (z_u.tokens.cols() != p.hyper.d_latent)
        throw std::invalid_argument("model_forward: latent channel mismatch");
    if (S > p.hyper.max_latent_tokens)
        throw std::invalid_argument("model_forward: sequence longer than positional table");
    if (c.total_length() > 0 && c.width() != p.hyper.d_dit)
        throw std::invalid_argument("model_forward: condition width != d_dit");

    cache.x0 = z_u.tokens;
    cache.cond = c.concatenated();
    cache.blocks.assign(p.hyper.n_blocks, BlockCache{});

    Tensor x = linear_forward(z_u.tokens, p.input_w.value, p.input_b.value);
    const Tensor te = time_embed(u, p.hyper.d_dit);
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t j = 0; j < p.hyper.d_dit; ++j)
            x.at(s, j) += p.pos_embed.value.at(s, j) + te.data[j];

    for (std::size_t i = 0; i < p.hyper.n_blocks; ++i) {
        x = dit_block_forward_cached(x, cache.cond, p.blocks[i], p.hyper.n_heads,
                                     cache.blocks[i]);
        detail::check_finite(x, i);
    }

    cache.x_final = x;
    cache.h_final = rms_norm(x, p.final_gain.value);
    return linear_forward(cache.h_final, p.out_w.value, p.out_b.value);
}

inline Tensor model_forward(const LatentGrid& z_u, double u, const ConditionBundle& c,
                            const DiTParams& p) {
    ForwardCache scratch;
    return model_forward_cached(z_u, u, c, p, scratch);
}

namespace detail {

// Backward through one block. d_x_out is the gradient at the block output;
// returns the gradient at the block input and accumulates parameter grads
// and the condition-sequence gradient.
inline Tensor dit_block_backward(const Tensor& d_x_out, const BlockCache& cache, const Tensor& cond,
                                 DiTBlockParams& b, std::size_t n_heads, Tensor& d_cond) {
    // MLP branch: x_out = x3 + gelu(m1) W2 + b2, m1 = h3 W1 + b1.
    Tensor act = gelu(cache.m1);
    Tensor d_act, d_w2, d_b2;
    linear_backward(d_x_out, act, b.mlp_w2.value, d_act, d_w2, d_b2);
    accumulate(b.mlp_w2.grad, d_w2);
    accumulate(b.mlp_b2.grad, d_b2);
    Tensor d_m1 = gelu_backward(d_act, cache.m1);
    Tensor d_h3, d_w1, d_b1;
    linear_backward(d_m1, cache.h3, b.mlp_w1.value, d_h3, d_w1, d_b1);
    accumulate(b.mlp_w1.grad, d_w1);
    accumulate(b.mlp_b1.grad, d_b1);
    Tensor d_x3 = d_x_out;  // residual path
    Tensor d_x3_norm, d_g3;
    rms_norm_backward(d_h3, cache.x3, b.norm3_gain.value, d_x3_norm, d_g3);
    accumulate(b.norm3_gain.grad, d_g3);
    accumulate(d_x3, d_x3_norm);

    // Cross-attention branch: x3 = x2 + MHA(h2 cq, C ck, C cv) co.
    Tensor d_x2 = d_x3;
    if (cond.rows() > 0) {
        Tensor d_a2, d_co;
        matmul_backward(d_x3, cache.a2, b.co.value, d_a2, d_co);
        accumulate(b.co.grad, d_co);
        Tensor d_q2, d_k2, d_v2;
        multihead_attention_backward(d_a2, cache.q2, cache.k2, cache.v2, n_heads, d_q2, d_k2,
                                     d_v2);
        Tensor d_h2, d_cq;
        matmul_backward(d_q2, cache.h2, b.cq.value, d_h2, d_cq);
        accumulate(b.cq.grad, d_cq);
        Tensor d_cond_k, d_ck;
        matmul_backward(d_k2, cond, b.ck.value, d_cond_k, d_ck);
        accumulate(b.ck.grad, d_ck);
        accumulate(d_cond, d_cond_k);
        Tensor d_cond_v, d_cv;
        matmul_backward(d_v2, cond, b.cv.value, d_cond_v, d_cv);
        accumulate(b.cv.grad, d_cv);
        accumulate(d_cond, d_cond_v);
        Tensor d_x2_norm, d_g2;
        rms_norm_backward(d_h2, cache.x2, b.norm2_gain.value, d_x2_norm, d_g2);
        accumulate(b.norm2_gain.grad, d_g2);
        accumulate(d_x2, d_x2_norm);
    }

    // Self-attention branch: x2 = x_in + MHA(h1 wq, h1 wk, h1 wv) wo.
    Tensor d_x_in = d_x2;
    Tensor d_a1, d_wo;
    matmul_backward(d_x2, cache.a1, b.wo.value, d_a1, d_wo);
    accumulate(b.wo.grad, d_wo);
    Tensor d_q1, d_k1, d_v1;
    multihead_attention_backward(d_a1, cache.q1, cache.k1, cache.v1, n_heads, d_q1, d_k1, d_v1);
    Tensor d_h1 = Tensor(cache.h1.shape);
    Tensor tmp_h, d_wq, d_wk, d_wv;
    matmul_backward(d_q1, cache.h1, b.wq.value, tmp_h, d_wq);
    accumulate(b.wq.grad, d_wq);
    accumulate(d_h1, tmp_h);
    matmul_backward(d_k1, cache.h1, b.wk.value, tmp_h, d_wk);
    accumulate(b.wk.grad, d_wk);
    accumulate(d_h1, tmp_h);
    matmul_backward(d_v1, cache.h1, b.wv.value, tmp_h, d_wv);
    accumulate(b.wv.grad, d_wv);
    accumulate(d_h1, tmp_h);
    Tensor d_x_in_norm, d_g1;
    rms_norm_backward(d_h1, cache.x_in, b.norm1_gain.value, d_x_in_norm, d_g1);
    accumulate(b.norm1_gain.grad, d_g1);
    accumulate(d_x_in, d_x_in_norm);
    return d_x_in;
}

}  // namespace detail

/// Backward for model_forward_cached. Accumulates parameter gradients into
/// params and returns the gradient with respect to the (post-dropout)
/// condition sequence, in concatenated row order.
inline Tensor model_backward(const Tensor& d_pred, const ForwardCache& cache, DiTParams& p) {
    Tensor d_cond(cache.cond.shape);

    Tensor d_h_final, d_out_w, d_out_b;
    linear_backward(d_pred, cache.h_final, p.out_w.value, d_h_final, d_out_w, d_out_b);
    accumulate(p.out_w.grad, d_out_w);
    accumulate(p.out_b.grad, d_out_b);
    Tensor d_x, d_final_gain;
    rms_norm_backward(d_h_final, cache.x_final, p.final_gain.value, d_x, d_final_gain);
    accumulate(p.final_gain.grad, d_final_gain);

    for (std::size_t i = p.hyper.n_blocks; i-- > 0;)
        d_x = detail::dit_block_backward(d_x, cache.blocks[i], cache.cond, p.blocks[i],
                                         p.hyper.n_heads, d_cond);

    // Input projection + positional table (the time embedding has no
    // parameters; its additive path simply stops here).
    const std::size_t S = cache.x0.rows();
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t j = 0; j < p.hyper.d_dit; ++j)
            p.pos_embed.grad.at(s, j) += d_x.at(s, j);
    Tensor d_x0, d_input_w, d_input_b;
    linear_backward(d_x, cache.x0, p.input_w.value, d_x0, d_input_w, d_input_b);
    accumulate(p.input_w.grad, d_input_w);
    accumulate(p.input_b.grad, d_input_b);
    return d_cond;
}

struct ExpertRouter {
    double u_threshold = 0.5;
    DiTParams low_noise;
    DiTParams high_noise;

    static ExpertRouter init(const DiTHyper& hyper, double u_threshold, Rng& rng) {
        if (!(u_threshold > 0.0 && u_threshold < 1.0))
            throw std::invalid_argument("ExpertRouter: u_threshold must lie in (0,1)");
        ExpertRouter r;
        r.u_threshold = u_threshold;
        r.low_noise = DiTParams::init(hyper, rng);
        r.high_noise = DiTParams::init(hyper, rng);
        return r;
    }
};

/// Threshold routing: u above the boundary goes to the high-noise expert;
/// the boundary itself (and everything below) stays with low-noise.
inline DiTParams& route_expert(double u, ExpertRouter& router) {
    if (!(u >= 0.0 && u <= 1.0)) throw std::invalid_argument("route_expert: u outside [0,1]");
    return u > router.u_threshold ? router.high_noise : router.low_noise;
}

inline const DiTParams& route_expert(double u, const ExpertRouter& router) {
    return route_expert(u, const_cast<ExpertRouter&>(router));
}

}  // namespace omniflow
