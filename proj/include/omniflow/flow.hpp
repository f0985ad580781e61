#pragma once

// Flow matching: linear path z_u = (1-u) z + u eps with constant target
// velocity v* = eps - z, mean-squared velocity loss, an Adam optimizer over
// the visit ordering, the train step with condition dropout and expert
// routing, and a plain Euler sampler.

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "omniflow/conditioning.hpp"
#include "omniflow/dit.hpp"
#include "omniflow/tensor.hpp"

namespace omniflow {

struct FlowSample {
    Tensor z;
    Tensor eps;
    double u = 0.0;
    Tensor z_u;
    Tensor v_star;
};

inline FlowSample sample_path(const Tensor& z, const Tensor& eps, double u) {
    if (!z.same_shape(eps)) throw std::invalid_argument("sample_path: z and eps shape mismatch");
    if (!(u >= 0.0 && u <= 1.0)) throw std::invalid_argument("sample_path: u outside [0,1]");
    FlowSample s;
    s.z = z;
    s.eps = eps;
    s.u = u;
    s.z_u = scale(z, 1.0 - u) + scale(eps, u);
    s.v_star = eps - z;
    return s;
}

/// Mean of squared differences over every element.
inline double flow_loss(const Tensor& pred, const Tensor& v_star) {
    if (!pred.same_shape(v_star)) throw std::invalid_argument("flow_loss: shape mismatch");
    if (pred.size() == 0) throw std::invalid_argument("flow_loss: empty prediction");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred.data[i] - v_star.data[i];
        acc += d * d;
    }
    const double loss = acc / static_cast<double>(pred.size());
    if (!std::isfinite(loss)) throw std::runtime_error("flow_loss: non-finite loss (training divergence)");
    return loss;
}

inline Tensor flow_loss_grad(const Tensor& pred, const Tensor& v_star) {
    Tensor g = pred - v_star;
    return scale(g, 2.0 / static_cast<double>(pred.size()));
}

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam moments for one expert, keyed by the stable visit names.
struct OptimState {
    AdamConfig cfg;
    std::size_t step = 0;
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;

    OptimState() = default;

    explicit OptimState(const DiTParams& params, AdamConfig c = {}) : cfg(c) {
        params.visit([&](const std::string& name, const Param& p) {
            m.emplace(name, Tensor(p.value.shape));
            v.emplace(name, Tensor(p.value.shape));
        });
    }

    /// One Adam update from the gradients currently held in params.
    void update(DiTParams& params) {
        ++step;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
        params.visit([&](const std::string& name, Param& p) {
            Tensor& m1 = m.at(name);
            Tensor& m2 = v.at(name);
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                const double g = p.grad.data[i];
                m1.data[i] = cfg.beta1 * m1.data[i] + (1.0 - cfg.beta1) * g;
                m2.data[i] = cfg.beta2 * m2.data[i] + (1.0 - cfg.beta2) * g * g;
                const double mhat = m1.data[i] / bc1;
                const double vhat = m2.data[i] / bc2;
                p.value.data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
            }
        });
    }
};

/// Pre-adapter condition features for one sample. Token budgeting has already
/// happened; projection into the model width is the routed expert's job
/// because each expert owns its own adapter weights.
struct ConditionFeatures {
    Tensor mllm_tokens;  // [L_mllm x d_mllm]
    Tensor tgt_tokens;   // [L_tgt x d_txt]
    Tensor edit_tokens;  // [L_edit x d_txt]
    Tensor ref_latents;  // rank-4 [F x h x w x c]; F = 0 when there is no source
};

inline ConditionBundle project_features(const ConditionFeatures& f, const DiTParams& p) {
    return build_condition_sequence(project_mllm(f.mllm_tokens, p.adapter_mllm.value),
                                    project_mllm(f.tgt_tokens, p.adapter_tgt.value),
                                    project_mllm(f.edit_tokens, p.adapter_edit.value),
                                    encode_reference(f.ref_latents, p.adapter_ref.value));
}

struct TrainItem {
    LatentGrid z;              // clean target latent
    ConditionFeatures cond;
};

struct StepStats {
    double loss = 0.0;
    std::vector<double> u_drawn;
    std::vector<DropoutMasks> masks;
    std::vector<std::string> expert;  // "low_noise" / "high_noise" per sample
    bool touched_low = false;
    bool touched_high = false;
};

/// One training step over a shape-homogeneous batch. Per sample: draw u and
/// eps, build the flow sample, draw dropout masks, route the expert, project
/// and drop conditions, forward, backward. One Adam update per expert that
/// received gradients. Only DiT weights and adapters train; the feature
/// extractors upstream are frozen stand-ins.
inline StepStats train_step(const std::vector<TrainItem>& batch, ExpertRouter& router,
                            OptimState& opt_low, OptimState& opt_high, const DropoutConfig& dropout,
                            Rng& rng) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    for (const TrainItem& it : batch)
        if (!it.z.tokens.same_shape(batch.front().z.tokens) ||
            it.z.grid_shape != batch.front().z.grid_shape)
            throw std::invalid_argument("train_step: mixed latent shapes in one batch");

    router.low_noise.zero_grads();
    router.high_noise.zero_grads();

    StepStats stats;
    const double inv_batch = 1.0 / static_cast<double>(batch.size());
    for (const TrainItem& item : batch) {
        const double u = rng.uniform();
        const Tensor eps = rng.normal_tensor(item.z.tokens.shape);
        const FlowSample fs = sample_path(item.z.tokens, eps, u);
        const DropoutMasks masks = draw_dropout_masks(dropout, rng);

        DiTParams& expert = route_expert(u, router);
        const bool is_high = &expert == &router.high_noise;
        (is_high ? stats.touched_high : stats.touched_low) = true;

        ConditionBundle bundle = project_features(item.cond, expert);
        ConditionBundle dropped = apply_dropout_masks(bundle, masks, dropout.mode);

        LatentGrid zt;
        zt.grid_shape = item.z.grid_shape;
        zt.tokens = fs.z_u;
        ForwardCache cache;
        const Tensor pred = model_forward_cached(zt, u, dropped, expert, cache);
        stats.loss += flow_loss(pred, fs.v_star) * inv_batch;

        const Tensor d_pred = scale(flow_loss_grad(pred, fs.v_star), inv_batch);
        const Tensor d_cond = model_backward(d_pred, cache, expert);

        // Adapter gradients: slice the condition gradient by segment. A
        // dropped segment contributed zeros forward, so nothing flows back.
        struct Hook {
            const char* name;
            int kept;
            const Tensor* features;
            Param* adapter;
        };
        Tensor ref_cells = flatten_latent_cells(item.cond.ref_latents);
        const Hook hooks[4] = {
            {"mllm", masks.m_mllm, &item.cond.mllm_tokens, &expert.adapter_mllm},
            {"tgt", masks.m_tgt, &item.cond.tgt_tokens, &expert.adapter_tgt},
            {"edit", masks.m_edit, &item.cond.edit_tokens, &expert.adapter_edit},
            {"ref", 1, &ref_cells, &expert.adapter_ref},
        };
        for (const Hook& h : hooks) {
            if (!h.kept) continue;
            // Locate the segment inside the (possibly shortened) dropped bundle.
            for (const Segment& seg : dropped.segment_map) {
                if (seg.name != h.name || seg.length == 0) continue;
                const Tensor d_seg = slice_rows(d_cond, seg.offset, seg.length);
                Tensor d_feat, d_w;
                matmul_backward(d_seg, *h.features, h.adapter->value, d_feat, d_w);
                accumulate(h.adapter->grad, d_w);
            }
        }

        stats.u_drawn.push_back(u);
        stats.masks.push_back(masks);
        stats.expert.push_back(is_high ? "high_noise" : "low_noise");
    }

    if (stats.touched_low) opt_low.update(router.low_noise);
    if (stats.touched_high) opt_high.update(router.high_noise);
    return stats;
}

struct SamplerConfig {
    std::size_t n_steps = 64;

    void validate() const {
        if (n_steps == 0) throw std::invalid_argument("SamplerConfig: n_steps must be >= 1");
    }
};

/// Euler integration of an arbitrary velocity field from u=1 down to u=0.
/// Exposed separately so a ground-truth field can drive the sampler in tests.
inline LatentGrid euler_integrate(const std::function<Tensor(const LatentGrid&, double)>& field,
                                  const std::array<std::size_t, 3>& grid_shape,
                                  std::size_t d_latent, const SamplerConfig& cfg, Rng& rng) {
    cfg.validate();
    LatentGrid z;
    z.grid_shape = grid_shape;
    z.tokens = rng.normal_tensor({grid_shape[0] * grid_shape[1] * grid_shape[2], d_latent});
    const double du = 1.0 / static_cast<double>(cfg.n_steps);
    for (std::size_t s = 0; s < cfg.n_steps; ++s) {
        const double u = 1.0 - static_cast<double>(s) * du;
        const Tensor v = field(z, u);
        for (std::size_t i = 0; i < z.tokens.size(); ++i) z.tokens.data[i] -= du * v.data[i];
        if (!z.tokens.all_finite())
            throw std::runtime_error("euler_sample: non-finite state at step " + std::to_string(s));
    }
    return z;
}

/// Model-driven sampler: each step routes the expert for the current u and
/// conditions on that expert's projection of the features.
inline LatentGrid euler_sample(const ConditionFeatures& cond, const ExpertRouter& router,
                               const std::array<std::size_t, 3>& grid_shape,
                               const SamplerConfig& cfg, Rng& rng) {
    // Both experts' bundles are fixed during sampling; project lazily once.
    ConditionBundle low, high;
    bool have_low = false, have_high = false;
    auto field = [&](const LatentGrid& z, double u) {
        const DiTParams& expert = route_expert(u, router);
        if (&expert == &router.high_noise) {
            if (!have_high) {
                high = project_features(cond, expert);
                have_high = true;
            }
            return model_forward(z, u, high, expert);
        }
        if (!have_low) {
            low = project_features(cond, expert);
            have_low = true;
        }
        return model_forward(z, u, low, expert);
    };
    return euler_integrate(field, grid_shape, router.low_noise.hyper.d_latent, cfg, rng);
}

}  // namespace omniflow
