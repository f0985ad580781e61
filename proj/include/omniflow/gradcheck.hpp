#pragma once

// Central finite-difference validation of the analytic training gradient.
// The probe loss is the full train loss (flow objective through the routed
// expert, including the condition adapters) evaluated on a frozen two-item
// batch: fixed u, fixed eps, no dropout, one item per expert so both sets of
// parameter groups carry gradient.

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "omniflow/flow.hpp"

namespace omniflow {

struct GradCheckItem {
    TrainItem item;
    double u = 0.0;
    Tensor eps;
};

/// Two items straddling the routing threshold, every condition segment
/// nonempty so all four adapters see gradient.
inline std::vector<GradCheckItem> gradcheck_batch(const DiTHyper& hyper, Rng& rng) {
    if (hyper.max_latent_tokens < 4)
        throw std::invalid_argument("gradcheck_batch: needs max_latent_tokens >= 4");
    std::vector<GradCheckItem> items;
    for (double u : {0.3, 0.8}) {
        GradCheckItem gi;
        gi.u = u;
        gi.item.z.grid_shape = {1, 2, 2};
        gi.item.z.tokens = rng.normal_tensor({4, hyper.d_latent});
        gi.item.cond.mllm_tokens = rng.normal_tensor({3, hyper.d_mllm});
        gi.item.cond.tgt_tokens = rng.normal_tensor({2, hyper.d_txt});
        gi.item.cond.edit_tokens = rng.normal_tensor({2, hyper.d_txt});
        gi.item.cond.ref_latents = rng.normal_tensor({1, 1, 2, hyper.ref_channels});
        gi.eps = rng.normal_tensor(gi.item.z.tokens.shape);
        items.push_back(std::move(gi));
    }
    return items;
}

/// Mean of per-item flow losses, mirroring train_step's batch weighting.
inline double gradcheck_loss(const std::vector<GradCheckItem>& items,
                             const ExpertRouter& router) {
    double loss = 0.0;
    const double inv_n = 1.0 / static_cast<double>(items.size());
    for (const GradCheckItem& gi : items) {
        const FlowSample fs = sample_path(gi.item.z.tokens, gi.eps, gi.u);
        const DiTParams& expert = route_expert(gi.u, router);
        const ConditionBundle bundle = project_features(gi.item.cond, expert);
        LatentGrid zt;
        zt.grid_shape = gi.item.z.grid_shape;
        zt.tokens = fs.z_u;
        loss += flow_loss(model_forward(zt, gi.u, bundle, expert), fs.v_star) * inv_n;
    }
    return loss;
}

/// Analytic gradients of gradcheck_loss into both experts' Param::grad.
inline void gradcheck_backward(const std::vector<GradCheckItem>& items, ExpertRouter& router) {
    router.low_noise.zero_grads();
    router.high_noise.zero_grads();
    const double inv_n = 1.0 / static_cast<double>(items.size());
    for (const GradCheckItem& gi : items) {
        const FlowSample fs = sample_path(gi.item.z.tokens, gi.eps, gi.u);
        DiTParams& expert = route_expert(gi.u, router);
        const ConditionBundle bundle = project_features(gi.item.cond, expert);
        LatentGrid zt;
        zt.grid_shape = gi.item.z.grid_shape;
        zt.tokens = fs.z_u;
        ForwardCache cache;
        const Tensor pred = model_forward_cached(zt, gi.u, bundle, expert, cache);
        const Tensor d_pred = scale(flow_loss_grad(pred, fs.v_star), inv_n);
        const Tensor d_cond = model_backward(d_pred, cache, expert);

        Tensor ref_cells = flatten_latent_cells(gi.item.cond.ref_latents);
        struct Hook {
            const char* name;
            const Tensor* features;
            Param* adapter;
        };
        const Hook hooks[4] = {
            {"mllm", &gi.item.cond.mllm_tokens, &expert.adapter_mllm},
            {"tgt", &gi.item.cond.tgt_tokens, &expert.adapter_tgt},
            {"edit", &gi.item.cond.edit_tokens, &expert.adapter_edit},
            {"ref", &ref_cells, &expert.adapter_ref},
        };
        for (const Hook& h : hooks) {
            for (const Segment& seg : bundle.segment_map) {
                if (seg.name != h.name || seg.length == 0) continue;
                const Tensor d_seg = slice_rows(d_cond, seg.offset, seg.length);
                Tensor d_feat, d_w;
                matmul_backward(d_seg, *h.features, h.adapter->value, d_feat, d_w);
                accumulate(h.adapter->grad, d_w);
            }
        }
    }
}

struct GradCheckGroup {
    std::string name;
    std::size_t probes = 0;
    double max_rel = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckGroup> groups;
    double worst_rel = 0.0;
    std::string worst_group;

    bool pass(double tol = 1e-4) const { return worst_rel < tol; }
};

struct GradCheckOptions {
    double fd_step = 1e-4;
    // Entries probed per parameter group (0 = every entry). A strided subset
    // exercises every group; entries within one matrix share a code path.
    std::size_t probes_per_group = 16;
    std::string group_filter;  // substring over "low_noise/..." names; empty keeps all
    std::function<void(ExpertRouter&)> corrupt_grads;  // test hook: break the analytic side
};

namespace detail {

// Relative error with an absolute floor: unused parameters (positional rows
// past the sequence) have exact-zero gradient on both sides, and dividing
// finite-difference roundoff by ~0 would manufacture failures there.
inline double grad_rel_err(double analytic, double fd) {
    const double denom = std::max(std::abs(analytic) + std::abs(fd), 1e-3);
    return std::abs(analytic - fd) / denom;
}

inline std::vector<std::size_t> probe_indices(std::size_t size, std::size_t probes) {
    std::vector<std::size_t> idx;
    if (probes == 0 || size <= probes) {
        for (std::size_t i = 0; i < size; ++i) idx.push_back(i);
        return idx;
    }
    for (std::size_t k = 0; k < probes; ++k) idx.push_back(k * (size - 1) / (probes - 1));
    return idx;
}

}  // namespace detail

/// Builds a fresh router from `seed`, nudges every parameter off its init
/// point (the zero output head blocks all upstream gradient exactly there),
/// computes analytic gradients once, then probes each group with central
/// differences through the full loss.
inline GradCheckReport run_gradcheck(const DiTHyper& hyper, std::uint64_t seed,
                                     const GradCheckOptions& opt = {}) {
    Rng rng(seed);
    ExpertRouter router = ExpertRouter::init(hyper, 0.5, rng);
    for (DiTParams* expert : {&router.low_noise, &router.high_noise})
        expert->visit([&](const std::string&, Param& p) {
            for (double& v : p.value.data) v += 0.05 * rng.normal();
        });

    const std::vector<GradCheckItem> items = gradcheck_batch(hyper, rng);
    gradcheck_backward(items, router);
    if (opt.corrupt_grads) opt.corrupt_grads(router);

    GradCheckReport report;
    auto check_expert = [&](const std::string& prefix, DiTParams& expert) {
        expert.visit([&](const std::string& name, Param& p) {
            const std::string full = prefix + "/" + name;
            if (!opt.group_filter.empty() && full.find(opt.group_filter) == std::string::npos)
                return;
            GradCheckGroup group;
            group.name = full;
            for (std::size_t i : detail::probe_indices(p.value.size(), opt.probes_per_group)) {
                const double saved = p.value.data[i];
                p.value.data[i] = saved + opt.fd_step;
                const double f_plus = gradcheck_loss(items, router);
                p.value.data[i] = saved - opt.fd_step;
                const double f_minus = gradcheck_loss(items, router);
                p.value.data[i] = saved;
                const double fd = (f_plus - f_minus) / (2.0 * opt.fd_step);
                const double rel = detail::grad_rel_err(p.grad.data[i], fd);
                group.max_rel = std::max(group.max_rel, rel);
                ++group.probes;
            }
            if (group.max_rel >= report.worst_rel) {
                report.worst_rel = group.max_rel;
                report.worst_group = full;
            }
            report.groups.push_back(std::move(group));
        });
    };
    check_expert("low_noise", router.low_noise);
    check_expert("high_noise", router.high_noise);
    return report;
}

}  // namespace omniflow
