#pragma once

// Ulysses-style sequence parallelism on an in-process worker fabric. The
// defining collective trades sequence shards for head shards: each worker
// ships its local slab to every peer and keeps the head block it owns, so all
// workers end up with the full sequence for H/P heads. Applied to both
// self-attention and cross-attention; for cross-attention the condition
// sequence is replicated, each worker projects keys/values for its own heads,
// and only queries and outputs ever cross the wire.

#include <cstddef>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "omniflow/ops.hpp"
#include "omniflow/tensor.hpp"

namespace omniflow {

/// Simulated communication layer. Message delivery is strictly FIFO per
/// (sender, receiver) pair and collectives drain receivers in sender-rank
/// order, so results are bit-reproducible regardless of physical schedule.
class WorkerFabric {
public:
    explicit WorkerFabric(std::size_t n_workers)
        : P_(n_workers),
          mailboxes_(n_workers * n_workers),
          bytes_sent_(n_workers, 0),
          bytes_received_(n_workers, 0),
          attn_macs_(n_workers, 0),
          proj_macs_(n_workers, 0) {
        if (n_workers == 0) throw std::invalid_argument("WorkerFabric: need at least one worker");
    }

    std::size_t size() const { return P_; }

    void send(std::size_t from, std::size_t to, Tensor payload) {
        check_rank(from);
        check_rank(to);
        if (from == to)
            throw std::logic_error("WorkerFabric: self-transfers are local copies, not sends");
        if (message_tamper) message_tamper(from, to, payload);
        bytes_sent_[from] += payload.size() * sizeof(double);
        ++messages_sent_;
        mailboxes_[from * P_ + to].push_back(std::move(payload));
    }

    Tensor recv(std::size_t from, std::size_t to) {
        check_rank(from);
        check_rank(to);
        auto& box = mailboxes_[from * P_ + to];
        if (box.empty())
            throw std::logic_error("WorkerFabric: recv from " + std::to_string(from) + " to " +
                                   std::to_string(to) + " on empty mailbox");
        Tensor t = std::move(box.front());
        box.pop_front();
        bytes_received_[to] += t.size() * sizeof(double);
        return t;
    }

    void add_attention_macs(std::size_t worker, std::size_t macs) { attn_macs_[worker] += macs; }
    void add_projection_macs(std::size_t worker, std::size_t macs) { proj_macs_[worker] += macs; }

    std::size_t bytes_sent(std::size_t w) const { return bytes_sent_[w]; }
    std::size_t bytes_received(std::size_t w) const { return bytes_received_[w]; }
    std::size_t attention_macs(std::size_t w) const { return attn_macs_[w]; }
    std::size_t projection_macs(std::size_t w) const { return proj_macs_[w]; }
    std::size_t messages_sent() const { return messages_sent_; }

    std::size_t total_bytes_sent() const {
        std::size_t t = 0;
        for (std::size_t b : bytes_sent_) t += b;
        return t;
    }
    std::size_t total_bytes_received() const {
        std::size_t t = 0;
        for (std::size_t b : bytes_received_) t += b;
        return t;
    }

    void reset_counters() {
        std::fill(bytes_sent_.begin(), bytes_sent_.end(), 0);
        std::fill(bytes_received_.begin(), bytes_received_.end(), 0);
        std::fill(attn_macs_.begin(), attn_macs_.end(), 0);
        std::fill(proj_macs_.begin(), proj_macs_.end(), 0);
        messages_sent_ = 0;
    }

    /// Every send must be matched by a receive within one collective.
    void assert_drained() const {
        for (const auto& box : mailboxes_)
            if (!box.empty())
                throw std::logic_error("WorkerFabric: undelivered messages after collective");
    }

    /// Test hook: corrupt a payload in flight (negative control for the
    /// equivalence checker). Never set outside tests.
    std::function<void(std::size_t from, std::size_t to, Tensor&)> message_tamper;

private:
    void check_rank(std::size_t w) const {
        if (w >= P_) throw std::invalid_argument("WorkerFabric: worker rank out of range");
    }

    std::size_t P_;
    std::vector<std::deque<Tensor>> mailboxes_;  // indexed from * P + to
    std::vector<std::size_t> bytes_sent_;
    std::vector<std::size_t> bytes_received_;
    std::vector<std::size_t> attn_macs_;
    std::vector<std::size_t> proj_macs_;
    std::size_t messages_sent_ = 0;
};

/// Contiguous, disjoint row shards of one sequence. When P does not divide S
/// the tail is zero-padded and n_valid records the real length.
struct ShardedSeq {
    std::vector<Tensor> shards;
    std::size_t n_valid = 0;
    std::size_t padded_len = 0;

    std::size_t n_workers() const { return shards.size(); }
    std::size_t shard_rows() const { return shards.empty() ? 0 : shards.front().rows(); }
    std::size_t width() const { return shards.empty() ? 0 : shards.front().cols(); }
};

inline ShardedSeq shard_sequence(const Tensor& x, std::size_t P) {
    if (P == 0) throw std::invalid_argument("shard_sequence: need at least one worker");
    if (x.rank() != 2) throw std::invalid_argument("shard_sequence: rank-2 input required");
    const std::size_t S = x.rows();
    const std::size_t rows_per = (S + P - 1) / P;
    ShardedSeq out;
    out.n_valid = S;
    out.padded_len = rows_per * P;
    for (std::size_t w = 0; w < P; ++w) {
        Tensor shard({rows_per, x.cols()});
        for (std::size_t r = 0; r < rows_per; ++r) {
            const std::size_t src = w * rows_per + r;
            if (src >= S) break;  // zero padding stays
            for (std::size_t c = 0; c < x.cols(); ++c) shard.at(r, c) = x.at(src, c);
        }
        out.shards.push_back(std::move(shard));
    }
    return out;
}

/// Concatenate shards and drop the padding rows.
inline Tensor unshard(const ShardedSeq& s) {
    Tensor full = concat_rows(s.shards, s.width());
    return slice_rows(full, 0, s.n_valid);
}

enum class AllToAllDirection { scatter_heads, gather_seq };

/// The Ulysses collective. scatter_heads: workers hold sequence shards of all
/// heads [S/P x H*d_head] and end with the full sequence of their own head
/// block [S x (H/P)*d_head]. gather_seq is the exact inverse. Each worker
/// ships its full local slab to every peer and the receiver extracts the part
/// it owns, so bytes_sent grows by exactly (P-1)/P * S * H * d_head * 8 per
/// worker per collective.
inline std::vector<Tensor> all_to_all_heads(WorkerFabric& fabric, const std::vector<Tensor>& locals,
                                            AllToAllDirection direction, std::size_t n_heads) {
    const std::size_t P = fabric.size();
    if (locals.size() != P)
        throw std::invalid_argument("all_to_all_heads: one local tensor per worker required");
    if (n_heads == 0 || n_heads % P != 0)
        throw std::invalid_argument("all_to_all_heads: head count not divisible by worker count");
    for (const Tensor& t : locals)
        if (t.rank() != 2 || !t.same_shape(locals.front()))
            throw std::invalid_argument("all_to_all_heads: inconsistent local shapes");
    if (direction == AllToAllDirection::scatter_heads && locals.front().cols() % n_heads != 0)
        throw std::invalid_argument("all_to_all_heads: width not divisible by head count");

    const std::size_t local_rows = locals.front().rows();
    const std::size_t local_cols = locals.front().cols();
    const std::size_t head_block = n_heads / P;  // heads per worker after scatter

    if (P == 1) return locals;  // no communication at degree one

    // Phase 1: every worker posts its full slab to every peer.
    for (std::size_t w = 0; w < P; ++w)
        for (std::size_t t = 0; t < P; ++t)
            if (t != w) fabric.send(w, t, locals[w]);

    // Phase 2: receivers assemble, draining senders in rank order.
    std::vector<Tensor> out;
    out.reserve(P);
    if (direction == AllToAllDirection::scatter_heads) {
        const std::size_t d_head = local_cols / n_heads;
        const std::size_t block_cols = head_block * d_head;
        for (std::size_t t = 0; t < P; ++t) {
            Tensor assembled({local_rows * P, block_cols});
            for (std::size_t w = 0; w < P; ++w) {
                const Tensor chunk = (w == t) ? locals[t] : fabric.recv(w, t);
                paste_rows(assembled, slice_cols(chunk, t * block_cols, block_cols),
                           w * local_rows);
            }
            out.push_back(std::move(assembled));
        }
    } else {
        // gather_seq: locals are [S x (H/P)*d_head]; outputs are [S/P x H*d_head].
        if (local_rows % P != 0)
            throw std::invalid_argument("all_to_all_heads: sequence not divisible by workers");
        const std::size_t rows_out = local_rows / P;
        const std::size_t block_cols = local_cols;  // sender's head block
        for (std::size_t t = 0; t < P; ++t) {
            Tensor assembled({rows_out, block_cols * P});
            for (std::size_t w = 0; w < P; ++w) {
                const Tensor chunk = (w == t) ? locals[t] : fabric.recv(w, t);
                paste_cols(assembled, slice_rows(chunk, t * rows_out, rows_out), w * block_cols);
            }
            out.push_back(std::move(assembled));
        }
    }
    fabric.assert_drained();
    return out;
}

namespace detail {

// Per-worker attention over its local heads. Keys/values are truncated to the
// valid sequence length so zero padding never leaks into the softmax.
inline Tensor local_head_attention(WorkerFabric& fabric, std::size_t worker, const Tensor& q,
                                   const Tensor& k, const Tensor& v, std::size_t local_heads,
                                   std::size_t valid_keys) {
    const std::size_t d_head = q.cols() / local_heads;
    Tensor out({q.rows(), v.cols()});
    for (std::size_t h = 0; h < local_heads; ++h) {
        Tensor kh = slice_rows(slice_cols(k, h * d_head, d_head), 0, valid_keys);
        Tensor vh = slice_rows(slice_cols(v, h * d_head, d_head), 0, valid_keys);
        Tensor oh = scaled_dot_attention(slice_cols(q, h * d_head, d_head), kh, vh);
        paste_cols(out, oh, h * d_head);
        // Two matmuls per head: logits and the value mix.
        fabric.add_attention_macs(worker, 2 * q.rows() * valid_keys * d_head);
    }
    return out;
}

}  // namespace detail

struct SpSelfCache {
    std::vector<Tensor> qh, kh, vh;  // per-worker scattered tensors
    std::size_t n_valid = 0;
    std::size_t n_heads = 0;
};

/// Sequence-parallel multi-head self-attention: scatter q, k, v (three
/// collectives), full-sequence attention per worker over its heads, gather
/// the output (one collective).
inline ShardedSeq sp_self_attention(WorkerFabric& fabric, const ShardedSeq& q,
                                    const ShardedSeq& k, const ShardedSeq& v, std::size_t n_heads,
                                    SpSelfCache* cache = nullptr) {
    const std::size_t P = fabric.size();
    if (q.n_workers() != P || k.n_workers() != P || v.n_workers() != P)
        throw std::invalid_argument("sp_self_attention: shard count != worker count");
    if (q.n_valid != k.n_valid || q.n_valid != v.n_valid)
        throw std::invalid_argument("sp_self_attention: q/k/v sequence lengths differ");

    std::vector<Tensor> qh = all_to_all_heads(fabric, q.shards, AllToAllDirection::scatter_heads,
                                              n_heads);
    std::vector<Tensor> kh = all_to_all_heads(fabric, k.shards, AllToAllDirection::scatter_heads,
                                              n_heads);
    std::vector<Tensor> vh = all_to_all_heads(fabric, v.shards, AllToAllDirection::scatter_heads,
                                              n_heads);

    const std::size_t local_heads = n_heads / P;
    std::vector<Tensor> outs;
    outs.reserve(P);
    for (std::size_t w = 0; w < P; ++w)
        outs.push_back(
            detail::local_head_attention(fabric, w, qh[w], kh[w], vh[w], local_heads, q.n_valid));

    if (cache) {
        cache->qh = std::move(qh);
        cache->kh = std::move(kh);
        cache->vh = std::move(vh);
        cache->n_valid = q.n_valid;
        cache->n_heads = n_heads;
    }

    std::vector<Tensor> gathered = all_to_all_heads(fabric, outs, AllToAllDirection::gather_seq,
                                                    n_heads);
    ShardedSeq out;
    out.shards = std::move(gathered);
    out.n_valid = q.n_valid;
    out.padded_len = q.padded_len;
    return out;
}

/// Backward through the SP self-attention path. The collectives are linear
/// permutations, so their adjoints are simply the inverse collectives: the
/// output gradient is scattered, per-head attention backward runs locally,
/// and the three input gradients are gathered back to sequence shards.
inline void sp_self_attention_backward(WorkerFabric& fabric, const ShardedSeq& d_out,
                                       const SpSelfCache& cache, ShardedSeq& d_q, ShardedSeq& d_k,
                                       ShardedSeq& d_v) {
    const std::size_t P = fabric.size();
    const std::size_t n_heads = cache.n_heads;
    std::vector<Tensor> d_out_h = all_to_all_heads(fabric, d_out.shards,
                                                   AllToAllDirection::scatter_heads, n_heads);
    const std::size_t local_heads = n_heads / P;
    std::vector<Tensor> dq(P), dk(P), dv(P);
    for (std::size_t w = 0; w < P; ++w) {
        const Tensor& q = cache.qh[w];
        const Tensor& k = cache.kh[w];
        const Tensor& v = cache.vh[w];
        const std::size_t d_head = q.cols() / local_heads;
        dq[w] = Tensor(q.shape);
        dk[w] = Tensor(k.shape);
        dv[w] = Tensor(v.shape);
        for (std::size_t h = 0; h < local_heads; ++h) {
            Tensor kh = slice_rows(slice_cols(k, h * d_head, d_head), 0, cache.n_valid);
            Tensor vh = slice_rows(slice_cols(v, h * d_head, d_head), 0, cache.n_valid);
            AttentionGrads g = scaled_dot_attention_backward(
                slice_cols(d_out_h[w], h * d_head, d_head), slice_cols(q, h * d_head, d_head),
                kh, vh);
            paste_cols(dq[w], g.d_q, h * d_head);
            // Padding rows received no attention, so their gradient is zero.
            Tensor dk_pad({k.rows(), d_head});
            paste_rows(dk_pad, g.d_k, 0);
            paste_cols(dk[w], dk_pad, h * d_head);
            Tensor dv_pad({v.rows(), d_head});
            paste_rows(dv_pad, g.d_v, 0);
            paste_cols(dv[w], dv_pad, h * d_head);
        }
    }
    auto gather = [&](std::vector<Tensor>& t) {
        ShardedSeq s;
        s.shards = all_to_all_heads(fabric, t, AllToAllDirection::gather_seq, n_heads);
        s.n_valid = d_out.n_valid;
        s.padded_len = d_out.padded_len;
        return s;
    };
    d_q = gather(dq);
    d_k = gather(dk);
    d_v = gather(dv);
}

struct SpCrossCache {
    std::vector<Tensor> qh;      // scattered queries per worker
    std::vector<Tensor> kw, vw;  // per-worker projected K/V for its head block
    std::size_t n_heads = 0;
};

/// Sequence-parallel cross-attention. Queries are scattered (one collective);
/// the condition sequence is replicated on every worker, which projects keys
/// and values only for its own head block, so no K/V communication happens.
/// One gather returns the output to sequence shards: two collectives total,
/// half of self-attention's four.
inline ShardedSeq sp_cross_attention(WorkerFabric& fabric, const ShardedSeq& q, const Tensor& cond,
                                     const Tensor& w_k, const Tensor& w_v, std::size_t n_heads,
                                     SpCrossCache* cache = nullptr) {
    const std::size_t P = fabric.size();
    if (q.n_workers() != P) throw std::invalid_argument("sp_cross_attention: shard count != P");
    if (cond.rank() != 2 || w_k.rank() != 2 || w_v.rank() != 2 || cond.cols() != w_k.rows() ||
        cond.cols() != w_v.rows() || w_k.cols() != w_v.cols())
        throw std::invalid_argument("sp_cross_attention: condition/projection shape mismatch");
    if (n_heads == 0 || w_k.cols() % n_heads != 0)
        throw std::invalid_argument("sp_cross_attention: head count must divide projection width");

    std::vector<Tensor> qh = all_to_all_heads(fabric, q.shards, AllToAllDirection::scatter_heads,
                                              n_heads);
    const std::size_t local_heads = n_heads / P;
    const std::size_t d_head = w_k.cols() / n_heads;
    const std::size_t block_cols = local_heads * d_head;

    std::vector<Tensor> outs(P), kw(P), vw(P);
    for (std::size_t w = 0; w < P; ++w) {
        kw[w] = matmul(cond, slice_cols(w_k, w * block_cols, block_cols));
        vw[w] = matmul(cond, slice_cols(w_v, w * block_cols, block_cols));
        fabric.add_projection_macs(w, 2 * cond.rows() * cond.cols() * block_cols);
        outs[w] = detail::local_head_attention(fabric, w, qh[w], kw[w], vw[w], local_heads,
                                               cond.rows());
    }

    if (cache) {
        cache->qh = std::move(qh);
        cache->kw = std::move(kw);
        cache->vw = std::move(vw);
        cache->n_heads = n_heads;
    }

    std::vector<Tensor> gathered = all_to_all_heads(fabric, outs, AllToAllDirection::gather_seq,
                                                    n_heads);
    ShardedSeq out;
    out.shards = std::move(gathered);
    out.n_valid = q.n_valid;
    out.padded_len = q.padded_len;
    return out;
}

struct SpCrossGrads {
    ShardedSeq d_q;
    Tensor d_cond;  // summed over workers, as the data-parallel reduction would
    Tensor d_w_k;
    Tensor d_w_v;
};

inline SpCrossGrads sp_cross_attention_backward(WorkerFabric& fabric, const ShardedSeq& d_out,
                                                const SpCrossCache& cache, const Tensor& cond,
                                                const Tensor& w_k, const Tensor& w_v,
                                                std::size_t n_heads) {
    const std::size_t P = fabric.size();
    std::vector<Tensor> d_out_h = all_to_all_heads(fabric, d_out.shards,
                                                   AllToAllDirection::scatter_heads, n_heads);
    const std::size_t local_heads = n_heads / P;
    const std::size_t d_head = w_k.cols() / n_heads;
    const std::size_t block_cols = local_heads * d_head;

    SpCrossGrads g;
    g.d_cond = Tensor(cond.shape);
    g.d_w_k = Tensor(w_k.shape);
    g.d_w_v = Tensor(w_v.shape);
    std::vector<Tensor> dq(P);
    for (std::size_t w = 0; w < P; ++w) {
        const Tensor& q = cache.qh[w];
        dq[w] = Tensor(q.shape);
        Tensor dk_block(cache.kw[w].shape);
        Tensor dv_block(cache.vw[w].shape);
        for (std::size_t h = 0; h < local_heads; ++h) {
            AttentionGrads ag = scaled_dot_attention_backward(
                slice_cols(d_out_h[w], h * d_head, d_head), slice_cols(q, h * d_head, d_head),
                slice_cols(cache.kw[w], h * d_head, d_head),
                slice_cols(cache.vw[w], h * d_head, d_head));
            paste_cols(dq[w], ag.d_q, h * d_head);
            paste_cols(dk_block, ag.d_k, h * d_head);
            paste_cols(dv_block, ag.d_v, h * d_head);
        }
        Tensor d_cond_k, d_wk_block;
        matmul_backward(dk_block, cond, slice_cols(w_k, w * block_cols, block_cols), d_cond_k,
                        d_wk_block);
        Tensor d_cond_v, d_wv_block;
        matmul_backward(dv_block, cond, slice_cols(w_v, w * block_cols, block_cols), d_cond_v,
                        d_wv_block);
        accumulate(g.d_cond, d_cond_k);
        accumulate(g.d_cond, d_cond_v);
        paste_cols(g.d_w_k, d_wk_block, w * block_cols);
        paste_cols(g.d_w_v, d_wv_block, w * block_cols);
    }
    g.d_q.shards = all_to_all_heads(fabric, dq, AllToAllDirection::gather_seq, n_heads);
    g.d_q.n_valid = d_out.n_valid;
    g.d_q.padded_len = d_out.padded_len;
    return g;
}

/// Closed-form communication model per layer and its fixed collective counts.
struct CommReport {
    std::size_t P = 1, S = 0, L_C = 0, H = 0, d_head = 0;
    std::size_t self_collectives = 4;
    std::size_t cross_collectives = 2;
    std::size_t elements_per_collective_per_worker = 0;
    std::size_t self_elements_per_worker = 0;
    std::size_t cross_elements_per_worker = 0;
    std::size_t self_bytes_per_worker = 0;
    std::size_t cross_bytes_per_worker = 0;
};

inline CommReport comm_volume_model(std::size_t S, std::size_t L_C, std::size_t H,
                                    std::size_t d_head, std::size_t P) {
    if (P == 0 || H == 0 || d_head == 0) throw std::invalid_argument("comm_volume_model: zero extent");
    CommReport r;
    r.P = P;
    r.S = S;
    r.L_C = L_C;
    r.H = H;
    r.d_head = d_head;
    const std::size_t rows_per = (S + P - 1) / P;  // padded shard size
    r.elements_per_collective_per_worker = (P - 1) * rows_per * H * d_head;
    r.self_elements_per_worker = r.self_collectives * r.elements_per_collective_per_worker;
    r.cross_elements_per_worker = r.cross_collectives * r.elements_per_collective_per_worker;
    r.self_bytes_per_worker = r.self_elements_per_worker * sizeof(double);
    r.cross_bytes_per_worker = r.cross_elements_per_worker * sizeof(double);
    return r;
}

}  // namespace omniflow
