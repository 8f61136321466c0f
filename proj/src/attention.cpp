// SPDX-License-Identifier: Apache-2.0
#include "qdst/attention.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <string>

#include "qdst/errors.hpp"
#include "qdst/runtime.hpp"

namespace qdst {

namespace {

std::atomic<std::uint64_t> g_score_alloc_peak{0};

void note_score_alloc(std::uint64_t elems) {
    std::uint64_t prev = g_score_alloc_peak.load();
    while (prev < elems && !g_score_alloc_peak.compare_exchange_weak(prev, elems)) {
    }
}

template <typename T>
void check_attention_shapes(const Mat<T>& h, const AttentionWeights<T>& weights,
                            const HeadConfig& heads) {
    const auto dim = static_cast<Eigen::Index>(heads.dim());
    if (heads.head_dim == 0 || heads.num_heads == 0) {
        throw InvalidInput("attention: head config must be positive");
    }
    if (h.cols() != dim) {
        throw InvalidInput("attention: H has width " + std::to_string(h.cols()) +
                           ", expected " + std::to_string(dim));
    }
    for (const Mat<T>* w : {&weights.wq, &weights.wk, &weights.wv, &weights.wf}) {
        if (w->rows() != dim || w->cols() != dim) {
            throw InvalidInput("attention: projection matrices must be dim x dim");
        }
    }
}

} // namespace

std::uint64_t score_alloc_peak() { return g_score_alloc_peak.load(); }
void reset_score_alloc_peak() { g_score_alloc_peak.store(0); }

template <typename T>
Projections<T> project_qkv(const Mat<T>& h, const AttentionWeights<T>& weights) {
    if (h.cols() != weights.wq.cols() || weights.wq.rows() != weights.wq.cols() ||
        weights.wk.rows() != h.cols() || weights.wk.cols() != h.cols() ||
        weights.wv.rows() != h.cols() || weights.wv.cols() != h.cols()) {
        throw InvalidInput("project_qkv: shape mismatch");
    }
    Projections<T> p;
    p.q.noalias() = h * weights.wq.transpose();
    p.k.noalias() = h * weights.wk.transpose();
    p.v.noalias() = h * weights.wv.transpose();
    return p;
}

template <typename T>
std::vector<T> masked_softmax_row(std::span<const T> scores,
                                  std::span<const std::size_t> allowed) {
    if (allowed.empty()) {
        throw InternalInvariantViolation("masked_softmax_row: empty allowed set");
    }
    T maxv = -std::numeric_limits<T>::infinity();
    for (std::size_t idx : allowed) {
        if (idx >= scores.size()) {
            throw InvalidInput("masked_softmax_row: allowed index out of range");
        }
        maxv = std::max(maxv, scores[idx]);
    }
    std::vector<T> out(scores.size(), T(0));
    T sum = 0;
    for (std::size_t idx : allowed) {
        const T e = std::exp(scores[idx] - maxv);
        out[idx] = e;
        sum += e;
    }
    const T inv = T(1) / sum;
    for (std::size_t idx : allowed) {
        out[idx] *= inv;
    }
    return out;
}

template <typename T>
T AttentionTrace<T>::prob(std::size_t head, std::size_t i, std::size_t j) const {
    const auto cols = support->row(i);
    const auto it = std::lower_bound(cols.begin(), cols.end(), static_cast<std::uint32_t>(j));
    if (it == cols.end() || *it != j) return T(0);
    const std::size_t off = static_cast<std::size_t>(it - cols.begin());
    return probs[head * support->nnz() + support->row_ptr[i] + off];
}

namespace {

// Score + softmax + mix over one head's rows. Writes probabilities into
// probs_head (CSR-aligned) and the head slice of out.
template <typename T>
void head_forward(const RowSupport& support, const Mat<T>& q, const Mat<T>& k,
                  const Mat<T>& v, Mat<T>& out, T* probs_head, std::size_t head,
                  std::size_t head_dim) {
    const std::size_t dim = static_cast<std::size_t>(q.cols());
    const std::size_t off = head * head_dim;
    const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
    using MapV = Eigen::Map<const Vec<T>>;
    using MapMutV = Eigen::Map<Vec<T>>;

    for (std::size_t i = 0; i < support.valid_len; ++i) {
        const auto cols = support.row(i);
        if (cols.empty()) {
            throw InternalInvariantViolation("attention: empty support row " +
                                             std::to_string(i));
        }
        T* row = probs_head + support.row_ptr[i];
        MapV qi(q.data() + i * dim + off, head_dim);

        T maxv = -std::numeric_limits<T>::infinity();
        for (std::size_t t = 0; t < cols.size(); ++t) {
            MapV kj(k.data() + static_cast<std::size_t>(cols[t]) * dim + off, head_dim);
            row[t] = scale * qi.dot(kj);
            maxv = std::max(maxv, row[t]);
        }
        T sum = 0;
        for (std::size_t t = 0; t < cols.size(); ++t) {
            row[t] = std::exp(row[t] - maxv);
            sum += row[t];
        }
        const T inv = T(1) / sum;
        MapMutV oi(out.data() + i * dim + off, head_dim);
        oi.setZero();
        for (std::size_t t = 0; t < cols.size(); ++t) {
            row[t] *= inv;
            MapV vj(v.data() + static_cast<std::size_t>(cols[t]) * dim + off, head_dim);
            oi += row[t] * vj;
        }
    }
    for (std::size_t i = support.valid_len; i < support.n; ++i) {
        MapMutV oi(out.data() + i * dim + off, head_dim);
        oi.setZero();
    }
}

} // namespace

template <typename T>
Mat<T> sparse_attention_forward(const Mat<T>& h, const AttentionWeights<T>& weights,
                                const HeadConfig& heads,
                                const std::shared_ptr<const RowSupport>& support,
                                AttentionTrace<T>* trace, AttentionCache<T>* cache) {
    check_attention_shapes(h, weights, heads);
    if (!support || support->n != static_cast<std::size_t>(h.rows())) {
        throw InvalidInput("attention: pattern length does not match the sequence");
    }

    Projections<T> proj = project_qkv(h, weights);
    const std::size_t nnz = support->nnz();
    std::vector<T> probs(heads.num_heads * nnz);
    note_score_alloc(probs.size());

    Mat<T> concat(h.rows(), h.cols());
    parallel_for(heads.num_heads, [&](std::size_t a) {
        head_forward<T>(*support, proj.q, proj.k, proj.v, concat,
                        probs.data() + a * nnz, a, heads.head_dim);
    });

    Mat<T> out;
    out.noalias() = concat * weights.wf.transpose();

    if (trace) {
        trace->support = support;
        trace->num_heads = heads.num_heads;
        if (cache) {
            trace->probs = probs;
        } else {
            trace->probs = std::move(probs);
        }
    }
    if (cache) {
        cache->valid = true;
        cache->heads = heads;
        cache->support = support;
        cache->input = h;
        cache->q = std::move(proj.q);
        cache->k = std::move(proj.k);
        cache->v = std::move(proj.v);
        cache->concat = std::move(concat);
        cache->probs = std::move(probs);
    }
    return out;
}

template <typename T>
std::pair<Mat<T>, std::optional<AttentionTrace<T>>>
sparse_attention_forward(const Mat<T>& h, const AttentionWeights<T>& weights,
                         const HeadConfig& heads, const BlockSparsePattern& pattern,
                         bool record_trace) {
    auto support = std::make_shared<RowSupport>(RowSupport::build(pattern));
    if (record_trace) {
        AttentionTrace<T> trace;
        Mat<T> out = sparse_attention_forward<T>(h, weights, heads, support, &trace, nullptr);
        return {std::move(out), std::move(trace)};
    }
    Mat<T> out = sparse_attention_forward<T>(h, weights, heads, support, nullptr, nullptr);
    return {std::move(out), std::nullopt};
}

template <typename T>
AttentionGrads<T> sparse_attention_backward(const Mat<T>& upstream,
                                            const AttentionWeights<T>& weights,
                                            const AttentionCache<T>& cache) {
    if (!cache.valid) {
        throw InvalidState("sparse_attention_backward: forward cache missing");
    }
    if (upstream.rows() != cache.input.rows() || upstream.cols() != cache.input.cols()) {
        throw InvalidInput("sparse_attention_backward: upstream gradient shape mismatch");
    }
    const RowSupport& support = *cache.support;
    const std::size_t dim = static_cast<std::size_t>(cache.input.cols());
    const std::size_t nnz = support.nnz();
    const HeadConfig& heads = cache.heads;

    AttentionGrads<T> g;
    g.weights.wf.noalias() = upstream.transpose() * cache.concat;

    Mat<T> d_concat;
    d_concat.noalias() = upstream * weights.wf;

    Mat<T> dq = Mat<T>::Zero(cache.input.rows(), dim);
    Mat<T> dk = Mat<T>::Zero(cache.input.rows(), dim);
    Mat<T> dv = Mat<T>::Zero(cache.input.rows(), dim);

    std::vector<T> dscores(heads.num_heads * nnz);
    note_score_alloc(cache.probs.size() + dscores.size());

    parallel_for(heads.num_heads, [&](std::size_t a) {
        const std::size_t off = a * heads.head_dim;
        const T scale = T(1) / std::sqrt(static_cast<T>(heads.head_dim));
        const T* probs_head = cache.probs.data() + a * nnz;
        T* ds_head = dscores.data() + a * nnz;
        using MapV = Eigen::Map<const Vec<T>>;
        using MapMutV = Eigen::Map<Vec<T>>;

        for (std::size_t i = 0; i < support.valid_len; ++i) {
            const auto cols = support.row(i);
            const T* p = probs_head + support.row_ptr[i];
            T* ds = ds_head + support.row_ptr[i];
            MapV dui(d_concat.data() + i * dim + off, heads.head_dim);

            // dP(i,j) = dU_i . V_j, then the softmax Jacobian per row.
            T row_dot = 0;
            for (std::size_t t = 0; t < cols.size(); ++t) {
                MapV vj(cache.v.data() + static_cast<std::size_t>(cols[t]) * dim + off,
                        heads.head_dim);
                ds[t] = dui.dot(vj);
                row_dot += p[t] * ds[t];
            }
            MapV qi(cache.q.data() + i * dim + off, heads.head_dim);
            MapMutV dqi(dq.data() + i * dim + off, heads.head_dim);
            for (std::size_t t = 0; t < cols.size(); ++t) {
                const std::size_t j = cols[t];
                const T dsc = scale * p[t] * (ds[t] - row_dot);
                MapV kj(cache.k.data() + j * dim + off, heads.head_dim);
                MapMutV dkj(dk.data() + j * dim + off, heads.head_dim);
                MapMutV dvj(dv.data() + j * dim + off, heads.head_dim);
                dqi += dsc * kj;
                dkj += dsc * qi;
                dvj += p[t] * dui;
            }
        }
    });

    g.weights.wq.noalias() = dq.transpose() * cache.input;
    g.weights.wk.noalias() = dk.transpose() * cache.input;
    g.weights.wv.noalias() = dv.transpose() * cache.input;
    g.input.noalias() = dq * weights.wq;
    g.input.noalias() += dk * weights.wk;
    g.input.noalias() += dv * weights.wv;
    return g;
}

template <typename T>
Mat<T> dense_reference_attention(const Mat<T>& h, const AttentionWeights<T>& weights,
                                 const HeadConfig& heads,
                                 const std::vector<std::uint8_t>& mask,
                                 MaskPlacement placement, std::size_t oracle_cap) {
    check_attention_shapes(h, weights, heads);
    const std::size_t n = static_cast<std::size_t>(h.rows());
    if (n > oracle_cap) {
        throw InvalidInput("dense_reference_attention: n exceeds the oracle cap");
    }
    if (mask.size() != n * n) {
        throw InvalidInput("dense_reference_attention: mask must be n*n");
    }
    for (std::size_t i = 0; i < n; ++i) {
        bool any = false;
        for (std::size_t j = 0; j < n && !any; ++j) any = mask[i * n + j] != 0;
        if (!any) {
            throw InvalidInput("dense_reference_attention: all-zero mask row " +
                               std::to_string(i));
        }
    }

    const Projections<T> proj = project_qkv(h, weights);
    const T scale = T(1) / std::sqrt(static_cast<T>(heads.head_dim));
    const T neg_inf = -std::numeric_limits<T>::infinity();

    Mat<T> concat(h.rows(), h.cols());
    for (std::size_t a = 0; a < heads.num_heads; ++a) {
        const auto off = static_cast<Eigen::Index>(a * heads.head_dim);
        const auto hd = static_cast<Eigen::Index>(heads.head_dim);
        Mat<T> scores;
        scores.noalias() = proj.q.middleCols(off, hd) * proj.k.middleCols(off, hd).transpose();
        scores *= scale;
        if (placement == MaskPlacement::PreSoftmax) {
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    if (!mask[i * n + j]) scores(i, j) = neg_inf;
        }
        Mat<T> p(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            const T maxv = scores.row(i).maxCoeff();
            T sum = 0;
            for (std::size_t j = 0; j < n; ++j) {
                p(i, j) = std::exp(scores(i, j) - maxv);
                sum += p(i, j);
            }
            p.row(i) /= sum;
        }
        if (placement == MaskPlacement::PostSoftmaxLiteral) {
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    if (!mask[i * n + j]) p(i, j) = T(0);
        }
        concat.middleCols(off, hd).noalias() = p * proj.v.middleCols(off, hd);
    }
    return concat * weights.wf.transpose();
}

CostEstimate flop_estimate(std::size_t n, std::size_t dim, std::size_t w,
                           std::size_t q_len, std::size_t num_sentences, bool full) {
    CostEstimate est;
    est.feedforward_flops = std::uint64_t{12} * dim * dim * n;
    const std::uint64_t cols_per_row =
        full ? n : std::min<std::uint64_t>(w + q_len + num_sentences + 1, n);
    est.attention_flops = std::uint64_t{2} * n * cols_per_row * dim;
    est.total = est.feedforward_flops + est.attention_flops;
    return est;
}

// Instantiations for the supported scalar types.
#define QDST_INSTANTIATE_ATTENTION(T)                                                        \
    template Projections<T> project_qkv<T>(const Mat<T>&, const AttentionWeights<T>&);       \
    template std::vector<T> masked_softmax_row<T>(std::span<const T>,                        \
                                                  std::span<const std::size_t>);             \
    template T AttentionTrace<T>::prob(std::size_t, std::size_t, std::size_t) const;         \
    template Mat<T> sparse_attention_forward<T>(                                             \
        const Mat<T>&, const AttentionWeights<T>&, const HeadConfig&,                        \
        const std::shared_ptr<const RowSupport>&, AttentionTrace<T>*, AttentionCache<T>*);   \
    template std::pair<Mat<T>, std::optional<AttentionTrace<T>>> sparse_attention_forward<T>(\
        const Mat<T>&, const AttentionWeights<T>&, const HeadConfig&,                        \
        const BlockSparsePattern&, bool);                                                    \
    template AttentionGrads<T> sparse_attention_backward<T>(                                 \
        const Mat<T>&, const AttentionWeights<T>&, const AttentionCache<T>&);                \
    template Mat<T> dense_reference_attention<T>(const Mat<T>&, const AttentionWeights<T>&,  \
                                                 const HeadConfig&,                          \
                                                 const std::vector<std::uint8_t>&,           \
                                                 MaskPlacement, std::size_t);

QDST_INSTANTIATE_ATTENTION(float)
QDST_INSTANTIATE_ATTENTION(double)

#undef QDST_INSTANTIATE_ATTENTION

} // namespace qdst
