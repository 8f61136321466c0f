// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "qdst/linalg.hpp"
#include "qdst/pattern.hpp"

namespace qdst {

struct HeadConfig {
    std::size_t num_heads = 1;
    std::size_t head_dim = 1;
    std::size_t dim() const { return num_heads * head_dim; }
};

/// Projection matrices of one attention sublayer, all dim x dim.
/// wf mixes the concatenated head outputs back to model width.
template <typename T>
struct AttentionWeights {
    Mat<T> wq, wk, wv, wf;

    static AttentionWeights identity(std::size_t dim) {
        AttentionWeights w;
        w.wq = w.wk = w.wv = w.wf = Mat<T>::Identity(dim, dim);
        return w;
    }
};

template <typename T>
struct Projections {
    Mat<T> q, k, v; // n x dim each; head a owns columns [a*head_dim, (a+1)*head_dim)
};

/// q = h * wq^T (and likewise k, v). Throws InvalidInput on shape mismatch.
template <typename T>
Projections<T> project_qkv(const Mat<T>& h, const AttentionWeights<T>& weights);

/// Softmax of `scores` restricted to the `allowed` index set, with
/// max-subtraction. Returns a full-length distribution; disallowed entries
/// are exactly zero. Throws InternalInvariantViolation if allowed is empty.
template <typename T>
std::vector<T> masked_softmax_row(std::span<const T> scores,
                                  std::span<const std::size_t> allowed);

/// Row-wise attention distributions restricted to the allowed columns,
/// aligned with a RowSupport: probs is head-major, each head segment laid
/// out like support.cols.
template <typename T>
struct AttentionTrace {
    std::shared_ptr<const RowSupport> support;
    std::size_t num_heads = 0;
    std::vector<T> probs;

    std::span<const T> row(std::size_t head, std::size_t i) const {
        const std::size_t base = head * support->nnz();
        return {probs.data() + base + support->row_ptr[i], support->row_size(i)};
    }
    /// Attention weight i -> j for one head; zero when (i, j) is not allowed.
    T prob(std::size_t head, std::size_t i, std::size_t j) const;
};

/// Forward state retained for the analytic backward pass.
template <typename T>
struct AttentionCache {
    bool valid = false;
    HeadConfig heads;
    std::shared_ptr<const RowSupport> support;
    Mat<T> input;        // H
    Mat<T> q, k, v;      // projections
    Mat<T> concat;       // per-head outputs before wf
    std::vector<T> probs; // like AttentionTrace::probs
};

template <typename T>
struct AttentionGrads {
    Mat<T> input; // dL/dH
    AttentionWeights<T> weights;
};

/// Multi-head scaled dot-product attention restricted to the support.
/// Per row i the kernel scores only the allowed columns, softmaxes over
/// them, and mixes the corresponding value rows; PAD rows produce zeros.
/// Scores are never materialized as an n x n matrix.
template <typename T>
Mat<T> sparse_attention_forward(const Mat<T>& h, const AttentionWeights<T>& weights,
                                const HeadConfig& heads,
                                const std::shared_ptr<const RowSupport>& support,
                                AttentionTrace<T>* trace = nullptr,
                                AttentionCache<T>* cache = nullptr);

/// Convenience overload matching the pattern-level contract.
template <typename T>
std::pair<Mat<T>, std::optional<AttentionTrace<T>>>
sparse_attention_forward(const Mat<T>& h, const AttentionWeights<T>& weights,
                         const HeadConfig& heads, const BlockSparsePattern& pattern,
                         bool record_trace);

/// Analytic reverse-mode gradients for sparse_attention_forward.
/// Throws InvalidState when the cache was not filled by a forward call.
template <typename T>
AttentionGrads<T> sparse_attention_backward(const Mat<T>& upstream,
                                            const AttentionWeights<T>& weights,
                                            const AttentionCache<T>& cache);

enum class MaskPlacement {
    PreSoftmax,         // additive -inf before softmax (the supported semantics)
    PostSoftmaxLiteral  // zero out after softmax, rows left unnormalized (diagnostic)
};

/// Dense-masked oracle: materializes the full score matrix, applies the
/// mask, and runs textbook multi-head attention. mask is row-major n*n of
/// {0,1}. Throws InvalidInput for an all-zero mask row or n > oracle_cap.
template <typename T>
Mat<T> dense_reference_attention(const Mat<T>& h, const AttentionWeights<T>& weights,
                                 const HeadConfig& heads,
                                 const std::vector<std::uint8_t>& mask,
                                 MaskPlacement placement = MaskPlacement::PreSoftmax,
                                 std::size_t oracle_cap = 2048);

struct CostEstimate {
    std::uint64_t feedforward_flops = 0;
    std::uint64_t attention_flops = 0;
    std::uint64_t total = 0;
};

/// Multiply-add count for one transformer layer of this kernel.
///   feedforward: QKV projections (3 dim^2 n) + attention output mix
///   (dim^2 n) + position-wise FFN at 4x inner width (8 dim^2 n), so
///   c1 = 12 MACs per token per dim^2.
///   attention: one MAC per stored score element per feature for Q.K^T and
///   one for the value mix, so c2 = 2; the sparse per-row column budget is
///   w + q_len + num_sentences + 1 (the [CLS] column), clamped at n.
CostEstimate flop_estimate(std::size_t n, std::size_t dim, std::size_t w,
                           std::size_t q_len, std::size_t num_sentences, bool full);

/// Peak live score/probability storage (elements) seen by any forward call
/// since the last reset. Exposed so tests can pin the kernel's memory bound.
std::uint64_t score_alloc_peak();
void reset_score_alloc_peak();

} // namespace qdst
