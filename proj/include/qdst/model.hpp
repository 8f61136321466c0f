// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "qdst/attention.hpp"
#include "qdst/layout.hpp"
#include "qdst/linalg.hpp"
#include "qdst/pattern.hpp"

namespace qdst {

inline constexpr double kLayerNormEpsilon = 1e-12;
inline constexpr std::uint32_t kModelFormatVersion = 1;

struct ModelConfig {
    std::size_t num_layers = 2;
    std::size_t dim = 64;
    std::size_t num_heads = 4;
    std::size_t max_len = 2048;
    std::size_t vocab_size = 30522;
    double dropout_rate = 0.1;
    PatternConfig pattern;

    HeadConfig head_config() const { return {num_heads, dim / num_heads}; }
    std::size_t ffn_dim() const { return 4 * dim; }
    std::string describe() const;

    bool operator==(const ModelConfig&) const = default;
};

/// Throws InvalidInput unless dim divides into heads, max_len >= 3,
/// dropout in [0, 1), and the vocabulary covers the reserved ids.
void validate_config(const ModelConfig& config);

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const PatternConfig& c);
void from_json(const nlohmann::json& j, PatternConfig& c);

template <typename T>
struct LayerParams {
    AttentionWeights<T> attn;
    Mat<T> ln1_gamma, ln1_beta; // dim x 1
    Mat<T> ffn_w1, ffn_b1;      // (4 dim x dim), (4 dim x 1)
    Mat<T> ffn_w2, ffn_b2;      // (dim x 4 dim), (dim x 1)
    Mat<T> ln2_gamma, ln2_beta;
};

/// All tensors of the ranker. Vectors are stored as x by 1 matrices so a
/// single visitor covers every tensor; for_each_tensor fixes the
/// serialization order.
template <typename T>
struct ModelParams {
    Mat<T> token_emb; // vocab_size x dim
    Mat<T> pos_emb;   // max_len x dim
    std::vector<LayerParams<T>> layers;
    Mat<T> head_w; // dim x 1
    Mat<T> head_b; // 1 x 1

    template <typename Fn>
    void for_each_tensor(Fn&& fn) {
        visit(*this, fn);
    }
    template <typename Fn>
    void for_each_tensor(Fn&& fn) const {
        visit(*this, fn);
    }

    /// Truncated normal (sigma 0.02, resampled beyond two sigma) for weight
    /// matrices and embeddings, zeros for biases, ones for norm scales.
    static ModelParams init(const ModelConfig& config, std::uint64_t seed);
    static ModelParams zeros_like(const ModelConfig& config);

private:
    template <typename Self, typename Fn>
    static void visit(Self& self, Fn& fn) {
        fn("token_emb", self.token_emb);
        fn("pos_emb", self.pos_emb);
        for (std::size_t l = 0; l < self.layers.size(); ++l) {
            auto& layer = self.layers[l];
            const std::string p = "layer" + std::to_string(l) + ".";
            fn(p + "wq", layer.attn.wq);
            fn(p + "wk", layer.attn.wk);
            fn(p + "wv", layer.attn.wv);
            fn(p + "wf", layer.attn.wf);
            fn(p + "ln1_gamma", layer.ln1_gamma);
            fn(p + "ln1_beta", layer.ln1_beta);
            fn(p + "ffn_w1", layer.ffn_w1);
            fn(p + "ffn_b1", layer.ffn_b1);
            fn(p + "ffn_w2", layer.ffn_w2);
            fn(p + "ffn_b2", layer.ffn_b2);
            fn(p + "ln2_gamma", layer.ln2_gamma);
            fn(p + "ln2_beta", layer.ln2_beta);
        }
        fn("head_w", self.head_w);
        fn("head_b", self.head_b);
    }
};

enum class LossKind { POINTWISE_BCE, PAIRWISE_SOFTMAX };
std::string loss_kind_name(LossKind kind);
LossKind parse_loss_kind(const std::string& name);

struct TrainConfig {
    double learning_rate = 1e-5;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    std::size_t batch_size = 8;
    std::size_t max_steps = 1000;
    std::uint64_t seed = 0;
    LossKind loss_kind = LossKind::POINTWISE_BCE;
};

void validate_config(const TrainConfig& config);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

namespace detail {

template <typename T>
struct LayerNormCache {
    Mat<T> xhat;
    Vec<T> inv_std;
};

template <typename T>
struct LayerCache {
    AttentionCache<T> attn;
    std::vector<std::uint8_t> drop1, drop2; // kept-element masks; empty when off
    LayerNormCache<T> ln1, ln2;
    Mat<T> h1; // first sublayer output (FFN input and residual source)
    Mat<T> z1; // pre-activation FFN
    Mat<T> g1; // GELU(z1)
};

} // namespace detail

/// Everything the analytic backward pass needs from one encode call.
template <typename T>
struct EncodeCache {
    std::vector<TokenId> token_ids;
    std::size_t n = 0;
    double dropout_rate = 0.0; // effective rate the masks were drawn with
    std::shared_ptr<const RowSupport> support;
    std::vector<detail::LayerCache<T>> layers;
    Mat<T> hidden; // final layer output
};

template <typename T>
struct EncodeResult {
    Mat<T> hidden;                         // n x dim after the last layer
    std::vector<AttentionTrace<T>> traces; // one per layer when requested
};

struct Dropout {
    double rate = 0.0;
    std::mt19937_64* rng = nullptr;
};

/// Embeds the layout and applies num_layers post-norm blocks of sparse
/// attention and position-wise feed-forward. The sparse pattern is built
/// once per layout and shared by every layer. Deterministic when dropout
/// is nullptr (inference mode).
template <typename T>
EncodeResult<T> encode(const SequenceLayout& layout, const ModelParams<T>& params,
                       const ModelConfig& config, bool record_trace = false,
                       const Dropout* dropout = nullptr, EncodeCache<T>* cache = nullptr);

/// dL/d(final hidden) back to every parameter tensor; adds into grads.
template <typename T>
void encode_backward(const Mat<T>& d_hidden, const ModelParams<T>& params,
                     const ModelConfig& config, const EncodeCache<T>& cache,
                     ModelParams<T>& grads);

/// Relevance f(q, d): scoring head applied to the [CLS] vector of the last
/// layer, dropout disabled.
template <typename T>
T score_layout(const SequenceLayout& layout, const ModelParams<T>& params,
               const ModelConfig& config);

template <typename T>
T score(std::span<const TokenId> query_tokens,
        const std::vector<std::vector<TokenId>>& doc_sentences,
        const ModelParams<T>& params, const ModelConfig& config);

template <typename T>
std::pair<T, std::vector<AttentionTrace<T>>>
score_with_trace(const SequenceLayout& layout, const ModelParams<T>& params,
                 const ModelConfig& config);

struct PointwiseExample {
    SequenceLayout layout;
    int label = 0; // binary relevance
};

struct PairwiseExample {
    SequenceLayout positive;
    SequenceLayout negative;
};

/// Mean loss over the batch; when grads is non-null the parameter gradients
/// are accumulated into it. Dropout fires only when a generator is passed.
template <typename T>
double compute_loss_and_grads(const ModelParams<T>& params, const ModelConfig& config,
                              std::span<const PointwiseExample> batch,
                              ModelParams<T>* grads, std::mt19937_64* dropout_rng,
                              double dropout_rate);

template <typename T>
double compute_loss_and_grads(const ModelParams<T>& params, const ModelConfig& config,
                              std::span<const PairwiseExample> batch,
                              ModelParams<T>* grads, std::mt19937_64* dropout_rng,
                              double dropout_rate);

template <typename T>
struct AdamState {
    std::size_t step = 0;
    ModelParams<T> m, v;
    static AdamState init(const ModelConfig& config) {
        return {0, ModelParams<T>::zeros_like(config), ModelParams<T>::zeros_like(config)};
    }
};

/// One optimizer update from accumulated gradients (bias-corrected Adam).
template <typename T>
void adam_update(ModelParams<T>& params, const ModelParams<T>& grads, AdamState<T>& state,
                 const TrainConfig& config);

/// Forward + backward + Adam on one batch. Returns the batch loss.
/// Throws NumericalError when the loss is not finite.
template <typename T>
double train_step(ModelParams<T>& params, AdamState<T>& state, const ModelConfig& config,
                  const TrainConfig& train, std::span<const PointwiseExample> batch,
                  std::mt19937_64& rng);

template <typename T>
double train_step(ModelParams<T>& params, AdamState<T>& state, const ModelConfig& config,
                  const TrainConfig& train, std::span<const PairwiseExample> batch,
                  std::mt19937_64& rng);

/// Versioned binary container: magic "QDST", u32 format version, u64 JSON
/// length, the config as JSON, then raw little-endian f32 tensors in
/// for_each_tensor order. Double params are narrowed to f32 on save.
template <typename T>
void save_params(const std::filesystem::path& path, const ModelParams<T>& params,
                 const ModelConfig& config);

template <typename T>
std::pair<ModelParams<T>, ModelConfig> load_params(const std::filesystem::path& path);

/// Like load_params but insists the stored config matches `expected`;
/// the CorruptModel message carries both descriptions.
template <typename T>
ModelParams<T> load_params_expect(const std::filesystem::path& path,
                                  const ModelConfig& expected);

} // namespace qdst
