// SPDX-License-Identifier: Apache-2.0
#include "qdst/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "qdst/errors.hpp"

namespace qdst {

static_assert(std::endian::native == std::endian::little,
              "model files are little-endian; big-endian hosts are unsupported");

void validate_config(const ModelConfig& config) {
    if (config.dim == 0 || config.num_heads == 0 || config.dim % config.num_heads != 0) {
        throw InvalidInput("model config: dim must be a positive multiple of num_heads");
    }
    if (config.max_len < 3) {
        throw InvalidInput("model config: max_len must be at least 3");
    }
    if (config.vocab_size <= special_token::COUNT) {
        throw InvalidInput("model config: vocab_size must exceed the reserved token ids");
    }
    if (!(config.dropout_rate >= 0.0 && config.dropout_rate < 1.0)) {
        throw InvalidInput("model config: dropout_rate must be in [0, 1)");
    }
}

void validate_config(const TrainConfig& config) {
    if (!(config.learning_rate >= 0.0)) {
        throw InvalidInput("train config: learning_rate must be non-negative");
    }
    for (double beta : {config.adam_beta1, config.adam_beta2}) {
        if (!(beta > 0.0 && beta < 1.0)) {
            throw InvalidInput("train config: adam betas must lie in (0, 1)");
        }
    }
    if (config.batch_size == 0) {
        throw InvalidInput("train config: batch_size must be positive");
    }
}

std::string ModelConfig::describe() const {
    std::ostringstream os;
    os << "L=" << num_layers << " dim=" << dim << " heads=" << num_heads
       << " max_len=" << max_len << " vocab=" << vocab_size << " dropout=" << dropout_rate
       << " pattern=" << preset_name(pattern.preset) << "(w=" << pattern.window << ")";
    if (pattern.asymmetric_globals) os << " asymmetric";
    return os.str();
}

std::string loss_kind_name(LossKind kind) {
    return kind == LossKind::POINTWISE_BCE ? "pointwise_bce" : "pairwise_softmax";
}

LossKind parse_loss_kind(const std::string& name) {
    if (name == "pointwise_bce") return LossKind::POINTWISE_BCE;
    if (name == "pairwise_softmax") return LossKind::PAIRWISE_SOFTMAX;
    throw InvalidInput("unknown loss kind '" + name + "'");
}

void to_json(nlohmann::json& j, const PatternConfig& c) {
    j = nlohmann::json{{"preset", preset_name(c.preset)},
                       {"window", c.window},
                       {"query_global", c.query_global},
                       {"sentence_global", c.sentence_global},
                       {"cls_global", c.cls_global},
                       {"asymmetric_globals", c.asymmetric_globals}};
}

void from_json(const nlohmann::json& j, PatternConfig& c) {
    const PatternConfig defaults{};
    const auto preset = parse_preset(j.value("preset", std::string(preset_name(defaults.preset))));
    c = make_pattern_config(preset, j.value("window", defaults.window));
    c.query_global = j.value("query_global", c.query_global);
    c.sentence_global = j.value("sentence_global", c.sentence_global);
    c.cls_global = j.value("cls_global", c.cls_global);
    c.asymmetric_globals = j.value("asymmetric_globals", c.asymmetric_globals);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"num_layers", c.num_layers}, {"dim", c.dim},
                       {"num_heads", c.num_heads},   {"max_len", c.max_len},
                       {"vocab_size", c.vocab_size}, {"dropout_rate", c.dropout_rate},
                       {"pattern", c.pattern}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    const ModelConfig d{};
    c.num_layers = j.value("num_layers", d.num_layers);
    c.dim = j.value("dim", d.dim);
    c.num_heads = j.value("num_heads", d.num_heads);
    c.max_len = j.value("max_len", d.max_len);
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.dropout_rate = j.value("dropout_rate", d.dropout_rate);
    c.pattern = j.value("pattern", d.pattern);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"learning_rate", c.learning_rate}, {"adam_beta1", c.adam_beta1},
                       {"adam_beta2", c.adam_beta2},       {"adam_epsilon", c.adam_epsilon},
                       {"batch_size", c.batch_size},       {"max_steps", c.max_steps},
                       {"seed", c.seed},                   {"loss", loss_kind_name(c.loss_kind)}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    const TrainConfig d{};
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.adam_beta1 = j.value("adam_beta1", d.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", d.adam_beta2);
    c.adam_epsilon = j.value("adam_epsilon", d.adam_epsilon);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.max_steps = j.value("max_steps", d.max_steps);
    c.seed = j.value("seed", d.seed);
    c.loss_kind = parse_loss_kind(j.value("loss", loss_kind_name(d.loss_kind)));
}

template <typename T>
ModelParams<T> ModelParams<T>::zeros_like(const ModelConfig& config) {
    validate_config(config);
    const auto dim = static_cast<Eigen::Index>(config.dim);
    const auto ffn = static_cast<Eigen::Index>(config.ffn_dim());
    ModelParams<T> p;
    p.token_emb = Mat<T>::Zero(static_cast<Eigen::Index>(config.vocab_size), dim);
    p.pos_emb = Mat<T>::Zero(static_cast<Eigen::Index>(config.max_len), dim);
    p.layers.resize(config.num_layers);
    for (auto& layer : p.layers) {
        layer.attn.wq = Mat<T>::Zero(dim, dim);
        layer.attn.wk = Mat<T>::Zero(dim, dim);
        layer.attn.wv = Mat<T>::Zero(dim, dim);
        layer.attn.wf = Mat<T>::Zero(dim, dim);
        layer.ln1_gamma = Mat<T>::Zero(dim, 1);
        layer.ln1_beta = Mat<T>::Zero(dim, 1);
        layer.ffn_w1 = Mat<T>::Zero(ffn, dim);
        layer.ffn_b1 = Mat<T>::Zero(ffn, 1);
        layer.ffn_w2 = Mat<T>::Zero(dim, ffn);
        layer.ffn_b2 = Mat<T>::Zero(dim, 1);
        layer.ln2_gamma = Mat<T>::Zero(dim, 1);
        layer.ln2_beta = Mat<T>::Zero(dim, 1);
    }
    p.head_w = Mat<T>::Zero(dim, 1);
    p.head_b = Mat<T>::Zero(1, 1);
    return p;
}

template <typename T>
ModelParams<T> ModelParams<T>::init(const ModelConfig& config, std::uint64_t seed) {
    ModelParams<T> p = zeros_like(config);
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> dist(0.0, 0.02);
    auto fill = [&](Mat<T>& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            double v;
            do {
                v = dist(gen);
            } while (std::abs(v) > 0.04); // truncate at two sigma
            m.data()[i] = static_cast<T>(v);
        }
    };
    fill(p.token_emb);
    fill(p.pos_emb);
    for (auto& layer : p.layers) {
        fill(layer.attn.wq);
        fill(layer.attn.wk);
        fill(layer.attn.wv);
        fill(layer.attn.wf);
        fill(layer.ffn_w1);
        fill(layer.ffn_w2);
        layer.ln1_gamma.setOnes();
        layer.ln2_gamma.setOnes();
    }
    fill(p.head_w);
    return p;
}

namespace {

inline constexpr double kInvSqrt2 = 1.0 / std::numbers::sqrt2;
inline constexpr double kInvSqrt2Pi = std::numbers::inv_sqrtpi / std::numbers::sqrt2;

template <typename T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * static_cast<T>(kInvSqrt2)));
}

template <typename T>
T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x * static_cast<T>(kInvSqrt2)));
    const T pdf = static_cast<T>(kInvSqrt2Pi) * std::exp(T(-0.5) * x * x);
    return cdf + x * pdf;
}

template <typename T>
Mat<T> layer_norm(const Mat<T>& x, const Mat<T>& gamma, const Mat<T>& beta,
                  detail::LayerNormCache<T>* cache) {
    const Eigen::Index rows = x.rows(), cols = x.cols();
    Mat<T> xhat(rows, cols);
    Vec<T> inv_std(rows);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const T mean = x.row(i).mean();
        const T var = (x.row(i).array() - mean).square().sum() / static_cast<T>(cols);
        inv_std(i) = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEpsilon));
        xhat.row(i) = (x.row(i).array() - mean) * inv_std(i);
    }
    Mat<T> out = ((xhat.array().rowwise() * gamma.col(0).transpose().array()).rowwise() +
                  beta.col(0).transpose().array())
                     .matrix();
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv_std);
    }
    return out;
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& gamma,
                           const detail::LayerNormCache<T>& cache, Mat<T>& dgamma,
                           Mat<T>& dbeta) {
    const Eigen::Index rows = dy.rows(), cols = dy.cols();
    dbeta.col(0) += dy.colwise().sum().transpose();
    dgamma.col(0) += dy.cwiseProduct(cache.xhat).colwise().sum().transpose();
    Mat<T> dx(rows, cols);
    using RowArray = Eigen::Array<T, 1, Eigen::Dynamic>;
    const RowArray g = gamma.col(0).transpose().array();
    for (Eigen::Index i = 0; i < rows; ++i) {
        const RowArray dxhat = dy.row(i).array() * g;
        const RowArray xh = cache.xhat.row(i).array();
        const T m1 = dxhat.mean();
        const T m2 = (dxhat * xh).mean();
        dx.row(i) = (cache.inv_std(i) * (dxhat - m1 - xh * m2)).matrix();
    }
    return dx;
}

template <typename T>
void apply_dropout(Mat<T>& x, double rate, std::mt19937_64& rng,
                   std::vector<std::uint8_t>& mask) {
    mask.assign(static_cast<std::size_t>(x.size()), 1);
    std::bernoulli_distribution dropped(rate);
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    T* data = x.data();
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (dropped(rng)) {
            mask[i] = 0;
            data[i] = T(0);
        } else {
            data[i] *= keep_scale;
        }
    }
}

template <typename T>
void apply_dropout_grad(Mat<T>& dx, double rate, const std::vector<std::uint8_t>& mask) {
    if (mask.empty()) return;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    T* data = dx.data();
    for (std::size_t i = 0; i < mask.size(); ++i) {
        data[i] = mask[i] ? data[i] * keep_scale : T(0);
    }
}

template <typename T>
Mat<T> embed(const SequenceLayout& layout, const ModelParams<T>& params,
             const ModelConfig& config) {
    if (layout.n > config.max_len) {
        throw InvalidInput("encode: sequence of length " + std::to_string(layout.n) +
                           " exceeds max_len " + std::to_string(config.max_len));
    }
    Mat<T> h(static_cast<Eigen::Index>(layout.n), static_cast<Eigen::Index>(config.dim));
    for (std::size_t i = 0; i < layout.n; ++i) {
        const TokenId id = layout.token_ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= config.vocab_size) {
            throw InvalidInput("encode: token id " + std::to_string(id) +
                               " outside vocabulary of size " +
                               std::to_string(config.vocab_size));
        }
        h.row(static_cast<Eigen::Index>(i)) =
            params.token_emb.row(id) + params.pos_emb.row(static_cast<Eigen::Index>(i));
    }
    return h;
}

} // namespace

template <typename T>
EncodeResult<T> encode(const SequenceLayout& layout, const ModelParams<T>& params,
                       const ModelConfig& config, bool record_trace, const Dropout* dropout,
                       EncodeCache<T>* cache) {
    validate_config(config);
    Mat<T> h = embed(layout, params, config);

    auto support =
        std::make_shared<const RowSupport>(RowSupport::build(build_pattern(layout, config.pattern)));
    const HeadConfig heads = config.head_config();
    const bool use_dropout = dropout && dropout->rng && dropout->rate > 0.0;
    const double rate = use_dropout ? dropout->rate : 0.0;

    if (cache) {
        cache->token_ids = layout.token_ids;
        cache->n = layout.n;
        cache->dropout_rate = rate;
        cache->support = support;
        cache->layers.clear();
        cache->layers.resize(config.num_layers);
    }

    EncodeResult<T> result;
    std::vector<std::uint8_t> scratch_mask;
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        const LayerParams<T>& layer = params.layers[l];
        detail::LayerCache<T>* lc = cache ? &cache->layers[l] : nullptr;

        AttentionTrace<T> trace;
        Mat<T> a = sparse_attention_forward<T>(h, layer.attn, heads, support,
                                               record_trace ? &trace : nullptr,
                                               lc ? &lc->attn : nullptr);
        if (record_trace) result.traces.push_back(std::move(trace));
        if (use_dropout) {
            apply_dropout(a, rate, *dropout->rng, lc ? lc->drop1 : scratch_mask);
        }
        a += h; // residual
        Mat<T> h1 = layer_norm(a, layer.ln1_gamma, layer.ln1_beta, lc ? &lc->ln1 : nullptr);

        Mat<T> z1 = (h1 * layer.ffn_w1.transpose()).rowwise() +
                    layer.ffn_b1.col(0).transpose();
        Mat<T> g1 = z1.unaryExpr([](T v) { return gelu(v); });
        Mat<T> z2 = (g1 * layer.ffn_w2.transpose()).rowwise() +
                    layer.ffn_b2.col(0).transpose();
        if (use_dropout) {
            apply_dropout(z2, rate, *dropout->rng, lc ? lc->drop2 : scratch_mask);
        }
        z2 += h1; // residual
        h = layer_norm(z2, layer.ln2_gamma, layer.ln2_beta, lc ? &lc->ln2 : nullptr);

        if (lc) {
            lc->h1 = std::move(h1);
            lc->z1 = std::move(z1);
            lc->g1 = std::move(g1);
        }
    }
    if (cache) cache->hidden = h;
    result.hidden = std::move(h);
    return result;
}

template <typename T>
void encode_backward(const Mat<T>& d_hidden, const ModelParams<T>& params,
                     const ModelConfig& config, const EncodeCache<T>& cache,
                     ModelParams<T>& grads) {
    if (cache.layers.size() != config.num_layers || cache.n == 0) {
        throw InvalidState("encode_backward: cache does not match the config");
    }
    const double rate = cache.dropout_rate;
    Mat<T> d = d_hidden;
    for (std::size_t l = config.num_layers; l-- > 0;) {
        const LayerParams<T>& layer = params.layers[l];
        const detail::LayerCache<T>& lc = cache.layers[l];
        LayerParams<T>& lg = grads.layers[l];

        Mat<T> dr2 = layer_norm_backward(d, layer.ln2_gamma, lc.ln2, lg.ln2_gamma, lg.ln2_beta);
        Mat<T> dz2 = dr2;
        apply_dropout_grad(dz2, rate, lc.drop2);

        lg.ffn_w2.noalias() += dz2.transpose() * lc.g1;
        lg.ffn_b2.col(0) += dz2.colwise().sum().transpose();
        Mat<T> dg1;
        dg1.noalias() = dz2 * layer.ffn_w2;
        Mat<T> dz1 = dg1.cwiseProduct(lc.z1.unaryExpr([](T v) { return gelu_grad(v); }));
        lg.ffn_w1.noalias() += dz1.transpose() * lc.h1;
        lg.ffn_b1.col(0) += dz1.colwise().sum().transpose();
        Mat<T> dh1;
        dh1.noalias() = dz1 * layer.ffn_w1;
        dh1 += dr2; // residual

        Mat<T> dr1 = layer_norm_backward(dh1, layer.ln1_gamma, lc.ln1, lg.ln1_gamma, lg.ln1_beta);
        Mat<T> da = dr1;
        apply_dropout_grad(da, rate, lc.drop1);
        AttentionGrads<T> ag = sparse_attention_backward(da, layer.attn, lc.attn);
        lg.attn.wq += ag.weights.wq;
        lg.attn.wk += ag.weights.wk;
        lg.attn.wv += ag.weights.wv;
        lg.attn.wf += ag.weights.wf;
        d = std::move(ag.input);
        d += dr1; // residual
    }
    for (std::size_t i = 0; i < cache.n; ++i) {
        grads.token_emb.row(cache.token_ids[i]) += d.row(static_cast<Eigen::Index>(i));
        grads.pos_emb.row(static_cast<Eigen::Index>(i)) += d.row(static_cast<Eigen::Index>(i));
    }
}

template <typename T>
T score_layout(const SequenceLayout& layout, const ModelParams<T>& params,
               const ModelConfig& config) {
    const EncodeResult<T> r = encode(layout, params, config);
    return r.hidden.row(0).dot(params.head_w.col(0)) + params.head_b(0, 0);
}

template <typename T>
T score(std::span<const TokenId> query_tokens,
        const std::vector<std::vector<TokenId>>& doc_sentences, const ModelParams<T>& params,
        const ModelConfig& config) {
    return score_layout(build_layout(query_tokens, doc_sentences, config.max_len), params,
                        config);
}

template <typename T>
std::pair<T, std::vector<AttentionTrace<T>>>
score_with_trace(const SequenceLayout& layout, const ModelParams<T>& params,
                 const ModelConfig& config) {
    EncodeResult<T> r = encode(layout, params, config, /*record_trace=*/true);
    const T s = r.hidden.row(0).dot(params.head_w.col(0)) + params.head_b(0, 0);
    return {s, std::move(r.traces)};
}

namespace {

// Score one layout with caches, returning s and dL/ds hooks for the caller.
template <typename T>
T forward_scored(const SequenceLayout& layout, const ModelParams<T>& params,
                 const ModelConfig& config, std::mt19937_64* rng, double rate,
                 EncodeCache<T>* cache) {
    Dropout drop{rate, rng};
    const bool want_drop = rng != nullptr && rate > 0.0;
    EncodeResult<T> r =
        encode(layout, params, config, false, want_drop ? &drop : nullptr, cache);
    return r.hidden.row(0).dot(params.head_w.col(0)) + params.head_b(0, 0);
}

// Pushes dL/ds through the scoring head and the encoder stack.
template <typename T>
void backward_scored(double ds, const ModelParams<T>& params, const ModelConfig& config,
                     const EncodeCache<T>& cache, ModelParams<T>& grads) {
    const T dsT = static_cast<T>(ds);
    grads.head_w.col(0) += dsT * cache.hidden.row(0).transpose();
    grads.head_b(0, 0) += dsT;
    Mat<T> d = Mat<T>::Zero(cache.hidden.rows(), cache.hidden.cols());
    d.row(0) = dsT * params.head_w.col(0).transpose();
    encode_backward(d, params, config, cache, grads);
}

double softplus(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

} // namespace

template <typename T>
double compute_loss_and_grads(const ModelParams<T>& params, const ModelConfig& config,
                              std::span<const PointwiseExample> batch, ModelParams<T>* grads,
                              std::mt19937_64* dropout_rng, double dropout_rate) {
    if (batch.empty()) throw InvalidInput("loss: empty batch");
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    double total = 0.0;
    EncodeCache<T> cache;
    for (const PointwiseExample& ex : batch) {
        const double s = forward_scored(ex.layout, params, config, dropout_rng, dropout_rate,
                                        grads ? &cache : nullptr);
        const double y = ex.label ? 1.0 : 0.0;
        // Stable binary cross-entropy of sigmoid(s) against y.
        total += softplus(s) - s * y;
        if (grads) backward_scored((sigmoid(s) - y) * inv_b, params, config, cache, *grads);
    }
    return total * inv_b;
}

template <typename T>
double compute_loss_and_grads(const ModelParams<T>& params, const ModelConfig& config,
                              std::span<const PairwiseExample> batch, ModelParams<T>* grads,
                              std::mt19937_64* dropout_rng, double dropout_rate) {
    if (batch.empty()) throw InvalidInput("loss: empty batch");
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    double total = 0.0;
    EncodeCache<T> cache_pos, cache_neg;
    for (const PairwiseExample& ex : batch) {
        const double sp = forward_scored(ex.positive, params, config, dropout_rng,
                                         dropout_rate, grads ? &cache_pos : nullptr);
        const double sn = forward_scored(ex.negative, params, config, dropout_rng,
                                         dropout_rate, grads ? &cache_neg : nullptr);
        // -log softmax(s+ over {s+, s-})
        total += softplus(sn - sp);
        if (grads) {
            const double g = sigmoid(sn - sp) * inv_b;
            backward_scored(-g, params, config, cache_pos, *grads);
            backward_scored(g, params, config, cache_neg, *grads);
        }
    }
    return total * inv_b;
}

namespace {

template <typename T>
std::vector<Mat<T>*> tensor_ptrs(ModelParams<T>& p) {
    std::vector<Mat<T>*> out;
    p.for_each_tensor([&](const auto&, Mat<T>& t) { out.push_back(&t); });
    return out;
}

template <typename T>
std::vector<const Mat<T>*> tensor_ptrs(const ModelParams<T>& p) {
    std::vector<const Mat<T>*> out;
    p.for_each_tensor([&](const auto&, const Mat<T>& t) { out.push_back(&t); });
    return out;
}

} // namespace

template <typename T>
void adam_update(ModelParams<T>& params, const ModelParams<T>& grads, AdamState<T>& state,
                 const TrainConfig& config) {
    validate_config(config);
    state.step += 1;
    const T bc1 = static_cast<T>(1.0 - std::pow(config.adam_beta1, state.step));
    const T bc2 = static_cast<T>(1.0 - std::pow(config.adam_beta2, state.step));
    const T b1 = static_cast<T>(config.adam_beta1);
    const T b2 = static_cast<T>(config.adam_beta2);
    const T lr = static_cast<T>(config.learning_rate);
    const T eps = static_cast<T>(config.adam_epsilon);

    auto p = tensor_ptrs(params);
    auto g = tensor_ptrs(grads);
    auto m = tensor_ptrs(state.m);
    auto v = tensor_ptrs(state.v);
    if (g.size() != p.size() || m.size() != p.size() || v.size() != p.size()) {
        throw InvalidInput("adam_update: tensor layout mismatch");
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
        auto& mi = *m[i];
        auto& vi = *v[i];
        mi = b1 * mi + (T(1) - b1) * (*g[i]);
        vi = b2 * vi + (T(1) - b2) * g[i]->cwiseProduct(*g[i]);
        p[i]->array() -= lr * (mi.array() / bc1) / ((vi.array() / bc2).sqrt() + eps);
    }
}

namespace {

template <typename T, typename Batch>
double train_step_impl(ModelParams<T>& params, AdamState<T>& state, const ModelConfig& config,
                       const TrainConfig& train, Batch batch, std::mt19937_64& rng) {
    ModelParams<T> grads = ModelParams<T>::zeros_like(config);
    const double loss = compute_loss_and_grads<T>(params, config, batch, &grads, &rng,
                                                  config.dropout_rate);
    if (!std::isfinite(loss)) {
        throw NumericalError("train_step: non-finite loss " + std::to_string(loss) +
                             " at optimizer step " + std::to_string(state.step + 1));
    }
    adam_update(params, grads, state, train);
    return loss;
}

} // namespace

template <typename T>
double train_step(ModelParams<T>& params, AdamState<T>& state, const ModelConfig& config,
                  const TrainConfig& train, std::span<const PointwiseExample> batch,
                  std::mt19937_64& rng) {
    return train_step_impl(params, state, config, train, batch, rng);
}

template <typename T>
double train_step(ModelParams<T>& params, AdamState<T>& state, const ModelConfig& config,
                  const TrainConfig& train, std::span<const PairwiseExample> batch,
                  std::mt19937_64& rng) {
    return train_step_impl(params, state, config, train, batch, rng);
}

namespace {

void write_bytes(std::ostream& out, const void* data, std::size_t len) {
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
}

template <typename U>
void write_scalar(std::ostream& out, U value) {
    write_bytes(out, &value, sizeof(U));
}

template <typename U>
U read_scalar(std::istream& in, const char* what) {
    U value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(U));
    if (!in) throw CorruptModel(std::string("model file truncated in ") + what);
    return value;
}

} // namespace

template <typename T>
void save_params(const std::filesystem::path& path, const ModelParams<T>& params,
                 const ModelConfig& config) {
    validate_config(config);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open '" + path.string() + "' for writing");

    const std::string json = nlohmann::json(config).dump();
    write_bytes(out, "QDST", 4);
    write_scalar<std::uint32_t>(out, kModelFormatVersion);
    write_scalar<std::uint64_t>(out, json.size());
    write_bytes(out, json.data(), json.size());

    std::vector<float> buffer;
    params.for_each_tensor([&](const auto&, const Mat<T>& t) {
        if constexpr (std::is_same_v<T, float>) {
            write_bytes(out, t.data(), sizeof(float) * static_cast<std::size_t>(t.size()));
        } else {
            buffer.resize(static_cast<std::size_t>(t.size()));
            for (Eigen::Index i = 0; i < t.size(); ++i) {
                buffer[static_cast<std::size_t>(i)] = static_cast<float>(t.data()[i]);
            }
            write_bytes(out, buffer.data(), sizeof(float) * buffer.size());
        }
    });
    out.flush();
    if (!out) throw Error("write failed for '" + path.string() + "'");
}

template <typename T>
std::pair<ModelParams<T>, ModelConfig> load_params(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path.string() + "'");

    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "QDST", 4) != 0) {
        throw CorruptModel("'" + path.string() + "' is not a model file (bad magic)");
    }
    const auto version = read_scalar<std::uint32_t>(in, "header");
    if (version != kModelFormatVersion) {
        throw CorruptModel("unsupported model format version " + std::to_string(version) +
                           " (expected " + std::to_string(kModelFormatVersion) + ")");
    }
    const auto json_len = read_scalar<std::uint64_t>(in, "header");
    if (json_len > (std::uint64_t{1} << 30)) {
        throw CorruptModel("implausible config length " + std::to_string(json_len));
    }
    std::string json_text(json_len, '\0');
    in.read(json_text.data(), static_cast<std::streamsize>(json_len));
    if (!in) throw CorruptModel("model file truncated in config block");

    ModelConfig config;
    try {
        config = nlohmann::json::parse(json_text).get<ModelConfig>();
        validate_config(config);
    } catch (const CorruptModel&) {
        throw;
    } catch (const std::exception& e) {
        throw CorruptModel(std::string("invalid model config: ") + e.what());
    }

    ModelParams<T> params = ModelParams<T>::zeros_like(config);
    std::vector<float> buffer;
    params.for_each_tensor([&](const auto& name, Mat<T>& t) {
        buffer.resize(static_cast<std::size_t>(t.size()));
        in.read(reinterpret_cast<char*>(buffer.data()),
                static_cast<std::streamsize>(sizeof(float) * buffer.size()));
        if (!in) throw CorruptModel(std::string("model file truncated in tensor ") + name);
        for (Eigen::Index i = 0; i < t.size(); ++i) {
            t.data()[i] = static_cast<T>(buffer[static_cast<std::size_t>(i)]);
        }
    });
    if (in.peek() != std::char_traits<char>::eof()) {
        throw CorruptModel("model file has trailing bytes after the last tensor");
    }
    return {std::move(params), config};
}

template <typename T>
ModelParams<T> load_params_expect(const std::filesystem::path& path,
                                  const ModelConfig& expected) {
    auto [params, config] = load_params<T>(path);
    if (!(config == expected)) {
        throw CorruptModel("model config mismatch: file has [" + config.describe() +
                           "], expected [" + expected.describe() + "]");
    }
    return std::move(params);
}

#define QDST_INSTANTIATE_MODEL(T)                                                             \
    template struct ModelParams<T>;                                                          \
    template EncodeResult<T> encode<T>(const SequenceLayout&, const ModelParams<T>&,         \
                                       const ModelConfig&, bool, const Dropout*,             \
                                       EncodeCache<T>*);                                     \
    template void encode_backward<T>(const Mat<T>&, const ModelParams<T>&,                   \
                                     const ModelConfig&, const EncodeCache<T>&,              \
                                     ModelParams<T>&);                                       \
    template T score_layout<T>(const SequenceLayout&, const ModelParams<T>&,                 \
                               const ModelConfig&);                                          \
    template T score<T>(std::span<const TokenId>, const std::vector<std::vector<TokenId>>&,  \
                        const ModelParams<T>&, const ModelConfig&);                          \
    template std::pair<T, std::vector<AttentionTrace<T>>> score_with_trace<T>(               \
        const SequenceLayout&, const ModelParams<T>&, const ModelConfig&);                   \
    template double compute_loss_and_grads<T>(const ModelParams<T>&, const ModelConfig&,     \
                                              std::span<const PointwiseExample>,             \
                                              ModelParams<T>*, std::mt19937_64*, double);    \
    template double compute_loss_and_grads<T>(const ModelParams<T>&, const ModelConfig&,     \
                                              std::span<const PairwiseExample>,              \
                                              ModelParams<T>*, std::mt19937_64*, double);    \
    template void adam_update<T>(ModelParams<T>&, const ModelParams<T>&, AdamState<T>&,      \
                                 const TrainConfig&);                                        \
    template double train_step<T>(ModelParams<T>&, AdamState<T>&, const ModelConfig&,        \
                                  const TrainConfig&, std::span<const PointwiseExample>,     \
                                  std::mt19937_64&);                                         \
    template double train_step<T>(ModelParams<T>&, AdamState<T>&, const ModelConfig&,        \
                                  const TrainConfig&, std::span<const PairwiseExample>,      \
                                  std::mt19937_64&);                                         \
    template void save_params<T>(const std::filesystem::path&, const ModelParams<T>&,        \
                                 const ModelConfig&);                                        \
    template std::pair<ModelParams<T>, ModelConfig> load_params<T>(                          \
        const std::filesystem::path&);                                                       \
    template ModelParams<T> load_params_expect<T>(const std::filesystem::path&,              \
                                                  const ModelConfig&);

QDST_INSTANTIATE_MODEL(float)
QDST_INSTANTIATE_MODEL(double)

#undef QDST_INSTANTIATE_MODEL

} // namespace qdst
