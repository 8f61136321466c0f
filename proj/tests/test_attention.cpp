// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <memory>
#include <random>
#include <vector>

#include "doctest.h"

#include "qdst/attention.hpp"
#include "qdst/errors.hpp"
#include "qdst/pattern.hpp"
#include "qdst/runtime.hpp"
#include "test_util.hpp"

using namespace qdst;
using qdst_test::naive_attention;
using qdst_test::pattern_oracle;
using qdst_test::random_layout;
using qdst_test::random_matrix;
using qdst_test::random_weights;

namespace {

template <typename T>
std::pair<Mat<T>, std::shared_ptr<const RowSupport>>
forward_under(const SequenceLayout& l, const PatternConfig& c, const Mat<T>& h,
              const AttentionWeights<T>& w, const HeadConfig& heads,
              AttentionTrace<T>* trace = nullptr, AttentionCache<T>* cache = nullptr) {
    auto support = std::make_shared<const RowSupport>(
        RowSupport::build(build_pattern(l, c)));
    Mat<T> y = sparse_attention_forward(h, w, heads, support, trace, cache);
    return {std::move(y), std::move(support)};
}

} // namespace

TEST_CASE("masked softmax matches the closed form on a fixture") {
    const std::vector<double> scores = {1.0, 2.0, 3.0};
    const std::vector<std::size_t> allowed = {0, 2};
    const std::vector<double> p = masked_softmax_row<double>(scores, allowed);
    // exp(1)/(exp(1)+exp(3)) = 1/(1+e^2)
    const double lo = 1.0 / (1.0 + std::exp(2.0));
    CHECK(p[0] == doctest::Approx(lo).epsilon(1e-12));
    CHECK(p[1] == 0.0);
    CHECK(p[2] == doctest::Approx(1.0 - lo).epsilon(1e-12));
    CHECK(p[0] + p[2] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(masked_softmax_row<double>(scores, {}), InternalInvariantViolation);
}

TEST_CASE("masked softmax survives huge score magnitudes") {
    const std::vector<double> scores = {5000.0, 4999.0, -5000.0};
    const std::vector<std::size_t> allowed = {0, 1, 2};
    const std::vector<double> p = masked_softmax_row<double>(scores, allowed);
    for (const double x : p) {
        CHECK(std::isfinite(x));
        CHECK(x >= 0.0);
    }
    CHECK(p[0] + p[1] + p[2] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p[0] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-12));
}

TEST_CASE("sparse kernel agrees with dense reference and naive loops") {
    std::mt19937_64 rng(31);
    const HeadConfig heads{2, 4};
    const std::size_t dim = heads.dim();
    for (const std::size_t n : {9ul, 21ul, 40ul}) {
        const SequenceLayout l = random_layout(rng, n);
        const Mat<double> h = random_matrix<double>(rng, n, dim);
        const AttentionWeights<double> w = random_weights<double>(rng, dim);
        for (const Preset preset :
             {Preset::FULL, Preset::LOCAL_ONLY, Preset::QDS, Preset::QDS_S}) {
            const PatternConfig c = make_pattern_config(preset, 4);
            const auto [y, support] = forward_under(l, c, h, w, heads);
            const std::vector<std::uint8_t> mask = pattern_oracle(l, c);

            std::vector<std::uint8_t> valid_mask = mask; // oracle wants no empty rows
            Mat<double> ref = Mat<double>::Zero(n, dim);
            if (l.valid_len == n) {
                ref = dense_reference_attention(h, w, heads, mask);
            } else {
                // Restrict the oracle to the non-PAD prefix; PAD rows are zero.
                const std::size_t v = l.valid_len;
                Mat<double> hv = h.topRows(v);
                std::vector<std::uint8_t> mv(v * v);
                for (std::size_t i = 0; i < v; ++i) {
                    for (std::size_t j = 0; j < v; ++j) mv[i * v + j] = mask[i * n + j];
                }
                ref.topRows(v) = dense_reference_attention(hv, w, heads, mv);
            }
            const Mat<double> naive = naive_attention(h, w, heads, mask);
            CHECK((y - ref).cwiseAbs().maxCoeff() <= 1e-12);
            CHECK((y - naive).cwiseAbs().maxCoeff() <= 1e-12);
        }
    }
}

TEST_CASE("pad rows come out exactly zero and do not disturb the prefix") {
    std::mt19937_64 rng(8);
    const HeadConfig heads{2, 3};
    const std::size_t dim = heads.dim();
    const SequenceLayout base = random_layout(rng, 20, /*allow_pad=*/false);
    const SequenceLayout padded = pad_layout(base, 29);
    Mat<double> h = random_matrix<double>(rng, 29, dim);
    const AttentionWeights<double> w = random_weights<double>(rng, dim);
    const PatternConfig c = make_pattern_config(Preset::QDS, 4);

    const auto [y_base, s1] = forward_under(base, c, Mat<double>(h.topRows(20)), w, heads);
    const auto [y_pad, s2] = forward_under(padded, c, h, w, heads);
    CHECK((y_pad.topRows(20) - y_base).cwiseAbs().maxCoeff() <= 1e-14);
    CHECK(y_pad.bottomRows(9).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("trace rows are normalized distributions over the support") {
    std::mt19937_64 rng(12);
    const HeadConfig heads{3, 4};
    const SequenceLayout l = random_layout(rng, 24);
    const Mat<float> h = random_matrix<float>(rng, 24, heads.dim());
    const AttentionWeights<float> w = random_weights<float>(rng, heads.dim());
    AttentionTrace<float> trace;
    const auto [y, support] =
        forward_under(l, make_pattern_config(Preset::QDS, 4), h, w, heads, &trace);
    REQUIRE(trace.num_heads == 3);
    REQUIRE(trace.support.get() == support.get());
    for (std::size_t a = 0; a < 3; ++a) {
        for (std::size_t i = 0; i < l.valid_len; ++i) {
            const auto row = trace.row(a, i);
            double sum = 0.0;
            for (const float p : row) {
                CHECK(p >= 0.0f);
                sum += p;
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-4));
        }
        // prob() answers zero off the support.
        const std::size_t far = l.valid_len - 1;
        if (!trace.support->row(8).empty() && far > 12) {
            CHECK(trace.prob(a, 8, 8) > 0.0f);
        }
    }
}

TEST_CASE("analytic gradients match finite differences") {
    std::mt19937_64 rng(99);
    const HeadConfig heads{2, 3};
    const std::size_t dim = heads.dim();
    const std::size_t n = 14;
    const SequenceLayout l = random_layout(rng, n);
    Mat<double> h = random_matrix<double>(rng, n, dim);
    AttentionWeights<double> w = random_weights<double>(rng, dim);
    const Mat<double> direction = random_matrix<double>(rng, n, dim);
    const PatternConfig c = make_pattern_config(Preset::QDS, 4);
    const auto support = std::make_shared<const RowSupport>(
        RowSupport::build(build_pattern(l, c)));

    auto loss = [&]() {
        const Mat<double> y = sparse_attention_forward(h, w, heads, support);
        return (y.array() * direction.array()).sum();
    };
    AttentionCache<double> cache;
    AttentionTrace<double>* no_trace = nullptr;
    sparse_attention_forward(h, w, heads, support, no_trace, &cache);
    const AttentionGrads<double> g = sparse_attention_backward(direction, w, cache);

    const double eps = 1e-6;
    auto check_entry = [&](double& slot, double analytic) {
        const double keep = slot;
        slot = keep + eps;
        const double up = loss();
        slot = keep - eps;
        const double down = loss();
        slot = keep;
        const double fd = (up - down) / (2 * eps);
        const double denom = std::max({1.0, std::abs(fd), std::abs(analytic)});
        CHECK(std::abs(fd - analytic) / denom <= 1e-7);
    };
    std::uniform_int_distribution<Eigen::Index> pick_row(0, static_cast<Eigen::Index>(n - 1));
    std::uniform_int_distribution<Eigen::Index> pick_col(0, static_cast<Eigen::Index>(dim - 1));
    std::uniform_int_distribution<Eigen::Index> pick_dim(0, static_cast<Eigen::Index>(dim - 1));
    for (int rep = 0; rep < 10; ++rep) {
        const Eigen::Index i = pick_row(rng), j = pick_col(rng);
        check_entry(h(i, j), g.input(i, j));
        const Eigen::Index a = pick_dim(rng), b = pick_dim(rng);
        check_entry(w.wq(a, b), g.weights.wq(a, b));
        check_entry(w.wk(a, b), g.weights.wk(a, b));
        check_entry(w.wv(a, b), g.weights.wv(a, b));
        check_entry(w.wf(a, b), g.weights.wf(a, b));
    }
}

TEST_CASE("dense reference rejects unusable masks") {
    const HeadConfig heads{1, 4};
    const Mat<double> h = Mat<double>::Ones(3, 4);
    const AttentionWeights<double> w = AttentionWeights<double>::identity(4);
    std::vector<std::uint8_t> mask(9, 1);
    mask[3] = mask[4] = mask[5] = 0; // row 1 all zero
    CHECK_THROWS_AS(dense_reference_attention(h, w, heads, mask), InvalidInput);
    const std::vector<std::uint8_t> ok(9, 1);
    CHECK_THROWS_AS(dense_reference_attention(h, w, heads, ok, MaskPlacement::PreSoftmax, 2),
                    InvalidInput);
}

TEST_CASE("post-softmax literal masking loses probability mass") {
    std::mt19937_64 rng(4);
    const HeadConfig heads{1, 4};
    const std::size_t n = 8;
    const SequenceLayout l = random_layout(rng, n, /*allow_pad=*/false);
    const Mat<double> h = random_matrix<double>(rng, n, 4);
    const AttentionWeights<double> w = random_weights<double>(rng, 4);
    const std::vector<std::uint8_t> mask =
        pattern_oracle(l, make_pattern_config(Preset::LOCAL_ONLY, 2));
    const Mat<double> pre = dense_reference_attention(h, w, heads, mask);
    const Mat<double> post =
        dense_reference_attention(h, w, heads, mask, MaskPlacement::PostSoftmaxLiteral);
    // The diagnostic mode is a different function; on a truly sparse row the
    // two disagree because the literal variant does not renormalize.
    CHECK((pre - post).cwiseAbs().maxCoeff() > 1e-8);
}

TEST_CASE("kernel never materializes dense score storage on sparse patterns") {
    std::mt19937_64 rng(21);
    const HeadConfig heads{2, 8};
    const std::size_t n = 256;
    const SequenceLayout l = random_layout(rng, n, /*allow_pad=*/false);
    const Mat<float> h = random_matrix<float>(rng, n, heads.dim());
    const AttentionWeights<float> w = random_weights<float>(rng, heads.dim());
    const PatternConfig c = make_pattern_config(Preset::QDS, 16);
    const auto support = std::make_shared<const RowSupport>(
        RowSupport::build(build_pattern(l, c)));
    reset_score_alloc_peak();
    sparse_attention_forward(h, w, heads, support);
    const std::uint64_t peak = score_alloc_peak();
    CHECK(peak == heads.num_heads * support->nnz());
    CHECK(peak < static_cast<std::uint64_t>(n) * n); // well under one dense matrix
}

TEST_CASE("head-parallel execution is deterministic across thread counts") {
    std::mt19937_64 rng(55);
    const HeadConfig heads{4, 4};
    const std::size_t n = 48;
    const SequenceLayout l = random_layout(rng, n);
    const Mat<float> h = random_matrix<float>(rng, n, heads.dim());
    const AttentionWeights<float> w = random_weights<float>(rng, heads.dim());
    const PatternConfig c = make_pattern_config(Preset::QDS, 8);
    const std::size_t before = num_threads();
    set_num_threads(1);
    const auto [y1, s1] = forward_under(l, c, h, w, heads);
    set_num_threads(4);
    const auto [y4, s2] = forward_under(l, c, h, w, heads);
    set_num_threads(before);
    CHECK((y1 - y4).cwiseAbs().maxCoeff() == 0.0f);
}
