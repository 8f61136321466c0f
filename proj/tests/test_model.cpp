// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <vector>

#include "doctest.h"

#include "qdst/errors.hpp"
#include "qdst/model.hpp"
#include "test_util.hpp"

using namespace qdst;
using qdst_test::random_layout;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.num_layers = 1;
    c.dim = 8;
    c.num_heads = 2;
    c.max_len = 64;
    c.vocab_size = 128;
    c.dropout_rate = 0.0;
    c.pattern = make_pattern_config(Preset::QDS, 4);
    return c;
}

struct TempFile {
    std::filesystem::path path;
    explicit TempFile(const std::string& name)
        : path(std::filesystem::temp_directory_path() / name) {}
    ~TempFile() { std::filesystem::remove(path); }
};

} // namespace

TEST_CASE("initialization is deterministic, bounded, and seed-sensitive") {
    const ModelConfig c = tiny_config();
    const auto a = ModelParams<double>::init(c, 3);
    const auto b = ModelParams<double>::init(c, 3);
    const auto other = ModelParams<double>::init(c, 4);
    bool all_equal = true;
    bool any_diff_other = false;
    double max_abs_weight = 0.0;
    a.for_each_tensor([&](const std::string& name, const Mat<double>& t) {
        const Mat<double>* tb = nullptr;
        const Mat<double>* to = nullptr;
        b.for_each_tensor([&](const std::string& n2, const Mat<double>& t2) {
            if (n2 == name) tb = &t2;
        });
        other.for_each_tensor([&](const std::string& n2, const Mat<double>& t2) {
            if (n2 == name) to = &t2;
        });
        REQUIRE(tb != nullptr);
        if ((t - *tb).cwiseAbs().maxCoeff() != 0.0) all_equal = false;
        if ((t - *to).cwiseAbs().maxCoeff() != 0.0) any_diff_other = true;
        if (name.find("gamma") == std::string::npos &&
            name.find("beta") == std::string::npos &&
            name.find("_b") == std::string::npos) {
            max_abs_weight = std::max(max_abs_weight, t.cwiseAbs().maxCoeff());
        }
    });
    CHECK(all_equal);
    CHECK(any_diff_other);
    CHECK(max_abs_weight <= 0.04); // two sigma truncation
    CHECK(max_abs_weight > 0.0);
    CHECK(a.layers[0].ln1_gamma.minCoeff() == 1.0);
    CHECK(a.layers[0].ln1_beta.cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.layers[0].ffn_b1.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("encode is deterministic in inference mode and respects max_len") {
    const ModelConfig c = tiny_config();
    const auto params = ModelParams<double>::init(c, 1);
    std::mt19937_64 rng(2);
    const SequenceLayout l = random_layout(rng, 24);
    const EncodeResult<double> r1 = encode(l, params, c);
    const EncodeResult<double> r2 = encode(l, params, c);
    CHECK((r1.hidden - r2.hidden).cwiseAbs().maxCoeff() == 0.0);
    CHECK(r1.hidden.rows() == 24);
    CHECK(r1.hidden.cols() == 8);
    CHECK(r1.traces.empty());

    SequenceLayout too_long = random_layout(rng, 65);
    CHECK_THROWS_AS(encode(too_long, params, c), InvalidInput);

    SequenceLayout bad = l;
    bad.token_ids[2] = 127 + 1; // outside the vocabulary
    CHECK_THROWS_AS(encode(bad, params, c), InvalidInput);
}

TEST_CASE("traces are recorded per layer when requested") {
    ModelConfig c = tiny_config();
    c.num_layers = 3;
    const auto params = ModelParams<float>::init(c, 1);
    std::mt19937_64 rng(7);
    const SequenceLayout l = random_layout(rng, 20);
    const EncodeResult<float> r = encode(l, params, c, /*record_trace=*/true);
    REQUIRE(r.traces.size() == 3);
    for (const auto& t : r.traces) {
        CHECK(t.num_heads == c.num_heads);
        CHECK(t.support->n == 20);
    }
}

TEST_CASE("scoring reads the cls position only") {
    const ModelConfig c = tiny_config();
    auto params = ModelParams<double>::init(c, 5);
    std::mt19937_64 rng(3);
    const SequenceLayout l = random_layout(rng, 18);
    const double s = score_layout(l, params, c);
    CHECK(std::isfinite(s));
    // Shifting head_b shifts the score one-for-one.
    params.head_b(0, 0) += 1.5;
    CHECK(score_layout(l, params, c) == doctest::Approx(s + 1.5).epsilon(1e-12));
}

TEST_CASE("end-to-end gradients match finite differences on every tensor") {
    // f64, one layer, dim 8, two heads, n = 16.
    ModelConfig c = tiny_config();
    auto params = ModelParams<double>::init(c, 11);
    // Move off the training init: at sigma = 0.02 the score-path gradients
    // (wq, wk) sit near 1e-10 and drown in central-difference roundoff.
    // An O(1) random point keeps every tensor resolvable.
    std::mt19937_64 noise_rng(101);
    std::uniform_real_distribution<double> noise(-0.3, 0.3);
    params.for_each_tensor([&](const std::string&, Mat<double>& t) {
        for (Eigen::Index i = 0; i < t.rows(); ++i)
            for (Eigen::Index j = 0; j < t.cols(); ++j) t(i, j) += noise(noise_rng);
    });
    std::mt19937_64 rng(13);
    const SequenceLayout l = random_layout(rng, 16);
    std::vector<PointwiseExample> batch;
    batch.push_back({l, 1});
    const SequenceLayout l2 = random_layout(rng, 14);
    batch.push_back({l2, 0});

    auto grads = ModelParams<double>::zeros_like(c);
    const double base = compute_loss_and_grads<double>(params, c, batch, &grads,
                                                       nullptr, 0.0);
    CHECK(std::isfinite(base));

    auto loss_at = [&]() {
        return compute_loss_and_grads<double>(params, c, batch, nullptr, nullptr, 0.0);
    };
    // Full finite-difference gradient per tensor, compared by relative
    // L2 norm. Entry-wise ratios are meaningless where the true gradient
    // is below central-difference roundoff.
    const double eps = 1e-5;
    double worst = 0.0;
    params.for_each_tensor([&](const std::string& name, Mat<double>& t) {
        const Mat<double>* g = nullptr;
        grads.for_each_tensor([&](const std::string& n2, const Mat<double>& t2) {
            if (n2 == name) g = &t2;
        });
        REQUIRE(g != nullptr);
        Mat<double> fd = Mat<double>::Zero(t.rows(), t.cols());
        for (Eigen::Index i = 0; i < t.rows(); ++i) {
            for (Eigen::Index j = 0; j < t.cols(); ++j) {
                const double keep = t(i, j);
                t(i, j) = keep + eps;
                const double up = loss_at();
                t(i, j) = keep - eps;
                const double down = loss_at();
                t(i, j) = keep;
                fd(i, j) = (up - down) / (2 * eps);
            }
        }
        const double denom = std::max({fd.norm(), g->norm(), 1e-12});
        const double rel = (fd - *g).norm() / denom;
        worst = std::max(worst, rel);
        CAPTURE(name);
        CHECK(rel <= 1e-4);
    });
    MESSAGE("worst relative error ", worst);
}

TEST_CASE("pointwise loss equals the stable bce closed form") {
    const ModelConfig c = tiny_config();
    const auto params = ModelParams<double>::init(c, 21);
    std::mt19937_64 rng(4);
    std::vector<PointwiseExample> batch;
    batch.push_back({random_layout(rng, 12), 1});
    batch.push_back({random_layout(rng, 15), 0});
    const double loss = compute_loss_and_grads<double>(params, c, batch, nullptr,
                                                       nullptr, 0.0);
    double expect = 0.0;
    for (const auto& ex : batch) {
        const double s = score_layout(ex.layout, params, c);
        const double y = ex.label;
        // -y log sigma(s) - (1-y) log(1 - sigma(s))
        expect += -y * std::log(1.0 / (1.0 + std::exp(-s))) -
                  (1.0 - y) * std::log(1.0 - 1.0 / (1.0 + std::exp(-s)));
    }
    expect /= batch.size();
    CHECK(loss == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("pairwise loss is ln 2 for tied scores") {
    const ModelConfig c = tiny_config();
    const auto params = ModelParams<double>::init(c, 8);
    std::mt19937_64 rng(6);
    const SequenceLayout l = random_layout(rng, 12);
    std::vector<PairwiseExample> batch;
    batch.push_back({l, l}); // identical positive and negative
    const double loss = compute_loss_and_grads<double>(params, c, batch, nullptr,
                                                       nullptr, 0.0);
    CHECK(loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // Pushing the positive score up lowers the loss.
    std::vector<PairwiseExample> ordered;
    ordered.push_back({random_layout(rng, 12), random_layout(rng, 13)});
    const double before = compute_loss_and_grads<double>(params, c, ordered, nullptr,
                                                         nullptr, 0.0);
    const double sp = score_layout(ordered[0].positive, params, c);
    const double sn = score_layout(ordered[0].negative, params, c);
    const double expect = std::log1p(std::exp(-(sp - sn)));
    CHECK(before == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("dropout masks are inverted and vanish at rate zero") {
    ModelConfig c = tiny_config();
    c.dropout_rate = 0.5;
    const auto params = ModelParams<double>::init(c, 2);
    std::mt19937_64 rng(5);
    const SequenceLayout l = random_layout(rng, 16);

    std::mt19937_64 d1(100), d2(100), d3(101);
    const Dropout k1{0.5, &d1}, k2{0.5, &d2}, k3{0.5, &d3};
    const EncodeResult<double> a = encode(l, params, c, false, &k1);
    const EncodeResult<double> b = encode(l, params, c, false, &k2);
    const EncodeResult<double> x = encode(l, params, c, false, &k3);
    CHECK((a.hidden - b.hidden).cwiseAbs().maxCoeff() == 0.0); // same generator state
    CHECK((a.hidden - x.hidden).cwiseAbs().maxCoeff() > 0.0);  // different draws

    const EncodeResult<double> off = encode(l, params, c);
    std::mt19937_64 d4(1);
    const Dropout zero{0.0, &d4};
    const EncodeResult<double> zero_rate = encode(l, params, c, false, &zero);
    CHECK((off.hidden - zero_rate.hidden).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("adam takes a step against the gradient with bias correction") {
    ModelConfig c = tiny_config();
    TrainConfig t;
    t.learning_rate = 1e-2;
    auto params = ModelParams<double>::zeros_like(c);
    auto grads = ModelParams<double>::zeros_like(c);
    grads.head_b(0, 0) = 0.3; // a single nonzero gradient entry
    auto state = AdamState<double>::init(c);
    adam_update(params, grads, state, t);
    CHECK(state.step == 1);
    // First Adam step size is exactly lr regardless of gradient magnitude
    // (up to epsilon), in the negative gradient direction.
    CHECK(params.head_b(0, 0) == doctest::Approx(-1e-2).epsilon(1e-4));
    // Untouched tensors stay zero.
    CHECK(params.token_emb.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("train_step lowers the pairwise loss on a fixed batch") {
    ModelConfig c = tiny_config();
    c.dropout_rate = 0.0;
    TrainConfig t;
    t.learning_rate = 5e-3;
    t.loss_kind = LossKind::PAIRWISE_SOFTMAX;
    auto params = ModelParams<double>::init(c, 31);
    auto state = AdamState<double>::init(c);
    std::mt19937_64 rng(17);
    std::vector<PairwiseExample> batch;
    batch.push_back({random_layout(rng, 14), random_layout(rng, 14)});
    batch.push_back({random_layout(rng, 12), random_layout(rng, 16)});
    std::mt19937_64 step_rng(1);
    const double first = train_step<double>(params, state, c, t, batch, step_rng);
    double last = first;
    for (int i = 0; i < 30; ++i) {
        last = train_step<double>(params, state, c, t, batch, step_rng);
    }
    CHECK(last < first);
    CHECK(last < 0.2);
}

TEST_CASE("model files round-trip, reject corruption, and narrow to f32") {
    const ModelConfig c = tiny_config();
    const auto params = ModelParams<float>::init(c, 77);
    TempFile f("qdst_model_roundtrip.bin");
    save_params(f.path, params, c);

    auto [loaded, cfg] = load_params<float>(f.path);
    CHECK(cfg == c);
    bool same = true;
    params.for_each_tensor([&](const std::string& name, const Mat<float>& t) {
        loaded.for_each_tensor([&](const std::string& n2, const Mat<float>& t2) {
            if (n2 == name && (t - t2).cwiseAbs().maxCoeff() != 0.0f) same = false;
        });
    });
    CHECK(same);

    // f64 params survive the f32 container to f32 precision.
    const auto p64 = ModelParams<double>::init(c, 78);
    TempFile f64file("qdst_model_f64.bin");
    save_params(f64file.path, p64, c);
    auto [back, cfg2] = load_params<double>(f64file.path);
    double max_err = 0.0;
    p64.for_each_tensor([&](const std::string& name, const Mat<double>& t) {
        back.for_each_tensor([&](const std::string& n2, const Mat<double>& t2) {
            if (n2 == name) max_err = std::max(max_err, (t - t2).cwiseAbs().maxCoeff());
        });
    });
    CHECK(max_err <= 1e-7); // weights are < 0.04, well inside f32 resolution

    SUBCASE("bad magic") {
        std::fstream s(f.path, std::ios::in | std::ios::out | std::ios::binary);
        s.write("XXXX", 4);
        s.close();
        CHECK_THROWS_AS(load_params<float>(f.path), CorruptModel);
    }
    SUBCASE("truncated tensor data") {
        const auto size = std::filesystem::file_size(f.path);
        std::filesystem::resize_file(f.path, size - 16);
        CHECK_THROWS_AS(load_params<float>(f.path), CorruptModel);
    }
    SUBCASE("trailing garbage") {
        std::ofstream s(f.path, std::ios::app | std::ios::binary);
        s.write("zz", 2);
        s.close();
        CHECK_THROWS_AS(load_params<float>(f.path), CorruptModel);
    }
    SUBCASE("config mismatch in load_params_expect") {
        ModelConfig other = c;
        other.num_heads = 4;
        CHECK_THROWS_AS(load_params_expect<float>(f.path, other), CorruptModel);
        CHECK_NOTHROW(load_params_expect<float>(f.path, c));
    }
}

TEST_CASE("missing model file raises a data error") {
    CHECK_THROWS_AS(load_params<float>("/nonexistent/qdst.bin"), Error);
}

TEST_CASE("pad suffix never changes the cls score") {
    const ModelConfig c = tiny_config();
    const auto params = ModelParams<double>::init(c, 41);
    std::mt19937_64 rng(19);
    const SequenceLayout base = random_layout(rng, 20, /*allow_pad=*/false);
    const SequenceLayout padded = pad_layout(base, 33);
    const double s1 = score_layout(base, params, c);
    const double s2 = score_layout(padded, params, c);
    CHECK(s1 == doctest::Approx(s2).epsilon(1e-12));
}
