// SPDX-License-Identifier: Apache-2.0
#include "qdst/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <new>

#include <sys/utsname.h>

#include "json.hpp"

#include "qdst/errors.hpp"
#include "qdst/model.hpp"
#include "qdst/runtime.hpp"

#ifndef QDST_GIT_COMMIT
#define QDST_GIT_COMMIT "unknown"
#endif

namespace qdst {

void validate_spec(const BenchSpec& spec) {
    if (spec.repetitions < 3) {
        throw InvalidInput("bench spec: repetitions must be at least 3");
    }
    if (spec.presets.empty() || spec.lengths.empty()) {
        throw InvalidInput("bench spec: presets and lengths must be non-empty");
    }
    if (spec.windows.empty()) {
        throw InvalidInput("bench spec: windows must be non-empty");
    }
    for (std::size_t n : spec.lengths) {
        if (n < spec.query_len + 3) {
            throw InvalidInput("bench spec: length " + std::to_string(n) +
                               " cannot hold the synthetic query");
        }
    }
    if (spec.sentence_len == 0 || spec.query_len == 0) {
        throw InvalidInput("bench spec: query_len and sentence_len must be positive");
    }
    if (spec.heads == 0 || spec.dim % spec.heads != 0) {
        throw InvalidInput("bench spec: dim must divide evenly into heads");
    }
}

SequenceLayout synthetic_layout(std::size_t n, std::size_t query_len,
                                std::size_t sentence_len, std::size_t vocab_size,
                                std::mt19937_64& rng) {
    if (vocab_size <= special_token::COUNT) {
        throw InvalidInput("synthetic_layout: vocabulary too small");
    }
    std::uniform_int_distribution<TokenId> tok(special_token::COUNT,
                                               static_cast<TokenId>(vocab_size - 1));
    std::vector<TokenId> query(query_len);
    for (auto& t : query) t = tok(rng);

    // Enough sentences to overflow n; build_layout truncates to exactly n.
    const std::size_t budget = n; // prefix + sentences, truncated anyway
    const std::size_t count = budget / (sentence_len + 1) + 2;
    std::vector<std::vector<TokenId>> sentences(count);
    for (auto& s : sentences) {
        s.resize(sentence_len);
        for (auto& t : s) t = tok(rng);
    }
    return build_layout(query, sentences, n);
}

namespace {

struct CellStats {
    double mean = 0.0;
    double stddev = 0.0;
};

CellStats summarize(const std::vector<double>& samples) {
    CellStats s;
    for (double v : samples) s.mean += v;
    s.mean /= static_cast<double>(samples.size());
    double var = 0.0;
    for (double v : samples) var += (v - s.mean) * (v - s.mean);
    if (samples.size() > 1) var /= static_cast<double>(samples.size() - 1);
    s.stddev = std::sqrt(var);
    return s;
}

CostEstimate cell_flops(Preset preset, std::size_t n, std::size_t dim, std::size_t w,
                        std::size_t query_len, std::size_t num_sentences) {
    switch (preset) {
        case Preset::FULL: return flop_estimate(n, dim, 0, 0, 0, true);
        case Preset::LOCAL_ONLY: return flop_estimate(n, dim, w, 0, 0, false);
        case Preset::LONGFORMER_QA: return flop_estimate(n, dim, w, 0, 1, false);
        case Preset::QDS_Q: return flop_estimate(n, dim, w, query_len, 0, false);
        case Preset::QDS_S: return flop_estimate(n, dim, w, 0, num_sentences, false);
        case Preset::QDS: return flop_estimate(n, dim, w, query_len, num_sentences, false);
    }
    throw InvalidInput("cell_flops: unknown preset");
}

} // namespace

std::vector<BenchRecord> run_bench(const BenchSpec& spec,
                                   const std::function<void(const BenchRecord&)>& on_cell) {
    validate_spec(spec);
    const std::size_t max_len = *std::max_element(spec.lengths.begin(), spec.lengths.end());

    ModelConfig base;
    base.num_layers = spec.layers;
    base.dim = spec.dim;
    base.num_heads = spec.heads;
    base.max_len = max_len;
    base.vocab_size = spec.vocab_size;
    base.dropout_rate = 0.0; // timing without dropout noise
    const ModelParams<float> params = ModelParams<float>::init(base, spec.seed);

    std::vector<BenchRecord> records;
    using clock = std::chrono::steady_clock;
    for (const Preset preset : spec.presets) {
        // Window only parameterizes banded presets; FULL runs one cell.
        const std::vector<std::size_t> windows =
            preset == Preset::FULL ? std::vector<std::size_t>{0} : spec.windows;
        for (const std::size_t window : windows) {
            for (const std::size_t n : spec.lengths) {
                BenchRecord rec;
                rec.preset = preset;
                rec.length = n;
                rec.window = window;
                try {
                    ModelConfig config = base;
                    config.pattern = make_pattern_config(
                        preset, preset == Preset::FULL ? spec.windows.front() : window);

                    std::mt19937_64 rng(spec.seed ^ (n * 0x9e3779b97f4a7c15ULL));
                    const SequenceLayout layout = synthetic_layout(
                        n, spec.query_len, spec.sentence_len, spec.vocab_size, rng);
                    const BlockSparsePattern pattern = build_pattern(layout, config.pattern);
                    rec.sparsity = sparsity(pattern).fraction;
                    rec.flops = cell_flops(preset, n, spec.dim,
                                           preset == Preset::FULL ? 0 : window,
                                           layout.query_len(), layout.num_sentences())
                                    .total *
                                spec.layers;

                    const PointwiseExample example{layout, 1};
                    const std::span<const PointwiseExample> batch(&example, 1);
                    ModelParams<float> grads = ModelParams<float>::zeros_like(config);

                    for (std::size_t i = 0; i < spec.warmup; ++i) {
                        score_layout(layout, params, config);
                        compute_loss_and_grads(params, config, batch, &grads, nullptr, 0.0);
                    }
                    std::vector<double> infer_ms(spec.repetitions);
                    std::vector<double> train_ms(spec.repetitions);
                    for (std::size_t i = 0; i < spec.repetitions; ++i) {
                        auto t0 = clock::now();
                        score_layout(layout, params, config);
                        auto t1 = clock::now();
                        compute_loss_and_grads(params, config, batch, &grads, nullptr, 0.0);
                        auto t2 = clock::now();
                        infer_ms[i] = std::chrono::duration<double, std::milli>(t1 - t0).count();
                        train_ms[i] = std::chrono::duration<double, std::milli>(t2 - t1).count();
                    }
                    const CellStats infer = summarize(infer_ms);
                    const CellStats train = summarize(train_ms);
                    rec.infer_mean_ms = infer.mean;
                    rec.infer_std_ms = infer.stddev;
                    rec.train_mean_ms = train.mean;
                    rec.train_std_ms = train.stddev;
                } catch (const std::bad_alloc&) {
                    rec.failed = true;
                    rec.error = "out of memory";
                }
                if (on_cell) on_cell(rec);
                records.push_back(std::move(rec));
            }
        }
    }
    return records;
}

double scaling_exponent(std::span<const double> lengths, std::span<const double> times_ms) {
    if (lengths.size() != times_ms.size() || lengths.size() < 3) {
        throw InvalidInput("scaling_exponent: need at least 3 (length, time) points");
    }
    const auto [lo, hi] = std::minmax_element(lengths.begin(), lengths.end());
    if (*lo <= 0.0 || *hi / *lo < 4.0) {
        throw InvalidInput("scaling_exponent: lengths must span a factor of at least 4");
    }
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const auto count = static_cast<double>(lengths.size());
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        if (times_ms[i] <= 0.0) {
            throw InvalidInput("scaling_exponent: times must be positive");
        }
        const double x = std::log(lengths[i]);
        const double y = std::log(times_ms[i]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    return (count * sxy - sx * sy) / (count * sxx - sx * sx);
}

double scaling_exponent(std::span<const BenchRecord> records, Preset preset, bool train_time) {
    std::vector<double> lengths, times;
    for (const BenchRecord& r : records) {
        if (r.preset != preset || r.failed) continue;
        lengths.push_back(static_cast<double>(r.length));
        times.push_back(train_time ? r.train_mean_ms : r.infer_mean_ms);
    }
    return scaling_exponent(lengths, times);
}

void write_bench_csv(const std::filesystem::path& path, std::span<const BenchRecord> records) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open '" + path.string() + "' for writing");
    out.precision(10);
    out << "preset,length,window,sparsity,infer_mean_ms,infer_std_ms,train_mean_ms,"
           "train_std_ms,flops,failed,error\n";
    for (const BenchRecord& r : records) {
        out << preset_name(r.preset) << ',' << r.length << ',' << r.window << ','
            << r.sparsity << ',' << r.infer_mean_ms << ',' << r.infer_std_ms << ','
            << r.train_mean_ms << ',' << r.train_std_ms << ',' << r.flops << ','
            << (r.failed ? 1 : 0) << ',' << r.error << '\n';
    }
    out.flush();
    if (!out) throw Error("write failed for '" + path.string() + "'");
}

void write_bench_metadata(const std::filesystem::path& path, const BenchSpec& spec) {
    utsname uts{};
    std::string machine = "unknown";
    if (uname(&uts) == 0) {
        machine = std::string(uts.sysname) + " " + uts.release + " " + uts.machine;
    }
    char stamp[32] = "unknown";
    const std::time_t now = std::time(nullptr);
    if (std::tm tm{}; gmtime_r(&now, &tm) != nullptr) {
        std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", &tm);
    }

    nlohmann::json presets = nlohmann::json::array();
    for (const Preset p : spec.presets) presets.push_back(preset_name(p));
    const nlohmann::json j{
        {"machine", machine},
        {"threads", num_threads()},
        {"precision", "f32"},
        {"commit", QDST_GIT_COMMIT},
        {"timestamp", stamp},
        {"spec",
         {{"presets", presets},
          {"lengths", spec.lengths},
          {"windows", spec.windows},
          {"dim", spec.dim},
          {"heads", spec.heads},
          {"layers", spec.layers},
          {"repetitions", spec.repetitions},
          {"warmup", spec.warmup},
          {"seed", spec.seed},
          {"query_len", spec.query_len},
          {"sentence_len", spec.sentence_len}}}};

    std::ofstream out(path);
    if (!out) throw Error("cannot open '" + path.string() + "' for writing");
    out << j.dump(2) << '\n';
    out.flush();
    if (!out) throw Error("write failed for '" + path.string() + "'");
}

} // namespace qdst
