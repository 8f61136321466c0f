// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "qdst/layout.hpp"
#include "qdst/pattern.hpp"

namespace qdst {

struct BenchSpec {
    std::vector<Preset> presets = {Preset::FULL, Preset::QDS};
    std::vector<std::size_t> lengths = {512, 1024, 2048};
    std::vector<std::size_t> windows = {128};
    std::size_t dim = 256;
    std::size_t heads = 4;
    std::size_t layers = 4;
    std::size_t repetitions = 3;
    std::size_t warmup = 1;
    std::uint64_t seed = 0;
    std::size_t query_len = 10;    // synthetic layout shape
    std::size_t sentence_len = 25; // tokens per synthetic sentence
    std::size_t vocab_size = 512;
};

void validate_spec(const BenchSpec& spec);

struct BenchRecord {
    Preset preset = Preset::FULL;
    std::size_t length = 0;
    std::size_t window = 0; // 0 for FULL (no band)
    double sparsity = 0.0;  // nonzero fraction from the pattern module
    double infer_mean_ms = 0.0;
    double infer_std_ms = 0.0;
    double train_mean_ms = 0.0; // forward + backward, optimizer excluded
    double train_std_ms = 0.0;
    std::uint64_t flops = 0; // estimated multiply-adds, one forward, all layers
    bool failed = false;
    std::string error;
};

/// Deterministic benchmark layout: a query of query_len tokens followed by
/// sentence_len-token sentences, truncated to exactly n positions.
SequenceLayout synthetic_layout(std::size_t n, std::size_t query_len,
                                std::size_t sentence_len, std::size_t vocab_size,
                                std::mt19937_64& rng);

/// Times one forward ("infer") and one forward+backward ("train") per
/// repetition for every (preset, window, length) cell, sequentially, on a
/// monotonic clock. Out-of-memory marks the cell failed and the run
/// continues. on_cell, when set, observes each finished record.
std::vector<BenchRecord> run_bench(const BenchSpec& spec,
                                   const std::function<void(const BenchRecord&)>& on_cell = {});

/// Least-squares slope of log(time) versus log(n). Requires at least three
/// points whose lengths span a factor of four or more.
double scaling_exponent(std::span<const double> lengths, std::span<const double> times_ms);

/// The exponent for one preset's records (failed cells skipped).
double scaling_exponent(std::span<const BenchRecord> records, Preset preset, bool train_time);

void write_bench_csv(const std::filesystem::path& path, std::span<const BenchRecord> records);

/// JSON sidecar: machine triple, thread count, precision, commit id, spec.
void write_bench_metadata(const std::filesystem::path& path, const BenchSpec& spec);

} // namespace qdst
