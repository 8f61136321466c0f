// SPDX-License-Identifier: Apache-2.0
#include "qdst/pattern.hpp"

#include <algorithm>
#include <string>

#include "qdst/errors.hpp"

namespace qdst {

const char* preset_name(Preset preset) {
    switch (preset) {
    case Preset::FULL: return "full";
    case Preset::LOCAL_ONLY: return "local";
    case Preset::LONGFORMER_QA: return "longformer_qa";
    case Preset::QDS_Q: return "qds_q";
    case Preset::QDS_S: return "qds_s";
    case Preset::QDS: return "qds";
    }
    return "?";
}

Preset parse_preset(const std::string& name) {
    if (name == "full") return Preset::FULL;
    if (name == "local" || name == "local_only") return Preset::LOCAL_ONLY;
    if (name == "longformer_qa") return Preset::LONGFORMER_QA;
    if (name == "qds_q") return Preset::QDS_Q;
    if (name == "qds_s") return Preset::QDS_S;
    if (name == "qds") return Preset::QDS;
    throw InvalidInput("unknown pattern preset: " + name);
}

PatternConfig make_pattern_config(Preset preset, std::size_t window) {
    PatternConfig config;
    config.preset = preset;
    config.window = window;
    switch (preset) {
    case Preset::FULL: // flags irrelevant; keep them off for a clean dump
    case Preset::LOCAL_ONLY:
    case Preset::LONGFORMER_QA:
        config.query_global = config.sentence_global = config.cls_global = false;
        break;
    case Preset::QDS_Q:
        config.query_global = true;
        config.sentence_global = false;
        config.cls_global = true;
        break;
    case Preset::QDS_S:
        config.query_global = false;
        config.sentence_global = true;
        config.cls_global = true;
        break;
    case Preset::QDS:
        config.query_global = config.sentence_global = config.cls_global = true;
        break;
    }
    return config;
}

bool BlockSparsePattern::contains(std::size_t i, std::size_t j) const {
    if (i >= valid_len || j >= valid_len) return false;
    if (full) return true;
    if (half_window >= 0) {
        const auto d = i >= j ? i - j : j - i;
        if (d <= static_cast<std::size_t>(half_window)) return true;
    }
    return is_global_row(i) || is_global_col(j);
}

bool BlockSparsePattern::is_global_row(std::size_t i) const {
    return std::binary_search(global_rows.begin(), global_rows.end(), i);
}

bool BlockSparsePattern::is_global_col(std::size_t j) const {
    return std::binary_search(global_cols.begin(), global_cols.end(), j);
}

std::pair<std::size_t, std::size_t> BlockSparsePattern::band_range(std::size_t i) const {
    if (half_window < 0 || i >= valid_len) return {0, 0};
    const auto hw = static_cast<std::size_t>(half_window);
    const std::size_t first = i > hw ? i - hw : 0;
    const std::size_t last = std::min(valid_len, i + hw + 1);
    return {first, last};
}

BlockSparsePattern local_mask(std::size_t n, std::size_t w) {
    if (n == 0) {
        throw InvalidInput("local_mask: n must be >= 1");
    }
    if (w % 2 != 0) {
        throw InvalidInput("local_mask: window must be even, got " + std::to_string(w));
    }
    BlockSparsePattern p;
    p.n = n;
    p.valid_len = n;
    p.half_window = static_cast<std::int64_t>(w / 2);
    return p;
}

namespace {

BlockSparsePattern globals_only(const SequenceLayout& layout, std::vector<std::size_t> positions) {
    BlockSparsePattern p;
    p.n = layout.n;
    p.valid_len = layout.valid_len;
    p.half_window = -1;
    std::sort(positions.begin(), positions.end());
    positions.erase(std::unique(positions.begin(), positions.end()), positions.end());
    p.global_rows = positions;
    p.global_cols = std::move(positions);
    return p;
}

std::vector<std::size_t> query_positions(const SequenceLayout& layout) {
    std::vector<std::size_t> out;
    out.reserve(layout.query_len());
    for (std::size_t i = layout.query_begin; i < layout.query_end; ++i) out.push_back(i);
    return out;
}

} // namespace

BlockSparsePattern sentence_mask(const SequenceLayout& layout) {
    return globals_only(layout, layout.sentence_starts);
}

BlockSparsePattern query_mask(const SequenceLayout& layout) {
    return globals_only(layout, query_positions(layout));
}

BlockSparsePattern cls_mask(const SequenceLayout& layout) {
    return globals_only(layout, {0});
}

BlockSparsePattern build_pattern(const SequenceLayout& layout, const PatternConfig& config) {
    if (config.window % 2 != 0) {
        throw InvalidInput("build_pattern: window must be even, got " +
                           std::to_string(config.window));
    }
    BlockSparsePattern p;
    p.n = layout.n;
    p.valid_len = layout.valid_len;

    if (config.preset == Preset::FULL) {
        p.full = true;
        return p;
    }

    p.half_window = static_cast<std::int64_t>(config.window / 2);

    std::vector<std::size_t> rows;
    std::vector<std::size_t> cols;
    if (config.preset == Preset::LONGFORMER_QA) {
        // One special token per side: [CLS] for the query, the first [SOS]
        // for the document.
        rows.push_back(0);
        if (!layout.sentence_starts.empty()) {
            rows.push_back(layout.sentence_starts.front());
        }
        cols = rows;
    } else {
        const PatternConfig flags = [&] {
            PatternConfig f = make_pattern_config(config.preset, config.window);
            f.asymmetric_globals = config.asymmetric_globals;
            return f;
        }();
        if (flags.query_global) {
            auto q = query_positions(layout);
            rows.insert(rows.end(), q.begin(), q.end());
            if (!flags.asymmetric_globals) {
                cols.insert(cols.end(), q.begin(), q.end());
            }
        }
        if (flags.sentence_global) {
            const auto& s = layout.sentence_starts;
            cols.insert(cols.end(), s.begin(), s.end());
            if (!flags.asymmetric_globals) {
                rows.insert(rows.end(), s.begin(), s.end());
            }
        }
        if (flags.cls_global) {
            rows.push_back(0);
            cols.push_back(0);
        }
    }

    auto finish = [](std::vector<std::size_t>& v) {
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
    };
    finish(rows);
    finish(cols);
    p.global_rows = std::move(rows);
    p.global_cols = std::move(cols);
    return p;
}

SparsityStats sparsity(const BlockSparsePattern& pattern) {
    const std::size_t valid = pattern.valid_len;
    const auto& gc = pattern.global_cols;

    // Count of global columns intersecting [first, last).
    auto cols_in = [&](std::size_t first, std::size_t last) -> std::size_t {
        auto lo = std::lower_bound(gc.begin(), gc.end(), first);
        auto hi = std::lower_bound(gc.begin(), gc.end(), last);
        return static_cast<std::size_t>(hi - lo);
    };

    const std::size_t gc_valid = cols_in(0, valid);
    std::uint64_t nonzeros = 0;
    for (std::size_t i = 0; i < valid; ++i) {
        if (pattern.full || pattern.is_global_row(i)) {
            nonzeros += valid;
            continue;
        }
        const auto [first, last] = pattern.band_range(i);
        const std::size_t band = last - first;
        nonzeros += band + gc_valid - cols_in(first, last);
    }

    SparsityStats stats;
    stats.nonzeros = nonzeros;
    stats.total = static_cast<std::uint64_t>(pattern.n) * pattern.n;
    stats.fraction = stats.total == 0 ? 0.0
                                      : static_cast<double>(nonzeros) / static_cast<double>(stats.total);
    return stats;
}

RowSupport RowSupport::build(const BlockSparsePattern& pattern) {
    RowSupport s;
    s.n = pattern.n;
    s.valid_len = pattern.valid_len;
    s.row_ptr.assign(pattern.n + 1, 0);

    const std::size_t valid = pattern.valid_len;
    const auto& gc = pattern.global_cols;

    const auto stats = sparsity(pattern);
    s.cols.reserve(stats.nonzeros);

    for (std::size_t i = 0; i < pattern.n; ++i) {
        s.row_ptr[i] = s.cols.size();
        if (i >= valid) continue;
        if (pattern.full || pattern.is_global_row(i)) {
            for (std::size_t j = 0; j < valid; ++j) {
                s.cols.push_back(static_cast<std::uint32_t>(j));
            }
            continue;
        }
        const auto [first, last] = pattern.band_range(i);
        // Sorted merge of the global columns with the band.
        std::size_t gi = 0;
        while (gi < gc.size() && gc[gi] < first) {
            s.cols.push_back(static_cast<std::uint32_t>(gc[gi++]));
        }
        for (std::size_t j = first; j < last; ++j) {
            s.cols.push_back(static_cast<std::uint32_t>(j));
        }
        while (gi < gc.size() && gc[gi] < last) ++gi; // inside the band, already emitted
        while (gi < gc.size() && gc[gi] < valid) {
            s.cols.push_back(static_cast<std::uint32_t>(gc[gi++]));
        }
    }
    s.row_ptr[pattern.n] = s.cols.size();
    return s;
}

std::vector<std::uint8_t> dense_mask(const BlockSparsePattern& pattern) {
    std::vector<std::uint8_t> mask(pattern.n * pattern.n, 0);
    for (std::size_t i = 0; i < pattern.n; ++i) {
        for (std::size_t j = 0; j < pattern.n; ++j) {
            mask[i * pattern.n + j] = pattern.contains(i, j) ? 1 : 0;
        }
    }
    return mask;
}

} // namespace qdst
