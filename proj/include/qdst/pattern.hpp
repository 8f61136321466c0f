// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "qdst/layout.hpp"

namespace qdst {

/// Named attention-pattern variants.
enum class Preset {
    FULL,          // dense attention over all non-PAD positions
    LOCAL_ONLY,    // band only
    LONGFORMER_QA, // band + two global positions: [CLS] and the first [SOS]
    QDS_Q,         // band + query + [CLS] globals
    QDS_S,         // band + sentence + [CLS] globals
    QDS            // band + query + sentence + [CLS] globals
};

const char* preset_name(Preset preset);
Preset parse_preset(const std::string& name); // throws InvalidInput

struct PatternConfig {
    std::size_t window = 128; // w, in tokens; must be even
    Preset preset = Preset::QDS;
    // Derived from the preset; kept explicit so a config dump is self-describing.
    bool query_global = true;
    bool sentence_global = true;
    bool cls_global = true;
    // Experimental switch: use the one-directional global reading (query rows
    // only, sentence columns only). Not part of any preset.
    bool asymmetric_globals = false;

    bool operator==(const PatternConfig&) const = default;
};

/// Fill the global flags implied by a preset.
PatternConfig make_pattern_config(Preset preset, std::size_t window);

/// Structured attention adjacency: a diagonal band plus global rows/columns,
/// restricted to the non-PAD prefix. contains(i,j) holds iff
///   i,j < valid_len and (full or |i-j| <= half_window
///                        or i in global_rows or j in global_cols).
struct BlockSparsePattern {
    std::size_t n = 0;
    std::size_t valid_len = 0;
    std::int64_t half_window = -1; // negative: no band
    std::vector<std::size_t> global_rows; // sorted, all < valid_len
    std::vector<std::size_t> global_cols; // sorted, all < valid_len
    bool full = false;

    bool contains(std::size_t i, std::size_t j) const;
    bool is_global_row(std::size_t i) const;
    bool is_global_col(std::size_t j) const;
    /// Column range [first, last) of the band in row i, clipped to valid_len.
    std::pair<std::size_t, std::size_t> band_range(std::size_t i) const;
};

/// Band adjacency: contains(i,j) iff |i-j| <= w/2. Throws InvalidInput for
/// odd w or n == 0.
BlockSparsePattern local_mask(std::size_t n, std::size_t w);

/// Global rows and columns on every [SOS] position.
BlockSparsePattern sentence_mask(const SequenceLayout& layout);

/// Global rows and columns on every query position.
BlockSparsePattern query_mask(const SequenceLayout& layout);

/// Global row and column on position 0.
BlockSparsePattern cls_mask(const SequenceLayout& layout);

/// Union of the component masks selected by the config preset.
BlockSparsePattern build_pattern(const SequenceLayout& layout, const PatternConfig& config);

struct SparsityStats {
    std::uint64_t nonzeros = 0;
    std::uint64_t total = 0; // n^2
    double fraction = 0.0;
};

/// Exact nonzero count of contains(i,j); fraction is measured against n^2.
SparsityStats sparsity(const BlockSparsePattern& pattern);

/// Per-row allowed-column lists (CSR), the form consumed by the attention
/// kernel. Column indices are sorted; PAD rows are empty. Each allowed (i,j)
/// appears exactly once: global rows carry the whole row, other rows merge
/// the band with the global columns.
struct RowSupport {
    std::size_t n = 0;
    std::size_t valid_len = 0;
    std::vector<std::size_t> row_ptr;   // n + 1
    std::vector<std::uint32_t> cols;    // nnz entries

    static RowSupport build(const BlockSparsePattern& pattern);

    std::size_t nnz() const { return cols.size(); }
    std::span<const std::uint32_t> row(std::size_t i) const {
        return {cols.data() + row_ptr[i], row_ptr[i + 1] - row_ptr[i]};
    }
    std::size_t row_size(std::size_t i) const { return row_ptr[i + 1] - row_ptr[i]; }
};

/// Dense 0/1 expansion, row-major n*n. Intended for small n (oracles, dumps).
std::vector<std::uint8_t> dense_mask(const BlockSparsePattern& pattern);

} // namespace qdst
