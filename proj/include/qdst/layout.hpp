// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace qdst {

using TokenId = std::int32_t;

/// Reserved vocabulary ids. Every vocabulary places these five tokens first,
/// so layouts and model embeddings agree on them without further plumbing.
namespace special_token {
inline constexpr TokenId PAD = 0;
inline constexpr TokenId UNK = 1;
inline constexpr TokenId CLS = 2;
inline constexpr TokenId SEP = 3;
inline constexpr TokenId SOS = 4;
inline constexpr TokenId COUNT = 5;
} // namespace special_token

enum class TokenRole : std::uint8_t { CLS, QUERY, SEP, SOS, DOC, PAD };

const char* token_role_name(TokenRole role);

/// The tokenized [CLS] q [SEP] (doc-with-[SOS]) sequence with a role per
/// position. Single source of truth for attention pattern construction.
///
/// Invariants: exactly one CLS at position 0; exactly one SEP immediately
/// after the last query token; every SOS position appears in
/// sentence_starts; PAD, if present, is a contiguous suffix and
/// valid_len marks where it begins.
struct SequenceLayout {
    std::vector<TokenRole> roles;
    std::vector<TokenId> token_ids;
    std::size_t query_begin = 0; // inclusive; query span is [query_begin, query_end)
    std::size_t query_end = 0;
    std::vector<std::size_t> sentence_starts; // sorted SOS positions
    std::size_t n = 0;                        // total length including PAD
    std::size_t valid_len = 0;                // non-PAD prefix length

    std::size_t query_len() const { return query_end - query_begin; }
    std::size_t num_sentences() const { return sentence_starts.size(); }
    bool in_query_span(std::size_t pos) const { return pos >= query_begin && pos < query_end; }
};

/// Assemble [CLS] + query + [SEP] + concat([SOS] + sentence, ...) and
/// truncate the tail to max_len. Truncation never strips the prefix; a
/// sentence reduced to a bare [SOS] loses that [SOS] as well.
///
/// Throws InvalidInput for an empty query, an empty sentence, or
/// max_len < |q| + 2.
SequenceLayout build_layout(std::span<const TokenId> query_tokens,
                            std::span<const std::vector<TokenId>> doc_sentences,
                            std::size_t max_len);

/// Extend a layout with PAD positions up to target_len. PAD takes part in
/// no attention edge; valid_len is unchanged.
SequenceLayout pad_layout(SequenceLayout layout, std::size_t target_len,
                          TokenId pad_id = special_token::PAD);

/// Check the SequenceLayout invariants; throws InternalInvariantViolation.
void validate_layout(const SequenceLayout& layout);

} // namespace qdst
