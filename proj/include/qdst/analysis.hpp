// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "qdst/attention.hpp"
#include "qdst/layout.hpp"

namespace qdst {

/// A layout together with the per-layer attention traces of one encode call.
template <typename T>
struct TracedEncoding {
    SequenceLayout layout;
    std::vector<AttentionTrace<T>> traces;
};

struct RoleStat {
    double mean = 0.0;
    std::size_t samples = 0; // (head, row) pairs that contributed
};

/// Per-layer statistics keyed by token role. A role appears only where it
/// was defined for at least one sample.
using LayerRoleProfile = std::vector<std::map<TokenRole, RoleStat>>;

/// Mean over inputs, non-PAD source rows, and heads of the maximum
/// attention weight onto targets of each role in {QUERY, SOS, CLS}. Rows
/// with no reachable target of a role are excluded from that role's mean.
/// Throws InvalidInput when `inputs` is empty or trace depths disagree.
template <typename T>
LayerRoleProfile role_max_attention(std::span<const TracedEncoding<T>> inputs);

/// Mean Shannon entropy (nats, 0 ln 0 := 0) of each row's attention
/// distribution, grouped by the source token's role.
template <typename T>
LayerRoleProfile role_entropy(std::span<const TracedEncoding<T>> inputs);

/// Entropy of one traced row; exposed for direct checks.
template <typename T>
double row_entropy(std::span<const T> probs);

struct SentenceAttention {
    std::size_t head = 0;
    std::size_t sentence_index = 0;
    double weight = 0.0;
};

/// Ranks sentences by the attention mass the source row puts on their
/// [SOS] positions. per_head reports top_k per head; otherwise weights are
/// maxima over heads and one global top_k is returned. The source must be
/// position 0 ([CLS]) or inside the query span. Throws EmptyResult when
/// the layout has no sentences.
template <typename T>
std::vector<SentenceAttention>
top_attended_sentences(std::span<const AttentionTrace<T>> traces,
                       const SequenceLayout& layout, std::size_t source_pos,
                       std::size_t layer, bool per_head, std::size_t top_k);

struct QueryTokenPick {
    std::size_t sentence_index = 0;
    std::size_t query_position = 0; // absolute position in the sequence
    double weight = 0.0;
};

/// For each [SOS] row, the query-span column with the highest attention
/// weight across heads; ties break toward the lowest position.
template <typename T>
std::vector<QueryTokenPick>
top_query_token_per_sentence(std::span<const AttentionTrace<T>> traces,
                             const SequenceLayout& layout, std::size_t layer);

/// CSV emitters matching the documented analysis outputs.
void write_role_profile_csv(const std::filesystem::path& path,
                            const LayerRoleProfile& profile);

struct TopSentenceRow {
    std::string qid;
    std::string docid;
    std::size_t head = 0;
    std::size_t sentence_idx = 0;
    double weight = 0.0;
    std::string sentence_text;
};

void write_top_sentences_csv(const std::filesystem::path& path,
                             std::span<const TopSentenceRow> rows);

} // namespace qdst
