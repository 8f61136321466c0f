// SPDX-License-Identifier: Apache-2.0
#include "qdst/layout.hpp"

#include <algorithm>
#include <string>

#include "qdst/errors.hpp"

namespace qdst {

const char* token_role_name(TokenRole role) {
    switch (role) {
    case TokenRole::CLS: return "CLS";
    case TokenRole::QUERY: return "QUERY";
    case TokenRole::SEP: return "SEP";
    case TokenRole::SOS: return "SOS";
    case TokenRole::DOC: return "DOC";
    case TokenRole::PAD: return "PAD";
    }
    return "?";
}

SequenceLayout build_layout(std::span<const TokenId> query_tokens,
                            std::span<const std::vector<TokenId>> doc_sentences,
                            std::size_t max_len) {
    if (query_tokens.empty()) {
        throw InvalidInput("build_layout: query must be non-empty");
    }
    if (max_len < query_tokens.size() + 2) {
        throw InvalidInput("build_layout: max_len " + std::to_string(max_len) +
                           " cannot hold [CLS] + " + std::to_string(query_tokens.size()) +
                           " query tokens + [SEP]");
    }

    SequenceLayout layout;
    layout.roles.reserve(max_len);
    layout.token_ids.reserve(max_len);

    auto push = [&](TokenRole role, TokenId id) {
        layout.roles.push_back(role);
        layout.token_ids.push_back(id);
    };

    push(TokenRole::CLS, special_token::CLS);
    layout.query_begin = 1;
    for (TokenId id : query_tokens) {
        push(TokenRole::QUERY, id);
    }
    layout.query_end = layout.roles.size();
    push(TokenRole::SEP, special_token::SEP);

    for (const auto& sentence : doc_sentences) {
        if (sentence.empty()) {
            throw InvalidInput("build_layout: empty sentence");
        }
        if (layout.roles.size() >= max_len) {
            break;
        }
        layout.sentence_starts.push_back(layout.roles.size());
        push(TokenRole::SOS, special_token::SOS);
        for (TokenId id : sentence) {
            if (layout.roles.size() >= max_len) {
                break;
            }
            push(TokenRole::DOC, id);
        }
    }

    // A sentence cut down to a bare [SOS] is dropped entirely.
    if (!layout.roles.empty() && layout.roles.back() == TokenRole::SOS) {
        layout.roles.pop_back();
        layout.token_ids.pop_back();
        layout.sentence_starts.pop_back();
    }

    layout.n = layout.roles.size();
    layout.valid_len = layout.n;
    return layout;
}

SequenceLayout pad_layout(SequenceLayout layout, std::size_t target_len, TokenId pad_id) {
    if (target_len < layout.n) {
        throw InvalidInput("pad_layout: target_len " + std::to_string(target_len) +
                           " is shorter than the layout (" + std::to_string(layout.n) + ")");
    }
    layout.roles.resize(target_len, TokenRole::PAD);
    layout.token_ids.resize(target_len, pad_id);
    layout.n = target_len;
    return layout;
}

void validate_layout(const SequenceLayout& layout) {
    auto fail = [](const std::string& what) {
        throw InternalInvariantViolation("layout invariant: " + what);
    };
    if (layout.roles.size() != layout.n || layout.token_ids.size() != layout.n) {
        fail("roles/token_ids length mismatch");
    }
    if (layout.valid_len < 3 || layout.valid_len > layout.n) {
        fail("valid_len out of range");
    }
    if (layout.roles[0] != TokenRole::CLS) {
        fail("position 0 is not CLS");
    }
    if (layout.query_begin != 1 || layout.query_end <= layout.query_begin) {
        fail("bad query span");
    }
    for (std::size_t i = layout.query_begin; i < layout.query_end; ++i) {
        if (layout.roles[i] != TokenRole::QUERY) fail("query span role");
    }
    if (layout.query_end >= layout.n || layout.roles[layout.query_end] != TokenRole::SEP) {
        fail("SEP must follow the last query token");
    }
    std::vector<std::size_t> sos;
    for (std::size_t i = 0; i < layout.n; ++i) {
        if (layout.roles[i] == TokenRole::SOS) sos.push_back(i);
        if (layout.roles[i] == TokenRole::PAD && i < layout.valid_len) {
            fail("PAD inside the valid prefix");
        }
        if (layout.roles[i] != TokenRole::PAD && i >= layout.valid_len) {
            fail("non-PAD in the PAD suffix");
        }
    }
    if (sos != layout.sentence_starts) {
        fail("sentence_starts does not match SOS positions");
    }
    for (std::size_t s : sos) {
        if (s + 1 >= layout.valid_len ||
            (layout.roles[s + 1] != TokenRole::DOC && layout.roles[s + 1] != TokenRole::SOS)) {
            fail("bare [SOS] without a following DOC token");
        }
    }
}

} // namespace qdst
