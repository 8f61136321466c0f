// SPDX-License-Identifier: Apache-2.0
#include "qdst/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "qdst/errors.hpp"

namespace qdst {

namespace {

struct Accum {
    double sum = 0.0;
    std::size_t count = 0;
};

using LayerRoleAccum = std::vector<std::map<TokenRole, Accum>>;

LayerRoleProfile finalize(const LayerRoleAccum& acc) {
    LayerRoleProfile profile(acc.size());
    for (std::size_t l = 0; l < acc.size(); ++l) {
        for (const auto& [role, a] : acc[l]) {
            if (a.count > 0) {
                profile[l][role] = RoleStat{a.sum / static_cast<double>(a.count), a.count};
            }
        }
    }
    return profile;
}

template <typename T>
std::size_t common_depth(std::span<const TracedEncoding<T>> inputs) {
    if (inputs.empty()) throw InvalidInput("analysis: no traced inputs");
    const std::size_t depth = inputs[0].traces.size();
    for (const auto& input : inputs) {
        if (input.traces.size() != depth) {
            throw InvalidInput("analysis: inputs have different trace depths");
        }
        if (depth == 0) throw InvalidInput("analysis: traces are empty");
        for (const auto& trace : input.traces) {
            if (!trace.support || trace.support->n != input.layout.n) {
                throw InvalidInput("analysis: trace does not match its layout");
            }
        }
    }
    return depth;
}

} // namespace

template <typename T>
LayerRoleProfile role_max_attention(std::span<const TracedEncoding<T>> inputs) {
    const std::size_t depth = common_depth(inputs);
    constexpr TokenRole kTargets[] = {TokenRole::QUERY, TokenRole::SOS, TokenRole::CLS};
    LayerRoleAccum acc(depth);
    for (const auto& input : inputs) {
        const auto& roles = input.layout.roles;
        for (std::size_t l = 0; l < depth; ++l) {
            const AttentionTrace<T>& trace = input.traces[l];
            const RowSupport& support = *trace.support;
            for (std::size_t a = 0; a < trace.num_heads; ++a) {
                for (std::size_t i = 0; i < support.valid_len; ++i) {
                    const auto cols = support.row(i);
                    const auto probs = trace.row(a, i);
                    double best[3] = {-1.0, -1.0, -1.0};
                    for (std::size_t t = 0; t < cols.size(); ++t) {
                        const TokenRole r = roles[cols[t]];
                        for (std::size_t s = 0; s < 3; ++s) {
                            if (r == kTargets[s]) {
                                best[s] = std::max(best[s], static_cast<double>(probs[t]));
                            }
                        }
                    }
                    for (std::size_t s = 0; s < 3; ++s) {
                        if (best[s] >= 0.0) { // at least one reachable target
                            auto& slot = acc[l][kTargets[s]];
                            slot.sum += best[s];
                            slot.count += 1;
                        }
                    }
                }
            }
        }
    }
    return finalize(acc);
}

template <typename T>
double row_entropy(std::span<const T> probs) {
    double h = 0.0;
    for (const T p : probs) {
        const double pd = static_cast<double>(p);
        if (pd > 0.0) h -= pd * std::log(pd);
    }
    return h;
}

template <typename T>
LayerRoleProfile role_entropy(std::span<const TracedEncoding<T>> inputs) {
    const std::size_t depth = common_depth(inputs);
    LayerRoleAccum acc(depth);
    for (const auto& input : inputs) {
        const auto& roles = input.layout.roles;
        for (std::size_t l = 0; l < depth; ++l) {
            const AttentionTrace<T>& trace = input.traces[l];
            const RowSupport& support = *trace.support;
            for (std::size_t a = 0; a < trace.num_heads; ++a) {
                for (std::size_t i = 0; i < support.valid_len; ++i) {
                    auto& slot = acc[l][roles[i]];
                    slot.sum += row_entropy(trace.row(a, i));
                    slot.count += 1;
                }
            }
        }
    }
    return finalize(acc);
}

template <typename T>
std::vector<SentenceAttention>
top_attended_sentences(std::span<const AttentionTrace<T>> traces, const SequenceLayout& layout,
                       std::size_t source_pos, std::size_t layer, bool per_head,
                       std::size_t top_k) {
    if (layer >= traces.size()) {
        throw InvalidInput("top_attended_sentences: layer " + std::to_string(layer) +
                           " out of range (model has " + std::to_string(traces.size()) +
                           " traced layers)");
    }
    if (source_pos != 0 && !layout.in_query_span(source_pos)) {
        throw InvalidInput("top_attended_sentences: source position " +
                           std::to_string(source_pos) +
                           " is neither [CLS] nor inside the query span");
    }
    const std::size_t num_sentences = layout.num_sentences();
    if (num_sentences == 0) {
        throw EmptyResult("top_attended_sentences: layout has no sentences");
    }
    const AttentionTrace<T>& trace = traces[layer];
    if (!trace.support || trace.support->n != layout.n) {
        throw InvalidInput("top_attended_sentences: trace does not match the layout");
    }

    // weight[h][s] = attention of the source row onto sentence s's [SOS].
    std::vector<std::vector<double>> weight(trace.num_heads,
                                            std::vector<double>(num_sentences, 0.0));
    for (std::size_t a = 0; a < trace.num_heads; ++a) {
        for (std::size_t s = 0; s < num_sentences; ++s) {
            weight[a][s] =
                static_cast<double>(trace.prob(a, source_pos, layout.sentence_starts[s]));
        }
    }

    auto rank = [&](std::size_t head, const std::vector<double>& w,
                    const std::vector<std::size_t>* head_of) {
        std::vector<std::size_t> order(num_sentences);
        for (std::size_t s = 0; s < num_sentences; ++s) order[s] = s;
        std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
            if (w[x] != w[y]) return w[x] > w[y];
            return x < y;
        });
        std::vector<SentenceAttention> out;
        for (std::size_t r = 0; r < order.size() && r < top_k; ++r) {
            const std::size_t s = order[r];
            out.push_back({head_of ? (*head_of)[s] : head, s, w[s]});
        }
        return out;
    };

    std::vector<SentenceAttention> result;
    if (per_head) {
        for (std::size_t a = 0; a < trace.num_heads; ++a) {
            const auto part = rank(a, weight[a], nullptr);
            result.insert(result.end(), part.begin(), part.end());
        }
    } else {
        std::vector<double> best(num_sentences, -std::numeric_limits<double>::infinity());
        std::vector<std::size_t> best_head(num_sentences, 0);
        for (std::size_t a = 0; a < trace.num_heads; ++a) {
            for (std::size_t s = 0; s < num_sentences; ++s) {
                if (weight[a][s] > best[s]) {
                    best[s] = weight[a][s];
                    best_head[s] = a;
                }
            }
        }
        result = rank(0, best, &best_head);
    }
    return result;
}

template <typename T>
std::vector<QueryTokenPick>
top_query_token_per_sentence(std::span<const AttentionTrace<T>> traces,
                             const SequenceLayout& layout, std::size_t layer) {
    if (layer >= traces.size()) {
        throw InvalidInput("top_query_token_per_sentence: layer out of range");
    }
    const AttentionTrace<T>& trace = traces[layer];
    if (!trace.support || trace.support->n != layout.n) {
        throw InvalidInput("top_query_token_per_sentence: trace does not match the layout");
    }
    std::vector<QueryTokenPick> picks;
    for (std::size_t s = 0; s < layout.num_sentences(); ++s) {
        const std::size_t row = layout.sentence_starts[s];
        QueryTokenPick pick{s, layout.query_begin, 0.0};
        for (std::size_t q = layout.query_begin; q < layout.query_end; ++q) {
            double w = 0.0;
            for (std::size_t a = 0; a < trace.num_heads; ++a) {
                w = std::max(w, static_cast<double>(trace.prob(a, row, q)));
            }
            if (w > pick.weight) { // strict: ties keep the lowest position
                pick.weight = w;
                pick.query_position = q;
            }
        }
        picks.push_back(pick);
    }
    return picks;
}

void write_role_profile_csv(const std::filesystem::path& path,
                            const LayerRoleProfile& profile) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open '" + path.string() + "' for writing");
    out << "layer,role,value\n";
    out.precision(17);
    for (std::size_t l = 0; l < profile.size(); ++l) {
        for (const auto& [role, stat] : profile[l]) {
            out << (l + 1) << ',' << token_role_name(role) << ',' << stat.mean << '\n';
        }
    }
    out.flush();
    if (!out) throw Error("write failed for '" + path.string() + "'");
}

namespace {

std::string csv_quote(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += '"';
    return out;
}

} // namespace

void write_top_sentences_csv(const std::filesystem::path& path,
                             std::span<const TopSentenceRow> rows) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open '" + path.string() + "' for writing");
    out << "qid,docid,head,sentence_idx,weight,sentence_text\n";
    out.precision(17);
    for (const TopSentenceRow& row : rows) {
        out << csv_quote(row.qid) << ',' << csv_quote(row.docid) << ',' << row.head << ','
            << row.sentence_idx << ',' << row.weight << ',' << csv_quote(row.sentence_text)
            << '\n';
    }
    out.flush();
    if (!out) throw Error("write failed for '" + path.string() + "'");
}

#define QDST_INSTANTIATE_ANALYSIS(T)                                                         \
    template LayerRoleProfile role_max_attention<T>(std::span<const TracedEncoding<T>>);     \
    template LayerRoleProfile role_entropy<T>(std::span<const TracedEncoding<T>>);           \
    template double row_entropy<T>(std::span<const T>);                                      \
    template std::vector<SentenceAttention> top_attended_sentences<T>(                       \
        std::span<const AttentionTrace<T>>, const SequenceLayout&, std::size_t, std::size_t, \
        bool, std::size_t);                                                                  \
    template std::vector<QueryTokenPick> top_query_token_per_sentence<T>(                    \
        std::span<const AttentionTrace<T>>, const SequenceLayout&, std::size_t);

QDST_INSTANTIATE_ANALYSIS(float)
QDST_INSTANTIATE_ANALYSIS(double)

#undef QDST_INSTANTIATE_ANALYSIS

} // namespace qdst
