// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace qdst {

/// Graded relevance judgments. Unjudged (query, doc) pairs read as grade 0.
struct Qrels {
    std::map<std::string, std::unordered_map<std::string, int>> grades;
    int max_grade = 0;
    std::size_t negative_grades_mapped = 0; // "-1" unjudged lines folded to 0

    int grade(const std::string& query_id, const std::string& doc_id) const;
    const std::unordered_map<std::string, int>* judged(const std::string& query_id) const;
    void add(const std::string& query_id, const std::string& doc_id, int grade);
};

struct RankedDoc {
    std::string doc_id;
    float score = 0.0f;
};

/// One query's ranking, descending by score with doc_id ascending on ties.
struct RunList {
    std::string query_id;
    std::vector<RankedDoc> entries;
};

/// Sorts entries into the canonical order and rejects duplicate doc_ids.
void canonicalize(RunList& run);

/// TREC qrels: whitespace-delimited "qid 0 docid grade" lines. Grade -1
/// (the unjudged convention) maps to 0 and is counted. Malformed lines
/// raise ParseError with the line number.
Qrels read_qrels(const std::filesystem::path& path);

/// TREC run files: "qid Q0 docid rank score tag". Order within each query
/// is preserved exactly as stored.
std::vector<RunList> read_run(const std::filesystem::path& path);
void write_run(const std::filesystem::path& path, std::span<const RunList> runs,
               const std::string& tag);

enum class GainKind { EXP, LINEAR }; // 2^g - 1 (gdeval) vs g (trec_eval)
std::string gain_kind_name(GainKind gain);
GainKind parse_gain_kind(const std::string& name);

/// DCG@k / ideal DCG@k with the ideal taken over every judged doc of the
/// query. Queries with no relevant doc score 0 and set *flagged.
double ndcg_at_k(const RunList& run, const Qrels& qrels, std::size_t k,
                 GainKind gain = GainKind::EXP, bool* flagged = nullptr);

/// 1/rank of the first doc with grade >= positive_threshold in the top k.
double mrr_at_k(const RunList& run, const Qrels& qrels, std::size_t k,
                int positive_threshold = 1);

/// (1/R) sum of precision@r over relevant ranks r, R counted from the
/// qrels. R = 0 sets *flagged; such queries are excluded from MAP.
double average_precision(const RunList& run, const Qrels& qrels,
                         int positive_threshold = 1, bool* flagged = nullptr);

/// Expected reciprocal rank with R_r = (2^g_r - 1) / 2^max_grade.
double err_at_k(const RunList& run, const Qrels& qrels, std::size_t k);

struct EvalOptions {
    std::size_t ndcg_k = 10;
    std::size_t err_k = 20;
    std::size_t mrr_k = 10;
    int positive_threshold = 1;
    GainKind gain = GainKind::EXP;
};

struct QueryMetrics {
    std::string query_id;
    double ndcg = 0.0;
    double err = 0.0;
    double mrr = 0.0;
    double ap = 0.0;
    bool ndcg_flagged = false; // no relevant doc judged for this query
    bool ap_excluded = false;  // R = 0, left out of the MAP mean
};

struct MetricSummary {
    double ndcg = 0.0;
    double err = 0.0;
    double mrr = 0.0;
    double map = 0.0;
    std::size_t num_queries = 0;
    std::size_t ndcg_zero_relevant = 0;
    std::size_t map_excluded = 0;
    std::size_t negative_grades_mapped = 0;
    EvalOptions options;
};

/// Means over the runs; NDCG counts flagged queries as 0, MAP excludes them.
MetricSummary evaluate(std::span<const RunList> runs, const Qrels& qrels,
                       const EvalOptions& options = {},
                       std::vector<QueryMetrics>* per_query = nullptr);

} // namespace qdst
