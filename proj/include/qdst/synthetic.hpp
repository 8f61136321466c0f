// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "qdst/pipeline.hpp"

namespace qdst {

/// Knobs for the planted-relevance ranking task: each query owns a unique
/// two-token phrase that appears in exactly one document; every other
/// candidate is some other query's document.
struct SyntheticTaskConfig {
    std::size_t num_queries = 200;
    std::size_t candidates_per_query = 20;
    std::size_t query_len = 4; // phrase plus filler tokens
    std::size_t sentences_per_doc = 3;
    std::size_t sentence_len = 12;
    std::size_t filler_vocab = 400; // shared non-signal tokens
    std::uint64_t seed = 0;
};

struct SyntheticTask {
    Vocabulary vocab;
    std::vector<Query> queries;
    Corpus corpus;
    Qrels qrels; // the planted document judged grade 1
    std::map<std::string, std::vector<std::string>> candidates;
};

SyntheticTask make_synthetic_task(const SyntheticTaskConfig& config);

/// Writes queries.tsv, corpus.tsv, qrels.txt, candidates.tsv, vocab.txt
/// into the directory (created if missing).
void save_synthetic_task(const std::filesystem::path& dir, const SyntheticTask& task);

/// Candidate lists as "qid<TAB>docid" lines, grouped by query in file order.
std::map<std::string, std::vector<std::string>>
read_candidates_tsv(const std::filesystem::path& path);
void write_candidates_tsv(const std::filesystem::path& path,
                          const std::map<std::string, std::vector<std::string>>& candidates);

} // namespace qdst
