// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "qdst/layout.hpp"
#include "qdst/metrics.hpp"
#include "qdst/model.hpp"

namespace qdst {

/// Token to id mapping with the reserved control ids preassigned.
class Vocabulary {
public:
    Vocabulary();

    /// Build-mode lookup: unknown tokens get the next free id.
    TokenId add(const std::string& token);
    /// Frozen lookup: unknown tokens map to [UNK].
    TokenId lookup(const std::string& token) const;

    std::size_t size() const { return id_to_token_.size(); }
    const std::string& token(TokenId id) const;

    /// One token per line; the line number is the id.
    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path);

private:
    std::unordered_map<std::string, TokenId> token_to_id_;
    std::vector<std::string> id_to_token_;
};

/// Rule-based splitter: a run of [.?!] followed by whitespace (or the end)
/// closes a sentence, except after a listed abbreviation. Text without any
/// terminator is a single sentence; empty segments are dropped.
std::vector<std::string> split_sentences(const std::string& text);

/// Lowercased maximal alphanumeric runs.
std::vector<std::string> word_split(const std::string& text);

std::vector<TokenId> tokenize(const std::string& text, Vocabulary& vocab, bool build_mode);
std::vector<TokenId> tokenize(const std::string& text, const Vocabulary& vocab);

struct Document {
    std::string doc_id;
    std::vector<std::vector<TokenId>> sentences;   // non-empty, token ids per sentence
    std::vector<std::string> sentence_texts;       // aligned with sentences (may be empty)
    std::string raw_text;
};

class Corpus {
public:
    void add(Document doc); // throws InvalidInput on duplicate doc_id
    const Document* find(const std::string& doc_id) const;
    const Document& at(const std::string& doc_id) const; // throws MissingDocument
    std::size_t size() const { return docs_.size(); }
    const std::vector<Document>& docs() const { return docs_; }

private:
    std::vector<Document> docs_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// TSV corpus: "doc_id<TAB>text" per line; the text keeps any further tabs.
Corpus read_corpus_tsv(const std::filesystem::path& path, Vocabulary& vocab, bool build_mode);
/// JSON-lines corpus: {"doc_id": ..., "text": ...} per line.
Corpus read_corpus_jsonl(const std::filesystem::path& path, Vocabulary& vocab,
                         bool build_mode);
/// Dispatches on the extension: .jsonl/.ndjson/.json read as JSON lines,
/// anything else as TSV.
Corpus read_corpus(const std::filesystem::path& path, Vocabulary& vocab, bool build_mode);

struct Query {
    std::string query_id;
    std::string text;
    std::vector<TokenId> tokens;
};

/// TSV queries: "qid<TAB>query text" per line.
std::vector<Query> read_queries_tsv(const std::filesystem::path& path, Vocabulary& vocab,
                                    bool build_mode);

/// Scores every candidate with the model and returns the canonical ranking
/// (descending score, doc_id ascending on ties). Unknown candidates raise
/// MissingDocument listing every unresolved id.
template <typename T>
RunList rerank(const Query& query, std::span<const std::string> candidate_ids,
               const Corpus& corpus, const ModelParams<T>& params, const ModelConfig& config);

/// Mean MRR@k over every query that has a non-empty candidate list.
template <typename T>
double mean_mrr_at_k(const std::vector<Query>& queries,
                     const std::map<std::string, std::vector<std::string>>& candidates,
                     const Corpus& corpus, const Qrels& qrels,
                     const ModelParams<T>& params, const ModelConfig& config,
                     std::size_t k = 10);

struct FitOptions {
    std::size_t eval_every = 0;  // 0: no periodic MRR probes
    double target_mrr = -1.0;    // negative: never stop early
    std::ostream* log = nullptr; // one progress line per probe when set
};

struct FitResult {
    std::vector<double> losses;      // one entry per optimizer step
    std::size_t steps_run = 0;
    std::size_t steps_to_target = 0; // 0 when the target was never reached
    double best_mrr = 0.0;
    double final_mrr = 0.0;
};

/// Optimizes params over the (query, candidate) pairs named by the
/// candidates map; labels come from qrels (grade >= 1 is positive). The
/// caller initializes params; shuffling draws from a tc.seed + 1 stream.
template <typename T>
FitResult fit(ModelParams<T>& params, const ModelConfig& config, const TrainConfig& tc,
              const std::vector<Query>& queries, const Corpus& corpus, const Qrels& qrels,
              const std::map<std::string, std::vector<std::string>>& candidates,
              const FitOptions& options = {});

} // namespace qdst
