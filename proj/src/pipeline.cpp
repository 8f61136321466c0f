// SPDX-License-Identifier: Apache-2.0
#include "qdst/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"

#include "qdst/errors.hpp"

namespace qdst {

namespace {

const char* kReservedTokens[special_token::COUNT] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]",
                                                     "[SOS]"};

// Periods after these do not end a sentence. Matched against the lowercased
// word (letters and interior dots) preceding the terminator.
const std::set<std::string>& abbreviations() {
    static const std::set<std::string> abbr = {
        "mr", "mrs", "ms",  "dr",  "prof", "sr",  "jr",  "st", "vs", "etc",
        "fig", "al", "inc", "ltd", "co",   "no",  "vol", "pp", "approx",
        "e.g", "i.e", "u.s", "u.k", "a.m", "p.m"};
    return abbr;
}

bool is_terminator(char c) { return c == '.' || c == '?' || c == '!'; }

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

// The lowercased word (letters, possibly dotted) ending right before `pos`.
std::string word_before(const std::string& text, std::size_t pos) {
    std::size_t b = pos;
    while (b > 0) {
        const char c = text[b - 1];
        if (std::isalpha(static_cast<unsigned char>(c)) || c == '.') {
            --b;
        } else {
            break;
        }
    }
    std::string word = text.substr(b, pos - b);
    std::transform(word.begin(), word.end(), word.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    while (!word.empty() && word.front() == '.') word.erase(word.begin());
    return word;
}

} // namespace

std::vector<std::string> split_sentences(const std::string& text) {
    std::vector<std::string> out;
    std::size_t start = 0;
    std::size_t i = 0;
    auto flush = [&](std::size_t end) {
        std::string s = trim(text.substr(start, end - start));
        if (!s.empty()) out.push_back(std::move(s));
        start = end;
    };
    while (i < text.size()) {
        if (!is_terminator(text[i])) {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < text.size() && is_terminator(text[j])) ++j;
        const bool at_boundary =
            j == text.size() || std::isspace(static_cast<unsigned char>(text[j]));
        const bool guarded = (j - i == 1) && text[i] == '.' &&
                             abbreviations().count(word_before(text, i)) > 0;
        if (at_boundary && !guarded) flush(j);
        i = j;
    }
    flush(text.size());
    return out;
}

std::vector<std::string> word_split(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char raw : text) {
        const auto c = static_cast<unsigned char>(raw);
        if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

Vocabulary::Vocabulary() {
    for (TokenId id = 0; id < static_cast<TokenId>(special_token::COUNT); ++id) {
        token_to_id_.emplace(kReservedTokens[id], id);
        id_to_token_.emplace_back(kReservedTokens[id]);
    }
}

TokenId Vocabulary::add(const std::string& token) {
    const auto [it, inserted] = token_to_id_.try_emplace(
        token, static_cast<TokenId>(id_to_token_.size()));
    if (inserted) id_to_token_.push_back(token);
    return it->second;
}

TokenId Vocabulary::lookup(const std::string& token) const {
    const auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? special_token::UNK : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
        throw InvalidInput("vocabulary: id " + std::to_string(id) + " out of range");
    }
    return id_to_token_[static_cast<std::size_t>(id)];
}

void Vocabulary::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot open '" + path.string() + "' for writing");
    for (const std::string& token : id_to_token_) out << token << '\n';
    out.flush();
    if (!out) throw Error("write failed for '" + path.string() + "'");
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path.string() + "'");
    Vocabulary vocab;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (lineno <= special_token::COUNT) {
            if (line != kReservedTokens[lineno - 1]) {
                throw ParseError(path.string(), lineno,
                                 "expected reserved token '" +
                                     std::string(kReservedTokens[lineno - 1]) + "', got '" +
                                     line + "'");
            }
            continue;
        }
        if (line.empty()) {
            throw ParseError(path.string(), lineno, "empty vocabulary entry");
        }
        if (vocab.token_to_id_.count(line) > 0) {
            throw ParseError(path.string(), lineno, "duplicate token '" + line + "'");
        }
        vocab.add(line);
    }
    if (lineno < special_token::COUNT) {
        throw ParseError(path.string(), lineno, "vocabulary misses the reserved tokens");
    }
    return vocab;
}

std::vector<TokenId> tokenize(const std::string& text, Vocabulary& vocab, bool build_mode) {
    std::vector<TokenId> ids;
    for (const std::string& word : word_split(text)) {
        ids.push_back(build_mode ? vocab.add(word) : vocab.lookup(word));
    }
    return ids;
}

std::vector<TokenId> tokenize(const std::string& text, const Vocabulary& vocab) {
    std::vector<TokenId> ids;
    for (const std::string& word : word_split(text)) ids.push_back(vocab.lookup(word));
    return ids;
}

void Corpus::add(Document doc) {
    if (doc.sentences.empty()) {
        throw InvalidInput("document '" + doc.doc_id + "' has no sentences");
    }
    for (const auto& s : doc.sentences) {
        if (s.empty()) {
            throw InvalidInput("document '" + doc.doc_id + "' has an empty sentence");
        }
    }
    if (!doc.sentence_texts.empty() && doc.sentence_texts.size() != doc.sentences.size()) {
        throw InvalidInput("document '" + doc.doc_id +
                           "' has mismatched sentence texts and token lists");
    }
    const auto [it, inserted] = index_.try_emplace(doc.doc_id, docs_.size());
    if (!inserted) throw InvalidInput("duplicate doc_id '" + doc.doc_id + "'");
    docs_.push_back(std::move(doc));
}

const Document* Corpus::find(const std::string& doc_id) const {
    const auto it = index_.find(doc_id);
    return it == index_.end() ? nullptr : &docs_[it->second];
}

const Document& Corpus::at(const std::string& doc_id) const {
    if (const Document* doc = find(doc_id)) return *doc;
    throw MissingDocument("unknown document '" + doc_id + "'");
}

namespace {

// Tokenizes split sentences, dropping any with no alphanumeric content.
Document make_document(std::string doc_id, std::string text, Vocabulary& vocab,
                       bool build_mode, const std::filesystem::path& path,
                       std::size_t lineno) {
    Document doc;
    doc.doc_id = std::move(doc_id);
    doc.raw_text = std::move(text);
    for (const std::string& sentence : split_sentences(doc.raw_text)) {
        auto ids = tokenize(sentence, vocab, build_mode);
        if (!ids.empty()) {
            doc.sentences.push_back(std::move(ids));
            doc.sentence_texts.push_back(sentence);
        }
    }
    if (doc.doc_id.empty()) {
        throw ParseError(path.string(), lineno, "empty doc_id");
    }
    if (doc.sentences.empty()) {
        throw ParseError(path.string(), lineno,
                         "document '" + doc.doc_id + "' has no tokenizable text");
    }
    return doc;
}

} // namespace

Corpus read_corpus_tsv(const std::filesystem::path& path, Vocabulary& vocab,
                       bool build_mode) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path.string() + "'");
    Corpus corpus;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw ParseError(path.string(), lineno, "expected doc_id<TAB>text");
        }
        try {
            corpus.add(make_document(line.substr(0, tab), line.substr(tab + 1), vocab,
                                     build_mode, path, lineno));
        } catch (const InvalidInput& e) {
            throw ParseError(path.string(), lineno, e.what());
        }
    }
    return corpus;
}

Corpus read_corpus_jsonl(const std::filesystem::path& path, Vocabulary& vocab,
                         bool build_mode) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path.string() + "'");
    Corpus corpus;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw ParseError(path.string(), lineno, e.what());
        }
        if (!j.is_object() || !j.contains("doc_id") || !j.contains("text") ||
            !j["doc_id"].is_string() || !j["text"].is_string()) {
            throw ParseError(path.string(), lineno,
                             "expected an object with string doc_id and text");
        }
        try {
            corpus.add(make_document(j["doc_id"].get<std::string>(),
                                     j["text"].get<std::string>(), vocab, build_mode, path,
                                     lineno));
        } catch (const InvalidInput& e) {
            throw ParseError(path.string(), lineno, e.what());
        }
    }
    return corpus;
}

Corpus read_corpus(const std::filesystem::path& path, Vocabulary& vocab, bool build_mode) {
    const auto ext = path.extension().string();
    if (ext == ".jsonl" || ext == ".ndjson" || ext == ".json") {
        return read_corpus_jsonl(path, vocab, build_mode);
    }
    return read_corpus_tsv(path, vocab, build_mode);
}

std::vector<Query> read_queries_tsv(const std::filesystem::path& path, Vocabulary& vocab,
                                    bool build_mode) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path.string() + "'");
    std::vector<Query> queries;
    std::set<std::string> seen;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw ParseError(path.string(), lineno, "expected qid<TAB>query text");
        }
        Query q;
        q.query_id = line.substr(0, tab);
        q.text = line.substr(tab + 1);
        q.tokens = tokenize(q.text, vocab, build_mode);
        if (q.query_id.empty()) throw ParseError(path.string(), lineno, "empty query id");
        if (q.tokens.empty()) {
            throw ParseError(path.string(), lineno,
                             "query '" + q.query_id + "' has no tokenizable text");
        }
        if (!seen.insert(q.query_id).second) {
            throw ParseError(path.string(), lineno, "duplicate query id '" + q.query_id + "'");
        }
        queries.push_back(std::move(q));
    }
    return queries;
}

template <typename T>
RunList rerank(const Query& query, std::span<const std::string> candidate_ids,
               const Corpus& corpus, const ModelParams<T>& params, const ModelConfig& config) {
    if (candidate_ids.empty()) {
        throw EmptyResult("rerank: no candidates for query '" + query.query_id + "'");
    }
    std::vector<std::string> missing;
    std::set<std::string> seen;
    for (const std::string& id : candidate_ids) {
        if (!seen.insert(id).second) {
            throw InvalidInput("rerank: candidate '" + id + "' listed twice for query '" +
                               query.query_id + "'");
        }
        if (!corpus.find(id)) missing.push_back(id);
    }
    if (!missing.empty()) {
        std::string list = missing[0];
        for (std::size_t i = 1; i < missing.size(); ++i) list += ", " + missing[i];
        throw MissingDocument("rerank: unknown documents for query '" + query.query_id +
                              "': " + list);
    }

    RunList run;
    run.query_id = query.query_id;
    run.entries.reserve(candidate_ids.size());
    for (const std::string& id : candidate_ids) {
        const Document& doc = corpus.at(id);
        const T s = score<T>(query.tokens, doc.sentences, params, config);
        run.entries.push_back({id, static_cast<float>(s)});
    }
    canonicalize(run);
    return run;
}

template RunList rerank<float>(const Query&, std::span<const std::string>, const Corpus&,
                               const ModelParams<float>&, const ModelConfig&);
template RunList rerank<double>(const Query&, std::span<const std::string>, const Corpus&,
                                const ModelParams<double>&, const ModelConfig&);

template <typename T>
double mean_mrr_at_k(const std::vector<Query>& queries,
                     const std::map<std::string, std::vector<std::string>>& candidates,
                     const Corpus& corpus, const Qrels& qrels,
                     const ModelParams<T>& params, const ModelConfig& config,
                     std::size_t k) {
    double total = 0.0;
    std::size_t count = 0;
    for (const Query& q : queries) {
        const auto it = candidates.find(q.query_id);
        if (it == candidates.end() || it->second.empty()) continue;
        const RunList run = rerank(q, it->second, corpus, params, config);
        total += mrr_at_k(run, qrels, k);
        ++count;
    }
    return count > 0 ? total / static_cast<double>(count) : 0.0;
}

template double mean_mrr_at_k<float>(const std::vector<Query>&,
                                     const std::map<std::string, std::vector<std::string>>&,
                                     const Corpus&, const Qrels&, const ModelParams<float>&,
                                     const ModelConfig&, std::size_t);
template double mean_mrr_at_k<double>(const std::vector<Query>&,
                                      const std::map<std::string, std::vector<std::string>>&,
                                      const Corpus&, const Qrels&,
                                      const ModelParams<double>&, const ModelConfig&,
                                      std::size_t);

template <typename T>
FitResult fit(ModelParams<T>& params, const ModelConfig& config, const TrainConfig& tc,
              const std::vector<Query>& queries, const Corpus& corpus, const Qrels& qrels,
              const std::map<std::string, std::vector<std::string>>& candidates,
              const FitOptions& options) {
    if (qrels.grades.empty()) {
        throw InvalidInput("fit: qrels are empty (judgments are the labels)");
    }

    std::map<std::string, const Query*> query_by_id;
    for (const Query& q : queries) query_by_id[q.query_id] = &q;

    // One layout per (query, candidate) pair, built once up front.
    struct Pair {
        SequenceLayout layout;
        int label;
    };
    std::vector<Pair> pairs;
    std::map<std::string, std::vector<std::size_t>> pos_of, neg_of;
    for (const auto& [qid, docids] : candidates) {
        const auto qit = query_by_id.find(qid);
        if (qit == query_by_id.end()) {
            throw InvalidInput("fit: candidates reference unknown query '" + qid + "'");
        }
        for (const std::string& docid : docids) {
            const Document& doc = corpus.at(docid);
            const int label = qrels.grade(qid, docid) >= 1 ? 1 : 0;
            pairs.push_back(
                {build_layout(qit->second->tokens, doc.sentences, config.max_len), label});
            (label ? pos_of[qid] : neg_of[qid]).push_back(pairs.size() - 1);
        }
    }
    if (pairs.empty()) throw InvalidInput("fit: no (query, candidate) pairs to train on");

    AdamState<T> opt = AdamState<T>::init(config);
    std::mt19937_64 rng(tc.seed + 1);

    std::vector<std::size_t> pointwise_order(pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) pointwise_order[i] = i;
    std::vector<std::pair<std::size_t, std::size_t>> pair_pool;
    if (tc.loss_kind == LossKind::PAIRWISE_SOFTMAX) {
        for (const auto& [qid, pos] : pos_of) {
            const auto nit = neg_of.find(qid);
            if (nit == neg_of.end()) continue;
            for (std::size_t p : pos) {
                for (std::size_t n : nit->second) pair_pool.emplace_back(p, n);
            }
        }
        if (pair_pool.empty()) {
            throw InvalidInput("fit: pairwise loss needs at least one positive and one "
                               "negative per query");
        }
    }

    FitResult result;
    std::size_t cursor = 0;
    auto reshuffle = [&]() {
        cursor = 0;
        if (tc.loss_kind == LossKind::PAIRWISE_SOFTMAX) {
            std::shuffle(pair_pool.begin(), pair_pool.end(), rng);
        } else {
            std::shuffle(pointwise_order.begin(), pointwise_order.end(), rng);
        }
    };
    reshuffle();
    for (std::size_t step = 1; step <= tc.max_steps; ++step) {
        double loss = 0.0;
        if (tc.loss_kind == LossKind::PAIRWISE_SOFTMAX) {
            std::vector<PairwiseExample> batch;
            for (std::size_t b = 0; b < tc.batch_size; ++b) {
                if (cursor >= pair_pool.size()) reshuffle();
                const auto [p, n] = pair_pool[cursor++];
                batch.push_back({pairs[p].layout, pairs[n].layout});
            }
            loss = train_step(params, opt, config, tc,
                              std::span<const PairwiseExample>(batch), rng);
        } else {
            std::vector<PointwiseExample> batch;
            for (std::size_t b = 0; b < tc.batch_size; ++b) {
                if (cursor >= pointwise_order.size()) reshuffle();
                const Pair& pr = pairs[pointwise_order[cursor++]];
                batch.push_back({pr.layout, pr.label});
            }
            loss = train_step(params, opt, config, tc,
                              std::span<const PointwiseExample>(batch), rng);
        }
        result.losses.push_back(loss);
        result.steps_run = step;
        if (options.eval_every != 0 && step % options.eval_every == 0) {
            const double mrr =
                mean_mrr_at_k(queries, candidates, corpus, qrels, params, config);
            result.best_mrr = std::max(result.best_mrr, mrr);
            if (options.log != nullptr) {
                (*options.log) << "step " << step << " loss " << loss << " mrr@10 "
                               << mrr << '\n';
            }
            if (options.target_mrr >= 0.0 && mrr >= options.target_mrr) {
                result.steps_to_target = step;
                break;
            }
        }
    }
    result.final_mrr = mean_mrr_at_k(queries, candidates, corpus, qrels, params, config);
    result.best_mrr = std::max(result.best_mrr, result.final_mrr);
    return result;
}

template FitResult fit<float>(ModelParams<float>&, const ModelConfig&, const TrainConfig&,
                              const std::vector<Query>&, const Corpus&, const Qrels&,
                              const std::map<std::string, std::vector<std::string>>&,
                              const FitOptions&);
template FitResult fit<double>(ModelParams<double>&, const ModelConfig&,
                               const TrainConfig&, const std::vector<Query>&,
                               const Corpus&, const Qrels&,
                               const std::map<std::string, std::vector<std::string>>&,
                               const FitOptions&);

} // namespace qdst
