// SPDX-License-Identifier: Apache-2.0
#include "qdst/synthetic.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

#include "qdst/errors.hpp"

namespace qdst {

namespace {

std::string padded(const char* prefix, std::size_t i) {
    std::ostringstream os;
    os << prefix;
    os.width(4);
    os.fill('0');
    os << i;
    return os.str();
}

} // namespace

SyntheticTask make_synthetic_task(const SyntheticTaskConfig& config) {
    if (config.num_queries == 0 || config.candidates_per_query == 0) {
        throw InvalidInput("synthetic task: num_queries and candidates_per_query "
                           "must be positive");
    }
    if (config.candidates_per_query > config.num_queries) {
        throw InvalidInput("synthetic task: candidates_per_query cannot exceed "
                           "num_queries (negatives are other queries' documents)");
    }
    if (config.query_len < 2 || config.sentence_len < 2) {
        throw InvalidInput("synthetic task: query_len and sentence_len must fit the "
                           "two-token phrase");
    }
    if (config.filler_vocab == 0) {
        throw InvalidInput("synthetic task: filler_vocab must be positive");
    }

    SyntheticTask task;
    std::mt19937_64 rng(config.seed);

    std::vector<std::string> fillers(config.filler_vocab);
    for (std::size_t i = 0; i < fillers.size(); ++i) {
        fillers[i] = "w" + std::to_string(i);
        task.vocab.add(fillers[i]);
    }
    std::uniform_int_distribution<std::size_t> pick_filler(0, fillers.size() - 1);

    auto join = [](const std::vector<std::string>& words) {
        std::string text;
        for (std::size_t i = 0; i < words.size(); ++i) {
            if (i > 0) text += ' ';
            text += words[i];
        }
        return text;
    };

    std::vector<std::string> doc_ids(config.num_queries);
    for (std::size_t q = 0; q < config.num_queries; ++q) {
        const std::string qid = padded("q", q);
        const std::string docid = padded("d", q);
        doc_ids[q] = docid;
        // The signal tokens exist only in this query and its document.
        const std::string kw_a = "kw" + std::to_string(q) + "a";
        const std::string kw_b = "kw" + std::to_string(q) + "b";
        task.vocab.add(kw_a);
        task.vocab.add(kw_b);

        std::vector<std::string> qwords = {kw_a, kw_b};
        while (qwords.size() < config.query_len) qwords.push_back(fillers[pick_filler(rng)]);

        Query query;
        query.query_id = qid;
        query.text = join(qwords);
        query.tokens = tokenize(query.text, task.vocab);
        task.queries.push_back(std::move(query));

        std::uniform_int_distribution<std::size_t> pick_sentence(
            0, config.sentences_per_doc - 1);
        const std::size_t planted = pick_sentence(rng);
        std::vector<std::string> sentences;
        for (std::size_t s = 0; s < config.sentences_per_doc; ++s) {
            std::vector<std::string> words;
            if (s == planted) {
                words.push_back(kw_a);
                words.push_back(kw_b);
            }
            while (words.size() < config.sentence_len) {
                words.push_back(fillers[pick_filler(rng)]);
            }
            sentences.push_back(join(words) + ".");
        }
        Document doc;
        doc.doc_id = docid;
        doc.raw_text = join(sentences);
        for (const std::string& sentence : split_sentences(doc.raw_text)) {
            doc.sentences.push_back(tokenize(sentence, task.vocab));
            doc.sentence_texts.push_back(sentence);
        }
        task.corpus.add(std::move(doc));
        task.qrels.add(qid, docid, 1);
    }

    // Candidates: the planted document plus negatives drawn from the others.
    for (std::size_t q = 0; q < config.num_queries; ++q) {
        std::vector<std::string> pool;
        pool.reserve(config.num_queries - 1);
        for (std::size_t o = 0; o < config.num_queries; ++o) {
            if (o != q) pool.push_back(doc_ids[o]);
        }
        std::shuffle(pool.begin(), pool.end(), rng);
        std::vector<std::string> cands = {doc_ids[q]};
        for (std::size_t i = 0; i + 1 < config.candidates_per_query; ++i) {
            cands.push_back(pool[i]);
        }
        std::sort(cands.begin(), cands.end());
        task.candidates[padded("q", q)] = std::move(cands);
    }
    return task;
}

void save_synthetic_task(const std::filesystem::path& dir, const SyntheticTask& task) {
    std::filesystem::create_directories(dir);

    {
        std::ofstream out(dir / "queries.tsv");
        if (!out) throw Error("cannot write queries.tsv");
        for (const Query& q : task.queries) out << q.query_id << '\t' << q.text << '\n';
    }
    {
        std::ofstream out(dir / "corpus.tsv");
        if (!out) throw Error("cannot write corpus.tsv");
        for (const Document& d : task.corpus.docs()) {
            out << d.doc_id << '\t' << d.raw_text << '\n';
        }
    }
    {
        std::ofstream out(dir / "qrels.txt");
        if (!out) throw Error("cannot write qrels.txt");
        for (const auto& [qid, docs] : task.qrels.grades) {
            std::vector<std::string> ids;
            for (const auto& [docid, grade] : docs) ids.push_back(docid);
            std::sort(ids.begin(), ids.end());
            for (const std::string& docid : ids) {
                out << qid << " 0 " << docid << ' ' << docs.at(docid) << '\n';
            }
        }
    }
    write_candidates_tsv(dir / "candidates.tsv", task.candidates);
    task.vocab.save(dir / "vocab.txt");
}

std::map<std::string, std::vector<std::string>>
read_candidates_tsv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path.string() + "'");
    std::map<std::string, std::vector<std::string>> candidates;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos || tab == 0 || tab + 1 >= line.size()) {
            throw ParseError(path.string(), lineno, "expected qid<TAB>docid");
        }
        candidates[line.substr(0, tab)].push_back(line.substr(tab + 1));
    }
    return candidates;
}

void write_candidates_tsv(const std::filesystem::path& path,
                          const std::map<std::string, std::vector<std::string>>& candidates) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open '" + path.string() + "' for writing");
    for (const auto& [qid, docs] : candidates) {
        for (const std::string& docid : docs) out << qid << '\t' << docid << '\n';
    }
    out.flush();
    if (!out) throw Error("write failed for '" + path.string() + "'");
}

} // namespace qdst
