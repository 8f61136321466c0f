// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"

#include "qdst/errors.hpp"
#include "qdst/synthetic.hpp"

using namespace qdst;

namespace {

SyntheticTaskConfig small_config() {
    SyntheticTaskConfig c;
    c.num_queries = 12;
    c.candidates_per_query = 6;
    c.query_len = 4;
    c.sentences_per_doc = 3;
    c.sentence_len = 8;
    c.filler_vocab = 50;
    c.seed = 9;
    return c;
}

} // namespace

TEST_CASE("planted task structure: one relevant doc carrying the query phrase") {
    const SyntheticTaskConfig c = small_config();
    const SyntheticTask t = make_synthetic_task(c);
    REQUIRE(t.queries.size() == 12);
    REQUIRE(t.corpus.size() == 12);

    for (std::size_t qi = 0; qi < t.queries.size(); ++qi) {
        const Query& q = t.queries[qi];
        REQUIRE(q.tokens.size() == c.query_len);
        // Positive doc is judged at grade 1 and appears in the candidates.
        const auto* judged = t.qrels.judged(q.query_id);
        REQUIRE(judged != nullptr);
        REQUIRE(judged->size() == 1);
        const std::string pos_doc = judged->begin()->first;
        CHECK(judged->begin()->second == 1);
        const auto& cands = t.candidates.at(q.query_id);
        CHECK(cands.size() == c.candidates_per_query);
        CHECK(std::find(cands.begin(), cands.end(), pos_doc) != cands.end());
        // Candidates are unique and resolvable.
        std::set<std::string> uniq(cands.begin(), cands.end());
        CHECK(uniq.size() == cands.size());
        for (const std::string& id : cands) CHECK(t.corpus.find(id) != nullptr);

        // The two-token phrase occurs in the query and in the positive doc.
        const TokenId a = q.tokens[0];
        const TokenId b = q.tokens[1];
        auto contains_phrase = [&](const Document& d) {
            for (const auto& s : d.sentences) {
                for (std::size_t i = 0; i + 1 < s.size(); ++i) {
                    if (s[i] == a && s[i + 1] == b) return true;
                }
            }
            return false;
        };
        CHECK(contains_phrase(t.corpus.at(pos_doc)));
        // And in no other candidate.
        for (const std::string& id : cands) {
            if (id != pos_doc) CHECK_FALSE(contains_phrase(t.corpus.at(id)));
        }
    }
}

TEST_CASE("synthetic task is deterministic per seed and varies across seeds") {
    const SyntheticTaskConfig c = small_config();
    const SyntheticTask t1 = make_synthetic_task(c);
    const SyntheticTask t2 = make_synthetic_task(c);
    SyntheticTaskConfig other = c;
    other.seed = 10;
    const SyntheticTask t3 = make_synthetic_task(other);

    REQUIRE(t1.queries.size() == t2.queries.size());
    bool same = true;
    bool differs = false;
    for (std::size_t i = 0; i < t1.queries.size(); ++i) {
        if (t1.queries[i].tokens != t2.queries[i].tokens) same = false;
        if (t1.queries[i].tokens != t3.queries[i].tokens) differs = true;
    }
    CHECK(same);
    CHECK(differs);
}

TEST_CASE("synthetic task validates its configuration") {
    SyntheticTaskConfig c = small_config();
    c.candidates_per_query = 13; // more than num_queries
    CHECK_THROWS_AS(make_synthetic_task(c), InvalidInput);
    c = small_config();
    c.query_len = 1; // cannot hold the two-token phrase
    CHECK_THROWS_AS(make_synthetic_task(c), InvalidInput);
    c = small_config();
    c.num_queries = 0;
    CHECK_THROWS_AS(make_synthetic_task(c), InvalidInput);
}

TEST_CASE("synthetic task files round-trip through the readers") {
    namespace fs = std::filesystem;
    const SyntheticTask t = make_synthetic_task(small_config());
    const fs::path dir = fs::temp_directory_path() / "qdst_synth_io";
    save_synthetic_task(dir, t);

    const Vocabulary vocab = Vocabulary::load(dir / "vocab.txt");
    CHECK(vocab.size() == t.vocab.size());
    Vocabulary frozen = vocab;
    const std::vector<Query> queries = read_queries_tsv(dir / "queries.tsv", frozen, false);
    REQUIRE(queries.size() == t.queries.size());
    for (std::size_t i = 0; i < queries.size(); ++i) {
        CHECK(queries[i].query_id == t.queries[i].query_id);
        CHECK(queries[i].tokens == t.queries[i].tokens);
    }
    const Corpus corpus = read_corpus(dir / "corpus.tsv", frozen, false);
    REQUIRE(corpus.size() == t.corpus.size());
    for (const Document& d : t.corpus.docs()) {
        const Document& back = corpus.at(d.doc_id);
        CHECK(back.sentences == d.sentences);
    }
    const Qrels qrels = read_qrels(dir / "qrels.txt");
    for (const Query& q : t.queries) {
        const auto* judged = t.qrels.judged(q.query_id);
        const auto* judged_back = qrels.judged(q.query_id);
        REQUIRE(judged_back != nullptr);
        CHECK(judged_back->size() == judged->size());
    }
    const auto cands = read_candidates_tsv(dir / "candidates.tsv");
    CHECK(cands == t.candidates);

    fs::remove_all(dir);
}
