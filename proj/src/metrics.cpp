// SPDX-License-Identifier: Apache-2.0
#include "qdst/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "qdst/errors.hpp"

namespace qdst {

int Qrels::grade(const std::string& query_id, const std::string& doc_id) const {
    const auto q = grades.find(query_id);
    if (q == grades.end()) return 0;
    const auto d = q->second.find(doc_id);
    return d == q->second.end() ? 0 : d->second;
}

const std::unordered_map<std::string, int>* Qrels::judged(const std::string& query_id) const {
    const auto q = grades.find(query_id);
    return q == grades.end() ? nullptr : &q->second;
}

void Qrels::add(const std::string& query_id, const std::string& doc_id, int grade) {
    if (grade < 0) {
        grade = 0;
        ++negative_grades_mapped;
    }
    grades[query_id][doc_id] = grade;
    max_grade = std::max(max_grade, grade);
}

void canonicalize(RunList& run) {
    std::sort(run.entries.begin(), run.entries.end(),
              [](const RankedDoc& a, const RankedDoc& b) {
                  if (a.score != b.score) return a.score > b.score;
                  return a.doc_id < b.doc_id;
              });
    for (std::size_t i = 1; i < run.entries.size(); ++i) {
        if (run.entries[i].doc_id == run.entries[i - 1].doc_id) {
            throw InvalidInput("run for query '" + run.query_id + "' lists doc '" +
                               run.entries[i].doc_id + "' twice");
        }
    }
}

namespace {

std::vector<std::string> fields_of(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream is(line);
    std::string f;
    while (is >> f) out.push_back(std::move(f));
    return out;
}

long parse_long(const std::string& s, const std::filesystem::path& path, std::size_t line,
                const char* what) {
    try {
        std::size_t pos = 0;
        const long v = std::stol(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ParseError(path.string(), line, std::string("bad ") + what + " '" + s + "'");
    }
}

double parse_double(const std::string& s, const std::filesystem::path& path,
                    std::size_t line, const char* what) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ParseError(path.string(), line, std::string("bad ") + what + " '" + s + "'");
    }
}

} // namespace

Qrels read_qrels(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path.string() + "'");
    Qrels qrels;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto f = fields_of(line);
        if (f.empty()) continue;
        if (f.size() != 4) {
            throw ParseError(path.string(), lineno,
                             "expected 4 fields (qid 0 docid grade), got " +
                                 std::to_string(f.size()));
        }
        const long grade = parse_long(f[3], path, lineno, "grade");
        qrels.add(f[0], f[2], static_cast<int>(grade));
    }
    return qrels;
}

std::vector<RunList> read_run(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path.string() + "'");
    std::vector<RunList> runs;
    std::unordered_map<std::string, std::size_t> index;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto f = fields_of(line);
        if (f.empty()) continue;
        if (f.size() != 6) {
            throw ParseError(path.string(), lineno,
                             "expected 6 fields (qid Q0 docid rank score tag), got " +
                                 std::to_string(f.size()));
        }
        parse_long(f[3], path, lineno, "rank");
        const double score = parse_double(f[4], path, lineno, "score");
        auto [it, inserted] = index.try_emplace(f[0], runs.size());
        if (inserted) runs.push_back(RunList{f[0], {}});
        runs[it->second].entries.push_back({f[2], static_cast<float>(score)});
    }
    return runs;
}

void write_run(const std::filesystem::path& path, std::span<const RunList> runs,
               const std::string& tag) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open '" + path.string() + "' for writing");
    char score_buf[64];
    for (const RunList& run : runs) {
        for (std::size_t r = 0; r < run.entries.size(); ++r) {
            std::snprintf(score_buf, sizeof(score_buf), "%.9g",
                          static_cast<double>(run.entries[r].score));
            out << run.query_id << " Q0 " << run.entries[r].doc_id << ' ' << (r + 1) << ' '
                << score_buf << ' ' << tag << '\n';
        }
    }
    out.flush();
    if (!out) throw Error("write failed for '" + path.string() + "'");
}

std::string gain_kind_name(GainKind gain) {
    return gain == GainKind::EXP ? "exp" : "linear";
}

GainKind parse_gain_kind(const std::string& name) {
    if (name == "exp") return GainKind::EXP;
    if (name == "linear") return GainKind::LINEAR;
    throw InvalidInput("unknown gain kind '" + name + "' (expected exp or linear)");
}

namespace {

double gain_of(int grade, GainKind gain) {
    if (gain == GainKind::EXP) return std::exp2(static_cast<double>(grade)) - 1.0;
    return static_cast<double>(grade);
}

} // namespace

double ndcg_at_k(const RunList& run, const Qrels& qrels, std::size_t k, GainKind gain,
                 bool* flagged) {
    if (k == 0) throw InvalidInput("ndcg_at_k: k must be at least 1");
    if (flagged) *flagged = false;

    double ideal = 0.0;
    if (const auto* judged = qrels.judged(run.query_id)) {
        std::vector<int> grades;
        grades.reserve(judged->size());
        for (const auto& [doc, g] : *judged) grades.push_back(g);
        std::sort(grades.begin(), grades.end(), std::greater<>());
        for (std::size_t r = 0; r < grades.size() && r < k; ++r) {
            ideal += gain_of(grades[r], gain) / std::log2(static_cast<double>(r) + 2.0);
        }
    }
    if (ideal == 0.0) {
        if (flagged) *flagged = true;
        return 0.0;
    }
    double dcg = 0.0;
    for (std::size_t r = 0; r < run.entries.size() && r < k; ++r) {
        dcg += gain_of(qrels.grade(run.query_id, run.entries[r].doc_id), gain) /
               std::log2(static_cast<double>(r) + 2.0);
    }
    return dcg / ideal;
}

double mrr_at_k(const RunList& run, const Qrels& qrels, std::size_t k,
                int positive_threshold) {
    if (k == 0) throw InvalidInput("mrr_at_k: k must be at least 1");
    for (std::size_t r = 0; r < run.entries.size() && r < k; ++r) {
        if (qrels.grade(run.query_id, run.entries[r].doc_id) >= positive_threshold) {
            return 1.0 / static_cast<double>(r + 1);
        }
    }
    return 0.0;
}

double average_precision(const RunList& run, const Qrels& qrels, int positive_threshold,
                         bool* flagged) {
    if (flagged) *flagged = false;
    std::size_t total_relevant = 0;
    if (const auto* judged = qrels.judged(run.query_id)) {
        for (const auto& [doc, g] : *judged) {
            if (g >= positive_threshold) ++total_relevant;
        }
    }
    if (total_relevant == 0) {
        if (flagged) *flagged = true;
        return 0.0;
    }
    double sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t r = 0; r < run.entries.size(); ++r) {
        if (qrels.grade(run.query_id, run.entries[r].doc_id) >= positive_threshold) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(r + 1);
        }
    }
    return sum / static_cast<double>(total_relevant);
}

double err_at_k(const RunList& run, const Qrels& qrels, std::size_t k) {
    if (k == 0) throw InvalidInput("err_at_k: k must be at least 1");
    const double denom = std::exp2(static_cast<double>(qrels.max_grade));
    double err = 0.0;
    double continue_prob = 1.0;
    for (std::size_t r = 0; r < run.entries.size() && r < k; ++r) {
        const int g = qrels.grade(run.query_id, run.entries[r].doc_id);
        const double stop = (std::exp2(static_cast<double>(g)) - 1.0) / denom;
        err += continue_prob * stop / static_cast<double>(r + 1);
        continue_prob *= 1.0 - stop;
    }
    return err;
}

MetricSummary evaluate(std::span<const RunList> runs, const Qrels& qrels,
                       const EvalOptions& options, std::vector<QueryMetrics>* per_query) {
    MetricSummary summary;
    summary.options = options;
    summary.negative_grades_mapped = qrels.negative_grades_mapped;
    if (per_query) per_query->clear();

    double map_sum = 0.0;
    std::size_t map_count = 0;
    for (const RunList& run : runs) {
        QueryMetrics qm;
        qm.query_id = run.query_id;
        qm.ndcg = ndcg_at_k(run, qrels, options.ndcg_k, options.gain, &qm.ndcg_flagged);
        qm.err = err_at_k(run, qrels, options.err_k);
        qm.mrr = mrr_at_k(run, qrels, options.mrr_k, options.positive_threshold);
        qm.ap = average_precision(run, qrels, options.positive_threshold, &qm.ap_excluded);

        summary.ndcg += qm.ndcg;
        summary.err += qm.err;
        summary.mrr += qm.mrr;
        if (qm.ndcg_flagged) ++summary.ndcg_zero_relevant;
        if (qm.ap_excluded) {
            ++summary.map_excluded;
        } else {
            map_sum += qm.ap;
            ++map_count;
        }
        ++summary.num_queries;
        if (per_query) per_query->push_back(std::move(qm));
    }
    if (summary.num_queries > 0) {
        summary.ndcg /= static_cast<double>(summary.num_queries);
        summary.err /= static_cast<double>(summary.num_queries);
        summary.mrr /= static_cast<double>(summary.num_queries);
    }
    summary.map = map_count > 0 ? map_sum / static_cast<double>(map_count) : 0.0;
    return summary;
}

} // namespace qdst
