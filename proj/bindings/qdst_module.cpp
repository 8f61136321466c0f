// SPDX-License-Identifier: Apache-2.0
// Python bindings for the core library: pattern inspection, tokenization,
// ranking metrics, and model scoring.
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "qdst/bench.hpp"
#include "qdst/errors.hpp"
#include "qdst/layout.hpp"
#include "qdst/metrics.hpp"
#include "qdst/model.hpp"
#include "qdst/pattern.hpp"
#include "qdst/pipeline.hpp"

namespace py = pybind11;
using namespace qdst;

namespace {

PatternConfig config_for(const std::string& preset, std::size_t window, bool asymmetric) {
    PatternConfig c = make_pattern_config(parse_preset(preset), window);
    c.asymmetric_globals = asymmetric;
    return c;
}

BlockSparsePattern pattern_for(const std::string& preset, std::size_t n,
                               std::size_t window, std::size_t query_len,
                               std::size_t sentence_len, bool asymmetric) {
    std::mt19937_64 rng(0);
    const SequenceLayout layout = synthetic_layout(n, query_len, sentence_len, 100, rng);
    return build_pattern(layout, config_for(preset, window, asymmetric));
}

RunList run_from_pairs(const std::vector<std::pair<std::string, double>>& ranking) {
    RunList run;
    run.query_id = "q";
    for (const auto& [doc_id, score] : ranking) {
        run.entries.push_back({doc_id, static_cast<float>(score)});
    }
    canonicalize(run);
    return run;
}

Qrels qrels_from_map(const std::map<std::string, int>& grades) {
    Qrels q;
    for (const auto& [doc_id, grade] : grades) q.add("q", doc_id, grade);
    return q;
}

/// Owning wrapper so python sees one object holding weights plus config.
struct PyModel {
    ModelParams<float> params;
    ModelConfig config;

    static PyModel create(std::size_t dim, std::size_t heads, std::size_t layers,
                          std::size_t max_len, std::size_t vocab_size,
                          const std::string& preset, std::size_t window,
                          std::uint64_t seed) {
        ModelConfig c;
        c.dim = dim;
        c.num_heads = heads;
        c.num_layers = layers;
        c.max_len = max_len;
        c.vocab_size = vocab_size;
        c.dropout_rate = 0.0;
        c.pattern = make_pattern_config(parse_preset(preset), window);
        validate_config(c);
        return {ModelParams<float>::init(c, seed), c};
    }

    static PyModel load(const std::filesystem::path& path) {
        auto [params, config] = load_params<float>(path);
        return {std::move(params), std::move(config)};
    }

    void save(const std::filesystem::path& path) const {
        save_params(path, params, config);
    }

    double score_tokens(const std::vector<TokenId>& query,
                        const std::vector<std::vector<TokenId>>& sentences) const {
        return static_cast<double>(qdst::score<float>(query, sentences, params, config));
    }

    double score_text(const std::string& query_text, const std::string& doc_text,
                      const Vocabulary& vocab) const {
        const std::vector<TokenId> query = tokenize(query_text, vocab);
        std::vector<std::vector<TokenId>> sentences;
        for (const std::string& s : split_sentences(doc_text)) {
            std::vector<TokenId> ids = tokenize(s, vocab);
            if (!ids.empty()) sentences.push_back(std::move(ids));
        }
        return score_tokens(query, sentences);
    }
};

} // namespace

PYBIND11_MODULE(_qdst, m) {
    m.doc() = "Query-directed sparse transformer core";

    py::register_exception<InvalidInput>(m, "InvalidInputError", PyExc_ValueError);
    py::register_exception<ParseError>(m, "ParseFailure", PyExc_ValueError);
    py::register_exception<CorruptModel>(m, "CorruptModelError", PyExc_ValueError);
    py::register_exception<MissingDocument>(m, "MissingDocumentError", PyExc_KeyError);
    py::register_exception<EmptyResult>(m, "EmptyResultError", PyExc_ValueError);

    m.def(
        "pattern_mask",
        [](const std::string& preset, std::size_t n, std::size_t window,
           std::size_t query_len, std::size_t sentence_len, bool asymmetric) {
            const BlockSparsePattern p =
                pattern_for(preset, n, window, query_len, sentence_len, asymmetric);
            const std::vector<std::uint8_t> mask = dense_mask(p);
            py::array_t<std::uint8_t> out({n, n});
            std::copy(mask.begin(), mask.end(), out.mutable_data());
            return out;
        },
        py::arg("preset"), py::arg("n"), py::arg("window") = 128,
        py::arg("query_len") = 4, py::arg("sentence_len") = 25,
        py::arg("asymmetric") = false,
        "Dense 0/1 adjacency of the attention pattern on a synthetic layout");

    m.def(
        "sparsity",
        [](const std::string& preset, std::size_t n, std::size_t window,
           std::size_t query_len, std::size_t sentence_len, bool asymmetric) {
            const SparsityStats s = qdst::sparsity(
                pattern_for(preset, n, window, query_len, sentence_len, asymmetric));
            py::dict d;
            d["nonzeros"] = s.nonzeros;
            d["total"] = s.total;
            d["fraction"] = s.fraction;
            return d;
        },
        py::arg("preset"), py::arg("n"), py::arg("window") = 128,
        py::arg("query_len") = 4, py::arg("sentence_len") = 25,
        py::arg("asymmetric") = false);

    m.def("presets", [] {
        return std::vector<std::string>{"full",   "local_only", "longformer_qa",
                                        "qds_q",  "qds_s",      "qds"};
    });

    py::class_<Vocabulary>(m, "Vocabulary")
        .def(py::init<>())
        .def("add", &Vocabulary::add, py::arg("token"))
        .def("lookup", &Vocabulary::lookup, py::arg("token"))
        .def("token", &Vocabulary::token, py::arg("id"))
        .def("save", &Vocabulary::save, py::arg("path"))
        .def_static("load", &Vocabulary::load, py::arg("path"))
        .def("__len__", &Vocabulary::size);

    m.def("split_sentences", &split_sentences, py::arg("text"));
    m.def("word_split", &word_split, py::arg("text"));
    m.def(
        "tokenize",
        [](const std::string& text, const Vocabulary& vocab) {
            return tokenize(text, vocab);
        },
        py::arg("text"), py::arg("vocab"),
        "Frozen-vocabulary tokenization; unknown words map to [UNK]");
    m.def(
        "tokenize_build",
        [](const std::string& text, Vocabulary& vocab) {
            return tokenize(text, vocab, /*build_mode=*/true);
        },
        py::arg("text"), py::arg("vocab"),
        "Build-mode tokenization; unknown words extend the vocabulary");

    m.def(
        "ndcg",
        [](const std::vector<std::pair<std::string, double>>& ranking,
           const std::map<std::string, int>& qrels, std::size_t k,
           const std::string& gain) {
            return ndcg_at_k(run_from_pairs(ranking), qrels_from_map(qrels), k,
                             parse_gain_kind(gain));
        },
        py::arg("ranking"), py::arg("qrels"), py::arg("k") = 10,
        py::arg("gain") = "exp");
    m.def(
        "mrr",
        [](const std::vector<std::pair<std::string, double>>& ranking,
           const std::map<std::string, int>& qrels, std::size_t k, int threshold) {
            return mrr_at_k(run_from_pairs(ranking), qrels_from_map(qrels), k, threshold);
        },
        py::arg("ranking"), py::arg("qrels"), py::arg("k") = 10,
        py::arg("threshold") = 1);
    m.def(
        "average_precision",
        [](const std::vector<std::pair<std::string, double>>& ranking,
           const std::map<std::string, int>& qrels, int threshold) {
            return average_precision(run_from_pairs(ranking), qrels_from_map(qrels),
                                     threshold);
        },
        py::arg("ranking"), py::arg("qrels"), py::arg("threshold") = 1);
    m.def(
        "err",
        [](const std::vector<std::pair<std::string, double>>& ranking,
           const std::map<std::string, int>& qrels, std::size_t k) {
            return err_at_k(run_from_pairs(ranking), qrels_from_map(qrels), k);
        },
        py::arg("ranking"), py::arg("qrels"), py::arg("k") = 20);

    py::class_<PyModel>(m, "Model")
        .def_static("create", &PyModel::create, py::arg("dim") = 64,
                    py::arg("heads") = 4, py::arg("layers") = 2,
                    py::arg("max_len") = 512, py::arg("vocab_size") = 1024,
                    py::arg("preset") = "qds", py::arg("window") = 64,
                    py::arg("seed") = 0)
        .def_static("load", &PyModel::load, py::arg("path"))
        .def("save", &PyModel::save, py::arg("path"))
        .def("score", &PyModel::score_tokens, py::arg("query_tokens"),
             py::arg("sentences"))
        .def("score_text", &PyModel::score_text, py::arg("query"), py::arg("document"),
             py::arg("vocab"))
        .def_property_readonly("dim", [](const PyModel& s) { return s.config.dim; })
        .def_property_readonly("heads",
                               [](const PyModel& s) { return s.config.num_heads; })
        .def_property_readonly("layers",
                               [](const PyModel& s) { return s.config.num_layers; })
        .def_property_readonly("max_len",
                               [](const PyModel& s) { return s.config.max_len; })
        .def_property_readonly("vocab_size",
                               [](const PyModel& s) { return s.config.vocab_size; })
        .def_property_readonly(
            "preset", [](const PyModel& s) { return preset_name(s.config.pattern.preset); })
        .def_property_readonly(
            "window", [](const PyModel& s) { return s.config.pattern.window; });
}
