// SPDX-License-Identifier: Apache-2.0
//
// qdst: pattern inspection, training, reranking, evaluation, benchmarking,
// and attention analysis behind one executable. Exit codes: 0 success,
// 2 invalid configuration, 3 data error, 4 numerical failure.
#include <algorithm>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "qdst/analysis.hpp"
#include "qdst/bench.hpp"
#include "qdst/errors.hpp"
#include "qdst/metrics.hpp"
#include "qdst/model.hpp"
#include "qdst/pattern.hpp"
#include "qdst/pipeline.hpp"
#include "qdst/runtime.hpp"
#include "qdst/synthetic.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string now_utc() {
    char stamp[32] = "unknown";
    const std::time_t now = std::time(nullptr);
    if (std::tm tm{}; gmtime_r(&now, &tm) != nullptr) {
        std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", &tm);
    }
    return stamp;
}

struct GlobalOpts {
    std::string config_path;
    std::uint64_t seed = 0;
    std::string out_dir = "out";
    std::size_t threads = 0;
    std::string precision = "f32";
    std::vector<std::string> argv;
    std::string started = now_utc();
};

json load_config_file(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw qdst::Error("cannot open config '" + path + "'");
    try {
        return json::parse(in);
    } catch (const std::exception& e) {
        throw qdst::InvalidInput("config '" + path + "': " + e.what());
    }
}

void write_manifest(const GlobalOpts& g, const std::string& command,
                    const json& resolved_config) {
    json manifest{{"command", command},
                  {"config_path", g.config_path},
                  {"config", resolved_config},
                  {"seed", g.seed},
                  {"out_dir", g.out_dir},
                  {"precision", g.precision},
                  {"argv", g.argv},
                  {"started", g.started},
                  {"finished", now_utc()}};
    std::ofstream out(fs::path(g.out_dir) / "manifest.json");
    if (!out) throw qdst::Error("cannot write manifest in '" + g.out_dir + "'");
    out << manifest.dump(2) << '\n';
}

// ---------------------------------------------------------------- data ----

struct DataPaths {
    std::string queries, corpus, qrels, candidates, vocab, model_file;
};

void merge_data_paths(DataPaths& paths, const json& config) {
    if (!config.contains("data")) return;
    const json& d = config.at("data");
    auto pick = [&](const char* key, std::string& slot) {
        if (slot.empty() && d.contains(key)) slot = d.at(key).get<std::string>();
    };
    pick("queries", paths.queries);
    pick("corpus", paths.corpus);
    pick("qrels", paths.qrels);
    pick("candidates", paths.candidates);
    pick("vocab", paths.vocab);
    pick("model_file", paths.model_file);
}

struct LoadedData {
    qdst::Vocabulary vocab;
    std::vector<qdst::Query> queries;
    qdst::Corpus corpus;
    qdst::Qrels qrels;
    std::map<std::string, std::vector<std::string>> candidates;
    bool synthetic = false;
};

LoadedData load_data(const DataPaths& paths, bool synthetic,
                     const qdst::SyntheticTaskConfig& scfg) {
    LoadedData data;
    if (synthetic) {
        qdst::SyntheticTask task = qdst::make_synthetic_task(scfg);
        data.vocab = std::move(task.vocab);
        data.queries = std::move(task.queries);
        data.corpus = std::move(task.corpus);
        data.qrels = std::move(task.qrels);
        data.candidates = std::move(task.candidates);
        data.synthetic = true;
        return data;
    }
    if (paths.queries.empty() || paths.corpus.empty()) {
        throw qdst::InvalidInput("data: --queries and --corpus are required "
                                 "(or pass --synthetic)");
    }
    const bool build_vocab = paths.vocab.empty();
    if (!build_vocab) data.vocab = qdst::Vocabulary::load(paths.vocab);
    data.queries = qdst::read_queries_tsv(paths.queries, data.vocab, build_vocab);
    data.corpus = qdst::read_corpus(paths.corpus, data.vocab, build_vocab);
    if (!paths.qrels.empty()) data.qrels = qdst::read_qrels(paths.qrels);
    if (!paths.candidates.empty()) {
        data.candidates = qdst::read_candidates_tsv(paths.candidates);
    } else {
        std::vector<std::string> all;
        for (const qdst::Document& d : data.corpus.docs()) all.push_back(d.doc_id);
        for (const qdst::Query& q : data.queries) data.candidates[q.query_id] = all;
    }
    return data;
}

// ------------------------------------------------------------- pattern ----

struct PatternCmd {
    std::size_t n = 64;
    std::string preset = "qds";
    std::size_t window = 128;
    std::size_t query_len = 10;
    std::size_t sentence_len = 25;
    bool asymmetric = false;
};

void run_pattern(const GlobalOpts& g, const PatternCmd& cmd) {
    if (cmd.window == 0 || cmd.window % 2 != 0) {
        throw qdst::InvalidInput("window must be even and positive");
    }
    qdst::PatternConfig pc = qdst::make_pattern_config(qdst::parse_preset(cmd.preset),
                                                       cmd.window);
    pc.asymmetric_globals = cmd.asymmetric;

    std::mt19937_64 rng(g.seed);
    const qdst::SequenceLayout layout =
        qdst::synthetic_layout(cmd.n, cmd.query_len, cmd.sentence_len, 512, rng);
    const qdst::BlockSparsePattern pattern = qdst::build_pattern(layout, pc);
    const qdst::SparsityStats stats = qdst::sparsity(pattern);

    fs::create_directories(g.out_dir);
    json summary{{"n", pattern.n},
                 {"valid_len", pattern.valid_len},
                 {"preset", cmd.preset},
                 {"window", cmd.window},
                 {"asymmetric_globals", cmd.asymmetric},
                 {"full", pattern.full},
                 {"global_rows", pattern.global_rows.size()},
                 {"global_cols", pattern.global_cols.size()},
                 {"nonzeros", stats.nonzeros},
                 {"total", stats.total},
                 {"fraction", stats.fraction},
                 {"query_len", layout.query_len()},
                 {"num_sentences", layout.num_sentences()}};
    {
        std::ofstream out(fs::path(g.out_dir) / "pattern_summary.json");
        if (!out) throw qdst::Error("cannot write pattern_summary.json");
        out << summary.dump(2) << '\n';
    }
    if (cmd.n <= 512) {
        const std::vector<std::uint8_t> mask = qdst::dense_mask(pattern);
        std::ofstream out(fs::path(g.out_dir) / "pattern_mask.csv");
        if (!out) throw qdst::Error("cannot write pattern_mask.csv");
        for (std::size_t i = 0; i < pattern.n; ++i) {
            for (std::size_t j = 0; j < pattern.n; ++j) {
                if (j > 0) out << ',';
                out << static_cast<int>(mask[i * pattern.n + j]);
            }
            out << '\n';
        }
    }
    json resolved{{"pattern", pc}, {"n", cmd.n}};
    write_manifest(g, "pattern", resolved);
    std::cout << "pattern " << cmd.preset << " n=" << cmd.n << " window=" << cmd.window
              << " nonzeros=" << stats.nonzeros << " fraction=" << stats.fraction << '\n';
}

// --------------------------------------------------------------- train ----

struct TrainCmd {
    bool synthetic = false;
    std::size_t steps = 0;       // 0: take TrainConfig default
    std::size_t batch = 0;       // 0: take TrainConfig default
    double lr = -1.0;            // <0: take TrainConfig default
    std::string loss;
    std::string preset;
    std::size_t window = 0;
    std::size_t dim = 0, heads = 0, layers = 0, max_len = 0;
    std::size_t eval_every = 0;  // 0: no periodic evaluation
    double target_mrr = -1.0;    // early stop threshold, <0 disables
    DataPaths paths;
    qdst::SyntheticTaskConfig synth;
};

qdst::ModelConfig resolve_model_config(const json& config, const std::string& preset,
                                       std::size_t window, std::size_t dim,
                                       std::size_t heads, std::size_t layers,
                                       std::size_t max_len) {
    qdst::ModelConfig mc = config.value("model", qdst::ModelConfig{});
    if (!preset.empty() || window != 0) {
        const qdst::Preset p =
            preset.empty() ? mc.pattern.preset : qdst::parse_preset(preset);
        const std::size_t w = window != 0 ? window : mc.pattern.window;
        const bool asym = mc.pattern.asymmetric_globals;
        mc.pattern = qdst::make_pattern_config(p, w);
        mc.pattern.asymmetric_globals = asym;
    }
    if (dim != 0) mc.dim = dim;
    if (heads != 0) mc.num_heads = heads;
    if (layers != 0) mc.num_layers = layers;
    if (max_len != 0) mc.max_len = max_len;
    return mc;
}

template <typename T>
void run_train(const GlobalOpts& g, const TrainCmd& cmd, const json& config) {
    qdst::ModelConfig mc = resolve_model_config(config, cmd.preset, cmd.window, cmd.dim,
                                                cmd.heads, cmd.layers, cmd.max_len);
    qdst::TrainConfig tc = config.value("train", qdst::TrainConfig{});
    if (cmd.steps != 0) tc.max_steps = cmd.steps;
    if (cmd.batch != 0) tc.batch_size = cmd.batch;
    if (cmd.lr >= 0.0) tc.learning_rate = cmd.lr;
    if (!cmd.loss.empty()) tc.loss_kind = qdst::parse_loss_kind(cmd.loss);
    tc.seed = g.seed;
    qdst::validate_config(tc);

    DataPaths paths = cmd.paths;
    merge_data_paths(paths, config);
    qdst::SyntheticTaskConfig scfg = cmd.synth;
    scfg.seed = g.seed;
    LoadedData data = load_data(paths, cmd.synthetic, scfg);
    if (data.qrels.grades.empty()) {
        throw qdst::Error("training requires qrels (judgments are the labels)");
    }
    if (mc.vocab_size < data.vocab.size()) mc.vocab_size = data.vocab.size();
    qdst::validate_config(mc);

    qdst::ModelParams<T> params = qdst::ModelParams<T>::init(mc, g.seed);
    qdst::FitOptions opts;
    opts.eval_every = cmd.eval_every;
    opts.target_mrr = cmd.target_mrr;
    opts.log = &std::cerr;
    const qdst::FitResult fitted = qdst::fit(params, mc, tc, data.queries, data.corpus,
                                             data.qrels, data.candidates, opts);
    const std::vector<double>& losses = fitted.losses;
    const std::size_t steps_to_target = fitted.steps_to_target;
    const double final_mrr = fitted.final_mrr;

    fs::create_directories(g.out_dir);
    qdst::save_params(fs::path(g.out_dir) / "model.qdst", params, mc);
    data.vocab.save(fs::path(g.out_dir) / "vocab.txt");
    if (data.synthetic) save_synthetic_task(fs::path(g.out_dir) / "data", [&] {
        qdst::SyntheticTask t;
        t.vocab = data.vocab;
        t.queries = data.queries;
        // Corpus is move-only through add(); rebuild for saving.
        for (const qdst::Document& d : data.corpus.docs()) t.corpus.add(d);
        t.qrels = data.qrels;
        t.candidates = data.candidates;
        return t;
    }());
    {
        std::ofstream out(fs::path(g.out_dir) / "loss_curve.csv");
        if (!out) throw qdst::Error("cannot write loss_curve.csv");
        out << "step,loss\n";
        out.precision(17);
        for (std::size_t i = 0; i < losses.size(); ++i) {
            out << (i + 1) << ',' << losses[i] << '\n';
        }
    }
    json summary{{"steps_run", losses.size()},
                 {"final_loss", losses.empty() ? 0.0 : losses.back()},
                 {"final_mrr_at_10", final_mrr},
                 {"steps_to_target", steps_to_target == 0 ? json(nullptr)
                                                          : json(steps_to_target)}};
    {
        std::ofstream out(fs::path(g.out_dir) / "train_summary.json");
        if (!out) throw qdst::Error("cannot write train_summary.json");
        out << summary.dump(2) << '\n';
    }
    write_manifest(g, "train", json{{"model", mc}, {"train", tc}});
    std::cout << "trained " << losses.size() << " steps, final loss "
              << (losses.empty() ? 0.0 : losses.back()) << ", mrr@10 " << final_mrr << '\n';
}

// -------------------------------------------------------------- rerank ----

struct RerankCmd {
    DataPaths paths;
    std::string tag = "qdst";
};

template <typename T>
void run_rerank(const GlobalOpts& g, const RerankCmd& cmd, const json& config) {
    DataPaths paths = cmd.paths;
    merge_data_paths(paths, config);
    if (paths.model_file.empty()) {
        throw qdst::InvalidInput("rerank: --model is required");
    }
    if (paths.vocab.empty()) {
        throw qdst::InvalidInput("rerank: --vocab is required (the model's vocabulary)");
    }
    auto [params, mc] = qdst::load_params<T>(paths.model_file);
    qdst::Vocabulary vocab = qdst::Vocabulary::load(paths.vocab);
    std::vector<qdst::Query> queries = qdst::read_queries_tsv(paths.queries, vocab, false);
    qdst::Corpus corpus = qdst::read_corpus(paths.corpus, vocab, false);
    std::map<std::string, std::vector<std::string>> candidates;
    if (!paths.candidates.empty()) {
        candidates = qdst::read_candidates_tsv(paths.candidates);
    } else {
        std::vector<std::string> all;
        for (const qdst::Document& d : corpus.docs()) all.push_back(d.doc_id);
        for (const qdst::Query& q : queries) candidates[q.query_id] = all;
    }

    std::vector<qdst::RunList> runs;
    for (const qdst::Query& q : queries) {
        const auto it = candidates.find(q.query_id);
        if (it == candidates.end()) continue;
        runs.push_back(qdst::rerank(q, it->second, corpus, params, mc));
    }
    fs::create_directories(g.out_dir);
    qdst::write_run(fs::path(g.out_dir) / "run.txt", runs, cmd.tag);
    write_manifest(g, "rerank", json{{"model", mc}});
    std::cout << "reranked " << runs.size() << " queries -> "
              << (fs::path(g.out_dir) / "run.txt").string() << '\n';
}

// ---------------------------------------------------------------- eval ----

struct EvalCmd {
    std::string run_path;
    std::string qrels_path;
    std::vector<std::string> metrics; // e.g. ndcg@10, mrr@10, map, err@20
    std::string gain = "exp";
    int threshold = 1;
};

struct MetricSpec {
    std::string name; // ndcg, mrr, map, err
    std::size_t k = 0;
    std::string label;
};

MetricSpec parse_metric(const std::string& text) {
    MetricSpec spec;
    spec.label = text;
    const auto at = text.find('@');
    spec.name = text.substr(0, at);
    if (spec.name != "ndcg" && spec.name != "mrr" && spec.name != "map" &&
        spec.name != "err") {
        throw qdst::InvalidInput("unknown metric '" + text + "'");
    }
    if (at != std::string::npos) {
        if (spec.name == "map") {
            throw qdst::InvalidInput("map takes no cutoff");
        }
        try {
            spec.k = std::stoul(text.substr(at + 1));
        } catch (const std::exception&) {
            throw qdst::InvalidInput("bad cutoff in metric '" + text + "'");
        }
        if (spec.k == 0) throw qdst::InvalidInput("metric cutoff must be positive");
    } else if (spec.name == "ndcg" || spec.name == "mrr") {
        spec.k = 10;
        spec.label = text + "@10";
    } else if (spec.name == "err") {
        spec.k = 20;
        spec.label = text + "@20";
    }
    return spec;
}

void run_eval(const GlobalOpts& g, const EvalCmd& cmd) {
    std::vector<std::string> requested = cmd.metrics;
    if (requested.empty()) requested = {"ndcg@10", "mrr@10", "map", "err@20"};
    std::vector<MetricSpec> specs;
    for (const std::string& m : requested) specs.push_back(parse_metric(m));
    const qdst::GainKind gain = qdst::parse_gain_kind(cmd.gain);

    const std::vector<qdst::RunList> runs = qdst::read_run(cmd.run_path);
    if (runs.empty()) throw qdst::Error("run '" + cmd.run_path + "' has no entries");
    const qdst::Qrels qrels = qdst::read_qrels(cmd.qrels_path);
    if (qrels.grades.empty()) {
        throw qdst::Error("qrels '" + cmd.qrels_path + "' contains no judgments");
    }

    std::cout.setf(std::ios::fixed);
    std::cout.precision(6);
    fs::create_directories(g.out_dir);
    std::ofstream csv(fs::path(g.out_dir) / "metrics.csv");
    csv << "metric,query_id,value\n";
    csv.setf(std::ios::fixed);
    csv.precision(6);
    std::size_t flagged_ndcg = 0, excluded_map = 0;
    for (const MetricSpec& spec : specs) {
        double sum = 0.0;
        std::size_t count = 0;
        for (const qdst::RunList& run : runs) {
            double value = 0.0;
            bool skip = false;
            if (spec.name == "ndcg") {
                bool flagged = false;
                value = qdst::ndcg_at_k(run, qrels, spec.k, gain, &flagged);
                if (flagged) ++flagged_ndcg;
            } else if (spec.name == "mrr") {
                value = qdst::mrr_at_k(run, qrels, spec.k, cmd.threshold);
            } else if (spec.name == "map") {
                bool excluded = false;
                value = qdst::average_precision(run, qrels, cmd.threshold, &excluded);
                if (excluded) {
                    ++excluded_map;
                    skip = true;
                }
            } else {
                value = qdst::err_at_k(run, qrels, spec.k);
            }
            if (!skip) {
                sum += value;
                ++count;
            }
            std::cout << spec.label << '\t' << run.query_id << '\t' << value << '\n';
            csv << spec.label << ',' << run.query_id << ',' << value << '\n';
        }
        const double mean = count > 0 ? sum / count : 0.0;
        std::cout << spec.label << "\tall\t" << mean << '\n';
        csv << spec.label << ",all," << mean << '\n';
    }
    if (flagged_ndcg > 0) {
        std::cerr << "note: " << flagged_ndcg
                  << " per-metric query evaluations had no relevant document (ndcg 0)\n";
    }
    if (excluded_map > 0) {
        std::cerr << "note: " << excluded_map
                  << " per-metric query evaluations were excluded from map (no "
                     "relevant)\n";
    }
    if (qrels.negative_grades_mapped > 0) {
        std::cerr << "note: " << qrels.negative_grades_mapped
                  << " negative grades in qrels mapped to 0\n";
    }
    write_manifest(g, "eval",
                   json{{"run", cmd.run_path},
                        {"qrels", cmd.qrels_path},
                        {"metrics", requested},
                        {"gain", cmd.gain},
                        {"threshold", cmd.threshold}});
}

// --------------------------------------------------------------- bench ----

struct BenchCmd {
    std::vector<std::string> presets;
    std::vector<std::size_t> lengths;
    std::vector<std::size_t> windows;
    std::size_t dim = 0, heads = 0, layers = 0, reps = 0, warmup = 9999;
    std::size_t query_len = 0, sentence_len = 0;
};

void run_bench_cmd(const GlobalOpts& g, const BenchCmd& cmd, const json& config) {
    qdst::BenchSpec spec;
    if (config.contains("bench")) {
        const json& b = config.at("bench");
        if (b.contains("presets")) {
            spec.presets.clear();
            for (const auto& p : b.at("presets")) {
                spec.presets.push_back(qdst::parse_preset(p.get<std::string>()));
            }
        }
        spec.lengths = b.value("lengths", spec.lengths);
        spec.windows = b.value("windows", spec.windows);
        spec.dim = b.value("dim", spec.dim);
        spec.heads = b.value("heads", spec.heads);
        spec.layers = b.value("layers", spec.layers);
        spec.repetitions = b.value("repetitions", spec.repetitions);
        spec.warmup = b.value("warmup", spec.warmup);
        spec.query_len = b.value("query_len", spec.query_len);
        spec.sentence_len = b.value("sentence_len", spec.sentence_len);
    }
    if (!cmd.presets.empty()) {
        spec.presets.clear();
        for (const std::string& p : cmd.presets) spec.presets.push_back(qdst::parse_preset(p));
    }
    if (!cmd.lengths.empty()) spec.lengths = cmd.lengths;
    if (!cmd.windows.empty()) spec.windows = cmd.windows;
    if (cmd.dim != 0) spec.dim = cmd.dim;
    if (cmd.heads != 0) spec.heads = cmd.heads;
    if (cmd.layers != 0) spec.layers = cmd.layers;
    if (cmd.reps != 0) spec.repetitions = cmd.reps;
    if (cmd.warmup != 9999) spec.warmup = cmd.warmup;
    if (cmd.query_len != 0) spec.query_len = cmd.query_len;
    if (cmd.sentence_len != 0) spec.sentence_len = cmd.sentence_len;
    spec.seed = g.seed;
    qdst::validate_spec(spec);

    fs::create_directories(g.out_dir);
    const std::vector<qdst::BenchRecord> records =
        qdst::run_bench(spec, [](const qdst::BenchRecord& r) {
            std::cerr << "bench " << qdst::preset_name(r.preset) << " n=" << r.length
                      << " w=" << r.window;
            if (r.failed) {
                std::cerr << " FAILED: " << r.error << '\n';
            } else {
                std::cerr << " infer=" << r.infer_mean_ms << "ms train=" << r.train_mean_ms
                          << "ms\n";
            }
        });
    qdst::write_bench_csv(fs::path(g.out_dir) / "bench.csv", records);
    qdst::write_bench_metadata(fs::path(g.out_dir) / "bench_meta.json", spec);
    for (const qdst::Preset p : spec.presets) {
        try {
            const double infer = qdst::scaling_exponent(records, p, /*train_time=*/false);
            const double train = qdst::scaling_exponent(records, p, /*train_time=*/true);
            std::cout << "scaling_exponent " << qdst::preset_name(p) << " infer=" << infer
                      << " train=" << train << '\n';
        } catch (const qdst::InvalidInput&) {
            // Not enough lengths for a fit; the CSV still has the cells.
        }
    }
    json preset_names = json::array();
    for (const qdst::Preset p : spec.presets) preset_names.push_back(qdst::preset_name(p));
    write_manifest(g, "bench",
                   json{{"bench",
                         {{"presets", preset_names},
                          {"lengths", spec.lengths},
                          {"windows", spec.windows},
                          {"dim", spec.dim},
                          {"heads", spec.heads},
                          {"layers", spec.layers},
                          {"repetitions", spec.repetitions},
                          {"warmup", spec.warmup},
                          {"query_len", spec.query_len},
                          {"sentence_len", spec.sentence_len}}}});
    std::cout << "bench wrote " << records.size() << " cells to "
              << (fs::path(g.out_dir) / "bench.csv").string() << '\n';
}

// ------------------------------------------------------------- analyze ----

struct AnalyzeCmd {
    bool synthetic = false;
    std::string preset;
    std::size_t window = 0;
    std::size_t dim = 0, heads = 0, layers = 0, max_len = 0;
    long layer = -1; // -1: last layer
    std::string source = "cls";
    bool per_head = false;
    std::size_t top_k = 3;
    std::size_t max_pairs = 50;
    DataPaths paths;
    qdst::SyntheticTaskConfig synth;
};

template <typename T>
void run_analyze(const GlobalOpts& g, const AnalyzeCmd& cmd, const json& config) {
    DataPaths paths = cmd.paths;
    merge_data_paths(paths, config);

    qdst::ModelParams<T> params;
    qdst::ModelConfig mc;
    qdst::SyntheticTaskConfig scfg = cmd.synth;
    scfg.seed = g.seed;
    LoadedData data = load_data(paths, cmd.synthetic, scfg);

    if (!paths.model_file.empty()) {
        std::tie(params, mc) = qdst::load_params<T>(paths.model_file);
    } else {
        mc = resolve_model_config(config, cmd.preset, cmd.window, cmd.dim, cmd.heads,
                                  cmd.layers, cmd.max_len);
        if (mc.vocab_size < data.vocab.size()) mc.vocab_size = data.vocab.size();
        qdst::validate_config(mc);
        params = qdst::ModelParams<T>::init(mc, g.seed); // untrained is fine
    }
    const std::size_t layer =
        cmd.layer < 0 ? mc.num_layers - 1 : static_cast<std::size_t>(cmd.layer);
    if (mc.num_layers == 0 || layer >= mc.num_layers) {
        throw qdst::InvalidInput("analyze: layer " + std::to_string(cmd.layer) +
                                 " out of range for a " + std::to_string(mc.num_layers) +
                                 "-layer model");
    }
    if (cmd.source != "cls" && cmd.source != "query") {
        throw qdst::InvalidInput("analyze: --source must be cls or query");
    }

    std::vector<qdst::TracedEncoding<T>> traced;
    std::vector<qdst::TopSentenceRow> top_rows;
    std::size_t pairs_done = 0;
    for (const qdst::Query& q : data.queries) {
        if (pairs_done >= cmd.max_pairs) break;
        const auto it = data.candidates.find(q.query_id);
        if (it == data.candidates.end()) continue;
        for (const std::string& docid : it->second) {
            if (pairs_done >= cmd.max_pairs) break;
            const qdst::Document& doc = data.corpus.at(docid);
            qdst::TracedEncoding<T> enc;
            enc.layout = qdst::build_layout(q.tokens, doc.sentences, mc.max_len);
            auto [s, traces] = qdst::score_with_trace(enc.layout, params, mc);
            (void)s;
            enc.traces = std::move(traces);

            const std::size_t source_pos =
                cmd.source == "cls" ? 0 : enc.layout.query_begin;
            try {
                const auto tops = qdst::top_attended_sentences<T>(
                    enc.traces, enc.layout, source_pos, layer, cmd.per_head, cmd.top_k);
                for (const qdst::SentenceAttention& t : tops) {
                    std::string text;
                    if (t.sentence_index < doc.sentence_texts.size()) {
                        text = doc.sentence_texts[t.sentence_index];
                    }
                    top_rows.push_back({q.query_id, docid, t.head, t.sentence_index,
                                        t.weight, text});
                }
            } catch (const qdst::EmptyResult&) {
                // Document truncated to zero sentences; profiles still count it.
            }
            traced.push_back(std::move(enc));
            ++pairs_done;
        }
    }
    if (traced.empty()) throw qdst::Error("analyze: no (query, document) pairs");

    const qdst::LayerRoleProfile max_profile =
        qdst::role_max_attention(std::span<const qdst::TracedEncoding<T>>(traced));
    const qdst::LayerRoleProfile entropy_profile =
        qdst::role_entropy(std::span<const qdst::TracedEncoding<T>>(traced));

    fs::create_directories(g.out_dir);
    qdst::write_role_profile_csv(fs::path(g.out_dir) / "role_max.csv", max_profile);
    qdst::write_role_profile_csv(fs::path(g.out_dir) / "entropy.csv", entropy_profile);
    qdst::write_top_sentences_csv(fs::path(g.out_dir) / "top_sentences.csv", top_rows);
    write_manifest(g, "analyze",
                   json{{"model", mc},
                        {"layer", layer},
                        {"source", cmd.source},
                        {"per_head", cmd.per_head},
                        {"top_k", cmd.top_k},
                        {"pairs", traced.size()}});
    std::cout << "analyzed " << traced.size() << " pairs over " << mc.num_layers
              << " layers\n";
}

// ----------------------------------------------------------------- main ---

int dispatch(int argc, char** argv) {
    CLI::App app{"query-directed sparse transformer toolkit"};
    app.require_subcommand(1);
    app.fallthrough(); // global flags may follow the subcommand name

    GlobalOpts g;
    for (int i = 0; i < argc; ++i) g.argv.emplace_back(argv[i]);
    app.add_option("--config", g.config_path, "JSON config file");
    app.add_option("--seed", g.seed, "random seed");
    app.add_option("--out", g.out_dir, "output directory");
    app.add_option("--threads", g.threads, "worker threads (QDST_THREADS by default)");
    app.add_option("--precision", g.precision, "f32 or f64")
        ->check(CLI::IsMember({"f32", "f64"}));

    PatternCmd pat;
    auto* pattern_cmd = app.add_subcommand("pattern", "dump a sparse attention pattern");
    pattern_cmd->add_option("--n", pat.n, "sequence length");
    pattern_cmd->add_option("--preset", pat.preset, "pattern preset");
    pattern_cmd->add_option("--window", pat.window, "local window size");
    pattern_cmd->add_option("--query-len", pat.query_len, "synthetic query length");
    pattern_cmd->add_option("--sentence-len", pat.sentence_len, "synthetic sentence length");
    pattern_cmd->add_flag("--asymmetric", pat.asymmetric, "one-directional globals");

    TrainCmd tr;
    auto* train_cmd = app.add_subcommand("train", "train a ranker");
    train_cmd->add_flag("--synthetic", tr.synthetic, "generate the planted-relevance task");
    train_cmd->add_option("--steps", tr.steps, "optimizer steps");
    train_cmd->add_option("--batch", tr.batch, "batch size");
    train_cmd->add_option("--lr", tr.lr, "learning rate");
    train_cmd->add_option("--loss", tr.loss, "pointwise_bce or pairwise_softmax");
    train_cmd->add_option("--preset", tr.preset, "pattern preset");
    train_cmd->add_option("--window", tr.window, "local window size");
    train_cmd->add_option("--dim", tr.dim, "model width");
    train_cmd->add_option("--heads", tr.heads, "attention heads");
    train_cmd->add_option("--layers", tr.layers, "transformer layers");
    train_cmd->add_option("--max-len", tr.max_len, "maximum sequence length");
    train_cmd->add_option("--eval-every", tr.eval_every, "steps between MRR probes");
    train_cmd->add_option("--target-mrr", tr.target_mrr, "stop once MRR@10 reaches this");
    train_cmd->add_option("--queries", tr.paths.queries, "queries TSV");
    train_cmd->add_option("--corpus", tr.paths.corpus, "corpus TSV/JSONL");
    train_cmd->add_option("--qrels", tr.paths.qrels, "qrels file");
    train_cmd->add_option("--candidates", tr.paths.candidates, "candidates TSV");
    train_cmd->add_option("--vocab", tr.paths.vocab, "frozen vocabulary");
    train_cmd->add_option("--num-queries", tr.synth.num_queries, "synthetic queries");
    train_cmd->add_option("--candidates-per-query", tr.synth.candidates_per_query,
                          "synthetic candidate count");
    train_cmd->add_option("--synth-query-len", tr.synth.query_len,
                          "synthetic query length (phrase plus fillers)");
    train_cmd->add_option("--synth-sentence-len", tr.synth.sentence_len,
                          "synthetic sentence length");
    train_cmd->add_option("--synth-sentences", tr.synth.sentences_per_doc,
                          "synthetic sentences per document");
    train_cmd->add_option("--synth-filler-vocab", tr.synth.filler_vocab,
                          "synthetic filler vocabulary size");

    RerankCmd rr;
    auto* rerank_cmd = app.add_subcommand("rerank", "score and rank candidates");
    rerank_cmd->add_option("--model", rr.paths.model_file, "model file");
    rerank_cmd->add_option("--vocab", rr.paths.vocab, "vocabulary file");
    rerank_cmd->add_option("--queries", rr.paths.queries, "queries TSV");
    rerank_cmd->add_option("--corpus", rr.paths.corpus, "corpus TSV/JSONL");
    rerank_cmd->add_option("--candidates", rr.paths.candidates, "candidates TSV");
    rerank_cmd->add_option("--tag", rr.tag, "run tag");

    EvalCmd ev;
    auto* eval_cmd = app.add_subcommand("eval", "score a run against qrels");
    eval_cmd->add_option("run", ev.run_path, "TREC run file")->required();
    eval_cmd->add_option("qrels", ev.qrels_path, "TREC qrels file")->required();
    eval_cmd->add_option("--metric", ev.metrics, "ndcg@K, mrr@K, map, err@K")
        ->delimiter(',');
    eval_cmd->add_option("--gain", ev.gain, "exp or linear")
        ->check(CLI::IsMember({"exp", "linear"}));
    eval_cmd->add_option("--threshold", ev.threshold, "relevance threshold");

    BenchCmd be;
    auto* bench_cmd = app.add_subcommand("bench", "time kernels across presets");
    bench_cmd->add_option("--presets", be.presets, "preset list")->delimiter(',');
    bench_cmd->add_option("--lengths", be.lengths, "sequence lengths")->delimiter(',');
    bench_cmd->add_option("--windows", be.windows, "window sizes")->delimiter(',');
    bench_cmd->add_option("--dim", be.dim, "model width");
    bench_cmd->add_option("--heads", be.heads, "attention heads");
    bench_cmd->add_option("--layers", be.layers, "transformer layers");
    bench_cmd->add_option("--reps", be.reps, "timed repetitions");
    bench_cmd->add_option("--warmup", be.warmup, "warmup repetitions");
    bench_cmd->add_option("--query-len", be.query_len, "synthetic query length");
    bench_cmd->add_option("--sentence-len", be.sentence_len, "synthetic sentence length");

    AnalyzeCmd an;
    auto* analyze_cmd = app.add_subcommand("analyze", "attention diagnostics");
    analyze_cmd->add_flag("--synthetic", an.synthetic, "generate the synthetic task");
    analyze_cmd->add_option("--model", an.paths.model_file, "model file (random if absent)");
    analyze_cmd->add_option("--vocab", an.paths.vocab, "vocabulary file");
    analyze_cmd->add_option("--queries", an.paths.queries, "queries TSV");
    analyze_cmd->add_option("--corpus", an.paths.corpus, "corpus TSV/JSONL");
    analyze_cmd->add_option("--candidates", an.paths.candidates, "candidates TSV");
    analyze_cmd->add_option("--preset", an.preset, "pattern preset");
    analyze_cmd->add_option("--window", an.window, "local window size");
    analyze_cmd->add_option("--dim", an.dim, "model width");
    analyze_cmd->add_option("--heads", an.heads, "attention heads");
    analyze_cmd->add_option("--layers", an.layers, "transformer layers");
    analyze_cmd->add_option("--max-len", an.max_len, "maximum sequence length");
    analyze_cmd->add_option("--layer", an.layer, "layer to inspect (default: last)");
    analyze_cmd->add_option("--source", an.source, "cls or query");
    analyze_cmd->add_flag("--per-head", an.per_head, "report every head");
    analyze_cmd->add_option("--top-k", an.top_k, "sentences per report");
    analyze_cmd->add_option("--max-pairs", an.max_pairs, "query-document pair budget");
    analyze_cmd->add_option("--num-queries", an.synth.num_queries, "synthetic queries");
    analyze_cmd->add_option("--candidates-per-query", an.synth.candidates_per_query,
                            "synthetic candidate count");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help
        app.exit(e);
        return 2;
    }

    if (g.threads > 0) qdst::set_num_threads(g.threads);

    try {
        const json config = load_config_file(g.config_path);
        if (config.contains("seed") && g.seed == 0) {
            g.seed = config.at("seed").get<std::uint64_t>();
        }
        const bool f64 = g.precision == "f64";
        if (pattern_cmd->parsed()) {
            run_pattern(g, pat);
        } else if (train_cmd->parsed()) {
            f64 ? run_train<double>(g, tr, config) : run_train<float>(g, tr, config);
        } else if (rerank_cmd->parsed()) {
            f64 ? run_rerank<double>(g, rr, config) : run_rerank<float>(g, rr, config);
        } else if (eval_cmd->parsed()) {
            run_eval(g, ev);
        } else if (bench_cmd->parsed()) {
            run_bench_cmd(g, be, config);
        } else if (analyze_cmd->parsed()) {
            f64 ? run_analyze<double>(g, an, config) : run_analyze<float>(g, an, config);
        }
        return 0;
    } catch (const qdst::InvalidInput& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const qdst::InvalidState& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const qdst::NumericalError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 4;
    } catch (const qdst::InternalInvariantViolation& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return 4;
    } catch (const qdst::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}

} // namespace

int main(int argc, char** argv) { return dispatch(argc, argv); }
