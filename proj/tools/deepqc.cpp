#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "deepqc/deepqc.hpp"

namespace fs = std::filesystem;
using namespace deepqc;

namespace {

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<double> threshold;

    Config load() const {
        Config c = config_path.empty() ? Config{} : load_config(config_path);
        if (seed) {
            c.train.seed = *seed;
            c.synth.seed = *seed;
        }
        if (threshold) c.model.threshold = *threshold;
        c.validate();
        return c;
    }
};

std::vector<WindowSample> to_windows(const std::vector<SensorSeries>& series) {
    std::vector<WindowSample> out;
    for (const auto& s : series) {
        auto w = featurize(s);
        out.insert(out.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
    }
    return out;
}

void require_file(const std::string& path) {
    if (!fs::is_regular_file(path)) throw DataError(path + ": no such file");
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError(dir.string() + ": cannot create directory: " + ec.message());
}

template <typename Fn>
void write_text(const fs::path& path, Fn&& fn) {
    write_file_atomically(path, std::forward<Fn>(fn));
}

// ---------------------------------------------------------------------------

void cmd_synth(const Common& common, const std::string& out_dir) {
    const Config cfg = common.load();
    const auto sites = synthesize(cfg.synth);
    std::vector<SensorSeries> corpus;
    for (const auto& s : sites) corpus.push_back(s.series);
    ensure_dir(out_dir);
    const fs::path dir(out_dir);
    write_csv_file(dir / "corpus.csv", corpus);
    write_text(dir / "truth.csv", [&](std::ostream& o) { write_truth_csv(o, sites); });
    if (corpus.size() >= 3) {
        const SiteSplit split = split_sites(corpus, cfg.split, cfg.synth.seed);
        const CsvColumns cols{};
        write_csv_file(dir / "train.csv", split.train, cols);
        write_csv_file(dir / "val.csv", split.val, cols);
        write_csv_file(dir / "test.csv", split.test, cols);
    }
    std::size_t present = 0, anomalous = 0;
    for (const auto& s : sites) {
        present += s.series.present_count();
        anomalous += s.counts.total();
    }
    std::printf("synth: %zu series, %zu observations, %zu anomalous -> %s\n", sites.size(), present, anomalous,
                out_dir.c_str());
}

void cmd_flag(const Common& common, const std::string& in, const std::string& out) {
    const Config cfg = common.load();
    require_file(in);
    auto corpus = ingest_csv(in);
    std::size_t flagged = 0;
    for (auto& s : corpus) {
        s = run_rules(std::move(s), cfg.rules);
        for (const auto& r : s.readings) flagged += r.qflag->is_anomalous() ? 1 : 0;
    }
    write_csv_file(out, corpus);
    std::printf("flag: %zu series, %zu readings flagged -> %s\n", corpus.size(), flagged, out.c_str());
}

void cmd_train(const Common& common, const std::string& in, const std::string& val_path, const std::string& out,
               std::string history, bool quiet) {
    Config cfg = common.load();
    require_file(in);
    auto corpus = ingest_csv(in);
    std::vector<SensorSeries> train_series, val_series;
    if (!val_path.empty()) {
        require_file(val_path);
        train_series = std::move(corpus);
        val_series = ingest_csv(val_path);
    } else {
        SiteSplit split = split_sites(corpus, cfg.split, cfg.train.seed);
        train_series = std::move(split.train);
        val_series = std::move(split.val);
    }
    std::mt19937_64 rng(cfg.train.seed);
    ModelParams init = ModelParams::random(cfg.model.dims(), rng);
    const auto result = train(std::move(init), to_windows(train_series), to_windows(val_series), cfg.train,
                              [&](const EpochRecord& r) {
                                  if (quiet) return;
                                  std::fprintf(stderr, "epoch %zu train_loss %.6f val_loss %.6f val_accuracy %.5f\n",
                                               r.epoch, r.train_loss, r.val_loss, r.val_accuracy);
                              });
    ModelParams best = result.best;
    best.meta.config_hash = cfg.training_hash();
    save_model(out, best);
    if (history.empty()) history = out + ".history.csv";
    write_text(history, [&](std::ostream& o) { write_history_csv(o, result.history); });
    std::printf("train: %zu epochs, best epoch %zu -> %s\n", result.history.size(), result.best_epoch, out.c_str());
    auto val_windows = to_windows(val_series);
    if (std::any_of(val_windows.begin(), val_windows.end(), [](const WindowSample& w) {
            return w.has_labels() && std::find(w.labels.begin(), w.labels.end(), true) != w.labels.end();
        })) {
        const ThresholdChoice t = calibrate_threshold(best, val_windows);
        std::printf("train: validation F1 %.4f at threshold %.2f (precision %.4f, recall %.4f); pass --threshold to use it\n",
                    t.f1, t.threshold, t.precision, t.recall);
    }
}

void cmd_predict(const Common& common, const std::string& in, const std::string& model_path, const std::string& out) {
    const Config cfg = common.load();
    require_file(in);
    require_file(model_path);
    const ModelParams model = load_model(model_path);
    auto corpus = ingest_csv(in);
    std::size_t flagged = 0;
    for (auto& s : corpus) {
        s = predict_series(model, std::move(s), cfg.model.threshold);
        for (const auto& r : s.readings) flagged += r.predicted.value_or(false) ? 1 : 0;
    }
    write_csv_file(out, corpus);
    std::printf("predict: %zu series, %zu readings flagged -> %s\n", corpus.size(), flagged, out.c_str());
}

void write_reports(const fs::path& dir, const std::vector<std::pair<PredictionSource, std::vector<SiteReport>>>& sets,
                   const std::vector<BenchmarkResult>& benchmarks, double cutoff) {
    ensure_dir(dir);
    write_text(dir / "report.csv", [&](std::ostream& o) { write_report_csv(o, sets); });
    write_text(dir / "report.txt", [&](std::ostream& o) {
        for (const auto& [source, reports] : sets) {
            write_report_text(o, std::string("[") + source_name(source) + "]", aggregate(reports));
            write_stratified_text(o, source_name(source), stratify_by_anomaly_fraction(reports, cutoff), cutoff);
            o << '\n';
        }
        for (const auto& b : benchmarks) write_benchmark_text(o, b);
    });
    const std::vector<SiteReport>* rules = nullptr;
    const std::vector<SiteReport>* model = nullptr;
    for (const auto& [source, reports] : sets) (source == PredictionSource::rules ? rules : model) = &reports;
    if (rules && model) {
        write_text(dir / "sites_plot.csv", [&](std::ostream& o) { write_plot_csv(o, *rules, *model); });
    }
}

void cmd_evaluate(const std::string& reference, const std::string& predicted, const std::string& out, double cutoff) {
    require_file(reference);
    require_file(predicted);
    const auto ref = ingest_csv(reference);
    const auto pred = ingest_csv(predicted);
    const CsvColumns cols = detect_columns(pred);
    if (!cols.qflag && !cols.prediction) throw DataError(predicted + ": no qflag or anomaly column to evaluate");
    std::vector<std::pair<PredictionSource, std::vector<SiteReport>>> sets;
    if (cols.qflag) sets.emplace_back(PredictionSource::rules, score_corpus(ref, pred, PredictionSource::rules));
    if (cols.prediction) sets.emplace_back(PredictionSource::model, score_corpus(ref, pred, PredictionSource::model));
    write_reports(out, sets, {}, cutoff);
    for (const auto& [source, reports] : sets) write_report_text(std::cout, source_name(source), aggregate(reports));
}

void cmd_compare(const Common& common, const std::string& in, const std::string& model_path, const std::string& out,
                 double cutoff, std::size_t bench_obs) {
    const Config cfg = common.load();
    require_file(in);
    require_file(model_path);
    const ModelParams model = load_model(model_path);
    const auto corpus = ingest_csv(in);

    std::vector<SensorSeries> flagged, predicted;
    for (const auto& s : corpus) {
        flagged.push_back(run_rules(s, cfg.rules));
        predicted.push_back(predict_series(model, s, cfg.model.threshold));
    }
    std::vector<std::pair<PredictionSource, std::vector<SiteReport>>> sets{
        {PredictionSource::rules, score_corpus(corpus, flagged, PredictionSource::rules)},
        {PredictionSource::model, score_corpus(corpus, predicted, PredictionSource::model)}};

    std::vector<BenchmarkResult> benchmarks;
    std::size_t available = 0;
    for (const auto& s : corpus) available += s.present_count();
    const std::size_t n = bench_obs == 0 ? 0 : std::min(bench_obs, available);
    if (n > 0) {
        const auto subset = take_observations(corpus, n);
        benchmarks.push_back(benchmark("rules", [&] {
            for (const auto& s : subset) (void)rule_flags(s, cfg.rules);
        }, n));
        benchmarks.push_back(benchmark("model", [&] {
            for (const auto& s : subset) (void)predict_series(model, s, cfg.model.threshold);
        }, n));
    }
    write_reports(out, sets, benchmarks, cutoff);
    for (const auto& [source, reports] : sets) write_report_text(std::cout, source_name(source), aggregate(reports));
    for (const auto& b : benchmarks) write_benchmark_text(std::cout, b);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"deepqc: rule-based and BiLSTM quality control for soil-moisture time series"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "deepqc 0.1.0");

    Common common;
    auto add_config = [&](CLI::App* sub) {
        sub->add_option("--config", common.config_path, "Config file with [rules] [train] [synth] [model] sections")
            ->check(CLI::ExistingFile);
    };
    auto add_seed = [&](CLI::App* sub) {
        sub->add_option("--seed", common.seed, "Random seed (overrides train.seed and synth.seed)");
    };
    auto add_threshold = [&](CLI::App* sub) {
        sub->add_option("--threshold", common.threshold, "Anomaly probability threshold in (0,1) (overrides model.threshold)");
    };

    std::string in, in2, out, model_path, val_path, history;
    bool quiet = false;
    double cutoff = 0.30;
    std::size_t bench_obs = 150000;

    auto* synth = app.add_subcommand("synth", "Generate a labelled synthetic corpus (corpus, truth and split CSVs)");
    add_config(synth);
    add_seed(synth);
    synth->add_option("--out", out, "Output directory")->required();

    auto* flag = app.add_subcommand("flag", "Apply the rule engine and add a qflag column");
    flag->add_option("input", in, "Input CSV")->required();
    add_config(flag);
    flag->add_option("--out", out, "Output CSV")->required();

    auto* trn = app.add_subcommand("train", "Train the DeepQC model");
    trn->add_option("input", in, "Labelled training CSV (split by site into train/val unless --val is given)")->required();
    trn->add_option("--val", val_path, "Labelled validation CSV");
    add_config(trn);
    add_seed(trn);
    trn->add_option("--out", out, "Output model file")->required();
    trn->add_option("--history", history, "Per-epoch history CSV (default: <out>.history.csv)");
    trn->add_flag("--quiet", quiet, "Do not print per-epoch progress");

    auto* pred = app.add_subcommand("predict", "Score readings with a trained model");
    pred->add_option("input", in, "Input CSV")->required();
    pred->add_option("--model", model_path, "Model file")->required();
    add_config(pred);
    add_threshold(pred);
    pred->add_option("--out", out, "Output CSV with probability and anomaly columns")->required();

    auto* eval = app.add_subcommand("evaluate", "Score flagged or predicted CSV against manual flags");
    eval->add_option("reference", in, "Reference CSV with manual_flag")->required();
    eval->add_option("predicted", in2, "CSV with qflag and/or anomaly columns")->required();
    eval->add_option("--cutoff", cutoff, "Anomaly-fraction cutoff for stratification")->check(CLI::Range(0.0, 1.0));
    eval->add_option("--out", out, "Report directory (report.txt, report.csv)")->required();

    auto* cmp = app.add_subcommand("compare", "Run rules and model side by side, with stratification and timing");
    cmp->add_option("input", in, "Labelled CSV")->required();
    cmp->add_option("--model", model_path, "Model file")->required();
    add_config(cmp);
    add_threshold(cmp);
    cmp->add_option("--cutoff", cutoff, "Anomaly-fraction cutoff for stratification")->check(CLI::Range(0.0, 1.0));
    cmp->add_option("--benchmark", bench_obs, "Observations to time each flagger on (0 disables)");
    cmp->add_option("--out", out, "Report directory (report.txt, report.csv, sites_plot.csv)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::fprintf(stderr, "error[usage]: %s\n", e.what());
        return 2;
    }

    try {
        if (*synth) cmd_synth(common, out);
        else if (*flag) cmd_flag(common, in, out);
        else if (*trn) cmd_train(common, in, val_path, out, history, quiet);
        else if (*pred) cmd_predict(common, in, model_path, out);
        else if (*eval) cmd_evaluate(in, in2, out, cutoff);
        else if (*cmp) cmd_compare(common, in, model_path, out, cutoff, bench_obs);
    } catch (const Error& e) {
        std::fprintf(stderr, "error[%s]: %s\n", e.kind_name(), e.what());
        return e.exit_code();
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error[usage]: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error[internal]: %s\n", e.what());
        return 1;
    }
    return 0;
}
