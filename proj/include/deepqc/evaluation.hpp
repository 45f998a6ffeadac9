#pragma once

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepqc/csv.hpp"
#include "deepqc/error.hpp"
#include "deepqc/series.hpp"

namespace deepqc {

/// 2x2 agreement counts, positive class = anomaly.
struct ConfusionMatrix {
    std::size_t tn = 0, fp = 0, fn = 0, tp = 0;

    std::size_t total() const { return tn + fp + fn + tp; }
    std::size_t reference_good() const { return tn + fp; }
    std::size_t reference_anomalous() const { return tp + fn; }

    ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
        tn += o.tn;
        fp += o.fp;
        fn += o.fn;
        tp += o.tp;
        return *this;
    }
    friend ConfusionMatrix operator+(ConfusionMatrix a, const ConfusionMatrix& b) { return a += b; }
    friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

    static double pct(std::size_t num, std::size_t den) {
        return den == 0 ? 0.0 : 100.0 * static_cast<double>(num) / static_cast<double>(den);
    }
    // Good readings left unflagged / flagged.
    double correct_class_pct() const { return pct(tn, reference_good()); }
    double correct_misflagged_pct() const { return pct(fp, reference_good()); }
    // Anomalies flagged (recall) / missed.
    double anomaly_class_pct() const { return pct(tp, reference_anomalous()); }
    double anomaly_missed_pct() const { return pct(fn, reference_anomalous()); }
    double overall_pct() const { return pct(tn + tp, total()); }
    double overall_error_pct() const { return pct(fp + fn, total()); }

    double recall() const { return anomaly_class_pct() / 100.0; }
    double precision() const { return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp); }
};

struct ConfusionResult {
    ConfusionMatrix matrix;
    std::size_t excluded = 0;  // samples without a reference label
};

/// Counts agreement between reference labels and predictions. Samples with no
/// reference label are excluded and counted separately.
inline ConfusionResult confusion(std::span<const std::optional<bool>> reference, const std::vector<bool>& predicted) {
    if (reference.size() != predicted.size()) {
        throw std::invalid_argument("confusion: length mismatch (" + std::to_string(reference.size()) + " vs " +
                                    std::to_string(predicted.size()) + ")");
    }
    ConfusionResult out;
    for (std::size_t i = 0; i < reference.size(); ++i) {
        if (!reference[i]) {
            ++out.excluded;
            continue;
        }
        const bool ref = *reference[i], pred = predicted[i];
        if (ref && pred) ++out.matrix.tp;
        else if (ref) ++out.matrix.fn;
        else if (pred) ++out.matrix.fp;
        else ++out.matrix.tn;
    }
    return out;
}

inline ConfusionMatrix confusion(const std::vector<bool>& reference, const std::vector<bool>& predicted) {
    const std::vector<std::optional<bool>> ref(reference.begin(), reference.end());
    return confusion(ref, predicted).matrix;
}

struct SiteReport {
    std::string site_id;
    double depth_cm = 0.0;
    double anomaly_fraction = 0.0;
    ConfusionMatrix matrix;
    std::size_t excluded = 0;

    double correct_flagged_pct() const { return matrix.correct_class_pct(); }
    double anomaly_flagged_pct() const { return matrix.anomaly_class_pct(); }
};

/// Which annotation of the predicted series to score.
enum class PredictionSource { rules, model };

inline const char* source_name(PredictionSource s) { return s == PredictionSource::rules ? "rules" : "model"; }

/// Scores one series. Reference = manual_flag; prediction = any non-G/M code
/// (rules) or the anomaly column (model). Missing readings and readings
/// without a manual flag or without a prediction are excluded.
inline SiteReport score_series(const SensorSeries& reference, const SensorSeries& predicted, PredictionSource source) {
    std::map<Timestamp, const Reading*> by_time;
    for (const Reading& r : predicted.readings) by_time.emplace(r.timestamp, &r);
    SiteReport rep;
    rep.site_id = reference.site_id;
    rep.depth_cm = reference.depth_cm;
    std::size_t labelled = 0, anomalous = 0;
    for (const Reading& ref : reference.readings) {
        if (ref.missing() || !ref.manual_flag) {
            ++rep.excluded;
            continue;
        }
        ++labelled;
        anomalous += *ref.manual_flag ? 1 : 0;
        const auto it = by_time.find(ref.timestamp);
        std::optional<bool> pred;
        if (it != by_time.end()) {
            const Reading& p = *it->second;
            if (source == PredictionSource::rules && p.qflag) pred = p.qflag->is_anomalous();
            if (source == PredictionSource::model && p.predicted) pred = *p.predicted;
        }
        if (!pred) {
            ++rep.excluded;
            continue;
        }
        const bool y = *ref.manual_flag;
        if (y && *pred) ++rep.matrix.tp;
        else if (y) ++rep.matrix.fn;
        else if (*pred) ++rep.matrix.fp;
        else ++rep.matrix.tn;
    }
    rep.anomaly_fraction = labelled ? static_cast<double>(anomalous) / static_cast<double>(labelled) : 0.0;
    return rep;
}

/// Pairs each reference series with the predicted series of the same
/// (site, depth) and scores it; reference series without a partner are an
/// error.
inline std::vector<SiteReport> score_corpus(const std::vector<SensorSeries>& reference,
                                            const std::vector<SensorSeries>& predicted, PredictionSource source) {
    std::map<std::pair<std::string, double>, const SensorSeries*> index;
    for (const auto& s : predicted) index[{s.site_id, s.depth_cm}] = &s;
    std::vector<SiteReport> out;
    for (const auto& ref : reference) {
        const auto it = index.find({ref.site_id, ref.depth_cm});
        if (it == index.end()) {
            throw DataError("no predictions for site " + ref.site_id + " depth " + format_number(ref.depth_cm));
        }
        out.push_back(score_series(ref, *it->second, source));
    }
    return out;
}

inline ConfusionMatrix aggregate(std::span<const SiteReport> reports) {
    ConfusionMatrix m;
    for (const auto& r : reports) m += r.matrix;
    return m;
}

struct Stratified {
    std::vector<SiteReport> low, high;
    ConfusionMatrix low_total, high_total;
};

/// Splits sites by anomaly_fraction > cutoff.
inline Stratified stratify_by_anomaly_fraction(std::span<const SiteReport> reports, double cutoff = 0.30) {
    if (!(cutoff > 0.0 && cutoff < 1.0)) throw std::invalid_argument("stratify: cutoff must be in (0,1)");
    Stratified s;
    for (const auto& r : reports) {
        if (r.anomaly_fraction > cutoff) {
            s.high.push_back(r);
            s.high_total += r.matrix;
        } else {
            s.low.push_back(r);
            s.low_total += r.matrix;
        }
    }
    return s;
}

// ---------------------------------------------------------------------------
// Throughput

struct BenchmarkResult {
    std::string name;
    std::size_t observations = 0;
    double seconds = 0.0;  // median of the timed runs
    double per_second() const { return seconds > 0.0 ? static_cast<double>(observations) / seconds : 0.0; }
};

/// One warm-up run, then the median wall time of `runs` timed runs.
inline BenchmarkResult benchmark(const std::string& name, const std::function<void()>& run, std::size_t observations,
                                 int runs = 3) {
    if (observations == 0) throw std::invalid_argument("benchmark: no observations");
    run();
    std::vector<double> times;
    for (int k = 0; k < runs; ++k) {
        const auto t0 = std::chrono::steady_clock::now();
        run();
        const auto t1 = std::chrono::steady_clock::now();
        times.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    return {name, observations, times[times.size() / 2]};
}

/// Leading series of the corpus truncated so they hold exactly `observations`
/// present readings.
inline std::vector<SensorSeries> take_observations(const std::vector<SensorSeries>& corpus, std::size_t observations) {
    std::vector<SensorSeries> out;
    std::size_t have = 0;
    for (const auto& s : corpus) {
        if (have == observations) break;
        SensorSeries part = s;
        part.readings.clear();
        for (const Reading& r : s.readings) {
            if (have == observations) break;
            part.readings.push_back(r);
            have += r.missing() ? 0 : 1;
        }
        out.push_back(std::move(part));
    }
    if (have < observations) {
        throw DataError("benchmark corpus too small: " + std::to_string(have) + " observations, need " +
                        std::to_string(observations));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reports

inline void write_report_csv(std::ostream& out, const std::vector<std::pair<PredictionSource, std::vector<SiteReport>>>& sets) {
    out << "source,site_id,depth_cm,anomaly_fraction,tn,fp,fn,tp,excluded,correct_flagged_pct,anomaly_flagged_pct,"
           "overall_pct,precision\n";
    auto row = [&](const char* src, const std::string& site, const std::string& depth, const std::string& frac,
                   const ConfusionMatrix& m, std::size_t excluded) {
        char pct[160];
        std::snprintf(pct, sizeof pct, "%.2f,%.2f,%.2f,%.4f", m.correct_class_pct(), m.anomaly_class_pct(),
                      m.overall_pct(), m.precision());
        out << src << ',' << site << ',' << depth << ',' << frac << ',' << m.tn << ',' << m.fp << ',' << m.fn << ','
            << m.tp << ',' << excluded << ',' << pct << '\n';
    };
    for (const auto& [source, reports] : sets) {
        std::size_t excluded = 0;
        for (const auto& r : reports) {
            char frac[32];
            std::snprintf(frac, sizeof frac, "%.4f", r.anomaly_fraction);
            row(source_name(source), r.site_id, format_number(r.depth_cm), frac, r.matrix, r.excluded);
            excluded += r.excluded;
        }
        row(source_name(source), "ALL", "", "", aggregate(reports), excluded);
    }
}

/// Human-readable summary in the layout of a flagging-performance table.
inline void write_report_text(std::ostream& out, const std::string& title, const ConfusionMatrix& m) {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "%s\n"
                  "                      Correct        Anomaly        Total\n"
                  "  Correctly marked    %9zu      %9zu      %9zu\n"
                  "                      %8.2f%%      %8.2f%%      %8.2f%%\n"
                  "  Incorrectly marked  %9zu      %9zu      %9zu\n"
                  "                      %8.2f%%      %8.2f%%      %8.2f%%\n"
                  "  precision %.4f  recall %.4f\n",
                  title.c_str(), m.tn, m.tp, m.tn + m.tp, m.correct_class_pct(), m.anomaly_class_pct(),
                  m.overall_pct(), m.fp, m.fn, m.fp + m.fn, m.correct_misflagged_pct(), m.anomaly_missed_pct(),
                  m.overall_error_pct(), m.precision(), m.recall());
    out << buf;
}

inline void write_stratified_text(std::ostream& out, const std::string& label, const Stratified& s, double cutoff) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s: %zu sites <= %.0f%% anomalies, recall %.4f; %zu sites > %.0f%%, recall %.4f\n",
                  label.c_str(), s.low.size(), 100 * cutoff, s.low_total.recall(), s.high.size(), 100 * cutoff,
                  s.high_total.recall());
    out << buf;
}

/// Per-site chart data: recall of both flaggers against anomaly fraction.
inline void write_plot_csv(std::ostream& out, const std::vector<SiteReport>& rules, const std::vector<SiteReport>& model) {
    out << "site,anomaly_fraction,recall_rule,recall_model\n";
    std::map<std::pair<std::string, double>, const SiteReport*> by_site;
    for (const auto& m : model) by_site[{m.site_id, m.depth_cm}] = &m;
    for (const auto& r : rules) {
        const auto it = by_site.find({r.site_id, r.depth_cm});
        char buf[128];
        std::snprintf(buf, sizeof buf, "%.4f,%.4f,", r.anomaly_fraction, r.matrix.recall());
        out << r.site_id << ',' << buf;
        if (it != by_site.end()) {
            std::snprintf(buf, sizeof buf, "%.4f", it->second->matrix.recall());
            out << buf;
        }
        out << '\n';
    }
}

inline void write_benchmark_text(std::ostream& out, const BenchmarkResult& b) {
    char buf[200];
    std::snprintf(buf, sizeof buf, "benchmark %-6s %zu observations  %.3f s  %.0f obs/s\n", b.name.c_str(),
                  b.observations, b.seconds, b.per_second());
    out << buf;
}

}  // namespace deepqc
