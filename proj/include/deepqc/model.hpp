#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepqc/error.hpp"
#include "deepqc/lstm.hpp"
#include "deepqc/series.hpp"
#include "deepqc/tape.hpp"
#include "deepqc/tensor.hpp"

namespace deepqc {

/// Geophysical ceiling used to normalise soil moisture inputs.
inline constexpr double kMoistureScale = 0.6;
inline constexpr std::size_t kValueFeatures = 2;    // normalised value, missing indicator
inline constexpr std::size_t kContextFeatures = 3;  // depth/100, sin(doy), cos(doy)

/// One UTC day of one sensor: the model's unit of input.
struct WindowSample {
    std::string site_id;
    double depth_cm = 0.0;
    Timestamp day_start{};
    int day_of_year = 1;
    std::vector<double> values;   // m3/m3, 0 where missing
    std::vector<bool> missing;
    std::vector<bool> labels;     // empty when unlabelled
    double weight = 1.0;

    bool has_labels() const { return !labels.empty(); }
    bool has_anomaly() const { return std::find(labels.begin(), labels.end(), true) != labels.end(); }
};

inline std::array<double, kContextFeatures> context_features(double depth_cm, int day_of_year) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(day_of_year) / 366.0;
    return {depth_cm / 100.0, std::sin(angle), std::cos(angle)};
}

/// Splits a gap-materialised series into calendar-day windows of 96 steps.
/// Days without any present value are skipped; steps outside the series'
/// span count as missing. Labels are attached when every present reading of
/// the day carries a manual flag.
inline std::vector<WindowSample> featurize(const SensorSeries& series) {
    std::vector<WindowSample> out;
    std::size_t i = 0;
    const auto& rs = series.readings;
    while (i < rs.size()) {
        const Timestamp day = std::chrono::floor<std::chrono::days>(rs[i].timestamp);
        WindowSample w;
        w.site_id = series.site_id;
        w.depth_cm = series.depth_cm;
        w.day_start = day;
        w.day_of_year = day_of_year(day);
        w.values.assign(kStepsPerDay, 0.0);
        w.missing.assign(kStepsPerDay, true);
        std::vector<bool> labels(kStepsPerDay, false);
        bool any_present = false, labelled = true;
        for (; i < rs.size() && rs[i].timestamp < day + std::chrono::days{1}; ++i) {
            const auto slot = static_cast<std::size_t>((rs[i].timestamp - day) / kStep);
            if (rs[i].value) {
                w.values[slot] = *rs[i].value;
                w.missing[slot] = false;
                any_present = true;
                if (rs[i].manual_flag) {
                    labels[slot] = *rs[i].manual_flag;
                } else {
                    labelled = false;
                }
            }
        }
        if (!any_present) continue;
        if (labelled) w.labels = std::move(labels);
        out.push_back(std::move(w));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Parameters

struct LinearParams {
    Tensor weight;  // out x in
    Tensor bias;    // out

    static LinearParams zeros(std::size_t in, std::size_t out) {
        return {Tensor::matrix(out, in), Tensor::vector(out)};
    }
    friend bool operator==(const LinearParams&, const LinearParams&) = default;
};

struct ModelDims {
    std::size_t value_features = kValueFeatures;
    std::size_t context_features = kContextFeatures;
    std::size_t embed = 32;
    std::size_t hidden = 64;

    friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

struct ModelMeta {
    std::uint64_t seed = 0;
    std::size_t epochs = 0;
    std::size_t best_epoch = 0;
    std::string config_hash;

    friend bool operator==(const ModelMeta&, const ModelMeta&) = default;
};

/// Full DeepQC network: two embeddings summed into one space, a BiLSTM and a
/// per-step sigmoid head.
struct ModelParams {
    ModelDims dims;
    LinearParams embed_value;
    LinearParams embed_context;
    LstmCellParams forward_cell;
    LstmCellParams backward_cell;
    LinearParams head;
    ModelMeta meta;

    static ModelParams zeros(const ModelDims& d) {
        ModelParams p;
        p.dims = d;
        p.embed_value = LinearParams::zeros(d.value_features, d.embed);
        p.embed_context = LinearParams::zeros(d.context_features, d.embed);
        p.forward_cell = LstmCellParams::zeros(d.embed, d.hidden);
        p.backward_cell = LstmCellParams::zeros(d.embed, d.hidden);
        p.head = LinearParams::zeros(2 * d.hidden, 1);
        return p;
    }

    template <typename Rng>
    static ModelParams random(const ModelDims& d, Rng& rng) {
        ModelParams p = zeros(d);
        auto init_linear = [&](LinearParams& l) {
            init_uniform(l.weight, l.weight.cols(), rng);
            init_uniform(l.bias, l.weight.cols(), rng);
        };
        init_linear(p.embed_value);
        init_linear(p.embed_context);
        p.forward_cell = init_lstm(d.embed, d.hidden, rng);
        p.backward_cell = init_lstm(d.embed, d.hidden, rng);
        init_linear(p.head);
        return p;
    }

    /// Calls fn(name, tensor) for every weight array in serialisation order.
    template <typename Self, typename Fn>
    static void visit(Self& self, Fn&& fn) {
        fn(std::string("embed_value.weight"), self.embed_value.weight);
        fn(std::string("embed_value.bias"), self.embed_value.bias);
        fn(std::string("embed_context.weight"), self.embed_context.weight);
        fn(std::string("embed_context.bias"), self.embed_context.bias);
        LstmCellParams::visit(self.forward_cell, "lstm_forward", fn);
        LstmCellParams::visit(self.backward_cell, "lstm_backward", fn);
        fn(std::string("head.weight"), self.head.weight);
        fn(std::string("head.bias"), self.head.bias);
    }

    std::vector<Tensor*> tensors() {
        std::vector<Tensor*> out;
        visit(*this, [&](const std::string&, Tensor& t) { out.push_back(&t); });
        return out;
    }
    std::vector<const Tensor*> tensors() const {
        std::vector<const Tensor*> out;
        visit(*this, [&](const std::string&, const Tensor& t) { out.push_back(&t); });
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const Tensor* t : tensors()) n += t->size();
        return n;
    }

    void validate() const {
        const ModelParams shape = zeros(dims);
        const auto mine = tensors();
        const auto want = shape.tensors();
        for (std::size_t k = 0; k < mine.size(); ++k) {
            if (mine[k]->shape() != want[k]->shape()) {
                throw std::invalid_argument("model params: tensor " + std::to_string(k) + " has shape " +
                                            Tensor::shape_string(mine[k]->shape()) + ", expected " +
                                            Tensor::shape_string(want[k]->shape()));
            }
        }
    }

    friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

// ---------------------------------------------------------------------------
// Batched sequences

/// B sequences of equal length T laid out per step, ready for the network.
struct SequenceBatch {
    std::vector<Tensor> steps;  // T tensors of [B x value_features]
    Tensor context;             // [B x context_features]
    std::vector<std::vector<double>> targets;  // [T][B], empty when unlabelled
    std::vector<double> weights;               // [B]

    std::size_t batch() const { return context.rows(); }
    std::size_t length() const { return steps.size(); }
};

inline SequenceBatch make_batch(std::span<const WindowSample* const> samples) {
    if (samples.empty()) throw std::invalid_argument("make_batch: empty batch");
    const std::size_t batch = samples.size(), length = samples.front()->values.size();
    SequenceBatch b;
    b.steps.assign(length, Tensor::matrix(batch, kValueFeatures));
    b.context = Tensor::matrix(batch, kContextFeatures);
    const bool labelled = std::all_of(samples.begin(), samples.end(), [](auto* s) { return s->has_labels(); });
    if (labelled) b.targets.assign(length, std::vector<double>(batch, 0.0));
    b.weights.resize(batch);
    for (std::size_t r = 0; r < batch; ++r) {
        const WindowSample& s = *samples[r];
        if (s.values.size() != length || s.missing.size() != length) {
            throw std::invalid_argument("make_batch: windows differ in length");
        }
        for (std::size_t t = 0; t < length; ++t) {
            b.steps[t](r, 0) = s.missing[t] ? 0.0 : s.values[t] / kMoistureScale;
            b.steps[t](r, 1) = s.missing[t] ? 1.0 : 0.0;
            if (labelled) b.targets[t][r] = s.labels[t] ? 1.0 : 0.0;
        }
        const auto ctx = context_features(s.depth_cm, s.day_of_year);
        for (std::size_t k = 0; k < kContextFeatures; ++k) b.context(r, k) = ctx[k];
        b.weights[r] = s.weight;
    }
    return b;
}

namespace detail {

// Step features stacked time-major: row t*B + r.
inline Tensor stack_steps(const SequenceBatch& b) {
    const std::size_t batch = b.batch();
    Tensor out = Tensor::matrix(b.length() * batch, kValueFeatures);
    for (std::size_t t = 0; t < b.length(); ++t) {
        std::copy_n(b.steps[t].data(), batch * kValueFeatures, out.data() + t * batch * kValueFeatures);
    }
    return out;
}

// Context rows repeated once per step, aligned with stack_steps.
inline Tensor tile_context(const SequenceBatch& b) {
    const std::size_t n = b.batch() * kContextFeatures;
    Tensor out = Tensor::matrix(b.length() * b.batch(), kContextFeatures);
    for (std::size_t t = 0; t < b.length(); ++t) std::copy_n(b.context.data(), n, out.data() + t * n);
    return out;
}

}  // namespace detail

/// Per-step anomaly probabilities, [T][B]. Outputs are kept strictly inside
/// (0, 1) even when the sigmoid saturates.
inline std::vector<std::vector<double>> forward(const ModelParams& p, const SequenceBatch& batch) {
    const Tensor x = add(linear(detail::stack_steps(batch), p.embed_value.weight, p.embed_value.bias),
                         linear(detail::tile_context(batch), p.embed_context.weight, p.embed_context.bias));
    const Tensor hs = bilstm_sequence(p.forward_cell, p.backward_cell, x, batch.length());
    const Tensor prob = sigmoid(linear(hs, p.head.weight, p.head.bias));
    constexpr double lo = std::numeric_limits<double>::min();
    const double hi = std::nextafter(1.0, 0.0);
    const std::size_t rows = batch.batch();
    std::vector<std::vector<double>> probs(batch.length(), std::vector<double>(rows));
    for (std::size_t t = 0; t < batch.length(); ++t) {
        for (std::size_t r = 0; r < rows; ++r) {
            const double v = prob[t * rows + r];
            if (!std::isfinite(v)) throw NumericError("forward: non-finite activation");
            probs[t][r] = std::clamp(v, lo, hi);
        }
    }
    return probs;
}

/// Probabilities for a single window.
inline std::vector<double> forward(const ModelParams& p, const WindowSample& sample) {
    const WindowSample* one[] = {&sample};
    const auto probs = forward(p, make_batch(one));
    std::vector<double> out(probs.size());
    for (std::size_t t = 0; t < probs.size(); ++t) out[t] = probs[t][0];
    return out;
}

/// Anomaly iff probability >= threshold.
inline std::vector<bool> classify(std::span<const double> probabilities, double threshold = 0.5) {
    if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("classify: threshold must be in (0,1)");
    std::vector<bool> out(probabilities.size());
    for (std::size_t i = 0; i < probabilities.size(); ++i) out[i] = probabilities[i] >= threshold;
    return out;
}

/// Scores every present reading of a gap-materialised series: sets
/// `probability` and `predicted` (probability >= threshold). Missing readings
/// are left unannotated.
inline SensorSeries predict_series(const ModelParams& p, SensorSeries series, double threshold = 0.5,
                                   std::size_t batch_size = 64) {
    if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("predict: threshold must be in (0,1)");
    const std::vector<WindowSample> windows = featurize(series);
    std::map<Timestamp, std::size_t> index;
    for (std::size_t i = 0; i < series.readings.size(); ++i) index.emplace(series.readings[i].timestamp, i);
    std::vector<const WindowSample*> chunk;
    for (std::size_t start = 0; start < windows.size(); start += batch_size) {
        chunk.clear();
        for (std::size_t k = start; k < std::min(windows.size(), start + batch_size); ++k) chunk.push_back(&windows[k]);
        const auto probs = forward(p, make_batch(chunk));
        for (std::size_t r = 0; r < chunk.size(); ++r) {
            for (std::size_t t = 0; t < kStepsPerDay; ++t) {
                if (chunk[r]->missing[t]) continue;
                const auto it = index.find(chunk[r]->day_start + static_cast<std::int64_t>(t) * kStep);
                Reading& reading = series.readings[it->second];
                reading.probability = probs[t][r];
                reading.predicted = probs[t][r] >= threshold;
            }
        }
    }
    return series;
}

// ---------------------------------------------------------------------------
// Recorded forward for training

/// Tape handles for every model tensor, in ModelParams::visit order.
struct ModelVars {
    std::vector<Var> all;
    Var ev_w, ev_b, ec_w, ec_b, head_w, head_b;
    LstmCellVars fwd, bwd;

    static ModelVars on(Tape& tape, const ModelParams& p) {
        ModelVars v;
        v.ev_w = tape.parameter(p.embed_value.weight);
        v.ev_b = tape.parameter(p.embed_value.bias);
        v.ec_w = tape.parameter(p.embed_context.weight);
        v.ec_b = tape.parameter(p.embed_context.bias);
        v.fwd = LstmCellVars::on(tape, p.forward_cell);
        v.bwd = LstmCellVars::on(tape, p.backward_cell);
        v.head_w = tape.parameter(p.head.weight);
        v.head_b = tape.parameter(p.head.bias);
        v.all = {v.ev_w, v.ev_b, v.ec_w, v.ec_b};
        for (const LstmCellVars* c : {&v.fwd, &v.bwd}) {
            for (auto* group : {&c->wx, &c->wh, &c->bx, &c->bh}) v.all.insert(v.all.end(), group->begin(), group->end());
        }
        v.all.push_back(v.head_w);
        v.all.push_back(v.head_b);
        return v;
    }
};

/// Records the weighted-mean BCE of a labelled batch:
///   sum_b w_b * mean_t BCE(p_bt, y_bt) / sum_b w_b
inline Var record_loss(Tape& tape, const ModelVars& v, const SequenceBatch& batch) {
    if (batch.targets.size() != batch.length()) throw std::invalid_argument("record_loss: batch is unlabelled");
    const std::size_t steps = batch.length(), rows = batch.batch();
    const Var xs = tape.input(detail::stack_steps(batch), false);
    const Var ctx = tape.input(detail::tile_context(batch), false);
    const Var x = tape.add(tape.linear(xs, v.ev_w, v.ev_b), tape.linear(ctx, v.ec_w, v.ec_b));
    const Var hs = bilstm_sequence(tape, v.fwd, v.bwd, x, steps);
    const Var prob = tape.sigmoid(tape.linear(hs, v.head_w, v.head_b));

    double weight_sum = 0.0;
    for (double w : batch.weights) weight_sum += w;
    std::vector<double> targets(steps * rows), scales(steps * rows);
    for (std::size_t t = 0; t < steps; ++t) {
        for (std::size_t r = 0; r < rows; ++r) {
            targets[t * rows + r] = batch.targets[t][r];
            scales[t * rows + r] = batch.weights[r] / (weight_sum * static_cast<double>(steps));
        }
    }
    return tape.bce(prob, targets, scales);
}

/// Same loss evaluated without recording; used for validation.
inline double batch_loss(const ModelParams& p, const SequenceBatch& batch) {
    const auto probs = forward(p, batch);
    double weight_sum = 0.0, total = 0.0;
    for (double w : batch.weights) weight_sum += w;
    for (std::size_t t = 0; t < probs.size(); ++t) {
        for (std::size_t r = 0; r < batch.batch(); ++r) {
            total += batch.weights[r] * binary_cross_entropy(probs[t][r], batch.targets[t][r]);
        }
    }
    return total / (weight_sum * static_cast<double>(batch.length()));
}

}  // namespace deepqc
