#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "deepqc/csv.hpp"
#include "deepqc/error.hpp"
#include "deepqc/model.hpp"
#include "deepqc/tape.hpp"

namespace deepqc {

struct TrainConfig {
    std::size_t epochs = 400;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double anomaly_day_weight = 5.0;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    std::size_t early_stop_patience = 50;

    void validate() const {
        auto in_open_unit = [](double v) { return v > 0.0 && v < 1.0; };
        if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("train.learning_rate must be > 0");
        if (!in_open_unit(beta1)) throw ConfigError("train.beta1 must be in (0,1)");
        if (!in_open_unit(beta2)) throw ConfigError("train.beta2 must be in (0,1)");
        if (!(epsilon > 0.0)) throw ConfigError("train.epsilon must be > 0");
        if (!(anomaly_day_weight > 0.0)) throw ConfigError("train.anomaly_day_weight must be > 0");
        if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    }
};

/// Weighted binary cross-entropy of one prediction (probability clamped to
/// [1e-7, 1 - 1e-7]).
inline double bce_loss(double p, bool y, double weight = 1.0) {
    return weight * binary_cross_entropy(p, y ? 1.0 : 0.0);
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::uint64_t t = 0;

    static AdamState for_params(std::span<const Tensor* const> params) {
        AdamState s;
        for (const Tensor* p : params) {
            s.m.push_back(zeros_like(*p));
            s.v.push_back(zeros_like(*p));
        }
        return s;
    }

    friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// One bias-corrected Adam update. Nothing is modified when any gradient is
/// non-finite.
inline void adam_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, AdamState& state,
                      const TrainConfig& cfg) {
    if (params.size() != grads.size() || params.size() != state.m.size()) {
        throw std::invalid_argument("adam_step: parameter/gradient/state count mismatch");
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (!params[k]->same_shape(*grads[k]) || !params[k]->same_shape(state.m[k])) {
            throw std::invalid_argument("adam_step: shape mismatch for tensor " + std::to_string(k));
        }
        if (!grads[k]->all_finite()) throw NumericError("adam_step: non-finite gradient in tensor " + std::to_string(k));
    }
    ++state.t;
    const double step = static_cast<double>(state.t);
    const double correction1 = 1.0 - std::pow(cfg.beta1, step);
    const double correction2 = 1.0 - std::pow(cfg.beta2, step);
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& p = *params[k];
        const Tensor& g = *grads[k];
        Tensor& m = state.m[k];
        Tensor& v = state.v[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double m_hat = m[i] / correction1;
            const double v_hat = v[i] / correction2;
            p[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
        }
    }
}

// ---------------------------------------------------------------------------
// Gradients of the batch loss

struct LossAndGrad {
    double loss = 0.0;
    ModelParams grad;  // same layout as the model
};

/// Records the batch loss, runs the reverse pass and returns gradients for
/// every model tensor.
inline LossAndGrad loss_and_gradient(const ModelParams& p, const SequenceBatch& batch) {
    Tape tape;
    const ModelVars vars = ModelVars::on(tape, p);
    const Var loss = record_loss(tape, vars, batch);
    LossAndGrad out{tape.value(loss)[0], ModelParams::zeros(p.dims)};
    if (!std::isfinite(out.loss)) throw NumericError("training diverged: non-finite loss");
    tape.backward(loss);
    auto grads = out.grad.tensors();
    for (std::size_t k = 0; k < grads.size(); ++k) *grads[k] = tape.grad(vars.all[k]);
    return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = std::numeric_limits<double>::quiet_NaN();
    double val_accuracy = std::numeric_limits<double>::quiet_NaN();

    friend bool operator==(const EpochRecord& a, const EpochRecord& b) {
        auto same = [](double x, double y) { return x == y || (std::isnan(x) && std::isnan(y)); };
        return a.epoch == b.epoch && same(a.train_loss, b.train_loss) && same(a.val_loss, b.val_loss) &&
               same(a.val_accuracy, b.val_accuracy);
    }
};

struct TrainResult {
    ModelParams best;
    std::size_t best_epoch = 0;
    std::vector<EpochRecord> history;
};

/// Gives anomaly-bearing days the configured weight and every other day 1.
inline void assign_weights(std::vector<WindowSample>& samples, double anomaly_day_weight) {
    for (auto& s : samples) s.weight = s.has_anomaly() ? anomaly_day_weight : 1.0;
}

struct Evaluation {
    double loss = 0.0;
    double accuracy = 0.0;
};

/// Weighted-mean loss and per-step accuracy (present steps only, threshold
/// 0.5) over labelled windows.
inline Evaluation evaluate_windows(const ModelParams& p, const std::vector<WindowSample>& samples,
                                   std::size_t batch_size = 64) {
    double weighted = 0.0, weight_sum = 0.0;
    std::size_t correct = 0, counted = 0;
    std::vector<const WindowSample*> chunk;
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        chunk.clear();
        for (std::size_t k = start; k < std::min(samples.size(), start + batch_size); ++k) chunk.push_back(&samples[k]);
        const SequenceBatch b = make_batch(chunk);
        const auto probs = forward(p, b);
        for (std::size_t r = 0; r < chunk.size(); ++r) {
            double sample_loss = 0.0;
            for (std::size_t t = 0; t < b.length(); ++t) {
                sample_loss += binary_cross_entropy(probs[t][r], b.targets[t][r]);
                if (!chunk[r]->missing[t]) {
                    ++counted;
                    correct += (probs[t][r] >= 0.5) == chunk[r]->labels[t] ? 1 : 0;
                }
            }
            weighted += chunk[r]->weight * sample_loss / static_cast<double>(b.length());
            weight_sum += chunk[r]->weight;
        }
    }
    Evaluation e;
    e.loss = weight_sum > 0 ? weighted / weight_sum : 0.0;
    e.accuracy = counted > 0 ? static_cast<double>(correct) / static_cast<double>(counted) : 0.0;
    return e;
}

/// Mini-batch Adam training with per-epoch seeded shuffling. Keeps the
/// parameters of the epoch with the lowest validation loss (the last epoch
/// when there is no validation data) and stops after `early_stop_patience`
/// epochs without improvement.
inline TrainResult train(ModelParams model, std::vector<WindowSample> train_set, std::vector<WindowSample> val_set,
                         const TrainConfig& cfg, const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    cfg.validate();
    model.validate();
    std::erase_if(train_set, [](const WindowSample& s) { return !s.has_labels(); });
    std::erase_if(val_set, [](const WindowSample& s) { return !s.has_labels(); });
    if (train_set.empty()) throw DataError("train: no labelled training windows");
    assign_weights(train_set, cfg.anomaly_day_weight);
    assign_weights(val_set, cfg.anomaly_day_weight);

    std::mt19937_64 rng(cfg.seed);
    AdamState adam = AdamState::for_params(std::as_const(model).tensors());
    const auto params = model.tensors();

    TrainResult result;
    result.best = model;
    double best_val = std::numeric_limits<double>::infinity();

    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<const WindowSample*> chunk;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0, weight_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            chunk.clear();
            double batch_weight = 0.0;
            for (std::size_t k = start; k < std::min(order.size(), start + cfg.batch_size); ++k) {
                chunk.push_back(&train_set[order[k]]);
                batch_weight += train_set[order[k]].weight;
            }
            const SequenceBatch b = make_batch(chunk);
            LossAndGrad lg = [&] {
                try {
                    return loss_and_gradient(model, b);
                } catch (const NumericError& e) {
                    throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", batch at " +
                                       std::to_string(start) + ")");
                }
            }();
            loss_sum += lg.loss * batch_weight;
            weight_sum += batch_weight;
            adam_step(params, std::as_const(lg.grad).tensors(), adam, cfg);
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / weight_sum;
        if (!val_set.empty()) {
            const Evaluation e = evaluate_windows(model, val_set);
            rec.val_loss = e.loss;
            rec.val_accuracy = e.accuracy;
            if (!std::isfinite(e.loss)) throw NumericError("training diverged: non-finite validation loss");
            if (e.loss < best_val) {
                best_val = e.loss;
                result.best = model;
                result.best_epoch = epoch;
            }
        } else {
            result.best = model;
            result.best_epoch = epoch;
        }
        result.history.push_back(rec);
        if (on_epoch) on_epoch(rec);
        if (!val_set.empty() && epoch - result.best_epoch >= cfg.early_stop_patience) break;
    }
    result.best.meta.seed = cfg.seed;
    result.best.meta.epochs = result.history.size();
    result.best.meta.best_epoch = result.best_epoch;
    return result;
}

struct ThresholdChoice {
    double threshold = 0.5;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

/// Picks the decision threshold from {0.05, 0.10, ..., 0.95} that maximises
/// F1 over the present, labelled steps of `samples` (ties go to the lower
/// threshold). Meant for a validation set, never the test set.
inline ThresholdChoice calibrate_threshold(const ModelParams& p, const std::vector<WindowSample>& samples,
                                           std::size_t batch_size = 64) {
    constexpr std::size_t kGrid = 19;
    std::array<std::size_t, kGrid> tp{}, fp{};
    std::size_t positives = 0;
    std::vector<const WindowSample*> chunk;
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        chunk.clear();
        for (std::size_t k = start; k < std::min(samples.size(), start + batch_size); ++k) {
            if (samples[k].has_labels()) chunk.push_back(&samples[k]);
        }
        if (chunk.empty()) continue;
        const auto probs = forward(p, make_batch(chunk));
        for (std::size_t r = 0; r < chunk.size(); ++r) {
            for (std::size_t t = 0; t < probs.size(); ++t) {
                if (chunk[r]->missing[t]) continue;
                const bool y = chunk[r]->labels[t];
                positives += y ? 1 : 0;
                for (std::size_t g = 0; g < kGrid; ++g) {
                    if (probs[t][r] >= static_cast<double>(g + 1) / 20.0) ++(y ? tp[g] : fp[g]);
                }
            }
        }
    }
    if (positives == 0) throw DataError("calibrate_threshold: no anomalous steps to calibrate on");
    ThresholdChoice best;
    for (std::size_t g = 0; g < kGrid; ++g) {
        const double recall = static_cast<double>(tp[g]) / static_cast<double>(positives);
        const double precision = tp[g] + fp[g] ? static_cast<double>(tp[g]) / static_cast<double>(tp[g] + fp[g]) : 0.0;
        const double f1 = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
        if (f1 > best.f1) best = {static_cast<double>(g + 1) / 20.0, precision, recall, f1};
    }
    return best;
}

inline void write_history_csv(std::ostream& out, const std::vector<EpochRecord>& history) {
    out << "epoch,train_loss,val_loss,val_accuracy\n";
    auto num = [](double v) { return std::isnan(v) ? std::string() : format_number(v); };
    for (const auto& r : history) {
        out << r.epoch << ',' << num(r.train_loss) << ',' << num(r.val_loss) << ',' << num(r.val_accuracy) << '\n';
    }
}

}  // namespace deepqc
