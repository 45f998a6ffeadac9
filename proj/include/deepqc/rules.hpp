#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <vector>

#include "deepqc/error.hpp"
#include "deepqc/series.hpp"
#include "deepqc/sg_filter.hpp"

namespace deepqc {

struct RuleConfig {
    double lower_bound = 0.0;
    double upper_bound = 0.6;
    double freeze_temp = 0.0;
    double rise_threshold = 0.01;      // m3/m3 per step
    double precip_lookback = 24.0;     // hours
    std::size_t constant_run_len = 960;
    std::size_t sg_window = 13;
    int sg_order = 3;
    double spike_z = 6.0;
    double break_z = 6.0;
    double sigma_floor = 0.001;        // lower bound on the robust sigmas, m3/m3 (per step for d1)

    void validate() const {
        auto finite = [](double v) { return std::isfinite(v); };
        if (!finite(lower_bound) || !finite(upper_bound) || !(lower_bound < upper_bound)) {
            throw ConfigError("rules: need finite lower_bound < upper_bound");
        }
        if (!finite(freeze_temp) || !finite(rise_threshold)) throw ConfigError("rules: thresholds must be finite");
        if (!(precip_lookback >= 0.0) || !finite(precip_lookback)) throw ConfigError("rules.precip_lookback must be >= 0");
        if (constant_run_len < 2) throw ConfigError("rules.constant_run_len must be >= 2");
        if (sg_window % 2 == 0) throw ConfigError("rules.sg_window must be odd");
        if (sg_order < 2 || static_cast<std::size_t>(sg_order) >= sg_window) {
            throw ConfigError("rules: need sg_window > sg_order >= 2");
        }
        if (!(spike_z > 0.0) || !finite(spike_z) || !(break_z > 0.0) || !finite(break_z)) {
            throw ConfigError("rules: spike_z and break_z must be positive");
        }
        if (!(sigma_floor > 0.0) || !finite(sigma_floor)) throw ConfigError("rules.sigma_floor must be > 0");
    }
};

namespace detail {

inline constexpr double kMadScale = 1.4826;
inline constexpr std::size_t kRobustWindow = 96;

/// Prefix sums over the precip channel so lookback totals are O(1).
struct PrecipIndex {
    std::vector<double> sum;
    std::vector<std::size_t> count;  // readings carrying a precip value

    explicit PrecipIndex(const std::vector<Reading>& rs) : sum(rs.size() + 1, 0.0), count(rs.size() + 1, 0) {
        for (std::size_t i = 0; i < rs.size(); ++i) {
            sum[i + 1] = sum[i] + rs[i].precip.value_or(0.0);
            count[i + 1] = count[i] + (rs[i].precip ? 1 : 0);
        }
    }

    /// Total over readings (t - lookback, t]; nullopt when none carries precip.
    std::optional<double> lookback(std::size_t t, std::size_t steps) const {
        const std::size_t lo = t + 1 > steps ? t + 1 - steps : 0;
        if (count[t + 1] == count[lo]) return std::nullopt;
        return sum[t + 1] - sum[lo];
    }
};

inline std::size_t lookback_steps(double hours) {
    return static_cast<std::size_t>(std::llround(hours * 3600.0 / static_cast<double>(kStep.count())));
}

/// 1.4826 * MAD over the finite entries of x[lo, hi).
inline double robust_sigma(const std::vector<double>& x, std::size_t lo, std::size_t hi, std::vector<double>& scratch) {
    scratch.clear();
    for (std::size_t i = lo; i < hi; ++i) {
        if (std::isfinite(x[i])) scratch.push_back(x[i]);
    }
    if (scratch.size() < 8) return std::numeric_limits<double>::quiet_NaN();
    auto median = [](std::vector<double>& v) {
        const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
        std::nth_element(v.begin(), mid, v.end());
        double m = *mid;
        if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), mid));
        return m;
    };
    const double med = median(scratch);
    for (double& v : scratch) v = std::abs(v - med);
    return kMadScale * median(scratch);
}

}  // namespace detail

/// Pointwise Table-1 style checks. Missing readings get {M} only.
inline std::vector<FlagSet> flag_thresholds(const SensorSeries& series, const RuleConfig& cfg) {
    const auto& rs = series.readings;
    std::vector<FlagSet> out(rs.size());
    const detail::PrecipIndex precip(rs);
    const std::size_t lookback = detail::lookback_steps(cfg.precip_lookback);
    for (std::size_t t = 0; t < rs.size(); ++t) {
        const Reading& r = rs[t];
        if (!r.value) {
            out[t].insert(Flag::M);
            continue;
        }
        const double v = *r.value;
        FlagSet& f = out[t];
        if (v < cfg.lower_bound) f.insert(Flag::C01);
        if (v > cfg.upper_bound) f.insert(Flag::C02);
        if (series.saturation && v > *series.saturation) f.insert(Flag::C03);
        if (r.soil_temp && *r.soil_temp < cfg.freeze_temp) f.insert(Flag::D01);
        if (r.air_temp && *r.air_temp < cfg.freeze_temp) f.insert(Flag::D02);
        if (t > 0 && rs[t - 1].value && v - *rs[t - 1].value > cfg.rise_threshold) {
            const auto rain = precip.lookback(t, lookback);
            if (rain && *rain == 0.0) f.insert(Flag::D04);
        }
    }
    return out;
}

/// Smoothed series, derivatives and residual; NaN wherever the SG window
/// touches a missing sample or the series edge.
struct SpectralTrace {
    std::vector<double> values, smooth, d1, d2, residual;
};

inline SpectralTrace spectral_trace(const SensorSeries& series, const RuleConfig& cfg) {
    SpectralTrace tr;
    tr.values.reserve(series.readings.size());
    for (const Reading& r : series.readings) tr.values.push_back(r.value.value_or(std::numeric_limits<double>::quiet_NaN()));
    tr.smooth = sg_apply(tr.values, sg_kernel(cfg.sg_window, cfg.sg_order, 0));
    tr.d1 = sg_apply(tr.values, sg_kernel(cfg.sg_window, cfg.sg_order, 1));
    tr.d2 = sg_apply(tr.values, sg_kernel(cfg.sg_window, cfg.sg_order, 2));
    tr.residual.resize(tr.values.size());
    for (std::size_t i = 0; i < tr.values.size(); ++i) tr.residual[i] = tr.values[i] - tr.smooth[i];
    return tr;
}

/// Spike (SPK), break (BRK) and constant-run (CST) detection.
///
/// Spike candidate: |r_t| > spike_z * sigma_r, the first derivative turns
/// over at t in the direction of r (up-down for a peak, down-up for a trough)
/// and v_t departs from the median of its SG window by more than
/// spike_z * sigma_r on the same side as r.
/// Break candidate: |d1_t| > break_z * sigma_d1, the second derivative changes
/// sign across t, and the raw jump into t is the largest of t-1..t+1, has the
/// sign of d1_t and exceeds break_z times the robust sigma of raw jumps. Sigmas are 1.4826 * MAD over a centred 96-sample window,
/// floored at sigma_floor.
///
/// A candidate is SPK when the value returns within spike_z * sigma_r of the
/// level before the candidate run within two samples, else BRK; rising BRK is
/// dropped when precipitation fell in the lookback.
inline std::vector<FlagSet> flag_spectral(const SensorSeries& series, const RuleConfig& cfg) {
    const std::size_t n = series.readings.size();
    std::vector<FlagSet> out(n);
    if (n == 0) return out;
    const SpectralTrace tr = spectral_trace(series, cfg);
    const auto& v = tr.values;
    const auto& r = tr.residual;
    const auto& d1 = tr.d1;
    const auto& d2 = tr.d2;
    auto ok = [&](std::size_t i) { return i < n && std::isfinite(d1[i]); };

    std::vector<double> scratch;
    const std::size_t half = detail::kRobustWindow / 2;
    auto window_sigma = [&](const std::vector<double>& x, std::size_t t) {
        const std::size_t lo = t > half ? t - half : 0;
        const std::size_t hi = std::min(n, t + half);
        const double s = detail::robust_sigma(x, lo, hi, scratch);
        return std::isnan(s) ? s : std::max(s, cfg.sigma_floor);
    };

    std::vector<double> diff(n, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t t = 1; t < n; ++t) diff[t] = v[t] - v[t - 1];
    std::vector<double> neighbourhood;
    auto local_median = [&](std::size_t t) {
        const std::size_t h = cfg.sg_window / 2;
        neighbourhood.assign(v.begin() + static_cast<std::ptrdiff_t>(t - std::min(t, h)),
                             v.begin() + static_cast<std::ptrdiff_t>(std::min(n, t + h + 1)));
        const auto mid = neighbourhood.begin() + static_cast<std::ptrdiff_t>(neighbourhood.size() / 2);
        std::nth_element(neighbourhood.begin(), mid, neighbourhood.end());
        return *mid;
    };

    std::vector<char> candidate(n, 0);
    std::vector<double> sigma_r(n, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t t = 1; t + 1 < n; ++t) {
        if (!ok(t - 1) || !ok(t) || !ok(t + 1)) continue;
        const bool spike_pre = std::abs(r[t]) > cfg.spike_z * cfg.sigma_floor;
        const bool break_pre = std::abs(d1[t]) > cfg.break_z * cfg.sigma_floor;
        if (!spike_pre && !break_pre) continue;

        if (spike_pre) {
            const bool peak = r[t] > 0 && d1[t - 1] > 0 && d1[t + 1] < 0;
            const bool trough = r[t] < 0 && d1[t - 1] < 0 && d1[t + 1] > 0;
            if (peak || trough) {
                const double s = window_sigma(r, t);
                // The sample itself must stand out from the local median too;
                // otherwise a clean neighbour of a large excursion inherits its
                // residual through the smoother.
                const double departure = v[t] - local_median(t);
                if (std::abs(r[t]) > cfg.spike_z * s && departure * r[t] > 0 &&
                    std::abs(departure) > cfg.spike_z * s) {
                    candidate[t] = 1;
                    sigma_r[t] = s;
                }
            }
        }
        if (!candidate[t] && break_pre && d2[t - 1] * d2[t + 1] < 0) {
            const double jump = v[t] - v[t - 1];
            const double before = t >= 2 ? std::abs(v[t - 1] - v[t - 2]) : 0.0;
            const double after = std::abs(v[t + 1] - v[t]);
            if (std::abs(jump) >= before && std::abs(jump) >= after && jump * d1[t] > 0) {
                const double s = window_sigma(d1, t);
                if (std::abs(d1[t]) > cfg.break_z * s && std::abs(jump) > cfg.break_z * window_sigma(diff, t)) {
                    candidate[t] = 1;
                    sigma_r[t] = window_sigma(r, t);
                }
            }
        }
    }

    const detail::PrecipIndex precip(series.readings);
    const std::size_t lookback = detail::lookback_steps(cfg.precip_lookback);
    for (std::size_t t = 1; t < n; ++t) {
        if (!candidate[t]) continue;
        std::size_t start = t;
        while (start > 0 && candidate[start - 1]) --start;
        if (start == 0 || std::isnan(v[start - 1])) continue;
        const double pre = v[start - 1];
        const double tol = cfg.spike_z * (std::isnan(sigma_r[t]) ? cfg.sigma_floor : sigma_r[t]);
        bool returns = false;
        for (std::size_t k = t + 1; k <= t + 2 && k < n; ++k) {
            if (!std::isnan(v[k]) && std::abs(v[k] - pre) <= tol) returns = true;
        }
        if (returns) {
            out[t].insert(Flag::SPK);
        } else {
            const bool rising = v[t] > pre;
            const auto rain = precip.lookback(t, lookback);
            if (!(rising && rain && *rain > 0.0)) out[t].insert(Flag::BRK);
        }
    }

    // Constant runs: exactly equal consecutive present values.
    std::size_t run_start = 0;
    for (std::size_t t = 1; t <= n; ++t) {
        const bool continues = t < n && !std::isnan(v[t]) && !std::isnan(v[t - 1]) && v[t] == v[t - 1];
        if (continues) continue;
        if (!std::isnan(v[t - 1]) && t - run_start >= cfg.constant_run_len) {
            for (std::size_t k = run_start; k < t; ++k) out[k].insert(Flag::CST);
        }
        run_start = t;
    }
    return out;
}

/// Union of threshold and spectral flags. G when nothing fired on a present
/// value, M alone on missing ones.
inline std::vector<FlagSet> rule_flags(const SensorSeries& series, const RuleConfig& cfg) {
    cfg.validate();
    std::vector<FlagSet> flags = flag_thresholds(series, cfg);
    const std::vector<FlagSet> spectral = flag_spectral(series, cfg);
    for (std::size_t t = 0; t < flags.size(); ++t) {
        if (series.readings[t].missing()) continue;
        flags[t] |= spectral[t];
        if (flags[t].empty()) flags[t].insert(Flag::G);
    }
    return flags;
}

inline SensorSeries run_rules(SensorSeries series, const RuleConfig& cfg) {
    const auto flags = rule_flags(series, cfg);
    for (std::size_t t = 0; t < flags.size(); ++t) series.readings[t].qflag = flags[t];
    return series;
}

}  // namespace deepqc
