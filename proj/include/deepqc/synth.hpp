#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "deepqc/csv.hpp"
#include "deepqc/error.hpp"
#include "deepqc/series.hpp"

namespace deepqc {

enum class AnomalyType : std::uint8_t { spike, brk, constant, out_of_range };
inline constexpr std::array<const char*, 4> kAnomalyTypeNames{"spike", "break", "constant", "out_of_range"};

struct SynthConfig {
    std::size_t n_sites = 40;
    std::size_t days_per_site = 120;
    std::uint64_t seed = 0;
    double base_min = 0.15;
    double base_max = 0.35;
    double event_rate = 0.3;        // wetting events per day
    double decay_halflife = 72.0;   // hours
    double noise_sd = 0.003;
    double anomaly_fraction = 0.05;
    std::array<double, 4> anomaly_mix{0.4, 0.3, 0.2, 0.1};  // spike, break, constant, out_of_range
    double gap_fraction = 0.01;

    // Shape parameters of the generator.
    double wet_min = 0.04;          // wetting event amplitude range, m3/m3
    double wet_max = 0.20;
    double moisture_cap = 0.55;
    double air_temp_mean = 15.0;    // degC
    double air_temp_seasonal = 8.0;
    double air_temp_diurnal = 4.0;
    std::string start = "2021-01-01T00:00Z";
    double spike_min = 0.1, spike_max = 0.3;
    double break_min = 0.05, break_max = 0.2;
    std::size_t break_min_len = 16;     // 4 h
    std::size_t break_max_len = 480;    // 5 days
    double break_mean_extra = 24.0;     // mean of the exponential part of break length, samples
    std::size_t constant_len = 960;
    std::size_t oor_max_len = 8;

    void validate() const {
        auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
        if (n_sites < 1 || days_per_site < 1) throw ConfigError("synth: n_sites and days_per_site must be >= 1");
        if (!(base_min >= 0.0 && base_min <= base_max && base_max <= moisture_cap)) {
            throw ConfigError("synth: need 0 <= base_min <= base_max <= moisture_cap");
        }
        if (!(event_rate >= 0.0) || !(decay_halflife > 0.0) || !(noise_sd >= 0.0)) {
            throw ConfigError("synth: event_rate, decay_halflife and noise_sd must be non-negative (halflife > 0)");
        }
        if (!unit(anomaly_fraction) || !unit(gap_fraction)) throw ConfigError("synth: fractions must be in [0,1]");
        double mix = 0.0;
        for (double m : anomaly_mix) {
            if (!unit(m)) throw ConfigError("synth: anomaly_mix entries must be in [0,1]");
            mix += m;
        }
        if (std::abs(mix - 1.0) > 1e-9) throw ConfigError("synth: anomaly_mix must sum to 1");
        if (!(wet_min > 0.0 && wet_min <= wet_max)) throw ConfigError("synth: need 0 < wet_min <= wet_max");
        if (!(spike_min > 0.0 && spike_min <= spike_max)) throw ConfigError("synth: need 0 < spike_min <= spike_max");
        if (!(break_min > 0.0 && break_min <= break_max)) throw ConfigError("synth: need 0 < break_min <= break_max");
        if (break_min_len < 1 || break_min_len > break_max_len) throw ConfigError("synth: bad break length range");
        if (!(break_mean_extra >= 0.0)) throw ConfigError("synth: break_mean_extra must be >= 0");
        if (constant_len < 2 || oor_max_len < 1) throw ConfigError("synth: bad constant/out-of-range length");
        if (!parse_timestamp(start) || !on_grid(*parse_timestamp(start))) {
            throw ConfigError("synth.start must be an RFC 3339 UTC time on the 15-minute grid");
        }
    }
};

inline constexpr std::array<double, 4> kSynthDepths{5.0, 30.0, 60.0, 100.0};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::string synth_site_id(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "site%03zu", index + 1);
    return buf;
}

/// Clean series for site `index`: Poisson-timed wetting events with a 1-3
/// sample rise (precip on the rise samples), exponential drying back to the
/// site's base level, Gaussian noise, seasonal + diurnal temperatures and
/// sensor outages. Every present reading is labelled good.
inline SensorSeries generate_clean_site(const SynthConfig& cfg, std::size_t index) {
    std::mt19937_64 rng(splitmix64(cfg.seed ^ static_cast<std::uint64_t>(index)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);

    const std::size_t n = cfg.days_per_site * kStepsPerDay;
    const Timestamp start = *parse_timestamp(cfg.start);
    SensorSeries s;
    s.site_id = synth_site_id(index);
    s.depth_cm = kSynthDepths[index % kSynthDepths.size()];
    s.readings.resize(n);

    const double base = cfg.base_min + (cfg.base_max - cfg.base_min) * unit(rng);
    const double decay = std::pow(0.5, 0.25 / cfg.decay_halflife);
    const double per_step_rate = cfg.event_rate / static_cast<double>(kStepsPerDay);
    const double phase = 2.0 * std::numbers::pi * unit(rng);

    double excess = 0.0;
    std::size_t rise_left = 0;
    double rise_step = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
        Reading& r = s.readings[t];
        r.timestamp = start + static_cast<std::int64_t>(t) * kStep;
        double rain = 0.0;
        excess *= decay;
        if (rise_left == 0 && per_step_rate > 0.0 && unit(rng) < per_step_rate) {
            const double amplitude = cfg.wet_min + (cfg.wet_max - cfg.wet_min) * unit(rng);
            rise_left = 1 + static_cast<std::size_t>(unit(rng) * 3.0);
            rise_step = amplitude / static_cast<double>(rise_left);
        }
        if (rise_left > 0) {
            excess = std::min(excess + rise_step, cfg.moisture_cap - base);
            rain = 100.0 * rise_step;
            --rise_left;
        }
        r.value = base + excess + cfg.noise_sd * noise(rng);
        r.precip = rain;
        const double days = static_cast<double>(t) / static_cast<double>(kStepsPerDay);
        const double season = std::sin(2.0 * std::numbers::pi * days / 365.25 + phase);
        const double diurnal = std::sin(2.0 * std::numbers::pi * (days - 0.375));
        r.air_temp = cfg.air_temp_mean + cfg.air_temp_seasonal * season + cfg.air_temp_diurnal * diurnal;
        const double damping = std::exp(-s.depth_cm / 20.0);
        r.soil_temp = cfg.air_temp_mean + cfg.air_temp_seasonal * season * std::exp(-s.depth_cm / 200.0) +
                      cfg.air_temp_diurnal * diurnal * damping;
        r.manual_flag = false;
    }

    // Outages: runs of 4-96 missing samples until the target share is reached.
    const auto gap_target = static_cast<std::size_t>(std::llround(cfg.gap_fraction * static_cast<double>(n)));
    std::size_t missing = 0;
    for (std::size_t attempts = 0; missing < gap_target && attempts < 100000; ++attempts) {
        const std::size_t len = std::min<std::size_t>(gap_target - missing, 4 + static_cast<std::size_t>(unit(rng) * 93.0));
        if (len >= n) break;
        const auto at = static_cast<std::size_t>(unit(rng) * static_cast<double>(n - len));
        bool clear = true;
        for (std::size_t k = at; k < at + len && clear; ++k) clear = s.readings[k].value.has_value();
        if (!clear) continue;
        for (std::size_t k = at; k < at + len; ++k) {
            s.readings[k].value.reset();
            s.readings[k].manual_flag.reset();
        }
        missing += len;
    }
    return s;
}

inline std::vector<SensorSeries> generate_clean(const SynthConfig& cfg) {
    cfg.validate();
    std::vector<SensorSeries> out;
    out.reserve(cfg.n_sites);
    for (std::size_t i = 0; i < cfg.n_sites; ++i) out.push_back(generate_clean_site(cfg, i));
    return out;
}

/// Altered-sample counts per anomaly type.
struct AnomalyCounts {
    std::array<std::size_t, 4> samples{};
    std::array<std::size_t, 4> events{};

    std::size_t total() const { return samples[0] + samples[1] + samples[2] + samples[3]; }
};

/// Overwrites a share `anomaly_fraction` of the present samples with spikes,
/// breaks, constant runs and out-of-range values, labelling exactly the
/// altered samples. The mix is read as shares of anomalous samples; a share
/// too small for one event of its type (constants need constant_len samples,
/// breaks break_min_len) passes to the spikes, which fill the remainder
/// exactly. Events are laid out in shuffled order with at least two clean
/// samples between them.
/// `kinds`, when given, receives one entry per reading: the AnomalyType index
/// of altered samples, -1 elsewhere.
inline SensorSeries inject_anomalies(const SensorSeries& clean, const SynthConfig& cfg, std::uint64_t stream = 0,
                                     AnomalyCounts* counts = nullptr, std::vector<int>* kinds = nullptr) {
    cfg.validate();
    SensorSeries out = clean;
    if (counts) *counts = {};
    if (kinds) kinds->assign(clean.readings.size(), -1);
    if (cfg.anomaly_fraction == 0.0) return out;

    std::mt19937_64 rng(splitmix64(cfg.seed ^ splitmix64(stream ^ 0x5bd1e995ULL)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    std::vector<std::size_t> present;
    for (std::size_t i = 0; i < out.readings.size(); ++i) {
        if (out.readings[i].value) present.push_back(i);
    }
    const std::size_t p = present.size();
    const auto target = static_cast<std::size_t>(std::llround(cfg.anomaly_fraction * static_cast<double>(p)));

    struct Event {
        AnomalyType type;
        std::size_t len;
    };
    std::vector<Event> events;
    std::array<double, 4> budget{};
    for (std::size_t k = 0; k < 4; ++k) budget[k] = cfg.anomaly_mix[k] * static_cast<double>(target);
    auto take = [&](AnomalyType type, std::size_t len) {
        events.push_back({type, len});
        budget[static_cast<std::size_t>(type)] -= static_cast<double>(len);
    };

    {  // constants
        const auto b = static_cast<std::size_t>(std::llround(budget[2]));
        const std::size_t runs = b / cfg.constant_len;
        for (std::size_t k = 0; k < runs; ++k) take(AnomalyType::constant, b / runs + (k < b % runs ? 1 : 0));
    }
    {  // breaks
        std::exponential_distribution<double> extra(cfg.break_mean_extra > 0 ? 1.0 / cfg.break_mean_extra : 1e9);
        while (budget[1] >= static_cast<double>(cfg.break_min_len)) {
            auto len = cfg.break_min_len + static_cast<std::size_t>(extra(rng));
            len = std::min({len, cfg.break_max_len, static_cast<std::size_t>(budget[1])});
            take(AnomalyType::brk, len);
        }
    }
    {  // out of range
        while (budget[3] >= 1.0) {
            const std::size_t len = std::min<std::size_t>(1 + static_cast<std::size_t>(unit(rng) * cfg.oor_max_len),
                                                          static_cast<std::size_t>(budget[3]));
            take(AnomalyType::out_of_range, len);
        }
    }
    {  // spikes fill whatever is left of the target
        std::size_t used = 0;
        for (const auto& e : events) used += e.len;
        std::size_t left = target > used ? target - used : 0;
        while (left > 0) {
            const std::size_t len = std::min<std::size_t>(left, unit(rng) < 0.5 ? 1 : 2);
            take(AnomalyType::spike, len);
            left -= len;
        }
    }

    constexpr std::size_t kSeparation = 2;
    constexpr std::size_t kMargin = 16;
    std::size_t occupied = 2 * kMargin;
    for (const auto& e : events) occupied += e.len + kSeparation;
    if (events.empty()) return out;
    if (occupied > p) {
        throw DataError("series " + clean.site_id + ": anomaly fraction " + format_number(cfg.anomaly_fraction) +
                        " is infeasible for " + std::to_string(p) + " present samples");
    }
    std::shuffle(events.begin(), events.end(), rng);

    // Spread the free samples over the E+1 slots between events.
    const std::size_t free = p - occupied;
    std::vector<std::size_t> cuts(events.size());
    std::uniform_int_distribution<std::size_t> cut(0, free);
    for (auto& c : cuts) c = cut(rng);
    std::sort(cuts.begin(), cuts.end());

    std::size_t pos = kMargin;  // index into `present`
    std::size_t prev_cut = 0;
    for (std::size_t e = 0; e < events.size(); ++e) {
        pos += cuts[e] - prev_cut;
        prev_cut = cuts[e];
        const Event& ev = events[e];
        const auto type_index = static_cast<std::size_t>(ev.type);
        const double sign = unit(rng) < 0.5 ? -1.0 : 1.0;
        const double frozen = *out.readings[present[pos - 1]].value;
        double magnitude = 0.0;
        if (ev.type == AnomalyType::brk) magnitude = cfg.break_min + (cfg.break_max - cfg.break_min) * unit(rng);
        for (std::size_t k = 0; k < ev.len; ++k) {
            Reading& r = out.readings[present[pos + k]];
            const double v = *r.value;
            switch (ev.type) {
            case AnomalyType::spike:
                r.value = v + sign * (cfg.spike_min + (cfg.spike_max - cfg.spike_min) * unit(rng));
                break;
            case AnomalyType::brk: r.value = v + sign * magnitude; break;
            case AnomalyType::constant: r.value = frozen; break;
            case AnomalyType::out_of_range:
                r.value = sign < 0 ? -(0.01 + 0.09 * unit(rng)) : 0.61 + 0.19 * unit(rng);
                break;
            }
            r.manual_flag = *r.value != v;
            if (counts && *r.manual_flag) ++counts->samples[type_index];
            if (kinds && *r.manual_flag) (*kinds)[present[pos + k]] = static_cast<int>(type_index);
        }
        if (counts) ++counts->events[type_index];
        pos += ev.len + kSeparation;
    }
    return out;
}

struct SyntheticSite {
    SensorSeries clean;
    SensorSeries series;  // with anomalies and ground truth
    AnomalyCounts counts;
    std::vector<int> kinds;  // per reading: AnomalyType index or -1
};

inline std::vector<SyntheticSite> synthesize(const SynthConfig& cfg) {
    cfg.validate();
    std::vector<SyntheticSite> out;
    out.reserve(cfg.n_sites);
    for (std::size_t i = 0; i < cfg.n_sites; ++i) {
        SyntheticSite site;
        site.clean = generate_clean_site(cfg, i);
        site.series = inject_anomalies(site.clean, cfg, i, &site.counts, &site.kinds);
        out.push_back(std::move(site));
    }
    return out;
}

/// Ground-truth sidecar: per-site sample counts by anomaly type.
inline void write_truth_csv(std::ostream& out, const std::vector<SyntheticSite>& sites) {
    out << "site_id,depth_cm,present,anomalous,spike,break,constant,out_of_range,anomaly_fraction\n";
    for (const auto& s : sites) {
        const std::size_t present = s.series.present_count();
        const std::size_t anomalous = s.counts.total();
        out << s.series.site_id << ',' << format_number(s.series.depth_cm) << ',' << present << ',' << anomalous;
        for (std::size_t k = 0; k < 4; ++k) out << ',' << s.counts.samples[k];
        out << ',' << format_number(present ? static_cast<double>(anomalous) / static_cast<double>(present) : 0.0)
            << '\n';
    }
}

}  // namespace deepqc
