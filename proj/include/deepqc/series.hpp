#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "deepqc/error.hpp"

namespace deepqc {

using Timestamp = std::chrono::sys_seconds;

/// Sampling cadence of every sensor series.
inline constexpr std::chrono::seconds kStep{15 * 60};
inline constexpr std::size_t kStepsPerDay = 96;

inline bool on_grid(Timestamp t) {
    return t.time_since_epoch().count() % kStep.count() == 0;
}

/// Parses RFC 3339 UTC instants: `YYYY-MM-DDTHH:MM[:SS]` followed by `Z` or
/// `+00:00`. A space is accepted in place of `T`.
inline std::optional<Timestamp> parse_timestamp(std::string_view s) {
    auto number = [&](std::size_t pos, std::size_t len, int& out) {
        if (pos + len > s.size()) return false;
        auto [p, ec] = std::from_chars(s.data() + pos, s.data() + pos + len, out);
        return ec == std::errc{} && p == s.data() + pos + len;
    };
    int y = 0, mo = 0, d = 0, h = 0, mi = 0, sec = 0;
    if (s.size() < 17 || !number(0, 4, y) || s[4] != '-' || !number(5, 2, mo) || s[7] != '-' ||
        !number(8, 2, d) || (s[10] != 'T' && s[10] != 't' && s[10] != ' ') || !number(11, 2, h) ||
        s[13] != ':' || !number(14, 2, mi)) {
        return std::nullopt;
    }
    std::size_t pos = 16;
    if (pos < s.size() && s[pos] == ':') {
        if (!number(pos + 1, 2, sec)) return std::nullopt;
        pos += 3;
    }
    const std::string_view zone = s.substr(pos);
    if (zone != "Z" && zone != "z" && zone != "+00:00" && zone != "-00:00") return std::nullopt;
    const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month(static_cast<unsigned>(mo)),
                                          std::chrono::day(static_cast<unsigned>(d))};
    if (!ymd.ok() || h > 23 || mi > 59 || sec > 59) return std::nullopt;
    return std::chrono::sys_days{ymd} + std::chrono::hours{h} + std::chrono::minutes{mi} +
           std::chrono::seconds{sec};
}

inline std::string format_timestamp(Timestamp t) {
    const auto day = std::chrono::floor<std::chrono::days>(t);
    const std::chrono::year_month_day ymd{day};
    const std::chrono::hh_mm_ss hms{t - day};
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d:%02dZ", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                  static_cast<int>(hms.hours().count()), static_cast<int>(hms.minutes().count()),
                  static_cast<int>(hms.seconds().count()));
    return buf;
}

/// Day of year, 1..366.
inline int day_of_year(Timestamp t) {
    const auto day = std::chrono::floor<std::chrono::days>(t);
    const std::chrono::year_month_day ymd{day};
    const std::chrono::sys_days jan1{ymd.year() / std::chrono::January / 1};
    return static_cast<int>((day - jan1).count()) + 1;
}

// ---------------------------------------------------------------------------
// Quality flags

enum class Flag : std::uint8_t { G, C01, C02, C03, D01, D02, D04, SPK, BRK, CST, M };
inline constexpr std::size_t kFlagCount = 11;
inline constexpr std::array<std::string_view, kFlagCount> kFlagNames{
    "G", "C01", "C02", "C03", "D01", "D02", "D04", "SPK", "BRK", "CST", "M"};

/// Set of QC codes attached to one reading.
class FlagSet {
public:
    FlagSet() = default;
    FlagSet(std::initializer_list<Flag> flags) {
        for (Flag f : flags) insert(f);
    }

    void insert(Flag f) { bits_ |= bit(f); }
    void erase(Flag f) { bits_ &= static_cast<std::uint16_t>(~bit(f)); }
    bool contains(Flag f) const { return (bits_ & bit(f)) != 0; }
    bool empty() const { return bits_ == 0; }
    std::size_t size() const { return static_cast<std::size_t>(std::popcount(bits_)); }

    FlagSet& operator|=(FlagSet other) {
        bits_ |= other.bits_;
        return *this;
    }
    friend FlagSet operator|(FlagSet a, FlagSet b) { return a |= b; }
    friend bool operator==(FlagSet, FlagSet) = default;

    /// True when any code other than G and M is present.
    bool is_anomalous() const {
        FlagSet rest = *this;
        rest.erase(Flag::G);
        rest.erase(Flag::M);
        return !rest.empty();
    }

    /// Semicolon-joined codes in canonical order, e.g. `C01;SPK`.
    std::string to_string() const {
        std::string out;
        for (std::size_t i = 0; i < kFlagCount; ++i) {
            if (contains(static_cast<Flag>(i))) {
                if (!out.empty()) out += ';';
                out += kFlagNames[i];
            }
        }
        return out;
    }

    static std::optional<FlagSet> parse(std::string_view s) {
        FlagSet set;
        while (!s.empty()) {
            const auto semi = s.find(';');
            const std::string_view code = s.substr(0, semi);
            const auto it = std::find(kFlagNames.begin(), kFlagNames.end(), code);
            if (it == kFlagNames.end()) return std::nullopt;
            set.insert(static_cast<Flag>(it - kFlagNames.begin()));
            if (semi == std::string_view::npos) break;
            s.remove_prefix(semi + 1);
        }
        return set;
    }

private:
    static std::uint16_t bit(Flag f) { return static_cast<std::uint16_t>(1u << static_cast<unsigned>(f)); }
    std::uint16_t bits_ = 0;
};

// ---------------------------------------------------------------------------
// Readings and series

struct Reading {
    Timestamp timestamp{};
    std::optional<double> value;      // m3/m3
    std::optional<double> soil_temp;  // degC
    std::optional<double> air_temp;   // degC
    std::optional<double> precip;     // mm over the preceding interval
    std::optional<bool> manual_flag;  // true = anomaly

    // Annotations produced by the flaggers.
    std::optional<FlagSet> qflag;
    std::optional<double> probability;
    std::optional<bool> predicted;

    bool missing() const { return !value.has_value(); }

    friend bool operator==(const Reading&, const Reading&) = default;
};

struct SensorSeries {
    std::string site_id;
    double depth_cm = 0.0;
    std::vector<Reading> readings;
    std::optional<double> saturation;
    std::string ancillary_source = "in-situ";

    /// Throws std::invalid_argument if the series breaks its invariants.
    void validate() const {
        if (!(depth_cm > 0.0)) throw std::invalid_argument("series " + site_id + ": depth must be > 0");
        for (std::size_t i = 0; i < readings.size(); ++i) {
            const Reading& r = readings[i];
            if (!on_grid(r.timestamp)) {
                throw std::invalid_argument("series " + site_id + ": timestamp " +
                                            format_timestamp(r.timestamp) + " is off the 15-minute grid");
            }
            if (r.value && !std::isfinite(*r.value)) {
                throw std::invalid_argument("series " + site_id + ": non-finite value");
            }
            if (i > 0 && readings[i - 1].timestamp >= r.timestamp) {
                throw std::invalid_argument("series " + site_id + ": timestamps not strictly increasing");
            }
        }
    }

    std::size_t present_count() const {
        return static_cast<std::size_t>(
            std::count_if(readings.begin(), readings.end(), [](const Reading& r) { return !r.missing(); }));
    }

    friend bool operator==(const SensorSeries&, const SensorSeries&) = default;
};

/// Inserts missing-value readings so consecutive timestamps differ by exactly
/// one step. Readings must already be sorted.
inline SensorSeries fill_gaps(SensorSeries series) {
    if (series.readings.empty()) return series;
    std::vector<Reading> filled;
    filled.reserve(series.readings.size());
    for (const Reading& r : series.readings) {
        if (!filled.empty()) {
            for (Timestamp t = filled.back().timestamp + kStep; t < r.timestamp; t += kStep) {
                Reading gap;
                gap.timestamp = t;
                filled.push_back(gap);
            }
        }
        filled.push_back(r);
    }
    series.readings = std::move(filled);
    return series;
}

struct HourlyRecord {
    Timestamp hour;
    std::optional<double> precip;    // mm
    std::optional<double> air_temp;  // degC
};

/// Gives each reading the ancillary record of the hour H with
/// H <= timestamp < H + 1h. Readings without a covering hour keep their
/// ancillary fields absent.
inline SensorSeries align_hourly_ancillary(SensorSeries series, std::span<const HourlyRecord> hourly) {
    std::map<Timestamp, const HourlyRecord*> by_hour;
    for (const HourlyRecord& rec : hourly) {
        if (rec.hour.time_since_epoch().count() % 3600 != 0) {
            throw std::invalid_argument("hourly record " + format_timestamp(rec.hour) +
                                        " is not on a whole hour");
        }
        by_hour[rec.hour] = &rec;
    }
    for (Reading& r : series.readings) {
        const Timestamp hour = std::chrono::floor<std::chrono::hours>(r.timestamp);
        const auto it = by_hour.find(hour);
        if (it == by_hour.end()) {
            r.precip.reset();
            r.air_temp.reset();
        } else {
            r.precip = it->second->precip;
            r.air_temp = it->second->air_temp;
        }
    }
    return series;
}

// ---------------------------------------------------------------------------
// Site-level split

struct SiteSplit {
    std::vector<SensorSeries> train, val, test;
};

/// Partitions series by site id into train/val/test. Each set holds a whole
/// number of sites, allocated by largest remainder so every set is within one
/// site of its exact share. Deterministic for a fixed seed.
inline SiteSplit split_sites(const std::vector<SensorSeries>& all, std::array<double, 3> ratios,
                             std::uint64_t seed) {
    const double total = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(total - 1.0) > 1e-9 || std::any_of(ratios.begin(), ratios.end(), [](double r) { return r < 0; })) {
        throw std::invalid_argument("split ratios must be non-negative and sum to 1");
    }
    std::vector<std::string> sites;
    for (const auto& s : all) sites.push_back(s.site_id);
    std::sort(sites.begin(), sites.end());
    sites.erase(std::unique(sites.begin(), sites.end()), sites.end());

    const auto nonzero = static_cast<std::size_t>(std::count_if(ratios.begin(), ratios.end(), [](double r) { return r > 0; }));
    if (all.size() < 3 || sites.size() < nonzero) {
        throw std::invalid_argument("split_sites: fewer series/sites than partitions");
    }

    std::mt19937_64 rng(seed);
    std::shuffle(sites.begin(), sites.end(), rng);

    const std::size_t n = sites.size();
    std::array<std::size_t, 3> counts{};
    std::array<double, 3> remainder{};
    std::size_t assigned = 0;
    for (std::size_t k = 0; k < 3; ++k) {
        const double exact = ratios[k] * static_cast<double>(n);
        counts[k] = static_cast<std::size_t>(std::floor(exact));
        remainder[k] = exact - static_cast<double>(counts[k]);
        assigned += counts[k];
    }
    std::array<std::size_t, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
    for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++counts[order[k % 3]];

    std::map<std::string, int> part;
    std::size_t idx = 0;
    for (int k = 0; k < 3; ++k) {
        for (std::size_t j = 0; j < counts[static_cast<std::size_t>(k)]; ++j) part[sites[idx++]] = k;
    }
    SiteSplit out;
    for (const auto& s : all) {
        switch (part.at(s.site_id)) {
        case 0: out.train.push_back(s); break;
        case 1: out.val.push_back(s); break;
        default: out.test.push_back(s); break;
        }
    }
    return out;
}

}  // namespace deepqc
