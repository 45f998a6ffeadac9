#pragma once

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include "deepqc/error.hpp"
#include "deepqc/series.hpp"

namespace deepqc {

/// Header names for each logical column. Only the first four are required;
/// the annotation columns are read back when present so flagger output can be
/// re-ingested.
struct CsvSchema {
    std::string timestamp = "timestamp";
    std::string site_id = "site_id";
    std::string depth_cm = "depth_cm";
    std::string value = "value";
    std::string soil_temp = "soil_temp";
    std::string air_temp = "air_temp";
    std::string precip = "precip";
    std::string manual_flag = "manual_flag";
    std::string qflag = "qflag";
    std::string probability = "probability";
    std::string anomaly = "anomaly";
};

/// Shortest decimal text that parses back to the same double.
inline std::string format_number(double v) {
    char buf[64];
    const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

inline std::optional<double> parse_number(std::string_view s) {
    double v = 0.0;
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || end != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
    return v;
}

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    return s;
}

}  // namespace detail

/// Reads the sensor CSV format into one gap-filled series per (site, depth).
/// Rows may appear in any order; a repeated (site, depth, timestamp) is an
/// error.
inline std::vector<SensorSeries> read_csv(std::istream& in, const CsvSchema& schema = {},
                                          const std::string& source = "<stream>") {
    std::string line;
    std::size_t line_no = 0;
    auto fail = [&](const std::string& msg) -> DataError {
        return DataError(source + ": row " + std::to_string(line_no) + ": " + msg);
    };

    if (!std::getline(in, line)) throw DataError(source + ": empty file (header required)");
    ++line_no;
    std::vector<std::string> header;
    for (auto f : detail::split_fields(line)) header.emplace_back(detail::trim(f));

    auto column = [&](const std::string& name) -> std::optional<std::size_t> {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) return std::nullopt;
        return static_cast<std::size_t>(it - header.begin());
    };
    auto required = [&](const std::string& name) {
        auto c = column(name);
        if (!c) throw DataError(source + ": schema mismatch: missing column '" + name + "'");
        return *c;
    };
    const std::size_t c_ts = required(schema.timestamp), c_site = required(schema.site_id),
                      c_depth = required(schema.depth_cm), c_value = required(schema.value);
    const auto c_soil = column(schema.soil_temp), c_air = column(schema.air_temp),
               c_precip = column(schema.precip), c_manual = column(schema.manual_flag),
               c_qflag = column(schema.qflag), c_prob = column(schema.probability),
               c_anom = column(schema.anomaly);

    using Key = std::pair<std::string, double>;
    std::map<Key, std::vector<std::pair<Reading, std::size_t>>> groups;

    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        const auto fields = detail::split_fields(line);
        if (fields.size() != header.size()) {
            throw fail("expected " + std::to_string(header.size()) + " fields, found " +
                       std::to_string(fields.size()));
        }
        auto field = [&](std::size_t c) { return detail::trim(fields[c]); };
        auto optional_number = [&](std::optional<std::size_t> c, const char* what) -> std::optional<double> {
            if (!c || field(*c).empty()) return std::nullopt;
            auto v = parse_number(field(*c));
            if (!v) throw fail(std::string("unparseable ") + what + " '" + std::string(field(*c)) + "'");
            return v;
        };
        auto optional_bool = [&](std::optional<std::size_t> c, const char* what) -> std::optional<bool> {
            if (!c || field(*c).empty()) return std::nullopt;
            const auto s = field(*c);
            if (s == "0") return false;
            if (s == "1") return true;
            throw fail(std::string("invalid ") + what + " '" + std::string(s) + "' (expected 0, 1 or empty)");
        };

        Reading r;
        const auto ts = parse_timestamp(field(c_ts));
        if (!ts) throw fail("unparseable timestamp '" + std::string(field(c_ts)) + "'");
        if (!on_grid(*ts)) throw fail("timestamp " + std::string(field(c_ts)) + " is off the 15-minute grid");
        r.timestamp = *ts;
        const std::string site(field(c_site));
        if (site.empty()) throw fail("empty site_id");
        const auto depth = parse_number(field(c_depth));
        if (!depth || *depth <= 0.0) throw fail("invalid depth_cm '" + std::string(field(c_depth)) + "'");
        r.value = optional_number(c_value, "value");
        r.soil_temp = optional_number(c_soil, "soil_temp");
        r.air_temp = optional_number(c_air, "air_temp");
        r.precip = optional_number(c_precip, "precip");
        r.manual_flag = optional_bool(c_manual, "manual_flag");
        if (c_qflag && !field(*c_qflag).empty()) {
            const auto flags = FlagSet::parse(field(*c_qflag));
            if (!flags) throw fail("invalid qflag '" + std::string(field(*c_qflag)) + "'");
            r.qflag = *flags;
        }
        r.probability = optional_number(c_prob, "probability");
        r.predicted = optional_bool(c_anom, "anomaly");
        groups[{site, *depth}].emplace_back(std::move(r), line_no);
    }

    std::vector<SensorSeries> out;
    out.reserve(groups.size());
    for (auto& [key, rows] : groups) {
        std::stable_sort(rows.begin(), rows.end(),
                         [](const auto& a, const auto& b) { return a.first.timestamp < b.first.timestamp; });
        SensorSeries s;
        s.site_id = key.first;
        s.depth_cm = key.second;
        s.readings.reserve(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (i > 0 && rows[i].first.timestamp == rows[i - 1].first.timestamp) {
                line_no = rows[i].second;
                throw fail("duplicate timestamp " + format_timestamp(rows[i].first.timestamp) + " for site " +
                           key.first + " depth " + format_number(key.second));
            }
            s.readings.push_back(std::move(rows[i].first));
        }
        out.push_back(fill_gaps(std::move(s)));
    }
    return out;
}

inline std::vector<SensorSeries> ingest_csv(const std::filesystem::path& path, const CsvSchema& schema = {}) {
    std::ifstream in(path);
    if (!in) throw DataError(path.string() + ": cannot open file");
    return read_csv(in, schema, path.string());
}

/// Which optional annotation columns to emit after the core columns.
struct CsvColumns {
    bool qflag = false;
    bool prediction = false;  // probability + anomaly
};

/// Columns that any reading in `series` carries.
inline CsvColumns detect_columns(const std::vector<SensorSeries>& series) {
    CsvColumns cols;
    for (const auto& s : series) {
        for (const auto& r : s.readings) {
            cols.qflag = cols.qflag || r.qflag.has_value();
            cols.prediction = cols.prediction || r.probability.has_value() || r.predicted.has_value();
        }
    }
    return cols;
}

inline void write_csv(std::ostream& out, const std::vector<SensorSeries>& series, CsvColumns cols,
                      const CsvSchema& schema = {}) {
    out << schema.timestamp << ',' << schema.site_id << ',' << schema.depth_cm << ',' << schema.value << ','
        << schema.soil_temp << ',' << schema.air_temp << ',' << schema.precip << ',' << schema.manual_flag;
    if (cols.qflag) out << ',' << schema.qflag;
    if (cols.prediction) out << ',' << schema.probability << ',' << schema.anomaly;
    out << '\n';
    auto num = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string(); };
    auto flag = [](const std::optional<bool>& v) { return v ? std::string(*v ? "1" : "0") : std::string(); };
    for (const auto& s : series) {
        const std::string depth = format_number(s.depth_cm);
        for (const auto& r : s.readings) {
            out << format_timestamp(r.timestamp) << ',' << s.site_id << ',' << depth << ',' << num(r.value) << ','
                << num(r.soil_temp) << ',' << num(r.air_temp) << ',' << num(r.precip) << ','
                << flag(r.manual_flag);
            if (cols.qflag) out << ',' << (r.qflag ? r.qflag->to_string() : std::string());
            if (cols.prediction) out << ',' << num(r.probability) << ',' << flag(r.predicted);
            out << '\n';
        }
    }
}

/// Writes via a temporary sibling file and renames it into place.
template <typename Writer>
void write_file_atomically(const std::filesystem::path& path, Writer&& writer) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError(path.string() + ": cannot open for writing");
        writer(out);
        out.flush();
        if (!out) throw DataError(path.string() + ": write failed");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw DataError(path.string() + ": rename failed: " + ec.message());
}

inline void write_csv_file(const std::filesystem::path& path, const std::vector<SensorSeries>& series,
                           std::optional<CsvColumns> cols = std::nullopt) {
    const CsvColumns c = cols.value_or(detect_columns(series));
    write_file_atomically(path, [&](std::ostream& out) { write_csv(out, series, c); });
}

}  // namespace deepqc
