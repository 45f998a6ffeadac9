#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "deepqc/series.hpp"

using namespace deepqc;
using namespace std::chrono_literals;

namespace {

Timestamp ts(std::string_view s) {
    const auto t = parse_timestamp(s);
    EXPECT_TRUE(t.has_value()) << s;
    return t.value_or(Timestamp{});
}

SensorSeries series_of(std::string site, double depth, std::size_t n) {
    SensorSeries s;
    s.site_id = std::move(site);
    s.depth_cm = depth;
    for (std::size_t i = 0; i < n; ++i) {
        Reading r;
        r.timestamp = ts("2021-06-01T00:00Z") + static_cast<std::int64_t>(i) * kStep;
        r.value = 0.3;
        s.readings.push_back(r);
    }
    return s;
}

}  // namespace

TEST(Timestamp, ParsesRfc3339Utc) {
    EXPECT_EQ(format_timestamp(ts("2021-06-01T00:15Z")), "2021-06-01T00:15:00Z");
    EXPECT_EQ(ts("2021-06-01T00:15:00Z"), ts("2021-06-01T00:15:00+00:00"));
    EXPECT_FALSE(parse_timestamp("2021-06-01T00:15:00+02:00"));
    EXPECT_FALSE(parse_timestamp("2021-02-30T00:00Z"));
    EXPECT_FALSE(parse_timestamp("2021-06-01 00:15"));
    EXPECT_FALSE(parse_timestamp("2021-06-01T24:00Z"));
}

TEST(Timestamp, GridAndDayOfYear) {
    EXPECT_TRUE(on_grid(ts("2021-06-01T00:45Z")));
    EXPECT_FALSE(on_grid(ts("2021-06-01T00:50Z")));
    EXPECT_FALSE(on_grid(ts("2021-06-01T00:45:30Z")));
    EXPECT_EQ(day_of_year(ts("2021-01-01T23:45Z")), 1);
    EXPECT_EQ(day_of_year(ts("2020-12-31T00:00Z")), 366);
    EXPECT_EQ(day_of_year(ts("2021-12-31T00:00Z")), 365);
}

TEST(FlagSet, CanonicalTextRoundTrip) {
    const FlagSet f{Flag::SPK, Flag::C01};
    EXPECT_EQ(f.to_string(), "C01;SPK");
    EXPECT_EQ(FlagSet::parse("C01;SPK"), f);
    EXPECT_EQ(FlagSet::parse("SPK;C01"), f);
    EXPECT_FALSE(FlagSet::parse("C01;XYZ"));
    EXPECT_EQ(FlagSet::parse(""), FlagSet{});
}

TEST(FlagSet, AnomalousIgnoresGoodAndMissing) {
    EXPECT_FALSE((FlagSet{Flag::G}).is_anomalous());
    EXPECT_FALSE((FlagSet{Flag::M}).is_anomalous());
    EXPECT_TRUE((FlagSet{Flag::D04}).is_anomalous());
    FlagSet f{Flag::BRK};
    f |= FlagSet{Flag::CST};
    EXPECT_EQ(f.size(), 2u);
    f.erase(Flag::BRK);
    EXPECT_EQ(f, (FlagSet{Flag::CST}));
}

TEST(SensorSeries, ValidateRejectsBrokenInvariants) {
    SensorSeries s = series_of("a", 5, 3);
    EXPECT_NO_THROW(s.validate());

    SensorSeries bad_depth = s;
    bad_depth.depth_cm = 0;
    EXPECT_THROW(bad_depth.validate(), std::invalid_argument);

    SensorSeries unordered = s;
    std::swap(unordered.readings[0], unordered.readings[1]);
    EXPECT_THROW(unordered.validate(), std::invalid_argument);

    SensorSeries off_grid = s;
    off_grid.readings[2].timestamp += 60s;
    EXPECT_THROW(off_grid.validate(), std::invalid_argument);

    SensorSeries nan = s;
    nan.readings[1].value = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(nan.validate(), std::invalid_argument);
}

TEST(FillGaps, ConsecutiveTimestampsDifferByOneStep) {
    SensorSeries s = series_of("a", 5, 10);
    s.readings.erase(s.readings.begin() + 3, s.readings.begin() + 7);
    const SensorSeries filled = fill_gaps(s);
    ASSERT_EQ(filled.readings.size(), 10u);
    for (std::size_t i = 1; i < filled.readings.size(); ++i) {
        EXPECT_EQ(filled.readings[i].timestamp - filled.readings[i - 1].timestamp, kStep);
    }
    for (std::size_t i = 3; i < 7; ++i) {
        EXPECT_TRUE(filled.readings[i].missing());
        EXPECT_FALSE(filled.readings[i].manual_flag.has_value());
    }
    EXPECT_EQ(filled.present_count(), 6u);
}

TEST(AlignHourly, LeftClosedHourWindow) {
    SensorSeries s;
    s.site_id = "a";
    s.depth_cm = 5;
    for (auto t : {"2021-06-01T03:00Z", "2021-06-01T03:45Z", "2021-06-01T04:00Z", "2021-06-01T05:15Z"}) {
        Reading r;
        r.timestamp = ts(t);
        r.value = 0.2;
        r.precip = 9.0;  // overwritten or cleared
        s.readings.push_back(r);
    }
    const std::vector<HourlyRecord> hourly{
        {ts("2021-06-01T03:00Z"), 2.0, 11.0},
        {ts("2021-06-01T04:00Z"), 0.0, 12.5},
    };
    const SensorSeries out = align_hourly_ancillary(s, hourly);
    EXPECT_EQ(out.readings[0].precip, 2.0);
    EXPECT_EQ(out.readings[1].precip, 2.0);
    EXPECT_EQ(out.readings[1].air_temp, 11.0);
    EXPECT_EQ(out.readings[2].precip, 0.0);
    EXPECT_EQ(out.readings[2].air_temp, 12.5);
    EXPECT_FALSE(out.readings[3].precip.has_value());
    EXPECT_FALSE(out.readings[3].air_temp.has_value());
}

TEST(AlignHourly, RejectsOffHourRecords) {
    const std::vector<HourlyRecord> hourly{{ts("2021-06-01T03:15Z"), 1.0, 1.0}};
    EXPECT_THROW(align_hourly_ancillary(series_of("a", 5, 2), hourly), std::invalid_argument);
}

namespace {

std::vector<SensorSeries> corpus(std::size_t sites, std::size_t depths) {
    std::vector<SensorSeries> all;
    for (std::size_t s = 0; s < sites; ++s) {
        for (std::size_t d = 0; d < depths; ++d) {
            all.push_back(series_of("site" + std::to_string(s), 5.0 + 25.0 * static_cast<double>(d), 2));
        }
    }
    return all;
}

std::set<std::string> site_set(const std::vector<SensorSeries>& v) {
    std::set<std::string> out;
    for (const auto& s : v) out.insert(s.site_id);
    return out;
}

}  // namespace

TEST(SplitSites, EightyTenTenOnTenSites) {
    const auto split = split_sites(corpus(10, 1), {0.8, 0.1, 0.1}, 7);
    EXPECT_EQ(split.train.size(), 8u);
    EXPECT_EQ(split.val.size(), 1u);
    EXPECT_EQ(split.test.size(), 1u);
}

TEST(SplitSites, KeepsDepthsOfASiteTogetherAndPartitions) {
    const auto all = corpus(9, 4);
    const auto split = split_sites(all, {0.6, 0.2, 0.2}, 3);
    const auto a = site_set(split.train), b = site_set(split.val), c = site_set(split.test);
    for (const auto& s : a) {
        EXPECT_FALSE(b.contains(s));
        EXPECT_FALSE(c.contains(s));
    }
    for (const auto& s : b) EXPECT_FALSE(c.contains(s));
    EXPECT_EQ(split.train.size() + split.val.size() + split.test.size(), all.size());
    EXPECT_EQ(split.train.size() % 4, 0u);
    EXPECT_EQ(a.size() + b.size() + c.size(), 9u);
    EXPECT_NEAR(static_cast<double>(a.size()), 0.6 * 9, 1.0);
    EXPECT_NEAR(static_cast<double>(b.size()), 0.2 * 9, 1.0);
}

TEST(SplitSites, DegenerateRatioAndDeterminism) {
    const auto all = corpus(5, 2);
    const auto split = split_sites(all, {1.0, 0.0, 0.0}, 1);
    EXPECT_EQ(split.train.size(), all.size());
    EXPECT_TRUE(split.val.empty());
    EXPECT_TRUE(split.test.empty());

    const auto x = split_sites(all, {0.4, 0.3, 0.3}, 99);
    const auto y = split_sites(all, {0.4, 0.3, 0.3}, 99);
    EXPECT_EQ(x.train, y.train);
    EXPECT_EQ(x.val, y.val);
    EXPECT_EQ(x.test, y.test);
}

TEST(SplitSites, Errors) {
    EXPECT_THROW(split_sites(corpus(2, 1), {0.8, 0.1, 0.1}, 1), std::invalid_argument);
    EXPECT_THROW(split_sites(corpus(10, 1), {0.8, 0.1, 0.2}, 1), std::invalid_argument);
    EXPECT_THROW(split_sites(corpus(10, 1), {1.2, -0.1, -0.1}, 1), std::invalid_argument);
}
