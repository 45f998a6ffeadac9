#include <gtest/gtest.h>

#include <sstream>

#include "deepqc/csv.hpp"

using namespace deepqc;

namespace {

const char* kHeader = "timestamp,site_id,depth_cm,value,soil_temp,air_temp,precip,manual_flag\n";

std::vector<SensorSeries> parse(const std::string& body) {
    std::istringstream in(body);
    return read_csv(in);
}

}  // namespace

TEST(Csv, OneSeriesPerSiteAndDepth) {
    std::string text = kHeader;
    for (const char* site : {"siteA", "siteB"}) {
        for (int depth : {5, 30, 60, 100}) {
            text += std::string("2021-06-01T00:00Z,") + site + "," + std::to_string(depth) + ",0.3,,,,\n";
        }
    }
    EXPECT_EQ(parse(text).size(), 8u);
}

TEST(Csv, ParsesValueAndOptionalFields) {
    const auto s = parse(std::string(kHeader) + "2021-06-01T00:15Z,siteA,5,0.35,12.5,,0,1\n");
    ASSERT_EQ(s.size(), 1u);
    const Reading& r = s[0].readings.at(0);
    EXPECT_EQ(r.value, 0.35);
    EXPECT_EQ(r.soil_temp, 12.5);
    EXPECT_FALSE(r.air_temp.has_value());
    EXPECT_EQ(r.precip, 0.0);
    EXPECT_EQ(r.manual_flag, true);
    EXPECT_EQ(format_timestamp(r.timestamp), "2021-06-01T00:15:00Z");
}

TEST(Csv, SortsRowsAndFillsGaps) {
    const auto s = parse(std::string(kHeader) +
                         "2021-06-01T01:00Z,a,5,0.4,,,,\n"
                         "2021-06-01T00:00Z,a,5,0.3,,,,\n");
    ASSERT_EQ(s.size(), 1u);
    ASSERT_EQ(s[0].readings.size(), 5u);
    EXPECT_EQ(s[0].readings.front().value, 0.3);
    EXPECT_EQ(s[0].readings.back().value, 0.4);
    EXPECT_TRUE(s[0].readings[2].missing());
}

TEST(Csv, DuplicateTimestampIsAnError) {
    try {
        parse(std::string(kHeader) +
              "2021-06-01T00:00Z,siteA,5,0.3,,,,\n"
              "2021-06-01T00:15Z,siteA,5,0.3,,,,\n"
              "2021-06-01T00:00Z,siteA,5,0.31,,,,\n");
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("duplicate"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("row 4"), std::string::npos);
    }
}

TEST(Csv, MalformedRowsReportTheirRow) {
    auto expect_row_error = [](const std::string& row, const char* needle) {
        try {
            parse(std::string(kHeader) + "2021-06-01T00:00Z,a,5,0.3,,,,\n" + row);
            FAIL() << "expected DataError for " << row;
        } catch (const DataError& e) {
            EXPECT_NE(std::string(e.what()).find("row 3"), std::string::npos) << e.what();
            EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
        }
    };
    expect_row_error("2021-06-01T00:15Z,a,5,abc,,,,\n", "value");
    expect_row_error("2021-06-01T00:15Z,a,5,0.3,,,\n", "fields");
    expect_row_error("2021-06-01T00:20Z,a,5,0.3,,,,\n", "grid");
    expect_row_error("yesterday,a,5,0.3,,,,\n", "timestamp");
    expect_row_error("2021-06-01T00:15Z,a,5,0.3,,,,2\n", "manual_flag");
    expect_row_error("2021-06-01T00:15Z,a,-5,0.3,,,,\n", "depth");
}

TEST(Csv, SchemaMismatchAndEmptyFile) {
    EXPECT_THROW(parse("timestamp,site_id,value\n"), DataError);
    EXPECT_THROW(parse(""), DataError);
}

TEST(Csv, CustomSchemaNames) {
    CsvSchema schema;
    schema.value = "vwc";
    std::istringstream in("timestamp,site_id,depth_cm,vwc\n2021-06-01T00:00Z,a,5,0.2\n");
    const auto s = read_csv(in, schema);
    EXPECT_EQ(s.at(0).readings.at(0).value, 0.2);
}

TEST(Csv, RoundTripIsIdentityOnReadings) {
    SensorSeries s;
    s.site_id = "siteA";
    s.depth_cm = 30;
    const Timestamp t0 = *parse_timestamp("2021-06-01T00:00Z");
    const double values[] = {0.1 + 0.2, 1.0 / 3.0, -1e-6, 0.6000000000000001};
    for (std::size_t i = 0; i < 6; ++i) {
        Reading r;
        r.timestamp = t0 + static_cast<std::int64_t>(i) * kStep;
        if (i < 4) {
            r.value = values[i];
            r.soil_temp = 10.0 + static_cast<double>(i) / 7.0;
            r.manual_flag = i % 2 == 0;
            r.qflag = i == 2 ? FlagSet{Flag::C01, Flag::SPK} : FlagSet{Flag::G};
            r.probability = 0.123456789 * static_cast<double>(i + 1);
            r.predicted = i == 3;
        } else {
            r.qflag = FlagSet{Flag::M};
        }
        r.precip = i == 1 ? std::optional<double>(2.5) : std::nullopt;
        r.air_temp = -3.25;
        s.readings.push_back(r);
    }
    std::ostringstream out;
    write_csv(out, {s}, CsvColumns{true, true});
    std::istringstream in(out.str());
    const auto back = read_csv(in);
    ASSERT_EQ(back.size(), 1u);
    EXPECT_EQ(back[0], s);

    std::ostringstream again;
    write_csv(again, back, detect_columns(back));
    EXPECT_EQ(again.str(), out.str());
}

TEST(Csv, FormatNumberIsShortestRoundTrip) {
    EXPECT_EQ(format_number(0.35), "0.35");
    EXPECT_EQ(parse_number(format_number(0.1 + 0.2)), 0.1 + 0.2);
    EXPECT_FALSE(parse_number("nan"));
    EXPECT_FALSE(parse_number("1.5x"));
    EXPECT_EQ(parse_number("+2"), 2.0);
}
