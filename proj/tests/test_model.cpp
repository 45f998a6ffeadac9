#include <gtest/gtest.h>

#include <random>

#include "deepqc/model.hpp"
#include "oracles.hpp"

using namespace deepqc;

namespace {

SensorSeries days_of_data(std::size_t days, double depth = 30.0) {
    SensorSeries s;
    s.site_id = "s";
    s.depth_cm = depth;
    const Timestamp t0 = *parse_timestamp("2021-03-01T00:00Z");
    for (std::size_t i = 0; i < days * kStepsPerDay; ++i) {
        Reading r;
        r.timestamp = t0 + static_cast<std::int64_t>(i) * kStep;
        r.value = 0.2 + 0.001 * static_cast<double>(i % 50);
        r.manual_flag = i % 97 == 0;
        s.readings.push_back(r);
    }
    return s;
}

WindowSample random_window(std::mt19937_64& rng, std::size_t length = kStepsPerDay) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    WindowSample w;
    w.depth_cm = 60;
    w.day_of_year = 200;
    for (std::size_t t = 0; t < length; ++t) {
        const bool missing = u(rng) < 0.1;
        w.missing.push_back(missing);
        w.values.push_back(missing ? 0.0 : 0.5 * u(rng));
    }
    return w;
}

}  // namespace

TEST(Featurize, OneWindowPerDay) {
    const auto w = featurize(days_of_data(3));
    ASSERT_EQ(w.size(), 3u);
    for (const auto& s : w) {
        EXPECT_EQ(s.values.size(), kStepsPerDay);
        EXPECT_EQ(s.missing.size(), kStepsPerDay);
        EXPECT_EQ(s.labels.size(), kStepsPerDay);
        EXPECT_EQ(s.depth_cm, 30.0);
    }
    EXPECT_EQ(w[0].day_of_year, 60);
    EXPECT_EQ(w[2].day_of_year, 62);
    EXPECT_TRUE(w[0].labels[0]);
    EXPECT_TRUE(w[1].labels[1]);  // index 97
    EXPECT_FALSE(w[1].labels[0]);
}

TEST(Featurize, SkipsAllMissingDaysAndMarksGaps) {
    SensorSeries s = days_of_data(3);
    for (std::size_t i = kStepsPerDay; i < 2 * kStepsPerDay; ++i) {
        s.readings[i].value.reset();
        s.readings[i].manual_flag.reset();
    }
    s.readings[5].value.reset();
    s.readings[5].manual_flag.reset();
    const auto w = featurize(s);
    ASSERT_EQ(w.size(), 2u);
    EXPECT_EQ(w[1].day_of_year, 62);
    EXPECT_TRUE(w[0].missing[5]);
    EXPECT_EQ(w[0].values[5], 0.0);
    EXPECT_FALSE(w[0].labels[5]);
}

TEST(Featurize, PartialDayAndUnlabelled) {
    SensorSeries s = days_of_data(1);
    s.readings.erase(s.readings.begin(), s.readings.begin() + 40);
    s.readings[3].manual_flag.reset();
    const auto w = featurize(s);
    ASSERT_EQ(w.size(), 1u);
    EXPECT_TRUE(w[0].missing[39]);
    EXPECT_FALSE(w[0].missing[40]);
    EXPECT_FALSE(w[0].has_labels());
}

TEST(Featurize, DayOfYearEncodingIsContinuousAcrossNewYear) {
    const auto a = context_features(5, 366), b = context_features(5, 1);
    EXPECT_NEAR(a[1], b[1], 0.02);
    EXPECT_NEAR(a[2], b[2], 0.02);
    EXPECT_EQ(a[0], 0.05);
}

TEST(MakeBatch, EncodesValueAndMissingFeatures) {
    WindowSample w;
    w.depth_cm = 100;
    w.day_of_year = 92;
    w.values = {0.3, 0.0, 0.6};
    w.missing = {false, true, false};
    w.labels = {false, false, true};
    const WindowSample* ptr[] = {&w};
    const SequenceBatch b = make_batch(ptr);
    ASSERT_EQ(b.length(), 3u);
    EXPECT_DOUBLE_EQ(b.steps[0](0, 0), 0.5);
    EXPECT_EQ(b.steps[0](0, 1), 0.0);
    EXPECT_EQ(b.steps[1](0, 0), 0.0);
    EXPECT_EQ(b.steps[1](0, 1), 1.0);
    EXPECT_DOUBLE_EQ(b.steps[2](0, 0), 1.0);
    EXPECT_EQ(b.context(0, 0), 1.0);
    EXPECT_NEAR(b.context(0, 1), std::sin(2 * std::numbers::pi * 92 / 366.0), 1e-15);
    EXPECT_EQ(b.targets[2][0], 1.0);
}

TEST(Forward, ZeroHeadGivesOneHalfEverywhere) {
    std::mt19937_64 rng(1);
    ModelParams p = ModelParams::random(ModelDims{}, rng);
    p.head = LinearParams::zeros(2 * p.dims.hidden, 1);
    const auto probs = forward(p, random_window(rng));
    ASSERT_EQ(probs.size(), kStepsPerDay);
    for (double v : probs) EXPECT_EQ(v, 0.5);
}

TEST(Forward, TinyModelMatchesHandComposition) {
    std::mt19937_64 rng(77);
    const ModelParams p = ModelParams::random(ModelDims{2, 3, 2, 2}, rng);
    const WindowSample w = random_window(rng, 10);
    const auto probs = forward(p, w);

    const auto ctx = context_features(w.depth_cm, w.day_of_year);
    auto embed = [&](std::size_t t) {
        std::vector<double> x(2);
        const double feat[2] = {w.missing[t] ? 0.0 : w.values[t] / 0.6, w.missing[t] ? 1.0 : 0.0};
        for (std::size_t j = 0; j < 2; ++j) {
            double z = p.embed_value.bias[j] + p.embed_context.bias[j];
            for (std::size_t k = 0; k < 2; ++k) z += p.embed_value.weight(j, k) * feat[k];
            for (std::size_t k = 0; k < 3; ++k) z += p.embed_context.weight(j, k) * ctx[k];
            x[j] = z;
        }
        return x;
    };
    const std::size_t n = w.values.size();
    std::vector<std::vector<double>> hf(n), hb(n);
    std::vector<double> h(2, 0.0), c(2, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
        auto s = oracle::lstm_step(p.forward_cell, embed(t), h, c);
        h = s.h;
        c = s.c;
        hf[t] = h;
    }
    h.assign(2, 0.0);
    c.assign(2, 0.0);
    for (std::size_t t = n; t-- > 0;) {
        auto s = oracle::lstm_step(p.backward_cell, embed(t), h, c);
        h = s.h;
        c = s.c;
        hb[t] = h;
    }
    for (std::size_t t = 0; t < n; ++t) {
        double z = p.head.bias[0];
        for (std::size_t j = 0; j < 2; ++j) z += p.head.weight(0, j) * hf[t][j] + p.head.weight(0, 2 + j) * hb[t][j];
        EXPECT_NEAR(probs[t], oracle::sig(z), 1e-12);
    }
}

TEST(Forward, DeterministicLabelFreeAndStrictlyInsideUnitInterval) {
    std::mt19937_64 rng(2);
    ModelParams p = ModelParams::random(ModelDims{}, rng);
    WindowSample w = random_window(rng);
    const auto a = forward(p, w);
    EXPECT_EQ(forward(p, w), a);
    w.labels.assign(kStepsPerDay, true);
    w.weight = 5.0;
    EXPECT_EQ(forward(p, w), a);

    p.head.bias[0] = 1e4;  // saturate
    for (double v : forward(p, w)) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
    }
    p.head.bias[0] = -1e4;
    for (double v : forward(p, w)) EXPECT_GT(v, 0.0);
}

TEST(Forward, BatchedEqualsOneByOne) {
    std::mt19937_64 rng(4);
    const ModelParams p = ModelParams::random(ModelDims{2, 3, 5, 6}, rng);
    std::vector<WindowSample> ws;
    for (int k = 0; k < 4; ++k) ws.push_back(random_window(rng, 20));
    std::vector<const WindowSample*> ptrs;
    for (const auto& w : ws) ptrs.push_back(&w);
    const auto batched = forward(p, make_batch(ptrs));
    for (std::size_t r = 0; r < ws.size(); ++r) {
        const auto single = forward(p, ws[r]);
        for (std::size_t t = 0; t < 20; ++t) EXPECT_NEAR(batched[t][r], single[t], 1e-14);
    }
}

TEST(Classify, ThresholdConventionAndMonotonicity) {
    const std::vector<double> p{0.5, 0.49, 0.95, 0.9, 0.1, 0.7};
    EXPECT_EQ(classify(p), (std::vector<bool>{true, false, true, true, false, true}));
    const auto low = classify(p, 0.5), high = classify(p, 0.9);
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_TRUE(!high[i] || low[i]);
    const std::vector<double> small{0.1, 0.2};
    EXPECT_EQ(classify(small), (std::vector<bool>{false, false}));
    EXPECT_THROW(classify(p, 1.0), std::invalid_argument);
    EXPECT_THROW(classify(p, 0.0), std::invalid_argument);
}

TEST(ModelParams, ArchitectureDimensions) {
    const ModelParams p = ModelParams::zeros(ModelDims{});
    EXPECT_EQ(p.embed_value.weight.shape(), (Tensor::Shape{32, 2}));
    EXPECT_EQ(p.embed_context.weight.shape(), (Tensor::Shape{32, 3}));
    EXPECT_EQ(p.forward_cell.input_dim(), 32u);
    EXPECT_EQ(p.forward_cell.hidden_dim(), 64u);
    EXPECT_EQ(p.head.weight.shape(), (Tensor::Shape{1, 128}));
    EXPECT_NO_THROW(p.validate());
    ModelParams bad = p;
    bad.head.weight = Tensor::matrix(1, 64);
    EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(PredictSeries, AnnotatesPresentReadingsOnly) {
    std::mt19937_64 rng(6);
    const ModelParams p = ModelParams::random(ModelDims{2, 3, 4, 4}, rng);
    SensorSeries s = days_of_data(2);
    s.readings[10].value.reset();
    const SensorSeries out = predict_series(p, s, 0.5, 1);
    for (std::size_t i = 0; i < out.readings.size(); ++i) {
        const Reading& r = out.readings[i];
        EXPECT_EQ(r.probability.has_value(), !r.missing());
        if (r.probability) {
            EXPECT_EQ(*r.predicted, *r.probability >= 0.5);
        }
    }
    const auto day0 = forward(p, featurize(s)[0]);
    EXPECT_EQ(out.readings[11].probability, day0[11]);
}
