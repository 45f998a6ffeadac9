#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <random>

#include "deepqc/lstm.hpp"
#include "oracles.hpp"

using namespace deepqc;

namespace {

std::vector<double> row(const Tensor& t, std::size_t r) {
    return {t.data() + r * t.cols(), t.data() + (r + 1) * t.cols()};
}

Tensor random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0) {
    std::uniform_real_distribution<double> u(-scale, scale);
    Tensor t = Tensor::matrix(rows, cols);
    for (double& v : t.values()) v = u(rng);
    return t;
}

}  // namespace

TEST(LstmStep, MatchesNaiveTranscriptionOnRandomCases) {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<std::size_t> dim(1, 6);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t in = dim(rng), hid = dim(rng), batch = dim(rng);
        const LstmCellParams p = init_lstm(in, hid, rng);
        const Tensor x = random_matrix(batch, in, rng, 2.0);
        const LstmState prev{random_matrix(batch, hid, rng), random_matrix(batch, hid, rng, 3.0)};
        LstmGates gates;
        const LstmState next = lstm_step(p, x, prev, &gates);
        for (std::size_t r = 0; r < batch; ++r) {
            const auto want = oracle::lstm_step(p, row(x, r), row(prev.h, r), row(prev.c, r));
            for (std::size_t j = 0; j < hid; ++j) {
                ASSERT_NEAR(next.h(r, j), want.h[j], 1e-12);
                ASSERT_NEAR(next.c(r, j), want.c[j], 1e-12);
                ASSERT_NEAR(gates.f(r, j), want.f[j], 1e-12);
                ASSERT_NEAR(gates.i(r, j), want.i[j], 1e-12);
                ASSERT_NEAR(gates.c_tilde(r, j), want.c_tilde[j], 1e-12);
                ASSERT_NEAR(gates.o(r, j), want.o[j], 1e-12);
            }
        }
    }
}

TEST(LstmStep, ZeroWeightsFromZeroState) {
    const LstmCellParams p = LstmCellParams::zeros(2, 3);
    LstmGates g;
    const LstmState s = lstm_step(p, Tensor::row({0.7, -1.2}), LstmState::zeros(1, 3), &g);
    for (std::size_t j = 0; j < 3; ++j) {
        EXPECT_EQ(g.f[j], 0.5);
        EXPECT_EQ(g.i[j], 0.5);
        EXPECT_EQ(g.o[j], 0.5);
        EXPECT_EQ(s.c[j], 0.0);
        EXPECT_EQ(s.h[j], 0.0);
    }
}

TEST(LstmStep, ZeroWeightsHalveTheCellState) {
    const LstmCellParams p = LstmCellParams::zeros(1, 2);
    LstmState prev = LstmState::zeros(1, 2);
    prev.c[0] = 1.6;
    prev.c[1] = -0.4;
    const LstmState s = lstm_step(p, Tensor::row({3.0}), prev);
    for (std::size_t j = 0; j < 2; ++j) {
        EXPECT_DOUBLE_EQ(s.c[j], 0.5 * prev.c[j]);
        EXPECT_DOUBLE_EQ(s.h[j], 0.5 * std::tanh(0.5 * prev.c[j]));
    }
}

TEST(LstmStep, GateRangesHoldUnderLargeInputs) {
    std::mt19937_64 rng(3);
    const LstmCellParams p = init_lstm(4, 5, rng);
    LstmState s = LstmState::zeros(2, 5);
    for (int step = 0; step < 50; ++step) {
        LstmGates g;
        s = lstm_step(p, random_matrix(2, 4, rng, 5.0), s, &g);
        for (std::size_t k = 0; k < 10; ++k) {
            EXPECT_GT(g.f[k], 0.0);
            EXPECT_LT(g.f[k], 1.0);
            EXPECT_GT(g.i[k], 0.0);
            EXPECT_LT(g.i[k], 1.0);
            EXPECT_GT(g.o[k], 0.0);
            EXPECT_LT(g.o[k], 1.0);
            EXPECT_GT(g.c_tilde[k], -1.0);
            EXPECT_LT(g.c_tilde[k], 1.0);
            EXPECT_LT(std::abs(s.h[k]), 1.0);
        }
    }
}

TEST(LstmStep, DimensionMismatch) {
    const LstmCellParams p = LstmCellParams::zeros(2, 3);
    EXPECT_THROW(lstm_step(p, Tensor::row({1.0}), LstmState::zeros(1, 3)), std::invalid_argument);
    EXPECT_THROW(lstm_step(p, Tensor::row({1.0, 2.0}), LstmState::zeros(2, 3)), std::invalid_argument);
    EXPECT_THROW(lstm_step(p, Tensor::row({1.0, 2.0}), LstmState::zeros(1, 4)), std::invalid_argument);
    LstmCellParams bad = p;
    bad.wh[2] = Tensor::matrix(3, 2);
    EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(BiLstm, SingleStepIsBothDirectionsFromZero) {
    std::mt19937_64 rng(8);
    const LstmCellParams f = init_lstm(3, 2, rng), b = init_lstm(3, 2, rng);
    const Tensor x = random_matrix(1, 3, rng);
    const auto out = bilstm_forward(f, b, {x});
    ASSERT_EQ(out.size(), 1u);
    const Tensor hf = lstm_step(f, x, LstmState::zeros(1, 2)).h;
    const Tensor hb = lstm_step(b, x, LstmState::zeros(1, 2)).h;
    EXPECT_EQ(out[0], concat_cols(hf, hb));
}

TEST(BiLstm, MatchesTwoNaiveUnidirectionalPasses) {
    std::mt19937_64 rng(9);
    const std::size_t in = 3, hid = 4, steps = 5;
    const LstmCellParams f = init_lstm(in, hid, rng), b = init_lstm(in, hid, rng);
    std::vector<Tensor> xs;
    for (std::size_t t = 0; t < steps; ++t) xs.push_back(random_matrix(1, in, rng));
    const auto out = bilstm_forward(f, b, xs);

    std::vector<std::vector<double>> fwd(steps), bwd(steps);
    std::vector<double> h(hid, 0.0), c(hid, 0.0);
    for (std::size_t t = 0; t < steps; ++t) {
        const auto s = oracle::lstm_step(f, row(xs[t], 0), h, c);
        h = s.h;
        c = s.c;
        fwd[t] = h;
    }
    h.assign(hid, 0.0);
    c.assign(hid, 0.0);
    for (std::size_t t = steps; t-- > 0;) {
        const auto s = oracle::lstm_step(b, row(xs[t], 0), h, c);
        h = s.h;
        c = s.c;
        bwd[t] = h;
    }
    for (std::size_t t = 0; t < steps; ++t) {
        ASSERT_EQ(out[t].cols(), 2 * hid);
        for (std::size_t j = 0; j < hid; ++j) {
            EXPECT_NEAR(out[t][j], fwd[t][j], 1e-12);
            EXPECT_NEAR(out[t][hid + j], bwd[t][j], 1e-12);
        }
    }
}

TEST(BiLstm, ReversingInputAndSwappingCellsMirrorsOutput) {
    std::mt19937_64 rng(10);
    const std::size_t hid = 3;
    const LstmCellParams f = init_lstm(2, hid, rng), b = init_lstm(2, hid, rng);
    std::vector<Tensor> xs;
    for (int t = 0; t < 6; ++t) xs.push_back(random_matrix(2, 2, rng));
    const auto out = bilstm_forward(f, b, xs);
    const std::vector<Tensor> rev(xs.rbegin(), xs.rend());
    const auto mirrored = bilstm_forward(b, f, rev);
    const std::size_t n = xs.size();
    for (std::size_t t = 0; t < n; ++t) {
        const Tensor& a = out[t];
        const Tensor& m = mirrored[n - 1 - t];
        for (std::size_t r = 0; r < 2; ++r) {
            for (std::size_t j = 0; j < hid; ++j) {
                EXPECT_EQ(a(r, j), m(r, hid + j));
                EXPECT_EQ(a(r, hid + j), m(r, j));
            }
        }
    }
}

TEST(BiLstm, EveryOutputDependsOnEveryInput) {
    std::mt19937_64 rng(12);
    const LstmCellParams f = init_lstm(2, 3, rng), b = init_lstm(2, 3, rng);
    std::vector<Tensor> xs;
    for (int t = 0; t < 7; ++t) xs.push_back(random_matrix(1, 2, rng));
    const auto base = bilstm_forward(f, b, xs);
    for (std::size_t s = 0; s < xs.size(); ++s) {
        auto perturbed = xs;
        perturbed[s][0] += 0.5;
        const auto out = bilstm_forward(f, b, perturbed);
        for (std::size_t t = 0; t < xs.size(); ++t) EXPECT_NE(out[t], base[t]) << "s=" << s << " t=" << t;
    }
}

TEST(BiLstm, DeterministicAndRejectsBadInput) {
    std::mt19937_64 rng(13);
    const LstmCellParams f = init_lstm(2, 3, rng), b = init_lstm(2, 3, rng);
    std::vector<Tensor> xs{random_matrix(1, 2, rng), random_matrix(1, 2, rng)};
    EXPECT_EQ(bilstm_forward(f, b, xs), bilstm_forward(f, b, xs));
    EXPECT_THROW(bilstm_forward(f, b, {}), std::invalid_argument);
    EXPECT_THROW(bilstm_forward(f, LstmCellParams::zeros(2, 4), xs), std::invalid_argument);
}

TEST(BiLstm, TapedForwardMatchesEagerBitwise) {
    std::mt19937_64 rng(14);
    const LstmCellParams f = init_lstm(2, 3, rng), b = init_lstm(2, 3, rng);
    std::vector<Tensor> xs;
    for (int t = 0; t < 4; ++t) xs.push_back(random_matrix(2, 2, rng));
    Tape tape;
    const auto fv = LstmCellVars::on(tape, f), bv = LstmCellVars::on(tape, b);
    std::vector<Var> xv;
    for (const auto& x : xs) xv.push_back(tape.input(x, false));
    const auto out = bilstm_forward(tape, fv, bv, 3, xv);
    const auto eager = bilstm_forward(f, b, xs);
    for (std::size_t t = 0; t < xs.size(); ++t) EXPECT_EQ(tape.value(out[t]), eager[t]);
}

namespace {

// Time-major stack of per-step inputs, row t*batch + r.
Tensor stack(const std::vector<Tensor>& xs) {
    const std::size_t batch = xs.front().rows(), in = xs.front().cols();
    Tensor out = Tensor::matrix(xs.size() * batch, in);
    for (std::size_t t = 0; t < xs.size(); ++t) std::copy_n(xs[t].data(), batch * in, out.data() + t * batch * in);
    return out;
}

}  // namespace

TEST(BiLstmSequence, MatchesStepwiseBiLstm) {
    std::mt19937_64 rng(17);
    for (auto [in, hid, batch, steps] : {std::array<std::size_t, 4>{3, 4, 2, 7}, {1, 1, 1, 1}, {5, 8, 3, 20}}) {
        const LstmCellParams f = init_lstm(in, hid, rng), b = init_lstm(in, hid, rng);
        std::vector<Tensor> xs;
        for (std::size_t t = 0; t < steps; ++t) xs.push_back(random_matrix(batch, in, rng, 2.0));
        const auto want = bilstm_forward(f, b, xs);
        const Tensor got = bilstm_sequence(f, b, stack(xs), steps);
        ASSERT_EQ(got.rows(), steps * batch);
        ASSERT_EQ(got.cols(), 2 * hid);
        for (std::size_t t = 0; t < steps; ++t) {
            for (std::size_t k = 0; k < batch * 2 * hid; ++k) {
                EXPECT_NEAR(got[t * batch * 2 * hid + k], want[t][k], 1e-12);
            }
        }
    }
}

TEST(BiLstmSequence, RejectsRaggedStacks) {
    std::mt19937_64 rng(1);
    const LstmCellParams f = init_lstm(2, 3, rng);
    EXPECT_THROW(bilstm_sequence(f, f, Tensor::matrix(7, 2), 3), std::invalid_argument);
    EXPECT_THROW(bilstm_sequence(f, f, Tensor::matrix(6, 3), 3), std::invalid_argument);
    EXPECT_THROW(bilstm_sequence(f, f, Tensor::matrix(6, 2), 0), std::invalid_argument);
}

TEST(BiLstmSequence, TapedGradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(5);
    const std::size_t in = 3, hid = 4, batch = 2, steps = 5;
    LstmCellParams f = init_lstm(in, hid, rng), b = init_lstm(in, hid, rng);
    Tensor x = random_matrix(steps * batch, in, rng);
    const Tensor probe = random_matrix(steps * batch, 2 * hid, rng);
    auto objective = [&] {
        const Tensor h = bilstm_sequence(f, b, x, steps);
        double total = 0.0;
        for (std::size_t k = 0; k < h.size(); ++k) total += probe[k] * h[k];
        return total;
    };
    Tape tape;
    const auto fv = LstmCellVars::on(tape, f), bv = LstmCellVars::on(tape, b);
    const Var xv = tape.parameter(x);
    const Var out = bilstm_sequence(tape, fv, bv, xv, steps);
    EXPECT_EQ(tape.value(out), bilstm_sequence(f, b, x, steps));
    tape.backward(out, probe);

    double worst = 0.0;
    auto check = [&](Tensor& t, Var v) {
        for (std::size_t k = 0; k < t.size(); ++k) {
            worst = std::max(worst, oracle::relative_error(tape.grad(v)[k], oracle::central_difference(objective, t[k])));
        }
    };
    check(x, xv);
    for (std::size_t g = 0; g < 4; ++g) {
        check(f.wx[g], fv.wx[g]);
        check(f.wh[g], fv.wh[g]);
        check(f.bx[g], fv.bx[g]);
        check(b.bh[g], bv.bh[g]);
        check(b.wh[g], bv.wh[g]);
    }
    EXPECT_LT(worst, 1e-6);
}

TEST(LstmInit, UniformWithinFanInBound) {
    std::mt19937_64 rng(1);
    const LstmCellParams p = init_lstm(4, 9, rng);
    for (std::size_t g = 0; g < 4; ++g) {
        for (double v : p.wx[g].values()) EXPECT_LE(std::abs(v), 0.5);
        for (double v : p.wh[g].values()) EXPECT_LE(std::abs(v), 1.0 / 3.0);
    }
    std::mt19937_64 again(1);
    EXPECT_EQ(init_lstm(4, 9, again), p);
}
