#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepqc/error.hpp"
#include "deepqc/tape.hpp"
#include "deepqc/tensor.hpp"

namespace deepqc {

/// Gate order used wherever the four gates are stored side by side.
namespace gate {
inline constexpr std::size_t forget = 0, input = 1, candidate = 2, output = 3;
}
inline constexpr std::array<const char*, 4> kGateNames{"f", "i", "c", "o"};

/// Weights of one LSTM cell with separate input and recurrent biases per gate:
///   gate = act(W_x* x + b_x* + W_h* h_prev + b_h*)
struct LstmCellParams {
    std::array<Tensor, 4> wx;  // hidden x input
    std::array<Tensor, 4> wh;  // hidden x hidden
    std::array<Tensor, 4> bx;  // hidden
    std::array<Tensor, 4> bh;  // hidden

    static LstmCellParams zeros(std::size_t input_dim, std::size_t hidden_dim) {
        LstmCellParams p;
        for (std::size_t g = 0; g < 4; ++g) {
            p.wx[g] = Tensor::matrix(hidden_dim, input_dim);
            p.wh[g] = Tensor::matrix(hidden_dim, hidden_dim);
            p.bx[g] = Tensor::vector(hidden_dim);
            p.bh[g] = Tensor::vector(hidden_dim);
        }
        return p;
    }

    std::size_t input_dim() const { return wx[0].cols(); }
    std::size_t hidden_dim() const { return wx[0].rows(); }

    void validate() const {
        const std::size_t in = input_dim(), hid = hidden_dim();
        for (std::size_t g = 0; g < 4; ++g) {
            if (wx[g].rank() != 2 || wx[g].rows() != hid || wx[g].cols() != in ||
                wh[g].rank() != 2 || wh[g].rows() != hid || wh[g].cols() != hid ||
                bx[g].size() != hid || bh[g].size() != hid) {
                throw std::invalid_argument(std::string("lstm params: inconsistent shapes for gate ") +
                                            kGateNames[g]);
            }
        }
    }

    /// Visits every tensor in a fixed order together with a stable name.
    template <typename Self, typename Fn>
    static void visit(Self& self, const std::string& prefix, Fn&& fn) {
        for (std::size_t g = 0; g < 4; ++g) fn(prefix + ".w_x" + kGateNames[g], self.wx[g]);
        for (std::size_t g = 0; g < 4; ++g) fn(prefix + ".w_h" + kGateNames[g], self.wh[g]);
        for (std::size_t g = 0; g < 4; ++g) fn(prefix + ".b_x" + kGateNames[g], self.bx[g]);
        for (std::size_t g = 0; g < 4; ++g) fn(prefix + ".b_h" + kGateNames[g], self.bh[g]);
    }

    friend bool operator==(const LstmCellParams&, const LstmCellParams&) = default;
};

/// Hidden output and cell state, each [batch x hidden].
struct LstmState {
    Tensor h;
    Tensor c;

    static LstmState zeros(std::size_t batch, std::size_t hidden) {
        return {Tensor::matrix(batch, hidden), Tensor::matrix(batch, hidden)};
    }
};

/// Gate activations of one step; exposed so callers can assert gate ranges.
struct LstmGates {
    Tensor f, i, c_tilde, o;
};

/// One LSTM step on a batch of inputs x [batch x input].
inline LstmState lstm_step(const LstmCellParams& p, const Tensor& x, const LstmState& prev,
                           LstmGates* gates = nullptr) {
    if (x.cols() != p.input_dim()) {
        throw std::invalid_argument("lstm_step: input width " + std::to_string(x.cols()) +
                                    " does not match cell input " + std::to_string(p.input_dim()));
    }
    if (prev.h.cols() != p.hidden_dim() || prev.c.cols() != p.hidden_dim() ||
        prev.h.rows() != x.rows() || prev.c.rows() != x.rows()) {
        throw std::invalid_argument("lstm_step: state shape does not match batch/hidden size");
    }
    auto pre = [&](std::size_t g) {
        return add(linear(x, p.wx[g], p.bx[g]), linear(prev.h, p.wh[g], p.bh[g]));
    };
    Tensor f = sigmoid(pre(gate::forget));
    Tensor i = sigmoid(pre(gate::input));
    Tensor c_tilde = tanh(pre(gate::candidate));
    Tensor c = add(mul(f, prev.c), mul(i, c_tilde));
    Tensor o = sigmoid(pre(gate::output));
    Tensor h = mul(o, tanh(c));
    if (!h.all_finite() || !c.all_finite()) throw NumericError("lstm_step: non-finite state");
    if (gates) *gates = {std::move(f), std::move(i), std::move(c_tilde), std::move(o)};
    return {std::move(h), std::move(c)};
}

/// Runs a forward cell left-to-right and a backward cell right-to-left, both
/// from zero state, and returns [h_fwd_t | h_bwd_t] for every step.
inline std::vector<Tensor> bilstm_forward(const LstmCellParams& fwd, const LstmCellParams& bwd,
                                          const std::vector<Tensor>& xs) {
    if (xs.empty()) throw std::invalid_argument("bilstm_forward: empty sequence");
    if (fwd.input_dim() != bwd.input_dim() || fwd.hidden_dim() != bwd.hidden_dim()) {
        throw std::invalid_argument("bilstm_forward: forward/backward cell dimensions differ");
    }
    const std::size_t steps = xs.size(), batch = xs.front().rows();
    std::vector<Tensor> hf(steps), hb(steps);
    LstmState s = LstmState::zeros(batch, fwd.hidden_dim());
    for (std::size_t t = 0; t < steps; ++t) {
        s = lstm_step(fwd, xs[t], s);
        hf[t] = s.h;
    }
    s = LstmState::zeros(batch, bwd.hidden_dim());
    for (std::size_t t = steps; t-- > 0;) {
        s = lstm_step(bwd, xs[t], s);
        hb[t] = s.h;
    }
    std::vector<Tensor> out(steps);
    for (std::size_t t = 0; t < steps; ++t) out[t] = concat_cols(hf[t], hb[t]);
    return out;
}

/// Tape handles for one cell's parameters.
struct LstmCellVars {
    std::array<Var, 4> wx, wh, bx, bh;

    static LstmCellVars on(Tape& tape, const LstmCellParams& p) {
        LstmCellVars v;
        for (std::size_t g = 0; g < 4; ++g) {
            v.wx[g] = tape.parameter(p.wx[g]);
            v.wh[g] = tape.parameter(p.wh[g]);
            v.bx[g] = tape.parameter(p.bx[g]);
            v.bh[g] = tape.parameter(p.bh[g]);
        }
        return v;
    }
};

struct LstmStateVars {
    Var h;
    Var c;
};

/// Recorded counterpart of lstm_step; values match the eager version bitwise.
inline LstmStateVars lstm_step(Tape& tape, const LstmCellVars& p, Var x, LstmStateVars prev) {
    auto pre = [&](std::size_t g) {
        return tape.add(tape.linear(x, p.wx[g], p.bx[g]), tape.linear(prev.h, p.wh[g], p.bh[g]));
    };
    Var f = tape.sigmoid(pre(gate::forget));
    Var i = tape.sigmoid(pre(gate::input));
    Var c_tilde = tape.tanh(pre(gate::candidate));
    Var c = tape.add(tape.mul(f, prev.c), tape.mul(i, c_tilde));
    Var o = tape.sigmoid(pre(gate::output));
    Var h = tape.mul(o, tape.tanh(c));
    return {h, c};
}

inline std::vector<Var> bilstm_forward(Tape& tape, const LstmCellVars& fwd, const LstmCellVars& bwd,
                                       std::size_t hidden, const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("bilstm_forward: empty sequence");
    const std::size_t steps = xs.size(), batch = tape.value(xs.front()).rows();
    std::vector<Var> hf(steps), hb(steps);
    const Var zero_f = tape.input(Tensor::matrix(batch, hidden), false);
    LstmStateVars s{zero_f, zero_f};
    for (std::size_t t = 0; t < steps; ++t) {
        s = lstm_step(tape, fwd, xs[t], s);
        hf[t] = s.h;
    }
    const Var zero_b = tape.input(Tensor::matrix(batch, hidden), false);
    s = {zero_b, zero_b};
    for (std::size_t t = steps; t-- > 0;) {
        s = lstm_step(tape, bwd, xs[t], s);
        hb[t] = s.h;
    }
    std::vector<Var> out(steps);
    for (std::size_t t = 0; t < steps; ++t) out[t] = tape.concat(hf[t], hb[t]);
    return out;
}

// ---------------------------------------------------------------------------
// Whole-sequence kernels. Inputs are time-major stacks: row t*batch + r holds
// step t of sequence r. The four gates are packed side by side (f, i, c, o) so
// every step costs one recurrent product, and the input projection and weight
// gradients are single products over the whole sequence.

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
// Temporaries must share the row-major layout or Eigen drops to scalar exp.
using RowArray = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct PackedCell {
    RowMatrix wx;           // 4H x input
    RowMatrix wh;           // 4H x H
    Eigen::RowVectorXd b;   // 4H, b_x + b_h

    PackedCell(const std::array<const Tensor*, 4>& wx_g, const std::array<const Tensor*, 4>& wh_g,
               const std::array<const Tensor*, 4>& bx_g, const std::array<const Tensor*, 4>& bh_g) {
        const auto hid = static_cast<Eigen::Index>(wx_g[0]->rows());
        const auto in = static_cast<Eigen::Index>(wx_g[0]->cols());
        wx.resize(4 * hid, in);
        wh.resize(4 * hid, hid);
        b.resize(4 * hid);
        for (std::size_t g = 0; g < 4; ++g) {
            const auto off = static_cast<Eigen::Index>(g) * hid;
            wx.middleRows(off, hid) = as_matrix(*wx_g[g]);
            wh.middleRows(off, hid) = as_matrix(*wh_g[g]);
            for (Eigen::Index j = 0; j < hid; ++j) b[off + j] = (*bx_g[g])[j] + (*bh_g[g])[j];
        }
    }
    explicit PackedCell(const LstmCellParams& p)
        : PackedCell({&p.wx[0], &p.wx[1], &p.wx[2], &p.wx[3]}, {&p.wh[0], &p.wh[1], &p.wh[2], &p.wh[3]},
                     {&p.bx[0], &p.bx[1], &p.bx[2], &p.bx[3]}, {&p.bh[0], &p.bh[1], &p.bh[2], &p.bh[3]}) {}

    Eigen::Index hidden() const { return wh.cols(); }
};

// Activations and states of one direction, rows in time order.
struct SequenceTrace {
    RowMatrix gates;   // f, i, c~, o
    RowMatrix c, tanh_c, h;
};

template <typename Block>
void sigmoid_inplace(Block&& z) {
    const RowArray e = (-z.array().abs()).exp();
    z = (z.array() >= 0.0).select(1.0 / (1.0 + e), e / (1.0 + e)).matrix();
}

template <typename Block>
void tanh_inplace(Block&& z) {
    const RowArray e = (-2.0 * z.array().abs()).exp();
    const RowArray m = (1.0 - e) / (1.0 + e);
    z = (z.array() >= 0.0).select(m, -m).matrix();
}

inline SequenceTrace run_sequence(const PackedCell& cell, const RowMatrix& x, std::size_t steps, bool reverse) {
    const auto batch = static_cast<Eigen::Index>(x.rows() / static_cast<Eigen::Index>(steps));
    const Eigen::Index hid = cell.hidden();
    SequenceTrace tr;
    tr.gates.noalias() = x * cell.wx.transpose();
    tr.gates.rowwise() += cell.b;
    tr.c.resize(x.rows(), hid);
    tr.tanh_c.resize(x.rows(), hid);
    tr.h.resize(x.rows(), hid);
    for (std::size_t k = 0; k < steps; ++k) {
        const std::size_t t = reverse ? steps - 1 - k : k;
        const Eigen::Index row = static_cast<Eigen::Index>(t) * batch;
        auto z = tr.gates.middleRows(row, batch);
        if (k > 0) {
            const Eigen::Index prev = static_cast<Eigen::Index>(reverse ? t + 1 : t - 1) * batch;
            z.noalias() += tr.h.middleRows(prev, batch) * cell.wh.transpose();
        }
        sigmoid_inplace(z.leftCols(2 * hid));
        tanh_inplace(z.middleCols(2 * hid, hid));
        sigmoid_inplace(z.rightCols(hid));
        auto c = tr.c.middleRows(row, batch);
        c = z.middleCols(hid, hid).cwiseProduct(z.middleCols(2 * hid, hid));
        if (k > 0) {
            const Eigen::Index prev = static_cast<Eigen::Index>(reverse ? t + 1 : t - 1) * batch;
            c += z.leftCols(hid).cwiseProduct(tr.c.middleRows(prev, batch));
        }
        auto tc = tr.tanh_c.middleRows(row, batch);
        tc = c;
        tanh_inplace(tc);
        tr.h.middleRows(row, batch) = z.rightCols(hid).cwiseProduct(tc);
    }
    if (!tr.h.allFinite() || !tr.c.allFinite()) throw NumericError("lstm: non-finite state");
    return tr;
}

// Gradients of one direction. `dh` is the loss gradient w.r.t. this
// direction's outputs; returns d(pre-activations) for every row.
inline RowMatrix backprop_sequence(const PackedCell& cell, const SequenceTrace& tr,
                                   const Eigen::Ref<const RowMatrix>& dh, std::size_t steps, bool reverse) {
    const Eigen::Index rows = tr.h.rows(), hid = cell.hidden();
    const auto batch = static_cast<Eigen::Index>(rows / static_cast<Eigen::Index>(steps));
    RowMatrix dz(rows, 4 * hid);
    RowMatrix dh_next = RowMatrix::Zero(batch, hid), dc_next = RowMatrix::Zero(batch, hid);
    for (std::size_t k = steps; k-- > 0;) {
        const std::size_t t = reverse ? steps - 1 - k : k;
        const Eigen::Index row = static_cast<Eigen::Index>(t) * batch;
        const auto z = tr.gates.middleRows(row, batch);
        const auto f = z.leftCols(hid).array(), i = z.middleCols(hid, hid).array();
        const auto g = z.middleCols(2 * hid, hid).array(), o = z.rightCols(hid).array();
        const auto tc = tr.tanh_c.middleRows(row, batch).array();
        const RowArray h_grad = dh.middleRows(row, batch).array() + dh_next.array();
        const RowArray c_grad = h_grad * o * (1.0 - tc * tc) + dc_next.array();
        auto out = dz.middleRows(row, batch);
        if (k > 0) {
            const Eigen::Index prev = static_cast<Eigen::Index>(reverse ? t + 1 : t - 1) * batch;
            out.leftCols(hid) = (c_grad * tr.c.middleRows(prev, batch).array() * f * (1.0 - f)).matrix();
        } else {
            out.leftCols(hid).setZero();
        }
        out.middleCols(hid, hid) = (c_grad * g * i * (1.0 - i)).matrix();
        out.middleCols(2 * hid, hid) = (c_grad * i * (1.0 - g * g)).matrix();
        out.rightCols(hid) = (h_grad * tc * o * (1.0 - o)).matrix();
        dc_next = (c_grad * f).matrix();
        dh_next.noalias() = out * cell.wh;
    }
    return dz;
}

// Previous hidden state for every row (zero at each sequence's first step).
inline RowMatrix previous_hidden(const SequenceTrace& tr, std::size_t steps, bool reverse) {
    const Eigen::Index rows = tr.h.rows();
    const auto batch = static_cast<Eigen::Index>(rows / static_cast<Eigen::Index>(steps));
    RowMatrix prev = RowMatrix::Zero(rows, tr.h.cols());
    if (reverse) {
        prev.topRows(rows - batch) = tr.h.bottomRows(rows - batch);
    } else {
        prev.bottomRows(rows - batch) = tr.h.topRows(rows - batch);
    }
    return prev;
}

inline void check_sequence_input(std::size_t rows, std::size_t cols, std::size_t steps, std::size_t input_dim) {
    if (steps == 0 || rows == 0 || rows % steps != 0) {
        throw std::invalid_argument("bilstm_sequence: " + std::to_string(rows) + " rows is not a whole number of " +
                                    std::to_string(steps) + " steps");
    }
    if (cols != input_dim) throw std::invalid_argument("bilstm_sequence: input width does not match cell input");
}

}  // namespace detail

/// BiLSTM over a time-major stack x [(steps*batch) x input]. Returns
/// [(steps*batch) x 2*hidden] with [h_fwd | h_bwd] per row; both directions
/// start from zero state.
inline Tensor bilstm_sequence(const LstmCellParams& fwd, const LstmCellParams& bwd, const Tensor& x,
                              std::size_t steps) {
    detail::check_sequence_input(x.rows(), x.cols(), steps, fwd.input_dim());
    const detail::RowMatrix xm = detail::as_matrix(x);
    const auto f = detail::run_sequence(detail::PackedCell(fwd), xm, steps, false);
    const auto b = detail::run_sequence(detail::PackedCell(bwd), xm, steps, true);
    const auto hid = static_cast<Eigen::Index>(fwd.hidden_dim());
    Tensor out = Tensor::matrix(x.rows(), 2 * fwd.hidden_dim());
    auto o = detail::as_matrix(out);
    o.leftCols(hid) = f.h;
    o.rightCols(hid) = b.h;
    return out;
}

/// Recorded counterpart of bilstm_sequence: one tape node with a hand-written
/// backpropagation-through-time adjoint.
inline Var bilstm_sequence(Tape& tape, const LstmCellVars& fwd, const LstmCellVars& bwd, Var x, std::size_t steps) {
    std::vector<Var> inputs{x};
    auto packed = [&](const LstmCellVars& v) {
        std::array<const Tensor*, 4> wx, wh, bx, bh;
        for (std::size_t g = 0; g < 4; ++g) {
            wx[g] = &tape.value(v.wx[g]);
            wh[g] = &tape.value(v.wh[g]);
            bx[g] = &tape.value(v.bx[g]);
            bh[g] = &tape.value(v.bh[g]);
            inputs.push_back(v.wx[g]);
        }
        for (auto* group : {&v.wh, &v.bx, &v.bh}) inputs.insert(inputs.end(), group->begin(), group->end());
        return detail::PackedCell(wx, wh, bx, bh);
    };
    // Input order: x, then per direction w_x[4], w_h[4], b_x[4], b_h[4].
    struct State {
        std::vector<detail::PackedCell> cells;
        detail::RowMatrix x;
        std::array<detail::SequenceTrace, 2> traces;
    };
    auto st = std::make_shared<State>();
    st->cells.push_back(packed(fwd));
    st->cells.push_back(packed(bwd));
    const Tensor& xv = tape.value(x);
    detail::check_sequence_input(xv.rows(), xv.cols(), steps, static_cast<std::size_t>(st->cells[0].wx.cols()));
    st->x = detail::as_matrix(xv);
    st->traces[0] = detail::run_sequence(st->cells[0], st->x, steps, false);
    st->traces[1] = detail::run_sequence(st->cells[1], st->x, steps, true);
    const Eigen::Index hid = st->cells[0].hidden();
    Tensor out = Tensor::matrix(xv.rows(), 2 * static_cast<std::size_t>(hid));
    auto o = detail::as_matrix(out);
    o.leftCols(hid) = st->traces[0].h;
    o.rightCols(hid) = st->traces[1].h;

    auto adjoint = [st, steps, hid](const Tensor& grad, std::span<Tensor* const> acc) {
        const auto gm = detail::as_matrix(grad);
        for (std::size_t d = 0; d < 2; ++d) {
            const bool reverse = d == 1;
            const detail::PackedCell& cell = st->cells[d];
            const detail::RowMatrix dh = gm.middleCols(static_cast<Eigen::Index>(d) * hid, hid);
            const detail::RowMatrix dz = detail::backprop_sequence(cell, st->traces[d], dh, steps, reverse);
            if (acc[0]) detail::as_matrix(*acc[0]).noalias() += dz * cell.wx;
            const detail::RowMatrix dwx = dz.transpose() * st->x;
            const detail::RowMatrix dwh = dz.transpose() * detail::previous_hidden(st->traces[d], steps, reverse);
            const Eigen::RowVectorXd db = dz.colwise().sum();
            const std::size_t base = 1 + 16 * d;
            for (std::size_t g = 0; g < 4; ++g) {
                const Eigen::Index off = static_cast<Eigen::Index>(g) * hid;
                if (Tensor* a = acc[base + g]) detail::as_matrix(*a) += dwx.middleRows(off, hid);
                if (Tensor* a = acc[base + 4 + g]) detail::as_matrix(*a) += dwh.middleRows(off, hid);
                for (std::size_t k : {base + 8 + g, base + 12 + g}) {
                    if (Tensor* a = acc[k]) {
                        for (Eigen::Index j = 0; j < hid; ++j) (*a)[static_cast<std::size_t>(j)] += db[off + j];
                    }
                }
            }
        }
    };
    return tape.custom(inputs, std::move(out), std::move(adjoint));
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) fill; biases share their
/// matrix's bound.
template <typename Rng>
void init_uniform(Tensor& t, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : t.values()) v = dist(rng);
}

template <typename Rng>
LstmCellParams init_lstm(std::size_t input_dim, std::size_t hidden_dim, Rng& rng) {
    LstmCellParams p = LstmCellParams::zeros(input_dim, hidden_dim);
    for (std::size_t g = 0; g < 4; ++g) {
        init_uniform(p.wx[g], input_dim, rng);
        init_uniform(p.bx[g], input_dim, rng);
        init_uniform(p.wh[g], hidden_dim, rng);
        init_uniform(p.bh[g], hidden_dim, rng);
    }
    return p;
}

}  // namespace deepqc
