#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepqc/tensor.hpp"

namespace deepqc {

/// Lower/upper clamp applied to probabilities before taking logs.
inline constexpr double kProbabilityClamp = 1e-7;

/// Binary cross-entropy of one prediction, with the probability clamped to
/// [1e-7, 1 - 1e-7] so the log never diverges.
inline double binary_cross_entropy(double p, double y) noexcept {
    const double pc = std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
    return -(y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc));
}

/// Handle to a value recorded on a Tape.
struct Var {
    static constexpr std::size_t none = std::numeric_limits<std::size_t>::max();
    std::size_t id = none;
    bool valid() const noexcept { return id != none; }
};

/// Dynamic reverse-mode tape. Every op evaluates its forward value eagerly
/// (using the same kernels as the untaped functions, so values are bitwise
/// identical) and records enough to run the adjoint pass later.
///
/// Parameter leaves reference caller-owned tensors, which must outlive the tape.
class Tape {
public:
    Var input(Tensor value, bool requires_grad = true) {
        Node n;
        n.op = Op::leaf;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        return push(std::move(n));
    }

    Var parameter(const Tensor& value) {
        Node n;
        n.op = Op::leaf;
        n.ref = &value;
        n.requires_grad = true;
        return push(std::move(n));
    }

    Var linear(Var x, Var weight, Var bias = {}) {
        static const Tensor no_bias;
        Node n;
        n.op = Op::linear;
        n.a = x.id;
        n.b = weight.id;
        n.c = bias.id;
        n.value = deepqc::linear(value(x), value(weight), bias.valid() ? value(bias) : no_bias);
        n.requires_grad = needs(x) || needs(weight) || (bias.valid() && needs(bias));
        return push(std::move(n));
    }

    Var add(Var a, Var b) { return binary(Op::add, a, b, deepqc::add(value(a), value(b))); }
    Var mul(Var a, Var b) { return binary(Op::mul, a, b, deepqc::mul(value(a), value(b))); }
    Var concat(Var a, Var b) { return binary(Op::concat, a, b, concat_cols(value(a), value(b))); }
    Var sigmoid(Var a) { return unary(Op::sigmoid, a, deepqc::sigmoid(value(a))); }
    Var tanh(Var a) { return unary(Op::tanh, a, deepqc::tanh(value(a))); }

    /// Scalar sum_i scale_i * BCE(p_i, target_i) over every element of p.
    Var bce(Var p, std::span<const double> targets, std::span<const double> scales) {
        const Tensor& pv = value(p);
        if (targets.size() != pv.size() || scales.size() != pv.size()) {
            throw std::invalid_argument("bce: targets/scales length does not match predictions");
        }
        Node n;
        n.op = Op::bce;
        n.a = p.id;
        n.aux.reserve(2 * pv.size());
        n.aux.insert(n.aux.end(), targets.begin(), targets.end());
        n.aux.insert(n.aux.end(), scales.begin(), scales.end());
        double total = 0.0;
        for (std::size_t i = 0; i < pv.size(); ++i) {
            total += scales[i] * binary_cross_entropy(pv[i], targets[i]);
        }
        n.value = Tensor({1}, std::vector<double>{total});
        n.requires_grad = needs(p);
        return push(std::move(n));
    }

    /// Sum of scalar (single-element) vars.
    Var sum(std::span<const Var> terms) {
        Node n;
        n.op = Op::sum;
        double total = 0.0;
        for (Var t : terms) {
            const Tensor& v = value(t);
            if (v.size() != 1) throw std::invalid_argument("sum: terms must be scalars");
            total += v[0];
            n.inputs.push_back(t.id);
            n.requires_grad = n.requires_grad || needs(t);
        }
        n.value = Tensor({1}, std::vector<double>{total});
        return push(std::move(n));
    }

    /// Op with a caller-supplied adjoint. `backward` receives the output
    /// gradient and one accumulator per input (nullptr where none is needed).
    using CustomBackward = std::function<void(const Tensor& grad, std::span<Tensor* const> input_grads)>;

    Var custom(std::span<const Var> inputs, Tensor value, CustomBackward backward) {
        Node n;
        n.op = Op::custom;
        for (Var v : inputs) {
            n.inputs.push_back(node(v).requires_grad ? v.id : Var::none);
            n.requires_grad = n.requires_grad || needs(v);
        }
        n.value = std::move(value);
        n.adjoint = std::move(backward);
        return push(std::move(n));
    }

    const Tensor& value(Var v) const { return node(v).val(); }

    /// Gradient of the last backward() output w.r.t. v (zeros if v did not
    /// contribute).
    const Tensor& grad(Var v) const {
        const Node& n = node(v);
        if (!backward_done_) throw std::logic_error("grad requested before backward");
        if (n.grad.empty()) {
            n.grad = zeros_like(n.val());
        }
        return n.grad;
    }

    void backward(Var output) {
        const Tensor& out = value(output);
        if (out.size() != 1) {
            throw std::invalid_argument("backward without upstream requires a scalar output");
        }
        backward(output, Tensor(out.shape(), 1.0));
    }

    void backward(Var output, const Tensor& upstream) {
        if (nodes_.empty() || !output.valid() || output.id >= nodes_.size()) {
            throw std::logic_error("backward called without a recorded forward pass");
        }
        if (upstream.shape() != value(output).shape()) {
            throw std::invalid_argument("backward: upstream shape " +
                                        Tensor::shape_string(upstream.shape()) +
                                        " does not match output " +
                                        Tensor::shape_string(value(output).shape()));
        }
        for (auto& n : nodes_) n.grad = Tensor{};
        nodes_[output.id].grad = upstream;
        for (std::size_t i = output.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.grad.empty() || !n.requires_grad) continue;
            propagate(n);
        }
        backward_done_ = true;
    }

    std::size_t size() const noexcept { return nodes_.size(); }

    void clear() {
        nodes_.clear();
        backward_done_ = false;
    }

private:
    enum class Op { leaf, linear, add, mul, concat, sigmoid, tanh, bce, sum, custom };

    struct Node {
        Op op = Op::leaf;
        std::size_t a = Var::none, b = Var::none, c = Var::none;
        std::vector<std::size_t> inputs;
        std::vector<double> aux;
        Tensor value;
        const Tensor* ref = nullptr;
        mutable Tensor grad;
        bool requires_grad = false;
        CustomBackward adjoint;

        const Tensor& val() const { return ref ? *ref : value; }
    };

    const Node& node(Var v) const {
        if (!v.valid() || v.id >= nodes_.size()) throw std::out_of_range("var not on this tape");
        return nodes_[v.id];
    }

    bool needs(Var v) const { return node(v).requires_grad; }

    Var push(Node n) {
        backward_done_ = false;
        nodes_.push_back(std::move(n));
        return Var{nodes_.size() - 1};
    }

    Var unary(Op op, Var a, Tensor value) {
        Node n;
        n.op = op;
        n.a = a.id;
        n.value = std::move(value);
        n.requires_grad = needs(a);
        return push(std::move(n));
    }

    Var binary(Op op, Var a, Var b, Tensor value) {
        Node n;
        n.op = op;
        n.a = a.id;
        n.b = b.id;
        n.value = std::move(value);
        n.requires_grad = needs(a) || needs(b);
        return push(std::move(n));
    }

    // Returns the gradient accumulator of input `id`, or nullptr when the input
    // does not need a gradient.
    Tensor* accumulator(std::size_t id) {
        Node& in = nodes_[id];
        if (!in.requires_grad) return nullptr;
        if (in.grad.empty()) in.grad = zeros_like(in.val());
        return &in.grad;
    }

    void propagate(const Node& n) {
        const Tensor& g = n.grad;
        switch (n.op) {
        case Op::leaf:
            break;
        case Op::linear: {
            const Tensor& x = nodes_[n.a].val();
            const Tensor& w = nodes_[n.b].val();
            const auto gm = detail::as_matrix(g);
            if (Tensor* gx = accumulator(n.a)) {
                detail::as_matrix(*gx).noalias() += gm * detail::as_matrix(w);
            }
            if (Tensor* gw = accumulator(n.b)) {
                detail::as_matrix(*gw).noalias() += gm.transpose() * detail::as_matrix(x);
            }
            if (n.c != Var::none) {
                if (Tensor* gb = accumulator(n.c)) {
                    Eigen::Map<Eigen::RowVectorXd>(gb->data(), static_cast<Eigen::Index>(gb->size())) +=
                        gm.colwise().sum();
                }
            }
            break;
        }
        case Op::add:
            for (std::size_t id : {n.a, n.b}) {
                if (Tensor* acc = accumulator(id)) {
                    for (std::size_t i = 0; i < g.size(); ++i) (*acc)[i] += g[i];
                }
            }
            break;
        case Op::mul: {
            const Tensor& av = nodes_[n.a].val();
            const Tensor& bv = nodes_[n.b].val();
            if (Tensor* ga = accumulator(n.a)) {
                for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
            }
            if (Tensor* gb = accumulator(n.b)) {
                for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
            }
            break;
        }
        case Op::concat: {
            const std::size_t rows = n.value.rows(), cols = n.value.cols();
            const std::size_t ca = nodes_[n.a].val().cols();
            const std::size_t cb = cols - ca;
            if (Tensor* ga = accumulator(n.a)) {
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < ca; ++j) (*ga)[r * ca + j] += g[r * cols + j];
            }
            if (Tensor* gb = accumulator(n.b)) {
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < cb; ++j) (*gb)[r * cb + j] += g[r * cols + ca + j];
            }
            break;
        }
        case Op::sigmoid:
            if (Tensor* ga = accumulator(n.a)) {
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const double y = n.value[i];
                    (*ga)[i] += g[i] * y * (1.0 - y);
                }
            }
            break;
        case Op::tanh:
            if (Tensor* ga = accumulator(n.a)) {
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const double y = n.value[i];
                    (*ga)[i] += g[i] * (1.0 - y * y);
                }
            }
            break;
        case Op::bce:
            if (Tensor* ga = accumulator(n.a)) {
                const Tensor& p = nodes_[n.a].val();
                const std::size_t count = p.size();
                for (std::size_t i = 0; i < count; ++i) {
                    const double pi = p[i];
                    if (pi <= kProbabilityClamp || pi >= 1.0 - kProbabilityClamp) continue;
                    const double y = n.aux[i], scale = n.aux[count + i];
                    (*ga)[i] += g[0] * scale * (pi - y) / (pi * (1.0 - pi));
                }
            }
            break;
        case Op::sum:
            for (std::size_t id : n.inputs) {
                if (Tensor* acc = accumulator(id)) (*acc)[0] += g[0];
            }
            break;
        case Op::custom: {
            std::vector<Tensor*> accs;
            accs.reserve(n.inputs.size());
            for (std::size_t id : n.inputs) accs.push_back(id == Var::none ? nullptr : accumulator(id));
            n.adjoint(g, accs);
            break;
        }
        }
    }

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

}  // namespace deepqc
