#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace deepqc {

/// Dense row-major array of doubles. Rank 1 and 2 are the only ranks the
/// neural code uses; a rank-1 tensor of length n behaves as a 1 x n row.
class Tensor {
public:
    using Shape = std::vector<std::size_t>;

    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

    Tensor(Shape shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != element_count(shape_)) {
            throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_string(shape_));
        }
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
        return Tensor({rows, cols}, fill);
    }
    static Tensor vector(std::size_t n, double fill = 0.0) { return Tensor({n}, fill); }
    static Tensor row(std::vector<double> values) {
        const std::size_t n = values.size();
        return Tensor({1, n}, std::move(values));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::size_t rows() const noexcept {
        return shape_.size() == 2 ? shape_[0] : (shape_.empty() ? 0 : 1);
    }
    std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

    friend bool operator==(const Tensor&, const Tensor&) = default;

    static std::size_t element_count(const Shape& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
    }

    static std::string shape_string(const Shape& shape) {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << ']';
        return os.str();
    }

private:
    Shape shape_;
    std::vector<double> data_;
};

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.shape(), 0.0); }

namespace detail {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixView = Eigen::Map<RowMajor>;
using ConstMatrixView = Eigen::Map<const RowMajor>;
using ConstVectorView = Eigen::Map<const Eigen::RowVectorXd>;

inline MatrixView as_matrix(Tensor& t) {
    return MatrixView(t.data(), static_cast<Eigen::Index>(t.rows()),
                      static_cast<Eigen::Index>(t.cols()));
}
inline ConstMatrixView as_matrix(const Tensor& t) {
    return ConstMatrixView(t.data(), static_cast<Eigen::Index>(t.rows()),
                           static_cast<Eigen::Index>(t.cols()));
}

inline void require(bool ok, const char* op, const Tensor& a, const Tensor& b) {
    if (!ok) {
        throw std::invalid_argument(std::string(op) + ": dimension mismatch " +
                                    Tensor::shape_string(a.shape()) + " vs " +
                                    Tensor::shape_string(b.shape()));
    }
}

}  // namespace detail

/// Numerically stable logistic function; never overflows for any finite z.
inline double sigmoid(double z) noexcept {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

/// y = x W^T + b with x [batch x in], W [out x in], b [out] (b may be empty).
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    detail::require(weight.rank() == 2 && x.cols() == weight.cols(), "linear", x, weight);
    if (!bias.empty()) detail::require(bias.size() == weight.rows(), "linear bias", weight, bias);
    Tensor y = Tensor::matrix(x.rows(), weight.rows());
    auto out = detail::as_matrix(y);
    out.noalias() = detail::as_matrix(x) * detail::as_matrix(weight).transpose();
    if (!bias.empty()) {
        out.rowwise() += detail::ConstVectorView(bias.data(), static_cast<Eigen::Index>(bias.size()));
    }
    return y;
}

namespace detail {
using ArrayView = Eigen::Map<Eigen::ArrayXd>;
using ConstArrayView = Eigen::Map<const Eigen::ArrayXd>;
inline ArrayView as_array(Tensor& t) { return ArrayView(t.data(), static_cast<Eigen::Index>(t.size())); }
inline ConstArrayView as_array(const Tensor& t) {
    return ConstArrayView(t.data(), static_cast<Eigen::Index>(t.size()));
}
}  // namespace detail

/// Elementwise logistic, two-branch form on exp(-|z|) so it never overflows.
inline Tensor sigmoid(const Tensor& x) {
    Tensor y(x.shape());
    const auto a = detail::as_array(x);
    const Eigen::ArrayXd e = (-a.abs()).exp();
    detail::as_array(y) = (a >= 0.0).select(1.0 / (1.0 + e), e / (1.0 + e));
    return y;
}

/// Elementwise tanh as sign(z) (1 - e) / (1 + e) with e = exp(-2|z|); Eigen's
/// double tanh is not vectorised and dominates LSTM cost otherwise.
inline Tensor tanh(const Tensor& x) {
    Tensor y(x.shape());
    const auto a = detail::as_array(x);
    const Eigen::ArrayXd e = (-2.0 * a.abs()).exp();
    const Eigen::ArrayXd m = (1.0 - e) / (1.0 + e);
    detail::as_array(y) = (a >= 0.0).select(m, -m);
    return y;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require(a.size() == b.size() && a.cols() == b.cols(), "add", a, b);
    Tensor y(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
    return y;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require(a.size() == b.size() && a.cols() == b.cols(), "mul", a, b);
    Tensor y(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] * b[i];
    return y;
}

/// Column-wise concatenation of two matrices with equal row counts.
inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
    detail::require(a.rows() == b.rows(), "concat", a, b);
    const std::size_t rows = a.rows(), ca = a.cols(), cb = b.cols();
    Tensor y = Tensor::matrix(rows, ca + cb);
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(a.data() + r * ca, ca, y.data() + r * (ca + cb));
        std::copy_n(b.data() + r * cb, cb, y.data() + r * (ca + cb) + ca);
    }
    return y;
}

}  // namespace deepqc
